#include "ref_interpreter.hpp"

#include <algorithm>
#include <span>
#include <string>

namespace refint {

using ctrv::engine::ExitStatus;
using ctrv::engine::GuestFault;
using ctrv::isa::DecodedInstruction;
using ctrv::isa::OpKind;

namespace {

struct ExitSignal {
    int code;
};

struct FaultSignal {
    GuestFault fault;
};

struct FuelSignal {};

int64_t asSigned(uint64_t v) { return static_cast<int64_t>(v); }

uint64_t sext32(uint64_t v) {
    return static_cast<uint64_t>(static_cast<int64_t>(static_cast<int32_t>(v)));
}

uint64_t sextWidth(uint64_t v, unsigned width) {
    switch (width) {
    case 1: return static_cast<uint64_t>(static_cast<int64_t>(static_cast<int8_t>(v)));
    case 2: return static_cast<uint64_t>(static_cast<int64_t>(static_cast<int16_t>(v)));
    case 4: return sext32(v);
    default: return v;
    }
}

constexpr uint64_t kErrBadFd = static_cast<uint64_t>(-9);
constexpr uint64_t kErrInval = static_cast<uint64_t>(-22);

}  // namespace

std::array<uint64_t, 32> RefInterpreter::snapshot() const {
    std::array<uint64_t, 32> out = regs_;
    out[0] = 0;
    return out;
}

void RefInterpreter::setInput(std::vector<uint8_t> bytes) {
    input_ = std::move(bytes);
    inputPos_ = 0;
}

void RefInterpreter::onAddress(uint64_t addr, std::function<void()> fn) {
    callbacks_[addr].push_back(std::move(fn));
}

uint64_t RefInterpreter::csrValue(uint32_t csr) const {
    if (csr == 0xC00 || csr == 0xC02) return retired_;
    return 0;
}

void RefInterpreter::atomicMemory(const DecodedInstruction& in) {
    const uint64_t addr = reg(in.rs1);
    if (addr % in.accessWidth != 0)
        throw FaultSignal{{GuestFault::Kind::MisalignedAtomic, addr, 0,
                           "misaligned atomic access"}};

    if (in.isLR) {
        const uint64_t value = mem_.loadUnsigned(addr, in.accessWidth);
        reservation_ = {true, addr, in.accessWidth, value};
        setReg(in.rd, sextWidth(value, in.accessWidth));
        return;
    }
    if (in.isSC) {
        const bool ok = reservation_.active && reservation_.addr == addr &&
                        reservation_.width == in.accessWidth &&
                        mem_.loadUnsigned(addr, in.accessWidth) == reservation_.saved;
        if (ok) mem_.store(addr, in.accessWidth, reg(in.rs2));
        setReg(in.rd, ok ? 0 : 1);
        reservation_.active = false;
        return;
    }

    const uint64_t old = mem_.loadUnsigned(addr, in.accessWidth);
    const uint64_t rhs = reg(in.rs2);
    uint64_t next = 0;
    if (in.accessWidth == 4) {
        const uint32_t a = static_cast<uint32_t>(old);
        const uint32_t b = static_cast<uint32_t>(rhs);
        const int32_t sa = static_cast<int32_t>(a);
        const int32_t sb = static_cast<int32_t>(b);
        switch (in.op) {
        case OpKind::AmoswapW: next = b; break;
        case OpKind::AmoaddW: next = a + b; break;
        case OpKind::AmoxorW: next = a ^ b; break;
        case OpKind::AmoandW: next = a & b; break;
        case OpKind::AmoorW: next = a | b; break;
        case OpKind::AmominW: next = static_cast<uint32_t>(sa < sb ? sa : sb); break;
        case OpKind::AmomaxW: next = static_cast<uint32_t>(sa > sb ? sa : sb); break;
        case OpKind::AmominuW: next = a < b ? a : b; break;
        case OpKind::AmomaxuW: next = a > b ? a : b; break;
        default: break;
        }
    } else {
        const int64_t sa = asSigned(old);
        const int64_t sb = asSigned(rhs);
        switch (in.op) {
        case OpKind::AmoswapD: next = rhs; break;
        case OpKind::AmoaddD: next = old + rhs; break;
        case OpKind::AmoxorD: next = old ^ rhs; break;
        case OpKind::AmoandD: next = old & rhs; break;
        case OpKind::AmoorD: next = old | rhs; break;
        case OpKind::AmominD: next = static_cast<uint64_t>(sa < sb ? sa : sb); break;
        case OpKind::AmomaxD: next = static_cast<uint64_t>(sa > sb ? sa : sb); break;
        case OpKind::AmominuD: next = old < rhs ? old : rhs; break;
        case OpKind::AmomaxuD: next = old > rhs ? old : rhs; break;
        default: break;
        }
    }
    mem_.store(addr, in.accessWidth, next);
    setReg(in.rd, sextWidth(old, in.accessWidth));
}

void RefInterpreter::step() {
    const std::span<const uint8_t> bytes = mem_.fetch(pc_);
    const DecodedInstruction in = ctrv::isa::decode(bytes, pc_);
    uint64_t next = pc_ + in.length;

    const uint64_t a = reg(in.rs1);
    const uint64_t b = reg(in.rs2);
    const uint64_t imm = static_cast<uint64_t>(in.imm);

    if (in.isLR || in.isSC || in.isAMO) {
        atomicMemory(in);
    } else if (in.isLoad) {
        const uint64_t addr = a + imm;
        const uint64_t raw = mem_.loadUnsigned(addr, in.accessWidth);
        const bool zeroExtend = in.op == OpKind::Lbu || in.op == OpKind::Lhu ||
                                in.op == OpKind::Lwu;
        setReg(in.rd, zeroExtend ? raw : sextWidth(raw, in.accessWidth));
    } else if (in.isStore) {
        mem_.store(a + imm, in.accessWidth, b);
    } else if (in.isCondBranch) {
        bool taken = false;
        switch (in.op) {
        case OpKind::Beq: taken = a == b; break;
        case OpKind::Bne: taken = a != b; break;
        case OpKind::Blt: taken = asSigned(a) < asSigned(b); break;
        case OpKind::Bge: taken = asSigned(a) >= asSigned(b); break;
        case OpKind::Bltu: taken = a < b; break;
        case OpKind::Bgeu: taken = a >= b; break;
        default: break;
        }
        if (taken) next = pc_ + imm;
    } else if (in.isDirectJump) {
        setReg(in.rd, pc_ + in.length);
        next = pc_ + imm;
    } else if (in.isIndirectJump) {
        const uint64_t target = (a + imm) & ~uint64_t{1};
        setReg(in.rd, pc_ + in.length);
        next = target;
    } else {
        switch (in.op) {
        case OpKind::Lui: setReg(in.rd, imm); break;
        case OpKind::Auipc: setReg(in.rd, pc_ + imm); break;
        case OpKind::Addi: setReg(in.rd, a + imm); break;
        case OpKind::Slti: setReg(in.rd, asSigned(a) < in.imm ? 1 : 0); break;
        case OpKind::Sltiu: setReg(in.rd, a < imm ? 1 : 0); break;
        case OpKind::Xori: setReg(in.rd, a ^ imm); break;
        case OpKind::Ori: setReg(in.rd, a | imm); break;
        case OpKind::Andi: setReg(in.rd, a & imm); break;
        case OpKind::Slli: setReg(in.rd, a << (imm & 63)); break;
        case OpKind::Srli: setReg(in.rd, a >> (imm & 63)); break;
        case OpKind::Srai: setReg(in.rd, static_cast<uint64_t>(asSigned(a) >> (imm & 63))); break;
        case OpKind::Addiw: setReg(in.rd, sext32(a + imm)); break;
        case OpKind::Slliw: setReg(in.rd, sext32(a << (imm & 31))); break;
        case OpKind::Srliw:
            setReg(in.rd, sext32(static_cast<uint32_t>(a) >> (imm & 31)));
            break;
        case OpKind::Sraiw:
            setReg(in.rd,
                   static_cast<uint64_t>(static_cast<int64_t>(
                       static_cast<int32_t>(a) >> (imm & 31))));
            break;
        case OpKind::Add: setReg(in.rd, a + b); break;
        case OpKind::Sub: setReg(in.rd, a - b); break;
        case OpKind::Sll: setReg(in.rd, a << (b & 63)); break;
        case OpKind::Slt: setReg(in.rd, asSigned(a) < asSigned(b) ? 1 : 0); break;
        case OpKind::Sltu: setReg(in.rd, a < b ? 1 : 0); break;
        case OpKind::Xor: setReg(in.rd, a ^ b); break;
        case OpKind::Srl: setReg(in.rd, a >> (b & 63)); break;
        case OpKind::Sra: setReg(in.rd, static_cast<uint64_t>(asSigned(a) >> (b & 63))); break;
        case OpKind::Or: setReg(in.rd, a | b); break;
        case OpKind::And: setReg(in.rd, a & b); break;
        case OpKind::Addw: setReg(in.rd, sext32(a + b)); break;
        case OpKind::Subw: setReg(in.rd, sext32(a - b)); break;
        case OpKind::Sllw: setReg(in.rd, sext32(a << (b & 31))); break;
        case OpKind::Srlw: setReg(in.rd, sext32(static_cast<uint32_t>(a) >> (b & 31))); break;
        case OpKind::Sraw:
            setReg(in.rd,
                   static_cast<uint64_t>(static_cast<int64_t>(
                       static_cast<int32_t>(a) >> (b & 31))));
            break;
        case OpKind::Mul: setReg(in.rd, a * b); break;
        case OpKind::Mulh: {
            const __int128 p = static_cast<__int128>(asSigned(a)) * asSigned(b);
            setReg(in.rd, static_cast<uint64_t>(p >> 64));
            break;
        }
        case OpKind::Mulhsu: {
            const __int128 p = static_cast<__int128>(asSigned(a)) *
                               static_cast<unsigned __int128>(b);
            setReg(in.rd, static_cast<uint64_t>(p >> 64));
            break;
        }
        case OpKind::Mulhu: {
            const unsigned __int128 p = static_cast<unsigned __int128>(a) * b;
            setReg(in.rd, static_cast<uint64_t>(p >> 64));
            break;
        }
        case OpKind::Div:
            if (b == 0) setReg(in.rd, UINT64_MAX);
            else if (asSigned(a) == INT64_MIN && asSigned(b) == -1) setReg(in.rd, a);
            else setReg(in.rd, static_cast<uint64_t>(asSigned(a) / asSigned(b)));
            break;
        case OpKind::Divu: setReg(in.rd, b == 0 ? UINT64_MAX : a / b); break;
        case OpKind::Rem:
            if (b == 0) setReg(in.rd, a);
            else if (asSigned(a) == INT64_MIN && asSigned(b) == -1) setReg(in.rd, 0);
            else setReg(in.rd, static_cast<uint64_t>(asSigned(a) % asSigned(b)));
            break;
        case OpKind::Remu: setReg(in.rd, b == 0 ? a : a % b); break;
        case OpKind::Mulw: setReg(in.rd, sext32(a * b)); break;
        case OpKind::Divw: {
            const int32_t sa = static_cast<int32_t>(a);
            const int32_t sb = static_cast<int32_t>(b);
            if (sb == 0) setReg(in.rd, UINT64_MAX);
            else if (sa == INT32_MIN && sb == -1) setReg(in.rd, sext32(static_cast<uint32_t>(sa)));
            else setReg(in.rd, static_cast<uint64_t>(static_cast<int64_t>(sa / sb)));
            break;
        }
        case OpKind::Divuw: {
            const uint32_t ua = static_cast<uint32_t>(a);
            const uint32_t ub = static_cast<uint32_t>(b);
            setReg(in.rd, ub == 0 ? UINT64_MAX : sext32(ua / ub));
            break;
        }
        case OpKind::Remw: {
            const int32_t sa = static_cast<int32_t>(a);
            const int32_t sb = static_cast<int32_t>(b);
            if (sb == 0) setReg(in.rd, sext32(a));
            else if (sa == INT32_MIN && sb == -1) setReg(in.rd, 0);
            else setReg(in.rd, static_cast<uint64_t>(static_cast<int64_t>(sa % sb)));
            break;
        }
        case OpKind::Remuw: {
            const uint32_t ua = static_cast<uint32_t>(a);
            const uint32_t ub = static_cast<uint32_t>(b);
            setReg(in.rd, ub == 0 ? sext32(a) : sext32(ua % ub));
            break;
        }
        case OpKind::Fence:
        case OpKind::FenceI:
            break;
        case OpKind::Csrrw:
        case OpKind::Csrrs:
        case OpKind::Csrrc:
        case OpKind::Csrrwi:
        case OpKind::Csrrsi:
        case OpKind::Csrrci:
            setReg(in.rd, csrValue(static_cast<uint32_t>(in.imm)));
            break;
        case OpKind::Ecall:
            syscall();
            break;
        case OpKind::Ebreak:
            throw FaultSignal{{GuestFault::Kind::Breakpoint, pc_, 0, "ebreak executed"}};
        default:
            break;
        }
    }

    pc_ = next;
    ++retired_;
    if (retired_ >= fuelLimit_) throw FuelSignal{};
}

void RefInterpreter::syscall() {
    const uint64_t num = reg(17);
    const uint64_t a0 = reg(10);
    const uint64_t a1 = reg(11);
    const uint64_t a2 = reg(12);
    const uint64_t a3 = reg(13);
    uint64_t result = 0;

    switch (num) {
    case 63:  // read
        if (a0 == 3) {
            const size_t n = std::min<size_t>(a2, input_.size() - inputPos_);
            if (n) {
                mem_.writeBytes(a1, std::span(input_.data() + inputPos_, n));
                inputPos_ += n;
            }
            result = n;
        } else if (a0 == 0) {
            result = 0;
        } else {
            result = kErrBadFd;
        }
        break;
    case 64:  // write
        if (a0 == 1 || a0 == 2) {
            std::vector<uint8_t> buf(a2);
            mem_.readBytes(a1, buf);
            auto& sink = a0 == 1 ? stdoutBytes_ : stderrBytes_;
            sink.insert(sink.end(), buf.begin(), buf.end());
            result = a2;
        } else {
            result = kErrBadFd;
        }
        break;
    case 80: {  // fstat
        if (a0 > 3) {
            result = kErrBadFd;
            break;
        }
        std::array<uint8_t, 128> st{};
        const uint32_t mode = a0 == 3 ? 0100444 : 0020620;
        const uint64_t size = a0 == 3 ? input_.size() : 0;
        for (int i = 0; i < 4; ++i) st[16 + i] = static_cast<uint8_t>(mode >> (8 * i));
        for (int i = 0; i < 8; ++i) st[48 + i] = static_cast<uint8_t>(size >> (8 * i));
        mem_.writeBytes(a1, st);
        result = 0;
        break;
    }
    case 93:  // exit
    case 94:  // exit_group
        throw ExitSignal{static_cast<int>(a0)};
    case 214:  // brk
        result = mem_.setBrk(a0);
        break;
    case 215:  // munmap
        result = mem_.unmap(a0) ? 0 : kErrInval;
        break;
    case 222: {  // mmap
        if (!(a3 & 0x20))
            throw FaultSignal{{GuestFault::Kind::UnsupportedSyscall, 0, num,
                               "mmap without MAP_ANONYMOUS is not supported"}};
        if (a1 == 0) {
            result = kErrInval;
            break;
        }
        uint8_t perms = 0;
        if (a2 & 1) perms |= ctrv::loader::PermRead;
        if (a2 & 2) perms |= ctrv::loader::PermWrite;
        if (a2 & 4) perms |= ctrv::loader::PermExec;
        const uint64_t base = mem_.mmapCursor();
        const uint64_t size = ctrv::loader::pageCeil(a1);
        mem_.map(base, size, perms);
        mem_.setMmapCursor(base + size);
        result = base;
        break;
    }
    default:
        throw FaultSignal{{GuestFault::Kind::UnsupportedSyscall, 0, num,
                           "unsupported syscall " + std::to_string(num)}};
    }

    setReg(10, result);
}

ExitStatus RefInterpreter::run(uint64_t entry, uint64_t fuel) {
    const uint64_t startRetired = retired_;
    fuelLimit_ = startRetired + fuel;
    pc_ = entry;

    auto finish = [&](ExitStatus status) {
        status.instructionsRetired = retired_ - startRetired;
        return status;
    };

    try {
        for (;;) {
            auto it = callbacks_.find(pc_);
            if (it != callbacks_.end()) {
                for (const auto& fn : it->second) fn();
            }
            step();
        }
    } catch (const ExitSignal& e) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::Exited;
        s.exitCode = e.code;
        return finish(s);
    } catch (const FaultSignal& e) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::Fault;
        s.fault = e.fault;
        return finish(s);
    } catch (const ctrv::loader::MemoryFault& f) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::Fault;
        GuestFault g;
        g.kind = f.kind == ctrv::loader::MemoryFault::Kind::Unmapped
                     ? GuestFault::Kind::MemoryUnmapped
                     : GuestFault::Kind::MemoryProtection;
        g.addr = f.addr;
        g.message = "memory fault";
        s.fault = g;
        return finish(s);
    } catch (const ctrv::isa::DecodeError&) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::Fault;
        s.fault = GuestFault{GuestFault::Kind::DecodeFault, pc_, 0, "undecodable instruction"};
        return finish(s);
    } catch (const FuelSignal&) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::FuelExhausted;
        return finish(s);
    }
}

}  // namespace refint
