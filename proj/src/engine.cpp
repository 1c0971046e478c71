#include "ctrv/engine.hpp"

#include <algorithm>
#include <cassert>
#include <sstream>

namespace ctrv::engine {

using isa::DecodedInstruction;
using isa::OpKind;

namespace {

// Linux RISC-V syscall numbers.
constexpr uint64_t kSysRead = 63;
constexpr uint64_t kSysWrite = 64;
constexpr uint64_t kSysFstat = 80;
constexpr uint64_t kSysExit = 93;
constexpr uint64_t kSysExitGroup = 94;
constexpr uint64_t kSysBrk = 214;
constexpr uint64_t kSysMunmap = 215;
constexpr uint64_t kSysMmap = 222;

constexpr uint64_t kEbadf = static_cast<uint64_t>(-9);
constexpr uint64_t kEinval = static_cast<uint64_t>(-22);

constexpr uint32_t kMapAnonymous = 0x20;

struct GuestExit {
    int code;
};

struct GuestFaultSignal {
    GuestFault fault;
};

struct FuelExhaustedSignal {};

int64_t sext32(uint64_t v) { return static_cast<int32_t>(v); }

uint64_t sextWidth(uint64_t v, unsigned width) {
    switch (width) {
    case 1: return static_cast<uint64_t>(static_cast<int64_t>(static_cast<int8_t>(v)));
    case 2: return static_cast<uint64_t>(static_cast<int64_t>(static_cast<int16_t>(v)));
    case 4: return static_cast<uint64_t>(static_cast<int64_t>(static_cast<int32_t>(v)));
    default: return v;
    }
}

}  // namespace

NotExecutableError::NotExecutableError(uint64_t addr)
    : std::runtime_error([&] {
          std::ostringstream os;
          os << "no executable mapping at 0x" << std::hex << addr;
          return os.str();
      }()),
      addr_(addr) {}

BasicBlockRecord::Slot& BasicBlockRecord::slotFor(size_t index) {
    if (slots.size() <= index) slots.resize(instructions.size());
    if (!slots[index]) slots[index] = std::make_unique<Slot>();
    return *slots[index];
}

uint64_t BasicBlockRecord::endAddr() const {
    if (instructions.empty()) return startAddr;
    const auto& last = instructions.back();
    return last.address + last.length;
}

BasicBlockRecord* CodeCache::lookup(uint64_t addr) {
    auto it = blocks_.find(addr);
    return it == blocks_.end() ? nullptr : it->second.get();
}

BasicBlockRecord& CodeCache::insert(std::unique_ptr<BasicBlockRecord> block) {
    uint64_t addr = block->startAddr;
    auto [it, fresh] = blocks_.emplace(addr, std::move(block));
    assert(fresh);
    return *it->second;
}

std::vector<AtomicViolation> validateAtomicSequence(
    std::span<const DecodedInstruction> between) {
    std::vector<AtomicViolation> out;
    auto add = [&](AtomicViolation v) {
        if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    };

    if (between.size() > Engine::kMaxAtomicLookahead) add(AtomicViolation::TooLong);
    for (const auto& in : between) {
        if (isa::extensionOf(in.op) != isa::Extension::I) add(AtomicViolation::NonBaseInstruction);
        if (in.isLoad) add(AtomicViolation::Load);
        if (in.isStore) add(AtomicViolation::Store);
        if (in.isDirectJump) {
            if (in.isCall()) {
                add(AtomicViolation::Call);
            } else if (in.address + static_cast<uint64_t>(in.imm) <= in.address) {
                add(AtomicViolation::BackwardJump);
            }
        } else if (in.isIndirectJump) {
            // Target unknown until run time; treat non-calls as potentially
            // backward.
            add(in.isCall() ? AtomicViolation::Call : AtomicViolation::BackwardJump);
        }
        // Conditional branches are fine: retry loops branch backwards on
        // failure, and a taken branch simply leaves the sequence.
    }
    return out;
}

void Engine::registerImage(const loader::LoadedImage& image) {
    hooks_.fireVmMap(image);
}

void Engine::hookFunction(uint64_t addr) {
    if (std::find(hookedFunctions_.begin(), hookedFunctions_.end(), addr) ==
        hookedFunctions_.end())
        hookedFunctions_.push_back(addr);
}

void Engine::setInputStream(std::vector<uint8_t> bytes) {
    inputStream_ = std::move(bytes);
    inputPos_ = 0;
}

std::unique_ptr<BasicBlockRecord> Engine::decodeBlock(uint64_t addr) {
    auto block = std::make_unique<BasicBlockRecord>();
    block->startAddr = addr;

    uint64_t pc = addr;
    std::optional<size_t> lrIndex;
    for (;;) {
        if (block->instructions.size() >= kMaxBlockInstructions) {
            block->terminator.kind = Terminator::Kind::DirectJump;
            block->terminator.takenTarget = pc;
            block->terminator.synthetic = true;
            break;
        }

        DecodedInstruction d;
        try {
            d = isa::decode(mem_.fetch(pc), pc);
        } catch (const loader::MemoryFault&) {
            if (block->instructions.empty()) throw NotExecutableError(pc);
            block->terminator.kind = Terminator::Kind::Halt;
            block->terminator.haltReason = Terminator::HaltReason::DecodeFault;
            block->terminator.haltAddr = pc;
            break;
        } catch (const isa::DecodeError&) {
            block->terminator.kind = Terminator::Kind::Halt;
            block->terminator.haltReason = Terminator::HaltReason::DecodeFault;
            block->terminator.haltAddr = pc;
            break;
        }

        block->instructions.push_back(d);
        if (d.isLR && !lrIndex) lrIndex = block->instructions.size() - 1;
        pc += d.length;

        if (d.isCondBranch) {
            block->terminator.kind = Terminator::Kind::ConditionalBranch;
            block->terminator.takenTarget = d.address + static_cast<uint64_t>(d.imm);
            block->terminator.fallthroughTarget = pc;
            break;
        }
        if (d.isDirectJump) {
            block->terminator.kind = Terminator::Kind::DirectJump;
            block->terminator.takenTarget = d.address + static_cast<uint64_t>(d.imm);
            break;
        }
        if (d.isIndirectJump) {
            block->terminator.kind = Terminator::Kind::IndirectJump;
            break;
        }
        if (d.op == OpKind::Ecall) {
            block->terminator.kind = Terminator::Kind::Syscall;
            block->terminator.fallthroughTarget = pc;
            break;
        }
        if (d.op == OpKind::Ebreak) {
            block->terminator.kind = Terminator::Kind::Halt;
            block->terminator.haltReason = Terminator::HaltReason::Breakpoint;
            block->terminator.haltAddr = d.address;
            break;
        }
    }

    if (lrIndex) analyzeAtomic(*block, *lrIndex);
    return block;
}

// Scans the straight-line window after an LR for the matching SC. The window
// intentionally ignores control flow: a retry branch inside the sequence
// re-enters it from the top, so the linear shape is what the constraints
// are defined over.
void Engine::analyzeAtomic(BasicBlockRecord& block, size_t lrIndex) {
    AtomicSequenceInfo info;
    info.lrIndex = lrIndex;

    std::vector<DecodedInstruction> between;
    uint64_t pc = block.instructions[lrIndex].address + block.instructions[lrIndex].length;
    size_t blockPos = lrIndex + 1;
    for (size_t step = 0; step <= kMaxAtomicLookahead; ++step) {
        DecodedInstruction d;
        if (blockPos < block.instructions.size()) {
            d = block.instructions[blockPos++];
        } else {
            try {
                d = isa::decode(mem_.fetch(pc), pc);
            } catch (const loader::MemoryFault&) {
                break;
            } catch (const isa::DecodeError&) {
                break;
            }
        }
        pc = d.address + d.length;
        if (d.isSC) {
            info.scFound = true;
            break;
        }
        between.push_back(d);
    }

    info.sequenceLength = static_cast<uint32_t>(between.size());
    info.violations = validateAtomicSequence(between);
    if (!info.scFound && info.violations.empty())
        info.violations.push_back(AtomicViolation::TooLong);
    block.atomicInfo = std::move(info);
}

BasicBlockRecord& Engine::scanBlock(uint64_t addr) {
    if (BasicBlockRecord* hit = cache_.lookup(addr)) {
        ++cache_.stats().lookupHits;
        return *hit;
    }
    ++cache_.stats().lookupMisses;
    BasicBlockRecord& block = cache_.insert(decodeBlock(addr));
    ++cache_.stats().blocksDecoded;
    hooks_.fireBlockScan(block);
    return block;
}

void Engine::linkBlocks(BasicBlockRecord& block) {
    auto tryLink = [&](int slot, uint64_t target) {
        if (block.links[slot]) return;
        if (BasicBlockRecord* t = cache_.lookup(target)) {
            block.links[slot] = t;
            ++cache_.stats().branchesLinked;
        }
    };
    switch (block.terminator.kind) {
    case Terminator::Kind::ConditionalBranch:
        tryLink(0, block.terminator.takenTarget);
        tryLink(1, block.terminator.fallthroughTarget);
        break;
    case Terminator::Kind::DirectJump:
        tryLink(0, block.terminator.takenTarget);
        break;
    case Terminator::Kind::Syscall:
        tryLink(1, block.terminator.fallthroughTarget);
        break;
    case Terminator::Kind::IndirectJump:
    case Terminator::Kind::Halt:
        break;
    }
}

void Engine::observeMem(BasicBlockRecord& block, size_t index, uint64_t instrAddr, uint64_t addr,
                        bool write) {
    if (index >= block.slots.size() || !block.slots[index]) return;
    for (const auto& fn : block.slots[index]->mem) fn(instrAddr, addr, write);
}

void Engine::emulateAtomic(const DecodedInstruction& in) {
    const uint64_t addr = regs_.get(in.rs1);
    if (addr % in.accessWidth != 0)
        throw GuestFaultSignal{{GuestFault::Kind::MisalignedAtomic, addr, 0,
                                "misaligned atomic access"}};

    if (in.isLR) {
        uint64_t value = mem_.loadUnsigned(addr, in.accessWidth);
        reservation_ = {true, addr, in.accessWidth, value};
        regs_.set(in.rd, sextWidth(value, in.accessWidth));
        return;
    }

    // SC: the store goes through only when memory still holds the value the
    // LR saw. A write that restored the original value in between is
    // indistinguishable and therefore succeeds.
    bool success = reservation_.active && reservation_.addr == addr &&
                   reservation_.width == in.accessWidth &&
                   mem_.loadUnsigned(addr, in.accessWidth) == reservation_.backupValue;
    if (success) mem_.store(addr, in.accessWidth, regs_.get(in.rs2));
    regs_.set(in.rd, success ? 0 : 1);
    reservation_.active = false;
}

uint64_t Engine::csrRead(uint32_t csr) const {
    switch (csr) {
    case 0xC00: return retired_;  // cycle: one instruction per cycle
    case 0xC01: return 0;         // time
    case 0xC02: return retired_;  // instret
    default: return 0;
    }
}

void Engine::execute(const DecodedInstruction& in) {
    auto& r = regs_;
    const uint64_t rs1 = r.get(in.rs1);
    const uint64_t rs2 = r.get(in.rs2);

    switch (in.op) {
    case OpKind::Lui: r.set(in.rd, static_cast<uint64_t>(in.imm)); break;
    case OpKind::Auipc: r.set(in.rd, in.address + static_cast<uint64_t>(in.imm)); break;

    case OpKind::Addi: r.set(in.rd, rs1 + static_cast<uint64_t>(in.imm)); break;
    case OpKind::Slti: r.set(in.rd, static_cast<int64_t>(rs1) < in.imm ? 1 : 0); break;
    case OpKind::Sltiu: r.set(in.rd, rs1 < static_cast<uint64_t>(in.imm) ? 1 : 0); break;
    case OpKind::Xori: r.set(in.rd, rs1 ^ static_cast<uint64_t>(in.imm)); break;
    case OpKind::Ori: r.set(in.rd, rs1 | static_cast<uint64_t>(in.imm)); break;
    case OpKind::Andi: r.set(in.rd, rs1 & static_cast<uint64_t>(in.imm)); break;
    case OpKind::Slli: r.set(in.rd, rs1 << (in.imm & 63)); break;
    case OpKind::Srli: r.set(in.rd, rs1 >> (in.imm & 63)); break;
    case OpKind::Srai: r.set(in.rd, static_cast<uint64_t>(static_cast<int64_t>(rs1) >> (in.imm & 63))); break;

    case OpKind::Addiw: r.set(in.rd, static_cast<uint64_t>(sext32(rs1 + static_cast<uint64_t>(in.imm)))); break;
    case OpKind::Slliw: r.set(in.rd, static_cast<uint64_t>(sext32(rs1 << (in.imm & 31)))); break;
    case OpKind::Srliw: r.set(in.rd, static_cast<uint64_t>(sext32(static_cast<uint32_t>(rs1) >> (in.imm & 31)))); break;
    case OpKind::Sraiw: r.set(in.rd, static_cast<uint64_t>(static_cast<int64_t>(static_cast<int32_t>(rs1) >> (in.imm & 31)))); break;

    case OpKind::Add: r.set(in.rd, rs1 + rs2); break;
    case OpKind::Sub: r.set(in.rd, rs1 - rs2); break;
    case OpKind::Sll: r.set(in.rd, rs1 << (rs2 & 63)); break;
    case OpKind::Slt: r.set(in.rd, static_cast<int64_t>(rs1) < static_cast<int64_t>(rs2) ? 1 : 0); break;
    case OpKind::Sltu: r.set(in.rd, rs1 < rs2 ? 1 : 0); break;
    case OpKind::Xor: r.set(in.rd, rs1 ^ rs2); break;
    case OpKind::Srl: r.set(in.rd, rs1 >> (rs2 & 63)); break;
    case OpKind::Sra: r.set(in.rd, static_cast<uint64_t>(static_cast<int64_t>(rs1) >> (rs2 & 63))); break;
    case OpKind::Or: r.set(in.rd, rs1 | rs2); break;
    case OpKind::And: r.set(in.rd, rs1 & rs2); break;

    case OpKind::Addw: r.set(in.rd, static_cast<uint64_t>(sext32(rs1 + rs2))); break;
    case OpKind::Subw: r.set(in.rd, static_cast<uint64_t>(sext32(rs1 - rs2))); break;
    case OpKind::Sllw: r.set(in.rd, static_cast<uint64_t>(sext32(rs1 << (rs2 & 31)))); break;
    case OpKind::Srlw: r.set(in.rd, static_cast<uint64_t>(sext32(static_cast<uint32_t>(rs1) >> (rs2 & 31)))); break;
    case OpKind::Sraw: r.set(in.rd, static_cast<uint64_t>(static_cast<int64_t>(static_cast<int32_t>(rs1) >> (rs2 & 31)))); break;

    case OpKind::Mul: r.set(in.rd, rs1 * rs2); break;
    case OpKind::Mulh:
        r.set(in.rd, static_cast<uint64_t>(
                         (static_cast<__int128>(static_cast<int64_t>(rs1)) *
                          static_cast<__int128>(static_cast<int64_t>(rs2))) >> 64));
        break;
    case OpKind::Mulhsu:
        r.set(in.rd, static_cast<uint64_t>(
                         (static_cast<__int128>(static_cast<int64_t>(rs1)) *
                          static_cast<unsigned __int128>(rs2)) >> 64));
        break;
    case OpKind::Mulhu:
        r.set(in.rd, static_cast<uint64_t>(
                         (static_cast<unsigned __int128>(rs1) *
                          static_cast<unsigned __int128>(rs2)) >> 64));
        break;
    case OpKind::Div: {
        auto a = static_cast<int64_t>(rs1), b = static_cast<int64_t>(rs2);
        if (b == 0) r.set(in.rd, UINT64_MAX);
        else if (a == INT64_MIN && b == -1) r.set(in.rd, rs1);
        else r.set(in.rd, static_cast<uint64_t>(a / b));
        break;
    }
    case OpKind::Divu: r.set(in.rd, rs2 == 0 ? UINT64_MAX : rs1 / rs2); break;
    case OpKind::Rem: {
        auto a = static_cast<int64_t>(rs1), b = static_cast<int64_t>(rs2);
        if (b == 0) r.set(in.rd, rs1);
        else if (a == INT64_MIN && b == -1) r.set(in.rd, 0);
        else r.set(in.rd, static_cast<uint64_t>(a % b));
        break;
    }
    case OpKind::Remu: r.set(in.rd, rs2 == 0 ? rs1 : rs1 % rs2); break;
    case OpKind::Mulw: r.set(in.rd, static_cast<uint64_t>(sext32(rs1 * rs2))); break;
    case OpKind::Divw: {
        auto a = static_cast<int32_t>(rs1), b = static_cast<int32_t>(rs2);
        if (b == 0) r.set(in.rd, UINT64_MAX);
        else if (a == INT32_MIN && b == -1) r.set(in.rd, static_cast<uint64_t>(sext32(static_cast<uint64_t>(a))));
        else r.set(in.rd, static_cast<uint64_t>(static_cast<int64_t>(a / b)));
        break;
    }
    case OpKind::Divuw: {
        auto a = static_cast<uint32_t>(rs1), b = static_cast<uint32_t>(rs2);
        r.set(in.rd, b == 0 ? UINT64_MAX : static_cast<uint64_t>(sext32(a / b)));
        break;
    }
    case OpKind::Remw: {
        auto a = static_cast<int32_t>(rs1), b = static_cast<int32_t>(rs2);
        if (b == 0) r.set(in.rd, static_cast<uint64_t>(sext32(rs1)));
        else if (a == INT32_MIN && b == -1) r.set(in.rd, 0);
        else r.set(in.rd, static_cast<uint64_t>(static_cast<int64_t>(a % b)));
        break;
    }
    case OpKind::Remuw: {
        auto a = static_cast<uint32_t>(rs1), b = static_cast<uint32_t>(rs2);
        r.set(in.rd, b == 0 ? static_cast<uint64_t>(sext32(rs1)) : static_cast<uint64_t>(sext32(a % b)));
        break;
    }

    case OpKind::Fence:
    case OpKind::FenceI:
        break;  // single hart, nothing to order

    case OpKind::Csrrw:
    case OpKind::Csrrs:
    case OpKind::Csrrc:
    case OpKind::Csrrwi:
    case OpKind::Csrrsi:
    case OpKind::Csrrci:
        // Read-only stubs: counters read through, writes are dropped.
        r.set(in.rd, csrRead(static_cast<uint32_t>(in.imm)));
        break;

    default:
        assert(false && "control flow and memory ops are handled by the caller");
    }
}

void Engine::executeInstr(BasicBlockRecord& block, size_t index) {
    const DecodedInstruction& in = block.instructions[index];

    if (in.isLR || in.isSC) {
        observeMem(block, index, in.address, regs_.get(in.rs1), in.isSC);
        emulateAtomic(in);
    } else if (in.isAMO) {
        const uint64_t addr = regs_.get(in.rs1);
        if (addr % in.accessWidth != 0)
            throw GuestFaultSignal{{GuestFault::Kind::MisalignedAtomic, addr, 0,
                                    "misaligned atomic access"}};
        observeMem(block, index, in.address, addr, true);
        const uint64_t old = mem_.loadUnsigned(addr, in.accessWidth);
        const uint64_t rhs = regs_.get(in.rs2);
        uint64_t stored;
        if (in.accessWidth == 4) {
            auto a = static_cast<int32_t>(old);
            auto b = static_cast<int32_t>(rhs);
            auto au = static_cast<uint32_t>(old);
            auto bu = static_cast<uint32_t>(rhs);
            uint32_t v = 0;
            switch (in.op) {
            case OpKind::AmoswapW: v = bu; break;
            case OpKind::AmoaddW: v = au + bu; break;
            case OpKind::AmoxorW: v = au ^ bu; break;
            case OpKind::AmoandW: v = au & bu; break;
            case OpKind::AmoorW: v = au | bu; break;
            case OpKind::AmominW: v = static_cast<uint32_t>(std::min(a, b)); break;
            case OpKind::AmomaxW: v = static_cast<uint32_t>(std::max(a, b)); break;
            case OpKind::AmominuW: v = std::min(au, bu); break;
            case OpKind::AmomaxuW: v = std::max(au, bu); break;
            default: assert(false);
            }
            stored = v;
        } else {
            auto a = static_cast<int64_t>(old);
            auto b = static_cast<int64_t>(rhs);
            switch (in.op) {
            case OpKind::AmoswapD: stored = rhs; break;
            case OpKind::AmoaddD: stored = old + rhs; break;
            case OpKind::AmoxorD: stored = old ^ rhs; break;
            case OpKind::AmoandD: stored = old & rhs; break;
            case OpKind::AmoorD: stored = old | rhs; break;
            case OpKind::AmominD: stored = static_cast<uint64_t>(std::min(a, b)); break;
            case OpKind::AmomaxD: stored = static_cast<uint64_t>(std::max(a, b)); break;
            case OpKind::AmominuD: stored = std::min(old, rhs); break;
            case OpKind::AmomaxuD: stored = std::max(old, rhs); break;
            default: assert(false); stored = 0;
            }
        }
        mem_.store(addr, in.accessWidth, stored);
        regs_.set(in.rd, sextWidth(old, in.accessWidth));
    } else if (in.isLoad) {
        const uint64_t addr = regs_.get(in.rs1) + static_cast<uint64_t>(in.imm);
        observeMem(block, index, in.address, addr, false);
        uint64_t v = mem_.loadUnsigned(addr, in.accessWidth);
        const bool sign = in.op == OpKind::Lb || in.op == OpKind::Lh || in.op == OpKind::Lw ||
                          in.op == OpKind::Ld;
        regs_.set(in.rd, sign ? sextWidth(v, in.accessWidth) : v);
    } else if (in.isStore) {
        const uint64_t addr = regs_.get(in.rs1) + static_cast<uint64_t>(in.imm);
        observeMem(block, index, in.address, addr, true);
        mem_.store(addr, in.accessWidth, regs_.get(in.rs2));
    } else {
        execute(in);
    }

    ++retired_;
    if (retired_ >= fuelLimit_) throw FuelExhaustedSignal{};
}

void Engine::fireBranchObservers(BasicBlockRecord& block, size_t index,
                                 const BranchOutcome& outcome) {
    if (index >= block.slots.size() || !block.slots[index]) return;
    for (const auto& fn : block.slots[index]->branch) fn(outcome);
}

// Shadow return stack: entering a hooked function records where it will
// return to; a return transferring there fires the exit event.
void Engine::noteCall(const BranchOutcome& outcome, uint64_t returnAddr) {
    if (std::find(hookedFunctions_.begin(), hookedFunctions_.end(), outcome.target) ==
        hookedFunctions_.end())
        return;
    returnStack_.push_back({returnAddr, outcome.target});
    std::array<uint64_t, 8> args;
    for (unsigned i = 0; i < 8; ++i) args[i] = regs_.get(10 + i);
    hooks_.fireFunctionEntry(outcome.target, args);
}

void Engine::noteReturn(const BranchOutcome& outcome) {
    if (returnStack_.empty() || returnStack_.back().returnAddr != outcome.target) return;
    uint64_t symbolAddr = returnStack_.back().symbolAddr;
    returnStack_.pop_back();
    hooks_.fireFunctionExit(symbolAddr, regs_.get(10));
}

// Executes the block's terminator. Returns the next pc and sets linkSlot to
// the static link slot the transfer corresponds to (-1 when unlinkable).
uint64_t Engine::executeTerminator(BasicBlockRecord& block, int& linkSlot) {
    const Terminator& term = block.terminator;
    linkSlot = -1;

    switch (term.kind) {
    case Terminator::Kind::ConditionalBranch: {
        const DecodedInstruction& in = block.instructions.back();
        const uint64_t a = regs_.get(in.rs1);
        const uint64_t b = regs_.get(in.rs2);
        bool taken = false;
        switch (in.op) {
        case OpKind::Beq: taken = a == b; break;
        case OpKind::Bne: taken = a != b; break;
        case OpKind::Blt: taken = static_cast<int64_t>(a) < static_cast<int64_t>(b); break;
        case OpKind::Bge: taken = static_cast<int64_t>(a) >= static_cast<int64_t>(b); break;
        case OpKind::Bltu: taken = a < b; break;
        case OpKind::Bgeu: taken = a >= b; break;
        default: assert(false);
        }
        BranchOutcome outcome{in.address, taken ? term.takenTarget : 0, taken,
                              isa::BranchKind::Jump};
        fireBranchObservers(block, block.instructions.size() - 1, outcome);
        ++retired_;
        if (retired_ >= fuelLimit_) throw FuelExhaustedSignal{};
        linkSlot = taken ? 0 : 1;
        return taken ? term.takenTarget : term.fallthroughTarget;
    }

    case Terminator::Kind::DirectJump: {
        if (term.synthetic) {
            // Block-length split, not a real branch: no observers, nothing retired.
            linkSlot = 0;
            return term.takenTarget;
        }
        const DecodedInstruction& in = block.instructions.back();
        const uint64_t returnAddr = in.address + in.length;
        regs_.set(in.rd, returnAddr);
        BranchOutcome outcome{in.address, term.takenTarget, true, in.branchKind()};
        fireBranchObservers(block, block.instructions.size() - 1, outcome);
        if (outcome.kind == isa::BranchKind::Call) noteCall(outcome, returnAddr);
        ++retired_;
        if (retired_ >= fuelLimit_) throw FuelExhaustedSignal{};
        linkSlot = 0;
        return term.takenTarget;
    }

    case Terminator::Kind::IndirectJump: {
        const DecodedInstruction& in = block.instructions.back();
        const uint64_t target = (regs_.get(in.rs1) + static_cast<uint64_t>(in.imm)) & ~uint64_t{1};
        regs_.set(in.rd, in.address + in.length);
        BranchOutcome outcome{in.address, target, true, in.branchKind()};
        fireBranchObservers(block, block.instructions.size() - 1, outcome);
        if (outcome.kind == isa::BranchKind::Call) noteCall(outcome, in.address + in.length);
        if (outcome.kind == isa::BranchKind::Return) noteReturn(outcome);
        ++retired_;
        if (retired_ >= fuelLimit_) throw FuelExhaustedSignal{};
        return target;
    }

    case Terminator::Kind::Syscall: {
        serviceSyscall();
        ++retired_;
        if (retired_ >= fuelLimit_) throw FuelExhaustedSignal{};
        linkSlot = 1;
        return term.fallthroughTarget;
    }

    case Terminator::Kind::Halt:
        if (term.haltReason == Terminator::HaltReason::Breakpoint)
            throw GuestFaultSignal{{GuestFault::Kind::Breakpoint, term.haltAddr, 0,
                                    "ebreak executed"}};
        throw GuestFaultSignal{{GuestFault::Kind::DecodeFault, term.haltAddr, 0,
                                "undecodable instruction"}};
    }
    assert(false);
    return 0;
}

void Engine::serviceSyscall() {
    const uint64_t num = regs_.get(17);
    SyscallInfo info;
    info.number = num;
    for (unsigned i = 0; i < 6; ++i) info.args[i] = regs_.get(10 + i);
    hooks_.fireSyscallPre(info);

    const uint64_t a0 = info.args[0], a1 = info.args[1], a2 = info.args[2];
    uint64_t ret = 0;

    switch (num) {
    case kSysRead: {
        if (a0 == 3) {
            size_t n = std::min<size_t>(a2, inputStream_.size() - inputPos_);
            if (n) {
                mem_.writeBytes(a1, std::span(inputStream_.data() + inputPos_, n));
                inputPos_ += n;
            }
            ret = n;
        } else if (a0 == 0) {
            ret = 0;  // stdin is always at EOF
        } else {
            ret = kEbadf;
        }
        break;
    }
    case kSysWrite: {
        if (a0 == 1 || a0 == 2) {
            std::vector<uint8_t> buf(a2);
            mem_.readBytes(a1, buf);
            auto& sink = a0 == 1 ? stdoutBytes_ : stderrBytes_;
            sink.insert(sink.end(), buf.begin(), buf.end());
            ret = a2;
        } else {
            ret = kEbadf;
        }
        break;
    }
    case kSysFstat: {
        if (a0 > 3) {
            ret = kEbadf;
            break;
        }
        // Minimal riscv64 struct stat: zero everything, set st_mode and
        // st_size so libc-style feof/seek logic stays sane.
        std::array<uint8_t, 128> st{};
        uint32_t mode = a0 == 3 ? 0100444 : 0020620;  // S_IFREG : S_IFCHR
        uint64_t size = a0 == 3 ? inputStream_.size() : 0;
        for (int i = 0; i < 4; ++i) st[16 + i] = static_cast<uint8_t>(mode >> (8 * i));
        for (int i = 0; i < 8; ++i) st[48 + i] = static_cast<uint8_t>(size >> (8 * i));
        mem_.writeBytes(a1, st);
        ret = 0;
        break;
    }
    case kSysExit:
    case kSysExitGroup:
        throw GuestExit{static_cast<int>(a0)};
    case kSysBrk:
        ret = mem_.setBrk(a0);
        break;
    case kSysMunmap:
        ret = mem_.unmap(a0) ? 0 : kEinval;
        break;
    case kSysMmap: {
        const uint64_t len = a1;
        const uint64_t prot = a2;
        const uint64_t flags = info.args[3];
        if (!(flags & kMapAnonymous))
            throw GuestFaultSignal{{GuestFault::Kind::UnsupportedSyscall, 0, num,
                                    "mmap without MAP_ANONYMOUS is not supported"}};
        if (len == 0) {
            ret = kEinval;
            break;
        }
        uint8_t perms = 0;
        if (prot & 1) perms |= loader::PermRead;
        if (prot & 2) perms |= loader::PermWrite;
        if (prot & 4) perms |= loader::PermExec;
        const uint64_t base = mem_.mmapCursor();
        const uint64_t sz = loader::pageCeil(len);
        mem_.map(base, sz, perms);
        mem_.setMmapCursor(base + sz);
        ret = base;
        break;
    }
    default:
        throw GuestFaultSignal{{GuestFault::Kind::UnsupportedSyscall, 0, num,
                                "unsupported syscall " + std::to_string(num)}};
    }

    regs_.set(10, ret);
}

ExitStatus Engine::run(uint64_t entry, uint64_t fuel) {
    const uint64_t startRetired = retired_;
    fuelLimit_ = startRetired + fuel;

    auto finish = [&](ExitStatus status) {
        status.instructionsRetired = retired_ - startRetired;
        regs_.setPc(0);
        return status;
    };

    uint64_t pc = entry;
    BasicBlockRecord* pending = nullptr;  // block whose edge needs linking
    int pendingSlot = -1;

    try {
        for (;;) {
            ++cache_.stats().dispatcherEntries;
            BasicBlockRecord* block = &scanBlock(pc);
            linkBlocks(*block);
            if (pending && pendingSlot >= 0 && !pending->links[pendingSlot]) {
                pending->links[pendingSlot] = block;
                ++cache_.stats().branchesLinked;
            }
            pending = nullptr;

            for (;;) {
                ++block->execCount;
                regs_.setPc(block->startAddr);
                const size_t bodyCount = block->instructions.size() - (consumesLast(block->terminator) ? 1 : 0);
                for (size_t i = 0; i < bodyCount; ++i) executeInstr(*block, i);

                int slot = -1;
                pc = executeTerminator(*block, slot);
                if (slot >= 0 && block->links[slot]) {
                    block = block->links[slot];
                    continue;  // linked transfer, dispatcher bypassed
                }
                pending = block;
                pendingSlot = slot;
                break;
            }
        }
    } catch (const GuestExit& e) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::Exited;
        s.exitCode = e.code;
        return finish(s);
    } catch (const GuestFaultSignal& e) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::Fault;
        s.fault = e.fault;
        return finish(s);
    } catch (const loader::MemoryFault& f) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::Fault;
        GuestFault g;
        g.kind = f.kind == loader::MemoryFault::Kind::Unmapped ? GuestFault::Kind::MemoryUnmapped
                                                               : GuestFault::Kind::MemoryProtection;
        g.addr = f.addr;
        g.message = "memory fault";
        s.fault = g;
        return finish(s);
    } catch (const NotExecutableError& e) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::Fault;
        s.fault = GuestFault{GuestFault::Kind::NotExecutable, e.addr(), 0, e.what()};
        return finish(s);
    } catch (const FuelExhaustedSignal&) {
        ExitStatus s;
        s.kind = ExitStatus::Kind::FuelExhausted;
        return finish(s);
    }
}

bool Engine::consumesLast(const Terminator& term) {
    switch (term.kind) {
    case Terminator::Kind::ConditionalBranch:
    case Terminator::Kind::IndirectJump:
    case Terminator::Kind::Syscall:
        return true;
    case Terminator::Kind::DirectJump:
        return !term.synthetic;
    case Terminator::Kind::Halt:
        return term.haltReason == Terminator::HaltReason::Breakpoint;
    }
    return false;
}

}  // namespace ctrv::engine
