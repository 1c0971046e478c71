#include "ctrv/isa.hpp"

#include <sstream>

namespace ctrv::isa {

namespace {

uint32_t bits(uint32_t value, unsigned hi, unsigned lo) {
    return (value >> lo) & ((1u << (hi - lo + 1)) - 1);
}

int64_t signExtend(uint64_t value, unsigned width) {
    uint64_t sign = 1ull << (width - 1);
    return static_cast<int64_t>((value ^ sign) - sign);
}

int64_t immI(uint32_t w) { return signExtend(bits(w, 31, 20), 12); }

int64_t immS(uint32_t w) {
    return signExtend((bits(w, 31, 25) << 5) | bits(w, 11, 7), 12);
}

int64_t immB(uint32_t w) {
    uint64_t v = (bits(w, 31, 31) << 12) | (bits(w, 7, 7) << 11) |
                 (bits(w, 30, 25) << 5) | (bits(w, 11, 8) << 1);
    return signExtend(v, 13);
}

int64_t immU(uint32_t w) {
    return signExtend(bits(w, 31, 12) << 12, 32);
}

int64_t immJ(uint32_t w) {
    uint64_t v = (bits(w, 31, 31) << 20) | (bits(w, 19, 12) << 12) |
                 (bits(w, 20, 20) << 11) | (bits(w, 30, 21) << 1);
    return signExtend(v, 21);
}

void markLoad(DecodedInstruction& d, uint8_t width) {
    d.isLoad = true;
    d.accessWidth = width;
}

void markStore(DecodedInstruction& d, uint8_t width) {
    d.isStore = true;
    d.accessWidth = width;
}

}  // namespace

UnknownInstruction::UnknownInstruction(uint32_t rawBits, uint64_t addr)
    : DecodeError([&] {
          std::ostringstream os;
          os << "unknown instruction encoding 0x" << std::hex << rawBits;
          if (addr) os << " at 0x" << addr;
          return os.str();
      }()),
      rawBits_(rawBits) {}

TruncatedInstruction::TruncatedInstruction(uint64_t addr, size_t available)
    : DecodeError([&] {
          std::ostringstream os;
          os << "truncated instruction at 0x" << std::hex << addr << std::dec
             << " (" << available << " byte(s) available)";
          return os.str();
      }()) {}

DecodedInstruction decode32(uint32_t w, uint64_t addr) {
    DecodedInstruction d;
    d.address = addr;
    d.rawBits = w;
    d.length = 4;
    d.rd = static_cast<uint8_t>(bits(w, 11, 7));
    d.rs1 = static_cast<uint8_t>(bits(w, 19, 15));
    d.rs2 = static_cast<uint8_t>(bits(w, 24, 20));

    const uint32_t opcode = bits(w, 6, 0);
    const uint32_t funct3 = bits(w, 14, 12);
    const uint32_t funct7 = bits(w, 31, 25);

    switch (opcode) {
    case 0x37:
        d.op = OpKind::Lui;
        d.imm = immU(w);
        return d;
    case 0x17:
        d.op = OpKind::Auipc;
        d.imm = immU(w);
        return d;
    case 0x6F:
        d.op = OpKind::Jal;
        d.imm = immJ(w);
        d.isDirectJump = true;
        return d;
    case 0x67:
        if (funct3 != 0) break;
        d.op = OpKind::Jalr;
        d.imm = immI(w);
        d.isIndirectJump = true;
        return d;
    case 0x63: {
        static constexpr OpKind kBranch[8] = {
            OpKind::Beq, OpKind::Bne, OpKind::Beq /*pad*/, OpKind::Beq /*pad*/,
            OpKind::Blt, OpKind::Bge, OpKind::Bltu, OpKind::Bgeu};
        if (funct3 == 2 || funct3 == 3) break;
        d.op = kBranch[funct3];
        d.imm = immB(w);
        d.isCondBranch = true;
        return d;
    }
    case 0x03: {
        static constexpr OpKind kLoad[8] = {
            OpKind::Lb, OpKind::Lh, OpKind::Lw, OpKind::Ld,
            OpKind::Lbu, OpKind::Lhu, OpKind::Lwu, OpKind::Lb /*pad*/};
        static constexpr uint8_t kWidth[8] = {1, 2, 4, 8, 1, 2, 4, 0};
        if (funct3 == 7) break;
        d.op = kLoad[funct3];
        d.imm = immI(w);
        markLoad(d, kWidth[funct3]);
        return d;
    }
    case 0x23: {
        static constexpr OpKind kStore[4] = {OpKind::Sb, OpKind::Sh, OpKind::Sw, OpKind::Sd};
        static constexpr uint8_t kWidth[4] = {1, 2, 4, 8};
        if (funct3 > 3) break;
        d.op = kStore[funct3];
        d.imm = immS(w);
        markStore(d, kWidth[funct3]);
        return d;
    }
    case 0x13:
        d.imm = immI(w);
        switch (funct3) {
        case 0: d.op = OpKind::Addi; return d;
        case 2: d.op = OpKind::Slti; return d;
        case 3: d.op = OpKind::Sltiu; return d;
        case 4: d.op = OpKind::Xori; return d;
        case 6: d.op = OpKind::Ori; return d;
        case 7: d.op = OpKind::Andi; return d;
        case 1:
            if (bits(w, 31, 26) != 0) break;  // 6-bit shamt on RV64
            d.op = OpKind::Slli;
            d.imm = bits(w, 25, 20);
            return d;
        case 5:
            if (bits(w, 31, 26) == 0x00) {
                d.op = OpKind::Srli;
                d.imm = bits(w, 25, 20);
                return d;
            }
            if (bits(w, 31, 26) == 0x10) {
                d.op = OpKind::Srai;
                d.imm = bits(w, 25, 20);
                return d;
            }
            break;
        }
        break;
    case 0x1B:
        switch (funct3) {
        case 0:
            d.op = OpKind::Addiw;
            d.imm = immI(w);
            return d;
        case 1:
            if (funct7 != 0x00) break;  // 5-bit shamt only
            d.op = OpKind::Slliw;
            d.imm = bits(w, 24, 20);
            return d;
        case 5:
            if (funct7 == 0x00) {
                d.op = OpKind::Srliw;
                d.imm = bits(w, 24, 20);
                return d;
            }
            if (funct7 == 0x20) {
                d.op = OpKind::Sraiw;
                d.imm = bits(w, 24, 20);
                return d;
            }
            break;
        }
        break;
    case 0x33:
        if (funct7 == 0x00) {
            static constexpr OpKind kOp[8] = {
                OpKind::Add, OpKind::Sll, OpKind::Slt, OpKind::Sltu,
                OpKind::Xor, OpKind::Srl, OpKind::Or, OpKind::And};
            d.op = kOp[funct3];
            return d;
        }
        if (funct7 == 0x20) {
            if (funct3 == 0) { d.op = OpKind::Sub; return d; }
            if (funct3 == 5) { d.op = OpKind::Sra; return d; }
            break;
        }
        if (funct7 == 0x01) {
            static constexpr OpKind kMul[8] = {
                OpKind::Mul, OpKind::Mulh, OpKind::Mulhsu, OpKind::Mulhu,
                OpKind::Div, OpKind::Divu, OpKind::Rem, OpKind::Remu};
            d.op = kMul[funct3];
            return d;
        }
        break;
    case 0x3B:
        if (funct7 == 0x00) {
            if (funct3 == 0) { d.op = OpKind::Addw; return d; }
            if (funct3 == 1) { d.op = OpKind::Sllw; return d; }
            if (funct3 == 5) { d.op = OpKind::Srlw; return d; }
            break;
        }
        if (funct7 == 0x20) {
            if (funct3 == 0) { d.op = OpKind::Subw; return d; }
            if (funct3 == 5) { d.op = OpKind::Sraw; return d; }
            break;
        }
        if (funct7 == 0x01) {
            switch (funct3) {
            case 0: d.op = OpKind::Mulw; return d;
            case 4: d.op = OpKind::Divw; return d;
            case 5: d.op = OpKind::Divuw; return d;
            case 6: d.op = OpKind::Remw; return d;
            case 7: d.op = OpKind::Remuw; return d;
            }
            break;
        }
        break;
    case 0x0F:
        // Unknown fence fields degrade to a full fence, so accept them all.
        if (funct3 == 0) { d.op = OpKind::Fence; return d; }
        if (funct3 == 1) { d.op = OpKind::FenceI; return d; }
        break;
    case 0x2F: {
        if (funct3 != 2 && funct3 != 3) break;
        const uint8_t width = funct3 == 2 ? 4 : 8;
        const bool isW = funct3 == 2;
        const uint32_t funct5 = bits(w, 31, 27);  // bits 26/25 are aq/rl, any value
        if (funct5 == 0x02) {
            if (d.rs2 != 0) break;
            d.op = isW ? OpKind::LrW : OpKind::LrD;
            d.isLR = true;
            markLoad(d, width);
            return d;
        }
        if (funct5 == 0x03) {
            d.op = isW ? OpKind::ScW : OpKind::ScD;
            d.isSC = true;
            markStore(d, width);
            return d;
        }
        bool matched = true;
        switch (funct5) {
        case 0x01: d.op = isW ? OpKind::AmoswapW : OpKind::AmoswapD; break;
        case 0x00: d.op = isW ? OpKind::AmoaddW : OpKind::AmoaddD; break;
        case 0x04: d.op = isW ? OpKind::AmoxorW : OpKind::AmoxorD; break;
        case 0x0C: d.op = isW ? OpKind::AmoandW : OpKind::AmoandD; break;
        case 0x08: d.op = isW ? OpKind::AmoorW : OpKind::AmoorD; break;
        case 0x10: d.op = isW ? OpKind::AmominW : OpKind::AmominD; break;
        case 0x14: d.op = isW ? OpKind::AmomaxW : OpKind::AmomaxD; break;
        case 0x18: d.op = isW ? OpKind::AmominuW : OpKind::AmominuD; break;
        case 0x1C: d.op = isW ? OpKind::AmomaxuW : OpKind::AmomaxuD; break;
        default: matched = false; break;
        }
        if (matched) {
            d.isAMO = true;
            d.accessWidth = width;
            return d;
        }
        break;
    }
    case 0x73:
        if (funct3 == 0) {
            if (w == 0x00000073) {
                d.op = OpKind::Ecall;
                d.isSystem = true;
                return d;
            }
            if (w == 0x00100073) {
                d.op = OpKind::Ebreak;
                d.isSystem = true;
                return d;
            }
            break;  // xRET / WFI / SFENCE are privileged, not supported
        }
        {
            static constexpr OpKind kCsr[8] = {
                OpKind::Csrrw /*pad*/, OpKind::Csrrw, OpKind::Csrrs, OpKind::Csrrc,
                OpKind::Csrrw /*pad*/, OpKind::Csrrwi, OpKind::Csrrsi, OpKind::Csrrci};
            if (funct3 == 4) break;
            d.op = kCsr[funct3];
            d.imm = bits(w, 31, 20);  // CSR number; rs1 holds the register or zimm
            return d;
        }
    }
    throw UnknownInstruction(w, addr);
}

namespace {

// Compressed-register field: x8..x15.
uint8_t cReg(uint32_t v) { return static_cast<uint8_t>(8 + (v & 7)); }

uint32_t encodeIType(int64_t imm, uint32_t rs1, uint32_t funct3, uint32_t rd, uint32_t opcode) {
    return (static_cast<uint32_t>(imm & 0xFFF) << 20) | (rs1 << 15) | (funct3 << 12) |
           (rd << 7) | opcode;
}

uint32_t encodeSType(int64_t imm, uint32_t rs2, uint32_t rs1, uint32_t funct3, uint32_t opcode) {
    uint32_t i = static_cast<uint32_t>(imm & 0xFFF);
    return (bits(i, 11, 5) << 25) | (rs2 << 20) | (rs1 << 15) | (funct3 << 12) |
           (bits(i, 4, 0) << 7) | opcode;
}

uint32_t encodeRType(uint32_t funct7, uint32_t rs2, uint32_t rs1, uint32_t funct3, uint32_t rd,
                     uint32_t opcode) {
    return (funct7 << 25) | (rs2 << 20) | (rs1 << 15) | (funct3 << 12) | (rd << 7) | opcode;
}

uint32_t encodeBType(int64_t imm, uint32_t rs2, uint32_t rs1, uint32_t funct3) {
    uint32_t i = static_cast<uint32_t>(imm & 0x1FFF);
    return (bits(i, 12, 12) << 31) | (bits(i, 10, 5) << 25) | (rs2 << 20) | (rs1 << 15) |
           (funct3 << 12) | (bits(i, 4, 1) << 8) | (bits(i, 11, 11) << 7) | 0x63;
}

uint32_t encodeJType(int64_t imm, uint32_t rd) {
    uint32_t i = static_cast<uint32_t>(imm & 0x1FFFFF);
    return (bits(i, 20, 20) << 31) | (bits(i, 10, 1) << 21) | (bits(i, 11, 11) << 20) |
           (bits(i, 19, 12) << 12) | (rd << 7) | 0x6F;
}

}  // namespace

uint32_t expandCompressed(uint16_t h) {
    const uint32_t quadrant = h & 3;
    const uint32_t funct3 = bits(h, 15, 13);

    switch (quadrant) {
    case 0:
        switch (funct3) {
        case 0: {  // c.addi4spn -> addi rd', x2, nzuimm (0x0000 lands here as reserved)
            uint32_t imm = (bits(h, 12, 11) << 4) | (bits(h, 10, 7) << 6) |
                           (bits(h, 6, 6) << 2) | (bits(h, 5, 5) << 3);
            if (imm == 0) break;
            return encodeIType(imm, 2, 0, cReg(bits(h, 4, 2)), 0x13);
        }
        case 2: {  // c.lw
            uint32_t imm = (bits(h, 12, 10) << 3) | (bits(h, 6, 6) << 2) | (bits(h, 5, 5) << 6);
            return encodeIType(imm, cReg(bits(h, 9, 7)), 2, cReg(bits(h, 4, 2)), 0x03);
        }
        case 3: {  // c.ld
            uint32_t imm = (bits(h, 12, 10) << 3) | (bits(h, 6, 5) << 6);
            return encodeIType(imm, cReg(bits(h, 9, 7)), 3, cReg(bits(h, 4, 2)), 0x03);
        }
        case 6: {  // c.sw
            uint32_t imm = (bits(h, 12, 10) << 3) | (bits(h, 6, 6) << 2) | (bits(h, 5, 5) << 6);
            return encodeSType(imm, cReg(bits(h, 4, 2)), cReg(bits(h, 9, 7)), 2, 0x23);
        }
        case 7: {  // c.sd
            uint32_t imm = (bits(h, 12, 10) << 3) | (bits(h, 6, 5) << 6);
            return encodeSType(imm, cReg(bits(h, 4, 2)), cReg(bits(h, 9, 7)), 3, 0x23);
        }
        default:
            break;  // c.fld / c.fsd need D, 0b100 is reserved
        }
        break;

    case 1:
        switch (funct3) {
        case 0: {  // c.addi (c.nop when rd=0, imm=0)
            int64_t imm = signExtend((bits(h, 12, 12) << 5) | bits(h, 6, 2), 6);
            uint32_t rd = bits(h, 11, 7);
            return encodeIType(imm, rd, 0, rd, 0x13);
        }
        case 1: {  // c.addiw (RV64; rd=0 reserved)
            uint32_t rd = bits(h, 11, 7);
            if (rd == 0) break;
            int64_t imm = signExtend((bits(h, 12, 12) << 5) | bits(h, 6, 2), 6);
            return encodeIType(imm, rd, 0, rd, 0x1B);
        }
        case 2: {  // c.li
            int64_t imm = signExtend((bits(h, 12, 12) << 5) | bits(h, 6, 2), 6);
            return encodeIType(imm, 0, 0, bits(h, 11, 7), 0x13);
        }
        case 3: {
            uint32_t rd = bits(h, 11, 7);
            if (rd == 2) {  // c.addi16sp
                int64_t imm = signExtend((bits(h, 12, 12) << 9) | (bits(h, 6, 6) << 4) |
                                             (bits(h, 5, 5) << 6) | (bits(h, 4, 3) << 7) |
                                             (bits(h, 2, 2) << 5),
                                         10);
                if (imm == 0) break;
                return encodeIType(imm, 2, 0, 2, 0x13);
            }
            // c.lui
            int64_t imm = signExtend((bits(h, 12, 12) << 5) | bits(h, 6, 2), 6);
            if (imm == 0) break;
            return (static_cast<uint32_t>(imm) & 0xFFFFF) << 12 | (rd << 7) | 0x37;
        }
        case 4: {
            uint32_t rd = cReg(bits(h, 9, 7));
            uint32_t op2 = bits(h, 11, 10);
            if (op2 == 0 || op2 == 1) {  // c.srli / c.srai; shamt 0 is reserved on RV64
                uint32_t shamt = (bits(h, 12, 12) << 5) | bits(h, 6, 2);
                if (shamt == 0) break;
                uint32_t funct6 = op2 == 0 ? 0x00 : 0x10;
                return (funct6 << 26) | (shamt << 20) | (rd << 15) | (5u << 12) | (rd << 7) | 0x13;
            }
            if (op2 == 2) {  // c.andi
                int64_t imm = signExtend((bits(h, 12, 12) << 5) | bits(h, 6, 2), 6);
                return encodeIType(imm, rd, 7, rd, 0x13);
            }
            uint32_t rs2 = cReg(bits(h, 4, 2));
            uint32_t sub = bits(h, 6, 5);
            if (bits(h, 12, 12) == 0) {
                static constexpr uint32_t kFunct7[4] = {0x20, 0x00, 0x00, 0x00};
                static constexpr uint32_t kFunct3[4] = {0, 4, 6, 7};  // sub, xor, or, and
                return encodeRType(kFunct7[sub], rs2, rd, kFunct3[sub], rd, 0x33);
            }
            if (sub == 0) return encodeRType(0x20, rs2, rd, 0, rd, 0x3B);  // c.subw
            if (sub == 1) return encodeRType(0x00, rs2, rd, 0, rd, 0x3B);  // c.addw
            break;
        }
        case 5: {  // c.j
            int64_t imm = signExtend((bits(h, 12, 12) << 11) | (bits(h, 11, 11) << 4) |
                                         (bits(h, 10, 9) << 8) | (bits(h, 8, 8) << 10) |
                                         (bits(h, 7, 7) << 6) | (bits(h, 6, 6) << 7) |
                                         (bits(h, 5, 3) << 1) | (bits(h, 2, 2) << 5),
                                     12);
            return encodeJType(imm, 0);
        }
        case 6:    // c.beqz
        case 7: {  // c.bnez
            int64_t imm = signExtend((bits(h, 12, 12) << 8) | (bits(h, 11, 10) << 3) |
                                         (bits(h, 6, 5) << 6) | (bits(h, 4, 3) << 1) |
                                         (bits(h, 2, 2) << 5),
                                     9);
            return encodeBType(imm, 0, cReg(bits(h, 9, 7)), funct3 == 6 ? 0 : 1);
        }
        }
        break;

    case 2:
        switch (funct3) {
        case 0: {  // c.slli; shamt 0 is reserved on RV64
            uint32_t shamt = (bits(h, 12, 12) << 5) | bits(h, 6, 2);
            if (shamt == 0) break;
            uint32_t rd = bits(h, 11, 7);
            return (shamt << 20) | (rd << 15) | (1u << 12) | (rd << 7) | 0x13;
        }
        case 2: {  // c.lwsp (rd=0 reserved)
            uint32_t rd = bits(h, 11, 7);
            if (rd == 0) break;
            uint32_t imm = (bits(h, 12, 12) << 5) | (bits(h, 6, 4) << 2) | (bits(h, 3, 2) << 6);
            return encodeIType(imm, 2, 2, rd, 0x03);
        }
        case 3: {  // c.ldsp (rd=0 reserved)
            uint32_t rd = bits(h, 11, 7);
            if (rd == 0) break;
            uint32_t imm = (bits(h, 12, 12) << 5) | (bits(h, 6, 5) << 3) | (bits(h, 4, 2) << 6);
            return encodeIType(imm, 2, 3, rd, 0x03);
        }
        case 4: {
            uint32_t rd = bits(h, 11, 7);
            uint32_t rs2 = bits(h, 6, 2);
            if (bits(h, 12, 12) == 0) {
                if (rs2 == 0) {  // c.jr (rs1=0 reserved)
                    if (rd == 0) break;
                    return encodeIType(0, rd, 0, 0, 0x67);
                }
                return encodeRType(0, rs2, 0, 0, rd, 0x33);  // c.mv -> add rd, x0, rs2
            }
            if (rs2 == 0) {
                if (rd == 0) return 0x00100073;  // c.ebreak
                return encodeIType(0, rd, 0, 1, 0x67);  // c.jalr
            }
            return encodeRType(0, rs2, rd, 0, rd, 0x33);  // c.add
        }
        case 6: {  // c.swsp
            uint32_t imm = (bits(h, 12, 9) << 2) | (bits(h, 8, 7) << 6);
            return encodeSType(imm, bits(h, 6, 2), 2, 2, 0x23);
        }
        case 7: {  // c.sdsp
            uint32_t imm = (bits(h, 12, 10) << 3) | (bits(h, 9, 7) << 6);
            return encodeSType(imm, bits(h, 6, 2), 2, 3, 0x23);
        }
        default:
            break;  // c.fldsp / c.fsdsp need D
        }
        break;
    }
    throw UnknownInstruction(h);
}

DecodedInstruction decode(std::span<const uint8_t> bytes, uint64_t addr) {
    if (bytes.size() < 2) throw TruncatedInstruction(addr, bytes.size());
    const uint16_t half = static_cast<uint16_t>(bytes[0] | (bytes[1] << 8));
    if ((half & 3) != 3) {
        DecodedInstruction d = decode32(expandCompressed(half), addr);
        d.rawBits = half;
        d.length = 2;
        return d;
    }
    if ((half & 0x1F) == 0x1F) throw UnknownInstruction(half, addr);  // 48-bit+ encodings
    if (bytes.size() < 4) throw TruncatedInstruction(addr, bytes.size());
    const uint32_t word = half | (static_cast<uint32_t>(bytes[2]) << 16) |
                          (static_cast<uint32_t>(bytes[3]) << 24);
    return decode32(word, addr);
}

Extension extensionOf(OpKind op) {
    if (op >= OpKind::Mul && op <= OpKind::Remuw) return Extension::M;
    if (op >= OpKind::LrW && op <= OpKind::AmomaxuD) return Extension::A;
    if (op >= OpKind::Csrrw && op <= OpKind::Csrrci) return Extension::Zicsr;
    return Extension::I;
}

const char* opName(OpKind op) {
    switch (op) {
    case OpKind::Lui: return "lui";
    case OpKind::Auipc: return "auipc";
    case OpKind::Jal: return "jal";
    case OpKind::Jalr: return "jalr";
    case OpKind::Beq: return "beq";
    case OpKind::Bne: return "bne";
    case OpKind::Blt: return "blt";
    case OpKind::Bge: return "bge";
    case OpKind::Bltu: return "bltu";
    case OpKind::Bgeu: return "bgeu";
    case OpKind::Lb: return "lb";
    case OpKind::Lh: return "lh";
    case OpKind::Lw: return "lw";
    case OpKind::Ld: return "ld";
    case OpKind::Lbu: return "lbu";
    case OpKind::Lhu: return "lhu";
    case OpKind::Lwu: return "lwu";
    case OpKind::Sb: return "sb";
    case OpKind::Sh: return "sh";
    case OpKind::Sw: return "sw";
    case OpKind::Sd: return "sd";
    case OpKind::Addi: return "addi";
    case OpKind::Slti: return "slti";
    case OpKind::Sltiu: return "sltiu";
    case OpKind::Xori: return "xori";
    case OpKind::Ori: return "ori";
    case OpKind::Andi: return "andi";
    case OpKind::Slli: return "slli";
    case OpKind::Srli: return "srli";
    case OpKind::Srai: return "srai";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Sll: return "sll";
    case OpKind::Slt: return "slt";
    case OpKind::Sltu: return "sltu";
    case OpKind::Xor: return "xor";
    case OpKind::Srl: return "srl";
    case OpKind::Sra: return "sra";
    case OpKind::Or: return "or";
    case OpKind::And: return "and";
    case OpKind::Addiw: return "addiw";
    case OpKind::Slliw: return "slliw";
    case OpKind::Srliw: return "srliw";
    case OpKind::Sraiw: return "sraiw";
    case OpKind::Addw: return "addw";
    case OpKind::Subw: return "subw";
    case OpKind::Sllw: return "sllw";
    case OpKind::Srlw: return "srlw";
    case OpKind::Sraw: return "sraw";
    case OpKind::Fence: return "fence";
    case OpKind::FenceI: return "fence.i";
    case OpKind::Ecall: return "ecall";
    case OpKind::Ebreak: return "ebreak";
    case OpKind::Mul: return "mul";
    case OpKind::Mulh: return "mulh";
    case OpKind::Mulhsu: return "mulhsu";
    case OpKind::Mulhu: return "mulhu";
    case OpKind::Div: return "div";
    case OpKind::Divu: return "divu";
    case OpKind::Rem: return "rem";
    case OpKind::Remu: return "remu";
    case OpKind::Mulw: return "mulw";
    case OpKind::Divw: return "divw";
    case OpKind::Divuw: return "divuw";
    case OpKind::Remw: return "remw";
    case OpKind::Remuw: return "remuw";
    case OpKind::LrW: return "lr.w";
    case OpKind::ScW: return "sc.w";
    case OpKind::AmoswapW: return "amoswap.w";
    case OpKind::AmoaddW: return "amoadd.w";
    case OpKind::AmoxorW: return "amoxor.w";
    case OpKind::AmoandW: return "amoand.w";
    case OpKind::AmoorW: return "amoor.w";
    case OpKind::AmominW: return "amomin.w";
    case OpKind::AmomaxW: return "amomax.w";
    case OpKind::AmominuW: return "amominu.w";
    case OpKind::AmomaxuW: return "amomaxu.w";
    case OpKind::LrD: return "lr.d";
    case OpKind::ScD: return "sc.d";
    case OpKind::AmoswapD: return "amoswap.d";
    case OpKind::AmoaddD: return "amoadd.d";
    case OpKind::AmoxorD: return "amoxor.d";
    case OpKind::AmoandD: return "amoand.d";
    case OpKind::AmoorD: return "amoor.d";
    case OpKind::AmominD: return "amomin.d";
    case OpKind::AmomaxD: return "amomax.d";
    case OpKind::AmominuD: return "amominu.d";
    case OpKind::AmomaxuD: return "amomaxu.d";
    case OpKind::Csrrw: return "csrrw";
    case OpKind::Csrrs: return "csrrs";
    case OpKind::Csrrc: return "csrrc";
    case OpKind::Csrrwi: return "csrrwi";
    case OpKind::Csrrsi: return "csrrsi";
    case OpKind::Csrrci: return "csrrci";
    }
    return "?";
}

std::string formatInstruction(const DecodedInstruction& d) {
    std::ostringstream os;
    os << opName(d.op);
    auto reg = [](unsigned idx) { return "x" + std::to_string(idx); };

    switch (d.op) {
    case OpKind::Lui:
    case OpKind::Auipc:
        // Render the 20-bit field rather than the shifted value.
        os << " " << reg(d.rd) << ", " << ((d.imm >> 12) & 0xFFFFF);
        break;
    case OpKind::Jal:
        os << " " << reg(d.rd) << ", " << d.imm;
        break;
    case OpKind::Jalr:
        os << " " << reg(d.rd) << ", " << d.imm << "(" << reg(d.rs1) << ")";
        break;
    case OpKind::Beq:
    case OpKind::Bne:
    case OpKind::Blt:
    case OpKind::Bge:
    case OpKind::Bltu:
    case OpKind::Bgeu:
        os << " " << reg(d.rs1) << ", " << reg(d.rs2) << ", " << d.imm;
        break;
    case OpKind::Lb:
    case OpKind::Lh:
    case OpKind::Lw:
    case OpKind::Ld:
    case OpKind::Lbu:
    case OpKind::Lhu:
    case OpKind::Lwu:
        os << " " << reg(d.rd) << ", " << d.imm << "(" << reg(d.rs1) << ")";
        break;
    case OpKind::Sb:
    case OpKind::Sh:
    case OpKind::Sw:
    case OpKind::Sd:
        os << " " << reg(d.rs2) << ", " << d.imm << "(" << reg(d.rs1) << ")";
        break;
    case OpKind::Fence:
    case OpKind::FenceI:
    case OpKind::Ecall:
    case OpKind::Ebreak:
        break;
    case OpKind::Csrrw:
    case OpKind::Csrrs:
    case OpKind::Csrrc:
        os << " " << reg(d.rd) << ", 0x" << std::hex << d.imm << std::dec << ", " << reg(d.rs1);
        break;
    case OpKind::Csrrwi:
    case OpKind::Csrrsi:
    case OpKind::Csrrci:
        os << " " << reg(d.rd) << ", 0x" << std::hex << d.imm << std::dec << ", "
           << static_cast<unsigned>(d.rs1);
        break;
    case OpKind::LrW:
    case OpKind::LrD:
        os << " " << reg(d.rd) << ", (" << reg(d.rs1) << ")";
        break;
    case OpKind::ScW:
    case OpKind::ScD:
    case OpKind::AmoswapW: case OpKind::AmoswapD:
    case OpKind::AmoaddW: case OpKind::AmoaddD:
    case OpKind::AmoxorW: case OpKind::AmoxorD:
    case OpKind::AmoandW: case OpKind::AmoandD:
    case OpKind::AmoorW: case OpKind::AmoorD:
    case OpKind::AmominW: case OpKind::AmominD:
    case OpKind::AmomaxW: case OpKind::AmomaxD:
    case OpKind::AmominuW: case OpKind::AmominuD:
    case OpKind::AmomaxuW: case OpKind::AmomaxuD:
        os << " " << reg(d.rd) << ", " << reg(d.rs2) << ", (" << reg(d.rs1) << ")";
        break;
    case OpKind::Addi:
    case OpKind::Slti:
    case OpKind::Sltiu:
    case OpKind::Xori:
    case OpKind::Ori:
    case OpKind::Andi:
    case OpKind::Slli:
    case OpKind::Srli:
    case OpKind::Srai:
    case OpKind::Addiw:
    case OpKind::Slliw:
    case OpKind::Srliw:
    case OpKind::Sraiw:
        os << " " << reg(d.rd) << ", " << reg(d.rs1) << ", " << d.imm;
        break;
    default:  // three-register forms
        os << " " << reg(d.rd) << ", " << reg(d.rs1) << ", " << reg(d.rs2);
        break;
    }
    return os.str();
}

}  // namespace ctrv::isa
