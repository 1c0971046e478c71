#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

namespace ctrv::isa {

// RV64IMAC + Zicsr. F/D and every other extension decode to UnknownInstruction.
enum class OpKind : uint8_t {
    // RV64I
    Lui, Auipc, Jal, Jalr,
    Beq, Bne, Blt, Bge, Bltu, Bgeu,
    Lb, Lh, Lw, Ld, Lbu, Lhu, Lwu,
    Sb, Sh, Sw, Sd,
    Addi, Slti, Sltiu, Xori, Ori, Andi, Slli, Srli, Srai,
    Add, Sub, Sll, Slt, Sltu, Xor, Srl, Sra, Or, And,
    Addiw, Slliw, Srliw, Sraiw,
    Addw, Subw, Sllw, Srlw, Sraw,
    Fence, FenceI, Ecall, Ebreak,
    // M
    Mul, Mulh, Mulhsu, Mulhu, Div, Divu, Rem, Remu,
    Mulw, Divw, Divuw, Remw, Remuw,
    // A
    LrW, ScW, AmoswapW, AmoaddW, AmoxorW, AmoandW, AmoorW,
    AmominW, AmomaxW, AmominuW, AmomaxuW,
    LrD, ScD, AmoswapD, AmoaddD, AmoxorD, AmoandD, AmoorD,
    AmominD, AmomaxD, AmominuD, AmomaxuD,
    // Zicsr
    Csrrw, Csrrs, Csrrc, Csrrwi, Csrrsi, Csrrci,
};

enum class Extension : uint8_t { I, M, A, Zicsr };

// Control-transfer classification used by trace records.
enum class BranchKind : uint8_t { Jump = 0, Call = 1, Return = 2 };

class DecodeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UnknownInstruction : public DecodeError {
public:
    explicit UnknownInstruction(uint32_t rawBits, uint64_t addr = 0);
    uint32_t rawBits() const { return rawBits_; }

private:
    uint32_t rawBits_;
};

class TruncatedInstruction : public DecodeError {
public:
    explicit TruncatedInstruction(uint64_t addr, size_t available);
};

// One decoded instruction. Classification flags are fixed at decode time so
// instrumentation decisions happen once per scanned block, not per execution.
struct DecodedInstruction {
    uint64_t address = 0;
    uint32_t rawBits = 0;  // low 16 bits hold the half-word for compressed encodings
    uint8_t length = 4;    // bytes, 2 or 4
    OpKind op = OpKind::Addi;
    uint8_t rd = 0;
    uint8_t rs1 = 0;
    uint8_t rs2 = 0;
    int64_t imm = 0;  // sign-extended; full shifted value for LUI/AUIPC, CSR number for Zicsr

    bool isLoad = false;
    bool isStore = false;
    bool isCondBranch = false;
    bool isDirectJump = false;
    bool isIndirectJump = false;
    bool isLR = false;
    bool isSC = false;
    bool isAMO = false;
    bool isSystem = false;   // ECALL/EBREAK only
    uint8_t accessWidth = 0; // 1/2/4/8 for memory ops, 0 otherwise

    // Standard ABI heuristic: JAL/JALR writing ra is a call, JALR x0, ra is a return.
    bool isCall() const { return (isDirectJump || isIndirectJump) && rd == 1; }
    bool isReturn() const { return isIndirectJump && rd == 0 && rs1 == 1; }
    bool isControlFlow() const { return isCondBranch || isDirectJump || isIndirectJump; }
    bool accessesMemory() const { return isLoad || isStore || isAMO; }

    BranchKind branchKind() const {
        if (isReturn()) return BranchKind::Return;
        if (isCall()) return BranchKind::Call;
        return BranchKind::Jump;
    }
};

// Decodes one instruction. Requires 2 bytes, or 4 when the low bits indicate a
// 32-bit encoding. Throws UnknownInstruction / TruncatedInstruction.
DecodedInstruction decode(std::span<const uint8_t> bytes, uint64_t addr);

// Decodes a full 32-bit encoding (low two bits must be 0b11).
DecodedInstruction decode32(uint32_t word, uint64_t addr);

// Expands a 16-bit RVC encoding to its 32-bit equivalent.
// Throws UnknownInstruction for reserved encodings (including 0x0000).
uint32_t expandCompressed(uint16_t rawBits);

Extension extensionOf(OpKind op);
const char* opName(OpKind op);

// Canonical text form, e.g. "addi x1, x2, -3" / "lw x5, 8(x6)" / "amoadd.w x5, x6, (x7)".
// Compressed instructions render as their expansion.
std::string formatInstruction(const DecodedInstruction& instr);

// x0 is hardwired to zero: writes are discarded, reads always yield 0.
class RegisterFile {
public:
    uint64_t get(unsigned idx) const { return idx == 0 ? 0 : x_[idx]; }
    void set(unsigned idx, uint64_t value) {
        if (idx != 0) x_[idx] = value;
    }
    uint64_t pc() const { return pc_; }
    void setPc(uint64_t pc) { pc_ = pc; }

    std::array<uint64_t, 32> snapshot() const {
        std::array<uint64_t, 32> out = x_;
        out[0] = 0;
        return out;
    }

private:
    std::array<uint64_t, 32> x_{};
    uint64_t pc_ = 0;
};

}  // namespace ctrv::isa
