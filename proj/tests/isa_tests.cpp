#include <doctest.h>

#include <cstdint>
#include <string>
#include <vector>

#include "ctrv/isa.hpp"
#include "ref_disasm.hpp"

using namespace ctrv;

namespace {

struct Frozen {
    uint32_t word;
    const char* text;
};

// Hand-assembled from the encoding formulas, one representative per format.
const Frozen kFrozen32[] = {
    {0x00000013u, "addi x0, x0, 0"},
    {0x00A30293u, "addi x5, x6, 10"},
    {0xFFF38393u, "addi x7, x7, -1"},
    {0x123452B7u, "lui x5, 74565"},
    {0xFFFFF0B7u, "lui x1, 1048575"},
    {0x00001197u, "auipc x3, 1"},
    {0x001000EFu, "jal x1, 2048"},
    {0xFFFFF06Fu, "jal x0, -2"},
    {0x00008067u, "jalr x0, 0(x1)"},
    {0x00628863u, "beq x5, x6, 16"},
    {0xFEB56EE3u, "bltu x10, x11, -4"},
    {0x00832283u, "lw x5, 8(x6)"},
    {0xFF813083u, "ld x1, -8(x2)"},
    {0x0084B023u, "sd x8, 0(x9)"},
    {0x001102A3u, "sb x1, 5(x2)"},
    {0x03F31293u, "slli x5, x6, 63"},
    {0x40135293u, "srai x5, x6, 1"},
    {0x41F3529Bu, "sraiw x5, x6, 31"},
    {0x003100B3u, "add x1, x2, x3"},
    {0x403100B3u, "sub x1, x2, x3"},
    {0x027302B3u, "mul x5, x6, x7"},
    {0x02C5C533u, "div x10, x11, x12"},
    {0x003100BBu, "addw x1, x2, x3"},
    {0x00000073u, "ecall"},
    {0x00100073u, "ebreak"},
    {0x0000000Fu, "fence"},
    {0x0000100Fu, "fence.i"},
    {0xC02022F3u, "csrrs x5, 0xc02, x0"},
    {0x3402D0F3u, "csrrwi x1, 0x340, 5"},
    {0x100322AFu, "lr.w x5, (x6)"},
    {0x1863B2AFu, "sc.d x5, x6, (x7)"},
    {0x00B6252Fu, "amoadd.w x10, x11, (x12)"},
    {0xE021B0AFu, "amomaxu.d x1, x2, (x3)"},
};

// Encodings outside RV64IMAC+Zicsr or with reserved fields.
const uint32_t kRejected32[] = {
    0x00002007u,  // flw (requires F)
    0x00003027u,  // fsd (requires D)
    0x00000053u,  // fadd.s
    0x00000043u,  // fmadd.s
    0x30200073u,  // mret (privileged)
    0x10500073u,  // wfi
    0x12000073u,  // sfence.vma
    0x00004073u,  // system funct3=4 gap
    0x00002063u,  // branch funct3=2 gap
    0x00007003u,  // load funct3=7 gap
    0x00004023u,  // store funct3=4 gap
    0x00001067u,  // jalr funct3 != 0
    0x40001013u,  // slli with srai-style funct6
    0x2800202Fu,  // amo funct5=0x05 gap
    0x0000002Fu,  // amo funct3=0
    0x10C322AFu,  // lr.w with rs2 != 0
    0xFFFFFFFFu,
};

uint64_t splitmix(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

void checkFlagInvariants(const isa::DecodedInstruction& d) {
    int terminators = (d.isCondBranch ? 1 : 0) + (d.isDirectJump ? 1 : 0) +
                      (d.isIndirectJump ? 1 : 0);
    CHECK(terminators <= 1);
    CHECK_FALSE((d.isLoad && d.isStore));
    if (d.isLR) CHECK(d.isLoad);
    if (d.isSC) CHECK(d.isStore);
    if (d.isAMO) {
        CHECK_FALSE(d.isLoad);
        CHECK_FALSE(d.isStore);
    }
    if (d.accessesMemory()) {
        CHECK((d.accessWidth == 1 || d.accessWidth == 2 || d.accessWidth == 4 ||
               d.accessWidth == 8));
    } else {
        CHECK(d.accessWidth == 0);
    }
    if (d.isSystem) CHECK((d.op == isa::OpKind::Ecall || d.op == isa::OpKind::Ebreak));
}

}  // namespace

TEST_CASE("frozen 32-bit decodings render canonically") {
    for (const Frozen& f : kFrozen32) {
        CAPTURE(f.text);
        isa::DecodedInstruction d = isa::decode32(f.word, 0x1000);
        CHECK(d.length == 4);
        CHECK(d.rawBits == f.word);
        CHECK(d.address == 0x1000);
        CHECK(isa::formatInstruction(d) == f.text);
        checkFlagInvariants(d);
    }
}

TEST_CASE("frozen decodings agree with the reference disassembler") {
    for (const Frozen& f : kFrozen32) {
        refdis::Result r = refdis::disasm32(f.word);
        CAPTURE(f.text);
        REQUIRE(r.known);
        CHECK(r.text == f.text);
        CHECK(r.length == 4);
    }
}

TEST_CASE("classification flags on representative encodings") {
    auto d = isa::decode32(0x00832283u, 0);  // lw x5, 8(x6)
    CHECK(d.isLoad);
    CHECK(d.accessWidth == 4);
    CHECK(d.rd == 5);
    CHECK(d.rs1 == 6);
    CHECK(d.imm == 8);

    d = isa::decode32(0x001000EFu, 0);  // jal x1, 2048
    CHECK(d.isDirectJump);
    CHECK(d.isCall());
    CHECK_FALSE(d.isReturn());
    CHECK(d.branchKind() == isa::BranchKind::Call);
    CHECK(d.imm == 2048);

    d = isa::decode32(0x00008067u, 0);  // jalr x0, 0(x1)
    CHECK(d.isIndirectJump);
    CHECK(d.isReturn());
    CHECK(d.branchKind() == isa::BranchKind::Return);

    d = isa::decode32(0xFEB56EE3u, 0);  // bltu x10, x11, -4
    CHECK(d.isCondBranch);
    CHECK(d.imm == -4);
    CHECK(d.branchKind() == isa::BranchKind::Jump);

    d = isa::decode32(0x100322AFu, 0);  // lr.w x5, (x6)
    CHECK(d.isLR);
    CHECK(d.isLoad);
    CHECK(d.accessWidth == 4);

    d = isa::decode32(0x1863B2AFu, 0);  // sc.d x5, x6, (x7)
    CHECK(d.isSC);
    CHECK(d.isStore);
    CHECK(d.accessWidth == 8);

    d = isa::decode32(0x00B6252Fu, 0);  // amoadd.w x10, x11, (x12)
    CHECK(d.isAMO);
    CHECK(d.accessesMemory());
    CHECK(d.accessWidth == 4);

    d = isa::decode32(0xC02022F3u, 0);  // csrrs x5, 0xc02, x0
    CHECK(d.imm == 0xC02);
    CHECK(d.rd == 5);

    d = isa::decode32(0x00000073u, 0);  // ecall
    CHECK(d.isSystem);
}

TEST_CASE("extension classification") {
    CHECK(isa::extensionOf(isa::decode32(0x00A30293u, 0).op) == isa::Extension::I);
    CHECK(isa::extensionOf(isa::decode32(0x027302B3u, 0).op) == isa::Extension::M);
    CHECK(isa::extensionOf(isa::decode32(0x100322AFu, 0).op) == isa::Extension::A);
    CHECK(isa::extensionOf(isa::decode32(0xC02022F3u, 0).op) == isa::Extension::Zicsr);
}

TEST_CASE("reserved and foreign encodings are rejected") {
    for (uint32_t w : kRejected32) {
        CAPTURE(w);
        CHECK_THROWS_AS(isa::decode32(w, 0), isa::UnknownInstruction);
        CHECK_FALSE(refdis::disasm32(w).known);
    }
    try {
        isa::decode32(0x00000053u, 0x2000);
    } catch (const isa::UnknownInstruction& e) {
        CHECK(e.rawBits() == 0x00000053u);
        CHECK(std::string(e.what()).find("0x53") != std::string::npos);
    }
}

TEST_CASE("decode dispatches on the length bits") {
    const uint8_t full[] = {0x13, 0x00, 0x00, 0x00};
    auto d = isa::decode(full, 0x100);
    CHECK(d.length == 4);
    CHECK(isa::formatInstruction(d) == "addi x0, x0, 0");

    const uint8_t nop[] = {0x01, 0x00};
    d = isa::decode(nop, 0x100);
    CHECK(d.length == 2);
    CHECK(d.rawBits == 0x0001);
    CHECK(d.op == isa::OpKind::Addi);
    CHECK(isa::formatInstruction(d) == "addi x0, x0, 0");

    const uint8_t wide[] = {0x1F, 0x00, 0x00, 0x00};
    CHECK_THROWS_AS(isa::decode(wide, 0), isa::UnknownInstruction);
}

TEST_CASE("truncated fetches are reported") {
    const uint8_t bytes[] = {0x13, 0x00, 0x00, 0x00};
    CHECK_THROWS_AS(isa::decode({bytes, size_t{0}}, 0), isa::TruncatedInstruction);
    CHECK_THROWS_AS(isa::decode({bytes, size_t{1}}, 0), isa::TruncatedInstruction);
    CHECK_THROWS_AS(isa::decode({bytes, size_t{2}}, 0), isa::TruncatedInstruction);
    CHECK_THROWS_AS(isa::decode({bytes, size_t{3}}, 0), isa::TruncatedInstruction);
    CHECK_NOTHROW(isa::decode({bytes, size_t{4}}, 0));
}

TEST_CASE("compressed expansion goldens") {
    CHECK(isa::expandCompressed(0x0001) == 0x00000013u);  // c.nop
    CHECK(isa::expandCompressed(0x0800) == 0x01010413u);  // c.addi4spn x8, 16
    CHECK(isa::expandCompressed(0x52FD) == 0xFFF00293u);  // c.li x5, -1
    CHECK(isa::expandCompressed(0x4512) == 0x00412503u);  // c.lwsp x10, 4
    CHECK(isa::expandCompressed(0x8082) == 0x00008067u);  // c.jr x1
    CHECK(isa::expandCompressed(0x9002) == 0x00100073u);  // c.ebreak
    CHECK(isa::expandCompressed(0x953E) == 0x00F50533u);  // c.add x10, x15

    CHECK_THROWS_AS(isa::expandCompressed(0x0000), isa::UnknownInstruction);
    CHECK_THROWS_AS(isa::expandCompressed(0x2001), isa::UnknownInstruction);  // c.addiw x0
    CHECK_THROWS_AS(isa::expandCompressed(0x4002), isa::UnknownInstruction);  // c.lwsp x0
    CHECK_THROWS_AS(isa::expandCompressed(0x8002), isa::UnknownInstruction);  // c.jr x0
    CHECK_THROWS_AS(isa::expandCompressed(0x6101), isa::UnknownInstruction);  // c.addi16sp, 0
    CHECK_THROWS_AS(isa::expandCompressed(0x6281), isa::UnknownInstruction);  // c.lui x5, 0
    CHECK_THROWS_AS(isa::expandCompressed(0x8001), isa::UnknownInstruction);  // c.srli x8, 0
    CHECK_THROWS_AS(isa::expandCompressed(0x0282), isa::UnknownInstruction);  // c.slli x5, 0
    CHECK_THROWS_AS(isa::expandCompressed(0x2000), isa::UnknownInstruction);  // c.fld
}

TEST_CASE("exhaustive compressed sweep matches the reference disassembler") {
    // Valid encodings per quadrant from the RVC layout rules:
    //   q0: 2040 + 4*2048, q1: 2048+1984+2048+2016+1904+3*2048, q2: 2016+2*1984+2047+2*2048
    constexpr int kExpectedValid = 38503;
    int accepted = 0;

    for (uint32_t v = 0; v <= 0xFFFF; ++v) {
        const uint16_t h = static_cast<uint16_t>(v);
        if ((h & 3) == 3) continue;

        refdis::Result ref = refdis::disasmCompressed(h);
        const uint8_t bytes[] = {static_cast<uint8_t>(h & 0xFF), static_cast<uint8_t>(h >> 8)};
        bool implKnown = true;
        std::string implText;
        isa::DecodedInstruction d;
        try {
            d = isa::decode(bytes, 0);
            implText = isa::formatInstruction(d);
        } catch (const isa::DecodeError&) {
            implKnown = false;
        }

        CAPTURE(h);
        REQUIRE(implKnown == ref.known);
        if (ref.known) {
            REQUIRE(implText == ref.text);
            CHECK(d.length == 2);
            CHECK(d.rawBits == h);
            checkFlagInvariants(d);
            ++accepted;
        }
    }
    CHECK(accepted == kExpectedValid);
}

TEST_CASE("seeded random 32-bit sweep matches the reference disassembler") {
    uint64_t state = 0xC0FFEE;
    int accepted = 0;
    for (int i = 0; i < 200000; ++i) {
        const uint32_t w = static_cast<uint32_t>(splitmix(state)) | 3u;

        refdis::Result ref = refdis::disasm32(w);
        bool implKnown = true;
        std::string implText;
        isa::DecodedInstruction d;
        try {
            d = isa::decode32(w, 0);
            implText = isa::formatInstruction(d);
        } catch (const isa::DecodeError&) {
            implKnown = false;
        }

        CAPTURE(w);
        REQUIRE(implKnown == ref.known);
        if (ref.known) {
            REQUIRE(implText == ref.text);
            checkFlagInvariants(d);
            ++accepted;
        }
    }
    // The opcode space is sparse; the sweep must still hit a healthy sample.
    CHECK(accepted > 1000);
}

TEST_CASE("register file discards x0 writes") {
    isa::RegisterFile regs;
    regs.set(0, 0xDEAD);
    CHECK(regs.get(0) == 0);
    regs.set(5, 42);
    CHECK(regs.get(5) == 42);
    regs.setPc(0x1000);
    CHECK(regs.pc() == 0x1000);
    auto snap = regs.snapshot();
    CHECK(snap[0] == 0);
    CHECK(snap[5] == 42);
}
