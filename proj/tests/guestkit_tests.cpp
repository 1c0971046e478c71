#include <doctest.h>

#include <cstdint>
#include <string>
#include <vector>

#include "ctrv/guestkit.hpp"
#include "ctrv/isa.hpp"
#include "ctrv/loader.hpp"

using namespace ctrv;

namespace {

uint32_t wordAt(const std::vector<uint8_t>& bytes, size_t offset) {
    REQUIRE(offset + 4 <= bytes.size());
    return static_cast<uint32_t>(bytes[offset]) | (static_cast<uint32_t>(bytes[offset + 1]) << 8) |
           (static_cast<uint32_t>(bytes[offset + 2]) << 16) |
           (static_cast<uint32_t>(bytes[offset + 3]) << 24);
}

std::string manyNops(int count) {
    std::string out;
    for (int i = 0; i < count; ++i) out += "    nop\n";
    return out;
}

}  // namespace

TEST_CASE("assembler emits frozen encodings") {
    auto prog = guestkit::assembleProgram(
        "_start:\n"
        "li t0, 1\n"
        "add a0, a1, a2\n"
        "ld a0, 8(sp)\n"
        "ecall\n");
    REQUIRE(prog.text.size() == 16);
    CHECK(wordAt(prog.text, 0) == 0x00100293u);   // addi x5, x0, 1
    CHECK(wordAt(prog.text, 4) == 0x00C58533u);   // add x10, x11, x12
    CHECK(wordAt(prog.text, 8) == 0x00813503u);   // ld x10, 8(x2)
    CHECK(wordAt(prog.text, 12) == 0x00000073u);  // ecall
    CHECK(prog.textBase == 0x10000);
    CHECK(prog.entry == 0x10000);
}

TEST_CASE("abi and numeric register names assemble identically") {
    auto abi = guestkit::assembleProgram("_start:\nadd a0, a1, a2\nmv t6, ra\nsd s0, 0(sp)\n");
    auto num = guestkit::assembleProgram("_start:\nadd x10, x11, x12\nmv x31, x1\nsd x8, 0(x2)\n");
    CHECK(abi.text == num.text);
}

TEST_CASE("labels resolve forward and backward") {
    auto prog = guestkit::assembleProgram(
        "_start:\n"
        "    li t0, 3\n"
        "loop:\n"
        "    addi t0, t0, -1\n"
        "    bnez t0, loop\n"
        "    j done\n"
        "    nop\n"
        "done:\n"
        "    ret\n");
    CHECK(prog.labels.at("_start") == 0x10000);
    CHECK(prog.labels.at("loop") == 0x10004);
    CHECK(prog.labels.at("done") == 0x10014);

    auto bnez = isa::decode32(wordAt(prog.text, 8), 0x10008);
    CHECK(bnez.isCondBranch);
    CHECK(bnez.imm == -4);

    auto jump = isa::decode32(wordAt(prog.text, 12), 0x1000C);
    CHECK(jump.isDirectJump);
    CHECK(jump.imm == 8);
}

TEST_CASE("numeric labels bind to the nearest definition") {
    auto prog = guestkit::assembleProgram(
        "_start:\n"
        "1:\n"
        "    nop\n"
        "    j 1f\n"
        "    nop\n"
        "1:\n"
        "    j 1b\n");
    // j 1f at 0x10004 targets 0x1000C; j 1b at 0x1000C targets itself.
    auto fwd = isa::decode32(wordAt(prog.text, 4), 0x10004);
    CHECK(fwd.imm == 8);
    auto bwd = isa::decode32(wordAt(prog.text, 12), 0x1000C);
    CHECK(bwd.imm == 0);
}

TEST_CASE("assembly errors carry the offending line") {
    try {
        guestkit::assembleProgram("_start:\nfrobnicate x1, x2\n");
        FAIL("expected UnknownMnemonic");
    } catch (const guestkit::UnknownMnemonic& e) {
        CHECK(e.line() == 2);
    }

    CHECK_THROWS_AS(guestkit::assembleProgram("_start:\nj nowhere\n"), guestkit::UnresolvedLabel);
    CHECK_THROWS_AS(guestkit::assembleProgram("_start:\naddi q7, x0, 1\n"), guestkit::AsmError);
    CHECK_THROWS_AS(guestkit::assembleProgram("_start:\n    .word 1\n"), guestkit::AsmError);
}

TEST_CASE("conditional branch range is hard-checked") {
    const std::string inRange = "_start:\nbeqz t0, far\n" + manyNops(1000) + "far:\n    ret\n";
    CHECK_NOTHROW(guestkit::assembleProgram(inRange));

    const std::string outOfRange = "_start:\nbeqz t0, far\n" + manyNops(1023) + "far:\n    ret\n";
    CHECK_THROWS_AS(guestkit::assembleProgram(outOfRange), guestkit::BranchOutOfRange);
}

TEST_CASE("jal range is hard-checked") {
    const std::string inRange = "_start:\nj far\n" + manyNops(262000) + "far:\n    ret\n";
    CHECK_NOTHROW(guestkit::assembleProgram(inRange));

    const std::string outOfRange = "_start:\nj far\n" + manyNops(262143) + "far:\n    ret\n";
    CHECK_THROWS_AS(guestkit::assembleProgram(outOfRange), guestkit::BranchOutOfRange);
}

TEST_CASE("data directives lay out bytes in order") {
    auto prog = guestkit::assembleProgram(
        "_start:\n"
        "    ret\n"
        "    .data\n"
        "val:\n"
        "    .word 0x11223344\n"
        "msg:\n"
        "    .asciz \"hi\"\n");
    REQUIRE(prog.data.size() == 7);
    CHECK(prog.data[0] == 0x44);
    CHECK(prog.data[1] == 0x33);
    CHECK(prog.data[2] == 0x22);
    CHECK(prog.data[3] == 0x11);
    CHECK(prog.data[4] == 'h');
    CHECK(prog.data[5] == 'i');
    CHECK(prog.data[6] == 0);
    CHECK(prog.labels.at("val") == prog.dataBase);
    CHECK(prog.labels.at("msg") == prog.dataBase + 4);
    CHECK(prog.dataBase >= prog.textBase + prog.text.size());
    CHECK(prog.dataBase % loader::kPageSize == 0);
}

TEST_CASE("emitted elf round-trips through the loader") {
    const std::string src =
        "    .global microwalk_target\n"
        "_start:\n"
        "    li a0, 0\n"
        "    li a7, 93\n"
        "    ecall\n"
        "microwalk_target:\n"
        "    ret\n"
        "    .data\n"
        "table:\n"
        "    .dword 0x0102030405060708\n";
    auto prog = guestkit::assembleProgram(src);
    auto elf = guestkit::assemble(src);

    loader::GuestMemory mem;
    auto image = loader::loadElf(mem, elf, "guest.elf", 0);

    CHECK(image.entryPoint == prog.entry);
    CHECK(image.startAddr <= prog.textBase);
    CHECK(image.endAddr >= prog.dataBase + prog.data.size());
    REQUIRE(image.symbol("microwalk_target").has_value());
    CHECK(*image.symbol("microwalk_target") == prog.labels.at("microwalk_target"));
    REQUIRE(image.symbol("table").has_value());
    CHECK(*image.symbol("table") == prog.labels.at("table"));

    std::vector<uint8_t> text(prog.text.size());
    mem.readBytes(prog.textBase, text);
    CHECK(text == prog.text);
    CHECK(mem.loadUnsigned(prog.labels.at("table"), 8) == 0x0102030405060708ull);

    auto* textSeg = mem.find(prog.textBase);
    REQUIRE(textSeg != nullptr);
    CHECK((textSeg->perms & loader::PermExec) != 0);
    CHECK((textSeg->perms & loader::PermWrite) == 0);
    auto* dataSeg = mem.find(prog.dataBase);
    REQUIRE(dataSeg != nullptr);
    CHECK((dataSeg->perms & loader::PermWrite) != 0);
    CHECK((dataSeg->perms & loader::PermExec) == 0);

    CHECK(loader::readElfSymbols(elf) == image.symbols);
}

TEST_CASE("fixture catalog is stable and self-describing") {
    auto names = guestkit::fixtureNames();
    REQUIRE(!names.empty());
    bool sawCtXor = false, sawSbox = false;
    for (const auto& n : names) {
        if (n == "ct_xor") sawCtXor = true;
        if (n == "leaky_sbox") sawSbox = true;
        auto fixture = guestkit::buildFixture(n);
        CHECK(fixture.name == n);
        CHECK(!fixture.elf.empty());
        CHECK(fixture.manifest.leakKinds.size() == fixture.manifest.uniqueLeakages);

        loader::GuestMemory mem;
        auto image = loader::loadElf(mem, fixture.elf, n, 0);
        CHECK(image.symbol("microwalk_target").has_value());
    }
    CHECK(sawCtXor);
    CHECK(sawSbox);
    CHECK(guestkit::buildFixture("ct_xor").manifest.uniqueLeakages == 0);
    CHECK(guestkit::buildFixture("leaky_sbox").manifest.uniqueLeakages == 1);
    CHECK(guestkit::buildFixture("leaky_sbox").manifest.leakKinds.at(0) == "MemoryAccess");

    CHECK_THROWS_AS(guestkit::buildFixture("no_such_fixture"), guestkit::UnknownFixture);
    CHECK(guestkit::fixtureSource("ct_xor").find("microwalk_target") != std::string::npos);
}
