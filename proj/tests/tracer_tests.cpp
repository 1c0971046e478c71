#include <doctest.h>

#include <cstdint>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "ctrv/engine.hpp"
#include "ctrv/guestkit.hpp"
#include "ctrv/loader.hpp"
#include "ctrv/raw_trace.hpp"
#include "ctrv/tracer.hpp"

using namespace ctrv;
using trace::AllocRecord;
using trace::BranchRecord;
using trace::FreeRecord;
using trace::ImageMapRecord;
using trace::MemAccessRecord;
using trace::RawRecord;
using trace::ReallocRecord;
using trace::StackAllocRecord;

namespace {

// Guest with a traced target exercising a tiny bump allocator.
const std::string kAllocGuest =
    "    .global microwalk_target\n"
    "_start:\n"
    "    call microwalk_target\n"
    "    li t3, 99\n"
    "    call microwalk_target\n"
    "    li a0, 0\n"
    "    li a7, 93\n"
    "    ecall\n"
    "\n"
    "microwalk_target:\n"
    "    addi sp, sp, -16\n"
    "    sd ra, 8(sp)\n"
    "    li a0, 32\n"
    "    call malloc\n"
    "    mv s0, a0\n"
    "    mv a0, s0\n"
    "    li a1, 64\n"
    "    call realloc\n"
    "    mv s0, a0\n"
    "    ld t0, 0(s0)\n"
    "    mv a0, s0\n"
    "    call free\n"
    "    ld ra, 8(sp)\n"
    "    addi sp, sp, 16\n"
    "    ret\n"
    "\n"
    "malloc:\n"
    "    la t0, heap_ptr\n"
    "    ld t1, 0(t0)\n"
    "    bnez t1, 1f\n"
    "    la t1, heap_area\n"
    "1:\n"
    "    add t2, t1, a0\n"
    "    sd t2, 0(t0)\n"
    "    mv a0, t1\n"
    "    ret\n"
    "\n"
    "realloc:\n"
    "    addi sp, sp, -16\n"
    "    sd ra, 8(sp)\n"
    "    mv a0, a1\n"
    "    call malloc\n"
    "    ld ra, 8(sp)\n"
    "    addi sp, sp, 16\n"
    "    ret\n"
    "\n"
    "free:\n"
    "    ret\n"
    "\n"
    "    .data\n"
    "heap_ptr:\n"
    "    .dword 0\n"
    "    .align 4\n"
    "heap_area:\n"
    "    .zero 512\n";

struct TracedGuest {
    loader::GuestMemory mem;
    loader::LoadedImage image;
    std::unique_ptr<engine::Engine> eng;
    std::unique_ptr<trace::TraceSession> session;
    std::map<int, std::shared_ptr<std::ostringstream>> sinks;

    explicit TracedGuest(const std::string& src, trace::TraceConfig config = {}) {
        auto elf = guestkit::assemble(src);
        image = loader::loadElf(mem, elf, "guest", 0);
        uint64_t sp = loader::setupProcess(mem, {"guest"}, image.endAddr);
        eng = std::make_unique<engine::Engine>(mem);
        eng->registers().set(2, sp);
        session = std::make_unique<trace::TraceSession>(*eng, std::move(config));
        session->attach([this](int index) {
            auto stream = std::make_shared<std::ostringstream>();
            sinks[index] = stream;
            return stream;
        });
        eng->registerImage(image);
    }

    std::vector<RawRecord> records(int index) {
        REQUIRE(sinks.count(index) == 1);
        std::string s = sinks.at(index)->str();
        return trace::parseRawTrace(
            std::span(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
    }
};

template <typename T>
std::vector<T> ofType(const std::vector<RawRecord>& records) {
    std::vector<T> out;
    for (const auto& r : records)
        if (const T* p = std::get_if<T>(&r)) out.push_back(*p);
    return out;
}

std::vector<uint8_t> toBytes(const std::string& s) {
    return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("raw trace records serialize to frozen byte layouts") {
    trace::RawTraceWriter w;
    w.write(BranchRecord{true, isa::BranchKind::Call, 0x0102030405060708ull,
                         0x1112131415161718ull});
    w.write(MemAccessRecord{true, 0x2122232425262728ull, 0x3132333435363738ull});

    const std::vector<uint8_t> expected = {
        'C', 'T', 'R', 'V', 0, 'R', 'A', 'W',
        0x01, 0x00, 0x00, 0x00,
        0x01, 0x03,
        0x08, 0x07, 0x06, 0x05, 0x04, 0x03, 0x02, 0x01,
        0x18, 0x17, 0x16, 0x15, 0x14, 0x13, 0x12, 0x11,
        0x02, 0x01,
        0x28, 0x27, 0x26, 0x25, 0x24, 0x23, 0x22, 0x21,
        0x38, 0x37, 0x36, 0x35, 0x34, 0x33, 0x32, 0x31,
    };
    CHECK(w.bytes() == expected);
}

TEST_CASE("raw trace round-trips every record kind") {
    trace::RawTraceWriter w;
    w.write(BranchRecord{false, isa::BranchKind::Jump, 0x100, 0});
    w.write(BranchRecord{true, isa::BranchKind::Return, 0x104, 0x200});
    w.write(MemAccessRecord{false, 0x108, 0x5000});
    w.write(AllocRecord{0x7000, 0x7040});
    w.write(FreeRecord{0x7000});
    w.write(ReallocRecord{0x7000, 0x8000, 0x8080});
    w.write(ImageMapRecord{3, 0x10000, 0x20000, "some/image"});
    w.write(StackAllocRecord{0x30000, 0x40000});

    auto records = trace::parseRawTrace(w.bytes());
    REQUIRE(records.size() == 8);

    auto& b0 = std::get<BranchRecord>(records[0]);
    CHECK_FALSE(b0.taken);
    CHECK(b0.kind == isa::BranchKind::Jump);
    CHECK(b0.source == 0x100);
    CHECK(b0.target == 0);

    auto& b1 = std::get<BranchRecord>(records[1]);
    CHECK(b1.taken);
    CHECK(b1.kind == isa::BranchKind::Return);

    auto& m = std::get<MemAccessRecord>(records[2]);
    CHECK_FALSE(m.write);
    CHECK(m.instr == 0x108);
    CHECK(m.addr == 0x5000);

    auto& a = std::get<AllocRecord>(records[3]);
    CHECK(a.start == 0x7000);
    CHECK(a.end == 0x7040);

    CHECK(std::get<FreeRecord>(records[4]).start == 0x7000);

    auto& r = std::get<ReallocRecord>(records[5]);
    CHECK(r.oldStart == 0x7000);
    CHECK(r.start == 0x8000);
    CHECK(r.end == 0x8080);

    auto& i = std::get<ImageMapRecord>(records[6]);
    CHECK(i.index == 3);
    CHECK(i.start == 0x10000);
    CHECK(i.end == 0x20000);
    CHECK(i.name == "some/image");

    auto& s = std::get<StackAllocRecord>(records[7]);
    CHECK(s.start == 0x30000);
    CHECK(s.end == 0x40000);
}

TEST_CASE("malformed raw traces are rejected") {
    trace::RawTraceWriter w;
    w.write(FreeRecord{0x1234});
    auto good = w.bytes();

    {
        auto bad = good;
        bad[2] = 'X';
        CHECK_THROWS_AS(trace::parseRawTrace(bad), trace::MalformedTrace);
    }
    {
        auto bad = good;
        bad[8] = 2;  // version
        CHECK_THROWS_AS(trace::parseRawTrace(bad), trace::UnknownVersion);
    }
    {
        auto bad = good;
        bad.pop_back();
        CHECK_THROWS_AS(trace::parseRawTrace(bad), trace::MalformedTrace);
    }
    {
        auto bad = good;
        bad.push_back(0x40);
        CHECK_THROWS_AS(trace::parseRawTrace(bad), trace::MalformedTrace);
    }
    {
        auto bad = good;
        bad.push_back(9);  // unknown tag
        CHECK_THROWS_AS(trace::parseRawTrace(bad), trace::MalformedTrace);
    }
    {
        std::vector<uint8_t> empty;
        CHECK_THROWS_AS(trace::parseRawTrace(empty), trace::MalformedTrace);
    }
    {
        // Branch with an out-of-range kind field.
        std::vector<uint8_t> bad(good.begin(), good.begin() + 12);
        bad.push_back(1);
        bad.push_back(7);  // kind 3
        for (int i = 0; i < 16; ++i) bad.push_back(0);
        CHECK_THROWS_AS(trace::parseRawTrace(bad), trace::MalformedTrace);
    }
    {
        // Alloc whose end precedes its start.
        std::vector<uint8_t> bad(good.begin(), good.begin() + 12);
        bad.push_back(3);
        for (int i = 0; i < 8; ++i) bad.push_back(0xFF);
        for (int i = 0; i < 8; ++i) bad.push_back(0x00);
        CHECK_THROWS_AS(trace::parseRawTrace(bad), trace::MalformedTrace);
    }

    // A bare header is a valid empty trace.
    std::vector<uint8_t> headerOnly(good.begin(), good.begin() + 12);
    CHECK(trace::parseRawTrace(headerOnly).empty());
}

TEST_CASE("session splits the run into prefix and per-testcase segments") {
    TracedGuest g(kAllocGuest);
    g.session->requireTarget();
    auto status = g.eng->run(g.image.entryPoint);
    REQUIRE(status.kind == engine::ExitStatus::Kind::Exited);
    g.session->finish();

    REQUIRE(g.sinks.size() == 3);
    REQUIRE(g.sinks.count(-1) == 1);
    REQUIRE(g.sinks.count(0) == 1);
    REQUIRE(g.sinks.count(1) == 1);
    CHECK(g.session->testcaseIndex() == 1);

    const uint64_t heapArea = g.image.symbol("heap_area").value();
    const uint64_t target = g.image.symbol("microwalk_target").value();

    auto prefix = g.records(-1);
    REQUIRE(prefix.size() == 3);
    auto& stack = std::get<StackAllocRecord>(prefix[0]);
    CHECK(stack.start == g.mem.stack().base);
    CHECK(stack.end == g.mem.stack().top());
    auto& imap = std::get<ImageMapRecord>(prefix[1]);
    CHECK(imap.index == 0);
    CHECK(imap.start == g.image.startAddr);
    CHECK(imap.end == g.image.endAddr);
    CHECK(imap.name == "guest");
    auto& entryCall = std::get<BranchRecord>(prefix[2]);
    CHECK(entryCall.kind == isa::BranchKind::Call);
    CHECK(entryCall.taken);
    CHECK(entryCall.target == target);

    for (int tc = 0; tc < 2; ++tc) {
        CAPTURE(tc);
        auto segment = g.records(tc);

        auto allocs = ofType<AllocRecord>(segment);
        auto reallocs = ofType<ReallocRecord>(segment);
        auto frees = ofType<FreeRecord>(segment);
        REQUIRE(allocs.size() == 1);
        REQUIRE(reallocs.size() == 1);
        REQUIRE(frees.size() == 1);

        // Bump allocation advances 96 bytes per test case (32 + 64).
        const uint64_t base = heapArea + 96ull * static_cast<uint64_t>(tc);
        CHECK(allocs[0].start == base);
        CHECK(allocs[0].end == base + 32);
        CHECK(reallocs[0].oldStart == base);
        CHECK(reallocs[0].start == base + 32);
        CHECK(reallocs[0].end == base + 32 + 64);
        CHECK(frees[0].start == base + 32);

        // sd ra, ld t0, ld ra; nothing from inside the allocators.
        auto mems = ofType<MemAccessRecord>(segment);
        REQUIRE(mems.size() == 3);
        CHECK(mems[0].write);
        CHECK_FALSE(mems[1].write);
        CHECK(mems[1].addr == base + 32);
        CHECK_FALSE(mems[2].write);

        const uint64_t allocBegin = g.image.symbol("malloc").value();
        for (const auto& m : mems) CHECK(m.instr < allocBegin);

        auto branches = ofType<BranchRecord>(segment);
        REQUIRE(branches.size() == 4);
        CHECK(branches[0].kind == isa::BranchKind::Call);  // malloc
        CHECK(branches[1].kind == isa::BranchKind::Call);  // realloc
        CHECK(branches[2].kind == isa::BranchKind::Call);  // free
        CHECK(branches[3].kind == isa::BranchKind::Return);
        for (const auto& b : branches) CHECK(b.source < allocBegin);

        // The target's return is the final record of the segment.
        CHECK(std::holds_alternative<BranchRecord>(segment.back()));
        CHECK(segment.size() == 10);
    }

    // Counter bookkeeping matches what landed in the sinks.
    uint64_t total = g.records(-1).size() + g.records(0).size() + g.records(1).size();
    CHECK(g.session->recordsWritten() == total);
    CHECK(g.session->branchEvents() == 1 + 4 + 4);
    CHECK(g.session->memEvents() == 6);
    CHECK(g.session->allocEvents() == 6);
}

TEST_CASE("untraced images keep allocation events but drop branches and accesses") {
    trace::TraceConfig config;
    config.tracedImages = {1};  // image 0 is not traced
    TracedGuest g(kAllocGuest, config);
    auto status = g.eng->run(g.image.entryPoint);
    REQUIRE(status.kind == engine::ExitStatus::Kind::Exited);
    g.session->finish();

    auto prefix = g.records(-1);
    REQUIRE(prefix.size() == 2);  // stack + image, no branch
    CHECK(std::holds_alternative<StackAllocRecord>(prefix[0]));
    CHECK(std::holds_alternative<ImageMapRecord>(prefix[1]));

    auto segment = g.records(0);
    REQUIRE(segment.size() == 3);
    CHECK(std::holds_alternative<AllocRecord>(segment[0]));
    CHECK(std::holds_alternative<ReallocRecord>(segment[1]));
    CHECK(std::holds_alternative<FreeRecord>(segment[2]));
    CHECK(g.session->branchEvents() == 0);
    CHECK(g.session->memEvents() == 0);
}

TEST_CASE("null and zero-size allocator calls produce minimal records") {
    const std::string src =
        "    .global microwalk_target\n"
        "_start:\n"
        "    call microwalk_target\n"
        "    li a0, 0\n"
        "    li a7, 93\n"
        "    ecall\n"
        "microwalk_target:\n"
        "    addi sp, sp, -16\n"
        "    sd ra, 8(sp)\n"
        "    li a0, 0\n"
        "    call free\n"
        "    li a0, 0\n"
        "    li a1, 16\n"
        "    call realloc\n"
        "    mv s0, a0\n"
        "    mv a0, s0\n"
        "    li a1, 0\n"
        "    call realloc\n"
        "    ld ra, 8(sp)\n"
        "    addi sp, sp, 16\n"
        "    ret\n"
        "malloc:\n"
        "    la t0, heap_ptr\n"
        "    ld t1, 0(t0)\n"
        "    bnez t1, 1f\n"
        "    la t1, heap_area\n"
        "1:\n"
        "    add t2, t1, a0\n"
        "    sd t2, 0(t0)\n"
        "    mv a0, t1\n"
        "    ret\n"
        "realloc:\n"
        "    addi sp, sp, -16\n"
        "    sd ra, 8(sp)\n"
        "    mv a0, a1\n"
        "    call malloc\n"
        "    ld ra, 8(sp)\n"
        "    addi sp, sp, 16\n"
        "    ret\n"
        "free:\n"
        "    ret\n"
        "    .data\n"
        "heap_ptr:\n"
        "    .dword 0\n"
        "    .align 4\n"
        "heap_area:\n"
        "    .zero 64\n";
    TracedGuest g(src);
    auto status = g.eng->run(g.image.entryPoint);
    REQUIRE(status.kind == engine::ExitStatus::Kind::Exited);
    g.session->finish();

    auto segment = g.records(0);
    const uint64_t heapArea = g.image.symbol("heap_area").value();

    // free(0) is silent; realloc(0, 16) allocates; realloc(p, 0) frees.
    auto allocs = ofType<AllocRecord>(segment);
    auto frees = ofType<FreeRecord>(segment);
    auto reallocs = ofType<ReallocRecord>(segment);
    REQUIRE(allocs.size() == 1);
    CHECK(allocs[0].start == heapArea);
    CHECK(allocs[0].end == heapArea + 16);
    REQUIRE(frees.size() == 1);
    CHECK(frees[0].start == heapArea);
    CHECK(reallocs.empty());
}

TEST_CASE("re-entering the target is a hard error") {
    const std::string src =
        "    .global microwalk_target\n"
        "_start:\n"
        "    call microwalk_target\n"
        "    li a0, 0\n"
        "    li a7, 93\n"
        "    ecall\n"
        "microwalk_target:\n"
        "    addi sp, sp, -16\n"
        "    sd ra, 8(sp)\n"
        "    la t0, flag\n"
        "    lw t1, 0(t0)\n"
        "    bnez t1, done\n"
        "    li t1, 1\n"
        "    sw t1, 0(t0)\n"
        "    call microwalk_target\n"
        "done:\n"
        "    ld ra, 8(sp)\n"
        "    addi sp, sp, 16\n"
        "    ret\n"
        "    .data\n"
        "flag:\n"
        "    .word 0\n";
    TracedGuest g(src);
    CHECK_THROWS_AS(g.eng->run(g.image.entryPoint), trace::TargetNestingError);
}

TEST_CASE("a missing target symbol is reported after image registration") {
    loader::GuestMemory mem;
    auto elf = guestkit::assemble("_start:\n    li a0, 0\n    li a7, 93\n    ecall\n");
    auto image = loader::loadElf(mem, elf, "guest", 0);
    loader::setupProcess(mem, {"guest"}, image.endAddr);
    engine::Engine eng(mem);
    trace::TraceSession session(eng);
    session.attach([](int) { return std::make_shared<std::ostringstream>(); });
    eng.registerImage(image);
    CHECK_THROWS_AS(session.requireTarget(), trace::MissingTargetSymbol);
    CHECK_FALSE(session.targetAddress().has_value());
}

TEST_CASE("attaching twice is rejected") {
    loader::GuestMemory mem;
    engine::Engine eng(mem);
    trace::TraceSession session(eng);
    session.attach([](int) { return nullptr; });
    CHECK_THROWS_AS(session.attach([](int) { return nullptr; }), trace::TraceError);
}

TEST_CASE("identical runs produce byte-identical raw traces") {
    auto runOnce = [&](int index) {
        TracedGuest g(kAllocGuest);
        auto status = g.eng->run(g.image.entryPoint);
        REQUIRE(status.kind == engine::ExitStatus::Kind::Exited);
        g.session->finish();
        return toBytes(g.sinks.at(index)->str());
    };
    CHECK(runOnce(-1) == runOnce(-1));
    CHECK(runOnce(0) == runOnce(0));
    CHECK(runOnce(1) == runOnce(1));
}
