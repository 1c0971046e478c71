#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ctrv/isa.hpp"

// On-disk raw trace format, version 1. Little-endian throughout.
//
//   header:  8-byte magic "CTRV\0RAW", u32 version
//   records: u8 tag, then per-tag payload:
//     1 Branch     u8 flags (bit0 taken, bits1-2 kind: 0 jump / 1 call / 2 return),
//                  u64 source, u64 target (0 when not taken)
//     2 MemAccess  u8 flags (bit0 write), u64 instr, u64 addr
//     3 Alloc      u64 start, u64 end
//     4 Free       u64 start
//     5 Realloc    u64 oldStart, u64 start, u64 end
//     6 ImageMap   u32 index, u64 start, u64 end, u16 nameLen, name bytes
//     7 StackAlloc u64 start, u64 end

namespace ctrv::trace {

constexpr uint8_t kRawMagic[8] = {'C', 'T', 'R', 'V', '\0', 'R', 'A', 'W'};
constexpr uint32_t kRawVersion = 1;

enum class RecordTag : uint8_t {
    Branch = 1,
    MemAccess = 2,
    Alloc = 3,
    Free = 4,
    Realloc = 5,
    ImageMap = 6,
    StackAlloc = 7,
};

struct BranchRecord {
    bool taken = false;
    isa::BranchKind kind = isa::BranchKind::Jump;
    uint64_t source = 0;
    uint64_t target = 0;
};

struct MemAccessRecord {
    bool write = false;
    uint64_t instr = 0;
    uint64_t addr = 0;
};

struct AllocRecord {
    uint64_t start = 0;
    uint64_t end = 0;
};

struct FreeRecord {
    uint64_t start = 0;
};

struct ReallocRecord {
    uint64_t oldStart = 0;
    uint64_t start = 0;
    uint64_t end = 0;
};

struct ImageMapRecord {
    uint32_t index = 0;
    uint64_t start = 0;
    uint64_t end = 0;
    std::string name;
};

struct StackAllocRecord {
    uint64_t start = 0;
    uint64_t end = 0;
};

using RawRecord = std::variant<BranchRecord, MemAccessRecord, AllocRecord, FreeRecord,
                               ReallocRecord, ImageMapRecord, StackAllocRecord>;

class MalformedTrace : public std::runtime_error {
public:
    MalformedTrace(const std::string& what, size_t offset);
    size_t offset() const { return offset_; }

private:
    size_t offset_;
};

class UnknownVersion : public std::runtime_error {
public:
    explicit UnknownVersion(uint32_t version);
};

// Serializes records into an in-memory buffer; the session flushes buffers to
// their sinks. Append-only, no seeking required of the sink.
class RawTraceWriter {
public:
    RawTraceWriter() { writeHeader(); }

    void write(const RawRecord& record);
    const std::vector<uint8_t>& bytes() const { return buffer_; }
    std::vector<uint8_t> take() { return std::move(buffer_); }

private:
    void writeHeader();
    void u8(uint8_t v) { buffer_.push_back(v); }
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);

    std::vector<uint8_t> buffer_;
};

// Throws MalformedTrace / UnknownVersion on anything that does not parse
// exactly; trailing garbage counts as malformed.
std::vector<RawRecord> parseRawTrace(std::span<const uint8_t> data);

}  // namespace ctrv::trace
