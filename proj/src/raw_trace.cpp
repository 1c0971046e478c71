#include "ctrv/raw_trace.hpp"

#include <cstring>
#include <sstream>

namespace ctrv::trace {

MalformedTrace::MalformedTrace(const std::string& what, size_t offset)
    : std::runtime_error([&] {
          std::ostringstream os;
          os << "malformed trace at byte " << offset << ": " << what;
          return os.str();
      }()),
      offset_(offset) {}

UnknownVersion::UnknownVersion(uint32_t version)
    : std::runtime_error("unsupported trace format version " + std::to_string(version)) {}

void RawTraceWriter::writeHeader() {
    buffer_.insert(buffer_.end(), std::begin(kRawMagic), std::end(kRawMagic));
    u32(kRawVersion);
}

void RawTraceWriter::u16(uint16_t v) {
    u8(static_cast<uint8_t>(v));
    u8(static_cast<uint8_t>(v >> 8));
}

void RawTraceWriter::u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
}

void RawTraceWriter::u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
}

void RawTraceWriter::write(const RawRecord& record) {
    std::visit(
        [&](const auto& r) {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, BranchRecord>) {
                u8(static_cast<uint8_t>(RecordTag::Branch));
                u8(static_cast<uint8_t>((r.taken ? 1 : 0) |
                                        (static_cast<uint8_t>(r.kind) << 1)));
                u64(r.source);
                u64(r.target);
            } else if constexpr (std::is_same_v<T, MemAccessRecord>) {
                u8(static_cast<uint8_t>(RecordTag::MemAccess));
                u8(r.write ? 1 : 0);
                u64(r.instr);
                u64(r.addr);
            } else if constexpr (std::is_same_v<T, AllocRecord>) {
                u8(static_cast<uint8_t>(RecordTag::Alloc));
                u64(r.start);
                u64(r.end);
            } else if constexpr (std::is_same_v<T, FreeRecord>) {
                u8(static_cast<uint8_t>(RecordTag::Free));
                u64(r.start);
            } else if constexpr (std::is_same_v<T, ReallocRecord>) {
                u8(static_cast<uint8_t>(RecordTag::Realloc));
                u64(r.oldStart);
                u64(r.start);
                u64(r.end);
            } else if constexpr (std::is_same_v<T, ImageMapRecord>) {
                u8(static_cast<uint8_t>(RecordTag::ImageMap));
                u32(r.index);
                u64(r.start);
                u64(r.end);
                u16(static_cast<uint16_t>(r.name.size()));
                buffer_.insert(buffer_.end(), r.name.begin(), r.name.end());
            } else if constexpr (std::is_same_v<T, StackAllocRecord>) {
                u8(static_cast<uint8_t>(RecordTag::StackAlloc));
                u64(r.start);
                u64(r.end);
            }
        },
        record);
}

namespace {

class Cursor {
public:
    explicit Cursor(std::span<const uint8_t> data) : data_(data) {}

    uint8_t u8() { return take(1)[0]; }
    uint16_t u16() { return static_cast<uint16_t>(read(2)); }
    uint32_t u32() { return static_cast<uint32_t>(read(4)); }
    uint64_t u64() { return read(8); }
    std::span<const uint8_t> take(size_t n) {
        if (pos_ + n > data_.size()) throw MalformedTrace("unexpected end of data", pos_);
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    size_t pos() const { return pos_; }
    bool done() const { return pos_ == data_.size(); }

private:
    uint64_t read(size_t n) {
        auto s = take(n);
        uint64_t v = 0;
        for (size_t i = 0; i < n; ++i) v |= static_cast<uint64_t>(s[i]) << (8 * i);
        return v;
    }

    std::span<const uint8_t> data_;
    size_t pos_ = 0;
};

}  // namespace

std::vector<RawRecord> parseRawTrace(std::span<const uint8_t> data) {
    Cursor c(data);
    auto magic = c.take(8);
    if (std::memcmp(magic.data(), kRawMagic, 8) != 0)
        throw MalformedTrace("bad magic", 0);
    uint32_t version = c.u32();
    if (version != kRawVersion) throw UnknownVersion(version);

    std::vector<RawRecord> records;
    while (!c.done()) {
        size_t at = c.pos();
        uint8_t tag = c.u8();
        switch (static_cast<RecordTag>(tag)) {
        case RecordTag::Branch: {
            uint8_t flags = c.u8();
            uint8_t kind = (flags >> 1) & 3;
            if (kind > 2 || (flags & ~7u))
                throw MalformedTrace("invalid branch flags", at);
            BranchRecord r;
            r.taken = flags & 1;
            r.kind = static_cast<isa::BranchKind>(kind);
            r.source = c.u64();
            r.target = c.u64();
            records.emplace_back(r);
            break;
        }
        case RecordTag::MemAccess: {
            uint8_t flags = c.u8();
            if (flags & ~1u) throw MalformedTrace("invalid memory access flags", at);
            MemAccessRecord r;
            r.write = flags & 1;
            r.instr = c.u64();
            r.addr = c.u64();
            records.emplace_back(r);
            break;
        }
        case RecordTag::Alloc: {
            AllocRecord r;
            r.start = c.u64();
            r.end = c.u64();
            if (r.end <= r.start) throw MalformedTrace("empty allocation range", at);
            records.emplace_back(r);
            break;
        }
        case RecordTag::Free: {
            FreeRecord r;
            r.start = c.u64();
            records.emplace_back(r);
            break;
        }
        case RecordTag::Realloc: {
            ReallocRecord r;
            r.oldStart = c.u64();
            r.start = c.u64();
            r.end = c.u64();
            if (r.end <= r.start) throw MalformedTrace("empty allocation range", at);
            records.emplace_back(r);
            break;
        }
        case RecordTag::ImageMap: {
            ImageMapRecord r;
            r.index = c.u32();
            r.start = c.u64();
            r.end = c.u64();
            uint16_t len = c.u16();
            auto name = c.take(len);
            r.name.assign(name.begin(), name.end());
            records.emplace_back(std::move(r));
            break;
        }
        case RecordTag::StackAlloc: {
            StackAllocRecord r;
            r.start = c.u64();
            r.end = c.u64();
            records.emplace_back(r);
            break;
        }
        default:
            throw MalformedTrace("unknown record tag " + std::to_string(tag), at);
        }
    }
    return records;
}

}  // namespace ctrv::trace
