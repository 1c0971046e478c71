#include "ctrv/traces.hpp"

#include "ctrv/fnv.hpp"

#include <algorithm>
#include <sstream>

namespace ctrv::trace {

namespace {

void putU8(std::vector<uint8_t>& out, uint8_t v) {
    out.push_back(v);
}

void putU32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void putU64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

    size_t offset() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

    uint8_t u8() {
        need(1);
        return bytes_[pos_++];
    }

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= uint32_t{bytes_[pos_ + i]} << (8 * i);
        pos_ += 4;
        return v;
    }

    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= uint64_t{bytes_[pos_ + i]} << (8 * i);
        pos_ += 8;
        return v;
    }

private:
    void need(size_t n) {
        if (bytes_.size() - pos_ < n) {
            std::ostringstream msg;
            msg << "canonical trace truncated at offset " << pos_;
            throw PreprocessError(msg.str());
        }
    }

    std::span<const uint8_t> bytes_;
    size_t pos_ = 0;
};

std::string hex(uint64_t v) {
    std::ostringstream out;
    out << "0x" << std::hex << v;
    return out.str();
}

const char* kindName(isa::BranchKind kind) {
    switch (kind) {
    case isa::BranchKind::Call: return "call";
    case isa::BranchKind::Return: return "return";
    default: return "jump";
    }
}

}  // namespace

uint64_t imagesFingerprint(std::span<const ImageInfo> images) {
    uint64_t h = kFnvBasis;
    for (const auto& image : images) {
        h = fnv1aU32(h, image.index);
        h = fnv1aStr(h, image.path);
        h = fnv1aU64(h, image.end - image.start);
    }
    return h;
}

PreprocessResult preprocess(std::span<const uint8_t> raw, std::span<const ImageInfo> images,
                            const PreprocessState* seed) {
    auto records = parseRawTrace(raw);
    PreprocessResult result;
    result.state = seed ? *seed : PreprocessState{};
    result.trace.imagesFingerprint = imagesFingerprint(images);
    auto& state = result.state;
    auto& entries = result.trace.entries;

    auto codeRef = [&](uint64_t addr) -> CodeRef {
        for (const auto& image : images) {
            if (addr >= image.start && addr < image.end)
                return {image.index, addr - image.start};
        }
        return {kNoImage, addr};
    };

    auto memRef = [&](uint64_t addr) -> MemRef {
        auto it = state.blocks.upper_bound(addr);
        if (it != state.blocks.begin()) {
            const auto& [start, block] = *std::prev(it);
            if (addr < block.end)
                return {MemKind::Heap, block.id, addr - start};
        }
        for (const auto& image : images) {
            if (addr >= image.start && addr < image.end)
                return {MemKind::ImageData, image.index, addr - image.start};
        }
        if (state.stack && addr >= state.stack->base && addr < state.stack->top())
            return {MemKind::Stack, 0, addr - state.stack->base};
        return {MemKind::Absolute, 0, addr};
    };

    for (const auto& record : records) {
        std::visit(
            [&](const auto& rec) {
                using T = std::decay_t<decltype(rec)>;
                if constexpr (std::is_same_v<T, BranchRecord>) {
                    BranchEntry entry;
                    entry.source = codeRef(rec.source);
                    entry.taken = rec.taken;
                    entry.kind = rec.kind;
                    if (rec.taken)
                        entry.target = codeRef(rec.target);
                    entries.push_back(entry);
                } else if constexpr (std::is_same_v<T, MemAccessRecord>) {
                    entries.push_back(MemAccessEntry{codeRef(rec.instr), memRef(rec.addr),
                                                     rec.write});
                } else if constexpr (std::is_same_v<T, AllocRecord>) {
                    state.blocks[rec.start] = {rec.end, state.nextBlockId++};
                } else if constexpr (std::is_same_v<T, FreeRecord>) {
                    state.blocks.erase(rec.start);
                } else if constexpr (std::is_same_v<T, ReallocRecord>) {
                    state.blocks.erase(rec.oldStart);
                    state.blocks[rec.start] = {rec.end, state.nextBlockId++};
                } else if constexpr (std::is_same_v<T, ImageMapRecord>) {
                    auto match = std::find_if(images.begin(), images.end(),
                                              [&](const ImageInfo& info) {
                                                  return info.index == rec.index;
                                              });
                    if (match == images.end())
                        throw PreprocessError("trace maps image #" +
                                              std::to_string(rec.index) +
                                              " missing from the image table");
                    if (match->path != rec.name || match->start != rec.start ||
                        match->end != rec.end)
                        throw PreprocessError("trace image #" + std::to_string(rec.index) +
                                              " disagrees with the image table");
                } else if constexpr (std::is_same_v<T, StackAllocRecord>) {
                    state.stack = loader::StackRegion{rec.start, rec.end - rec.start};
                }
            },
            record);
    }
    return result;
}

std::vector<uint8_t> serializeCanonical(const CanonicalTrace& trace) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kCanonicalMagic, kCanonicalMagic + 8);
    putU32(out, kCanonicalVersion);
    putU64(out, trace.imagesFingerprint);
    putU64(out, trace.entries.size());
    for (const auto& entry : trace.entries) {
        std::visit(
            [&](const auto& e) {
                using T = std::decay_t<decltype(e)>;
                if constexpr (std::is_same_v<T, BranchEntry>) {
                    putU8(out, 1);
                    uint8_t flags = 0;
                    if (e.taken)
                        flags |= 1;
                    flags |= static_cast<uint8_t>(e.kind) << 1;
                    if (e.target)
                        flags |= 8;
                    putU8(out, flags);
                    putU32(out, e.source.imageIndex);
                    putU64(out, e.source.offset);
                    putU32(out, e.target ? e.target->imageIndex : 0);
                    putU64(out, e.target ? e.target->offset : 0);
                } else {
                    putU8(out, 2);
                    putU8(out, e.write ? 1 : 0);
                    putU32(out, e.instr.imageIndex);
                    putU64(out, e.instr.offset);
                    putU8(out, static_cast<uint8_t>(e.ref.kind));
                    putU64(out, e.ref.id);
                    putU64(out, e.ref.offset);
                }
            },
            entry);
    }
    return out;
}

CanonicalTrace parseCanonical(std::span<const uint8_t> bytes) {
    Reader in(bytes);
    for (char expect : kCanonicalMagic) {
        if (static_cast<char>(in.u8()) != expect)
            throw PreprocessError("not a canonical trace (bad magic)");
    }
    uint32_t version = in.u32();
    if (version != kCanonicalVersion)
        throw PreprocessError("unsupported canonical trace version " +
                              std::to_string(version));
    CanonicalTrace trace;
    trace.imagesFingerprint = in.u64();
    uint64_t count = in.u64();
    trace.entries.reserve(count < 0x100000 ? count : 0);
    for (uint64_t i = 0; i < count; ++i) {
        uint8_t tag = in.u8();
        if (tag == 1) {
            uint8_t flags = in.u8();
            if ((flags & ~0x0Fu) != 0 || ((flags >> 1) & 3) > 2)
                throw PreprocessError("malformed branch entry at offset " +
                                      std::to_string(in.offset()));
            BranchEntry entry;
            entry.taken = flags & 1;
            entry.kind = static_cast<isa::BranchKind>((flags >> 1) & 3);
            entry.source.imageIndex = in.u32();
            entry.source.offset = in.u64();
            CodeRef target{in.u32(), in.u64()};
            if (flags & 8)
                entry.target = target;
            trace.entries.push_back(entry);
        } else if (tag == 2) {
            uint8_t flags = in.u8();
            if ((flags & ~1u) != 0)
                throw PreprocessError("malformed access entry at offset " +
                                      std::to_string(in.offset()));
            MemAccessEntry entry;
            entry.write = flags & 1;
            entry.instr.imageIndex = in.u32();
            entry.instr.offset = in.u64();
            uint8_t kind = in.u8();
            if (kind > 3)
                throw PreprocessError("bad access kind at offset " +
                                      std::to_string(in.offset()));
            entry.ref.kind = static_cast<MemKind>(kind);
            entry.ref.id = in.u64();
            entry.ref.offset = in.u64();
            trace.entries.push_back(entry);
        } else {
            throw PreprocessError("unknown entry tag " + std::to_string(tag) +
                                  " at offset " + std::to_string(in.offset() - 1));
        }
    }
    if (!in.done())
        throw PreprocessError("trailing bytes after canonical trace");
    return trace;
}

std::string formatCodeRef(const CodeRef& ref) {
    if (ref.imageIndex == kNoImage)
        return hex(ref.offset);
    return "image" + std::to_string(ref.imageIndex) + "+" + hex(ref.offset);
}

std::string formatMemRef(const MemRef& ref) {
    switch (ref.kind) {
    case MemKind::ImageData:
        return "image" + std::to_string(ref.id) + "+" + hex(ref.offset);
    case MemKind::Heap:
        return "heap#" + std::to_string(ref.id) + "+" + hex(ref.offset);
    case MemKind::Stack:
        return "stack+" + hex(ref.offset);
    default:
        return hex(ref.offset);
    }
}

std::string formatEntry(const TraceEntry& entry) {
    return std::visit(
        [](const auto& e) -> std::string {
            using T = std::decay_t<decltype(e)>;
            std::ostringstream out;
            if constexpr (std::is_same_v<T, BranchEntry>) {
                out << "branch " << formatCodeRef(e.source);
                if (e.taken)
                    out << " -> " << formatCodeRef(*e.target) << " taken";
                else
                    out << " not-taken";
                out << " " << kindName(e.kind);
            } else {
                out << (e.write ? "write " : "read ") << formatMemRef(e.ref) << " @ "
                    << formatCodeRef(e.instr);
            }
            return out.str();
        },
        entry);
}

TraceComparison traceEquals(const CanonicalTrace& a, const CanonicalTrace& b) {
    if (a.imagesFingerprint != b.imagesFingerprint) {
        return {false, TraceDivergence{0, "images fingerprint " + hex(a.imagesFingerprint),
                                       "images fingerprint " + hex(b.imagesFingerprint)}};
    }
    size_t common = std::min(a.entries.size(), b.entries.size());
    for (size_t i = 0; i < common; ++i) {
        if (!(a.entries[i] == b.entries[i])) {
            return {false, TraceDivergence{i, formatEntry(a.entries[i]),
                                           formatEntry(b.entries[i])}};
        }
    }
    if (a.entries.size() != b.entries.size()) {
        bool leftEnds = a.entries.size() < b.entries.size();
        return {false,
                TraceDivergence{common,
                                leftEnds ? "<end of trace>" : formatEntry(a.entries[common]),
                                leftEnds ? formatEntry(b.entries[common]) : "<end of trace>"}};
    }
    return {true, std::nullopt};
}

}  // namespace ctrv::trace
