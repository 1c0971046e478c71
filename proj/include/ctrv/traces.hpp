#pragma once

#include "ctrv/isa.hpp"
#include "ctrv/loader.hpp"
#include "ctrv/raw_trace.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace ctrv::trace {

// Image identity for canonicalization, decoupled from the loader so traces
// recorded elsewhere can be preprocessed with just this table.
struct ImageInfo {
    uint32_t index = 0;
    std::string path;
    uint64_t start = 0;
    uint64_t end = 0;
};

inline constexpr uint32_t kNoImage = 0xFFFFFFFF;

inline constexpr char kCanonicalMagic[8] = {'C', 'T', 'R', 'V', '\0', 'C', 'A', 'N'};
inline constexpr uint32_t kCanonicalVersion = 1;

// Code location as image index plus offset. Addresses outside every known
// image keep their absolute value under kNoImage.
struct CodeRef {
    uint32_t imageIndex = kNoImage;
    uint64_t offset = 0;

    friend bool operator==(const CodeRef&, const CodeRef&) = default;
    friend auto operator<=>(const CodeRef&, const CodeRef&) = default;
};

enum class MemKind : uint8_t {
    ImageData = 0,  // id = image index
    Heap = 1,       // id = allocation block id
    Stack = 2,
    Absolute = 3,
};

struct MemRef {
    MemKind kind = MemKind::Absolute;
    uint64_t id = 0;
    uint64_t offset = 0;

    friend bool operator==(const MemRef&, const MemRef&) = default;
};

struct BranchEntry {
    CodeRef source;
    std::optional<CodeRef> target;
    bool taken = false;
    isa::BranchKind kind = isa::BranchKind::Jump;

    friend bool operator==(const BranchEntry&, const BranchEntry&) = default;
};

struct MemAccessEntry {
    CodeRef instr;
    MemRef ref;
    bool write = false;

    friend bool operator==(const MemAccessEntry&, const MemAccessEntry&) = default;
};

using TraceEntry = std::variant<BranchEntry, MemAccessEntry>;

struct CanonicalTrace {
    std::vector<TraceEntry> entries;
    uint64_t imagesFingerprint = 0;
};

class PreprocessError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Allocation bookkeeping carried across trace segments. Block ids are
// ordinals in event order and are never reused, so two runs with shifted
// heap addresses produce identical ids.
struct HeapBlock {
    uint64_t end = 0;
    uint64_t id = 0;
};

struct PreprocessState {
    std::map<uint64_t, HeapBlock> blocks;  // keyed by start address
    uint64_t nextBlockId = 1;
    std::optional<loader::StackRegion> stack;
};

struct PreprocessResult {
    CanonicalTrace trace;
    PreprocessState state;
};

// Rewrites a raw trace segment into canonical, relocation-independent form.
// Pass the prefix segment's final state as seed when preprocessing a
// testcase segment. Memory addresses resolve heap first, then image, then
// stack, then absolute.
PreprocessResult preprocess(std::span<const uint8_t> raw, std::span<const ImageInfo> images,
                            const PreprocessState* seed = nullptr);

// Stable hash of the image table (index, path, size). Start addresses do
// not participate, so relocated runs of the same binaries agree.
uint64_t imagesFingerprint(std::span<const ImageInfo> images);

std::vector<uint8_t> serializeCanonical(const CanonicalTrace& trace);
CanonicalTrace parseCanonical(std::span<const uint8_t> bytes);

std::string formatCodeRef(const CodeRef& ref);
std::string formatMemRef(const MemRef& ref);
std::string formatEntry(const TraceEntry& entry);

struct TraceDivergence {
    size_t index = 0;
    std::string left;
    std::string right;
};

struct TraceComparison {
    bool equal = false;
    std::optional<TraceDivergence> divergence;
};

TraceComparison traceEquals(const CanonicalTrace& a, const CanonicalTrace& b);

}  // namespace ctrv::trace
