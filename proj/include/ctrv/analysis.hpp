#pragma once

#include "ctrv/traces.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctrv::analysis {

enum class LeakKind : uint8_t {
    ControlFlow = 0,
    MemoryAccess = 1,
};

const char* leakKindName(LeakKind kind);

class AnalysisError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TooFewTraces : public AnalysisError {
public:
    explicit TooFewTraces(size_t count);
};

class ImageMismatch : public AnalysisError {
public:
    ImageMismatch(size_t traceIndex, uint64_t expected, uint64_t actual);
};

// One call context in which an instruction's behavior depended on the test
// case. contextHash identifies the call stack; distinctDigests counts how
// many behaviors were seen across test cases (an instruction never reached
// in some test case contributes one extra).
struct ContextFinding {
    uint64_t contextHash = 0;
    uint64_t distinctDigests = 0;
    std::string witness;
};

struct LeakageFinding {
    trace::CodeRef instr;
    LeakKind kind = LeakKind::ControlFlow;
    uint32_t severityBits = 0;
    std::vector<ContextFinding> contexts;
};

struct AnalysisReport {
    uint64_t totalLeakages = 0;   // leaking (instruction, context) pairs
    uint64_t uniqueLeakages = 0;  // distinct leaking instructions
    uint64_t testcaseCount = 0;
    std::vector<LeakageFinding> findings;
    std::vector<trace::ImageInfo> images;
};

// Compares instruction behavior digests across test-case traces. An
// instruction leaks when its digest differs between any two test cases
// under the same call context.
AnalysisReport analyze(std::span<const trace::CanonicalTrace> testcases,
                       std::span<const trace::ImageInfo> images);

// Optional pretty-printer hook: maps a code location to "symbol+0x10".
using SymbolResolver = std::function<std::optional<std::string>(const trace::CodeRef&)>;

std::string renderText(const AnalysisReport& report, const SymbolResolver& symbols = {});
std::string renderJson(const AnalysisReport& report, const SymbolResolver& symbols = {});

}  // namespace ctrv::analysis
