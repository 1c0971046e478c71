#pragma once

#include "ctrv/engine.hpp"
#include "ctrv/tracer.hpp"
#include "ctrv/traces.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ctrv::pipeline {

struct TestcaseInput {
    std::string name;             // becomes an argv entry
    std::vector<uint8_t> bytes;   // served on fd 3 while this case runs
};

struct RunConfig {
    std::vector<uint8_t> guestElf;
    std::string guestPath = "guest";
    std::vector<TestcaseInput> testcases;
    uint64_t heapOffsetPages = 0;
    uint64_t fuel = engine::Engine::kDefaultFuel;
    trace::TraceConfig trace;
    trace::SinkFactory sinks;     // empty disables tracing
};

struct RunResult {
    engine::ExitStatus status;
    engine::CodeCacheStats cacheStats;
    std::array<uint64_t, 32> finalRegs{};
    std::vector<uint8_t> stdoutBytes;
    std::vector<uint8_t> stderrBytes;
    std::vector<trace::ImageInfo> images;
    std::vector<loader::Segment> memory;
    std::vector<uint64_t> retiredAtTargetEntry;
    int testcasesEntered = 0;
    std::optional<uint64_t> targetAddress;
};

trace::ImageInfo toImageInfo(const loader::LoadedImage& image);

// Loads the guest, arranges argv/stack/heap, optionally attaches a trace
// session, rebinds the fd-3 input stream at each target entry, and runs to
// completion.
RunResult run(const RunConfig& config);

}  // namespace ctrv::pipeline
