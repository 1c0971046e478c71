#pragma once

#include "ctrv/engine.hpp"
#include "ctrv/raw_trace.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctrv::trace {

struct TraceConfig {
    std::string targetSymbol = "microwalk_target";
    std::set<uint32_t> tracedImages = {0};
    std::string mallocSymbol = "malloc";
    std::string callocSymbol = "calloc";
    std::string reallocSymbol = "realloc";
    std::string freeSymbol = "free";
};

// Supplies the output stream for a trace segment: index -1 is the prefix
// (everything before the first target call), 0.. are the per-testcase
// segments. Records produced between a target return and the next call are
// dropped.
using SinkFactory = std::function<std::shared_ptr<std::ostream>(int)>;

class TraceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MissingTargetSymbol : public TraceError {
public:
    explicit MissingTargetSymbol(const std::string& symbol);
};

class TargetNestingError : public TraceError {
public:
    TargetNestingError();
};

// Subscribes to an engine's instrumentation hooks and streams raw trace
// records. Attach before registering guest images so the image-map events
// are observed; the target and allocator symbols are resolved as images
// arrive. While execution is inside an allocator wrapper, branch and memory
// records are withheld and the completed call is reported as a single
// allocation event, keeping allocator internals out of the analyzed trace.
class TraceSession {
public:
    TraceSession(engine::Engine& engine, TraceConfig config = {});
    ~TraceSession();

    TraceSession(const TraceSession&) = delete;
    TraceSession& operator=(const TraceSession&) = delete;

    void attach(SinkFactory sinks);

    // Flushes the open segment, if any. Safe to call repeatedly.
    void finish();

    // Throws MissingTargetSymbol unless some registered image defined the
    // target. Call after all images are registered.
    void requireTarget() const;

    std::optional<uint64_t> targetAddress() const { return targetAddr_; }
    int testcaseIndex() const { return testcaseIndex_; }
    const std::vector<loader::LoadedImage>& images() const { return images_; }

    uint64_t branchEvents() const { return branchEvents_; }
    uint64_t memEvents() const { return memEvents_; }
    uint64_t allocEvents() const { return allocEvents_; }
    uint64_t recordsWritten() const { return recordsWritten_; }

private:
    enum class AllocKind { Malloc, Calloc, Realloc, Free };

    struct PendingCall {
        uint64_t symbolAddr;
        AllocKind kind;
        uint64_t arg0;
        uint64_t arg1;
        bool suppressed;
    };

    struct ActiveSink {
        std::shared_ptr<std::ostream> stream;
        RawTraceWriter writer;
    };

    void onVmMap(const loader::LoadedImage& image);
    void onBlockScan(engine::BasicBlockRecord& block);
    void onFunctionEntry(uint64_t symbolAddr, std::span<const uint64_t> args);
    void onFunctionExit(uint64_t symbolAddr, uint64_t returnValue);
    void emitAllocRecord(const PendingCall& call, uint64_t returnValue);
    void rollover(int index);
    bool writeRecord(const RawRecord& record);
    bool blockTraced(uint64_t addr) const;

    engine::Engine& engine_;
    TraceConfig config_;
    SinkFactory sinks_;
    bool attached_ = false;
    std::optional<ActiveSink> current_;
    std::vector<loader::LoadedImage> images_;
    std::optional<uint64_t> targetAddr_;
    std::map<uint64_t, AllocKind> allocatorAt_;
    std::vector<PendingCall> pending_;
    int allocDepth_ = 0;
    bool inTarget_ = false;
    int testcaseIndex_ = -1;
    uint64_t branchEvents_ = 0;
    uint64_t memEvents_ = 0;
    uint64_t allocEvents_ = 0;
    uint64_t recordsWritten_ = 0;
};

}  // namespace ctrv::trace
