#include "ctrv/tracer.hpp"

#include <algorithm>

namespace ctrv::trace {

MissingTargetSymbol::MissingTargetSymbol(const std::string& symbol)
    : TraceError("target symbol '" + symbol + "' not found in any registered image") {}

TargetNestingError::TargetNestingError()
    : TraceError("target function re-entered while a test case is active") {}

TraceSession::TraceSession(engine::Engine& engine, TraceConfig config)
    : engine_(engine), config_(std::move(config)) {}

TraceSession::~TraceSession() {
    finish();
}

void TraceSession::attach(SinkFactory sinks) {
    if (attached_)
        throw TraceError("trace session already attached");
    attached_ = true;
    sinks_ = std::move(sinks);
    rollover(-1);

    const auto& stack = engine_.memory().stack();
    if (stack.size != 0)
        writeRecord(StackAllocRecord{stack.base, stack.top()});

    engine_.hooks().addVmMap([this](const loader::LoadedImage& image) { onVmMap(image); });
    engine_.hooks().addBlockScan([this](engine::BasicBlockRecord& block) { onBlockScan(block); });
    engine_.hooks().addFunctionEntry(
        [this](uint64_t symbolAddr, std::span<const uint64_t> args) {
            onFunctionEntry(symbolAddr, args);
        });
    engine_.hooks().addFunctionExit([this](uint64_t symbolAddr, uint64_t returnValue) {
        onFunctionExit(symbolAddr, returnValue);
    });
}

void TraceSession::finish() {
    if (current_) {
        auto bytes = current_->writer.take();
        current_->stream->write(reinterpret_cast<const char*>(bytes.data()),
                                static_cast<std::streamsize>(bytes.size()));
        current_->stream->flush();
        current_.reset();
    }
}

void TraceSession::requireTarget() const {
    if (!targetAddr_)
        throw MissingTargetSymbol(config_.targetSymbol);
}

void TraceSession::onVmMap(const loader::LoadedImage& image) {
    images_.push_back(image);
    writeRecord(ImageMapRecord{image.index, image.startAddr, image.endAddr, image.path});

    auto hookIf = [&](const std::string& name, std::optional<AllocKind> kind) {
        auto addr = image.symbol(name);
        if (!addr)
            return;
        engine_.hookFunction(*addr);
        if (kind)
            allocatorAt_[*addr] = *kind;
        else
            targetAddr_ = *addr;
    };
    hookIf(config_.targetSymbol, std::nullopt);
    hookIf(config_.mallocSymbol, AllocKind::Malloc);
    hookIf(config_.callocSymbol, AllocKind::Calloc);
    hookIf(config_.reallocSymbol, AllocKind::Realloc);
    hookIf(config_.freeSymbol, AllocKind::Free);
}

bool TraceSession::blockTraced(uint64_t addr) const {
    for (const auto& image : images_) {
        if (image.contains(addr))
            return config_.tracedImages.count(image.index) != 0;
    }
    return false;
}

void TraceSession::onBlockScan(engine::BasicBlockRecord& block) {
    if (!blockTraced(block.startAddr))
        return;

    for (size_t i = 0; i < block.instructions.size(); ++i) {
        if (!block.instructions[i].accessesMemory())
            continue;
        block.slotFor(i).mem.push_back(
            [this](uint64_t instrAddr, uint64_t addr, bool write) {
                if (allocDepth_ > 0)
                    return;
                if (writeRecord(MemAccessRecord{write, instrAddr, addr}))
                    ++memEvents_;
            });
    }

    if (!block.instructions.empty()) {
        size_t last = block.instructions.size() - 1;
        if (block.instructions[last].isControlFlow()) {
            block.slotFor(last).branch.push_back([this](const engine::BranchOutcome& outcome) {
                if (allocDepth_ > 0)
                    return;
                if (writeRecord(BranchRecord{outcome.taken, outcome.kind, outcome.source,
                                             outcome.target}))
                    ++branchEvents_;
            });
        }
    }
}

void TraceSession::onFunctionEntry(uint64_t symbolAddr, std::span<const uint64_t> args) {
    if (targetAddr_ && symbolAddr == *targetAddr_) {
        if (inTarget_)
            throw TargetNestingError();
        inTarget_ = true;
        rollover(++testcaseIndex_);
        return;
    }
    auto it = allocatorAt_.find(symbolAddr);
    if (it == allocatorAt_.end())
        return;
    PendingCall call;
    call.symbolAddr = symbolAddr;
    call.kind = it->second;
    call.arg0 = args.size() > 0 ? args[0] : 0;
    call.arg1 = args.size() > 1 ? args[1] : 0;
    call.suppressed = allocDepth_ > 0;
    pending_.push_back(call);
    ++allocDepth_;
}

void TraceSession::onFunctionExit(uint64_t symbolAddr, uint64_t returnValue) {
    if (targetAddr_ && symbolAddr == *targetAddr_) {
        inTarget_ = false;
        finish();
        return;
    }
    auto it = std::find_if(pending_.rbegin(), pending_.rend(),
                           [&](const PendingCall& c) { return c.symbolAddr == symbolAddr; });
    if (it == pending_.rend())
        return;
    PendingCall call = *it;
    pending_.erase(std::next(it).base());
    --allocDepth_;
    if (!call.suppressed)
        emitAllocRecord(call, returnValue);
}

void TraceSession::emitAllocRecord(const PendingCall& call, uint64_t returnValue) {
    auto count = [&](bool written) {
        if (written)
            ++allocEvents_;
    };
    auto alloc = [&](uint64_t size) {
        if (size == 0 || returnValue == 0)
            return;
        count(writeRecord(AllocRecord{returnValue, returnValue + size}));
    };
    switch (call.kind) {
    case AllocKind::Malloc:
        alloc(call.arg0);
        break;
    case AllocKind::Calloc:
        alloc(call.arg0 * call.arg1);
        break;
    case AllocKind::Realloc:
        if (call.arg0 == 0) {
            alloc(call.arg1);
        } else if (call.arg1 == 0) {
            count(writeRecord(FreeRecord{call.arg0}));
        } else {
            count(writeRecord(
                ReallocRecord{call.arg0, returnValue, returnValue + call.arg1}));
        }
        break;
    case AllocKind::Free:
        if (call.arg0 != 0)
            count(writeRecord(FreeRecord{call.arg0}));
        break;
    }
}

void TraceSession::rollover(int index) {
    finish();
    auto stream = sinks_ ? sinks_(index) : nullptr;
    if (stream)
        current_.emplace(ActiveSink{std::move(stream), RawTraceWriter{}});
}

bool TraceSession::writeRecord(const RawRecord& record) {
    if (!current_)
        return false;
    current_->writer.write(record);
    ++recordsWritten_;
    return true;
}

}  // namespace ctrv::trace
