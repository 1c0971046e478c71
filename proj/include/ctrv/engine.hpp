#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctrv/isa.hpp"
#include "ctrv/loader.hpp"

namespace ctrv::engine {

// Outcome of one executed control-transfer instruction.
struct BranchOutcome {
    uint64_t source = 0;  // instruction address
    uint64_t target = 0;  // resolved target, 0 when not taken
    bool taken = false;
    isa::BranchKind kind = isa::BranchKind::Jump;
};

using BranchObserver = std::function<void(const BranchOutcome&)>;
// Fires before the access happens; addr is the effective address.
using MemAccessObserver = std::function<void(uint64_t instrAddr, uint64_t addr, bool write)>;

struct Terminator {
    enum class Kind : uint8_t {
        ConditionalBranch,  // takenTarget / fallthroughTarget
        DirectJump,         // target known statically
        IndirectJump,       // target from a register at run time
        Syscall,            // ECALL; execution resumes at fallthroughTarget
        Halt,               // EBREAK or a decode fault inside the block
    };
    enum class HaltReason : uint8_t { None, DecodeFault, Breakpoint };

    Kind kind = Kind::Halt;
    uint64_t takenTarget = 0;
    uint64_t fallthroughTarget = 0;
    HaltReason haltReason = HaltReason::None;
    uint64_t haltAddr = 0;
    bool synthetic = false;  // inserted when the block hit the instruction cap
};

enum class AtomicViolation : uint8_t {
    TooLong,             // more than 16 instructions between LR and SC
    NonBaseInstruction,  // M/A/Zicsr inside the sequence
    Load,
    Store,
    BackwardJump,
    Call,
};

// Diagnostic summary of the LR..SC window discovered at scan time.
struct AtomicSequenceInfo {
    size_t lrIndex = 0;              // index of the LR within the block
    bool scFound = false;            // an SC was found within the lookahead window
    uint32_t sequenceLength = 0;     // instructions between LR and SC, exclusive
    std::vector<AtomicViolation> violations;
};

// Inspects the instructions strictly between an LR and its SC against the
// constraints the emulation relies on. Purely diagnostic: execution proceeds
// regardless, these are surfaced so misuse is visible.
std::vector<AtomicViolation> validateAtomicSequence(
    std::span<const isa::DecodedInstruction> between);

struct BasicBlockRecord {
    uint64_t startAddr = 0;
    std::vector<isa::DecodedInstruction> instructions;
    Terminator terminator;
    uint64_t execCount = 0;
    std::optional<AtomicSequenceInfo> atomicInfo;

    // Filled in by linkBlocks: [0] taken/primary target, [1] fallthrough.
    std::array<BasicBlockRecord*, 2> links{nullptr, nullptr};

    // Per-instruction observers, allocated lazily by instrumentation.
    struct Slot {
        std::vector<BranchObserver> branch;
        std::vector<MemAccessObserver> mem;
    };
    std::vector<std::unique_ptr<Slot>> slots;

    Slot& slotFor(size_t index);
    uint64_t endAddr() const;
};

struct CodeCacheStats {
    uint64_t blocksDecoded = 0;
    uint64_t lookupHits = 0;
    uint64_t lookupMisses = 0;
    uint64_t branchesLinked = 0;
    uint64_t dispatcherEntries = 0;
};

class CodeCache {
public:
    BasicBlockRecord* lookup(uint64_t addr);
    BasicBlockRecord& insert(std::unique_ptr<BasicBlockRecord> block);
    CodeCacheStats& stats() { return stats_; }
    const CodeCacheStats& stats() const { return stats_; }
    size_t size() const { return blocks_.size(); }

private:
    std::map<uint64_t, std::unique_ptr<BasicBlockRecord>> blocks_;
    CodeCacheStats stats_;
};

struct AtomicReservation {
    bool active = false;
    uint64_t addr = 0;
    uint8_t width = 0;
    uint64_t backupValue = 0;  // memory value captured at the LR
};

struct GuestFault {
    enum class Kind : uint8_t {
        MemoryUnmapped,
        MemoryProtection,
        MisalignedAtomic,
        NotExecutable,
        DecodeFault,
        Breakpoint,
        UnsupportedSyscall,
    };
    Kind kind;
    uint64_t addr = 0;
    uint64_t detail = 0;  // syscall number for UnsupportedSyscall
    std::string message;
};

struct ExitStatus {
    enum class Kind : uint8_t { Exited, Fault, FuelExhausted };
    Kind kind = Kind::Exited;
    int exitCode = 0;
    std::optional<GuestFault> fault;
    uint64_t instructionsRetired = 0;
};

struct SyscallInfo {
    uint64_t number = 0;
    std::array<uint64_t, 6> args{};
};

class EventHooks {
public:
    using BlockScanFn = std::function<void(BasicBlockRecord&)>;
    using FunctionEntryFn = std::function<void(uint64_t symbolAddr, std::span<const uint64_t> args)>;
    using FunctionExitFn = std::function<void(uint64_t symbolAddr, uint64_t returnValue)>;
    using SyscallFn = std::function<void(const SyscallInfo&)>;
    using VmMapFn = std::function<void(const loader::LoadedImage&)>;

    void addBlockScan(BlockScanFn fn) { blockScan_.push_back(std::move(fn)); }
    void addFunctionEntry(FunctionEntryFn fn) { functionEntry_.push_back(std::move(fn)); }
    void addFunctionExit(FunctionExitFn fn) { functionExit_.push_back(std::move(fn)); }
    void addSyscallPre(SyscallFn fn) { syscallPre_.push_back(std::move(fn)); }
    void addVmMap(VmMapFn fn) { vmMap_.push_back(std::move(fn)); }

    void fireBlockScan(BasicBlockRecord& b) const {
        for (const auto& fn : blockScan_) fn(b);
    }
    void fireFunctionEntry(uint64_t addr, std::span<const uint64_t> args) const {
        for (const auto& fn : functionEntry_) fn(addr, args);
    }
    void fireFunctionExit(uint64_t addr, uint64_t ret) const {
        for (const auto& fn : functionExit_) fn(addr, ret);
    }
    void fireSyscallPre(const SyscallInfo& info) const {
        for (const auto& fn : syscallPre_) fn(info);
    }
    void fireVmMap(const loader::LoadedImage& image) const {
        for (const auto& fn : vmMap_) fn(image);
    }

private:
    std::vector<BlockScanFn> blockScan_;
    std::vector<FunctionEntryFn> functionEntry_;
    std::vector<FunctionExitFn> functionExit_;
    std::vector<SyscallFn> syscallPre_;
    std::vector<VmMapFn> vmMap_;
};

class NotExecutableError : public std::runtime_error {
public:
    explicit NotExecutableError(uint64_t addr);
    uint64_t addr() const { return addr_; }

private:
    uint64_t addr_;
};

// Interpreting dispatcher with a basic-block code cache. Each block is
// decoded once, instrumented at scan time, and direct control transfers are
// linked so steady-state execution bypasses the dispatcher.
class Engine {
public:
    static constexpr uint64_t kDefaultFuel = 1'000'000'000;
    static constexpr size_t kMaxBlockInstructions = 256;
    static constexpr size_t kMaxAtomicLookahead = 16;

    explicit Engine(loader::GuestMemory& mem) : mem_(mem) {}

    isa::RegisterFile& registers() { return regs_; }
    loader::GuestMemory& memory() { return mem_; }
    EventHooks& hooks() { return hooks_; }
    CodeCache& cache() { return cache_; }
    const CodeCacheStats& stats() const { return cache_.stats(); }
    uint64_t instructionsRetired() const { return retired_; }

    // Announces a mapped image to VM_MAP subscribers.
    void registerImage(const loader::LoadedImage& image);

    // Marks addr as a hooked function: calls landing there fire
    // onFunctionEntry, and the matching return fires onFunctionExit.
    void hookFunction(uint64_t addr);

    // Byte stream served to the guest on file descriptor 3; read position
    // resets on each call.
    void setInputStream(std::vector<uint8_t> bytes);

    const std::vector<uint8_t>& stdoutBytes() const { return stdoutBytes_; }
    const std::vector<uint8_t>& stderrBytes() const { return stderrBytes_; }

    // Decodes (or fetches from cache) the block starting at addr and fires
    // onBlockScan for fresh blocks. Throws NotExecutableError.
    BasicBlockRecord& scanBlock(uint64_t addr);

    // Fills any link slots of `block` whose targets are already cached.
    void linkBlocks(BasicBlockRecord& block);

    ExitStatus run(uint64_t entry, uint64_t fuel = kDefaultFuel);

    // LR/SC rewrite: LR performs a plain load and backs up the loaded value;
    // SC stores only when memory still equals the backup. A store-then-restore
    // of the same value between the pair is indistinguishable from no store,
    // so such an SC succeeds.
    void emulateAtomic(const isa::DecodedInstruction& instr);

    const AtomicReservation& reservation() const { return reservation_; }

private:
    std::unique_ptr<BasicBlockRecord> decodeBlock(uint64_t addr);
    void analyzeAtomic(BasicBlockRecord& block, size_t lrIndex);
    void execute(const isa::DecodedInstruction& instr);
    void executeInstr(BasicBlockRecord& block, size_t index);
    uint64_t executeTerminator(BasicBlockRecord& block, int& linkSlot);
    void serviceSyscall();
    uint64_t csrRead(uint32_t csr) const;
    void observeMem(BasicBlockRecord& block, size_t index, uint64_t instrAddr, uint64_t addr,
                    bool write);
    void fireBranchObservers(BasicBlockRecord& block, size_t index, const BranchOutcome& outcome);
    void noteCall(const BranchOutcome& outcome, uint64_t returnAddr);
    void noteReturn(const BranchOutcome& outcome);
    static bool consumesLast(const Terminator& term);

    loader::GuestMemory& mem_;
    isa::RegisterFile regs_;
    CodeCache cache_;
    EventHooks hooks_;
    AtomicReservation reservation_;
    uint64_t retired_ = 0;
    uint64_t fuelLimit_ = UINT64_MAX;

    std::vector<uint64_t> hookedFunctions_;
    struct PendingReturn {
        uint64_t returnAddr;
        uint64_t symbolAddr;
    };
    std::vector<PendingReturn> returnStack_;

    std::vector<uint8_t> inputStream_;
    size_t inputPos_ = 0;
    std::vector<uint8_t> stdoutBytes_;
    std::vector<uint8_t> stderrBytes_;
};

}  // namespace ctrv::engine
