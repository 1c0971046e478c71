#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctrv::loader {

constexpr uint64_t kPageSize = 0x1000;

constexpr uint64_t pageFloor(uint64_t addr) { return addr & ~(kPageSize - 1); }
constexpr uint64_t pageCeil(uint64_t addr) { return (addr + kPageSize - 1) & ~(kPageSize - 1); }

class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NotElf : public LoadError {
public:
    using LoadError::LoadError;
};

class WrongArchitecture : public LoadError {
public:
    using LoadError::LoadError;
};

class UnsupportedDynamic : public LoadError {
public:
    using LoadError::LoadError;
};

class OverlappingSegments : public LoadError {
public:
    using LoadError::LoadError;
};

struct MemoryFault {
    enum class Kind { Unmapped, Protection };
    Kind kind;
    uint64_t addr;
    uint8_t neededPerm;
};

enum Perm : uint8_t { PermRead = 1, PermWrite = 2, PermExec = 4 };

struct Segment {
    uint64_t base = 0;
    uint64_t size = 0;
    uint8_t perms = 0;
    std::vector<uint8_t> bytes;

    uint64_t end() const { return base + size; }
    bool contains(uint64_t addr) const { return addr >= base && addr < end(); }
};

struct StackRegion {
    uint64_t base = 0;
    uint64_t size = 0;
    uint64_t top() const { return base + size; }
};

// Flat guest address space built from page-aligned segments. All accesses are
// bounds- and permission-checked; violations throw MemoryFault.
class GuestMemory {
public:
    void map(uint64_t base, uint64_t size, uint8_t perms);
    bool unmap(uint64_t base);

    uint64_t loadUnsigned(uint64_t addr, unsigned width);
    void store(uint64_t addr, unsigned width, uint64_t value);
    void readBytes(uint64_t addr, std::span<uint8_t> out);
    void writeBytes(uint64_t addr, std::span<const uint8_t> in);

    // Instruction fetch: checks execute permission, returns the bytes
    // available at addr (up to 4).
    std::span<const uint8_t> fetch(uint64_t addr);

    Segment* find(uint64_t addr);
    const std::vector<Segment>& segments() const { return segments_; }

    uint64_t brk() const { return brkTop_; }
    uint64_t brkBase() const { return brkBase_; }
    // Returns the new program break (the old one if the request is rejected).
    uint64_t setBrk(uint64_t newBrk);
    void initHeap(uint64_t base);

    const StackRegion& stack() const { return stack_; }
    void setStack(StackRegion s) { stack_ = s; }

    uint64_t mmapCursor() const { return mmapCursor_; }
    void setMmapCursor(uint64_t addr) { mmapCursor_ = addr; }

private:
    Segment& require(uint64_t addr, unsigned width, uint8_t perm);

    std::vector<Segment> segments_;  // sorted by base, non-overlapping
    StackRegion stack_;
    uint64_t brkBase_ = 0;
    uint64_t brkTop_ = 0;
    uint64_t mmapCursor_ = 0;
};

struct LoadedImage {
    uint32_t index = 0;
    std::string path;
    uint64_t startAddr = 0;
    uint64_t endAddr = 0;  // exclusive, page-aligned
    uint64_t entryPoint = 0;
    std::map<std::string, uint64_t> symbols;

    bool contains(uint64_t addr) const { return addr >= startAddr && addr < endAddr; }
    uint64_t offsetOf(uint64_t addr) const { return addr - startAddr; }
    std::optional<uint64_t> symbol(const std::string& name) const;
};

// Maps all PT_LOAD segments of a static RV64 executable and collects its
// symbol table. Rejects anything that is not a little-endian RISC-V 64 EXEC
// image without PT_INTERP/PT_DYNAMIC.
LoadedImage loadElf(GuestMemory& mem, std::span<const uint8_t> elf, const std::string& path,
                    uint32_t index);

// Symbol table of an ELF without mapping it (report annotation helper).
std::map<std::string, uint64_t> readElfSymbols(std::span<const uint8_t> elf);

struct ProcessLayout {
    // Pages added between the image end and the initial program break. Shifts
    // every heap address while leaving image and stack addresses untouched.
    uint64_t heapOffsetPages = 0;
    uint64_t stackTop = 0x40'0000'0000;
    uint64_t stackSize = 8 * 1024 * 1024;
    uint64_t mmapBase = 0x20'0000'0000;
};

// Builds the stack with the standard argc/argv/envp/auxv layout (envp and
// auxv empty) and positions the heap. Returns the initial stack pointer.
uint64_t setupProcess(GuestMemory& mem, const std::vector<std::string>& argv,
                      uint64_t imageEnd, const ProcessLayout& layout = {});

}  // namespace ctrv::loader
