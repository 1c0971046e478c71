#include "ctrv/loader.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace ctrv::loader {

namespace {

std::string hex(uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
}

}  // namespace

void GuestMemory::map(uint64_t base, uint64_t size, uint8_t perms) {
    Segment seg;
    seg.base = base;
    seg.size = size;
    seg.perms = perms;
    seg.bytes.assign(size, 0);
    auto pos = std::upper_bound(segments_.begin(), segments_.end(), base,
                                [](uint64_t b, const Segment& s) { return b < s.base; });
    segments_.insert(pos, std::move(seg));
}

bool GuestMemory::unmap(uint64_t base) {
    auto it = std::find_if(segments_.begin(), segments_.end(),
                           [&](const Segment& s) { return s.base == base; });
    if (it == segments_.end()) return false;
    segments_.erase(it);
    return true;
}

Segment* GuestMemory::find(uint64_t addr) {
    auto it = std::upper_bound(segments_.begin(), segments_.end(), addr,
                               [](uint64_t a, const Segment& s) { return a < s.base; });
    if (it == segments_.begin()) return nullptr;
    --it;
    return it->contains(addr) ? &*it : nullptr;
}

Segment& GuestMemory::require(uint64_t addr, unsigned width, uint8_t perm) {
    Segment* seg = find(addr);
    if (!seg || addr + width > seg->end())
        throw MemoryFault{MemoryFault::Kind::Unmapped, addr, perm};
    if ((seg->perms & perm) != perm)
        throw MemoryFault{MemoryFault::Kind::Protection, addr, perm};
    return *seg;
}

uint64_t GuestMemory::loadUnsigned(uint64_t addr, unsigned width) {
    Segment& seg = require(addr, width, PermRead);
    uint64_t v = 0;
    size_t off = addr - seg.base;
    for (unsigned i = 0; i < width; ++i) v |= static_cast<uint64_t>(seg.bytes[off + i]) << (8 * i);
    return v;
}

void GuestMemory::store(uint64_t addr, unsigned width, uint64_t value) {
    Segment& seg = require(addr, width, PermWrite);
    size_t off = addr - seg.base;
    for (unsigned i = 0; i < width; ++i) seg.bytes[off + i] = static_cast<uint8_t>(value >> (8 * i));
}

void GuestMemory::readBytes(uint64_t addr, std::span<uint8_t> out) {
    Segment& seg = require(addr, 1, PermRead);
    if (addr + out.size() > seg.end())
        throw MemoryFault{MemoryFault::Kind::Unmapped, seg.end(), PermRead};
    std::memcpy(out.data(), seg.bytes.data() + (addr - seg.base), out.size());
}

void GuestMemory::writeBytes(uint64_t addr, std::span<const uint8_t> in) {
    Segment& seg = require(addr, 1, PermWrite);
    if (addr + in.size() > seg.end())
        throw MemoryFault{MemoryFault::Kind::Unmapped, seg.end(), PermWrite};
    std::memcpy(seg.bytes.data() + (addr - seg.base), in.data(), in.size());
}

std::span<const uint8_t> GuestMemory::fetch(uint64_t addr) {
    Segment& seg = require(addr, 2, PermExec);
    size_t off = addr - seg.base;
    size_t avail = std::min<size_t>(4, seg.size - off);
    return {seg.bytes.data() + off, avail};
}

uint64_t GuestMemory::setBrk(uint64_t newBrk) {
    if (newBrk < brkBase_) return brkTop_;
    uint64_t oldEnd = pageCeil(brkTop_);
    uint64_t newEnd = pageCeil(newBrk);
    if (newEnd > oldEnd) {
        map(oldEnd, newEnd - oldEnd, PermRead | PermWrite);
    }
    // Shrinking keeps pages mapped; the break still moves down.
    brkTop_ = newBrk;
    return brkTop_;
}

void GuestMemory::initHeap(uint64_t base) {
    brkBase_ = base;
    brkTop_ = base;
}

std::optional<uint64_t> LoadedImage::symbol(const std::string& name) const {
    auto it = symbols.find(name);
    if (it == symbols.end()) return std::nullopt;
    return it->second;
}

namespace {

// Offsets within the ELF64 header and its tables.
constexpr size_t kEhdrSize = 64;
constexpr size_t kPhentSize = 56;
constexpr size_t kShentSize = 64;
constexpr size_t kSymSize = 24;

constexpr uint16_t kMachineRiscv = 243;
constexpr uint16_t kTypeExec = 2;
constexpr uint16_t kTypeDyn = 3;
constexpr uint32_t kPtLoad = 1;
constexpr uint32_t kPtDynamic = 2;
constexpr uint32_t kPtInterp = 3;
constexpr uint32_t kShtSymtab = 2;

class ElfReader {
public:
    explicit ElfReader(std::span<const uint8_t> data) : data_(data) {}

    uint64_t u64(size_t off) const { return read(off, 8); }
    uint32_t u32(size_t off) const { return static_cast<uint32_t>(read(off, 4)); }
    uint16_t u16(size_t off) const { return static_cast<uint16_t>(read(off, 2)); }
    uint8_t u8(size_t off) const { return static_cast<uint8_t>(read(off, 1)); }
    size_t size() const { return data_.size(); }

    std::span<const uint8_t> slice(size_t off, size_t len) const {
        if (off + len > data_.size() || off + len < off)
            throw NotElf("ELF structure extends past end of file");
        return data_.subspan(off, len);
    }

private:
    uint64_t read(size_t off, unsigned width) const {
        if (off + width > data_.size())
            throw NotElf("ELF structure extends past end of file");
        uint64_t v = 0;
        for (unsigned i = 0; i < width; ++i) v |= static_cast<uint64_t>(data_[off + i]) << (8 * i);
        return v;
    }

    std::span<const uint8_t> data_;
};

void collectSymbols(const ElfReader& r, std::map<std::string, uint64_t>& out) {
    size_t shoff = r.u64(0x28);
    uint16_t shnum = r.u16(0x3C);
    if (shoff == 0 || shnum == 0) return;

    for (uint16_t i = 0; i < shnum; ++i) {
        size_t sh = shoff + static_cast<size_t>(i) * kShentSize;
        if (r.u32(sh + 0x04) != kShtSymtab) continue;
        uint64_t symOff = r.u64(sh + 0x18);
        uint64_t symSize = r.u64(sh + 0x20);
        uint32_t strIdx = r.u32(sh + 0x28);
        if (strIdx >= shnum) continue;
        size_t strSh = shoff + static_cast<size_t>(strIdx) * kShentSize;
        uint64_t strOff = r.u64(strSh + 0x18);
        uint64_t strSize = r.u64(strSh + 0x20);
        auto strTab = r.slice(strOff, strSize);

        size_t count = symSize / kSymSize;
        // Locals first per convention; the second pass lets globals win ties.
        for (int pass = 0; pass < 2; ++pass) {
            for (size_t s = 0; s < count; ++s) {
                size_t sym = symOff + s * kSymSize;
                uint32_t nameOff = r.u32(sym);
                uint16_t shndx = r.u16(sym + 0x06);
                uint8_t bind = r.u8(sym + 0x04) >> 4;
                if (nameOff == 0 || nameOff >= strSize || shndx == 0) continue;
                if ((pass == 1) != (bind != 0)) continue;
                const char* name = reinterpret_cast<const char*>(strTab.data()) + nameOff;
                size_t maxLen = strSize - nameOff;
                size_t len = strnlen(name, maxLen);
                if (len == 0 || len == maxLen) continue;
                out[std::string(name, len)] = r.u64(sym + 0x08);
            }
        }
    }
}

}  // namespace

LoadedImage loadElf(GuestMemory& mem, std::span<const uint8_t> elf, const std::string& path,
                    uint32_t index) {
    ElfReader r(elf);
    if (r.size() < kEhdrSize || r.u8(0) != 0x7F || r.u8(1) != 'E' || r.u8(2) != 'L' ||
        r.u8(3) != 'F')
        throw NotElf(path + ": not an ELF file");
    if (r.u8(4) != 2 || r.u8(5) != 1)
        throw WrongArchitecture(path + ": not a 64-bit little-endian ELF");
    if (r.u16(0x12) != kMachineRiscv)
        throw WrongArchitecture(path + ": not a RISC-V binary");
    uint16_t type = r.u16(0x10);
    if (type == kTypeDyn)
        throw UnsupportedDynamic(path + ": position-independent executables are not supported");
    if (type != kTypeExec)
        throw WrongArchitecture(path + ": not an executable image");

    uint64_t phoff = r.u64(0x20);
    uint16_t phnum = r.u16(0x38);

    struct Load {
        uint64_t vaddr, filesz, memsz, offset;
        uint8_t perms;
    };
    std::vector<Load> loads;
    for (uint16_t i = 0; i < phnum; ++i) {
        size_t ph = phoff + static_cast<size_t>(i) * kPhentSize;
        uint32_t ptype = r.u32(ph);
        if (ptype == kPtInterp || ptype == kPtDynamic)
            throw UnsupportedDynamic(path + ": dynamically linked executables are not supported");
        if (ptype != kPtLoad) continue;
        uint32_t flags = r.u32(ph + 0x04);
        uint8_t perms = 0;
        if (flags & 4) perms |= PermRead;
        if (flags & 2) perms |= PermWrite;
        if (flags & 1) perms |= PermExec;
        loads.push_back({r.u64(ph + 0x10), r.u64(ph + 0x20), r.u64(ph + 0x28), r.u64(ph + 0x08),
                         perms});
    }
    if (loads.empty()) throw NotElf(path + ": no loadable segments");

    // Page-granular overlap check, against both this image and anything
    // already mapped.
    std::vector<std::pair<uint64_t, uint64_t>> ranges;
    for (const Load& l : loads) {
        uint64_t lo = pageFloor(l.vaddr);
        uint64_t hi = pageCeil(l.vaddr + l.memsz);
        for (auto [b, e] : ranges)
            if (lo < e && b < hi)
                throw OverlappingSegments(path + ": segments share page " + hex(std::max(lo, b)));
        for (const Segment& s : mem.segments())
            if (lo < s.end() && s.base < hi)
                throw OverlappingSegments(path + ": segment at " + hex(lo) +
                                          " collides with mapped memory");
        ranges.emplace_back(lo, hi);
    }

    LoadedImage image;
    image.index = index;
    image.path = path;
    image.entryPoint = r.u64(0x18);
    image.startAddr = UINT64_MAX;

    for (const Load& l : loads) {
        uint64_t lo = pageFloor(l.vaddr);
        uint64_t hi = pageCeil(l.vaddr + l.memsz);
        mem.map(lo, hi - lo, l.perms);
        if (l.filesz) {
            auto src = r.slice(l.offset, l.filesz);
            Segment* seg = mem.find(l.vaddr);
            std::memcpy(seg->bytes.data() + (l.vaddr - seg->base), src.data(), l.filesz);
        }
        image.startAddr = std::min(image.startAddr, lo);
        image.endAddr = std::max(image.endAddr, hi);
    }

    collectSymbols(r, image.symbols);
    return image;
}

std::map<std::string, uint64_t> readElfSymbols(std::span<const uint8_t> elf) {
    ElfReader r(elf);
    std::map<std::string, uint64_t> out;
    if (r.size() < kEhdrSize || r.u8(0) != 0x7F) return out;
    collectSymbols(r, out);
    return out;
}

uint64_t setupProcess(GuestMemory& mem, const std::vector<std::string>& argv,
                      uint64_t imageEnd, const ProcessLayout& layout) {
    mem.initHeap(pageCeil(imageEnd) + layout.heapOffsetPages * kPageSize);
    mem.setMmapCursor(layout.mmapBase);

    StackRegion stack{layout.stackTop - layout.stackSize, layout.stackSize};
    mem.map(stack.base, stack.size, PermRead | PermWrite);
    mem.setStack(stack);

    // String area grows down from the top, then the pointer vector:
    // sp -> argc, argv[0..n-1], NULL, envp NULL, AT_NULL pair.
    uint64_t cursor = layout.stackTop;
    std::vector<uint64_t> argPtrs;
    for (const std::string& arg : argv) {
        cursor -= arg.size() + 1;
        mem.writeBytes(cursor, std::span(reinterpret_cast<const uint8_t*>(arg.data()), arg.size()));
        mem.store(cursor + arg.size(), 1, 0);
        argPtrs.push_back(cursor);
    }

    size_t words = 1 + argPtrs.size() + 1 + 1 + 2;
    uint64_t sp = (cursor - words * 8) & ~uint64_t{15};
    uint64_t w = sp;
    mem.store(w, 8, argv.size());
    w += 8;
    for (uint64_t p : argPtrs) {
        mem.store(w, 8, p);
        w += 8;
    }
    mem.store(w, 8, 0);  // argv terminator
    w += 8;
    mem.store(w, 8, 0);  // empty envp
    w += 8;
    mem.store(w, 8, 0);  // AT_NULL
    mem.store(w + 8, 8, 0);
    return sp;
}

}  // namespace ctrv::loader
