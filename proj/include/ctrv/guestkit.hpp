#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ctrv::guestkit {

class AsmError : public std::runtime_error {
public:
    AsmError(const std::string& what, size_t line);
    size_t line() const { return line_; }

private:
    size_t line_;
};

class UnknownMnemonic : public AsmError {
public:
    using AsmError::AsmError;
};

class UnresolvedLabel : public AsmError {
public:
    using AsmError::AsmError;
};

// Conditional branches reach ±4 KiB, JAL ±1 MiB. Anything further is a hard
// error; there is no relaxation pass.
class BranchOutOfRange : public AsmError {
public:
    using AsmError::AsmError;
};

struct AsmProgram {
    std::vector<uint8_t> text;
    std::vector<uint8_t> data;
    uint64_t textBase = 0;
    uint64_t dataBase = 0;
    uint64_t entry = 0;
    std::map<std::string, uint64_t> labels;      // every label, absolute address
    std::vector<std::string> exported;           // .global names, in order
};

// Two-pass assembler for the RV64IMAC subset the fixtures use, plus explicit
// c.* mnemonics and a handful of pseudo-instructions (li, la, mv, j, call,
// ret, beqz, ...). Text is placed at 0x10000, data on the next free page.
AsmProgram assembleProgram(std::string_view source);

// Assembles and wraps the program into a static ELF64 RISC-V executable with
// a full symbol table (globals and local labels).
std::vector<uint8_t> assemble(std::string_view source);

std::vector<uint8_t> emitElf(const AsmProgram& program);

struct FixtureManifest {
    uint64_t totalLeakages = 0;
    uint64_t uniqueLeakages = 0;
    std::vector<std::string> leakKinds;  // "ControlFlow" / "MemoryAccess" per finding
};

struct Fixture {
    std::string name;
    std::vector<uint8_t> elf;
    FixtureManifest manifest;
};

class UnknownFixture : public std::runtime_error {
public:
    explicit UnknownFixture(const std::string& name);
};

// Catalog of self-contained guest programs. Each defines microwalk_target
// and links against the built-in runtime (entry stub, syscall wrappers,
// bump allocator).
std::vector<std::string> fixtureNames();
const std::string& fixtureSource(const std::string& name);
Fixture buildFixture(const std::string& name);

}  // namespace ctrv::guestkit
