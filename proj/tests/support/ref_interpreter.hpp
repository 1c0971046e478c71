#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "ctrv/engine.hpp"
#include "ctrv/loader.hpp"

// Plain fetch-decode-execute interpreter over the same guest memory and ABI
// as the block-caching engine: no code cache, no block scanning, no
// instrumentation. Serves as the behavioral baseline the engine is compared
// against; the execution semantics here are written directly against the
// ISA rules rather than reusing the engine's execution paths.
namespace refint {

class RefInterpreter {
public:
    explicit RefInterpreter(ctrv::loader::GuestMemory& mem) : mem_(mem) {}

    void setReg(unsigned idx, uint64_t value) {
        if (idx != 0) regs_[idx] = value;
    }
    uint64_t reg(unsigned idx) const { return idx == 0 ? 0 : regs_[idx]; }
    std::array<uint64_t, 32> snapshot() const;

    // Byte stream served on file descriptor 3; read position resets.
    void setInput(std::vector<uint8_t> bytes);

    // fn runs every time execution is about to fetch from addr.
    void onAddress(uint64_t addr, std::function<void()> fn);

    ctrv::engine::ExitStatus run(uint64_t entry, uint64_t fuel = 1'000'000'000);

    const std::vector<uint8_t>& stdoutBytes() const { return stdoutBytes_; }
    const std::vector<uint8_t>& stderrBytes() const { return stderrBytes_; }
    uint64_t retired() const { return retired_; }

private:
    void step();
    void syscall();
    uint64_t csrValue(uint32_t csr) const;
    void atomicMemory(const ctrv::isa::DecodedInstruction& in);

    ctrv::loader::GuestMemory& mem_;
    std::array<uint64_t, 32> regs_{};
    uint64_t pc_ = 0;
    uint64_t retired_ = 0;
    uint64_t fuelLimit_ = UINT64_MAX;

    struct Reservation {
        bool active = false;
        uint64_t addr = 0;
        unsigned width = 0;
        uint64_t saved = 0;
    } reservation_;

    std::map<uint64_t, std::vector<std::function<void()>>> callbacks_;
    std::vector<uint8_t> input_;
    size_t inputPos_ = 0;
    std::vector<uint8_t> stdoutBytes_;
    std::vector<uint8_t> stderrBytes_;
};

}  // namespace refint
