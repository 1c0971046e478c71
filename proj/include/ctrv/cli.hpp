#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ctrv::cli {

// Exit codes: 0 success / no leakage, 2 usage or configuration problem,
// 3 guest load failure, 4 guest fault or fuel exhaustion, 5 unsupported
// syscall, 6 nondeterministic trace detected, 10 leakage found. The run
// subcommand instead propagates the guest's own exit code on clean exits.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitLoad = 3;
inline constexpr int kExitGuestFault = 4;
inline constexpr int kExitUnsupportedSyscall = 5;
inline constexpr int kExitNondeterministic = 6;
inline constexpr int kExitLeakage = 10;

// Runs the command-line front end. args excludes the program name.
// Diagnostics go to the given streams so tests can capture them.
int runCli(std::vector<std::string> args, std::ostream& out, std::ostream& err);
int runCli(std::vector<std::string> args);

}  // namespace ctrv::cli
