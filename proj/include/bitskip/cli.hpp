#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bitskip {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitConfig = 2;   // invalid config, unknown variant, variant mismatch
inline constexpr int kExitRuntime = 3;  // I/O failure, corrupt checkpoint, other runtime errors

// Runs `bitskip <args...>` (program name excluded) and returns the exit code.
// Subcommands: train, eval, sweep, profile, gen, compare.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bitskip
