#pragma once

// Command-line dispatcher. Subcommands: gen-data, train-teacher, distill,
// evaluate, ablate, loss-track, report.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data or format
// error, 3 numerical abort. Diagnostics go to `err`; `out` carries only data
// requested on stdout (--print-defaults).
//
// Relative output paths are resolved against the run directory: --run-dir,
// else the MTD_RUN_DIR environment variable, else the working directory.

#include <iosfwd>

namespace mtd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

inline constexpr const char* kRunDirEnv = "MTD_RUN_DIR";

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mtd
