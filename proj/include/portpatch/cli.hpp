#pragma once

#include <ostream>
#include <span>
#include <string>

namespace portpatch {

inline constexpr int exit_ok = 0;
inline constexpr int exit_usage = 1;
inline constexpr int exit_data = 2;
inline constexpr int exit_numerical = 3;

/// Runs one command. `args` excludes the program name. Errors are reported on
/// `err` as a single "ERROR(<category>): message" line.
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace portpatch
