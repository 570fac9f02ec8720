#pragma once

#include <iosfwd>

namespace prefalign::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDataError = 1;
inline constexpr int kExitUsage = 2;

// Runs one subcommand. Machine-readable output goes to `out`, diagnostics and
// usage text to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace prefalign::cli
