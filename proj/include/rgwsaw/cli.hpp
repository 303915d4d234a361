#pragma once

#include <iosfwd>
#include <map>
#include <string>

namespace rgwsaw::cli {

/// Exit codes: 0 success, 1 bad arguments or inputs, 2 violated invariant (see manifest.json).
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitViolation = 2;

/// Plain `key = value` config; '#' starts a comment, dashes in keys are read as underscores.
/// Throws std::invalid_argument on malformed lines or duplicate keys.
std::map<std::string, std::string> parse_config(const std::string& text);

std::string sha256_hex(const std::string& bytes);

/// Entry point for `rgwsaw green|frd|flow|simulate|report ...`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rgwsaw::cli
