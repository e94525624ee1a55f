#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rundet::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kIo = 2, kNumerical = 3 };

/// Runs one command. `args` excludes the program name. Diagnostics go to
/// `err`, results to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rundet::cli
