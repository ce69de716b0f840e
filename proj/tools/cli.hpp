#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mdc::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kIoError = 3, kFormatError = 4 };

/// Runs one command line (args[0] is the program name). Summaries go to
/// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mdc::cli
