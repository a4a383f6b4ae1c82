#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace disparity::cli {

// Version of every JSON report the CLI writes.
inline constexpr int kReportVersion = 1;

// Runs one subcommand. Returns the process exit status: 0 on success, 2 for
// invalid input or usage, 3 for convergence or rank failures, 1 otherwise.
// Errors are written to `err` as one JSON object per line.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace disparity::cli
