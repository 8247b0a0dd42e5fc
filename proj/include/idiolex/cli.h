#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace idiolex::cli {

/// Runs one command line (without the program name). Returns the exit code:
/// 0 success, 1 usage error, 2 data or config error, 3 numeric failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace idiolex::cli
