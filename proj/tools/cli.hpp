#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mm {

/// Entry point of the mirrormamba tool. Returns the process exit code; on
/// failure a one-line reason goes to err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mm
