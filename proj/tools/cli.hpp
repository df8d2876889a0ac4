#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace esmc::cli {

// Exit codes: 0 success or help, 2 bad arguments / invalid input / missing
// path, 1 any other failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace esmc::cli
