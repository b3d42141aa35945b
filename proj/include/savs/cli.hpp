#pragma once

#include <string>
#include <vector>

namespace savs::cli {

/// Exit codes: 0 success, 1 usage error, 2 runtime failure.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitFailure = 2;

/// args[0] is the program name.
int run(const std::vector<std::string>& args);

}  // namespace savs::cli
