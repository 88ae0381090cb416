#pragma once

#include <string>
#include <vector>

namespace msadgn::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

// Entry point shared by the executable and the tests. args excludes argv[0].
int run(const std::vector<std::string>& args);

}  // namespace msadgn::cli
