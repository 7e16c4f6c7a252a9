#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tlab::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2, kCheckFailed = 3 };

/// Runs the tlab command line; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tlab::cli
