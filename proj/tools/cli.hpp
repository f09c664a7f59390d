// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace picr::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kIoError = 3,
  kStreamError = 4,
};

/// Runs one command line. Results go to `out` as JSON; failures go to `err`
/// as {"error": {"kind", "message"}}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace picr::cli
