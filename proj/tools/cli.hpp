// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dlm::cli {

/// Runs the `dlm` command line. args[0] is the program name. Results go to
/// out, logs and diagnostics to err. Returns 0 on success, 1 on runtime
/// failure, 2 on usage errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dlm::cli
