#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mdunet {

/// Runs one `mdunet` subcommand. `args` excludes the program name. Returns the
/// process exit status; failures print a single `error: ...` line to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mdunet
