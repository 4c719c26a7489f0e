#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace condigsum {

/// Parses argv (argv[0] is the program name) and runs one subcommand.
/// Returns 0 on success, 2 for a missing subcommand, 1 for any other error.
int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

/// Applies CONDIGSUM_LOG={error,info,debug}; unset leaves the level alone.
void configure_logging_from_env();

}  // namespace condigsum
