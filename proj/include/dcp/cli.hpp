#pragma once

#include <exception>
#include <iosfwd>
#include <string>
#include <vector>

namespace dcp {

/// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitArtifact = 3,
  kExitNumeric = 4,
};

/// Maps a library exception onto the exit code the CLI reports.
int exit_code_for(const std::exception& e);

/// Entry point of the `dcp` tool; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dcp
