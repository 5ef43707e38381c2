#pragma once

#include <ostream>

namespace uwseg {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitTraining = 3,
  kExitIngestion = 4,
};

/// Entry point for the train / eval / infer / inspect subcommands. Messages go
/// to `out`, errors to `err`; returns an ExitCode.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace uwseg
