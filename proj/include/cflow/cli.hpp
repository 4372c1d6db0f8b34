// Command-line front end: subcommands, verification suites and exit codes.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cflow/run_io.hpp"
#include "cflow/verify.hpp"

namespace cflow {

// 0: every check passed or is a monitor; 1: some check failed; 2: usage, config or input error.
enum ExitCode : int { exit_ok = 0, exit_check_failed = 1, exit_usage = 2 };

struct SuiteOptions {
  std::string suite = "core";  // core, pseudoloc, soliton, blowup, all
  // Elapsed-time window for the S-evolution and sphere-identity checks. Negative: the
  // whole run, or 0.6 of it when the run ended at a curvature singularity.
  double t_window = -1.0;
  double r0 = 1.0;
  double eps = 0.5;
};

// Runs a suite on a loaded run. The coarse comparison run is recomputed from `config`
// at half the nodes. Results are sorted by id.
std::vector<VerificationReport> verify_suite(const RunConfig& config, const FlowHistory& fine,
                                             const SuiteOptions& opts, const std::string& manifest_hash = "");

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace cflow
