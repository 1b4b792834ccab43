#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace augsearch::cli {

/// Exit codes shared by every subcommand.
enum ExitCode : int { kOk = 0, kRuntimeError = 1, kUsageError = 2 };

/// Entry point of the `augsearch` tool. Output goes to `out`, diagnostics to
/// `err`; nothing calls std::exit so it can be driven from tests.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

/// Convenience overload for tests: args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Per-epoch aggregate of a search log, as written to summary.csv.
struct EpochSummary {
  int epoch = 0;
  double train_loss_mean = 0.0;
  double val_loss_mean = 0.0;  // NaN when the epoch has no lookaheads
  double entropy_mean = 0.0;   // at the end of the epoch
  double delta = 0.0;          // at the end of the epoch
};

struct RunSeries {
  std::string name;
  std::vector<EpochSummary> epochs;
  std::vector<double> val_loss_by_step;  // NaN where a step had no lookaheads
};

/// Reads <dir>/search_log.csv. Throws FormatError on malformed rows.
RunSeries load_run(const std::string& dir);

std::string summary_csv(const std::vector<RunSeries>& runs);

/// Validation loss against step, one polyline per run.
std::string loss_chart_svg(const std::vector<RunSeries>& runs);

}  // namespace augsearch::cli
