#include "cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>

#include "augsearch/bilevel_engine.hpp"
#include "augsearch/errors.hpp"
#include "augsearch/synth_data.hpp"

namespace augsearch::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError(p.string(), 0, "cannot open");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(p.string(), 0, "cannot open for writing");
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw IoError(p.string(), 0, "write failed");
}

/// Creates `dir` or checks it is empty. With --force only the entries this
/// tool writes (per `owned`) are removed; anything else is left alone.
void prepare_output_dir(const fs::path& dir, bool force, bool (*owned)(const fs::path&)) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(dir)) entries.push_back(e.path());
    if (!entries.empty()) {
      if (!force) throw UsageError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
      for (const auto& e : entries)
        if (owned(e)) fs::remove_all(e);
    }
  }
  fs::create_directories(dir);
}

bool owned_by_gen_data(const fs::path& p) {
  const auto name = p.filename().string();
  return name == "manifest.json" || name.rfind("vol_", 0) == 0;
}

bool owned_by_search(const fs::path& p) {
  static const char* names[] = {"config.json",      "search_log.csv", "timing.csv", "theta_final.json",
                                "weights_final.bin", "metrics.json",   "checkpoints"};
  const auto name = p.filename().string();
  for (const char* n : names)
    if (name == n) return true;
  return false;
}

bool owned_by_report(const fs::path& p) {
  const auto name = p.filename().string();
  return name == "summary.csv" || name == "val_loss.svg";
}

Dims dims_from(const std::vector<int>& v, const char* flag) {
  if (v.size() == 1) return {v[0], v[0], v[0]};
  if (v.size() == 3) return {v[0], v[1], v[2]};
  throw UsageError(std::string(flag) + " takes 1 or 3 values");
}

int threads_from_env() {
  const char* env = std::getenv("AUGSEARCH_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw UsageError(std::string("AUGSEARCH_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<int>(n);
}

json engine_json(const EngineConfig& c) {
  const auto& u = c.theta_update;
  return json{
      {"epochs", c.epochs},
      {"inner_steps", c.inner_steps},
      {"n_w", c.n_w},
      {"n_theta", c.n_theta},
      {"lr_w", c.lr_w},
      {"weight_decay", c.weight_decay},
      {"batch_size", c.batch_size},
      {"val_batch", c.val_batch},
      {"patch", {c.patch.nx, c.patch.ny, c.patch.nz}},
      {"fg_threshold", c.fg_threshold},
      {"lookahead_depth", c.lookahead_depth},
      {"full_val", c.full_val},
      {"channels", c.channels},
      {"seed", c.seed},
      {"threads", c.threads},
      {"mode", to_string(c.mode)},
      {"lr_plateau", c.lr_plateau},
      {"border", c.augment.border == BorderMode::Nearest ? "nearest" : "constant"},
      {"theta_update",
       {{"utility", u.utility == UtilityMode::Ranking ? "ranking" : "baseline"},
        {"step_size", u.step_mode == StepSizeMode::Adaptive ? "adaptive" : "fixed"},
        {"fixed_eps", u.fixed_eps},
        {"delta_init", u.delta_init},
        {"alpha", u.alpha},
        {"delta_min", u.delta_min},
        {"delta_max", u.delta_max},
        {"theta_min", u.theta_min}}},
  };
}

json metrics_json(const SearchResult& r, const SearchSpace& space, const EngineConfig& cfg) {
  const auto ep = expected_probabilities(space, r.theta);
  json m{{"mode", to_string(cfg.mode)},
         {"dice_mean", r.test.dice_mean},
         {"dice_per_class", r.test.dice_per_class},
         {"per_volume_dice", r.test.per_volume},
         {"steps", r.log.records.size()},
         {"final_expected_probabilities", {{"scale", ep[0]}, {"rot", ep[1]}, {"eldef", ep[2]}, {"gamma", ep[3]}}},
         {"final_entropy_mean", r.log.records.empty() ? 0.0 : r.log.records.back().entropy_mean},
         {"final_delta", r.theta.delta}};
  return m;
}

/// Streams the log and writes per-epoch checkpoints while the search runs.
class RunWriter : public EngineObserver {
 public:
  explicit RunWriter(const fs::path& dir) : dir_(dir) {
    fs::create_directories(dir_ / "checkpoints");
    log_.open(dir_ / "search_log.csv", std::ios::binary | std::ios::trunc);
    timing_.open(dir_ / "timing.csv", std::ios::binary | std::ios::trunc);
    if (!log_ || !timing_) throw IoError(dir_.string(), 0, "cannot create log files");
    log_ << SearchLog::kCsvHeader << '\n';
    timing_ << "step,wall_seconds\n";
  }

  void on_step_end(const StepRecord& r) override {
    log_ << SearchLog::csv_row(r);
    log_.flush();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%lld,%.6f\n", static_cast<long long>(r.step), r.wall_seconds);
    timing_ << buf;
    timing_.flush();
  }

  void on_epoch_end(int epoch, const ModelWeights& w, const DistributionState& theta) override {
    char stem[32];
    std::snprintf(stem, sizeof stem, "epoch_%03d", epoch);
    write_checkpoint((dir_ / "checkpoints" / (std::string(stem) + ".weights.bin")).string(), w);
    write_text(dir_ / "checkpoints" / (std::string(stem) + ".theta.json"), theta.to_json());
    last_checkpoint_ = (dir_ / "checkpoints" / stem).string();
  }

  const std::string& last_checkpoint() const { return last_checkpoint_; }

 private:
  fs::path dir_;
  std::ofstream log_, timing_;
  std::string last_checkpoint_;
};

struct GenDataArgs {
  std::string out;
  int n = 60;
  std::vector<int> dims{32};
  int classes = 2;
  std::uint64_t seed = 0;
  std::optional<double> shift;
  std::optional<double> noise;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  DatasetSpec spec;
  spec.n_volumes = a.n;
  spec.dims = dims_from(a.dims, "--dims");
  spec.n_classes = a.classes;
  spec.seed = a.seed;
  spec.rotation_shift = a.shift;
  if (a.noise) spec.noise_std = *a.noise;
  spec.validate();
  prepare_output_dir(a.out, a.force, owned_by_gen_data);
  const auto ds = write_dataset(a.out, spec);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& e : ds.entries) ++counts[static_cast<int>(e.split)];
  out << "wrote " << ds.entries.size() << " volumes (" << spec.dims.nx << 'x' << spec.dims.ny << 'x' << spec.dims.nz
      << ", train " << counts[0] << ", val " << counts[1] << ", test " << counts[2] << ") to " << a.out << '\n';
  return kOk;
}

struct SearchArgs {
  std::string data, out, space_file, baseline = "search", step_size = "adaptive", utility = "ranking",
                                      border = "constant";
  std::vector<int> patch{16};
  std::optional<int> threads;
  bool tie_rotation = false, force = false;
  EngineConfig cfg;
};

int cmd_search(SearchArgs a, std::ostream& out, std::ostream& err) {
  auto& cfg = a.cfg;
  cfg.mode = search_mode_from_string(a.baseline);
  cfg.patch = dims_from(a.patch, "--patch");
  cfg.threads = a.threads ? *a.threads : threads_from_env();
  cfg.theta_update.step_mode = a.step_size == "fixed" ? StepSizeMode::Fixed : StepSizeMode::Adaptive;
  cfg.theta_update.utility = a.utility == "baseline" ? UtilityMode::Baseline : UtilityMode::Ranking;
  cfg.augment.border = a.border == "nearest" ? BorderMode::Nearest : BorderMode::Constant;
  cfg.validate();

  const SearchSpace space =
      a.space_file.empty() ? build_default_space(a.tie_rotation) : SearchSpace::from_json(read_text(a.space_file));
  if (!fs::exists(fs::path(a.data) / "manifest.json"))
    throw UsageError("no dataset manifest at " + (fs::path(a.data) / "manifest.json").string());
  const auto ds = load_dataset(a.data);
  const auto train = ds.subset(Split::Train), val = ds.subset(Split::Val), test = ds.subset(Split::Test);

  prepare_output_dir(a.out, a.force, owned_by_search);
  const fs::path dir(a.out);
  json config{{"command", "search"},
              {"data", a.data},
              {"space_file", a.space_file},
              {"tie_rotation", a.tie_rotation},
              {"baseline", a.baseline},
              {"engine", engine_json(cfg)},
              {"dataset", json::parse(ds.spec.to_json())},
              {"space", json::parse(space.to_json())}};
  write_text(dir / "config.json", config.dump(2) + "\n");

  RunWriter writer(dir);
  SearchResult result;
  try {
    result = run_search(cfg, space, train, val, test, &writer);
  } catch (const NumericError& e) {
    err << "error: numeric failure: " << e.what() << '\n';
    if (!writer.last_checkpoint().empty()) err << "last good checkpoint: " << writer.last_checkpoint() << ".*\n";
    return kRuntimeError;
  }
  result.log.write_csv((dir / "search_log.csv").string());
  write_text(dir / "theta_final.json", result.theta.to_json());
  write_checkpoint((dir / "weights_final.bin").string(), result.weights);
  write_text(dir / "metrics.json", metrics_json(result, space, cfg).dump(2) + "\n");

  const auto ep = expected_probabilities(space, result.theta);
  char line[200];
  std::snprintf(line, sizeof line, "%s: %zu steps, test dice %.4f, E[p] scale %.3f rot %.3f eldef %.3f gamma %.3f\n",
                to_string(cfg.mode), result.log.records.size(), result.test.dice_mean, ep[0], ep[1], ep[2], ep[3]);
  out << line;
  return kOk;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
  bool force = false;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  std::vector<RunSeries> series;
  for (const auto& r : a.runs) series.push_back(load_run(r));
  // Disambiguate runs whose directories share a name.
  for (std::size_t i = 0; i < series.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (series[i].name == series[j].name) series[i].name += "#" + std::to_string(i);
  prepare_output_dir(a.out, a.force, owned_by_report);
  const auto summary = summary_csv(series);
  write_text(fs::path(a.out) / "summary.csv", summary);
  write_text(fs::path(a.out) / "val_loss.svg", loss_chart_svg(series));
  std::size_t rows = 0;
  for (const auto& s : series) rows += s.epochs.size();
  out << "summary: " << rows << " rows from " << series.size() << " run(s) in " << a.out << '\n';
  return kOk;
}

int cmd_space(bool tie_rotation, const std::string& path, std::ostream& out) {
  const auto text = json::parse(build_default_space(tie_rotation).to_json()).dump(2) + "\n";
  if (path.empty())
    out << text;
  else
    write_text(path, text);
  return kOk;
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Augmentation policy search for 3D segmentation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "augsearch 0.1.0");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic segmentation dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n", gen.n, "Number of volumes")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--dims", gen.dims, "Volume size: N or NX NY NZ")->expected(1, 3);
  gen_cmd->add_option("--classes", gen.classes, "Number of classes including background");
  gen_cmd->add_option("--seed", gen.seed, "Master seed");
  gen_cmd->add_option("--shift", gen.shift, "Rotate val/test volumes by up to this many radians per axis");
  gen_cmd->add_option("--noise", gen.noise, "Gaussian noise standard deviation");
  gen_cmd->add_flag("--force", gen.force, "Overwrite an existing dataset");

  SearchArgs s;
  auto* search_cmd = app.add_subcommand("search", "Run the policy search (or a baseline) and evaluate on test");
  search_cmd->add_option("--data", s.data, "Dataset directory (with manifest.json)")->required();
  search_cmd->add_option("--out", s.out, "Run output directory")->required();
  search_cmd->add_option("--epochs", s.cfg.epochs, "Epochs");
  search_cmd->add_option("--t", s.cfg.inner_steps, "Inner steps per epoch");
  search_cmd->add_option("--n-w", s.cfg.n_w, "Policies per weight update");
  search_cmd->add_option("--n-theta", s.cfg.n_theta, "Lookaheads per distribution update");
  search_cmd->add_option("--lr", s.cfg.lr_w, "Weight learning rate");
  search_cmd->add_option("--weight-decay", s.cfg.weight_decay, "Decoupled weight decay");
  search_cmd->add_option("--batch-size", s.cfg.batch_size, "Training patches per minibatch");
  search_cmd->add_option("--val-batch", s.cfg.val_batch, "Validation patches per lookahead");
  search_cmd->add_option("--patch", s.patch, "Patch size: N or NX NY NZ")->expected(1, 3);
  search_cmd->add_option("--fg-threshold", s.cfg.fg_threshold, "Target foreground fraction of sampled patches");
  search_cmd->add_option("--lookahead-depth", s.cfg.lookahead_depth, "Training steps per lookahead");
  search_cmd->add_flag("--full-val", s.cfg.full_val, "Score lookaheads on every validation volume");
  search_cmd->add_option("--channels", s.cfg.channels, "Hidden channels of the network");
  search_cmd->add_option("--seed", s.cfg.seed, "Master seed");
  search_cmd->add_option("--baseline", s.baseline, "search, noaug or default_policy")
      ->check(CLI::IsMember({"search", "noaug", "default_policy"}));
  search_cmd->add_option("--space", s.space_file, "Search space JSON (default space when omitted)");
  search_cmd->add_flag("--tie-rotation", s.tie_rotation, "Share one LB/RB pair across rotation axes");
  search_cmd->add_option("--threads", s.threads, "Worker threads (env AUGSEARCH_THREADS)")->check(CLI::PositiveNumber);
  search_cmd->add_option("--step-size", s.step_size, "adaptive or fixed")->check(CLI::IsMember({"adaptive", "fixed"}));
  search_cmd->add_option("--eps-theta", s.cfg.theta_update.fixed_eps, "Step size for --step-size fixed");
  search_cmd->add_option("--delta-init", s.cfg.theta_update.delta_init, "Initial trust radius");
  search_cmd->add_option("--utility", s.utility, "ranking or baseline")->check(CLI::IsMember({"ranking", "baseline"}));
  search_cmd->add_option("--theta-min", s.cfg.theta_update.theta_min, "Probability floor per category");
  search_cmd->add_flag("--lr-plateau", s.cfg.lr_plateau, "Reduce the learning rate on training-loss plateaus");
  search_cmd->add_option("--border", s.border, "constant or nearest")->check(CLI::IsMember({"constant", "nearest"}));
  search_cmd->add_flag("--force", s.force, "Overwrite an existing run directory");

  ReportArgs rep;
  auto* report_cmd = app.add_subcommand("report", "Summarise one or more run directories");
  report_cmd->add_option("--run", rep.runs, "Run directory (repeatable)")->required();
  report_cmd->add_option("--out", rep.out, "Report output directory")->required();
  report_cmd->add_flag("--force", rep.force, "Overwrite an existing report");

  bool tie = false;
  std::string space_out;
  auto* space_cmd = app.add_subcommand("space", "Print the default search space as JSON");
  space_cmd->add_flag("--tie-rotation", tie, "Share one LB/RB pair across rotation axes");
  space_cmd->add_option("--out", space_out, "Write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, out);
    if (*search_cmd) return cmd_search(s, out, err);
    if (*report_cmd) return cmd_report(rep, out);
    if (*space_cmd) return cmd_space(tie, space_out, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> storage{"augsearch"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : storage) argv.push_back(a.data());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace augsearch::cli
