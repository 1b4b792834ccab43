#pragma once

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "augsearch/augment3d.hpp"
#include "augsearch/learner.hpp"
#include "augsearch/policy_distribution.hpp"
#include "augsearch/search_space.hpp"
#include "augsearch/volume.hpp"

namespace augsearch {

enum class SearchMode {
  Search,         // sample policies from theta and adapt theta
  NoAug,          // identity policy, theta frozen, no lookaheads
  DefaultPolicy,  // fixed hand-tuned policy, theta frozen, no lookaheads
};

const char* to_string(SearchMode m);
SearchMode search_mode_from_string(const std::string& s);

struct EngineConfig {
  int epochs = 30;
  int inner_steps = 2;  // T
  int n_w = 2;
  int n_theta = 2;
  double lr_w = 3e-4;
  double weight_decay = 3e-5;
  UpdateConfig theta_update;
  int batch_size = 2;
  int val_batch = 2;
  Dims patch{16, 16, 16};
  double fg_threshold = 1.0 / 3.0;
  int lookahead_depth = 1;
  bool full_val = false;  // score lookaheads on every validation volume
  int channels = 8;
  std::uint64_t seed = 0;
  int threads = 1;
  SearchMode mode = SearchMode::Search;
  bool lr_plateau = false;
  AugmentOptions augment;
  /// Starting distribution; uniform when empty.
  std::optional<DistributionState> initial_theta;

  /// Throws std::invalid_argument on any violated constraint.
  void validate() const;
};

/// Identifies one inner step; every random stream is derived from it.
struct StepKey {
  int epoch = 0;
  int t = 0;
};

/// Independent random streams of one step.
enum class StreamRole : std::uint64_t {
  WeightPolicy = 2,
  WeightBatch,
  WeightAug,
  LookaheadPolicy,
  LookaheadBatch,
  LookaheadAug,
  Validation,
};

/// derive_seed(master, {epoch, t, role}) further keyed by `index`, so a
/// stream depends only on its position and never on execution order.
std::uint64_t stream_seed(std::uint64_t master, StepKey key, StreamRole role,
                          std::initializer_list<std::uint64_t> index = {});

/// Seed passed to SegmentationLearner::init.
std::uint64_t model_init_seed(std::uint64_t master);

struct StepRecord {
  int epoch = 0;
  int t = 0;
  std::int64_t step = 0;
  std::vector<double> train_losses;  // one per weight-update policy
  std::vector<double> val_losses;    // one per surviving lookahead
  bool theta_updated = false;
  double entropy_mean = 0.0;
  std::vector<double> entropies;
  std::array<double, kNumGroups> expected_prob{};  // E_theta[p_g]
  double delta = 0.0;
  double eps = 0.0;
  double wall_seconds = 0.0;  // since search start; not part of the CSV
};

/// Append-only per-step log.
struct SearchLog {
  std::vector<StepRecord> records;

  static constexpr const char* kCsvHeader =
      "epoch,t,step,train_loss_mean,train_losses,val_loss_mean,val_losses,theta_updated,entropy_mean,"
      "p_scale,p_rot,p_eldef,p_gamma,delta,eps";

  /// Deterministic CSV (wall time excluded). Lists are ';'-separated.
  std::string to_csv() const;
  /// One data line of to_csv, with trailing newline.
  static std::string csv_row(const StepRecord& r);
  void write_csv(const std::string& path) const;
  /// Parses the columns written by to_csv. Throws FormatError naming the
  /// 1-based line of the first malformed row.
  static SearchLog from_csv(const std::string& text);
};

/// Callbacks for instrumentation; default implementations do nothing.
class EngineObserver {
 public:
  virtual ~EngineObserver() = default;
  virtual void on_train_losses(StepKey, std::span<const double>) {}
  virtual void on_weights_updated(StepKey, const ModelWeights&) {}
  virtual void on_val_losses(StepKey, std::span<const double>) {}
  virtual void on_theta_updated(StepKey, std::span<const double> /*losses*/, const DistributionState& /*before*/,
                                const DistributionState& /*after*/) {}
  virtual void on_step_end(const StepRecord&) {}
  virtual void on_epoch_end(int /*epoch*/, const ModelWeights&, const DistributionState&) {}
};

struct WeightUpdateResult {
  ModelWeights weights;
  std::vector<double> train_losses;
  std::vector<PolicySample> policies;
  std::vector<double> mean_gradient;
};

/// Policy used for the given mode: sampled from theta in Search mode,
/// identity / default otherwise. Consumes `rng` only in Search mode.
PolicySample choose_policy(const EngineConfig& cfg, const SearchSpace& space, const DistributionState& theta, Rng& rng);

/// Builds one augmented training minibatch under `policy`. Volume choice and
/// patch placement come from `batch_seed`, augmentation from `aug_seed`.
Batch make_training_batch(std::span<const LabeledVolume> data, const ConcretePolicy& policy, const EngineConfig& cfg,
                          std::uint64_t batch_seed, std::uint64_t aug_seed);

/// Unaugmented validation minibatch (or every volume when cfg.full_val).
std::vector<Batch> make_validation_batches(std::span<const LabeledVolume> val, const EngineConfig& cfg,
                                           std::uint64_t seed);

/// Samples N_w policies, averages their training gradients and takes one
/// ADAM step.
WeightUpdateResult weight_update(const SegmentationLearner& learner, const ModelWeights& w,
                                 const DistributionState& theta, const SearchSpace& space,
                                 std::span<const LabeledVolume> train, const EngineConfig& cfg, StepKey key);

struct LookaheadResult {
  std::vector<PolicySample> samples;
  std::vector<double> val_losses;
  std::size_t failures = 0;
};

/// For each of N_theta sampled policies: copy w, take lookahead_depth
/// augmented training steps, score the validation loss, discard the copy.
/// `w` is never modified. Failed lookaheads are dropped.
LookaheadResult lookahead_losses(const SegmentationLearner& learner, const ModelWeights& w,
                                 const DistributionState& theta, const SearchSpace& space,
                                 std::span<const LabeledVolume> train, std::span<const LabeledVolume> val,
                                 const EngineConfig& cfg, StepKey key);

struct TestMetrics {
  std::vector<double> dice_per_class;  // mean over test volumes, per foreground class
  double dice_mean = 0.0;
  std::vector<std::vector<double>> per_volume;
};

TestMetrics evaluate(const SegmentationLearner& learner, const ModelWeights& w, std::span<const LabeledVolume> test,
                     Dims patch);

struct SearchResult {
  ModelWeights weights;
  DistributionState theta;
  SearchLog log;
  TestMetrics test;
};

/// Alternating weight / distribution updates for epochs x T steps, then
/// sliding-window evaluation on the test split.
SearchResult run_search(const EngineConfig& cfg, const SearchSpace& space, std::span<const LabeledVolume> train,
                        std::span<const LabeledVolume> val, std::span<const LabeledVolume> test,
                        EngineObserver* observer = nullptr);

SearchResult run_search(const SegmentationLearner& learner, const EngineConfig& cfg, const SearchSpace& space,
                        std::span<const LabeledVolume> train, std::span<const LabeledVolume> val,
                        std::span<const LabeledVolume> test, EngineObserver* observer = nullptr);

/// E_theta[p_g] per probability group.
std::array<double, kNumGroups> expected_probabilities(const SearchSpace& space, const DistributionState& theta);

}  // namespace augsearch
