#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "augsearch/rng.hpp"
#include "augsearch/search_space.hpp"

namespace augsearch {

/// Parameters of the product-of-categoricals policy distribution, stored in
/// expectation parameterization (theta[v][k] = P(variable v takes level k)),
/// plus the adaptive step-size state.
struct DistributionState {
  std::vector<std::vector<double>> theta;
  double delta = 1.0;
  std::vector<double> s_acc;  // length = sum over variables of (K_v - 1)
  double gamma_acc = 0.0;
  std::int64_t step_count = 0;

  std::size_t num_params() const { return s_acc.size(); }

  std::string to_json() const;
  static DistributionState from_json(std::string_view text);
};

struct PolicySample {
  PolicyAssignment assignment;
  double log_prob = 0.0;
};

enum class UtilityMode {
  Ranking,   // best quarter +1, worst quarter -1, ties share the mean
  Baseline,  // mean(loss) - loss
};

enum class StepSizeMode { Adaptive, Fixed };

struct UpdateConfig {
  UtilityMode utility = UtilityMode::Ranking;
  StepSizeMode step_mode = StepSizeMode::Adaptive;
  double fixed_eps = 0.1;  // used when step_mode == Fixed
  double delta_init = 1.0;
  double alpha = 1.5;
  double delta_min = 1e-3;
  double delta_max = 1e3;
  double theta_min = 1e-3;

  void validate() const;
};

/// Uniform categoricals over every variable of the space.
DistributionState init_uniform(const SearchSpace& space, const UpdateConfig& cfg = {});

/// Same, for an explicit list of category counts.
DistributionState init_uniform(std::span<const int> n_categories, const UpdateConfig& cfg = {});

/// Draws each variable independently. Consumes exactly one uniform per variable.
PolicySample sample(const DistributionState& state, Rng& rng);

double log_prob(const DistributionState& state, const PolicyAssignment& assignment);

/// Natural gradient of ln p(level) for one categorical in expectation
/// parameters: onehot(level) - theta.
std::vector<double> nat_grad_loglik(std::span<const double> theta_v, int level);

/// Dense row-major square matrix.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> data;
  double operator()(std::size_t r, std::size_t c) const { return data[r * n + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * n + c]; }
};

/// Fisher information of one categorical on the chart of its first K-1
/// probabilities: diag(1/theta_i) + (1/theta_K) 11^T. Throws
/// SingularGeometryError when any entry is below 1e-12.
SquareMatrix fisher_matrix(std::span<const double> theta_v);

/// Utilities (higher is better) for a list of losses.
std::vector<double> compute_utilities(std::span<const double> losses, UtilityMode mode);

/// Monte-Carlo natural-gradient estimate for variable v:
/// (1/N) sum_j weight_j * (onehot(level_j) - theta_v).
std::vector<double> natural_gradient_estimate(std::span<const double> theta_v,
                                              std::span<const int> levels,
                                              std::span<const double> weights);

/// Fisher-whitened vector F^{1/2} g on the K-1 chart, for a tangent vector g.
std::vector<double> whiten(std::span<const double> theta_v, std::span<const double> g);

/// Projects onto {theta_k >= theta_min, sum = 1}.
void project_to_floored_simplex(std::vector<double>& theta_v, double theta_min);

/// One natural-gradient step on the expected validation loss. Lower-loss
/// samples gain probability mass. Throws std::invalid_argument when fewer
/// than two samples are given or sizes disagree.
DistributionState update_theta(const DistributionState& state, std::span<const PolicySample> samples,
                               std::span<const double> val_losses, const UpdateConfig& cfg = {});

/// Step size the next update would use.
double step_size(const DistributionState& state, const UpdateConfig& cfg);

/// Shannon entropy (nats) per variable.
std::vector<double> entropy(const DistributionState& state);

/// Index of the most probable level per variable.
PolicyAssignment mode(const DistributionState& state);

}  // namespace augsearch
