#include "augsearch/policy_distribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "augsearch/errors.hpp"
#include "json.hpp"

namespace augsearch {

using nlohmann::json;

void UpdateConfig::validate() const {
  if (!(theta_min >= 0.0)) throw std::invalid_argument("theta_min must be >= 0");
  if (!(delta_init > 0.0)) throw std::invalid_argument("delta_init must be > 0");
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be > 0");
  if (!(delta_min > 0.0 && delta_min <= delta_max))
    throw std::invalid_argument("need 0 < delta_min <= delta_max");
  if (step_mode == StepSizeMode::Fixed && !(fixed_eps >= 0.0))
    throw std::invalid_argument("fixed_eps must be >= 0");
}

DistributionState init_uniform(std::span<const int> n_categories, const UpdateConfig& cfg) {
  DistributionState s;
  std::size_t n_params = 0;
  for (int k : n_categories) {
    if (k < 2) throw std::invalid_argument("every variable needs at least 2 categories");
    s.theta.emplace_back(static_cast<std::size_t>(k), 1.0 / k);
    n_params += static_cast<std::size_t>(k - 1);
  }
  s.delta = cfg.delta_init;
  s.s_acc.assign(n_params, 0.0);
  s.gamma_acc = 0.0;
  s.step_count = 0;
  return s;
}

DistributionState init_uniform(const SearchSpace& space, const UpdateConfig& cfg) {
  std::vector<int> ks;
  for (const auto& v : space.variables()) ks.push_back(v.n_categories);
  return init_uniform(ks, cfg);
}

PolicySample sample(const DistributionState& state, Rng& rng) {
  PolicySample out;
  out.assignment.levels.resize(state.theta.size());
  for (std::size_t v = 0; v < state.theta.size(); ++v) {
    const auto& th = state.theta[v];
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t k = 0;
    for (; k + 1 < th.size(); ++k) {
      acc += th[k];
      if (u < acc) break;
    }
    out.assignment.levels[v] = static_cast<int>(k);
    out.log_prob += std::log(th[k]);
  }
  return out;
}

double log_prob(const DistributionState& state, const PolicyAssignment& assignment) {
  if (assignment.levels.size() != state.theta.size())
    throw std::invalid_argument("assignment length does not match distribution");
  double lp = 0.0;
  for (std::size_t v = 0; v < state.theta.size(); ++v)
    lp += std::log(state.theta[v].at(static_cast<std::size_t>(assignment.levels[v])));
  return lp;
}

std::vector<double> nat_grad_loglik(std::span<const double> theta_v, int level) {
  if (level < 0 || static_cast<std::size_t>(level) >= theta_v.size())
    throw std::invalid_argument("level out of range");
  std::vector<double> g(theta_v.size());
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = (k == static_cast<std::size_t>(level) ? 1.0 : 0.0) - theta_v[k];
  return g;
}

SquareMatrix fisher_matrix(std::span<const double> theta_v) {
  if (theta_v.size() < 2) throw std::invalid_argument("need K >= 2");
  for (double t : theta_v)
    if (!(t >= 1e-12)) throw SingularGeometryError("Fisher matrix is singular on the simplex boundary");
  const std::size_t n = theta_v.size() - 1;
  SquareMatrix f{n, std::vector<double>(n * n, 1.0 / theta_v.back())};
  for (std::size_t i = 0; i < n; ++i) f(i, i) += 1.0 / theta_v[i];
  return f;
}

std::vector<double> compute_utilities(std::span<const double> losses, UtilityMode mode) {
  const std::size_t n = losses.size();
  std::vector<double> u(n, 0.0);
  if (n == 0) return u;
  if (mode == UtilityMode::Baseline) {
    const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) u[j] = mean - losses[j];
    return u;
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return losses[a] < losses[b]; });
  const auto mu = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * 0.25));
  std::vector<double> by_rank(n, 0.0);
  for (std::size_t r = 0; r < mu; ++r) by_rank[r] += 1.0;
  for (std::size_t r = n - mu; r < n; ++r) by_rank[r] -= 1.0;
  // Equal losses share the mean utility of their rank block.
  std::size_t start = 0;
  while (start < n) {
    std::size_t end = start + 1;
    while (end < n && losses[idx[end]] == losses[idx[start]]) ++end;
    double m = 0.0;
    for (std::size_t r = start; r < end; ++r) m += by_rank[r];
    m /= static_cast<double>(end - start);
    for (std::size_t r = start; r < end; ++r) u[idx[r]] = m;
    start = end;
  }
  return u;
}

std::vector<double> natural_gradient_estimate(std::span<const double> theta_v,
                                              std::span<const int> levels,
                                              std::span<const double> weights) {
  if (levels.size() != weights.size() || levels.empty())
    throw std::invalid_argument("levels and weights must be non-empty and equal length");
  const std::size_t k = theta_v.size();
  std::vector<double> g(k, 0.0);
  double wsum = 0.0;
  for (std::size_t j = 0; j < levels.size(); ++j) {
    g[static_cast<std::size_t>(levels[j])] += weights[j];
    wsum += weights[j];
  }
  const double inv_n = 1.0 / static_cast<double>(levels.size());
  for (std::size_t i = 0; i < k; ++i) g[i] = (g[i] - wsum * theta_v[i]) * inv_n;
  return g;
}

std::vector<double> whiten(std::span<const double> theta_v, std::span<const double> g) {
  const std::size_t n = theta_v.size() - 1;
  const double tk = theta_v.back();
  const double c = 1.0 / (tk + std::sqrt(tk));
  double gsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) gsum += g[i];
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = g[i] / std::sqrt(theta_v[i]) + std::sqrt(theta_v[i]) * gsum * c;
  return out;
}

void project_to_floored_simplex(std::vector<double>& th, double theta_min) {
  const std::size_t k = th.size();
  if (theta_min * static_cast<double>(k) > 1.0)
    throw std::invalid_argument("theta_min too large for the number of categories");
  const double lo = *std::min_element(th.begin(), th.end());
  if (lo >= theta_min && std::abs(std::accumulate(th.begin(), th.end(), 0.0) - 1.0) <= 1e-12) return;
  // Shift by the floor and project onto the simplex of radius 1 - k*theta_min.
  const double radius = 1.0 - static_cast<double>(k) * theta_min;
  std::vector<double> u(k);
  for (std::size_t i = 0; i < k; ++i) u[i] = th[i] - theta_min;
  std::vector<double> y(u);
  std::sort(y.begin(), y.end(), std::greater<>());
  double prefix = 0.0;
  double tau = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    prefix += y[r];
    const double cand = (prefix - radius) / static_cast<double>(r + 1);
    if (y[r] - cand > 0.0) tau = cand;
  }
  for (std::size_t i = 0; i < k; ++i) th[i] = theta_min + std::max(0.0, u[i] - tau);
}

double step_size(const DistributionState& state, const UpdateConfig& cfg) {
  if (cfg.step_mode == StepSizeMode::Fixed) return cfg.fixed_eps;
  return state.delta / std::sqrt(static_cast<double>(std::max<std::size_t>(1, state.num_params())));
}

DistributionState update_theta(const DistributionState& state, std::span<const PolicySample> samples,
                               std::span<const double> val_losses, const UpdateConfig& cfg) {
  if (samples.size() != val_losses.size())
    throw std::invalid_argument("samples and losses differ in length");
  if (samples.size() < 2) throw std::invalid_argument("update_theta needs at least 2 samples");
  for (const auto& s : samples)
    if (s.assignment.levels.size() != state.theta.size())
      throw std::invalid_argument("sample length does not match distribution");
  cfg.validate();

  const auto utilities = compute_utilities(val_losses, cfg.utility);
  const double eps = step_size(state, cfg);

  DistributionState next = state;
  std::vector<double> white;
  white.reserve(state.num_params());
  std::vector<int> levels(samples.size());
  for (std::size_t v = 0; v < state.theta.size(); ++v) {
    for (std::size_t j = 0; j < samples.size(); ++j) levels[j] = samples[j].assignment.levels[v];
    const auto g = natural_gradient_estimate(state.theta[v], levels, utilities);
    if (cfg.step_mode == StepSizeMode::Adaptive) {
      const auto w = whiten(state.theta[v], g);
      white.insert(white.end(), w.begin(), w.end());
    }
    auto& th = next.theta[v];
    for (std::size_t k = 0; k < th.size(); ++k) th[k] += eps * g[k];
    project_to_floored_simplex(th, cfg.theta_min);
  }

  if (cfg.step_mode == StepSizeMode::Adaptive) {
    const double n = static_cast<double>(std::max<std::size_t>(1, state.num_params()));
    const double beta = std::min(1.0, state.delta / std::sqrt(n));
    double norm = 0.0;
    for (double w : white) norm += w * w;
    norm = std::sqrt(norm);
    const double gain = std::sqrt(beta * (2.0 - beta));
    for (std::size_t i = 0; i < next.s_acc.size(); ++i) {
      const double dir = norm > 0.0 ? white[i] / norm : 0.0;
      next.s_acc[i] = (1.0 - beta) * state.s_acc[i] + gain * dir;
    }
    next.gamma_acc = (1.0 - beta) * (1.0 - beta) * state.gamma_acc + beta * (2.0 - beta);
    double s2 = 0.0;
    for (double s : next.s_acc) s2 += s * s;
    next.delta = std::clamp(state.delta * std::exp(beta * (s2 / cfg.alpha - next.gamma_acc)),
                            cfg.delta_min, cfg.delta_max);
  }
  ++next.step_count;
  return next;
}

std::vector<double> entropy(const DistributionState& state) {
  std::vector<double> h;
  h.reserve(state.theta.size());
  for (const auto& th : state.theta) {
    double e = 0.0;
    for (double t : th)
      if (t > 0.0) e -= t * std::log(t);
    h.push_back(e);
  }
  return h;
}

PolicyAssignment mode(const DistributionState& state) {
  PolicyAssignment a;
  for (const auto& th : state.theta)
    a.levels.push_back(static_cast<int>(std::max_element(th.begin(), th.end()) - th.begin()));
  return a;
}

std::string DistributionState::to_json() const {
  json j;
  j["theta"] = theta;
  j["delta"] = delta;
  j["s_acc"] = s_acc;
  j["gamma_acc"] = gamma_acc;
  j["step_count"] = step_count;
  return j.dump(2);
}

DistributionState DistributionState::from_json(std::string_view text) {
  try {
    const auto j = json::parse(text);
    DistributionState s;
    s.theta = j.at("theta").get<std::vector<std::vector<double>>>();
    s.delta = j.at("delta").get<double>();
    s.s_acc = j.at("s_acc").get<std::vector<double>>();
    s.gamma_acc = j.at("gamma_acc").get<double>();
    s.step_count = j.at("step_count").get<std::int64_t>();
    std::size_t n_params = 0;
    for (const auto& th : s.theta) {
      if (th.size() < 2) throw FormatError("theta vector with fewer than 2 categories");
      n_params += th.size() - 1;
    }
    if (n_params != s.s_acc.size()) throw FormatError("s_acc length does not match theta");
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("distribution JSON: ") + e.what());
  }
}

}  // namespace augsearch
