#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "augsearch/learner.hpp"
#include "augsearch/policy_distribution.hpp"
#include "augsearch/rng.hpp"
#include "augsearch/search_space.hpp"

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("augsearch_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// ln p(c) of one categorical on the chart eta = theta_{1..K-1},
/// theta_K = 1 - sum(eta).
inline double chart_log_prob(const Eigen::VectorXd& eta, int c) {
  const int k = static_cast<int>(eta.size()) + 1;
  return c < k - 1 ? std::log(eta[c]) : std::log(1.0 - eta.sum());
}

/// Central finite-difference gradient of chart_log_prob.
inline Eigen::VectorXd fd_score(const Eigen::VectorXd& eta, int c, double h = 1e-6) {
  Eigen::VectorXd g(eta.size());
  for (int i = 0; i < eta.size(); ++i) {
    Eigen::VectorXd a = eta, b = eta;
    a[i] += h;
    b[i] -= h;
    g[i] = (chart_log_prob(a, c) - chart_log_prob(b, c)) / (2 * h);
  }
  return g;
}

/// Fisher information as the expected outer product of finite-difference
/// scores: sum_c theta_c s_c s_c^T.
inline Eigen::MatrixXd fd_fisher(const std::vector<double>& theta) {
  const int k = static_cast<int>(theta.size());
  Eigen::VectorXd eta(k - 1);
  for (int i = 0; i < k - 1; ++i) eta[i] = theta[i];
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(k - 1, k - 1);
  for (int c = 0; c < k; ++c) {
    const Eigen::VectorXd s = fd_score(eta, c);
    f += theta[c] * s * s.transpose();
  }
  return f;
}

/// Random interior point of the simplex (entries bounded away from 0).
inline std::vector<double> random_interior(int k, augsearch::Rng& rng, double lo = 0.02) {
  std::vector<double> t(k);
  double s = 0.0;
  for (auto& x : t) s += (x = -std::log(1.0 - rng.uniform()));
  for (auto& x : t) x = lo + (1.0 - k * lo) * x / s;
  return t;
}

/// Separable objective over categorical variables: number of variables that
/// differ from a fixed best category.
struct HammingBandit {
  std::vector<int> best;

  HammingBandit(std::size_t n_vars, int k, augsearch::Rng& rng) : best(n_vars) {
    for (auto& b : best) b = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  }
  double operator()(const augsearch::PolicyAssignment& a) const {
    double f = 0.0;
    for (std::size_t v = 0; v < best.size(); ++v) f += a.levels[v] != best[v] ? 1.0 : 0.0;
    return f;
  }
  double converged_fraction(const augsearch::DistributionState& s, double level = 0.95) const {
    std::size_t ok = 0;
    for (std::size_t v = 0; v < best.size(); ++v) ok += s.theta[v][best[v]] >= level ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(best.size());
  }
};

struct BanditRun {
  augsearch::DistributionState final_state;
  int updates = 0;
  double fraction = 0.0;
  std::vector<double> entropy_trace;  // mean entropy after each update
};

/// Runs the adaptive natural-gradient update on a Hamming bandit until 90% of
/// variables reach 0.95 or `max_updates` is hit.
inline BanditRun run_bandit(const augsearch::SearchSpace& space, std::uint64_t seed, int lambda, int max_updates,
                            bool stop_early = true) {
  augsearch::Rng rng(augsearch::derive_seed(seed, {0xBA4D}));
  HammingBandit f(space.num_variables(), space.prob_grid().n_levels, rng);
  augsearch::UpdateConfig cfg;
  BanditRun run;
  run.final_state = augsearch::init_uniform(space, cfg);
  for (run.updates = 0; run.updates < max_updates;) {
    std::vector<augsearch::PolicySample> samples;
    std::vector<double> losses;
    for (int j = 0; j < lambda; ++j) {
      samples.push_back(augsearch::sample(run.final_state, rng));
      losses.push_back(f(samples.back().assignment));
    }
    run.final_state = augsearch::update_theta(run.final_state, samples, losses, cfg);
    ++run.updates;
    const auto h = augsearch::entropy(run.final_state);
    double m = 0.0;
    for (double x : h) m += x;
    run.entropy_trace.push_back(m / static_cast<double>(h.size()));
    run.fraction = f.converged_fraction(run.final_state);
    if (stop_early && run.fraction >= 0.9) break;
  }
  return run;
}

/// Random image/label batch of `n` items with dims d.
inline augsearch::Batch random_batch(augsearch::Dims d, int n, int n_classes, augsearch::Rng& rng) {
  augsearch::Batch b;
  for (int i = 0; i < n; ++i) {
    augsearch::Volume v(d);
    augsearch::LabelVolume l(d, n_classes);
    for (auto& x : v.voxels) x = static_cast<float>(rng.normal());
    for (auto& x : l.labels) x = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(n_classes)));
    b.images.push_back(std::move(v));
    b.labels.push_back(std::move(l));
  }
  return b;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares the analytic gradient with central differences of the loss at
/// `per_layer` random coordinates of every layer.
inline GradCheck gradient_check(const augsearch::ModelWeights& w, const augsearch::Batch& batch, int per_layer,
                                augsearch::Rng& rng, double h = 1e-5) {
  std::vector<double> grad;
  augsearch::loss_and_grad(w, batch, grad);
  GradCheck out;
  for (const auto& layer : w.layout) {
    for (int i = 0; i < per_layer; ++i) {
      const std::size_t idx = layer.offset + rng.below(layer.size);
      auto plus = w, minus = w;
      plus.params[idx] += h;
      minus.params[idx] -= h;
      const double fd = (augsearch::loss(plus, batch).total - augsearch::loss(minus, batch).total) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(grad[idx]), 1e-7});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(fd - grad[idx]) / denom);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace testutil
