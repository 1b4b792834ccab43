#include "augsearch/bilevel_engine.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "augsearch/errors.hpp"
#include "augsearch/synth_data.hpp"

namespace augsearch {

namespace {

constexpr std::uint64_t kInitRole = 1;

std::uint64_t stream(const EngineConfig& cfg, StepKey key, StreamRole role,
                     std::initializer_list<std::uint64_t> rest = {}) {
  return stream_seed(cfg.seed, key, role, rest);
}

/// Runs fn(i) for i in [0, n). Results must be written to per-index slots so
/// the outcome does not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(threads));
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::uint64_t stream_seed(std::uint64_t master, StepKey key, StreamRole role,
                          std::initializer_list<std::uint64_t> index) {
  const std::uint64_t base = derive_seed(master, {static_cast<std::uint64_t>(key.epoch),
                                                  static_cast<std::uint64_t>(key.t), static_cast<std::uint64_t>(role)});
  return index.size() == 0 ? base : derive_seed(base, index);
}

std::uint64_t model_init_seed(std::uint64_t master) { return derive_seed(master, {kInitRole}); }

const char* to_string(SearchMode m) {
  switch (m) {
    case SearchMode::Search: return "search";
    case SearchMode::NoAug: return "noaug";
    case SearchMode::DefaultPolicy: return "default_policy";
  }
  return "?";
}

SearchMode search_mode_from_string(const std::string& s) {
  if (s == "search") return SearchMode::Search;
  if (s == "noaug") return SearchMode::NoAug;
  if (s == "default_policy") return SearchMode::DefaultPolicy;
  throw std::invalid_argument("unknown mode '" + s + "' (expected search, noaug or default_policy)");
}

void EngineConfig::validate() const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
  };
  need(epochs >= 1, "epochs must be >= 1");
  need(inner_steps >= 1, "inner_steps (T) must be >= 1");
  need(n_w >= 1, "n_w must be >= 1");
  need(n_theta >= 2, "n_theta must be >= 2");
  need(lr_w > 0.0, "lr_w must be > 0");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(val_batch >= 1, "val_batch must be >= 1");
  need(patch.nx >= 1 && patch.ny >= 1 && patch.nz >= 1, "patch dims must be >= 1");
  need(fg_threshold >= 0.0 && fg_threshold <= 1.0, "fg_threshold must be in [0, 1]");
  need(lookahead_depth >= 1, "lookahead_depth must be >= 1");
  need(channels >= 1, "channels must be >= 1");
  need(threads >= 1, "threads must be >= 1");
  theta_update.validate();
}

PolicySample choose_policy(const EngineConfig& cfg, const SearchSpace& space, const DistributionState& theta,
                           Rng& rng) {
  switch (cfg.mode) {
    case SearchMode::Search: return sample(theta, rng);
    case SearchMode::NoAug: return {space.encode(ConcretePolicy::identity()), 0.0};
    case SearchMode::DefaultPolicy: return {default_policy_assignment(space), 0.0};
  }
  throw std::logic_error("bad mode");
}

namespace {

ConcretePolicy policy_for(const EngineConfig& cfg, const SearchSpace& space, const PolicySample& s) {
  if (cfg.mode == SearchMode::NoAug) return ConcretePolicy::identity();
  return space.decode(s.assignment);
}

}  // namespace

Batch make_training_batch(std::span<const LabeledVolume> data, const ConcretePolicy& policy, const EngineConfig& cfg,
                          std::uint64_t batch_seed, std::uint64_t aug_seed) {
  if (data.empty()) throw std::invalid_argument("training data is empty");
  Rng brng(batch_seed);
  Batch batch;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const auto& src = data[brng.below(data.size())];
    Rng arng(derive_seed(aug_seed, {static_cast<std::uint64_t>(b)}));
    const auto aug = apply_policy(src.image, src.label, policy, arng, cfg.augment);
    auto p = sample_patch(aug.image, aug.label, cfg.patch, cfg.fg_threshold, brng);
    batch.images.push_back(std::move(p.patch.image));
    batch.labels.push_back(std::move(p.patch.label));
  }
  return batch;
}

std::vector<Batch> make_validation_batches(std::span<const LabeledVolume> val, const EngineConfig& cfg,
                                           std::uint64_t seed) {
  if (val.empty()) throw std::invalid_argument("validation data is empty");
  Batch batch;
  if (cfg.full_val) {
    // Whole volumes; group by size so each batch is uniform.
    std::vector<Batch> out;
    for (const auto& v : val) {
      auto it = std::find_if(out.begin(), out.end(), [&](const Batch& b) { return b.patch_dims() == v.image.dims; });
      if (it == out.end()) {
        out.emplace_back();
        it = std::prev(out.end());
      }
      it->images.push_back(v.image);
      it->labels.push_back(v.label);
    }
    return out;
  }
  Rng rng(seed);
  for (int b = 0; b < cfg.val_batch; ++b) {
    const auto& src = val[rng.below(val.size())];
    auto p = sample_patch(src.image, src.label, cfg.patch, cfg.fg_threshold, rng);
    batch.images.push_back(std::move(p.patch.image));
    batch.labels.push_back(std::move(p.patch.label));
  }
  return {std::move(batch)};
}

WeightUpdateResult weight_update(const SegmentationLearner& learner, const ModelWeights& w,
                                 const DistributionState& theta, const SearchSpace& space,
                                 std::span<const LabeledVolume> train, const EngineConfig& cfg, StepKey key) {
  const auto n = static_cast<std::size_t>(cfg.n_w);
  WeightUpdateResult r;
  r.policies.resize(n);
  r.train_losses.resize(n);
  std::vector<std::vector<double>> grads(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    Rng prng(stream(cfg, key, StreamRole::WeightPolicy, {i}));
    r.policies[i] = choose_policy(cfg, space, theta, prng);
    const auto policy = policy_for(cfg, space, r.policies[i]);
    const auto batch = make_training_batch(train, policy, cfg, stream(cfg, key, StreamRole::WeightBatch, {i}), stream(cfg, key, StreamRole::WeightAug, {i}));
    r.train_losses[i] = learner.loss_and_grad(w, batch, grads[i]).total;
  });
  r.mean_gradient.assign(w.params.size(), 0.0);
  for (const auto& g : grads)
    for (std::size_t p = 0; p < g.size(); ++p) r.mean_gradient[p] += g[p];
  for (auto& g : r.mean_gradient) g /= static_cast<double>(n);
  r.weights = w;
  adam_update(r.weights, r.mean_gradient, AdamConfig{cfg.lr_w, cfg.weight_decay});
  return r;
}

namespace {

double validation_loss(const SegmentationLearner& learner, const ModelWeights& w, const std::vector<Batch>& val) {
  // Mean over batches of the batch loss.
  double total = 0.0;
  for (const auto& b : val) {
    std::vector<std::vector<double>> probs;
    for (const auto& img : b.images) probs.push_back(learner.predict_proba(w, img));
    const auto lv = loss_from_probabilities(probs, b.labels, learner.n_classes());
    if (!std::isfinite(lv.total)) throw NumericError("non-finite validation loss");
    total += lv.total;
  }
  return total / static_cast<double>(val.size());
}

}  // namespace

LookaheadResult lookahead_losses(const SegmentationLearner& learner, const ModelWeights& w,
                                 const DistributionState& theta, const SearchSpace& space,
                                 std::span<const LabeledVolume> train, std::span<const LabeledVolume> val,
                                 const EngineConfig& cfg, StepKey key) {
  const auto n = static_cast<std::size_t>(cfg.n_theta);
  const auto val_batches = make_validation_batches(val, cfg, stream(cfg, key, StreamRole::Validation));
  std::vector<PolicySample> samples(n);
  std::vector<double> losses(n, 0.0);
  std::vector<char> ok(n, 0);
  parallel_for(n, cfg.threads, [&](std::size_t j) {
    Rng prng(stream(cfg, key, StreamRole::LookaheadPolicy, {j}));
    samples[j] = choose_policy(cfg, space, theta, prng);
    const auto policy = policy_for(cfg, space, samples[j]);
    ModelWeights work = snapshot(w);
    try {
      std::vector<double> grad;
      for (int d = 0; d < cfg.lookahead_depth; ++d) {
        // The minibatch stream is shared by all lookaheads of a step so
        // policies are compared on the same volumes.
        const auto batch = make_training_batch(train, policy, cfg, stream(cfg, key, StreamRole::LookaheadBatch, {static_cast<std::uint64_t>(d)}),
                                               stream(cfg, key, StreamRole::LookaheadAug, {j, static_cast<std::uint64_t>(d)}));
        learner.loss_and_grad(work, batch, grad);
        adam_update(work, grad, AdamConfig{cfg.lr_w, cfg.weight_decay});
      }
      losses[j] = validation_loss(learner, work, val_batches);
      ok[j] = 1;
    } catch (const NumericError&) {
      ok[j] = 0;
    }
  });
  LookaheadResult r;
  for (std::size_t j = 0; j < n; ++j) {
    if (ok[j]) {
      r.samples.push_back(std::move(samples[j]));
      r.val_losses.push_back(losses[j]);
    } else {
      ++r.failures;
    }
  }
  return r;
}

TestMetrics evaluate(const SegmentationLearner& learner, const ModelWeights& w, std::span<const LabeledVolume> test,
                     Dims patch) {
  TestMetrics m;
  if (test.empty()) return m;
  const auto k = static_cast<std::size_t>(learner.n_classes() - 1);
  m.dice_per_class.assign(k, 0.0);
  for (const auto& v : test) {
    const auto pred = sliding_window_predict(learner, w, v.image, patch);
    auto d = hard_dice(pred, v.label);
    d.resize(k, 1.0);
    for (std::size_t c = 0; c < k; ++c) m.dice_per_class[c] += d[c];
    m.per_volume.push_back(std::move(d));
  }
  for (auto& d : m.dice_per_class) d /= static_cast<double>(test.size());
  m.dice_mean = mean_of(m.dice_per_class);
  return m;
}

std::array<double, kNumGroups> expected_probabilities(const SearchSpace& space, const DistributionState& theta) {
  std::array<double, kNumGroups> out{};
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    const auto& th = theta.theta.at(space.prob_variable(static_cast<ProbGroup>(g)));
    for (std::size_t k = 0; k < th.size(); ++k) out[g] += th[k] * space.prob_grid().value(static_cast<int>(k));
  }
  return out;
}

SearchResult run_search(const EngineConfig& cfg, const SearchSpace& space, std::span<const LabeledVolume> train,
                        std::span<const LabeledVolume> val, std::span<const LabeledVolume> test,
                        EngineObserver* observer) {
  if (train.empty()) throw std::invalid_argument("training split is empty");
  return run_search(TinySegNet(train.front().label.n_classes, cfg.channels), cfg, space, train, val, test, observer);
}

SearchResult run_search(const SegmentationLearner& learner, const EngineConfig& cfg, const SearchSpace& space,
                        std::span<const LabeledVolume> train, std::span<const LabeledVolume> val,
                        std::span<const LabeledVolume> test, EngineObserver* observer) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("training split is empty");
  if (cfg.mode == SearchMode::Search && val.empty()) throw std::invalid_argument("validation split is empty");
  if (test.empty()) throw std::invalid_argument("test split is empty");
  for (const auto* split : {&train, &val, &test})
    for (const auto& v : *split) {
      if (!(v.image.dims == v.label.dims)) throw std::invalid_argument("image/label dims differ");
      if (v.image.dims.nx < cfg.patch.nx || v.image.dims.ny < cfg.patch.ny || v.image.dims.nz < cfg.patch.nz)
        throw std::invalid_argument("patch larger than a volume");
      if (v.label.n_classes > learner.n_classes()) throw std::invalid_argument("dataset has more classes than the model");
    }

  SearchResult res;
  res.theta = cfg.initial_theta ? *cfg.initial_theta : init_uniform(space, cfg.theta_update);
  if (res.theta.theta.size() != space.num_variables())
    throw std::invalid_argument("initial theta does not match the search space");
  res.weights = learner.init(model_init_seed(cfg.seed));

  EngineConfig run_cfg = cfg;
  PlateauScheduler plateau(cfg.lr_w);
  const auto t0 = std::chrono::steady_clock::now();
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_train = 0.0;
    for (int t = 0; t < cfg.inner_steps; ++t, ++step) {
      const StepKey key{epoch, t};
      StepRecord rec;
      rec.epoch = epoch;
      rec.t = t;
      rec.step = step;

      auto wu = weight_update(learner, res.weights, res.theta, space, train, run_cfg, key);
      res.weights = std::move(wu.weights);
      rec.train_losses = wu.train_losses;
      epoch_train += mean_of(rec.train_losses);
      if (observer) {
        observer->on_train_losses(key, rec.train_losses);
        observer->on_weights_updated(key, res.weights);
      }

      rec.eps = step_size(res.theta, cfg.theta_update);
      if (cfg.mode == SearchMode::Search) {
        auto la = lookahead_losses(learner, res.weights, res.theta, space, train, val, run_cfg, key);
        rec.val_losses = la.val_losses;
        if (observer) observer->on_val_losses(key, rec.val_losses);
        if (la.samples.size() >= 2) {
          auto next = update_theta(res.theta, la.samples, la.val_losses, cfg.theta_update);
          if (observer) observer->on_theta_updated(key, la.val_losses, res.theta, next);
          res.theta = std::move(next);
          rec.theta_updated = true;
        }
      }
      rec.entropies = entropy(res.theta);
      rec.entropy_mean = mean_of(rec.entropies);
      rec.expected_prob = expected_probabilities(space, res.theta);
      rec.delta = res.theta.delta;
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.log.records.push_back(std::move(rec));
      if (observer) observer->on_step_end(res.log.records.back());
    }
    if (cfg.lr_plateau) run_cfg.lr_w = plateau.observe(epoch_train / cfg.inner_steps);
    if (observer) observer->on_epoch_end(epoch, res.weights, res.theta);
  }
  res.test = evaluate(learner, res.weights, test, cfg.patch);
  return res;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ';';
    s += fmt(v[i]);
  }
  return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string SearchLog::csv_row(const StepRecord& r) {
  std::string out = std::to_string(r.epoch) + ',' + std::to_string(r.t) + ',' + std::to_string(r.step) + ',' +
                    fmt(mean_of(r.train_losses)) + ',' + join(r.train_losses) + ',' + fmt(mean_of(r.val_losses)) +
                    ',' + join(r.val_losses) + ',' + (r.theta_updated ? "1" : "0") + ',' + fmt(r.entropy_mean);
  for (double p : r.expected_prob) out += ',' + fmt(p);
  out += ',' + fmt(r.delta) + ',' + fmt(r.eps) + '\n';
  return out;
}

std::string SearchLog::to_csv() const {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : records) out += csv_row(r);
  return out;
}

void SearchLog::write_csv(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path, 0, "cannot open for writing");
  const auto text = to_csv();
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw IoError(path, 0, "write failed");
}

SearchLog SearchLog::from_csv(const std::string& text) {
  SearchLog log;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw FormatError("search log line " + std::to_string(lineno) + ": " + why);
  };
  auto num = [&](const std::string& f, bool allow_empty) {
    if (f.empty()) {
      if (allow_empty) return std::nan("");
      fail("empty numeric field");
    }
    char* end = nullptr;
    const double v = std::strtod(f.c_str(), &end);
    if (end != f.c_str() + f.size()) fail("not a number: '" + f + "'");
    return v;
  };
  auto list = [&](const std::string& f) {
    std::vector<double> v;
    if (f.empty()) return v;
    for (const auto& s : split(f, ';')) v.push_back(num(s, false));
    return v;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != kCsvHeader) fail("unexpected header");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 15) fail("expected 15 fields, found " + std::to_string(f.size()));
    StepRecord r;
    r.epoch = static_cast<int>(num(f[0], false));
    r.t = static_cast<int>(num(f[1], false));
    r.step = static_cast<std::int64_t>(num(f[2], false));
    r.train_losses = list(f[4]);
    r.val_losses = list(f[6]);
    if (f[7] != "0" && f[7] != "1") fail("theta_updated must be 0 or 1");
    r.theta_updated = f[7] == "1";
    r.entropy_mean = num(f[8], false);
    for (std::size_t g = 0; g < kNumGroups; ++g) r.expected_prob[g] = num(f[9 + g], false);
    r.delta = num(f[13], false);
    r.eps = num(f[14], false);
    log.records.push_back(std::move(r));
  }
  if (lineno == 0) throw FormatError("search log is empty");
  return log;
}

}  // namespace augsearch
