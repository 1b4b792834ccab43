#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "augsearch/bilevel_engine.hpp"
#include "augsearch/errors.hpp"
#include "augsearch/synth_data.hpp"
#include "helpers.hpp"

using namespace augsearch;

namespace {

struct Fixture {
  SearchSpace space = build_default_space();
  std::vector<LabeledVolume> train, val, test;
  EngineConfig cfg;

  Fixture() {
    DatasetSpec s;
    s.n_volumes = 8;
    s.dims = {16, 16, 16};
    s.long_axis = {3.0, 6.0};
    s.short_axis = {1.5, 3.0};
    s.val_fraction = 0.25;
    s.test_fraction = 0.25;
    s.seed = 11;
    const auto vols = generate(s);
    const auto sp = make_splits(s.seed, s.n_volumes, s.val_fraction, s.test_fraction);
    for (auto i : sp.train) train.push_back(vols[i]);
    for (auto i : sp.val) val.push_back(vols[i]);
    for (auto i : sp.test) test.push_back(vols[i]);
    cfg.epochs = 2;
    cfg.inner_steps = 2;
    cfg.patch = {8, 8, 8};
    cfg.seed = 5;
  }

  /// Distribution with all mass on one assignment.
  DistributionState point_mass(const PolicyAssignment& a) const {
    auto st = init_uniform(space, cfg.theta_update);
    for (std::size_t v = 0; v < st.theta.size(); ++v) {
      std::fill(st.theta[v].begin(), st.theta[v].end(), 0.0);
      st.theta[v][a.levels[v]] = 1.0;
    }
    return st;
  }
};

struct CountingObserver : EngineObserver {
  int train = 0, weights = 0, val = 0, theta = 0, steps = 0, epochs = 0;
  void on_train_losses(StepKey, std::span<const double>) override { ++train; }
  void on_weights_updated(StepKey, const ModelWeights&) override { ++weights; }
  void on_val_losses(StepKey, std::span<const double>) override { ++val; }
  void on_theta_updated(StepKey, std::span<const double>, const DistributionState&,
                        const DistributionState&) override {
    ++theta;
  }
  void on_step_end(const StepRecord&) override { ++steps; }
  void on_epoch_end(int, const ModelWeights&, const DistributionState&) override { ++epochs; }
};

}  // namespace

TEST_SUITE("bilevel_engine") {
  TEST_CASE("weight update averages the per-policy gradients") {
    Fixture f;
    const TinySegNet net;
    const auto w = net.init(1);
    const auto theta = init_uniform(f.space, f.cfg.theta_update);
    for (int n_w : {1, 3}) {
      f.cfg.n_w = n_w;
      const StepKey key{1, 0};
      const auto r = weight_update(net, w, theta, f.space, f.train, f.cfg, key);
      REQUIRE(r.train_losses.size() == static_cast<std::size_t>(n_w));
      std::vector<double> mean(w.params.size(), 0.0);
      for (int i = 0; i < n_w; ++i) {
        const auto idx = static_cast<std::uint64_t>(i);
        Rng prng(stream_seed(f.cfg.seed, key, StreamRole::WeightPolicy, {idx}));
        const auto ps = choose_policy(f.cfg, f.space, theta, prng);
        CHECK(ps.assignment == r.policies[i].assignment);
        const auto batch = make_training_batch(f.train, f.space.decode(ps.assignment), f.cfg,
                                               stream_seed(f.cfg.seed, key, StreamRole::WeightBatch, {idx}),
                                               stream_seed(f.cfg.seed, key, StreamRole::WeightAug, {idx}));
        std::vector<double> g;
        CHECK(net.loss_and_grad(w, batch, g).total == r.train_losses[i]);
        for (std::size_t p = 0; p < g.size(); ++p) mean[p] += g[p] / n_w;
      }
      for (std::size_t p = 0; p < mean.size(); ++p) CHECK(std::abs(mean[p] - r.mean_gradient[p]) <= 1e-12);
      CHECK(r.weights == adam_step(w, r.mean_gradient, f.cfg.lr_w, f.cfg.weight_decay));
    }
  }

  TEST_CASE("distinct policies get distinct minibatches") {
    Fixture f;
    f.cfg.n_w = 2;
    f.cfg.mode = SearchMode::NoAug;
    const TinySegNet net;
    const auto r = weight_update(net, net.init(0), init_uniform(f.space), f.space, f.train, f.cfg, {0, 0});
    CHECK(r.train_losses[0] != r.train_losses[1]);
  }

  TEST_CASE("lookahead leaves the weights untouched and ties identical policies") {
    Fixture f;
    f.cfg.n_theta = 3;
    f.cfg.lookahead_depth = 2;
    f.cfg.theta_update.theta_min = 0.0;
    const TinySegNet net;
    const auto w = net.init(2);
    const auto before = w;
    const auto theta = f.point_mass(f.space.encode(ConcretePolicy::identity()));
    const auto r = lookahead_losses(net, w, theta, f.space, f.train, f.val, f.cfg, {0, 1});
    CHECK(w == before);
    REQUIRE(r.val_losses.size() == 3);
    CHECK(r.failures == 0);
    CHECK(r.val_losses[0] == r.val_losses[1]);
    CHECK(r.val_losses[1] == r.val_losses[2]);
  }

  TEST_CASE("a destructive elastic policy raises the lookahead validation loss") {
    Fixture f;
    f.cfg.n_theta = 2;
    f.cfg.lookahead_depth = 3;
    f.cfg.lr_w = 1e-2;
    f.cfg.theta_update.theta_min = 0.0;
    const TinySegNet net;
    const auto identity = f.space.encode(ConcretePolicy::identity());
    auto elastic = identity;
    elastic.levels[f.space.prob_variable(ProbGroup::ElDef)] = 10;
    elastic.levels[f.space.lb_variable(Op::Alpha)] = 10;
    elastic.levels[f.space.rb_variable(Op::Alpha)] = 10;
    elastic.levels[f.space.lb_variable(Op::Sigma)] = 0;
    elastic.levels[f.space.rb_variable(Op::Sigma)] = 0;
    std::vector<double> diffs;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      f.cfg.seed = seed;
      const auto w = net.init(seed);
      const auto a = lookahead_losses(net, w, f.point_mass(identity), f.space, f.train, f.val, f.cfg, {0, 0});
      const auto b = lookahead_losses(net, w, f.point_mass(elastic), f.space, f.train, f.val, f.cfg, {0, 0});
      diffs.push_back(b.val_losses[0] - a.val_losses[0]);
    }
    std::nth_element(diffs.begin(), diffs.begin() + 10, diffs.end());
    CHECK(diffs[10] > 0.0);
  }

  TEST_CASE("a point mass on the identity policy reproduces the no-augmentation run") {
    Fixture f;
    f.cfg.theta_update.theta_min = 0.0;
    f.cfg.initial_theta = f.point_mass(f.space.encode(ConcretePolicy::identity()));
    const auto search = run_search(f.cfg, f.space, f.train, f.val, f.test);
    f.cfg.mode = SearchMode::NoAug;
    const auto noaug = run_search(f.cfg, f.space, f.train, f.val, f.test);
    CHECK(search.weights == noaug.weights);
    REQUIRE(search.log.records.size() == noaug.log.records.size());
    for (std::size_t i = 0; i < search.log.records.size(); ++i)
      CHECK(search.log.records[i].train_losses == noaug.log.records[i].train_losses);
    CHECK(search.theta.theta == f.cfg.initial_theta->theta);
    CHECK(search.test.dice_mean == noaug.test.dice_mean);
  }

  TEST_CASE("run_search logs every step and is deterministic") {
    Fixture f;
    f.cfg.epochs = 3;
    CountingObserver obs;
    const auto a = run_search(f.cfg, f.space, f.train, f.val, f.test, &obs);
    REQUIRE(a.log.records.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
      const auto& r = a.log.records[i];
      CHECK(r.step == static_cast<std::int64_t>(i));
      CHECK(r.epoch == static_cast<int>(i) / 2);
      CHECK(r.t == static_cast<int>(i) % 2);
      CHECK(r.train_losses.size() == 2);
      CHECK(r.val_losses.size() == 2);
      CHECK(r.theta_updated);
      CHECK(r.entropies.size() == 18);
    }
    CHECK(obs.train == 6);
    CHECK(obs.weights == 6);
    CHECK(obs.val == 6);
    CHECK(obs.theta == 6);
    CHECK(obs.steps == 6);
    CHECK(obs.epochs == 3);
    CHECK(a.theta.step_count == 6);
    CHECK(a.test.per_volume.size() == f.test.size());

    const auto b = run_search(f.cfg, f.space, f.train, f.val, f.test);
    CHECK(a.weights == b.weights);
    CHECK(a.log.to_csv() == b.log.to_csv());

    f.cfg.threads = 3;
    f.cfg.n_w = 3;
    f.cfg.n_theta = 4;
    const auto t3 = run_search(f.cfg, f.space, f.train, f.val, f.test);
    f.cfg.threads = 1;
    const auto t1 = run_search(f.cfg, f.space, f.train, f.val, f.test);
    CHECK(t1.weights == t3.weights);
    CHECK(t1.log.to_csv() == t3.log.to_csv());
  }

  TEST_CASE("baseline modes keep theta fixed and skip lookaheads") {
    Fixture f;
    for (auto mode : {SearchMode::NoAug, SearchMode::DefaultPolicy}) {
      f.cfg.mode = mode;
      CountingObserver obs;
      const auto r = run_search(f.cfg, f.space, f.train, f.val, f.test, &obs);
      CHECK(obs.val == 0);
      CHECK(obs.theta == 0);
      for (const auto& rec : r.log.records) {
        CHECK(!rec.theta_updated);
        CHECK(rec.val_losses.empty());
      }
      CHECK(r.theta.theta == init_uniform(f.space).theta);
    }
    CHECK(search_mode_from_string(to_string(SearchMode::DefaultPolicy)) == SearchMode::DefaultPolicy);
    CHECK_THROWS_AS(search_mode_from_string("greedy"), std::invalid_argument);
  }

  TEST_CASE("invalid configurations are rejected") {
    Fixture f;
    auto bad = [&](auto mutate) {
      auto c = f.cfg;
      mutate(c);
      CHECK_THROWS_AS(run_search(c, f.space, f.train, f.val, f.test), std::invalid_argument);
    };
    bad([](EngineConfig& c) { c.n_w = 0; });
    bad([](EngineConfig& c) { c.n_theta = 1; });
    bad([](EngineConfig& c) { c.epochs = 0; });
    bad([](EngineConfig& c) { c.lr_w = -1.0; });
    bad([](EngineConfig& c) { c.threads = 0; });
    bad([](EngineConfig& c) { c.patch = {32, 8, 8}; });
    CHECK_THROWS_AS(run_search(f.cfg, f.space, {}, f.val, f.test), std::invalid_argument);
  }

  TEST_CASE("search log csv round trips and reports bad lines") {
    Fixture f;
    f.cfg.epochs = 1;
    const auto r = run_search(f.cfg, f.space, f.train, f.val, f.test);
    const auto csv = r.log.to_csv();
    CHECK(csv.rfind(SearchLog::kCsvHeader, 0) == 0);
    const auto back = SearchLog::from_csv(csv);
    CHECK(back.to_csv() == csv);

    auto lines = csv;
    const auto second = lines.find('\n', lines.find('\n') + 1);
    lines.insert(second + 1, "0,1,2,oops\n");
    try {
      SearchLog::from_csv(lines);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
    CHECK_THROWS_AS(SearchLog::from_csv("wrong,header\n"), FormatError);
  }

  TEST_CASE("expected probabilities") {
    Fixture f;
    const auto u = expected_probabilities(f.space, init_uniform(f.space));
    for (double p : u) CHECK(p == doctest::Approx(0.5));
    auto a = f.space.encode(ConcretePolicy::identity());
    a.levels[f.space.prob_variable(ProbGroup::Rot)] = 7;
    const auto e = expected_probabilities(f.space, f.point_mass(a));
    CHECK(e[static_cast<std::size_t>(ProbGroup::Rot)] == doctest::Approx(0.7));
    CHECK(e[static_cast<std::size_t>(ProbGroup::Scale)] == 0.0);
  }

  TEST_CASE("stream seeds are distinct across roles, steps and indices") {
    std::set<std::uint64_t> seen;
    for (int e = 0; e < 3; ++e)
      for (int t = 0; t < 3; ++t)
        for (auto role : {StreamRole::WeightPolicy, StreamRole::WeightBatch, StreamRole::LookaheadAug})
          for (std::uint64_t i = 0; i < 3; ++i) seen.insert(stream_seed(9, {e, t}, role, {i}));
    CHECK(seen.size() == 81);
    CHECK(stream_seed(9, {1, 1}, StreamRole::Validation) == stream_seed(9, {1, 1}, StreamRole::Validation));
  }
}
