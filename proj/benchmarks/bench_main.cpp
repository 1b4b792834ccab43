#include <benchmark/benchmark.h>

#include <vector>

#include "augsearch/augment3d.hpp"
#include "augsearch/learner.hpp"
#include "augsearch/policy_distribution.hpp"
#include "augsearch/search_space.hpp"
#include "augsearch/synth_data.hpp"

using namespace augsearch;

namespace {

Batch make_batch(int edge, int n) {
  DatasetSpec spec;
  spec.n_volumes = n;
  spec.dims = {std::max(edge, 8), std::max(edge, 8), std::max(edge, 8)};
  Batch b;
  for (auto& v : generate(spec)) {
    b.images.push_back(std::move(v.image));
    b.labels.push_back(std::move(v.label));
  }
  return b;
}

void BM_LossAndGrad(benchmark::State& state) {
  const auto batch = make_batch(static_cast<int>(state.range(0)), 2);
  const auto w = init_model(2, 8, 0);
  std::vector<double> grad;
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_grad(w, batch, grad));
  state.SetItemsProcessed(state.iterations() * 2);
}
BENCHMARK(BM_LossAndGrad)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_PredictProba(benchmark::State& state) {
  const auto batch = make_batch(static_cast<int>(state.range(0)), 1);
  const auto w = init_model(2, 8, 0);
  for (auto _ : state) benchmark::DoNotOptimize(predict_proba(w, batch.images[0]));
}
BENCHMARK(BM_PredictProba)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_ApplyPolicy(benchmark::State& state) {
  DatasetSpec spec;
  spec.n_volumes = 1;
  const auto vol = generate(spec).front();
  const auto space = build_default_space();
  const auto policy = space.decode(default_policy_assignment(space));
  Rng rng(1);
  for (auto _ : state) benchmark::DoNotOptimize(apply_policy(vol.image, vol.label, policy, rng));
}
BENCHMARK(BM_ApplyPolicy)->Unit(benchmark::kMillisecond);

void BM_UpdateTheta(benchmark::State& state) {
  const auto space = build_default_space();
  auto theta = init_uniform(space);
  Rng rng(2);
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<PolicySample> samples(n);
  std::vector<double> losses(n);
  for (auto _ : state) {
    state.PauseTiming();
    for (std::size_t j = 0; j < n; ++j) {
      samples[j] = sample(theta, rng);
      losses[j] = rng.uniform();
    }
    state.ResumeTiming();
    theta = update_theta(theta, samples, losses);
  }
}
BENCHMARK(BM_UpdateTheta)->Arg(2)->Arg(8);

}  // namespace

BENCHMARK_MAIN();
