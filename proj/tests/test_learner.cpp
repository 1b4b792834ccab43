#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "augsearch/errors.hpp"
#include "augsearch/learner.hpp"
#include "helpers.hpp"

using namespace augsearch;

namespace {

/// Image is a noisy copy of the label so the task is learnable.
Batch learnable_batch(Dims d, int n, Rng& rng) {
  Batch b;
  for (int i = 0; i < n; ++i) {
    Volume v(d);
    LabelVolume l(d, 2);
    const int cx = 2 + static_cast<int>(rng.below(d.nx - 4)), cy = 2 + static_cast<int>(rng.below(d.ny - 4));
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const bool fg = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= 4;
          l.at(x, y, z) = fg;
          v.at(x, y, z) = static_cast<float>((fg ? 1.0 : 0.0) + 0.1 * rng.normal());
        }
    b.images.push_back(std::move(v));
    b.labels.push_back(std::move(l));
  }
  return b;
}

}  // namespace

TEST_SUITE("learner") {
  TEST_CASE("parameter count follows the layer shapes") {
    for (auto [c, k] : {std::pair{8, 2}, std::pair{4, 3}, std::pair{1, 2}}) {
      const std::size_t expected = (27 * 1 * c + c) + (27 * c * c + c) + (c * k + k);
      CHECK(tiny_segnet_param_count(c, k) == expected);
      const auto w = init_model(k, c, 0);
      CHECK(w.params.size() == expected);
      std::size_t sum = 0;
      for (const auto& l : w.layout) {
        std::size_t prod = 1;
        for (int s : l.shape) prod *= static_cast<std::size_t>(s);
        CHECK(prod == l.size);
        CHECK(l.offset == sum);
        sum += l.size;
      }
      CHECK(sum == expected);
    }
    CHECK(tiny_segnet_param_count(8, 2) == 1978);
  }

  TEST_CASE("init is deterministic per seed with zero biases") {
    const auto a = init_model(2, 8, 5), b = init_model(2, 8, 5), c = init_model(2, 8, 6);
    CHECK(a == b);
    CHECK(a.params != c.params);
    for (const auto& l : a.layout)
      if (l.name.find("bias") != std::string::npos)
        for (std::size_t i = 0; i < l.size; ++i) CHECK(a.params[l.offset + i] == 0.0);
    for (double p : a.params) CHECK(std::isfinite(p));
    CHECK(a.adam.m.size() == a.params.size());
    CHECK(a.adam.t == 0);
  }

  TEST_CASE("zero input gives uniform class probabilities") {
    const auto w = init_model(3, 8, 1);
    const Volume zero({6, 5, 4});
    const auto p = predict_proba(w, zero);
    REQUIRE(p.size() == 3 * zero.dims.count());
    for (double x : p) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-12));
  }

  TEST_CASE("softmax outputs sum to one") {
    Rng rng(2);
    const auto w = init_model(3, 8, 2);
    const auto b = testutil::random_batch({7, 6, 5}, 1, 3, rng);
    const auto p = predict_proba(w, b.images[0]);
    const std::size_t n = b.images[0].dims.count();
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(p[i] + p[n + i] + p[2 * n + i] - 1.0) < 1e-6);
  }

  TEST_CASE("perfect prediction has near-zero loss and parts add up") {
    Rng rng(3);
    const auto b = testutil::random_batch({5, 5, 5}, 2, 3, rng);
    std::vector<std::vector<double>> probs;
    for (const auto& l : b.labels) {
      const std::size_t n = l.dims.count();
      std::vector<double> p(3 * n, 0.0);
      for (std::size_t i = 0; i < n; ++i) p[l.labels[i] * n + i] = 1.0;
      probs.push_back(std::move(p));
    }
    const auto lv = loss_from_probabilities(probs, b.labels, 3);
    CHECK(lv.dice_part < 1e-6);
    CHECK(lv.ce_part < 1e-6);
    CHECK(std::abs(lv.total - (lv.dice_part + lv.ce_part)) < 1e-9);

    const auto w = init_model(3, 8, 3);
    const auto l2 = loss(w, b);
    CHECK(std::abs(l2.total - (l2.dice_part + l2.ce_part)) < 1e-9);
    CHECK(l2.ce_part == doctest::Approx(std::log(3.0)).epsilon(0.2));
  }

  TEST_CASE("analytic gradient matches finite differences") {
    Rng rng(4);
    auto w = init_model(2, 8, 4);
    for (std::size_t i = 0; i < w.params.size(); ++i)
      if (w.params[i] == 0.0) w.params[i] = 0.05 * rng.normal();  // exercise bias gradients
    const auto b = testutil::random_batch({6, 6, 6}, 2, 2, rng);
    const auto r = testutil::gradient_check(w, b, 5, rng);
    CHECK(r.checked == 30);
    CHECK(r.max_rel_error < 1e-4);
  }

  TEST_CASE("duplicating the batch leaves loss and gradient unchanged") {
    Rng rng(5);
    const auto w = init_model(2, 8, 5);
    const auto b = testutil::random_batch({6, 6, 6}, 2, 2, rng);
    Batch bb = b;
    for (std::size_t i = 0; i < b.images.size(); ++i) {
      bb.images.push_back(b.images[i]);
      bb.labels.push_back(b.labels[i]);
    }
    std::vector<double> g1, g2;
    const auto l1 = loss_and_grad(w, b, g1);
    const auto l2 = loss_and_grad(w, bb, g2);
    // Only the Dice smoothing term is not scale free.
    CHECK(l2.total == doctest::Approx(l1.total).epsilon(1e-7));
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(g1[i] - g2[i]) <= 1e-7 * (1e-3 + std::abs(g1[i])));
  }

  TEST_CASE("loss rejects invalid batches and non-finite input") {
    const auto w = init_model(2, 8, 0);
    std::vector<double> g;
    CHECK_THROWS_AS(loss_and_grad(w, Batch{}, g), std::invalid_argument);
    Rng rng(6);
    auto b = testutil::random_batch({4, 4, 4}, 1, 2, rng);
    b.images[0].voxels[3] = std::nanf("");
    CHECK_THROWS(loss_and_grad(w, b, g));
    auto ragged = testutil::random_batch({4, 4, 4}, 2, 2, rng);
    ragged.images[1] = Volume({5, 4, 4});
    ragged.labels[1] = LabelVolume({5, 4, 4}, 2);
    CHECK_THROWS_AS(loss_and_grad(w, ragged, g), std::invalid_argument);
  }

  TEST_CASE("adam steps") {
    auto w = init_model(2, 8, 7);
    const std::vector<double> zero(w.params.size(), 0.0);
    const auto same = adam_step(w, zero, 1e-3, 0.0);
    CHECK(same.params == w.params);
    CHECK(same.adam.t == 1);

    Rng rng(7);
    std::vector<double> g(w.params.size());
    for (auto& x : g) x = rng.normal();
    const double lr = 1e-3;
    const auto one = adam_step(w, g, lr, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double step = one.params[i] - w.params[i];
      // First step from zero moments: m_hat = g, v_hat = g^2.
      CHECK(step == doctest::Approx(-lr * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-6));
    }

    auto a = w, b = w;
    for (int s = 0; s < 5; ++s) {
      a = adam_step(a, g, lr, 3e-5);
      b = adam_step(b, g, lr, 3e-5);
    }
    CHECK(a == b);
    CHECK_THROWS_AS(adam_step(w, std::vector<double>(3, 0.0), lr, 0.0), std::invalid_argument);
  }

  TEST_CASE("snapshot and restore") {
    Rng rng(8);
    const auto b = testutil::random_batch({6, 6, 6}, 1, 2, rng);
    auto w = init_model(2, 8, 8);
    std::vector<double> g;
    loss_and_grad(w, b, g);
    adam_update(w, g, {});
    const auto snap = snapshot(w);
    auto mutated = w;
    loss_and_grad(mutated, b, g);
    adam_update(mutated, g, {});
    CHECK(!(mutated == snap));
    const auto r1 = restore(mutated, snap);
    CHECK(r1 == snap);
    CHECK(restore(r1, snap) == r1);

    // Dropping the moments changes the next step.
    auto no_moments = snap;
    std::fill(no_moments.adam.m.begin(), no_moments.adam.m.end(), 0.0);
    std::fill(no_moments.adam.v.begin(), no_moments.adam.v.end(), 0.0);
    loss_and_grad(snap, b, g);
    CHECK(adam_step(snap, g, 3e-4, 0.0).params != adam_step(no_moments, g, 3e-4, 0.0).params);

    CHECK_THROWS_AS(restore(w, init_model(3, 8, 0)), std::invalid_argument);
  }

  TEST_CASE("loss falls below 20% of its start when overfitting one batch") {
    Rng rng(9);
    const auto b = learnable_batch({8, 8, 8}, 2, rng);
    auto w = init_model(2, 8, 9);
    const double start = loss(w, b).total;
    std::vector<double> g;
    for (int s = 0; s < 50; ++s) {
      loss_and_grad(w, b, g);
      adam_update(w, g, {1e-2, 0.0});
    }
    CHECK(loss(w, b).total < 0.2 * start);
  }

  TEST_CASE("window starts cover every voxel at least twice") {
    for (int n : {8, 13, 16, 17, 31, 32, 40})
      for (int p : {4, 5, 8, 16}) {
        if (p > n) continue;
        const auto starts = window_starts(n, p);
        std::vector<int> cover(n, 0);
        for (int s : starts)
          for (int i = std::max(0, s); i < std::min(n, s + p); ++i) ++cover[i];
        for (int c : cover) CHECK(c >= (n > p ? 2 : 1));
        if (n == p) CHECK(starts == std::vector<int>{0});
      }
    CHECK_THROWS_AS(window_starts(4, 8), std::invalid_argument);
  }

  TEST_CASE("sliding window equals plain argmax when the patch is the image") {
    Rng rng(10);
    const auto w = init_model(3, 8, 10);
    const auto b = testutil::random_batch({6, 6, 6}, 1, 3, rng);
    const auto pred = sliding_window_predict(w, b.images[0], {6, 6, 6}, 3);
    const auto p = predict_proba(w, b.images[0]);
    const std::size_t n = b.images[0].dims.count();
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      for (int k = 1; k < 3; ++k)
        if (p[k * n + i] > p[best * n + i]) best = k;
      CHECK(pred.labels[i] == best);
    }
    CHECK_THROWS_AS(sliding_window_predict(w, b.images[0], {8, 6, 6}, 3), std::invalid_argument);
  }

  TEST_CASE("constant model predicts a constant label map") {
    auto w = init_model(3, 8, 11);
    std::fill(w.params.begin(), w.params.end(), 0.0);
    for (const auto& l : w.layout)
      if (l.name == "conv3.bias") w.params[l.offset + 2] = 1.0;
    Rng rng(11);
    const auto b = testutil::random_batch({20, 17, 12}, 1, 3, rng);
    const auto pred = sliding_window_predict(w, b.images[0], {8, 8, 8}, 3);
    for (auto l : pred.labels) CHECK(l == 2);
  }

  TEST_CASE("hard dice") {
    LabelVolume a({4, 4, 2}, 2), b({4, 4, 2}, 2);
    CHECK(hard_dice(a, b) == std::vector<double>{1.0});
    for (int x = 0; x < 4; ++x) a.at(x, 0, 0) = a.at(x, 1, 0) = 1;
    CHECK(hard_dice(a, a) == std::vector<double>{1.0});
    for (int x = 0; x < 4; ++x) b.at(x, 2, 0) = b.at(x, 3, 0) = 1;
    CHECK(hard_dice(a, b) == std::vector<double>{0.0});
    LabelVolume c({4, 4, 2}, 2);
    for (int x = 0; x < 4; ++x) c.at(x, 1, 0) = c.at(x, 2, 0) = 1;
    CHECK(hard_dice(a, c)[0] == doctest::Approx(0.5));
    CHECK_THROWS_AS(hard_dice(a, LabelVolume({4, 4, 3}, 2)), std::invalid_argument);
  }

  TEST_CASE("plateau scheduler reduces the rate after patience epochs") {
    PlateauScheduler s(1e-3, 0.2, 3);
    CHECK(s.observe(1.0) == 1e-3);
    CHECK(s.observe(1.0) == 1e-3);
    CHECK(s.observe(1.0) == 1e-3);
    CHECK(s.observe(1.0) == 1e-3);
    CHECK(s.observe(1.0) == doctest::Approx(2e-4));
    CHECK(s.observe(0.5) == doctest::Approx(2e-4));
  }

  TEST_CASE("checkpoint round trip and truncation") {
    testutil::TempDir dir("ckpt");
    auto w = init_model(2, 8, 12);
    w.adam.t = 7;
    write_checkpoint(dir / "w.bin", w);
    const auto back = read_checkpoint(dir / "w.bin");
    CHECK(back.layout == w.layout);
    CHECK(back.channels == 8);
    CHECK(back.n_classes == 2);
    REQUIRE(back.params.size() == w.params.size());
    for (std::size_t i = 0; i < w.params.size(); ++i)
      CHECK(back.params[i] == static_cast<double>(static_cast<float>(w.params[i])));

    const auto full = std::filesystem::file_size(dir / "w.bin");
    std::filesystem::resize_file(dir / "w.bin", full - 6);
    try {
      read_checkpoint(dir / "w.bin");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("bytes") != std::string::npos);
    }
    CHECK_THROWS_AS(read_checkpoint(dir / "missing.bin"), IoError);
    {
      std::ofstream os(dir / "bad.bin", std::ios::binary);
      os << "NOPE";
    }
    CHECK_THROWS_AS(read_checkpoint(dir / "bad.bin"), FormatError);
  }
}
