#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

#include "augsearch/errors.hpp"
#include "augsearch/synth_data.hpp"
#include "helpers.hpp"

using namespace augsearch;

namespace {

DatasetSpec small_spec() {
  DatasetSpec s;
  s.n_volumes = 6;
  s.dims = {16, 16, 16};
  s.long_axis = {3.0, 5.0};
  s.short_axis = {1.5, 2.5};
  s.seed = 3;
  return s;
}

}  // namespace

TEST_SUITE("synth_data") {
  TEST_CASE("centred ball has the analytic volume within 5%") {
    for (double r : {4.0, 6.0, 8.0}) {
      DatasetSpec s;
      s.n_volumes = 1;
      s.min_shapes = s.max_shapes = 1;
      s.centered = true;
      s.long_axis = {r, r};
      s.short_axis = {r, r};
      s.noise_std = 0.0;
      s.blur_sigma = 0.0;
      const auto v = generate_volume(s, 0, false);
      const double expected = 4.0 / 3.0 * std::numbers::pi * r * r * r;
      CHECK(std::abs(static_cast<double>(v.label.foreground_count()) - expected) < 0.05 * expected);
    }
  }

  TEST_CASE("generation is deterministic and order independent") {
    const auto s = small_spec();
    const auto a = generate(s), b = generate(s);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].image == b[i].image);
      CHECK(a[i].label == b[i].label);
      const auto single = generate_volume(s, i, false);
      CHECK(single.image == a[i].image);
    }
    auto other = s;
    other.seed = 4;
    CHECK(!(generate(other)[0].image == a[0].image));
  }

  TEST_CASE("labels stay in range and images are finite") {
    auto s = small_spec();
    s.n_classes = 4;
    for (const auto& v : generate(s)) {
      CHECK_NOTHROW(v.label.validate());
      CHECK_NOTHROW(v.image.validate());
      CHECK(v.label.n_classes == 4);
      CHECK(v.image.dims == s.dims);
    }
  }

  TEST_CASE("noise level follows noise_std") {
    auto s = small_spec();
    s.min_shapes = s.max_shapes = 0;
    s.noise_std = 0.5;
    for (double corr : {0.0, 1.0}) {
      s.noise_corr = corr;
      const auto v = generate_volume(s, 0, false);
      double ss = 0.0;
      for (float x : v.image.voxels) ss += static_cast<double>(x) * x;
      CHECK(std::sqrt(ss / static_cast<double>(v.image.voxels.size())) == doctest::Approx(0.5).epsilon(0.05));
    }
  }

  TEST_CASE("rotation shift only changes validation and test volumes") {
    auto s = small_spec();
    s.n_volumes = 12;
    const auto plain = generate(s);
    s.rotation_shift = 0.5;
    const auto shifted = generate(s);
    const auto splits = make_splits(s.seed, s.n_volumes, s.val_fraction, s.test_fraction);
    bool some_differ = false;
    for (std::size_t i = 0; i < plain.size(); ++i) {
      if (splits.of[i] == Split::Train) {
        CHECK(plain[i].image == shifted[i].image);
        CHECK(plain[i].label == shifted[i].label);
      } else {
        some_differ = some_differ || !(plain[i].label == shifted[i].label);
      }
    }
    CHECK(some_differ);
  }

  TEST_CASE("zscore normalisation") {
    Rng rng(1);
    Volume v({6, 5, 4});
    for (auto& x : v.voxels) x = static_cast<float>(3.0 + 2.0 * rng.normal());
    const auto r = zscore_normalize(v);
    CHECK(!r.constant);
    double m = 0.0, ss = 0.0;
    for (float x : r.volume.voxels) m += x;
    m /= static_cast<double>(v.voxels.size());
    for (float x : r.volume.voxels) ss += (x - m) * (x - m);
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::sqrt(ss / static_cast<double>(v.voxels.size())) == doctest::Approx(1.0).epsilon(1e-5));

    const auto c = zscore_normalize(Volume({4, 4, 4}, 2.5f));
    CHECK(c.constant);
    for (float x : c.volume.voxels) CHECK(x == 0.0f);
  }

  TEST_CASE("splits are disjoint, exhaustive and deterministic") {
    const auto a = make_splits(7, 60);
    CHECK(a.train.size() == 40);
    CHECK(a.val.size() == 10);
    CHECK(a.test.size() == 10);
    std::set<std::size_t> all(a.train.begin(), a.train.end());
    all.insert(a.val.begin(), a.val.end());
    all.insert(a.test.begin(), a.test.end());
    CHECK(all.size() == 60);
    for (std::size_t i : a.val) CHECK(a.of[i] == Split::Val);
    const auto b = make_splits(7, 60);
    CHECK(a.train == b.train);
    CHECK(a.test == b.test);
    CHECK(make_splits(8, 60).test != a.test);
    CHECK_THROWS_AS(make_splits(0, 0), std::invalid_argument);
    CHECK(split_from_string(to_string(Split::Test)) == Split::Test);
  }

  TEST_CASE("foreground-biased patches") {
    const auto s = small_spec();
    const auto vols = generate(s);
    Rng rng(2);
    const Dims patch{8, 8, 8};
    for (const auto& v : vols) {
      for (int rep = 0; rep < 5; ++rep) {
        const auto p = sample_patch(v.image, v.label, patch, 0.05, rng);
        CHECK(p.patch.image.dims == patch);
        for (int a = 0; a < 3; ++a) {
          CHECK(p.origin[a] >= 0);
          CHECK(p.origin[a] + patch[a] <= v.image.dims[a]);
        }
        CHECK(p.patch.image.at(3, 2, 1) == v.image.at(p.origin[0] + 3, p.origin[1] + 2, p.origin[2] + 1));
        CHECK(p.patch.label.at(7, 0, 5) == v.label.at(p.origin[0] + 7, p.origin[1], p.origin[2] + 5));
        if (!p.fallback && !p.no_foreground)
          CHECK(static_cast<double>(p.patch.label.foreground_count()) >= 0.05 * static_cast<double>(patch.count()));
        if (v.label.foreground_count() > 0) CHECK(p.patch.label.foreground_count() > 0);
      }
    }
    const Volume empty({10, 10, 10});
    const LabelVolume none({10, 10, 10}, 2);
    const auto p = sample_patch(empty, none, patch, 0.1, rng);
    CHECK(p.no_foreground);
    CHECK_THROWS_AS(sample_patch(empty, none, {11, 8, 8}, 0.1, rng), std::invalid_argument);
  }

  TEST_CASE("volume files round trip and reject corruption") {
    testutil::TempDir dir("vol");
    const auto v = generate(small_spec())[0];
    write_volume(dir / "a", v.image, &v.label);
    const auto back = read_volume(dir / "a");
    CHECK(back.image == v.image);
    REQUIRE(back.label.has_value());
    CHECK(*back.label == v.label);

    write_volume(dir / "nolabel", v.image);
    CHECK(!read_volume(dir / "nolabel").label.has_value());

    CHECK_THROWS_AS(read_volume(dir / "missing"), IoError);

    const std::string raw = (dir.path() / "a" / "image.raw").string();
    std::filesystem::resize_file(raw, std::filesystem::file_size(raw) - 4);
    try {
      read_volume(dir / "a");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("expected") != std::string::npos);
    }

    write_volume(dir / "b", v.image, &v.label);
    {
      std::fstream f((dir.path() / "b" / "label.raw").string(), std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(10);
      f.put(static_cast<char>(9));
    }
    CHECK_THROWS_AS(read_volume(dir / "b"), FormatError);
  }

  TEST_CASE("spec json round trip and validation") {
    auto s = small_spec();
    s.rotation_shift = 0.3;
    s.noise_corr = 0.7;
    const auto back = DatasetSpec::from_json(s.to_json());
    CHECK(back.to_json() == s.to_json());
    CHECK(back.rotation_shift.value() == 0.3);
    CHECK(back.dims == s.dims);
    CHECK_THROWS_AS(DatasetSpec::from_json("{not json"), FormatError);

    auto bad = small_spec();
    bad.dims = {4, 16, 16};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = small_spec();
    bad.n_classes = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = small_spec();
    bad.noise_corr = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }

  TEST_CASE("datasets write and load") {
    testutil::TempDir dir("ds");
    const auto s = small_spec();
    const auto written = write_dataset(dir.str(), s);
    const auto loaded = load_dataset(dir.str());
    REQUIRE(loaded.volumes.size() == 6);
    CHECK(loaded.spec.to_json() == s.to_json());
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(loaded.volumes[i].image == written.volumes[i].image);
      CHECK(loaded.entries[i].split == written.entries[i].split);
    }
    CHECK(loaded.subset(Split::Train).size() + loaded.subset(Split::Val).size() + loaded.subset(Split::Test).size() == 6);
    CHECK_THROWS_AS(load_dataset(dir / "nowhere"), IoError);
  }
}
