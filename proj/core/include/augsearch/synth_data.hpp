#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "augsearch/rng.hpp"
#include "augsearch/volume.hpp"

namespace augsearch {

/// Recipe for a synthetic segmentation dataset of ellipsoids in noise.
struct DatasetSpec {
  int n_volumes = 60;
  Dims dims{32, 32, 32};
  int n_classes = 2;
  int min_shapes = 2;
  int max_shapes = 4;
  /// Semi-axis ranges in voxels. The long axis points along z before any
  /// rotation is applied.
  std::array<double, 2> long_axis{6.0, 10.0};
  std::array<double, 2> short_axis{1.5, 3.0};
  bool centered = false;  // place every shape at the volume centre
  double contrast = 1.0;  // class k intensity ~ k * contrast
  double noise_std = 0.35;
  /// Gaussian correlation length of the noise in voxels; 0 gives white noise.
  double noise_corr = 1.0;
  double blur_sigma = 0.6;
  /// When set, validation/test volumes are whole-layout rotations by angles
  /// uniform in [-shift, shift] per axis while training volumes stay upright.
  std::optional<double> rotation_shift;
  double val_fraction = 1.0 / 6.0;
  double test_fraction = 1.0 / 6.0;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument for dims < 8, n_classes < 2, etc.
  void validate() const;
  std::string to_json() const;
  static DatasetSpec from_json(const std::string& text);
};

enum class Split { Train, Val, Test };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct SplitAssignment {
  std::vector<Split> of;  // per volume
  std::vector<std::size_t> train, val, test;
};

/// Disjoint, exhaustive split; a pure function of its arguments.
SplitAssignment make_splits(std::uint64_t seed, int n_volumes, double val_fraction = 1.0 / 6.0,
                            double test_fraction = 1.0 / 6.0);

/// Deterministic per seed. Volume i uses its own stream, so generation order
/// does not matter.
std::vector<LabeledVolume> generate(const DatasetSpec& spec);

/// One volume; `rotated` selects the shifted distribution.
LabeledVolume generate_volume(const DatasetSpec& spec, std::size_t index, bool rotated);

struct ZScoreResult {
  Volume volume;
  bool constant = false;  // input had zero variance; output is all zeros
};

/// Mean 0, population standard deviation 1.
ZScoreResult zscore_normalize(const Volume& v);

struct PatchResult {
  LabeledVolume patch;
  std::array<int, 3> origin{0, 0, 0};
  bool fallback = false;       // threshold not reached within max_tries
  bool no_foreground = false;  // volume has no foreground; uniform crop
};

/// Foreground-biased crop: rejection-samples origins until the foreground
/// fraction reaches fg_threshold, then falls back to a window centred on a
/// random foreground voxel. Throws std::invalid_argument when the patch does
/// not fit.
PatchResult sample_patch(const Volume& image, const LabelVolume& label, Dims patch, double fg_threshold, Rng& rng,
                         int max_tries = 50);

/// Directory layout: meta.json + image.raw (f32 LE, x-fastest) + optional
/// label.raw (u8).
void write_volume(const std::string& dir, const Volume& image, const LabelVolume* label = nullptr);

struct VolumeFile {
  Volume image;
  std::optional<LabelVolume> label;
};

/// Throws IoError (missing/unreadable files) or FormatError (size mismatch).
VolumeFile read_volume(const std::string& dir);

struct DatasetEntry {
  std::string dir;  // relative to the dataset root
  Split split = Split::Train;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<DatasetEntry> entries;
  std::vector<LabeledVolume> volumes;

  std::vector<LabeledVolume> subset(Split s) const;
};

/// Generates the dataset and writes it with manifest.json under root.
Dataset write_dataset(const std::string& root, const DatasetSpec& spec);

/// Reads manifest.json and every listed volume.
Dataset load_dataset(const std::string& root);

}  // namespace augsearch
