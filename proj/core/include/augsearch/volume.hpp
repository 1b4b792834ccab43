#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace augsearch {

/// Voxel grid extents. Storage order is x-fastest: index = x + nx*(y + ny*z).
struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  int operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }

  friend bool operator==(const Dims&, const Dims&) = default;
};

/// Scalar image on a voxel grid.
struct Volume {
  Dims dims;
  std::vector<float> voxels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  Volume() = default;
  explicit Volume(Dims d, float fill = 0.0f) : dims(d), voxels(d.count(), fill) {}

  float& at(int x, int y, int z) { return voxels[dims.index(x, y, z)]; }
  float at(int x, int y, int z) const { return voxels[dims.index(x, y, z)]; }

  /// Throws std::invalid_argument on size mismatch or non-finite voxels.
  void validate() const;

  friend bool operator==(const Volume&, const Volume&) = default;
};

/// Integer label map paired with a Volume.
struct LabelVolume {
  Dims dims;
  std::vector<std::uint8_t> labels;
  int n_classes = 2;

  LabelVolume() = default;
  LabelVolume(Dims d, int classes, std::uint8_t fill = 0)
      : dims(d), labels(d.count(), fill), n_classes(classes) {}

  std::uint8_t& at(int x, int y, int z) { return labels[dims.index(x, y, z)]; }
  std::uint8_t at(int x, int y, int z) const { return labels[dims.index(x, y, z)]; }

  /// Throws std::invalid_argument on size mismatch or out-of-range labels.
  void validate() const;

  std::size_t foreground_count() const;

  friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

/// Image/label pair with shared geometry.
struct LabeledVolume {
  Volume image;
  LabelVolume label;
};

}  // namespace augsearch
