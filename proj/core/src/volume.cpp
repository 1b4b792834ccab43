#include "augsearch/volume.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace augsearch {

void Volume::validate() const {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw std::invalid_argument("volume dims must be positive");
  if (voxels.size() != dims.count()) throw std::invalid_argument("voxel count does not match dims");
  for (float v : voxels)
    if (!std::isfinite(v)) throw std::invalid_argument("volume contains non-finite voxels");
}

void LabelVolume::validate() const {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw std::invalid_argument("label dims must be positive");
  if (labels.size() != dims.count()) throw std::invalid_argument("label count does not match dims");
  if (n_classes < 2 || n_classes > 256) throw std::invalid_argument("n_classes must be in [2, 256]");
  for (auto l : labels)
    if (l >= n_classes) throw std::invalid_argument("label outside [0, n_classes)");
}

std::size_t LabelVolume::foreground_count() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
}

}  // namespace augsearch
