#pragma once

#include <array>
#include <vector>

#include "augsearch/rng.hpp"
#include "augsearch/search_space.hpp"
#include "augsearch/volume.hpp"

namespace augsearch {

/// Concrete magnitudes drawn from a policy for one application.
struct SampledTransform {
  double scale = 1.0;
  std::array<double, 3> angles{0.0, 0.0, 0.0};  // radians about x, y, z
  double alpha = 0.0;                           // elastic magnitude (voxels)
  double sigma = 0.0;                           // elastic smoothness (voxels)
  double gamma = 1.0;
  std::array<bool, kNumGroups> applied{};       // indexed by ProbGroup

  bool applied_group(ProbGroup g) const { return applied[static_cast<std::size_t>(g)]; }
  /// True when no group fired.
  bool is_identity() const;
  /// True when the spatial map is the identity (no resampling needed).
  bool spatial_identity() const;
};

enum class BorderMode { Constant, Nearest, Reflect };

struct AugmentOptions {
  BorderMode border = BorderMode::Constant;  // resampling border (Constant or Nearest)
};

/// Per-group Bernoulli(p_g); magnitudes uniform in [lb, rb] when the group
/// fires, identity magnitudes otherwise. Draw order is fixed: for each group
/// one Bernoulli, then that group's magnitudes.
SampledTransform sample_transform(const ConcretePolicy& policy, Rng& rng);

/// Three displacement components, one value per voxel (x-fastest).
struct DisplacementField {
  Dims dims;
  std::array<std::vector<float>, 3> d;

  bool is_zero() const;
};

/// Uniform(-1,1) noise per component, smoothed by a truncated (4 sigma)
/// renormalized separable Gaussian with reflecting borders, scaled by alpha.
/// Throws std::invalid_argument for negative parameters.
DisplacementField elastic_field(Dims dims, double alpha, double sigma, Rng& rng);

/// Separable Gaussian smoothing of a scalar field laid out as `dims`
/// (reflecting borders, kernel truncated at 4 sigma). sigma == 0 is a no-op.
void gaussian_smooth(std::vector<double>& field, Dims dims, double sigma);

/// Trilinear interpolation. Coordinates outside [0, n-1] on any axis give 0
/// under BorderMode::Constant and are clamped under BorderMode::Nearest.
double trilinear_sample(const Volume& v, double x, double y, double z,
                        BorderMode border = BorderMode::Constant);

/// Label of the rounded coordinate; 0 outside (Constant) or clamped (Nearest).
std::uint8_t nearest_label(const LabelVolume& v, double x, double y, double z,
                           BorderMode border = BorderMode::Constant);

/// Power-law remap after min/max normalization; min and max are preserved.
/// Throws std::invalid_argument for gamma <= 0.
Volume gamma_correct(const Volume& v, double gamma);

/// Applies one sampled transform: a single resampling pass through
/// q = A^{-1}(p - c) + c + D(p) with A = Rz*Ry*Rx*scale, image trilinear,
/// label nearest-neighbour, then gamma correction on the image. `rng` is
/// only consumed for the elastic field.
LabeledVolume apply(const Volume& image, const LabelVolume& label, const SampledTransform& t, Rng& rng,
                    const AugmentOptions& opts = {});

/// sample_transform followed by apply, from a single stream.
LabeledVolume apply_policy(const Volume& image, const LabelVolume& label, const ConcretePolicy& policy,
                           Rng& rng, const AugmentOptions& opts = {});

/// Rz*Ry*Rx*scale as a row-major 3x3 matrix.
std::array<double, 9> forward_matrix(double scale, const std::array<double, 3>& angles);

}  // namespace augsearch
