#include "augsearch/augment3d.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace augsearch {

bool SampledTransform::is_identity() const {
  return std::none_of(applied.begin(), applied.end(), [](bool b) { return b; });
}

bool SampledTransform::spatial_identity() const {
  return scale == 1.0 && angles[0] == 0.0 && angles[1] == 0.0 && angles[2] == 0.0 && alpha == 0.0;
}

SampledTransform sample_transform(const ConcretePolicy& policy, Rng& rng) {
  SampledTransform t;
  auto draw = [&](Op op) {
    const auto& iv = policy.interval(op);
    return rng.uniform(iv.lb, iv.rb);
  };
  auto fire = [&](ProbGroup g) {
    const bool on = rng.bernoulli(policy.prob(g));
    t.applied[static_cast<std::size_t>(g)] = on;
    return on;
  };
  if (fire(ProbGroup::Scale)) t.scale = draw(Op::Scale);
  if (fire(ProbGroup::Rot)) {
    t.angles[0] = draw(Op::RotationX);
    t.angles[1] = draw(Op::RotationY);
    t.angles[2] = draw(Op::RotationZ);
  }
  if (fire(ProbGroup::ElDef)) {
    t.alpha = draw(Op::Alpha);
    t.sigma = draw(Op::Sigma);
  }
  if (fire(ProbGroup::Gamma)) t.gamma = draw(Op::Gamma);
  return t;
}

bool DisplacementField::is_zero() const {
  for (const auto& c : d)
    for (float v : c)
      if (v != 0.0f) return false;
  return true;
}

namespace {

std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  // Mirror with edge repeat (d c b a | a b c d | d c b a), period 2n.
  const std::ptrdiff_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

/// Dense n x n smoothing operator for one axis: row i holds the folded
/// kernel weights contributed by each source index.
std::vector<double> smoothing_operator(int n, double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(4.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
    const double w = std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma));
    kernel[static_cast<std::size_t>(k + radius)] = w;
    ksum += w;
  }
  for (auto& w : kernel) w /= ksum;
  std::vector<double> op(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  for (std::ptrdiff_t i = 0; i < n; ++i)
    for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
      const auto src = reflect_index(i + k, n);
      op[static_cast<std::size_t>(i * n + src)] += kernel[static_cast<std::size_t>(k + radius)];
    }
  return op;
}

void smooth_axis(std::vector<double>& f, Dims dims, int axis, const std::vector<double>& op) {
  const int n = dims[axis];
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(dims.nx)
                                                       : static_cast<std::size_t>(dims.nx) * static_cast<std::size_t>(dims.ny);
  std::vector<double> line(static_cast<std::size_t>(n));
  const int a = axis == 0 ? 1 : 0;
  const int b = axis == 2 ? 1 : 2;
  for (int j = 0; j < dims[b]; ++j)
    for (int i = 0; i < dims[a]; ++i) {
      int c[3] = {0, 0, 0};
      c[a] = i;
      c[b] = j;
      const std::size_t base = dims.index(c[0], c[1], c[2]);
      for (int k = 0; k < n; ++k) line[static_cast<std::size_t>(k)] = f[base + static_cast<std::size_t>(k) * stride];
      for (int k = 0; k < n; ++k) {
        const double* row = &op[static_cast<std::size_t>(k) * static_cast<std::size_t>(n)];
        double acc = 0.0;
        for (int s = 0; s < n; ++s) acc += row[s] * line[static_cast<std::size_t>(s)];
        f[base + static_cast<std::size_t>(k) * stride] = acc;
      }
    }
}

}  // namespace

void gaussian_smooth(std::vector<double>& field, Dims dims, double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("sigma must be >= 0");
  if (field.size() != dims.count()) throw std::invalid_argument("field size does not match dims");
  if (sigma == 0.0) return;
  for (int axis = 0; axis < 3; ++axis) {
    if (dims[axis] < 2) continue;
    smooth_axis(field, dims, axis, smoothing_operator(dims[axis], sigma));
  }
}

DisplacementField elastic_field(Dims dims, double alpha, double sigma, Rng& rng) {
  if (alpha < 0.0 || sigma < 0.0) throw std::invalid_argument("alpha and sigma must be >= 0");
  DisplacementField out;
  out.dims = dims;
  for (auto& c : out.d) c.assign(dims.count(), 0.0f);
  if (alpha == 0.0) return out;
  std::vector<double> noise(dims.count());
  for (auto& c : out.d) {
    for (auto& v : noise) v = rng.uniform(-1.0, 1.0);
    gaussian_smooth(noise, dims, sigma);
    for (std::size_t i = 0; i < noise.size(); ++i) c[i] = static_cast<float>(alpha * noise[i]);
  }
  return out;
}

double trilinear_sample(const Volume& v, double x, double y, double z, BorderMode border) {
  const double hx = v.dims.nx - 1, hy = v.dims.ny - 1, hz = v.dims.nz - 1;
  if (border == BorderMode::Constant) {
    if (!(x >= 0.0 && y >= 0.0 && z >= 0.0 && x <= hx && y <= hy && z <= hz)) return 0.0;
  } else {
    x = std::clamp(x, 0.0, hx);
    y = std::clamp(y, 0.0, hy);
    z = std::clamp(z, 0.0, hz);
  }
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y)),
            z0 = static_cast<int>(std::floor(z));
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  const int x1 = std::min(x0 + 1, v.dims.nx - 1), y1 = std::min(y0 + 1, v.dims.ny - 1),
            z1 = std::min(z0 + 1, v.dims.nz - 1);
  auto at = [&](int xi, int yi, int zi) { return static_cast<double>(v.at(xi, yi, zi)); };
  const double c00 = at(x0, y0, z0) * (1 - fx) + at(x1, y0, z0) * fx;
  const double c10 = at(x0, y1, z0) * (1 - fx) + at(x1, y1, z0) * fx;
  const double c01 = at(x0, y0, z1) * (1 - fx) + at(x1, y0, z1) * fx;
  const double c11 = at(x0, y1, z1) * (1 - fx) + at(x1, y1, z1) * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

std::uint8_t nearest_label(const LabelVolume& v, double x, double y, double z, BorderMode border) {
  int xi = static_cast<int>(std::floor(x + 0.5));
  int yi = static_cast<int>(std::floor(y + 0.5));
  int zi = static_cast<int>(std::floor(z + 0.5));
  if (border == BorderMode::Constant) {
    if (!v.dims.contains(xi, yi, zi)) return 0;
  } else {
    xi = std::clamp(xi, 0, v.dims.nx - 1);
    yi = std::clamp(yi, 0, v.dims.ny - 1);
    zi = std::clamp(zi, 0, v.dims.nz - 1);
  }
  return v.at(xi, yi, zi);
}

Volume gamma_correct(const Volume& v, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be > 0");
  if (v.voxels.empty()) return v;
  const auto [mn_it, mx_it] = std::minmax_element(v.voxels.begin(), v.voxels.end());
  const double m = *mn_it, range = static_cast<double>(*mx_it) - m;
  if (range == 0.0) return v;
  constexpr double kEps = 1e-7;
  Volume out = v;
  for (auto& x : out.voxels) {
    const double n = (static_cast<double>(x) - m) / (range + kEps);
    x = static_cast<float>(std::pow(n, gamma) * range + m);
  }
  return out;
}

std::array<double, 9> forward_matrix(double scale, const std::array<double, 3>& angles) {
  const double cx = std::cos(angles[0]), sx = std::sin(angles[0]);
  const double cy = std::cos(angles[1]), sy = std::sin(angles[1]);
  const double cz = std::cos(angles[2]), sz = std::sin(angles[2]);
  const std::array<double, 9> rx{1, 0, 0, 0, cx, -sx, 0, sx, cx};
  const std::array<double, 9> ry{cy, 0, sy, 0, 1, 0, -sy, 0, cy};
  const std::array<double, 9> rz{cz, -sz, 0, sz, cz, 0, 0, 0, 1};
  auto mul = [](const std::array<double, 9>& a, const std::array<double, 9>& b) {
    std::array<double, 9> c{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
    return c;
  };
  auto m = mul(rz, mul(ry, rx));
  for (auto& e : m) e *= scale;
  return m;
}

LabeledVolume apply(const Volume& image, const LabelVolume& label, const SampledTransform& t, Rng& rng,
                    const AugmentOptions& opts) {
  if (!(image.dims == label.dims)) throw std::invalid_argument("image and label dims differ");
  if (!(t.scale > 0.0)) throw std::invalid_argument("scale must be > 0");
  const Dims dims = image.dims;
  LabeledVolume out{image, label};

  if (!t.spatial_identity()) {
    // Inverse of Rz*Ry*Rx*s is (1/s) * Rx^T * Ry^T * Rz^T = transpose(fwd) / s^2.
    const auto fwd = forward_matrix(t.scale, t.angles);
    std::array<double, 9> inv{};
    const double s2 = t.scale * t.scale;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) inv[i * 3 + j] = fwd[j * 3 + i] / s2;
    DisplacementField field;
    const bool elastic = t.alpha > 0.0;
    if (elastic) field = elastic_field(dims, t.alpha, t.sigma, rng);
    const double c[3] = {(dims.nx - 1) / 2.0, (dims.ny - 1) / 2.0, (dims.nz - 1) / 2.0};
    for (int z = 0; z < dims.nz; ++z)
      for (int y = 0; y < dims.ny; ++y)
        for (int x = 0; x < dims.nx; ++x) {
          const double p[3] = {x - c[0], y - c[1], z - c[2]};
          double q[3];
          for (int i = 0; i < 3; ++i)
            q[i] = inv[i * 3] * p[0] + inv[i * 3 + 1] * p[1] + inv[i * 3 + 2] * p[2] + c[i];
          const std::size_t idx = dims.index(x, y, z);
          if (elastic)
            for (int i = 0; i < 3; ++i) q[i] += field.d[static_cast<std::size_t>(i)][idx];
          out.image.voxels[idx] = static_cast<float>(trilinear_sample(image, q[0], q[1], q[2], opts.border));
          out.label.labels[idx] = nearest_label(label, q[0], q[1], q[2], opts.border);
        }
  }
  if (t.applied_group(ProbGroup::Gamma)) out.image = gamma_correct(out.image, t.gamma);
  return out;
}

LabeledVolume apply_policy(const Volume& image, const LabelVolume& label, const ConcretePolicy& policy,
                           Rng& rng, const AugmentOptions& opts) {
  const auto t = sample_transform(policy, rng);
  return apply(image, label, t, rng, opts);
}

}  // namespace augsearch
