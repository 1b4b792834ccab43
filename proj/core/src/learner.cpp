#include "augsearch/learner.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "augsearch/errors.hpp"
#include "augsearch/rng.hpp"
#include "json.hpp"

namespace augsearch {

void Batch::validate() const {
  if (images.empty()) throw std::invalid_argument("batch is empty");
  if (images.size() != labels.size()) throw std::invalid_argument("batch images and labels differ in count");
  const Dims d = images.front().dims;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!(images[i].dims == d) || !(labels[i].dims == d))
      throw std::invalid_argument("batch patches must share one size");
    if (images[i].voxels.size() != d.count() || labels[i].labels.size() != d.count())
      throw std::invalid_argument("batch patch storage does not match dims");
  }
}

std::size_t tiny_segnet_param_count(int channels, int n_classes) {
  const auto c = static_cast<std::size_t>(channels);
  const auto k = static_cast<std::size_t>(n_classes);
  return 27 * c + c + 27 * c * c + c + c * k + k;
}

namespace {

struct Net {
  int c = 0;
  int k = 0;
  const double* w1 = nullptr;
  const double* b1 = nullptr;
  const double* w2 = nullptr;
  const double* b2 = nullptr;
  const double* w3 = nullptr;
  const double* b3 = nullptr;
};

struct NetGrad {
  double* w1;
  double* b1;
  double* w2;
  double* b2;
  double* w3;
  double* b3;
};

void check_model(const ModelWeights& w) {
  if (w.channels < 1 || w.n_classes < 2) throw std::invalid_argument("model has invalid channels/n_classes");
  if (w.params.size() != tiny_segnet_param_count(w.channels, w.n_classes))
    throw std::invalid_argument("parameter vector does not match the network layout");
}

Net bind(const ModelWeights& w) {
  check_model(w);
  Net n;
  n.c = w.channels;
  n.k = w.n_classes;
  const double* p = w.params.data();
  const auto c = static_cast<std::size_t>(n.c), k = static_cast<std::size_t>(n.k);
  n.w1 = p;
  p += 27 * c;
  n.b1 = p;
  p += c;
  n.w2 = p;
  p += 27 * c * c;
  n.b2 = p;
  p += c;
  n.w3 = p;
  p += c * k;
  n.b3 = p;
  return n;
}

NetGrad bind_grad(std::vector<double>& g, int channels, int n_classes) {
  const auto c = static_cast<std::size_t>(channels), k = static_cast<std::size_t>(n_classes);
  double* p = g.data();
  NetGrad out{};
  out.w1 = p;
  p += 27 * c;
  out.b1 = p;
  p += c;
  out.w2 = p;
  p += 27 * c * c;
  out.b2 = p;
  p += c;
  out.w3 = p;
  p += c * k;
  out.b3 = p;
  return out;
}

struct Span1 {
  int lo;
  int hi;
};

inline Span1 valid_range(int n, int d) { return {std::max(0, -d), std::min(n, n - d)}; }

/// out[co] = b[co] + sum_ci sum_k w[co,ci,k] * in[ci] shifted by k (zero padding).
void conv3_forward(const double* in, int cin, double* out, int cout, const double* w, const double* b, Dims d) {
  const std::size_t n = d.count();
  for (int co = 0; co < cout; ++co) {
    double* o = out + static_cast<std::size_t>(co) * n;
    std::fill(o, o + n, b[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const double* src = in + static_cast<std::size_t>(ci) * n;
      const double* wk = w + (static_cast<std::size_t>(co) * static_cast<std::size_t>(cin) + static_cast<std::size_t>(ci)) * 27;
      for (int kz = 0; kz < 3; ++kz)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const double wv = wk[kz * 9 + ky * 3 + kx];
            const int dx = kx - 1, dy = ky - 1, dz = kz - 1;
            const auto zr = valid_range(d.nz, dz), yr = valid_range(d.ny, dy), xr = valid_range(d.nx, dx);
            const int len = xr.hi - xr.lo;
            for (int z = zr.lo; z < zr.hi; ++z)
              for (int y = yr.lo; y < yr.hi; ++y) {
                double* dst = o + d.index(xr.lo, y, z);
                const double* s = src + d.index(xr.lo + dx, y + dy, z + dz);
                for (int x = 0; x < len; ++x) dst[x] += wv * s[x];
              }
          }
    }
  }
}

/// Accumulates weight/bias gradients and (optionally) the input gradient.
void conv3_backward(const double* in, int cin, const double* dout, int cout, const double* w, Dims d,
                    double* dw, double* db, double* din) {
  const std::size_t n = d.count();
  for (int co = 0; co < cout; ++co) {
    const double* go = dout + static_cast<std::size_t>(co) * n;
    double bsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) bsum += go[i];
    db[co] += bsum;
    for (int ci = 0; ci < cin; ++ci) {
      const double* src = in + static_cast<std::size_t>(ci) * n;
      double* gsrc = din ? din + static_cast<std::size_t>(ci) * n : nullptr;
      const std::size_t base = (static_cast<std::size_t>(co) * static_cast<std::size_t>(cin) + static_cast<std::size_t>(ci)) * 27;
      for (int kz = 0; kz < 3; ++kz)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int kidx = kz * 9 + ky * 3 + kx;
            const double wv = w[base + static_cast<std::size_t>(kidx)];
            const int dx = kx - 1, dy = ky - 1, dz = kz - 1;
            const auto zr = valid_range(d.nz, dz), yr = valid_range(d.ny, dy), xr = valid_range(d.nx, dx);
            const int len = xr.hi - xr.lo;
            double acc = 0.0;
            for (int z = zr.lo; z < zr.hi; ++z)
              for (int y = yr.lo; y < yr.hi; ++y) {
                const double* g = go + d.index(xr.lo, y, z);
                const std::size_t soff = d.index(xr.lo + dx, y + dy, z + dz);
                const double* s = src + soff;
                for (int x = 0; x < len; ++x) acc += g[x] * s[x];
                if (gsrc) {
                  double* gs = gsrc + soff;
                  for (int x = 0; x < len; ++x) gs[x] += wv * g[x];
                }
              }
            dw[base + static_cast<std::size_t>(kidx)] += acc;
          }
    }
  }
}

struct Forward {
  Dims dims;
  std::vector<double> x;       // 1 x n
  std::vector<double> h1;      // C x n, post-ReLU
  std::vector<double> h2;      // C x n, post-ReLU
  std::vector<double> logits;  // K x n
  std::vector<double> probs;   // K x n
  std::vector<double> logp;    // K x n
};

Forward forward(const Net& net, const Volume& image) {
  Forward f;
  f.dims = image.dims;
  const std::size_t n = image.dims.count();
  const auto c = static_cast<std::size_t>(net.c), k = static_cast<std::size_t>(net.k);
  f.x.assign(image.voxels.begin(), image.voxels.end());
  f.h1.resize(c * n);
  conv3_forward(f.x.data(), 1, f.h1.data(), net.c, net.w1, net.b1, f.dims);
  for (auto& v : f.h1) v = v > 0.0 ? v : 0.0;
  f.h2.resize(c * n);
  conv3_forward(f.h1.data(), net.c, f.h2.data(), net.c, net.w2, net.b2, f.dims);
  for (auto& v : f.h2) v = v > 0.0 ? v : 0.0;
  f.logits.resize(k * n);
  for (std::size_t ko = 0; ko < k; ++ko) {
    double* o = f.logits.data() + ko * n;
    std::fill(o, o + n, net.b3[ko]);
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double wv = net.w3[ko * c + ci];
      const double* h = f.h2.data() + ci * n;
      for (std::size_t i = 0; i < n; ++i) o[i] += wv * h[i];
    }
  }
  f.probs.resize(k * n);
  f.logp.resize(k * n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = f.logits[i];
    for (std::size_t ko = 1; ko < k; ++ko) mx = std::max(mx, f.logits[ko * n + i]);
    double s = 0.0;
    for (std::size_t ko = 0; ko < k; ++ko) s += std::exp(f.logits[ko * n + i] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t ko = 0; ko < k; ++ko) {
      f.logp[ko * n + i] = f.logits[ko * n + i] - lse;
      f.probs[ko * n + i] = std::exp(f.logp[ko * n + i]);
    }
  }
  return f;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

}  // namespace

ModelWeights init_model(int n_classes, int channels, std::uint64_t seed) {
  if (n_classes < 2) throw std::invalid_argument("n_classes must be >= 2");
  if (channels < 1) throw std::invalid_argument("channels must be >= 1");
  ModelWeights w;
  w.channels = channels;
  w.n_classes = n_classes;
  const int c = channels, k = n_classes;
  std::size_t off = 0;
  auto add = [&](std::string name, std::vector<int> shape) {
    std::size_t size = 1;
    for (int s : shape) size *= static_cast<std::size_t>(s);
    w.layout.push_back({std::move(name), std::move(shape), off, size});
    off += size;
  };
  add("conv1.weight", {c, 1, 3, 3, 3});
  add("conv1.bias", {c});
  add("conv2.weight", {c, c, 3, 3, 3});
  add("conv2.bias", {c});
  add("conv3.weight", {k, c, 1, 1, 1});
  add("conv3.bias", {k});
  w.params.assign(off, 0.0);
  Rng rng(derive_seed(seed, {0x5E61}));
  for (const auto& layer : w.layout) {
    if (layer.shape.size() == 1) continue;  // biases stay zero
    const double fan_in = static_cast<double>(layer.size) / layer.shape[0];
    const double bound = std::sqrt(6.0 / fan_in);
    for (std::size_t i = 0; i < layer.size; ++i) w.params[layer.offset + i] = rng.uniform(-bound, bound);
  }
  w.adam.m.assign(off, 0.0);
  w.adam.v.assign(off, 0.0);
  w.adam.t = 0;
  return w;
}

std::vector<double> predict_proba(const ModelWeights& w, const Volume& image) {
  const auto net = bind(w);
  return forward(net, image).probs;
}

LossValue loss_from_probabilities(std::span<const std::vector<double>> probs, std::span<const LabelVolume> labels,
                                  int n_classes) {
  if (probs.size() != labels.size() || probs.empty()) throw std::invalid_argument("probs/labels mismatch");
  const auto k = static_cast<std::size_t>(n_classes);
  std::vector<double> inter(k, 0.0), psum(k, 0.0), gsum(k, 0.0);
  double ce = 0.0;
  std::size_t total = 0;
  for (std::size_t b = 0; b < probs.size(); ++b) {
    const std::size_t n = labels[b].labels.size();
    if (probs[b].size() != k * n) throw std::invalid_argument("probability block has the wrong size");
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = static_cast<std::size_t>(labels[b].labels[i]);
      ce -= std::log(std::max(probs[b][y * n + i], 1e-300));
      for (std::size_t c = 1; c < k; ++c) {
        const double p = probs[b][c * n + i];
        psum[c] += p;
        if (y == c) {
          inter[c] += p;
          gsum[c] += 1.0;
        }
      }
    }
    total += n;
  }
  double dice = 0.0;
  for (std::size_t c = 1; c < k; ++c) dice += 2.0 * inter[c] / (psum[c] + gsum[c] + kDiceSmooth);
  LossValue lv;
  lv.dice_part = 1.0 - dice / static_cast<double>(k - 1);
  lv.ce_part = ce / static_cast<double>(total);
  lv.total = lv.dice_part + lv.ce_part;
  return lv;
}

LossValue loss_and_grad(const ModelWeights& w, const Batch& batch, std::vector<double>& grad) {
  batch.validate();
  const auto net = bind(w);
  const auto c = static_cast<std::size_t>(net.c), k = static_cast<std::size_t>(net.k);
  for (const auto& l : batch.labels)
    for (auto y : l.labels)
      if (y >= k) throw std::invalid_argument("label exceeds the model's class count");

  std::vector<Forward> fw;
  fw.reserve(batch.images.size());
  for (const auto& img : batch.images) fw.push_back(forward(net, img));

  // Batch-aggregated Dice sums over foreground classes.
  std::vector<double> inter(k, 0.0), psum(k, 0.0), gsum(k, 0.0);
  double ce = 0.0;
  std::size_t total = 0;
  for (std::size_t b = 0; b < fw.size(); ++b) {
    const auto& f = fw[b];
    const auto& lab = batch.labels[b].labels;
    const std::size_t n = lab.size();
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = static_cast<std::size_t>(lab[i]);
      ce -= f.logp[y * n + i];
      for (std::size_t cl = 1; cl < k; ++cl) {
        const double p = f.probs[cl * n + i];
        psum[cl] += p;
        if (y == cl) {
          inter[cl] += p;
          gsum[cl] += 1.0;
        }
      }
    }
    total += n;
  }
  const double nf = static_cast<double>(k - 1);
  const double inv_total = 1.0 / static_cast<double>(total);
  double dice = 0.0;
  std::vector<double> denom(k, 0.0);
  for (std::size_t cl = 1; cl < k; ++cl) {
    denom[cl] = psum[cl] + gsum[cl] + kDiceSmooth;
    dice += 2.0 * inter[cl] / denom[cl];
  }
  LossValue lv;
  lv.dice_part = 1.0 - dice / nf;
  lv.ce_part = ce * inv_total;
  lv.total = lv.dice_part + lv.ce_part;
  check_finite(lv.total, "loss");

  grad.assign(w.params.size(), 0.0);
  auto g = bind_grad(grad, net.c, net.k);
  std::vector<double> dlogits, dh2, dh1, a(k);
  for (std::size_t b = 0; b < fw.size(); ++b) {
    const auto& f = fw[b];
    const auto& lab = batch.labels[b].labels;
    const std::size_t n = lab.size();
    dlogits.assign(k * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = static_cast<std::size_t>(lab[i]);
      // dL/dp for the Dice part.
      a[0] = 0.0;
      double pa = 0.0;
      for (std::size_t cl = 1; cl < k; ++cl) {
        const double gi = y == cl ? 1.0 : 0.0;
        a[cl] = -(2.0 * gi * denom[cl] - 2.0 * inter[cl]) / (denom[cl] * denom[cl] * nf);
        pa += f.probs[cl * n + i] * a[cl];
      }
      for (std::size_t cl = 0; cl < k; ++cl) {
        const double p = f.probs[cl * n + i];
        dlogits[cl * n + i] = p * (a[cl] - pa) + (p - (cl == y ? 1.0 : 0.0)) * inv_total;
      }
    }
    // 1x1x1 output layer.
    dh2.assign(c * n, 0.0);
    for (std::size_t ko = 0; ko < k; ++ko) {
      const double* dz = dlogits.data() + ko * n;
      double bs = 0.0;
      for (std::size_t i = 0; i < n; ++i) bs += dz[i];
      g.b3[ko] += bs;
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double* h = f.h2.data() + ci * n;
        double* dh = dh2.data() + ci * n;
        const double wv = net.w3[ko * c + ci];
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          acc += dz[i] * h[i];
          dh[i] += wv * dz[i];
        }
        g.w3[ko * c + ci] += acc;
      }
    }
    for (std::size_t i = 0; i < c * n; ++i)
      if (f.h2[i] <= 0.0) dh2[i] = 0.0;
    dh1.assign(c * n, 0.0);
    conv3_backward(f.h1.data(), net.c, dh2.data(), net.c, net.w2, f.dims, g.w2, g.b2, dh1.data());
    for (std::size_t i = 0; i < c * n; ++i)
      if (f.h1[i] <= 0.0) dh1[i] = 0.0;
    conv3_backward(f.x.data(), 1, dh1.data(), net.c, net.w1, f.dims, g.w1, g.b1, nullptr);
  }
  for (double v : grad) check_finite(v, "gradient");
  return lv;
}

LossValue loss(const ModelWeights& w, const Batch& batch) {
  batch.validate();
  std::vector<std::vector<double>> probs;
  for (const auto& img : batch.images) probs.push_back(predict_proba(w, img));
  auto lv = loss_from_probabilities(probs, batch.labels, w.n_classes);
  check_finite(lv.total, "loss");
  return lv;
}

void adam_update(ModelWeights& w, std::span<const double> grad, const AdamConfig& cfg) {
  if (grad.size() != w.params.size()) throw std::invalid_argument("gradient size does not match params");
  if (w.adam.m.size() != w.params.size()) w.adam.m.assign(w.params.size(), 0.0);
  if (w.adam.v.size() != w.params.size()) w.adam.v.assign(w.params.size(), 0.0);
  ++w.adam.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(w.adam.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(w.adam.t));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    auto& m = w.adam.m[i];
    auto& v = w.adam.v[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad[i];
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double step = (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
    w.params[i] -= cfg.lr * (step + cfg.weight_decay * w.params[i]);
  }
}

ModelWeights adam_step(ModelWeights w, std::span<const double> grad, double lr, double weight_decay) {
  AdamConfig cfg;
  cfg.lr = lr;
  cfg.weight_decay = weight_decay;
  adam_update(w, grad, cfg);
  return w;
}

ModelWeights snapshot(const ModelWeights& w) { return w; }

ModelWeights restore(const ModelWeights& w, const ModelWeights& snap) {
  if (!(w.layout == snap.layout) || w.channels != snap.channels || w.n_classes != snap.n_classes)
    throw std::invalid_argument("snapshot layout does not match the model");
  return snap;
}

std::vector<int> window_starts(int n, int patch) {
  if (patch < 1 || patch > n) throw std::invalid_argument("patch must be in [1, image size]");
  if (patch == n) return {0};
  const int half = patch / 2;
  const int stride = std::max(1, half);
  const int last = n - patch + half;
  std::vector<int> starts;
  for (int s = -half; s < last; s += stride) starts.push_back(s);
  starts.push_back(last);
  return starts;
}

LabelVolume sliding_window_predict(const SegmentationLearner& learner, const ModelWeights& w, const Volume& image,
                                   Dims patch) {
  const Dims d = image.dims;
  if (patch.nx > d.nx || patch.ny > d.ny || patch.nz > d.nz)
    throw std::invalid_argument("patch is larger than the image");
  const int k = learner.n_classes();
  const std::size_t n = d.count();
  std::vector<double> acc(static_cast<std::size_t>(k) * n, 0.0);
  std::vector<int> hits(n, 0);
  const auto sx = window_starts(d.nx, patch.nx), sy = window_starts(d.ny, patch.ny), sz = window_starts(d.nz, patch.nz);
  const std::size_t pn = patch.count();
  Volume window(patch);
  for (int oz : sz)
    for (int oy : sy)
      for (int ox : sx) {
        for (int z = 0; z < patch.nz; ++z)
          for (int y = 0; y < patch.ny; ++y)
            for (int x = 0; x < patch.nx; ++x) {
              const int gx = ox + x, gy = oy + y, gz = oz + z;
              window.at(x, y, z) = d.contains(gx, gy, gz) ? image.at(gx, gy, gz) : 0.0f;
            }
        const auto probs = learner.predict_proba(w, window);
        for (int z = 0; z < patch.nz; ++z)
          for (int y = 0; y < patch.ny; ++y)
            for (int x = 0; x < patch.nx; ++x) {
              const int gx = ox + x, gy = oy + y, gz = oz + z;
              if (!d.contains(gx, gy, gz)) continue;
              const std::size_t gi = d.index(gx, gy, gz), pi = patch.index(x, y, z);
              ++hits[gi];
              for (int c = 0; c < k; ++c)
                acc[static_cast<std::size_t>(c) * n + gi] += probs[static_cast<std::size_t>(c) * pn + pi];
            }
      }
  LabelVolume out(d, k);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (acc[static_cast<std::size_t>(c) * n + i] > acc[static_cast<std::size_t>(best) * n + i]) best = c;
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

LabelVolume sliding_window_predict(const ModelWeights& w, const Volume& image, Dims patch, int n_classes) {
  if (n_classes != w.n_classes) throw std::invalid_argument("n_classes does not match the model");
  return sliding_window_predict(TinySegNet(w.n_classes, w.channels), w, image, patch);
}

std::vector<double> hard_dice(const LabelVolume& pred, const LabelVolume& truth) {
  if (!(pred.dims == truth.dims) || pred.labels.size() != truth.labels.size())
    throw std::invalid_argument("prediction and truth dims differ");
  const int k = std::max(pred.n_classes, truth.n_classes);
  std::vector<double> inter(static_cast<std::size_t>(k), 0.0), ps(static_cast<std::size_t>(k), 0.0),
      gs(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const auto p = pred.labels[i], g = truth.labels[i];
    ps[p] += 1.0;
    gs[g] += 1.0;
    if (p == g) inter[p] += 1.0;
  }
  std::vector<double> out;
  for (int c = 1; c < k; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const double den = ps[ci] + gs[ci];
    out.push_back(den == 0.0 ? 1.0 : 2.0 * inter[ci] / den);
  }
  return out;
}

double PlateauScheduler::observe(double loss) {
  if (loss < best_) {
    best_ = loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ > patience_) {
    lr_ = std::max(min_lr_, lr_ * factor_);
    bad_epochs_ = 0;
  }
  return lr_;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_checkpoint(const std::string& path, const ModelWeights& w) {
  nlohmann::json h;
  h["format"] = "augsearch-weights";
  h["version"] = 1;
  h["dtype"] = "float32";
  h["endianness"] = "little";
  h["channels"] = w.channels;
  h["n_classes"] = w.n_classes;
  h["param_count"] = w.params.size();
  h["adam_t"] = w.adam.t;
  h["layout"] = nlohmann::json::array();
  for (const auto& l : w.layout)
    h["layout"].push_back({{"name", l.name}, {"shape", l.shape}, {"offset", l.offset}, {"size", l.size}});
  const std::string header = h.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path, 0, "cannot open for writing");
  os.write("AUGW", 4);
  put_u32(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (double p : w.params) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(p)));
  if (!os) throw IoError(path, 0, "write failed");
}

ModelWeights read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path, 0, "cannot open for reading");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "AUGW", 4) != 0)
    throw FormatError(path + ": missing AUGW magic");
  const std::uint32_t hlen = get_u32(bytes.data() + 4);
  if (bytes.size() < 8ull + hlen) throw IoError(path, 8, "truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path, 8, std::string("bad header: ") + e.what());
  }
  ModelWeights w;
  try {
    w.channels = h.at("channels").get<int>();
    w.n_classes = h.at("n_classes").get<int>();
    for (const auto& l : h.at("layout"))
      w.layout.push_back({l.at("name").get<std::string>(), l.at("shape").get<std::vector<int>>(),
                          l.at("offset").get<std::size_t>(), l.at("size").get<std::size_t>()});
    const auto count = h.at("param_count").get<std::size_t>();
    const std::size_t body = 8ull + hlen;
    if (bytes.size() - body != 4 * count)
      throw FormatError(path + ": expected " + std::to_string(4 * count) + " parameter bytes, found " +
                        std::to_string(bytes.size() - body));
    w.params.resize(count);
    for (std::size_t i = 0; i < count; ++i)
      w.params[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes.data() + body + 4 * i)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad header: " + e.what());
  }
  check_model(w);
  w.adam.m.assign(w.params.size(), 0.0);
  w.adam.v.assign(w.params.size(), 0.0);
  return w;
}

}  // namespace augsearch
