#include "augsearch/synth_data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "augsearch/augment3d.hpp"
#include "augsearch/errors.hpp"
#include "json.hpp"

namespace augsearch {

namespace fs = std::filesystem;
using nlohmann::json;

void DatasetSpec::validate() const {
  if (n_volumes < 1) throw std::invalid_argument("n_volumes must be >= 1");
  if (dims.nx < 8 || dims.ny < 8 || dims.nz < 8) throw std::invalid_argument("dims must be >= 8 per axis");
  if (n_classes < 2 || n_classes > 255) throw std::invalid_argument("n_classes must be in [2, 255]");
  if (min_shapes < 0 || max_shapes < min_shapes) throw std::invalid_argument("bad shape count range");
  if (!(long_axis[0] > 0 && long_axis[0] <= long_axis[1]) || !(short_axis[0] > 0 && short_axis[0] <= short_axis[1]))
    throw std::invalid_argument("bad semi-axis ranges");
  if (noise_std < 0 || blur_sigma < 0 || noise_corr < 0)
    throw std::invalid_argument("noise_std, noise_corr and blur_sigma must be >= 0");
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0)
    throw std::invalid_argument("split fractions must be >= 0 and leave room for training data");
}

std::string DatasetSpec::to_json() const {
  json j{{"n_volumes", n_volumes},
         {"dims", {dims.nx, dims.ny, dims.nz}},
         {"n_classes", n_classes},
         {"min_shapes", min_shapes},
         {"max_shapes", max_shapes},
         {"long_axis", long_axis},
         {"short_axis", short_axis},
         {"centered", centered},
         {"contrast", contrast},
         {"noise_std", noise_std},
         {"noise_corr", noise_corr},
         {"blur_sigma", blur_sigma},
         {"rotation_shift", rotation_shift ? json(*rotation_shift) : json(nullptr)},
         {"val_fraction", val_fraction},
         {"test_fraction", test_fraction},
         {"seed", seed}};
  return j.dump(2);
}

DatasetSpec DatasetSpec::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    DatasetSpec s;
    s.n_volumes = j.at("n_volumes").get<int>();
    const auto d = j.at("dims").get<std::vector<int>>();
    if (d.size() != 3) throw FormatError("dims must have 3 entries");
    s.dims = {d[0], d[1], d[2]};
    s.n_classes = j.at("n_classes").get<int>();
    s.min_shapes = j.value("min_shapes", s.min_shapes);
    s.max_shapes = j.value("max_shapes", s.max_shapes);
    if (j.contains("long_axis")) s.long_axis = j.at("long_axis").get<std::array<double, 2>>();
    if (j.contains("short_axis")) s.short_axis = j.at("short_axis").get<std::array<double, 2>>();
    s.centered = j.value("centered", s.centered);
    s.contrast = j.value("contrast", s.contrast);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.noise_corr = j.value("noise_corr", s.noise_corr);
    s.blur_sigma = j.value("blur_sigma", s.blur_sigma);
    if (j.contains("rotation_shift") && !j.at("rotation_shift").is_null())
      s.rotation_shift = j.at("rotation_shift").get<double>();
    s.val_fraction = j.value("val_fraction", s.val_fraction);
    s.test_fraction = j.value("test_fraction", s.test_fraction);
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset spec JSON: ") + e.what());
  }
}

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split '" + s + "'");
}

SplitAssignment make_splits(std::uint64_t seed, int n_volumes, double val_fraction, double test_fraction) {
  if (n_volumes < 1) throw std::invalid_argument("n_volumes must be >= 1");
  const auto n = static_cast<std::size_t>(n_volumes);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, {0x5B17}));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  if (n_val + n_test >= n) {
    n_val = std::min(n_val, n > 1 ? (n - 1) / 2 : 0);
    n_test = std::min(n_test, n - 1 - n_val);
  }
  SplitAssignment out;
  out.of.assign(n, Split::Train);
  for (std::size_t r = 0; r < n; ++r) {
    const auto i = perm[r];
    if (r < n_val)
      out.of[i] = Split::Val;
    else if (r < n_val + n_test)
      out.of[i] = Split::Test;
  }
  for (std::size_t i = 0; i < n; ++i) {
    switch (out.of[i]) {
      case Split::Train: out.train.push_back(i); break;
      case Split::Val: out.val.push_back(i); break;
      case Split::Test: out.test.push_back(i); break;
    }
  }
  return out;
}

LabeledVolume generate_volume(const DatasetSpec& spec, std::size_t index, bool rotated) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, {0xDA7A, index}));
  const Dims d = spec.dims;
  const double c[3] = {(d.nx - 1) / 2.0, (d.ny - 1) / 2.0, (d.nz - 1) / 2.0};

  std::array<double, 9> rot{1, 0, 0, 0, 1, 0, 0, 0, 1};
  {
    // Always draw the angles so upright and rotated volumes share the
    // remaining random stream.
    const double shift = spec.rotation_shift.value_or(0.0);
    std::array<double, 3> ang{rng.uniform(-shift, shift), rng.uniform(-shift, shift), rng.uniform(-shift, shift)};
    if (rotated && shift > 0.0) rot = forward_matrix(1.0, ang);
  }

  struct Ellipsoid {
    double center[3];
    double axes[3];
    std::array<double, 9> frame;  // rows: world -> local
    int cls;
    double intensity;
  };
  const int n_shapes = spec.min_shapes + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_shapes - spec.min_shapes + 1)));
  std::vector<Ellipsoid> shapes;
  for (int s = 0; s < n_shapes; ++s) {
    Ellipsoid e{};
    e.cls = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_classes - 1)));
    const double a_long = rng.uniform(spec.long_axis[0], spec.long_axis[1]);
    const double a_s1 = rng.uniform(spec.short_axis[0], spec.short_axis[1]);
    const double a_s2 = rng.uniform(spec.short_axis[0], spec.short_axis[1]);
    e.axes[0] = a_s1;
    e.axes[1] = a_s2;
    e.axes[2] = a_long;
    // Small in-plane spin around z keeps upright shapes varied.
    const double spin = rng.uniform(0.0, 2.0 * 3.141592653589793);
    const auto local = forward_matrix(1.0, {0.0, 0.0, spin});
    // frame = (rot * local)^T
    std::array<double, 9> world{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) world[i * 3 + j] += rot[i * 3 + k] * local[k * 3 + j];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) e.frame[i * 3 + j] = world[j * 3 + i];
    double p[3];
    const double margin = 3.0;
    p[0] = rng.uniform(margin, d.nx - 1 - margin) - c[0];
    p[1] = rng.uniform(margin, d.ny - 1 - margin) - c[1];
    p[2] = rng.uniform(margin, d.nz - 1 - margin) - c[2];
    if (spec.centered) p[0] = p[1] = p[2] = 0.0;
    for (int i = 0; i < 3; ++i) e.center[i] = rot[i * 3] * p[0] + rot[i * 3 + 1] * p[1] + rot[i * 3 + 2] * p[2] + c[i];
    e.intensity = spec.contrast * (e.cls + rng.uniform(-0.15, 0.15));
    shapes.push_back(e);
  }

  LabeledVolume out{Volume(d), LabelVolume(d, spec.n_classes)};
  std::vector<double> img(d.count(), 0.0);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t idx = d.index(x, y, z);
        for (const auto& e : shapes) {
          const double q[3] = {x - e.center[0], y - e.center[1], z - e.center[2]};
          double r2 = 0.0;
          for (int i = 0; i < 3; ++i) {
            const double l = e.frame[i * 3] * q[0] + e.frame[i * 3 + 1] * q[1] + e.frame[i * 3 + 2] * q[2];
            r2 += (l * l) / (e.axes[i] * e.axes[i]);
          }
          if (r2 <= 1.0) {
            out.label.labels[idx] = static_cast<std::uint8_t>(e.cls);
            img[idx] = e.intensity;
          }
        }
      }
  gaussian_smooth(img, d, spec.blur_sigma);
  std::vector<double> noise(img.size(), 0.0);
  if (spec.noise_std > 0.0) {
    for (auto& n : noise) n = rng.normal();
    if (spec.noise_corr > 0.0) {
      gaussian_smooth(noise, d, spec.noise_corr);
      double ss = 0.0;
      for (double n : noise) ss += n * n;
      const double rms = std::sqrt(ss / static_cast<double>(noise.size()));
      if (rms > 0.0)
        for (auto& n : noise) n /= rms;
    }
  }
  for (std::size_t i = 0; i < img.size(); ++i)
    out.image.voxels[i] = static_cast<float>(img[i] + spec.noise_std * noise[i]);
  return out;
}

std::vector<LabeledVolume> generate(const DatasetSpec& spec) {
  spec.validate();
  const auto splits = make_splits(spec.seed, spec.n_volumes, spec.val_fraction, spec.test_fraction);
  std::vector<LabeledVolume> out;
  out.reserve(static_cast<std::size_t>(spec.n_volumes));
  for (std::size_t i = 0; i < static_cast<std::size_t>(spec.n_volumes); ++i) {
    const bool rotated = spec.rotation_shift.has_value() && splits.of[i] != Split::Train;
    out.push_back(generate_volume(spec, i, rotated));
  }
  return out;
}

ZScoreResult zscore_normalize(const Volume& v) {
  ZScoreResult r{v, false};
  const double n = static_cast<double>(v.voxels.size());
  double mean = 0.0;
  for (float x : v.voxels) mean += x;
  mean /= n;
  double var = 0.0;
  for (float x : v.voxels) var += (x - mean) * (x - mean);
  var /= n;
  if (!(var > 0.0)) {
    std::fill(r.volume.voxels.begin(), r.volume.voxels.end(), 0.0f);
    r.constant = true;
    return r;
  }
  const double inv = 1.0 / std::sqrt(var);
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    r.volume.voxels[i] = static_cast<float>((v.voxels[i] - mean) * inv);
  return r;
}

namespace {

LabeledVolume crop(const Volume& image, const LabelVolume& label, Dims patch, const std::array<int, 3>& o) {
  LabeledVolume out{Volume(patch), LabelVolume(patch, label.n_classes)};
  out.image.spacing = image.spacing;
  for (int z = 0; z < patch.nz; ++z)
    for (int y = 0; y < patch.ny; ++y) {
      const std::size_t src = image.dims.index(o[0], o[1] + y, o[2] + z);
      const std::size_t dst = patch.index(0, y, z);
      std::copy_n(image.voxels.begin() + static_cast<std::ptrdiff_t>(src), patch.nx,
                  out.image.voxels.begin() + static_cast<std::ptrdiff_t>(dst));
      std::copy_n(label.labels.begin() + static_cast<std::ptrdiff_t>(src), patch.nx,
                  out.label.labels.begin() + static_cast<std::ptrdiff_t>(dst));
    }
  return out;
}

}  // namespace

PatchResult sample_patch(const Volume& image, const LabelVolume& label, Dims patch, double fg_threshold, Rng& rng,
                         int max_tries) {
  const Dims d = image.dims;
  if (!(label.dims == d)) throw std::invalid_argument("image and label dims differ");
  if (patch.nx < 1 || patch.ny < 1 || patch.nz < 1 || patch.nx > d.nx || patch.ny > d.ny || patch.nz > d.nz)
    throw std::invalid_argument("patch does not fit inside the volume");
  auto random_origin = [&]() {
    return std::array<int, 3>{static_cast<int>(rng.below(static_cast<std::uint64_t>(d.nx - patch.nx + 1))),
                              static_cast<int>(rng.below(static_cast<std::uint64_t>(d.ny - patch.ny + 1))),
                              static_cast<int>(rng.below(static_cast<std::uint64_t>(d.nz - patch.nz + 1)))};
  };
  PatchResult r;
  if (fg_threshold <= 0.0) {
    r.origin = random_origin();
    r.patch = crop(image, label, patch, r.origin);
    return r;
  }
  const std::size_t fg_total = label.foreground_count();
  if (fg_total == 0) {
    r.origin = random_origin();
    r.patch = crop(image, label, patch, r.origin);
    r.no_foreground = true;
    return r;
  }
  // Summed-volume table of foreground indicators, (n+1)^3.
  const int sx = d.nx + 1, sy = d.ny + 1, sz = d.nz + 1;
  std::vector<std::int32_t> sat(static_cast<std::size_t>(sx) * static_cast<std::size_t>(sy) * static_cast<std::size_t>(sz), 0);
  auto S = [&](int x, int y, int z) -> std::int32_t& {
    return sat[static_cast<std::size_t>(x) + static_cast<std::size_t>(sx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(sy) * static_cast<std::size_t>(z))];
  };
  for (int z = 1; z < sz; ++z)
    for (int y = 1; y < sy; ++y)
      for (int x = 1; x < sx; ++x)
        S(x, y, z) = (label.at(x - 1, y - 1, z - 1) != 0 ? 1 : 0) + S(x - 1, y, z) + S(x, y - 1, z) + S(x, y, z - 1) -
                     S(x - 1, y - 1, z) - S(x - 1, y, z - 1) - S(x, y - 1, z - 1) + S(x - 1, y - 1, z - 1);
  auto box = [&](const std::array<int, 3>& o) {
    const int x0 = o[0], y0 = o[1], z0 = o[2], x1 = x0 + patch.nx, y1 = y0 + patch.ny, z1 = z0 + patch.nz;
    return S(x1, y1, z1) - S(x0, y1, z1) - S(x1, y0, z1) - S(x1, y1, z0) + S(x0, y0, z1) + S(x0, y1, z0) +
           S(x1, y0, z0) - S(x0, y0, z0);
  };
  const double pcount = static_cast<double>(patch.count());
  for (int t = 0; t < max_tries; ++t) {
    const auto o = random_origin();
    if (static_cast<double>(box(o)) / pcount >= fg_threshold) {
      r.origin = o;
      r.patch = crop(image, label, patch, o);
      return r;
    }
  }
  // Centre on a random foreground voxel.
  std::uint64_t pick = rng.below(fg_total);
  std::size_t idx = 0;
  for (; idx < label.labels.size(); ++idx)
    if (label.labels[idx] != 0 && pick-- == 0) break;
  const int fx = static_cast<int>(idx % static_cast<std::size_t>(d.nx));
  const int fy = static_cast<int>((idx / static_cast<std::size_t>(d.nx)) % static_cast<std::size_t>(d.ny));
  const int fz = static_cast<int>(idx / (static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny)));
  r.origin = {std::clamp(fx - patch.nx / 2, 0, d.nx - patch.nx), std::clamp(fy - patch.ny / 2, 0, d.ny - patch.ny),
              std::clamp(fz - patch.nz / 2, 0, d.nz - patch.nz)};
  r.patch = crop(image, label, patch, r.origin);
  r.fallback = true;
  return r;
}

namespace {

std::vector<char> read_all(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError(p.string(), 0, "cannot open for reading");
  return std::vector<char>((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_all(const fs::path& p, const char* data, std::size_t n) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(p.string(), 0, "cannot open for writing");
  os.write(data, static_cast<std::streamsize>(n));
  if (!os) throw IoError(p.string(), 0, "write failed");
}

}  // namespace

void write_volume(const std::string& dir, const Volume& image, const LabelVolume* label) {
  image.validate();
  if (label) {
    label->validate();
    if (!(label->dims == image.dims)) throw std::invalid_argument("image and label dims differ");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir, 0, "cannot create directory: " + ec.message());
  const fs::path root(dir);
  json meta{{"dims", {image.dims.nx, image.dims.ny, image.dims.nz}},
            {"spacing", image.spacing},
            {"n_classes", label ? label->n_classes : 0},
            {"image_dtype", "float32"},
            {"label_dtype", label ? json("uint8") : json(nullptr)},
            {"endianness", "little"},
            {"order", "x-fastest"}};
  const std::string m = meta.dump(2) + "\n";
  write_all(root / "meta.json", m.data(), m.size());
  std::vector<char> raw(image.voxels.size() * 4);
  for (std::size_t i = 0; i < image.voxels.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(image.voxels[i]);
    for (int b = 0; b < 4; ++b) raw[4 * i + static_cast<std::size_t>(b)] = static_cast<char>((u >> (8 * b)) & 0xFF);
  }
  write_all(root / "image.raw", raw.data(), raw.size());
  if (label)
    write_all(root / "label.raw", reinterpret_cast<const char*>(label->labels.data()), label->labels.size());
  else if (fs::exists(root / "label.raw"))
    fs::remove(root / "label.raw");
}

VolumeFile read_volume(const std::string& dir) {
  const fs::path root(dir);
  const auto meta_bytes = read_all(root / "meta.json");
  json meta;
  try {
    meta = json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const json::parse_error& e) {
    throw IoError((root / "meta.json").string(), e.byte, std::string("corrupt JSON: ") + e.what());
  }
  VolumeFile out;
  int n_classes = 0;
  bool has_label = false;
  try {
    const auto d = meta.at("dims").get<std::vector<int>>();
    if (d.size() != 3 || d[0] <= 0 || d[1] <= 0 || d[2] <= 0) throw FormatError(dir + ": meta.json dims invalid");
    out.image.dims = {d[0], d[1], d[2]};
    if (meta.contains("spacing")) out.image.spacing = meta.at("spacing").get<std::array<double, 3>>();
    if (meta.value("image_dtype", std::string("float32")) != "float32")
      throw FormatError(dir + ": unsupported image dtype");
    if (meta.value("endianness", std::string("little")) != "little") throw FormatError(dir + ": unsupported endianness");
    n_classes = meta.value("n_classes", 0);
    has_label = meta.contains("label_dtype") && !meta.at("label_dtype").is_null();
  } catch (const json::exception& e) {
    throw FormatError(dir + ": meta.json: " + e.what());
  }
  const std::size_t count = out.image.dims.count();
  const auto raw = read_all(root / "image.raw");
  if (raw.size() != 4 * count)
    throw FormatError((root / "image.raw").string() + ": expected " + std::to_string(4 * count) + " bytes, found " +
                      std::to_string(raw.size()));
  out.image.voxels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b)
      u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + static_cast<std::size_t>(b)])) << (8 * b);
    out.image.voxels[i] = std::bit_cast<float>(u);
  }
  if (has_label) {
    const auto lraw = read_all(root / "label.raw");
    if (lraw.size() != count)
      throw FormatError((root / "label.raw").string() + ": expected " + std::to_string(count) + " bytes, found " +
                        std::to_string(lraw.size()));
    LabelVolume l(out.image.dims, n_classes);
    for (std::size_t i = 0; i < count; ++i) {
      l.labels[i] = static_cast<std::uint8_t>(lraw[i]);
      if (l.labels[i] >= n_classes)
        throw FormatError((root / "label.raw").string() + ": label " + std::to_string(l.labels[i]) + " at offset " +
                          std::to_string(i) + " exceeds n_classes");
    }
    out.label = std::move(l);
  }
  return out;
}

std::vector<LabeledVolume> Dataset::subset(Split s) const {
  std::vector<LabeledVolume> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == s) out.push_back(volumes[i]);
  return out;
}

Dataset write_dataset(const std::string& root, const DatasetSpec& spec) {
  Dataset ds;
  ds.spec = spec;
  ds.volumes = generate(spec);
  const auto splits = make_splits(spec.seed, spec.n_volumes, spec.val_fraction, spec.test_fraction);
  json manifest{{"format", "augsearch-dataset"}, {"version", 1}, {"spec", json::parse(spec.to_json())}};
  manifest["volumes"] = json::array();
  for (std::size_t i = 0; i < ds.volumes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "vol_%04zu", i);
    write_volume((fs::path(root) / name).string(), ds.volumes[i].image, &ds.volumes[i].label);
    ds.entries.push_back({name, splits.of[i]});
    manifest["volumes"].push_back({{"dir", name}, {"split", to_string(splits.of[i])}});
  }
  const std::string text = manifest.dump(2) + "\n";
  write_all(fs::path(root) / "manifest.json", text.data(), text.size());
  return ds;
}

Dataset load_dataset(const std::string& root) {
  const auto bytes = read_all(fs::path(root) / "manifest.json");
  Dataset ds;
  try {
    const auto m = json::parse(bytes.begin(), bytes.end());
    ds.spec = DatasetSpec::from_json(m.at("spec").dump());
    for (const auto& v : m.at("volumes"))
      ds.entries.push_back({v.at("dir").get<std::string>(), split_from_string(v.at("split").get<std::string>())});
  } catch (const json::exception& e) {
    throw FormatError(root + "/manifest.json: " + e.what());
  }
  for (const auto& e : ds.entries) {
    auto vf = read_volume((fs::path(root) / e.dir).string());
    if (!vf.label) throw FormatError(root + "/" + e.dir + ": dataset volume has no label");
    ds.volumes.push_back({std::move(vf.image), std::move(*vf.label)});
  }
  return ds;
}

}  // namespace augsearch
