#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mrc/datamodel.hpp"
#include "mrc/errors.hpp"
#include "mrc/groundtruth.hpp"
#include "mrc/rng.hpp"
#include "mrc/tensor.hpp"

namespace mrc {

struct TransformRecord {
  bool flip = false;
  double scale = 1.0;
  int crop_x = 0;
  int crop_y = 0;
  int crop_size = 0;
};

struct WeakAugmentParams {
  double min_scale = 0.7;
  double max_scale = 1.3;
  double flip_probability = 0.5;
};

struct View {
  Image image;
  std::optional<PointAnnotations> points;
  TransformRecord transform;
};

// Applies an explicit transform: scale, then horizontal flip, then crop.
// Annotation points follow the pixels and are filtered to the crop window.
inline View apply_transform(const SceneRecord& record, const TransformRecord& t) {
  const int h = record.height(), w = record.width();
  const int nh = std::max(1, static_cast<int>(std::lround(h * t.scale)));
  const int nw = std::max(1, static_cast<int>(std::lround(w * t.scale)));
  if (t.crop_size > std::min(nh, nw) || t.crop_x < 0 || t.crop_y < 0 ||
      t.crop_x + t.crop_size > nw || t.crop_y + t.crop_size > nh)
    throw BadGeometry("crop window outside the scaled image");

  Image scaled = (nh == h && nw == w) ? record.image : resize_bilinear(record.image, nh, nw);
  if (t.flip) scaled = flip_horizontal(scaled);
  View v;
  v.transform = t;
  v.image = crop(scaled, t.crop_y, t.crop_x, t.crop_size, t.crop_size);
  if (record.annotations) {
    const double sx = static_cast<double>(nw) / w;
    const double sy = static_cast<double>(nh) / h;
    PointAnnotations out;
    for (const auto& p : record.annotations->points) {
      double x = p.x * sx, y = p.y * sy;
      if (t.flip) x = nw - 1 - x;
      x -= t.crop_x;
      y -= t.crop_y;
      if (x >= 0.0 && x < t.crop_size && y >= 0.0 && y < t.crop_size) out.points.push_back({x, y});
    }
    clamp_points(out, t.crop_size, t.crop_size);
    v.points = std::move(out);
  }
  return v;
}

inline TransformRecord sample_transform(int height, int width, int crop_size, Rng& rng,
                                        const WeakAugmentParams& params = {}) {
  TransformRecord t;
  t.crop_size = crop_size;
  t.scale = rng.uniform(params.min_scale, params.max_scale);
  t.flip = rng.bernoulli(params.flip_probability);
  const int shorter = std::min(height, width);
  if (std::lround(shorter * t.scale) < crop_size) // rescale up so the crop fits
    t.scale = static_cast<double>(crop_size) / shorter;
  const int nh = static_cast<int>(std::lround(height * t.scale));
  const int nw = static_cast<int>(std::lround(width * t.scale));
  t.crop_y = rng.uniform_int(0, nh - crop_size);
  t.crop_x = rng.uniform_int(0, nw - crop_size);
  return t;
}

inline View weak_augment(const SceneRecord& record, int crop_size, Rng& rng,
                         const WeakAugmentParams& params = {}) {
  return apply_transform(record, sample_transform(record.height(), record.width(), crop_size, rng, params));
}

struct JitterStrength {
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;

  static JitterStrength uniform(double s) { return {s, s, s, s}; }
  static JitterStrength none() { return {0, 0, 0, 0}; }
};

// Brightness, contrast, saturation and hue shifts, each factor drawn within
// +/- strength. Hue is rotated in the YIQ chroma plane, which leaves gray
// pixels untouched. Output is clipped to [0, 1].
inline Image color_jitter(const Image& image, Rng& rng, const JitterStrength& s = {}) {
  if (image.channels() != 3) throw GeometryMismatch("color_jitter expects 3 channels");
  const double b = 1.0 + rng.uniform(-s.brightness, s.brightness);
  const double c = 1.0 + rng.uniform(-s.contrast, s.contrast);
  const double sat = 1.0 + rng.uniform(-s.saturation, s.saturation);
  const double hue = rng.uniform(-s.hue, s.hue);
  if (s.brightness == 0 && s.contrast == 0 && s.saturation == 0 && s.hue == 0) return image;

  Image out = image;
  const std::size_t n = image.plane();
  float* r = out.channel(0).data();
  float* g = out.channel(1).data();
  float* bl = out.channel(2).data();
  auto gray = [&](std::size_t i) { return 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i]; };
  auto clip = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };

  if (s.brightness != 0)
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = clip(r[i] * b);
      g[i] = clip(g[i] * b);
      bl[i] = clip(bl[i] * b);
    }
  if (s.contrast != 0) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += gray(i);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = clip(mean + c * (r[i] - mean));
      g[i] = clip(mean + c * (g[i] - mean));
      bl[i] = clip(mean + c * (bl[i] - mean));
    }
  }
  if (s.saturation != 0)
    for (std::size_t i = 0; i < n; ++i) {
      if (r[i] == g[i] && g[i] == bl[i]) continue; // gray has no chroma
      const double y = gray(i);
      r[i] = clip(y + sat * (r[i] - y));
      g[i] = clip(y + sat * (g[i] - y));
      bl[i] = clip(y + sat * (bl[i] - y));
    }
  if (s.hue != 0) {
    const double ang = 2.0 * 3.14159265358979323846 * hue;
    const double ca = std::cos(ang), sa = std::sin(ang);
    for (std::size_t i = 0; i < n; ++i) {
      if (r[i] == g[i] && g[i] == bl[i]) continue;
      const double y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i];
      const double ii = 0.596 * r[i] - 0.274 * g[i] - 0.322 * bl[i];
      const double q = 0.211 * r[i] - 0.523 * g[i] + 0.312 * bl[i];
      const double i2 = ca * ii - sa * q;
      const double q2 = sa * ii + ca * q;
      r[i] = clip(y + 0.956 * i2 + 0.621 * q2);
      g[i] = clip(y - 0.272 * i2 - 0.647 * q2);
      bl[i] = clip(y - 1.106 * i2 + 1.703 * q2);
    }
  }
  return out;
}

struct PatchIndex {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const PatchIndex&, const PatchIndex&) = default;
};

// The masked patch set. Indices are sorted row-major.
struct MaskSpec {
  int patch_size = 32;
  double ratio = 0.3;
  int rows = 0;
  int cols = 0;
  std::vector<PatchIndex> masked;

  int total_patches() const noexcept { return rows * cols; }
  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

inline int masked_patch_count(int total, double ratio) {
  return static_cast<int>(std::lround(ratio * total));
}

// Chooses exactly round(ratio * N) grid-aligned patches uniformly without
// replacement.
inline MaskSpec sample_mask(int height, int width, int patch_size, double ratio, Rng& rng) {
  if (patch_size <= 0 || patch_size % kOutputStride != 0)
    throw BadGeometry("patch size must be a positive multiple of 8");
  if (height % patch_size != 0 || width % patch_size != 0)
    throw BadGeometry("image " + std::to_string(height) + "x" + std::to_string(width) +
                      " not divisible by patch " + std::to_string(patch_size));
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw BadGeometry("mask ratio must lie in [0, 1]");
  MaskSpec m;
  m.patch_size = patch_size;
  m.ratio = ratio;
  m.rows = height / patch_size;
  m.cols = width / patch_size;
  const int n = m.total_patches();
  const int k = masked_patch_count(n, ratio);
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) { // partial Fisher-Yates
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[i], idx[j]);
  }
  std::sort(idx.begin(), idx.begin() + k);
  for (int i = 0; i < k; ++i) m.masked.push_back({idx[i] / m.cols, idx[i] % m.cols});
  return m;
}

inline MaskSpec sample_mask(int image_size, int patch_size, double ratio, Rng& rng) {
  return sample_mask(image_size, image_size, patch_size, ratio, rng);
}

template <typename T>
void fill_patches(Tensor<T>& image, const MaskSpec& spec, T value) {
  for (const auto& p : spec.masked)
    for (int c = 0; c < image.channels(); ++c)
      for (int y = 0; y < spec.patch_size; ++y)
        std::fill_n(&image(c, p.row * spec.patch_size + y, p.col * spec.patch_size),
                    spec.patch_size, value);
}

inline Image apply_mask(const Image& image, const MaskSpec& spec) {
  if (image.height() != spec.rows * spec.patch_size || image.width() != spec.cols * spec.patch_size)
    throw GeometryMismatch("mask grid " + std::to_string(spec.rows) + "x" + std::to_string(spec.cols) +
                           " of " + std::to_string(spec.patch_size) + "px does not match image " +
                           shape_str(image));
  Image out = image;
  fill_patches(out, spec, 0.0f);
  return out;
}

struct Cell {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const Cell&, const Cell&) = default;
};

// Output-grid cells covered by masked patches (row-major order).
inline std::vector<Cell> mask_to_output_grid(const MaskSpec& spec, int stride = kOutputStride) {
  if (spec.patch_size % stride != 0) throw BadGeometry("patch size not divisible by stride");
  const int per = spec.patch_size / stride;
  std::vector<Cell> cells;
  cells.reserve(spec.masked.size() * per * per);
  for (const auto& p : spec.masked)
    for (int dy = 0; dy < per; ++dy)
      for (int dx = 0; dx < per; ++dx) cells.push_back({p.row * per + dy, p.col * per + dx});
  std::sort(cells.begin(), cells.end());
  return cells;
}

// 0/1 indicator of the masked output cells, same grid as the model output.
inline Tensor<float> output_cell_mask(const MaskSpec& spec, int stride = kOutputStride) {
  const int per = spec.patch_size / stride;
  Tensor<float> m(1, spec.rows * per, spec.cols * per);
  for (const auto& c : mask_to_output_grid(spec, stride)) m.at(c.row, c.col) = 1.0f;
  return m;
}

inline nlohmann::json to_json(const MaskSpec& m) {
  nlohmann::json masked = nlohmann::json::array();
  for (const auto& p : m.masked) masked.push_back({p.row, p.col});
  return {{"patch_size", m.patch_size},
          {"ratio", m.ratio},
          {"grid", {m.rows, m.cols}},
          {"masked", std::move(masked)}};
}

inline MaskSpec mask_from_json(const nlohmann::json& j) {
  MaskSpec m;
  m.patch_size = j.at("patch_size").get<int>();
  m.ratio = j.at("ratio").get<double>();
  m.rows = j.at("grid").at(0).get<int>();
  m.cols = j.at("grid").at(1).get<int>();
  for (const auto& e : j.at("masked")) m.masked.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  return m;
}

} // namespace mrc
