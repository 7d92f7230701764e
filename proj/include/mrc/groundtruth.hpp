#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "mrc/datamodel.hpp"
#include "mrc/errors.hpp"
#include "mrc/tensor.hpp"

namespace mrc {

// Persons per cell. `stride` is 1 at image resolution, 8 at output resolution.
struct DensityMap {
  Tensor<float> values;
  int stride = 1;

  int height() const noexcept { return values.height(); }
  int width() const noexcept { return values.width(); }
  double sum() const { return values.sum(); }
};

inline constexpr double kFixedSigma = 4.0;
inline constexpr int kOutputStride = 8;
inline constexpr int kDensityLevels = 25;

namespace detail {

// Adds one Gaussian truncated at 4 sigma, renormalized to unit in-image mass.
inline void splat_gaussian(std::vector<double>& acc, int h, int w, Point p, double sigma) {
  const double px = std::clamp(p.x, 0.0, static_cast<double>(w - 1));
  const double py = std::clamp(p.y, 0.0, static_cast<double>(h - 1));
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  const int cx = static_cast<int>(std::lround(px));
  const int cy = static_cast<int>(std::lround(py));
  const int x0 = std::max(0, cx - radius), x1 = std::min(w - 1, cx + radius);
  const int y0 = std::max(0, cy - radius), y1 = std::min(h - 1, cy + radius);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  const double r2max = 16.0 * sigma * sigma;

  thread_local std::vector<double> kernel;
  kernel.assign(static_cast<std::size_t>(y1 - y0 + 1) * (x1 - x0 + 1), 0.0);
  double total = 0.0;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
      if (d2 > r2max) continue;
      const double v = std::exp(-d2 * inv);
      kernel[static_cast<std::size_t>(y - y0) * (x1 - x0 + 1) + (x - x0)] = v;
      total += v;
    }
  if (total <= 0.0) { // degenerate tiny sigma: all mass on the nearest pixel
    acc[static_cast<std::size_t>(cy) * w + cx] += 1.0;
    return;
  }
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      acc[static_cast<std::size_t>(y) * w + x] +=
          kernel[static_cast<std::size_t>(y - y0) * (x1 - x0 + 1) + (x - x0)] / total;
}

inline DensityMap finish(const std::vector<double>& acc, int h, int w) {
  DensityMap m{Tensor<float>(1, h, w), 1};
  for (std::size_t i = 0; i < acc.size(); ++i) m.values.data()[i] = static_cast<float>(acc[i]);
  return m;
}

} // namespace detail

inline DensityMap fixed_kernel_density(const PointAnnotations& points, int height, int width,
                                       double sigma = kFixedSigma) {
  if (!(sigma > 0.0)) throw BadConfig("sigma must be positive");
  std::vector<double> acc(static_cast<std::size_t>(height) * width, 0.0);
  for (const auto& p : points.points) detail::splat_gaussian(acc, height, width, p, sigma);
  return detail::finish(acc, height, width);
}

struct AdaptiveKernelParams {
  int k = 3;
  double beta = 0.3;
  double sigma_cap = 25.0;
  double fallback_sigma = kFixedSigma;
};

// Per-point bandwidths: beta times the mean distance to the k nearest other
// points, capped. With k or fewer points every sigma is the fallback.
inline std::vector<double> adaptive_sigmas(const PointAnnotations& points,
                                           const AdaptiveKernelParams& params = {}) {
  if (params.k < 1) throw BadConfig("adaptive kernel: k must be >= 1");
  const auto& pts = points.points;
  const std::size_t n = pts.size();
  std::vector<double> sigmas(n, params.fallback_sigma);
  if (n < static_cast<std::size_t>(params.k) + 1) return sigmas;
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      d[j] = j == i ? std::numeric_limits<double>::infinity()
                    : std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y);
    std::partial_sort(d.begin(), d.begin() + params.k, d.end());
    double mean = 0.0;
    for (int q = 0; q < params.k; ++q) mean += d[q];
    mean /= params.k;
    sigmas[i] = std::min(params.beta * mean, params.sigma_cap);
  }
  return sigmas;
}

inline DensityMap adaptive_kernel_density(const PointAnnotations& points, int height, int width,
                                          const AdaptiveKernelParams& params = {}) {
  const auto sigmas = adaptive_sigmas(points, params);
  std::vector<double> acc(static_cast<std::size_t>(height) * width, 0.0);
  for (std::size_t i = 0; i < points.points.size(); ++i)
    detail::splat_gaussian(acc, height, width, points.points[i], std::max(sigmas[i], 1e-3));
  return detail::finish(acc, height, width);
}

enum class KernelKind { Fixed, Adaptive };

inline DensityMap make_density(const PointAnnotations& points, int height, int width,
                               KernelKind kind, const AdaptiveKernelParams& params = {}) {
  return kind == KernelKind::Fixed ? fixed_kernel_density(points, height, width)
                                   : adaptive_kernel_density(points, height, width, params);
}

// Sum pooling over factor x factor blocks.
inline DensityMap downsample_density(const DensityMap& map, int factor = kOutputStride) {
  const int h = map.height(), w = map.width();
  if (factor < 1 || h % factor != 0 || w % factor != 0)
    throw ShapeNotDivisible(std::to_string(h) + "x" + std::to_string(w) + " by " +
                            std::to_string(factor));
  const int oh = h / factor, ow = w / factor;
  std::vector<double> acc(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      acc[static_cast<std::size_t>(y / factor) * ow + x / factor] += map.values.at(y, x);
  DensityMap out{Tensor<float>(1, oh, ow), map.stride * factor};
  for (std::size_t i = 0; i < acc.size(); ++i) out.values.data()[i] = static_cast<float>(acc[i]);
  return out;
}

// Density target at the network output stride for an image of the given size.
inline DensityMap output_density(const PointAnnotations& points, int height, int width,
                                 KernelKind kind = KernelKind::Fixed,
                                 const AdaptiveKernelParams& params = {}) {
  // Kernels are truncated to the real image, then zero-padded.
  auto full = make_density(points, height, width, kind, params);
  DensityMap padded{pad_to_multiple(full.values, kOutputStride, PadMode::Zero), 1};
  return downsample_density(padded, kOutputStride);
}

// Density levels. Level 0 is exactly {0}; level k >= 1 is the half-open
// interval (boundaries[k-1], boundaries[k]]. Counts above the last boundary
// clamp to the top level.
struct Partition {
  std::vector<double> boundaries; // size K, boundaries[0] == 0
  std::vector<double> proxies;    // size K, proxies[0] == 0

  int levels() const noexcept { return static_cast<int>(proxies.size()); }

  int level_of(double count) const {
    if (count <= 0.0) return 0;
    // first boundary >= count, among boundaries[1..K-1]
    const auto it = std::lower_bound(boundaries.begin() + 1, boundaries.end(), count);
    if (it == boundaries.end()) return levels() - 1;
    return static_cast<int>(it - boundaries.begin());
  }
  double lower(int k) const { return k == 0 ? 0.0 : boundaries[k - 1]; }
  double upper(int k) const { return boundaries[k]; }
};

// Geometric level boundaries in log(1 + count) up to the sample maximum,
// with per-level mean-count proxies from the same sample.
inline Partition build_partition(const std::vector<double>& cell_counts, int levels = kDensityLevels) {
  if (cell_counts.empty()) throw EmptyDataset("build_partition: empty sample");
  if (levels < 2) throw BadConfig("build_partition: need at least 2 levels");
  double max_count = 0.0;
  for (double c : cell_counts) {
    if (!std::isfinite(c) || c < 0.0) throw MalformedRecord("cell counts must be finite and >= 0");
    max_count = std::max(max_count, c);
  }
  if (max_count <= 0.0) throw DegenerateSample("all cell counts are zero; levels collapse to 1");

  Partition p;
  const int K = levels;
  p.boundaries.resize(K);
  p.boundaries[0] = 0.0;
  for (int k = 1; k < K; ++k)
    p.boundaries[k] = std::pow(1.0 + max_count, static_cast<double>(k) / (K - 1)) - 1.0;
  p.boundaries[K - 1] = max_count;

  std::vector<double> sum(K, 0.0);
  std::vector<std::size_t> n(K, 0);
  for (double c : cell_counts) {
    const int k = p.level_of(c);
    sum[k] += c;
    ++n[k];
  }
  p.proxies.resize(K);
  p.proxies[0] = 0.0;
  for (int k = 1; k < K; ++k)
    p.proxies[k] = n[k] ? sum[k] / n[k] : 0.5 * (p.lower(k) + p.upper(k));
  return p;
}

inline nlohmann::json to_json(const Partition& p) {
  return {{"boundaries", p.boundaries}, {"proxies", p.proxies}, {"K", p.levels()}};
}

inline Partition partition_from_json(const nlohmann::json& j) {
  Partition p;
  p.boundaries = j.at("boundaries").get<std::vector<double>>();
  p.proxies = j.at("proxies").get<std::vector<double>>();
  if (p.boundaries.size() != p.proxies.size() || j.at("K").get<int>() != p.levels())
    throw MalformedRecord("partition: inconsistent K");
  return p;
}

struct ClassMap {
  Tensor<int> levels;
  int stride = kOutputStride;
};

inline ClassMap density_to_class(const DensityMap& map, const Partition& partition) {
  ClassMap out{Tensor<int>(1, map.height(), map.width()), map.stride};
  for (std::size_t i = 0; i < map.values.size(); ++i)
    out.levels.data()[i] = partition.level_of(map.values.data()[i]);
  return out;
}

inline double class_to_count(const ClassMap& classes, const Partition& partition) {
  double total = 0.0;
  for (int lvl : classes.levels.vec()) total += partition.proxies.at(lvl);
  return total;
}

} // namespace mrc
