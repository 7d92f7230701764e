#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "mrc/datamodel.hpp"
#include "mrc/errors.hpp"
#include "mrc/image_io.hpp"
#include "mrc/rng.hpp"

namespace mrc {

// Parameters of a synthetic crowd scene. Head density follows a linear ramp
// along `gradient_angle_deg` (0 = increasing to the right, 90 = downward);
// heads shrink toward the dense end to mimic perspective.
struct SceneSpec {
  int width = 256;
  int height = 256;
  int count_min = 20;
  int count_max = 200;
  double gradient_angle_deg = 90.0;
  double gradient_strength = 0.8; // 0 = uniform placement, 1 = zero density at the sparse end
  bool random_gradient_angle = true;
  double head_radius_min = 3.0;
  double head_radius_max = 7.0;
  double clutter_level = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (width < kMinImageSide || height < kMinImageSide) throw BadConfig("scene side must be >= 64");
    if (count_min < 0 || count_max < count_min) throw BadConfig("bad count range");
    if (head_radius_min < 1.0 || head_radius_max < head_radius_min) throw BadConfig("head radii must be >= 1");
    if (clutter_level < 0 || clutter_level > 1) throw BadConfig("clutter_level must lie in [0, 1]");
    if (gradient_strength < 0 || gradient_strength > 1) throw BadConfig("gradient_strength must lie in [0, 1]");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SceneSpec, width, height, count_min, count_max,
                                                gradient_angle_deg, gradient_strength, random_gradient_angle,
                                                head_radius_min, head_radius_max, clutter_level, seed)

namespace detail {

using Rgb = std::array<double, 3>;

inline void blend(Image& img, int x, int y, const Rgb& c, double a) {
  if (x < 0 || y < 0 || x >= img.width() || y >= img.height() || a <= 0) return;
  a = std::min(a, 1.0);
  for (int ch = 0; ch < 3; ++ch)
    img(ch, y, x) = static_cast<float>((1 - a) * img(ch, y, x) + a * c[ch]);
}

inline void render_background(Image& img, Rng& rng, double clutter) {
  const int W = img.width(), H = img.height();
  Rgb top{rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9)};
  Rgb bottom{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i)
    waves.push_back({rng.uniform(0.5, 4.0) / W, rng.uniform(0.5, 4.0) / H, rng.uniform(0, 2 * std::numbers::pi),
                     rng.uniform(0.02, 0.08)});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double t = static_cast<double>(y) / (H - 1);
      double tex = 0.0;
      for (const auto& w : waves) tex += w.amp * std::sin(2 * std::numbers::pi * (w.fx * x + w.fy * y) + w.phase);
      for (int c = 0; c < 3; ++c)
        img(c, y, x) = static_cast<float>(std::clamp((1 - t) * top[c] + t * bottom[c] + tex, 0.0, 1.0));
    }
  // Clutter: rectangles and strokes (never discs, so they do not read as heads).
  const int n_rect = static_cast<int>(std::lround(clutter * 12));
  for (int i = 0; i < n_rect; ++i) {
    const int rw = rng.uniform_int(6, W / 4), rh = rng.uniform_int(6, H / 4);
    const int x0 = rng.uniform_int(0, W - 1), y0 = rng.uniform_int(0, H - 1);
    const Rgb c{rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95)};
    const double a = rng.uniform(0.3, 0.8);
    for (int y = y0; y < std::min(H, y0 + rh); ++y)
      for (int x = x0; x < std::min(W, x0 + rw); ++x) blend(img, x, y, c, a);
  }
  const int n_lines = static_cast<int>(std::lround(clutter * 10));
  for (int i = 0; i < n_lines; ++i) {
    const double x0 = rng.uniform(0, W), y0 = rng.uniform(0, H);
    const double ang = rng.uniform(0, std::numbers::pi), len = rng.uniform(20, W / 2.0);
    const Rgb c{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
    const int steps = static_cast<int>(len);
    for (int s = 0; s < steps; ++s) {
      const int x = static_cast<int>(x0 + s * std::cos(ang)), y = static_cast<int>(y0 + s * std::sin(ang));
      blend(img, x, y, c, 0.7);
      blend(img, x, y + 1, c, 0.7);
    }
  }
}

// Anti-aliased disc with radial shading and a small highlight.
inline void render_head(Image& img, double cx, double cy, double r, const Rgb& base) {
  const int x0 = static_cast<int>(std::floor(cx - r - 1)), x1 = static_cast<int>(std::ceil(cx + r + 1));
  const int y0 = static_cast<int>(std::floor(cy - r - 1)), y1 = static_cast<int>(std::ceil(cy + r + 1));
  const double hx = cx - 0.35 * r, hy = cy - 0.35 * r;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      const double cover = std::clamp(r + 0.5 - d, 0.0, 1.0);
      if (cover <= 0) continue;
      const double shade = 0.55 + 0.45 * (1.0 - (d / r) * (d / r));
      const double hl = std::exp(-((x - hx) * (x - hx) + (y - hy) * (y - hy)) / (0.15 * r * r + 0.5));
      Rgb c;
      for (int ch = 0; ch < 3; ++ch) c[ch] = std::clamp(base[ch] * shade + 0.35 * hl, 0.0, 1.0);
      blend(img, x, y, c, cover);
    }
}

} // namespace detail

inline SceneRecord gen_scene(const SceneSpec& spec, Rng& rng, std::string id = "scene") {
  spec.validate();
  SceneRecord rec;
  rec.id = std::move(id);
  rec.source = "synthetic";
  rec.image = Image(3, spec.height, spec.width);
  detail::render_background(rec.image, rng, spec.clutter_level);

  const int n = rng.uniform_int(spec.count_min, spec.count_max);
  const double ang = (spec.random_gradient_angle ? rng.uniform(0, 360) : spec.gradient_angle_deg) *
                     std::numbers::pi / 180.0;
  const double dx = std::cos(ang), dy = std::sin(ang);
  // Ramp coordinate t in [0, 1] along the gradient direction.
  const double corners[4] = {0.0, dx * (spec.width - 1), dy * (spec.height - 1),
                             dx * (spec.width - 1) + dy * (spec.height - 1)};
  const double pmin = *std::min_element(corners, corners + 4), pmax = *std::max_element(corners, corners + 4);
  auto ramp = [&](double x, double y) {
    return pmax > pmin ? (dx * x + dy * y - pmin) / (pmax - pmin) : 0.5;
  };

  PointAnnotations ann;
  std::vector<double> radii;
  while (static_cast<int>(ann.points.size()) < n) {
    const double x = rng.uniform(0, spec.width - 1), y = rng.uniform(0, spec.height - 1);
    const double t = ramp(x, y);
    if (rng.uniform() >= (1.0 - spec.gradient_strength) + spec.gradient_strength * t) continue;
    ann.points.push_back({x, y});
    radii.push_back(spec.head_radius_max - (spec.head_radius_max - spec.head_radius_min) * t);
  }
  // Far (small) heads first so near heads occlude them.
  std::vector<std::size_t> order(ann.points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return radii[a] < radii[b]; });
  for (auto i : order) {
    const double tone = rng.uniform(0.05, 0.35);
    const detail::Rgb base{tone + rng.uniform(0.0, 0.15), tone + rng.uniform(0.0, 0.08), tone};
    detail::render_head(rec.image, ann.points[i].x, ann.points[i].y, radii[i] * rng.uniform(0.9, 1.1), base);
  }
  // 8-bit quantization so in-memory scenes equal their PNG round trip.
  for (auto& v : rec.image.vec()) v = detail::to_unit(detail::to_byte(v));
  rec.annotations = std::move(ann);
  return rec;
}

struct SceneCollection {
  std::vector<SceneRecord> records;
  nlohmann::json manifest;
};

inline std::string scene_id(const std::string& prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d", i);
  return prefix + "_" + buf;
}

// Deterministic in (spec, seed). When `dir` is non-empty, writes
// <id>.png + <id>.pts per scene and manifest.json.
inline SceneCollection gen_dataset(const SceneSpec& spec, int n_images, std::uint64_t seed,
                                   const std::filesystem::path& dir = {}, const std::string& prefix = "img") {
  spec.validate();
  if (n_images < 0) throw BadConfig("n_images must be >= 0");
  SceneCollection col;
  nlohmann::json images = nlohmann::json::array();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  for (int i = 0; i < n_images; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    auto rec = gen_scene(spec, rng, scene_id(prefix, i));
    const std::string file = rec.id + ".png";
    if (!dir.empty()) {
      write_png(dir / file, rec.image);
      save_annotations(dir / (rec.id + ".pts"), *rec.annotations);
    }
    images.push_back({{"id", rec.id}, {"file", file}, {"count", rec.annotations->count()}});
    col.records.push_back(std::move(rec));
  }
  nlohmann::json spec_json = spec;
  col.manifest = {{"seed", seed}, {"n_images", n_images}, {"spec", spec_json}, {"images", images}};
  if (!dir.empty()) write_json(dir / "manifest.json", col.manifest);
  return col;
}

} // namespace mrc
