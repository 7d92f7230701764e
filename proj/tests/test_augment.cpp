#include "doctest.h"

#include <set>

#include "mrc/augment.hpp"

using namespace mrc;

namespace {

SceneRecord random_record(int h, int w, int n, Rng& rng) {
  SceneRecord r;
  r.id = "r";
  r.image = Image(3, h, w);
  for (auto& v : r.image.vec()) v = static_cast<float>(rng.uniform());
  PointAnnotations a;
  for (int i = 0; i < n; ++i) a.points.push_back({rng.uniform(0, w - 1), rng.uniform(0, h - 1)});
  r.annotations = a;
  return r;
}

} // namespace

TEST_CASE("mask size is round(ratio * patches) and patches are distinct") {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    auto m = sample_mask(256, 32, 0.3, rng);
    CHECK(m.masked.size() == 19);
    std::set<PatchIndex> s(m.masked.begin(), m.masked.end());
    CHECK(s.size() == 19);
    CHECK(std::is_sorted(m.masked.begin(), m.masked.end()));
  }
  CHECK(sample_mask(256, 32, 0.0, rng).masked.empty());
  CHECK(sample_mask(256, 32, 1.0, rng).masked.size() == 64);
  CHECK(sample_mask(128, 64, 0.5, rng).masked.size() == 2);
}

TEST_CASE("mask geometry errors") {
  Rng rng(2);
  CHECK_THROWS_AS(sample_mask(256, 20, 0.3, rng), BadGeometry);
  CHECK_THROWS_AS(sample_mask(100, 32, 0.3, rng), BadGeometry);
  CHECK_THROWS_AS(sample_mask(256, 32, 1.5, rng), BadGeometry);
  auto m = sample_mask(128, 32, 0.3, rng);
  CHECK_THROWS_AS(apply_mask(Image(3, 256, 256), m), GeometryMismatch);
}

TEST_CASE("output grid cells cover exactly the masked pixels") {
  Rng rng(3);
  for (int patch : {8, 16, 32, 64}) {
    auto m = sample_mask(256, patch, 0.3, rng);
    auto cells = mask_to_output_grid(m);
    CHECK(cells.size() == m.masked.size() * (patch / 8) * (patch / 8));
    Image ones(1, 256, 256);
    std::fill(ones.vec().begin(), ones.vec().end(), 1.0f);
    auto masked = apply_mask(ones, m);
    auto cm = output_cell_mask(m);
    for (int y = 0; y < 256; ++y)
      for (int x = 0; x < 256; ++x) CHECK((masked.at(y, x) == 0.0f) == (cm.at(y / 8, x / 8) == 1.0f));
  }
}

TEST_CASE("mask json round trip") {
  Rng rng(4);
  auto m = sample_mask(128, 32, 0.5, rng);
  CHECK(mask_from_json(to_json(m)) == m);
}

TEST_CASE("apply_transform keeps points on their pixels") {
  Rng rng(5);
  auto r = random_record(96, 80, 30, rng);
  TransformRecord t{true, 1.0, 8, 16, 64};
  auto v = apply_transform(r, t);
  CHECK(v.image.height() == 64);
  for (const auto& p : v.points->points) {
    CHECK(p.x >= 0);
    CHECK(p.x <= 63);
    CHECK(p.y >= 0);
    CHECK(p.y <= 63);
  }
  // pixel check: with unit scale a flipped-then-cropped pixel is a source pixel
  CHECK(v.image(0, 5, 7) == r.image(0, 16 + 5, 80 - 1 - (8 + 7)));
}

TEST_CASE("identity transform is exact") {
  Rng rng(6);
  auto r = random_record(64, 64, 10, rng);
  auto v = apply_transform(r, {false, 1.0, 0, 0, 64});
  CHECK(v.image == r.image);
  CHECK(v.points->points.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(v.points->points[i].x == r.annotations->points[i].x);
    CHECK(v.points->points[i].y == r.annotations->points[i].y);
  }
}

TEST_CASE("weak augment yields crop-size views and is seed-deterministic") {
  Rng a(7), b(7), g(8);
  auto r = random_record(100, 140, 20, g);
  auto v1 = weak_augment(r, 64, a), v2 = weak_augment(r, 64, b);
  CHECK(v1.image.height() == 64);
  CHECK(v1.image.width() == 64);
  CHECK(v1.image == v2.image);
  Rng c(9);
  auto small = random_record(64, 64, 5, g);
  auto v3 = weak_augment(small, 96, c); // upscaled to fit the crop
  CHECK(v3.image.height() == 96);
}

TEST_CASE("color jitter: zero strength is identity, gray stays gray, range clipped") {
  Rng rng(10);
  auto r = random_record(16, 16, 0, rng);
  CHECK(color_jitter(r.image, rng, JitterStrength::none()) == r.image);
  Image gray(3, 4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) gray(c, y, x) = 0.1f * (x + y);
  JitterStrength hs{0, 0, 0.4, 0.1};
  auto j = color_jitter(gray, rng, hs);
  CHECK(j == gray);
  auto k = color_jitter(r.image, rng, JitterStrength{0.9, 0.9, 0.9, 0.5});
  for (float v : k.vec()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}
