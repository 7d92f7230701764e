#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "mrc/groundtruth.hpp"
#include "mrc/synthgen.hpp"

using namespace mrc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("scene counts stay within the configured range") {
  SceneSpec s;
  s.count_min = s.count_max = 50;
  Rng rng(1);
  auto r = gen_scene(s, rng);
  CHECK(r.annotations->count() == 50);
  for (const auto& p : r.annotations->points) {
    CHECK(p.x >= 0);
    CHECK(p.x <= s.width - 1);
  }
  CHECK(output_density(*r.annotations, r.height(), r.width(), KernelKind::Fixed).values.sum() ==
        doctest::Approx(50.0).epsilon(1e-5));
  s.count_min = s.count_max = 0;
  Rng rng2(2);
  CHECK(gen_scene(s, rng2).annotations->count() == 0);
}

TEST_CASE("density gradient places more heads at the dense end") {
  SceneSpec s;
  s.random_gradient_angle = false;
  s.gradient_angle_deg = 90; // denser toward the bottom
  s.gradient_strength = 1.0;
  s.count_min = s.count_max = 400;
  Rng rng(3);
  auto r = gen_scene(s, rng);
  int top = 0, bottom = 0;
  for (const auto& p : r.annotations->points) (p.y < s.height / 2.0 ? top : bottom)++;
  CHECK(bottom > 2 * top);
}

TEST_CASE("dataset generation is byte-deterministic") {
  auto a = fs::temp_directory_path() / "mrc_synth_a", b = fs::temp_directory_path() / "mrc_synth_b";
  fs::remove_all(a);
  fs::remove_all(b);
  SceneSpec s;
  s.width = s.height = 64;
  s.count_min = 0;
  s.count_max = 30;
  auto ca = gen_dataset(s, 6, 11, a);
  gen_dataset(s, 6, 11, b);
  for (const auto& r : ca.records) {
    CHECK(slurp(a / (r.id + ".png")) == slurp(b / (r.id + ".png")));
    CHECK(slurp(a / (r.id + ".pts")) == slurp(b / (r.id + ".pts")));
    auto back = load_record(a / (r.id + ".png"));
    CHECK(back.image == r.image);
    CHECK(back.annotations->count() == r.annotations->count());
  }
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  CHECK(list_dataset(a).size() == 6);
}

TEST_CASE("count histogram spans the configured range") {
  SceneSpec s;
  s.width = s.height = 64;
  s.count_min = 5;
  s.count_max = 40;
  auto c = gen_dataset(s, 80, 5);
  std::size_t lo = 1000, hi = 0;
  for (const auto& r : c.records) {
    lo = std::min(lo, r.annotations->count());
    hi = std::max(hi, r.annotations->count());
  }
  CHECK(lo >= 5);
  CHECK(hi <= 40);
  CHECK(lo <= 10);
  CHECK(hi >= 35);
}

TEST_CASE("scene spec validation") {
  SceneSpec s;
  s.head_radius_min = 0.5;
  CHECK_THROWS_AS(s.validate(), BadConfig);
  s = {};
  s.count_max = -1;
  CHECK_THROWS_AS(s.validate(), BadConfig);
}
