#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mrc/datamodel.hpp"

using namespace mrc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mrc_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

} // namespace

TEST_CASE("annotation parsing") {
  std::istringstream ok("1.5,2\n\n3, 4.25\n10,0\n");
  CHECK(parse_annotations(ok).count() == 3);
  std::istringstream empty("");
  CHECK(parse_annotations(empty).count() == 0);
  std::istringstream nan("NaN, 12\n");
  CHECK_THROWS_AS(parse_annotations(nan), MalformedRecord);
  std::istringstream junk("1,2\nabc,3\n");
  try {
    parse_annotations(junk, "f.pts");
    FAIL("expected MalformedRecord");
  } catch (const MalformedRecord& e) {
    CHECK(std::string(e.what()).find("f.pts:2") != std::string::npos);
  }
  std::istringstream three("1,2,3\n");
  CHECK_THROWS_AS(parse_annotations(three), MalformedRecord);
  CHECK_THROWS_AS(load_annotations("/nonexistent/x.pts"), MissingFile);
}

TEST_CASE("annotations round-trip through the sidecar format") {
  auto d = temp_dir("pts");
  PointAnnotations a{{{0.1, 2.0 / 3.0}, {100.25, 7}}};
  save_annotations(d / "a.pts", a);
  auto b = load_annotations(d / "a.pts");
  REQUIRE(b.count() == 2);
  CHECK(b.points[0] == a.points[0]);
  CHECK(b.points[1] == a.points[1]);
}

TEST_CASE("resize_to_limit") {
  SceneRecord r;
  r.image = Image(3, 216, 384);
  r.annotations = PointAnnotations{{{100, 50}, {383, 215}}};
  auto s = resize_to_limit(r, 192);
  CHECK(s.width() == 192);
  CHECK(s.height() == 108);
  CHECK(s.annotations->points[0].x == 50);
  CHECK(s.annotations->points[0].y == 25);
  CHECK(s.annotations->points[1].x <= 191);
  CHECK(s.annotations->count() == 2);
  auto same = resize_to_limit(r, 384);
  CHECK(same.width() == 384);
}

TEST_CASE("splits are sized, disjoint and order independent") {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("id" + std::to_string(i));
  auto a = make_split(ids, 0.05, 7);
  CHECK(a.labeled.size() == 5);
  CHECK(a.unlabeled.size() == 95);
  auto rev = ids;
  std::reverse(rev.begin(), rev.end());
  auto b = make_split(rev, 0.05, 7);
  CHECK(a.labeled == b.labeled);
  for (const auto& l : a.labeled) CHECK(!std::binary_search(a.unlabeled.begin(), a.unlabeled.end(), l));
  CHECK(make_split(ids, 1.0, 3).unlabeled.empty());
  CHECK(make_split(ids, 0.05, 8).labeled != a.labeled);
  CHECK_THROWS_AS(make_split({}, 0.1, 1), EmptyDataset);
  CHECK_THROWS_AS(make_split(ids, 0.0, 1), BadConfig);
}

TEST_CASE("split manifest round trip") {
  auto d = temp_dir("split");
  auto s = materialize({"a", "b", "c", "d"}, 0.5, 2);
  write_json(d / "s.json", to_json(s));
  auto t = split_from_json(read_json(d / "s.json"));
  CHECK(t.labeled_ids == s.labeled_ids);
  CHECK(t.unlabeled_ids == s.unlabeled_ids);
  CHECK(t.seed == 2);
  CHECK_THROWS_AS(split_from_json(nlohmann::json{{"seed", 1}}), MalformedRecord);
}

TEST_CASE("png round trip and missing files") {
  auto d = temp_dir("png");
  Image img(3, 4, 5);
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = static_cast<float>(i % 256) / 255.0f;
  write_png(d / "x.png", img);
  CHECK(read_image(d / "x.png") == img);
  CHECK_THROWS_AS(read_image(d / "missing.png"), MissingFile);
  std::ofstream(d / "bad.png") << "not a png";
  CHECK_THROWS_AS(read_image(d / "bad.png"), MalformedRecord);
}
