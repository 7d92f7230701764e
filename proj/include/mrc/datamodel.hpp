#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mrc/errors.hpp"
#include "mrc/image_io.hpp"
#include "mrc/rng.hpp"
#include "mrc/tensor.hpp"

namespace mrc {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

// Head locations in pixel coordinates, x along the width.
struct PointAnnotations {
  std::vector<Point> points;
  std::size_t count() const noexcept { return points.size(); }
};

struct SceneRecord {
  Image image;
  std::optional<PointAnnotations> annotations; // absent for unlabeled scenes
  std::string id;
  std::string source;

  int height() const noexcept { return image.height(); }
  int width() const noexcept { return image.width(); }
  bool labeled() const noexcept { return annotations.has_value(); }
};

inline constexpr int kMaxImageSide = 1920;
inline constexpr int kMinImageSide = 64;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_coord(const std::string& field, const std::string& where) {
  const std::string f = trim(field);
  double v = 0.0;
  const auto* end = f.data() + f.size();
  auto [ptr, ec] = std::from_chars(f.data(), end, v);
  if (ec != std::errc() || ptr != end) throw MalformedRecord(where + ": not a number: '" + f + "'");
  if (!std::isfinite(v)) throw MalformedRecord(where + ": non-finite coordinate '" + f + "'");
  return v;
}

} // namespace detail

// Parses a `.pts` sidecar: one "x,y" pair per line. Blank lines are skipped.
inline PointAnnotations parse_annotations(std::istream& in, const std::string& name = "<stream>") {
  PointAnnotations ann;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto comma = line.find(',');
    const std::string where = name + ":" + std::to_string(lineno);
    if (comma == std::string::npos) throw MalformedRecord(where + ": expected 'x,y'");
    if (line.find(',', comma + 1) != std::string::npos)
      throw MalformedRecord(where + ": too many fields");
    const double x = detail::parse_coord(line.substr(0, comma), where + " field x");
    const double y = detail::parse_coord(line.substr(comma + 1), where + " field y");
    ann.points.push_back({x, y});
  }
  return ann;
}

inline PointAnnotations load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile(path.string());
  return parse_annotations(in, path.string());
}

inline void save_annotations(const std::filesystem::path& path, const PointAnnotations& ann) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  char buf[64];
  for (const auto& p : ann.points) {
    // Shortest round-trip representation keeps files byte-stable.
    auto r = std::to_chars(buf, buf + sizeof buf, p.x);
    *r.ptr++ = ',';
    r = std::to_chars(r.ptr, buf + sizeof buf, p.y);
    *r.ptr++ = '\n';
    out.write(buf, r.ptr - buf);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& image_path) {
  auto p = image_path;
  p.replace_extension(".pts");
  return p;
}

// Loads an image and, when present, its `.pts` sidecar.
inline SceneRecord load_record(const std::filesystem::path& image_path, std::string source = {}) {
  SceneRecord rec;
  rec.image = read_image(image_path);
  rec.id = image_path.stem().string();
  rec.source = std::move(source);
  const auto pts = sidecar_path(image_path);
  if (std::filesystem::exists(pts)) rec.annotations = load_annotations(pts);
  return rec;
}

// Keeps points inside [0, W-1] x [0, H-1]; edge points move inward.
inline void clamp_points(PointAnnotations& ann, int height, int width) {
  for (auto& p : ann.points) {
    p.x = std::clamp(p.x, 0.0, static_cast<double>(width - 1));
    p.y = std::clamp(p.y, 0.0, static_cast<double>(height - 1));
  }
}

inline SceneRecord resize_to_limit(const SceneRecord& record, int max_side = kMaxImageSide) {
  const int h = record.height(), w = record.width();
  const int longer = std::max(h, w);
  if (longer <= max_side) return record;
  const double s = static_cast<double>(max_side) / longer;
  const int nh = std::max(1, static_cast<int>(std::lround(h * s)));
  const int nw = std::max(1, static_cast<int>(std::lround(w * s)));
  SceneRecord out;
  out.id = record.id;
  out.source = record.source;
  out.image = resize_bilinear(record.image, nh, nw);
  if (record.annotations) {
    PointAnnotations ann = *record.annotations;
    for (auto& p : ann.points) {
      p.x *= s;
      p.y *= s;
    }
    clamp_points(ann, nh, nw);
    out.annotations = std::move(ann);
  }
  return out;
}

struct SplitSpec {
  double labeled_fraction = 0.05;
  std::uint64_t seed = 0;
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
};

struct Split {
  std::vector<std::string> labeled;
  std::vector<std::string> unlabeled;
};

// Seed-deterministic partition. Ids are sorted first so the result depends
// on the id set, not its order.
inline Split make_split(std::vector<std::string> ids, double labeled_fraction, std::uint64_t seed) {
  if (ids.empty()) throw EmptyDataset("make_split: no ids");
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0))
    throw BadConfig("labeled_fraction must lie in (0, 1]");
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(ids.begin(), ids.end());
  const auto n_lab = static_cast<std::size_t>(std::llround(labeled_fraction * ids.size()));
  Split s;
  s.labeled.assign(ids.begin(), ids.begin() + n_lab);
  s.unlabeled.assign(ids.begin() + n_lab, ids.end());
  std::sort(s.labeled.begin(), s.labeled.end());
  std::sort(s.unlabeled.begin(), s.unlabeled.end());
  return s;
}

inline SplitSpec materialize(const std::vector<std::string>& ids, double fraction, std::uint64_t seed) {
  auto s = make_split(ids, fraction, seed);
  return {fraction, seed, std::move(s.labeled), std::move(s.unlabeled)};
}

inline nlohmann::json to_json(const SplitSpec& s) {
  return {{"seed", s.seed},
          {"labeled_fraction", s.labeled_fraction},
          {"labeled_ids", s.labeled_ids},
          {"unlabeled_ids", s.unlabeled_ids}};
}

inline SplitSpec split_from_json(const nlohmann::json& j) {
  try {
    SplitSpec s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.labeled_fraction = j.at("labeled_fraction").get<double>();
    s.labeled_ids = j.at("labeled_ids").get<std::vector<std::string>>();
    s.unlabeled_ids = j.at("unlabeled_ids").get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw MalformedRecord(std::string("split manifest: ") + e.what());
  }
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile(path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw MalformedRecord(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

// A dataset directory holds `<id>.png` + `<id>.pts` pairs and a
// `manifest.json` listing ids in generation order.
struct DatasetEntry {
  std::string id;
  std::filesystem::path image;
  std::size_t count = 0;
};

inline std::vector<DatasetEntry> list_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw MissingFile(dir.string());
  std::vector<DatasetEntry> out;
  const auto manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    const auto j = read_json(manifest);
    for (const auto& e : j.at("images")) {
      DatasetEntry d;
      d.id = e.at("id").get<std::string>();
      d.image = dir / e.at("file").get<std::string>();
      d.count = e.value("count", std::size_t{0});
      out.push_back(std::move(d));
    }
    return out;
  }
  for (const auto& ent : fs::directory_iterator(dir)) {
    auto ext = ent.path().extension().string();
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg")
      out.push_back({ent.path().stem().string(), ent.path(), 0});
  }
  std::sort(out.begin(), out.end(), [](auto& a, auto& b) { return a.id < b.id; });
  return out;
}

inline std::vector<SceneRecord> load_dataset(const std::filesystem::path& dir,
                                             const std::string& source = {}) {
  std::vector<SceneRecord> recs;
  for (const auto& e : list_dataset(dir)) {
    auto r = resize_to_limit(load_record(e.image, source));
    r.id = e.id;
    recs.push_back(std::move(r));
  }
  return recs;
}

} // namespace mrc
