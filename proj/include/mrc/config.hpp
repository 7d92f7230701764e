#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mrc/datamodel.hpp"
#include "mrc/errors.hpp"
#include "mrc/model.hpp"
#include "mrc/trainer.hpp"

namespace mrc {

struct DataConfig {
  std::string train_dir;
  std::string val_dir;   // empty: hold out trainer.val_fraction of the labeled images
  std::string test_dir;
  std::string split;     // split JSON; empty: derive from labeled_fraction
  double labeled_fraction = 0.05;
  std::uint64_t split_seed = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, train_dir, val_dir, test_dir, split, labeled_fraction,
                                                split_seed)

struct RunConfig {
  ModelConfig model;
  TrainConfig trainer;
  DataConfig data;

  void validate() const {
    model.validate();
    trainer.validate();
    if (!(data.labeled_fraction > 0 && data.labeled_fraction <= 1))
      throw BadConfig("data.labeled_fraction must lie in (0, 1]");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"model", c.model}, {"trainer", c.trainer}, {"data", c.data}};
}

namespace detail {

// Copies `src` over `dst`, rejecting any key `dst` does not already have.
inline void merge_strict(nlohmann::json& dst, const nlohmann::json& src, const std::string& where) {
  if (!src.is_object()) throw BadConfig(where + ": expected an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!dst.contains(it.key())) throw BadConfig("unknown config key '" + key + "'");
    auto& d = dst[it.key()];
    if (d.is_object()) merge_strict(d, it.value(), key);
    else d = it.value();
  }
}

// Literal JSON if it parses ("0", "true", "[1,2]"), otherwise a plain string.
inline nlohmann::json parse_value(const std::string& text) {
  auto v = nlohmann::json::parse(text, nullptr, false);
  if (v.is_discarded()) return text;
  return v;
}

} // namespace detail

// Applies "section.key=value" to a resolved config tree.
inline void apply_override(nlohmann::json& tree, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw BadConfig("override must be KEY=VALUE: " + std::string(assignment));
  const std::string key(assignment.substr(0, eq));
  const std::string value(assignment.substr(eq + 1));
  nlohmann::json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw BadConfig("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw BadConfig("override targets a section: " + key);
  auto v = detail::parse_value(value);
  // Keep string-typed fields strings ("1:3" must not turn into something else).
  if (node->is_string() && !v.is_string()) v = value;
  if (node->is_number() && !v.is_number()) throw BadConfig("override " + key + " expects a number");
  if (node->is_boolean() && !v.is_boolean()) throw BadConfig("override " + key + " expects true/false");
  *node = std::move(v);
}

inline RunConfig config_from_json(const nlohmann::json& tree) {
  RunConfig c;
  try {
    c.model = tree.at("model").get<ModelConfig>();
    c.trainer = tree.at("trainer").get<TrainConfig>();
    c.data = tree.at("data").get<DataConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw BadConfig(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

// Defaults <- file <- overrides, strictly keyed.
inline RunConfig resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                                nlohmann::json* resolved = nullptr) {
  nlohmann::json tree = to_json(RunConfig{});
  if (!file.empty()) {
    nlohmann::json user;
    try {
      user = read_json(file);
    } catch (const nlohmann::json::exception& e) {
      throw BadConfig(file.string() + ": " + e.what());
    }
    detail::merge_strict(tree, user, "");
  }
  for (const auto& o : overrides) apply_override(tree, o);
  auto cfg = config_from_json(tree);
  if (resolved) *resolved = to_json(cfg);
  return cfg;
}

} // namespace mrc
