#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mrc/checkpoint.hpp"
#include "mrc/config.hpp"
#include "mrc/datamodel.hpp"
#include "mrc/errors.hpp"
#include "mrc/eval.hpp"
#include "mrc/report.hpp"
#include "mrc/rng.hpp"
#include "mrc/synthgen.hpp"
#include "mrc/trainer.hpp"

namespace mrc::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run provenance

// FNV-1a over the resolved config and the bytes of every input file, in
// sorted path order. Rendered as 16 hex digits.
inline std::string content_hash(const nlohmann::json& resolved, std::vector<fs::path> inputs) {
  std::sort(inputs.begin(), inputs.end());
  std::uint64_t h = fnv1a(resolved.dump());
  for (const auto& p : inputs) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw MissingFile(p.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h = splitmix64(h ^ fnv1a(p.filename().string()));
    h = splitmix64(h ^ fnv1a(bytes));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::vector<fs::path> dataset_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (dir.empty() || !fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(e.path());
  return out;
}

// Writes config.json (resolved), seed.json and provenance.json into `out`.
inline void write_run_record(const fs::path& out, const std::string& command, const nlohmann::json& resolved,
                             std::uint64_t seed, const std::vector<fs::path>& inputs) {
  fs::create_directories(out);
  write_json(out / "config.json", resolved);
  write_json(out / "seed.json", {{"seed", seed}});
  write_json(out / "provenance.json",
             {{"command", command}, {"seed", seed}, {"content_hash", content_hash(resolved, inputs)},
              {"n_inputs", inputs.size()}});
}

// ---------------------------------------------------------------------------
// Data plumbing

inline std::vector<SceneRecord> strip_annotations(std::vector<SceneRecord> rs) {
  for (auto& r : rs) r.annotations.reset();
  return rs;
}

inline TrainData load_train_data(const RunConfig& cfg) {
  if (cfg.data.train_dir.empty()) throw BadConfig("data.train_dir is required");
  auto all = load_dataset(cfg.data.train_dir);
  std::vector<std::string> ids;
  for (const auto& r : all) ids.push_back(r.id);
  Split split;
  if (!cfg.data.split.empty()) {
    const auto spec = split_from_json(read_json(cfg.data.split));
    split = {spec.labeled_ids, spec.unlabeled_ids};
  } else {
    split = make_split(ids, cfg.data.labeled_fraction, cfg.data.split_seed);
  }
  TrainData d;
  std::vector<SceneRecord> labeled;
  for (auto& r : all) {
    if (std::binary_search(split.labeled.begin(), split.labeled.end(), r.id)) labeled.push_back(std::move(r));
    else if (std::binary_search(split.unlabeled.begin(), split.unlabeled.end(), r.id))
      d.unlabeled.push_back(std::move(r));
  }
  d.unlabeled = strip_annotations(std::move(d.unlabeled));
  if (!cfg.data.val_dir.empty()) {
    d.labeled = std::move(labeled);
    d.val = load_dataset(cfg.data.val_dir);
  } else {
    std::tie(d.labeled, d.val) = hold_out_validation(std::move(labeled), cfg.trainer.val_fraction, cfg.trainer.seed);
  }
  return d;
}

struct LoadedModel {
  CountingModel<float> model;
  nn::ParamSet<float> params;
  nlohmann::json meta;
};

// Loads evaluation weights from a checkpoint: "best" when present, else the
// configured eval model.
inline LoadedModel load_model(const fs::path& ckpt) {
  auto ck = load_checkpoint(ckpt);
  const auto& conf = ck.meta.at("config");
  LoadedModel lm{CountingModel<float>(conf.at("model").get<ModelConfig>()), {}, ck.meta};
  const auto eval_model = conf.at("trainer").value("eval_model", std::string("student"));
  for (const char* name : {"best", eval_model.c_str()}) {
    auto it = ck.tensors.find(name);
    if (it != ck.tensors.end()) {
      lm.params = std::move(it->second);
      return lm;
    }
  }
  throw MalformedRecord(ckpt.string() + ": no parameter section to evaluate");
}

// ---------------------------------------------------------------------------
// Training workflow

struct TrainOutcome {
  fs::path dir;
  double test_mae = std::numeric_limits<double>::quiet_NaN();
  double test_mse = std::numeric_limits<double>::quiet_NaN();
  std::int64_t steps = 0;
};

inline TrainOutcome train_run(const RunConfig& cfg, const nlohmann::json& resolved, const fs::path& out,
                              const fs::path& resume = {}, std::ostream* progress = nullptr) {
  std::vector<fs::path> inputs = dataset_files(cfg.data.train_dir);
  for (const auto& dir : {cfg.data.val_dir, cfg.data.test_dir})
    for (auto& p : dataset_files(dir)) inputs.push_back(p);
  if (!cfg.data.split.empty()) inputs.push_back(cfg.data.split);
  write_run_record(out, "train", resolved, cfg.trainer.seed, inputs);

  Trainer trainer(cfg.model, cfg.trainer, load_train_data(cfg));
  if (!resume.empty()) trainer.load(resume);
  std::ofstream steps(out / "steps.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  std::ofstream epochs(out / "epochs.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!steps || !epochs) throw IoError("cannot write logs under " + out.string());
  TrainOutcome res{out};
  trainer.train(
      out / "checkpoints",
      [&](const StepLog& s) {
        steps << to_json(s).dump() << '\n';
        ++res.steps;
      },
      [&](const EpochLog& e) {
        epochs << to_json(e).dump() << '\n';
        epochs.flush();
        steps.flush();
        if (progress) {
          *progress << "epoch " << e.epoch << " loss " << e.mean_total;
          if (e.val) *progress << " val_mae " << e.val->mae;
          *progress << '\n';
        }
      });

  if (!cfg.data.test_dir.empty()) {
    const auto test = load_dataset(cfg.data.test_dir);
    const auto result = evaluate(trainer.model(), trainer.best_params(), test);
    report(result, {}, out / "test");
    res.test_mae = result.metrics.mae;
    res.test_mse = result.metrics.mse;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablation plans

struct AblationCell {
  std::string name;
  std::vector<std::string> overrides;
};

inline std::vector<AblationCell> ablation_plan(const std::string& plan) {
  std::vector<AblationCell> cells;
  auto num = [](double v) { return detail::fmt_double(v); };
  if (plan == "lambda_u") {
    for (double l : {0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0, 1.5, 2.0})
      cells.push_back({"lambda_u=" + num(l), {"trainer.lambda_u=" + num(l)}});
  } else if (plan == "mask") {
    for (int p : {8, 16, 32, 64})
      for (double r : {0.1, 0.3, 0.5, 0.7})
        cells.push_back({"patch=" + std::to_string(p) + ",ratio=" + num(r),
                         {"trainer.mask_patch_size=" + std::to_string(p), "trainer.mask_ratio=" + num(r)}});
  } else if (plan == "heads") {
    cells = {{"Ls_reg", {"trainer.lambda_u=0", "trainer.lambda_s_cls=0"}},
             {"Ls_reg+Ls_cls", {"trainer.lambda_u=0"}},
             {"Ls+Lu_reg", {"trainer.unsup_cls=false"}},
             {"Ls+Lu_cls", {"trainer.unsup_reg=false"}},
             {"Ls+Lu_reg+Lu_cls", {}}};
  } else if (plan == "masking") {
    cells = {{"without_mask", {"trainer.use_mask=false"}}, {"with_mask", {}}};
  } else {
    throw BadConfig("unknown ablation plan '" + plan + "' (lambda_u|mask|heads|masking)");
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Entry point

inline std::vector<double> parse_fractions(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(detail::parse_coord(f, "--fractions"));
  if (out.empty()) throw BadConfig("--fractions is empty");
  return out;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Semi-supervised crowd counting with masked consistency"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config_path, out_dir;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  auto common = [&](CLI::App* sc, bool with_config) {
    if (with_config) {
      sc->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
      sc->add_option("--set", sets, "override KEY=VALUE (repeatable)")->take_all();
      sc->add_flag("--deterministic", deterministic, "single-threaded, fixed reduction order");
    }
    sc->add_option("--out", out_dir, "output directory")->required();
    sc->add_option("--seed", seed, "random seed");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  int n_images = 160;
  std::string spec_path, prefix = "img";
  std::vector<std::string> spec_sets;
  common(synth, false);
  synth->add_option("--n", n_images, "number of images")->check(CLI::NonNegativeNumber);
  synth->add_option("--spec", spec_path, "SceneSpec JSON")->check(CLI::ExistingFile);
  synth->add_option("--set", spec_sets, "override a SceneSpec field KEY=VALUE")->take_all();
  synth->add_option("--prefix", prefix, "id prefix");

  // split
  auto* split = app.add_subcommand("split", "materialize a labeled/unlabeled split");
  std::string data_dir;
  double fraction = 0.05;
  common(split, false);
  split->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  split->add_option("--fraction", fraction, "labeled fraction");

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string resume;
  common(train, true);
  train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt;
  bool flip = false;
  common(eval, false);
  eval->add_option("--checkpoint", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_flag("--flip-average", flip, "average with the mirrored prediction");

  // probe
  auto* probe = app.add_subcommand("probe", "robustness curves under blur/mask corruption");
  std::string kinds = "blur,mask", fractions = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
  int patch = 32;
  common(probe, false);
  probe->add_option("--checkpoint", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  probe->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  probe->add_option("--kind", kinds, "blur, mask or both (comma separated)");
  probe->add_option("--fractions", fractions, "comma-separated corrupted fractions");
  probe->add_option("--patch", patch, "patch side in pixels")->check(CLI::PositiveNumber);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run an ablation grid and write a combined CSV");
  std::string plan;
  common(ablate, true);
  ablate->add_option("--plan", plan, "lambda_u | mask | heads | masking")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    const fs::path outp(out_dir);
    if (deterministic) Eigen::setNbThreads(1);
    auto resolve = [&](nlohmann::json& resolved) {
      auto all = sets;
      if (seed) all.push_back("trainer.seed=" + std::to_string(*seed));
      if (deterministic) all.push_back("trainer.deterministic=true");
      return resolve_config(config_path, all, &resolved);
    };

    if (*synth) {
      nlohmann::json tree = SceneSpec{};
      if (!spec_path.empty()) detail::merge_strict(tree, read_json(spec_path), "");
      for (const auto& s : spec_sets) apply_override(tree, s);
      SceneSpec spec;
      try {
        spec = tree.get<SceneSpec>();
      } catch (const nlohmann::json::exception& e) {
        throw BadConfig(std::string("scene spec: ") + e.what());
      }
      const auto s = seed.value_or(spec.seed);
      spec.seed = s;
      const auto col = gen_dataset(spec, n_images, s, outp, prefix);
      nlohmann::json resolved = {{"spec", spec}, {"n_images", n_images}, {"prefix", prefix}};
      write_run_record(outp / "run", "synth", resolved, s, {outp / "manifest.json"});
      out << "wrote " << col.records.size() << " scenes to " << outp.string() << '\n';
    } else if (*split) {
      std::vector<std::string> ids;
      for (const auto& e : list_dataset(data_dir)) ids.push_back(e.id);
      const auto s = seed.value_or(0);
      const auto spec = materialize(ids, fraction, s);
      fs::create_directories(outp);
      write_json(outp / "split.json", to_json(spec));
      nlohmann::json resolved = {{"data", data_dir}, {"fraction", fraction}};
      write_run_record(outp, "split", resolved, s, dataset_files(data_dir));
      out << spec.labeled_ids.size() << " labeled, " << spec.unlabeled_ids.size() << " unlabeled\n";
    } else if (*train) {
      nlohmann::json resolved;
      const auto cfg = resolve(resolved);
      const auto res = train_run(cfg, resolved, outp, resume, &err);
      out << "steps " << res.steps;
      if (std::isfinite(res.test_mae)) out << " test_mae " << res.test_mae << " test_mse " << res.test_mse;
      out << '\n';
    } else if (*eval) {
      const auto lm = load_model(ckpt);
      const auto records = load_dataset(data_dir);
      const auto result = evaluate(lm.model, lm.params, records, flip);
      report(result, {}, outp);
      nlohmann::json resolved = {{"checkpoint", ckpt}, {"data", data_dir}, {"flip_average", flip}};
      auto inputs = dataset_files(data_dir);
      inputs.push_back(ckpt);
      write_run_record(outp, "eval", resolved, seed.value_or(0), inputs);
      out << "mae " << result.metrics.mae << " mse " << result.metrics.mse << '\n';
    } else if (*probe) {
      const auto lm = load_model(ckpt);
      const auto records = load_dataset(data_dir);
      const auto fr = parse_fractions(fractions);
      ProbeParams pp{patch, 50.0 / 255.0, seed.value_or(0)};
      std::vector<Curve> curves;
      std::stringstream ks(kinds);
      for (std::string k; std::getline(ks, k, ',');) {
        if (k == "blur") curves.push_back(blur_probe(lm.model, lm.params, records, fr, pp));
        else if (k == "mask") curves.push_back(mask_probe(lm.model, lm.params, records, fr, pp));
        else throw BadConfig("unknown probe kind '" + k + "'");
      }
      const auto clean = evaluate(lm.model, lm.params, records);
      report(clean, curves, outp);
      nlohmann::json resolved = {{"checkpoint", ckpt}, {"data", data_dir}, {"kinds", kinds},
                                 {"fractions", fr},    {"patch", patch}};
      auto inputs = dataset_files(data_dir);
      inputs.push_back(ckpt);
      write_run_record(outp, "probe", resolved, pp.seed, inputs);
      for (const auto& c : curves)
        for (const auto& p : c.points) out << c.name << ' ' << p.fraction << " mae " << p.mae << '\n';
    } else if (*ablate) {
      const auto cells = ablation_plan(plan);
      nlohmann::json base;
      resolve(base);
      fs::create_directories(outp);
      std::ofstream csv(outp / "ablation.csv");
      if (!csv) throw IoError("cannot write " + (outp / "ablation.csv").string());
      csv << "plan,cell,overrides,test_mae,test_mse\n";
      for (std::size_t i = 0; i < cells.size(); ++i) {
        auto all = sets;
        if (seed) all.push_back("trainer.seed=" + std::to_string(*seed));
        for (const auto& o : cells[i].overrides) all.push_back(o);
        nlohmann::json resolved;
        const auto cfg = resolve_config(config_path, all, &resolved);
        char dirname[16];
        std::snprintf(dirname, sizeof dirname, "cell_%02zu", i);
        const auto res = train_run(cfg, resolved, outp / dirname);
        std::string ov;
        for (const auto& o : cells[i].overrides) ov += (ov.empty() ? "" : ";") + o;
        csv << plan << ",\"" << cells[i].name << "\"," << ov << ',' << detail::fmt_double(res.test_mae) << ','
            << detail::fmt_double(res.test_mse) << '\n';
        csv.flush();
        out << cells[i].name << " test_mae " << res.test_mae << '\n';
      }
      write_run_record(outp, "ablate", {{"plan", plan}, {"base", base}}, base["trainer"]["seed"].get<std::uint64_t>(),
                       dataset_files(base["data"]["train_dir"].get<std::string>()));
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

} // namespace mrc::cli
