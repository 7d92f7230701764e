#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mrc/augment.hpp"
#include "mrc/checkpoint.hpp"
#include "mrc/datamodel.hpp"
#include "mrc/errors.hpp"
#include "mrc/eval.hpp"
#include "mrc/groundtruth.hpp"
#include "mrc/losses.hpp"
#include "mrc/model.hpp"
#include "mrc/optim.hpp"
#include "mrc/rng.hpp"

namespace mrc {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  std::string labeled_unlabeled_ratio = "1:3";
  double learning_rate = 1e-5;
  double weight_decay = 1e-4;
  int crop_size = 256;
  int mask_patch_size = 32;
  double mask_ratio = 0.3;
  bool use_mask = true;   // false: consistency over every cell of an unmasked strong view
  bool unsup_reg = true;  // L^u_reg term
  bool unsup_cls = true;  // L^u_cls term
  std::uint64_t seed = 0;
  double ema_momentum = 0.999;
  double grad_clip = 10.0;
  double jitter_brightness = 0.4;
  double jitter_contrast = 0.4;
  double jitter_saturation = 0.4;
  double jitter_hue = 0.1;
  std::string kernel = "fixed"; // "fixed" | "adaptive"
  double val_fraction = 0.1;
  std::string eval_model = "student"; // "student" | "teacher"
  bool deterministic = true;
  LossWeights loss;

  std::pair<int, int> ratio() const {
    const auto colon = labeled_unlabeled_ratio.find(':');
    if (colon == std::string::npos) throw BadConfig("ratio must look like 'a:b'");
    int a = 0, b = 0;
    const auto& s = labeled_unlabeled_ratio;
    auto r1 = std::from_chars(s.data(), s.data() + colon, a);
    auto r2 = std::from_chars(s.data() + colon + 1, s.data() + s.size(), b);
    if (r1.ec != std::errc() || r2.ec != std::errc() || r1.ptr != s.data() + colon ||
        r2.ptr != s.data() + s.size() || a <= 0 || b < 0)
      throw BadConfig("bad labeled_unlabeled_ratio '" + s + "'");
    return {a, b};
  }

  KernelKind kernel_kind() const {
    if (kernel == "fixed") return KernelKind::Fixed;
    if (kernel == "adaptive") return KernelKind::Adaptive;
    throw BadConfig("kernel must be 'fixed' or 'adaptive'");
  }

  JitterStrength jitter() const { return {jitter_brightness, jitter_contrast, jitter_saturation, jitter_hue}; }

  void validate() const {
    if (epochs < 0 || batch_size <= 0 || crop_size <= 0) throw BadConfig("sizes must be positive");
    if (crop_size % mask_patch_size != 0) throw BadConfig("crop_size must be divisible by mask_patch_size");
    if (mask_patch_size % kOutputStride != 0) throw BadConfig("mask_patch_size must be a multiple of 8");
    if (!(ema_momentum >= 0.0 && ema_momentum < 1.0)) throw BadConfig("ema_momentum must lie in [0, 1)");
    if (learning_rate < 0 || weight_decay < 0) throw BadConfig("learning_rate/weight_decay must be >= 0");
    if (eval_model != "student" && eval_model != "teacher") throw BadConfig("eval_model must be student|teacher");
    ratio();
    kernel_kind();
    loss.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"labeled_unlabeled_ratio", c.labeled_unlabeled_ratio},
                     {"learning_rate", c.learning_rate},
                     {"weight_decay", c.weight_decay},
                     {"crop_size", c.crop_size},
                     {"mask_patch_size", c.mask_patch_size},
                     {"mask_ratio", c.mask_ratio},
                     {"use_mask", c.use_mask},
                     {"unsup_reg", c.unsup_reg},
                     {"unsup_cls", c.unsup_cls},
                     {"seed", c.seed},
                     {"ema_momentum", c.ema_momentum},
                     {"grad_clip", c.grad_clip},
                     {"jitter_brightness", c.jitter_brightness},
                     {"jitter_contrast", c.jitter_contrast},
                     {"jitter_saturation", c.jitter_saturation},
                     {"jitter_hue", c.jitter_hue},
                     {"kernel", c.kernel},
                     {"val_fraction", c.val_fraction},
                     {"eval_model", c.eval_model},
                     {"deterministic", c.deterministic}};
  j.update(nlohmann::json(c.loss)); // loss weights live flat in the trainer section
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  auto get = [&](const char* k, auto& field) {
    using F = std::remove_reference_t<decltype(field)>;
    field = j.contains(k) ? j.at(k).get<F>() : field;
  };
  c = d;
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("labeled_unlabeled_ratio", c.labeled_unlabeled_ratio);
  get("learning_rate", c.learning_rate);
  get("weight_decay", c.weight_decay);
  get("crop_size", c.crop_size);
  get("mask_patch_size", c.mask_patch_size);
  get("mask_ratio", c.mask_ratio);
  get("use_mask", c.use_mask);
  get("unsup_reg", c.unsup_reg);
  get("unsup_cls", c.unsup_cls);
  get("seed", c.seed);
  get("ema_momentum", c.ema_momentum);
  get("grad_clip", c.grad_clip);
  get("jitter_brightness", c.jitter_brightness);
  get("jitter_contrast", c.jitter_contrast);
  get("jitter_saturation", c.jitter_saturation);
  get("jitter_hue", c.jitter_hue);
  get("kernel", c.kernel);
  get("val_fraction", c.val_fraction);
  get("eval_model", c.eval_model);
  get("deterministic", c.deterministic);
  c.loss = j.get<LossWeights>();
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::vector<int> labeled;
  std::vector<int> unlabeled;
};

// One epoch of mixed batches. Each batch holds batch_size*a/(a+b) labeled
// and batch_size*b/(a+b) unlabeled indices; the epoch runs until the set that
// needs more batches is exhausted, cycling (and reshuffling) the other.
// With no unlabeled data every batch is fully labeled.
inline std::vector<Batch> make_batches(int n_labeled, int n_unlabeled, std::pair<int, int> ratio, int batch_size,
                                       Rng& rng) {
  if (n_labeled <= 0) throw EmptyDataset("make_batches: no labeled samples");
  auto [a, b] = ratio;
  int per_l = batch_size, per_u = 0;
  if (n_unlabeled > 0 && b > 0) {
    if (batch_size % (a + b) != 0)
      throw IndivisibleBatch("batch size " + std::to_string(batch_size) + " not divisible by " +
                             std::to_string(a + b));
    per_l = batch_size * a / (a + b);
    per_u = batch_size - per_l;
  }
  const int nb_l = (n_labeled + per_l - 1) / per_l;
  const int nb_u = per_u ? (n_unlabeled + per_u - 1) / per_u : 0;
  const int n_batches = std::max(nb_l, nb_u);

  struct Cycle {
    int n;
    Rng* rng;
    std::vector<int> perm;
    std::size_t pos = 0;
    int next() {
      if (pos == perm.size()) {
        perm.resize(n);
        std::iota(perm.begin(), perm.end(), 0);
        rng->shuffle(perm.begin(), perm.end());
        pos = 0;
      }
      return perm[pos++];
    }
  };
  Rng rl(rng.next()), ru(rng.next());
  Cycle cl{n_labeled, &rl, {}}, cu{n_unlabeled, &ru, {}};
  std::vector<Batch> out(n_batches);
  for (auto& bt : out) {
    for (int i = 0; i < per_l; ++i) bt.labeled.push_back(cl.next());
    for (int i = 0; i < per_u; ++i) bt.unlabeled.push_back(cu.next());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainData {
  std::vector<SceneRecord> labeled;
  std::vector<SceneRecord> unlabeled; // annotations ignored
  std::vector<SceneRecord> val;
};

struct StepLog {
  std::int64_t step = 0;
  int epoch = 0;
  LossParts parts;
  double lambda_u = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  bool skipped = false;
  std::string skip_reason;
};

inline nlohmann::json to_json(const StepLog& s) {
  nlohmann::json j{{"step", s.step},       {"epoch", s.epoch},         {"Ls_reg", s.parts.sup_reg},
                   {"Ls_cls", s.parts.sup_cls}, {"Lu_reg", s.parts.unsup_reg}, {"Lu_cls", s.parts.unsup_cls},
                   {"lambda_u", s.lambda_u}, {"total", s.total},         {"grad_norm", s.grad_norm},
                   {"clipped", s.clipped}};
  if (s.skipped) {
    j["skipped"] = true;
    j["reason"] = s.skip_reason;
  }
  return j;
}

struct EpochLog {
  int epoch = 0;
  double lambda_u = 0.0;
  double mean_total = 0.0;
  std::optional<Metrics> val;
  bool best = false;
};

inline nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j{{"epoch", e.epoch}, {"lambda_u", e.lambda_u}, {"mean_total", e.mean_total}, {"best", e.best}};
  if (e.val) {
    j["val_mae"] = e.val->mae;
    j["val_mse"] = e.val->mse;
  }
  return j;
}

// Splits labeled records into (train, val) when no validation set ships.
inline std::pair<std::vector<SceneRecord>, std::vector<SceneRecord>> hold_out_validation(
    std::vector<SceneRecord> labeled, double fraction, std::uint64_t seed) {
  if (labeled.size() < 2 || fraction <= 0) return {std::move(labeled), {}};
  std::vector<std::string> ids;
  for (const auto& r : labeled) ids.push_back(r.id);
  const auto split = make_split(ids, std::max(fraction, 1.0 / ids.size()), derive_seed(seed, "val"));
  std::vector<SceneRecord> train, val;
  for (auto& r : labeled) {
    if (std::binary_search(split.labeled.begin(), split.labeled.end(), r.id)) val.push_back(std::move(r));
    else train.push_back(std::move(r));
  }
  return {std::move(train), std::move(val)};
}

class Trainer {
public:
  using T = float;
  using StepCallback = std::function<void(const StepLog&)>;
  using EpochCallback = std::function<void(const EpochLog&)>;

  Trainer(ModelConfig model_cfg, TrainConfig cfg, TrainData data)
      : cfg_(std::move(cfg)), model_((cfg_.validate(), model_cfg)), data_(std::move(data)) {
    if (data_.labeled.empty()) throw EmptyDataset("trainer: no labeled images");
    partition_ = fit_partition();
    Rng init_rng(derive_seed(cfg_.seed, "init"));
    student_ = model_.init(init_rng);
    teacher_ = init_teacher(student_, cfg_.ema_momentum);
    opt_ = AdamW<T>(student_, {cfg_.learning_rate, 0.9, 0.999, 1e-8, cfg_.weight_decay});
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  const CountingModel<T>& model() const noexcept { return model_; }
  const nn::ParamSet<T>& student() const noexcept { return student_; }
  nn::ParamSet<T>& student() noexcept { return student_; }
  const TeacherState<T>& teacher() const noexcept { return teacher_; }
  const Partition& partition() const noexcept { return partition_; }
  int epoch() const noexcept { return epoch_; }
  std::int64_t global_step() const noexcept { return step_; }
  double best_mae() const noexcept { return best_mae_; }
  const TrainData& data() const noexcept { return data_; }

  // Parameters used for evaluation.
  const nn::ParamSet<T>& eval_params() const { return cfg_.eval_model == "teacher" ? teacher_.params : student_; }

  double lambda_u_at(int epoch) const {
    return rampup_weight(epoch, cfg_.loss.rampup_epochs, cfg_.loss.lambda_u);
  }

  std::vector<Batch> epoch_batches(int epoch) const {
    Rng rng(derive_seed(cfg_.seed, derive_seed(static_cast<std::uint64_t>(epoch), "batches")));
    return make_batches(static_cast<int>(data_.labeled.size()), static_cast<int>(data_.unlabeled.size()),
                        cfg_.ratio(), cfg_.batch_size, rng);
  }

  // Per-sample augmentation stream, a pure function of (seed, step, slot).
  Rng sample_rng(std::int64_t step, int slot, const char* role) const {
    return Rng(derive_seed(derive_seed(cfg_.seed, role),
                           derive_seed(static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(slot))));
  }

  // One optimizer step on a mixed batch. A non-finite loss leaves the state
  // untouched and is reported in the log.
  StepLog train_step(const Batch& batch) {
    StepLog log;
    log.step = step_;
    log.epoch = epoch_;
    log.lambda_u = lambda_u_at(epoch_);
    auto grads = student_.zeros_like();
    const int crop = cfg_.crop_size;
    const double nl = static_cast<double>(batch.labeled.size());
    const double nu = static_cast<double>(batch.unlabeled.size());
    const bool use_cls = cfg_.loss.lambda_s_cls > 0;

    // (i) labeled: weak view -> student -> L^s
    for (std::size_t i = 0; i < batch.labeled.size(); ++i) {
      const auto& rec = data_.labeled.at(batch.labeled[i]);
      Rng rng = sample_rng(step_, static_cast<int>(i), "labeled");
      const auto view = weak_augment(rec, crop, rng);
      const auto gt = output_density(*view.points, crop, crop, cfg_.kernel_kind());
      typename CountingModel<T>::Cache cache;
      const auto out = model_.forward(student_, view.image, &cache);
      auto reg = supervised_reg_loss(out.density, gt.values, cfg_.loss, ssim_params());
      log.parts.sup_reg += reg.value / nl;
      for (auto& g : reg.grad.vec()) g = static_cast<T>(g / nl);
      Tensor<T> dlog;
      if (use_cls) {
        const auto cls_map = density_to_class(gt, partition_);
        auto cls = supervised_cls_loss(out.logits, cls_map.levels);
        log.parts.sup_cls += cls.value / nl;
        dlog = std::move(cls.grad);
        for (auto& g : dlog.vec()) g = static_cast<T>(g * cfg_.loss.lambda_s_cls / nl);
      }
      model_.backward(student_, cache, &reg.grad, use_cls ? &dlog : nullptr, grads);
    }

    // (ii) unlabeled: teacher on the weak view, student on weak+jitter+mask
    const bool any_unsup = cfg_.unsup_reg || cfg_.unsup_cls;
    if (nu > 0 && log.lambda_u > 0 && any_unsup) {
      for (std::size_t i = 0; i < batch.unlabeled.size(); ++i) {
        const auto& rec = data_.unlabeled.at(batch.unlabeled[i]);
        Rng rng = sample_rng(step_, static_cast<int>(i), "unlabeled");
        SceneRecord bare{rec.image, std::nullopt, rec.id, rec.source};
        const auto weak = weak_augment(bare, crop, rng);
        const auto strong = make_strong_view(weak.image, rng);
        const auto t_out = model_.forward(teacher_.params, weak.image);
        const auto t_density = clamp_teacher(t_out.density, cfg_.loss.clamp_lo, cfg_.loss.clamp_hi);
        const auto t_probs = nn::softmax_channels(t_out.logits);

        typename CountingModel<T>::Cache cache;
        const auto s_out = model_.forward(student_, strong.image, &cache);
        const double w = log.lambda_u / nu;
        Tensor<T> dden, dlog;
        if (cfg_.unsup_reg) {
          auto ur = unsup_reg_loss(s_out.density, t_density, strong.cells);
          log.parts.unsup_reg += ur.value / nu;
          dden = std::move(ur.grad);
          for (auto& g : dden.vec()) g = static_cast<T>(g * w);
        }
        if (cfg_.unsup_cls) {
          auto uc = unsup_cls_loss(s_out.logits, t_probs, strong.cells);
          log.parts.unsup_cls += uc.value / nu;
          dlog = std::move(uc.grad);
          for (auto& g : dlog.vec()) g = static_cast<T>(g * w);
        }
        model_.backward(student_, cache, cfg_.unsup_reg ? &dden : nullptr, cfg_.unsup_cls ? &dlog : nullptr,
                        grads);
      }
    }

    try {
      log.total = total_loss(log.parts, cfg_.loss.lambda_s_cls, log.lambda_u);
    } catch (const NonFiniteLoss& e) {
      log.skipped = true;
      log.skip_reason = e.what();
      log.total = std::numeric_limits<double>::quiet_NaN();
      ++step_;
      return log;
    }
    log.grad_norm = clip_grad_norm(grads, cfg_.grad_clip);
    log.clipped = cfg_.grad_clip > 0 && log.grad_norm > cfg_.grad_clip;
    if (!std::isfinite(log.grad_norm)) {
      log.skipped = true;
      log.skip_reason = "non-finite gradient";
      ++step_;
      return log;
    }
    opt_.step(student_, grads);
    ema_update(teacher_, student_);
    ++step_;
    return log;
  }

  struct StrongView {
    Image image;
    MaskSpec mask;
    std::vector<Cell> cells; // output-grid cells the consistency losses sum over
  };

  StrongView make_strong_view(const Image& weak, Rng& rng) const {
    StrongView s;
    s.image = color_jitter(weak, rng, cfg_.jitter());
    const int oh = (weak.height() + kOutputStride - 1) / kOutputStride;
    const int ow = (weak.width() + kOutputStride - 1) / kOutputStride;
    if (cfg_.use_mask) {
      s.mask = sample_mask(weak.height(), weak.width(), cfg_.mask_patch_size, cfg_.mask_ratio, rng);
      s.image = apply_mask(s.image, s.mask);
      s.cells = mask_to_output_grid(s.mask);
    } else {
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) s.cells.push_back({y, x});
    }
    return s;
  }

  EvalResult validate() const {
    return evaluate(model_, eval_params(), data_.val);
  }

  // Runs the remaining epochs. After each epoch the validation MAE is
  // computed (when a validation set exists); `last.ckpt` and the best-MAE
  // `best.ckpt` are written under `out_dir` if given.
  void train(const std::optional<std::filesystem::path>& out_dir = std::nullopt, StepCallback on_step = {},
             EpochCallback on_epoch = {}, int stop_after_epoch = -1) {
    if (out_dir) std::filesystem::create_directories(*out_dir);
    while (epoch_ < cfg_.epochs) {
      EpochLog elog;
      elog.epoch = epoch_;
      elog.lambda_u = lambda_u_at(epoch_);
      double sum = 0.0;
      int n = 0;
      for (const auto& b : epoch_batches(epoch_)) {
        const auto log = train_step(b);
        if (!log.skipped) {
          sum += log.total;
          ++n;
        }
        if (on_step) on_step(log);
      }
      elog.mean_total = n ? sum / n : 0.0;
      if (!data_.val.empty()) {
        elog.val = validate().metrics;
        if (elog.val->mae < best_mae_) {
          best_mae_ = elog.val->mae;
          best_params_ = eval_params();
          elog.best = true;
          if (out_dir) save(*out_dir / "best.ckpt");
        }
      } else {
        best_params_ = eval_params();
      }
      ++epoch_;
      if (out_dir) save(*out_dir / "last.ckpt");
      if (on_epoch) on_epoch(elog);
      if (stop_after_epoch >= 0 && epoch_ > stop_after_epoch) break;
    }
    if (!best_params_) best_params_ = eval_params();
  }

  // Best-validation parameters (final ones when there is no validation set).
  const nn::ParamSet<T>& best_params() const { return best_params_ ? *best_params_ : eval_params(); }

  nlohmann::json config_json() const {
    return {{"model", model_.config()}, {"trainer", cfg_}};
  }

  std::string config_hash() const {
    return std::to_string(fnv1a(config_json().dump()));
  }

  void save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.meta = {{"format", "mrc-checkpoint"},
               {"config", config_json()},
               {"config_hash", config_hash()},
               {"epoch", epoch_},
               {"global_step", step_},
               {"optimizer_steps", opt_.steps()},
               {"best_mae", std::isfinite(best_mae_) ? nlohmann::json(best_mae_) : nlohmann::json(nullptr)},
               {"rng", {{"seed", cfg_.seed}, {"streams", "derived(seed, role, step, slot)"}}},
               {"partition", to_json(partition_)}};
    ck.tensors["student"] = student_;
    ck.tensors["teacher"] = teacher_.params;
    ck.tensors["adam.m"] = opt_.first_moment();
    ck.tensors["adam.v"] = opt_.second_moment();
    if (best_params_) ck.tensors["best"] = *best_params_;
    save_checkpoint(path, ck);
  }

  // Restores a state saved by `save`. The configuration must hash equal.
  void load(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    if (ck.meta.at("config_hash").get<std::string>() != config_hash())
      throw BadConfig("checkpoint " + path.string() + " was written with a different configuration");
    auto take = [&](const char* name, nn::ParamSet<T>& dst) {
      const auto it = ck.tensors.find(name);
      if (it == ck.tensors.end()) throw MalformedRecord(path.string() + ": missing section " + name);
      if (!it->second.same_layout(dst)) throw ShapeMismatch(path.string() + ": layout mismatch in " + name);
      dst = it->second;
    };
    take("student", student_);
    take("teacher", teacher_.params);
    take("adam.m", opt_.first_moment());
    take("adam.v", opt_.second_moment());
    if (ck.tensors.count("best")) {
      best_params_ = student_.zeros_like();
      take("best", *best_params_);
    }
    opt_.set_steps(ck.meta.at("optimizer_steps").get<std::int64_t>());
    epoch_ = ck.meta.at("epoch").get<int>();
    step_ = ck.meta.at("global_step").get<std::int64_t>();
    const auto& bm = ck.meta.at("best_mae");
    best_mae_ = bm.is_null() ? std::numeric_limits<double>::infinity() : bm.get<double>();
    partition_ = partition_from_json(ck.meta.at("partition"));
  }

private:
  SsimParams ssim_params() const { return SsimParams::for_range(cfg_.loss.ssim_range); }

  Partition fit_partition() const {
    std::vector<double> counts;
    for (const auto& r : data_.labeled) {
      if (!r.annotations) throw MalformedRecord("labeled record " + r.id + " has no annotations");
      const auto d = output_density(*r.annotations, r.height(), r.width(), cfg_.kernel_kind());
      for (float v : d.values.vec()) counts.push_back(v);
    }
    return build_partition(counts, model_.levels());
  }

  TrainConfig cfg_;
  CountingModel<T> model_;
  TrainData data_;
  Partition partition_;
  nn::ParamSet<T> student_;
  TeacherState<T> teacher_;
  AdamW<T> opt_;
  int epoch_ = 0;
  std::int64_t step_ = 0;
  double best_mae_ = std::numeric_limits<double>::infinity();
  std::optional<nn::ParamSet<T>> best_params_;
};

} // namespace mrc
