#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "mrc/datamodel.hpp"
#include "mrc/errors.hpp"
#include "mrc/model.hpp"
#include "mrc/rng.hpp"

namespace mrc {

struct EvalRow {
  std::string id;
  double pred = 0.0;
  double gt = 0.0;
  double abs_err() const { return std::abs(pred - gt); }
};

struct Metrics {
  double mae = 0.0;
  double mse = 0.0;          // root of the mean squared count error
  double sum_abs_err = 0.0;  // un-normalized sum, logged alongside the mean
};

struct EvalResult {
  std::vector<EvalRow> rows;
  Metrics metrics;
};

// MAE = mean |pred - gt|; MSE = sqrt(mean (pred - gt)^2). Summation runs in
// row order.
inline Metrics mae_mse(const std::vector<EvalRow>& rows) {
  if (rows.empty()) throw EmptyResults("mae_mse: no rows");
  double sa = 0.0, ss = 0.0;
  for (const auto& r : rows) {
    const double e = r.pred - r.gt;
    sa += std::abs(e);
    ss += e * e;
  }
  const double n = static_cast<double>(rows.size());
  return {sa / n, std::sqrt(ss / n), sa};
}

inline Metrics mae_mse(const std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.size() != gt.size()) throw ShapeMismatch("mae_mse: size mismatch");
  std::vector<EvalRow> rows;
  for (std::size_t i = 0; i < pred.size(); ++i) rows.push_back({std::to_string(i), pred[i], gt[i]});
  return mae_mse(rows);
}

// Count = sum of the predicted density map. With `flip_average` the count of
// the mirrored image is averaged in.
template <typename T>
double predict_count(const CountingModel<T>& model, const nn::ParamSet<T>& params, const Image& image,
                     bool flip_average = false) {
  const double c = predict(model, params, image).count();
  if (!flip_average) return c;
  return 0.5 * (c + predict(model, params, flip_horizontal(image)).count());
}

template <typename T>
EvalResult evaluate(const CountingModel<T>& model, const nn::ParamSet<T>& params,
                    const std::vector<SceneRecord>& records, bool flip_average = false) {
  EvalResult res;
  for (const auto& r : records) {
    if (!r.annotations) throw MalformedRecord("evaluate: record " + r.id + " has no annotations");
    res.rows.push_back({r.id, predict_count(model, params, r.image, flip_average),
                        static_cast<double>(r.annotations->count())});
  }
  res.metrics = mae_mse(res.rows);
  return res;
}

// ---------------------------------------------------------------------------
// Robustness probes

enum class ProbeKind { Blur, Mask };

inline const char* to_string(ProbeKind k) { return k == ProbeKind::Blur ? "blur" : "mask"; }

struct ProbeParams {
  int patch = 32;
  double noise_std = 50.0 / 255.0;
  std::uint64_t seed = 0;
};

struct CurvePoint {
  double fraction = 0.0;
  double mae = 0.0;
  double mse = 0.0;
};

struct Curve {
  std::string name;
  std::vector<CurvePoint> points;
};

// Corrupts round(fraction * N) patches of a ceil-divided patch grid. The
// patch order depends only on (seed, image_index), so larger fractions
// corrupt a superset of the patches of smaller ones and every model probed
// with the same seed sees identical inputs.
inline Image corrupt_image(const Image& image, ProbeKind kind, double fraction, std::size_t image_index,
                           const ProbeParams& pp) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw BadConfig("probe fraction must lie in [0, 1]");
  if (fraction == 0.0) return image;
  const int rows = (image.height() + pp.patch - 1) / pp.patch;
  const int cols = (image.width() + pp.patch - 1) / pp.patch;
  const int n = rows * cols;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(pp.seed, derive_seed(image_index, "probe-order")));
  rng.shuffle(order.begin(), order.end());
  const int k = static_cast<int>(std::lround(fraction * n));
  Image out = image;
  for (int i = 0; i < k; ++i) {
    const int pr = order[i] / cols, pc = order[i] % cols;
    const int y0 = pr * pp.patch, x0 = pc * pp.patch;
    const int y1 = std::min(y0 + pp.patch, image.height()), x1 = std::min(x0 + pp.patch, image.width());
    Rng noise(derive_seed(pp.seed, derive_seed(image_index, static_cast<std::uint64_t>(order[i]))));
    for (int c = 0; c < image.channels(); ++c)
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          if (kind == ProbeKind::Mask) {
            out(c, y, x) = 0.0f;
          } else {
            const double v = out(c, y, x) + noise.normal(0.0, pp.noise_std);
            out(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
  }
  return out;
}

template <typename T>
Curve run_probe(const CountingModel<T>& model, const nn::ParamSet<T>& params,
                const std::vector<SceneRecord>& records, ProbeKind kind, const std::vector<double>& fractions,
                const ProbeParams& pp = {}) {
  Curve curve{to_string(kind), {}};
  for (double f : fractions) {
    std::vector<EvalRow> rows;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (!r.annotations) throw MalformedRecord("probe: record " + r.id + " has no annotations");
      const Image img = corrupt_image(r.image, kind, f, i, pp);
      rows.push_back({r.id, predict_count(model, params, img), static_cast<double>(r.annotations->count())});
    }
    const auto m = mae_mse(rows);
    curve.points.push_back({f, m.mae, m.mse});
  }
  return curve;
}

template <typename T>
Curve blur_probe(const CountingModel<T>& model, const nn::ParamSet<T>& params,
                 const std::vector<SceneRecord>& records, const std::vector<double>& fractions,
                 const ProbeParams& pp = {}) {
  return run_probe(model, params, records, ProbeKind::Blur, fractions, pp);
}

template <typename T>
Curve mask_probe(const CountingModel<T>& model, const nn::ParamSet<T>& params,
                 const std::vector<SceneRecord>& records, const std::vector<double>& fractions,
                 const ProbeParams& pp = {}) {
  return run_probe(model, params, records, ProbeKind::Mask, fractions, pp);
}

} // namespace mrc
