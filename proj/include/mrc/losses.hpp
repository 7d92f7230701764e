#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "mrc/augment.hpp"
#include "mrc/errors.hpp"
#include "mrc/groundtruth.hpp"
#include "mrc/nn.hpp"
#include "mrc/tensor.hpp"

namespace mrc {

struct LossWeights {
  double alpha = 0.01;        // TV weight inside the regression loss
  double lambda_s_cls = 1.0;  // supervised classification weight
  double lambda_u = 1.0;      // final unsupervised weight
  int J = 3;                  // SSIM pyramid levels
  double epsilon = 1e-5;      // dense-region threshold on stride-8 cells
  double clamp_lo = 0.0;      // teacher density target range
  double clamp_hi = 25.0;
  int rampup_epochs = 20;
  double ssim_range = 25.0;   // dynamic range L in the SSIM stabilizers

  void validate() const {
    if (!(ssim_range > 0)) throw BadConfig("ssim_range must be positive");
    if (alpha < 0 || lambda_s_cls < 0 || lambda_u < 0 || epsilon < 0 || rampup_epochs < 0)
      throw BadConfig("loss weights must be nonnegative");
    if (J < 1) throw BadConfig("J must be >= 1");
    if (!(clamp_lo < clamp_hi)) throw BadConfig("clamp range must satisfy lo < hi");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, alpha, lambda_s_cls, lambda_u, J, epsilon,
                                                clamp_lo, clamp_hi, rampup_epochs, ssim_range)

template <typename T>
struct LossGrad {
  T value = T(0);
  Tensor<T> grad; // d(value)/d(prediction); empty when not requested
};

// ---------------------------------------------------------------------------
// Dense-region mask and SSIM

template <typename T>
Tensor<T> dense_region_mask(const Tensor<T>& gt, double epsilon) {
  if (epsilon < 0) throw BadConfig("epsilon must be >= 0");
  Tensor<T> m(gt.channels(), gt.height(), gt.width());
  for (std::size_t i = 0; i < gt.size(); ++i) m.data()[i] = gt.data()[i] > epsilon ? T(1) : T(0);
  return m;
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double c1 = (0.01 * 25.0) * (0.01 * 25.0);
  double c2 = (0.03 * 25.0) * (0.03 * 25.0);

  static SsimParams for_range(double dynamic_range) {
    SsimParams p;
    p.c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
    p.c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
    return p;
  }
};

// Normalized 2-D Gaussian window of side `size` (row-major).
inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  const double centre = (size - 1) / 2.0;
  double s = 0.0;
  for (int i = 0; i < size; ++i) {
    g[i] = std::exp(-(i - centre) * (i - centre) / (2.0 * sigma * sigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  std::vector<double> w(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) w[y * size + x] = g[y] * g[x];
  return w;
}

// Effective window: the configured size, shrunk to fit the map.
inline int ssim_window_size(int h, int w, const SsimParams& p) { return std::min({p.window, h, w}); }

// Per-position SSIM over all "valid" window placements of a single-channel
// map pair. When `da` is given, d(mean SSIM)/d(a) * `scale` is accumulated.
template <typename T>
Tensor<T> ssim_index(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& p = {},
                     Tensor<T>* da = nullptr, double scale = 1.0) {
  require_same_shape(a, b, "ssim_index");
  if (a.channels() != 1) throw ShapeMismatch("ssim_index expects single-channel maps");
  const int H = a.height(), W = a.width();
  const int ws = ssim_window_size(H, W, p);
  if (ws < 1) throw TooSmallForPyramid("empty map");
  const auto win = gaussian_window(ws, p.sigma);
  const int oh = H - ws + 1, ow = W - ws + 1;
  Tensor<T> out(1, oh, ow);
  // Per-position coefficients for the backward pass.
  std::vector<double> k_mu(static_cast<std::size_t>(oh) * ow), k_a2(k_mu.size()), k_ab(k_mu.size());
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double ma = 0, mb = 0, ea2 = 0, eb2 = 0, eab = 0;
      for (int u = 0; u < ws; ++u)
        for (int v = 0; v < ws; ++v) {
          const double g = win[u * ws + v];
          const double va = a.at(y + u, x + v), vb = b.at(y + u, x + v);
          ma += g * va;
          mb += g * vb;
          ea2 += g * va * va;
          eb2 += g * vb * vb;
          eab += g * va * vb;
        }
      const double va = ea2 - ma * ma, vb = eb2 - mb * mb, cov = eab - ma * mb;
      const double A1 = 2 * ma * mb + p.c1, A2 = 2 * cov + p.c2;
      const double B1 = ma * ma + mb * mb + p.c1, B2 = va + vb + p.c2;
      const double s = (A1 * A2) / (B1 * B2);
      out.at(y, x) = static_cast<T>(s);
      const std::size_t i = static_cast<std::size_t>(y) * ow + x;
      // S as a function of (mu_a, E[a^2], E[ab]) with mu_b, E[b^2] fixed.
      k_a2[i] = -s / B2;
      k_ab[i] = 2.0 * A1 / (B1 * B2);
      k_mu[i] = 2.0 * mb * (A2 - A1) / (B1 * B2) + 2.0 * ma * s * (1.0 / B2 - 1.0 / B1);
    }
  if (da) {
    require_same_shape(*da, a, "ssim_index grad");
    const double norm = scale / (static_cast<double>(oh) * ow);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * ow + x;
        for (int u = 0; u < ws; ++u)
          for (int v = 0; v < ws; ++v) {
            const double g = win[u * ws + v] * norm;
            const double va = a.at(y + u, x + v), vb = b.at(y + u, x + v);
            da->at(y + u, x + v) += static_cast<T>(g * (k_mu[i] + 2.0 * va * k_a2[i] + vb * k_ab[i]));
          }
      }
  }
  return out;
}

template <typename T>
double mean_of(const Tensor<T>& t) {
  return t.empty() ? 0.0 : t.sum() / static_cast<double>(t.size());
}

// 2x2 average pooling (floor).
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& in) {
  const int oh = in.height() / 2, ow = in.width() / 2;
  Tensor<T> out(in.channels(), oh, ow);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        out(c, y, x) = static_cast<T>(0.25) * (in(c, 2 * y, 2 * x) + in(c, 2 * y, 2 * x + 1) +
                                               in(c, 2 * y + 1, 2 * x) + in(c, 2 * y + 1, 2 * x + 1));
  return out;
}

template <typename T>
Tensor<T> avg_pool2_backward(const Tensor<T>& dout, int h, int w) {
  Tensor<T> din(dout.channels(), h, w);
  for (int c = 0; c < dout.channels(); ++c)
    for (int y = 0; y < dout.height(); ++y)
      for (int x = 0; x < dout.width(); ++x) {
        const T g = static_cast<T>(0.25) * dout(c, y, x);
        din(c, 2 * y, 2 * x) += g;
        din(c, 2 * y, 2 * x + 1) += g;
        din(c, 2 * y + 1, 2 * x) += g;
        din(c, 2 * y + 1, 2 * x + 1) += g;
      }
  return din;
}

// (1/J) * sum_j [1 - meanSSIM(P_j(pred * M), P_j(gt * M))], P_j halving the
// resolution j-1 times.
template <typename T>
LossGrad<T> pyramid_ssim_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, int J,
                              const SsimParams& sp = {}, bool want_grad = true) {
  require_same_shape(pred, gt, "pyramid_ssim_loss");
  require_same_shape(pred, mask, "pyramid_ssim_loss mask");
  if (J < 1) throw BadConfig("J must be >= 1");
  const int min_side = std::min(pred.height(), pred.width()) >> (J - 1);
  if (min_side < 2)
    throw TooSmallForPyramid(shape_str(pred) + " cannot hold " + std::to_string(J) + " levels");

  std::vector<Tensor<T>> pa{pred}, pb{gt};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pa[0].data()[i] *= mask.data()[i];
    pb[0].data()[i] *= mask.data()[i];
  }
  for (int j = 1; j < J; ++j) {
    pa.push_back(avg_pool2(pa.back()));
    pb.push_back(avg_pool2(pb.back()));
  }
  LossGrad<T> r;
  double loss = 0.0;
  std::vector<Tensor<T>> da(J);
  for (int j = 0; j < J; ++j) {
    if (want_grad) da[j] = Tensor<T>(1, pa[j].height(), pa[j].width());
    const auto s = ssim_index(pa[j], pb[j], sp, want_grad ? &da[j] : nullptr, -1.0 / J);
    loss += 1.0 - mean_of(s);
  }
  r.value = static_cast<T>(loss / J);
  if (want_grad) {
    for (int j = J - 1; j > 0; --j) da[j - 1] += avg_pool2_backward(da[j], pa[j - 1].height(), pa[j - 1].width());
    r.grad = std::move(da[0]);
    for (std::size_t i = 0; i < pred.size(); ++i) r.grad.data()[i] *= mask.data()[i];
  }
  return r;
}

// Count-normalized total variation distance, scaled by the GT count:
// 0.5 * || gt/sum(gt) - pred/sum(pred) ||_1 * sum(gt). Zero when either sum
// is below 1e-6.
template <typename T>
LossGrad<T> tv_loss(const Tensor<T>& pred, const Tensor<T>& gt, bool want_grad = true) {
  require_same_shape(pred, gt, "tv_loss");
  const double sp = pred.sum(), sg = gt.sum();
  LossGrad<T> r;
  if (want_grad) r.grad = Tensor<T>(pred.channels(), pred.height(), pred.width());
  if (sp < 1e-6 || sg < 1e-6) return r;
  double l1 = 0.0, dot = 0.0;
  std::vector<double> sgn(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double u = pred.data()[i] / sp;
    const double d = gt.data()[i] / sg - u;
    l1 += std::abs(d);
    sgn[i] = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
    dot += sgn[i] * u;
  }
  r.value = static_cast<T>(0.5 * l1 * sg);
  if (want_grad) {
    const double k = -0.5 * sg / sp;
    for (std::size_t i = 0; i < pred.size(); ++i) r.grad.data()[i] = static_cast<T>(k * (sgn[i] - dot));
  }
  return r;
}

template <typename T>
LossGrad<T> supervised_reg_loss(const Tensor<T>& pred, const Tensor<T>& gt, const LossWeights& w,
                                const SsimParams& sp = {}, bool want_grad = true) {
  const auto mask = dense_region_mask(gt, w.epsilon);
  auto pyr = pyramid_ssim_loss(pred, gt, mask, w.J, sp, want_grad);
  const auto tv = tv_loss(pred, gt, want_grad);
  LossGrad<T> r;
  r.value = static_cast<T>(static_cast<double>(pyr.value) + w.alpha * static_cast<double>(tv.value));
  if (want_grad) {
    r.grad = std::move(pyr.grad);
    for (std::size_t i = 0; i < r.grad.size(); ++i)
      r.grad.data()[i] += static_cast<T>(w.alpha) * tv.grad.data()[i];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Classification

// Mean over cells of -log softmax(logits)[target].
template <typename T>
LossGrad<T> supervised_cls_loss(const Tensor<T>& logits, const Tensor<int>& targets, bool want_grad = true) {
  if (targets.height() != logits.height() || targets.width() != logits.width() || targets.channels() != 1)
    throw ShapeMismatch("supervised_cls_loss: " + shape_str(logits) + " vs " + shape_str(targets));
  const int K = logits.channels();
  for (int t : targets.vec())
    if (t < 0 || t >= K) throw BadTargetRange("target " + std::to_string(t) + " outside [0, " +
                                              std::to_string(K - 1) + "]");
  const auto probs = nn::softmax_channels(logits);
  const std::size_t n = logits.plane();
  LossGrad<T> r;
  if (want_grad) r.grad = probs;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets.data()[i];
    // log-sum-exp form keeps saturated logits finite
    double mx = logits.data()[i];
    for (int c = 1; c < K; ++c) mx = std::max(mx, static_cast<double>(logits.data()[c * n + i]));
    double z = 0.0;
    for (int c = 0; c < K; ++c) z += std::exp(logits.data()[c * n + i] - mx);
    loss += mx + std::log(z) - logits.data()[t * n + i];
    if (want_grad) r.grad.data()[t * n + i] -= T(1);
  }
  r.value = static_cast<T>(loss / static_cast<double>(n));
  if (want_grad)
    for (auto& g : r.grad.vec()) g /= static_cast<T>(n);
  return r;
}

// ---------------------------------------------------------------------------
// Teacher targets and consistency

template <typename T>
Tensor<T> clamp_teacher(Tensor<T> density, double lo = 0.0, double hi = 25.0) {
  for (auto& v : density.vec()) v = std::clamp(v, static_cast<T>(lo), static_cast<T>(hi));
  return density;
}

// Per-sample sum of |student - teacher| over the masked output cells.
template <typename T>
LossGrad<T> unsup_reg_loss(const Tensor<T>& student, const Tensor<T>& teacher, std::span<const Cell> cells,
                           bool want_grad = true) {
  require_same_shape(student, teacher, "unsup_reg_loss");
  LossGrad<T> r;
  if (want_grad) r.grad = Tensor<T>(1, student.height(), student.width());
  double s = 0.0;
  for (const auto& c : cells) {
    const double d = static_cast<double>(student.at(c.row, c.col)) - teacher.at(c.row, c.col);
    s += std::abs(d);
    if (want_grad) r.grad.at(c.row, c.col) = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
  }
  r.value = static_cast<T>(s);
  return r;
}

// Per-sample sum over masked cells of the L1 distance between the student's
// softmax distribution and the teacher's. The gradient is w.r.t. the
// student's logits.
template <typename T>
LossGrad<T> unsup_cls_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_probs,
                           std::span<const Cell> cells, bool want_grad = true) {
  require_same_shape(student_logits, teacher_probs, "unsup_cls_loss");
  const auto ps = nn::softmax_channels(student_logits);
  const int K = ps.channels();
  LossGrad<T> r;
  Tensor<T> dprobs(K, ps.height(), ps.width());
  double s = 0.0;
  for (const auto& c : cells)
    for (int k = 0; k < K; ++k) {
      const double d = static_cast<double>(ps(k, c.row, c.col)) - teacher_probs(k, c.row, c.col);
      s += std::abs(d);
      dprobs(k, c.row, c.col) = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
    }
  r.value = static_cast<T>(s);
  if (want_grad) r.grad = nn::softmax_channels_backward(ps, dprobs);
  return r;
}

// Same loss against already-normalized student probabilities; used by the
// metric-level oracle checks.
template <typename T>
T unsup_cls_loss_probs(const Tensor<T>& student_probs, const Tensor<T>& teacher_probs,
                       std::span<const Cell> cells) {
  require_same_shape(student_probs, teacher_probs, "unsup_cls_loss_probs");
  double s = 0.0;
  for (const auto& c : cells)
    for (int k = 0; k < student_probs.channels(); ++k)
      s += std::abs(static_cast<double>(student_probs(k, c.row, c.col)) - teacher_probs(k, c.row, c.col));
  return static_cast<T>(s);
}

// Batch forms: mean over samples of the per-sample terms.
template <typename T>
T batch_mean(std::span<const T> per_sample) {
  if (per_sample.empty()) return T(0);
  double s = 0.0;
  for (T v : per_sample) s += v;
  return static_cast<T>(s / per_sample.size());
}

// ---------------------------------------------------------------------------
// Schedule and total objective

// Gaussian ramp exp(-5 (1 - t)^2), t = min(epoch / rampup_epochs, 1).
inline double rampup_weight(double epoch, int rampup_epochs = 20, double lambda_u = 1.0) {
  if (epoch < 0) throw BadConfig("epoch must be >= 0");
  if (rampup_epochs <= 0) return lambda_u;
  const double t = std::min(epoch / rampup_epochs, 1.0);
  return lambda_u * std::exp(-5.0 * (1.0 - t) * (1.0 - t));
}

struct LossParts {
  double sup_reg = 0.0;
  double sup_cls = 0.0;
  double unsup_reg = 0.0;
  double unsup_cls = 0.0;
};

// (L^s_reg + lambda_s_cls L^s_cls) + lambda_u(epoch) (L^u_reg + L^u_cls)
inline double total_loss(const LossParts& p, double lambda_s_cls, double lambda_u_now) {
  const std::pair<const char*, double> terms[] = {
      {"Ls_reg", p.sup_reg}, {"Ls_cls", p.sup_cls}, {"Lu_reg", p.unsup_reg}, {"Lu_cls", p.unsup_cls}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) throw NonFiniteLoss(std::string(name) + " = " + std::to_string(v));
  return (p.sup_reg + lambda_s_cls * p.sup_cls) + lambda_u_now * (p.unsup_reg + p.unsup_cls);
}

inline double total_loss(const LossParts& p, const LossWeights& w, double epoch) {
  return total_loss(p, w.lambda_s_cls, rampup_weight(epoch, w.rampup_epochs, w.lambda_u));
}

} // namespace mrc
