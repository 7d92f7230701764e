#pragma once

#include <cmath>
#include <cstdint>

#include "mrc/nn.hpp"

namespace mrc {

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Adam with decoupled weight decay.
template <typename T>
class AdamW {
public:
  AdamW() = default;
  AdamW(const nn::ParamSet<T>& params, AdamWConfig cfg)
      : cfg_(cfg), m_(params.zeros_like()), v_(params.zeros_like()) {}

  void step(nn::ParamSet<T>& params, const nn::ParamSet<T>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].value;
      const auto& g = grads[i].value;
      auto& m = m_[i].value;
      auto& v = v_[i].value;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j];
        const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double upd = (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
        p[j] = static_cast<T>(p[j] * decay - cfg_.lr * upd);
      }
    }
  }

  const AdamWConfig& config() const noexcept { return cfg_; }
  void set_lr(double lr) noexcept { cfg_.lr = lr; }
  std::int64_t steps() const noexcept { return t_; }
  nn::ParamSet<T>& first_moment() noexcept { return m_; }
  nn::ParamSet<T>& second_moment() noexcept { return v_; }
  const nn::ParamSet<T>& first_moment() const noexcept { return m_; }
  const nn::ParamSet<T>& second_moment() const noexcept { return v_; }
  void set_steps(std::int64_t t) noexcept { t_ = t; }

private:
  AdamWConfig cfg_;
  nn::ParamSet<T> m_, v_;
  std::int64_t t_ = 0;
};

template <typename T>
double global_norm(const nn::ParamSet<T>& grads) {
  double s = 0.0;
  for (const auto& p : grads)
    for (T g : p.value) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

// Rescales gradients so their global L2 norm is at most `max_norm`. Returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(nn::ParamSet<T>& grads, double max_norm) {
  const double n = global_norm(grads);
  if (max_norm > 0 && n > max_norm) {
    const double s = max_norm / (n + 1e-12);
    for (auto& p : grads)
      for (T& g : p.value) g = static_cast<T>(g * s);
  }
  return n;
}

} // namespace mrc
