#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mrc/errors.hpp"
#include "mrc/rng.hpp"
#include "mrc/tensor.hpp"

namespace mrc::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
};

// Ordered, named parameter collection. Gradients and optimizer moments use
// the same layout so they can be walked in lockstep.
template <typename T>
class ParamSet {
public:
  int add(std::string name, std::vector<int> shape, T fill = T(0)) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    index_[name] = static_cast<int>(params_.size());
    params_.push_back({std::move(name), std::move(shape), AlignedVector<T>(n, fill)});
    return static_cast<int>(params_.size()) - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw BadConfig("unknown parameter " + name);
    return it->second;
  }
  Param<T>& at(const std::string& name) { return params_[index_of(name)]; }
  const Param<T>& at(const std::string& name) const { return params_[index_of(name)]; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& p : params_) out.push_back(p.name);
    return out;
  }

  // Same names and shapes, zero values.
  ParamSet zeros_like() const {
    ParamSet z;
    for (const auto& p : params_) z.add(p.name, p.shape);
    return z;
  }

  void set_zero() {
    for (auto& p : params_) std::fill(p.value.begin(), p.value.end(), T(0));
  }

  bool same_layout(const ParamSet& o) const {
    if (o.params_.size() != params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name != o.params_[i].name || params_[i].shape != o.params_[i].shape)
        return false;
    return true;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (!a.same_layout(b)) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i)
      if (a.params_[i].value != b.params_[i].value) return false;
    return true;
  }

private:
  std::vector<Param<T>> params_;
  std::map<std::string, int> index_;
};

struct ConvSpec {
  int in = 0;
  int out = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int weight = -1; // parameter indices
  int bias = -1;

  int out_size(int n) const { return (n + 2 * pad - kernel) / stride + 1; }
};

template <typename T>
ConvSpec add_conv(ParamSet<T>& ps, const std::string& name, int in, int out, int kernel, int stride) {
  ConvSpec s{in, out, kernel, stride, kernel / 2};
  s.weight = ps.add(name + ".weight", {out, in, kernel, kernel});
  s.bias = ps.add(name + ".bias", {out});
  return s;
}

// He-normal weights, zero bias.
template <typename T>
void init_conv(ParamSet<T>& ps, const ConvSpec& s, Rng& rng, double gain = 1.0) {
  const double fan_in = static_cast<double>(s.in) * s.kernel * s.kernel;
  const double sd = gain * std::sqrt(2.0 / fan_in);
  for (auto& w : ps[s.weight].value) w = static_cast<T>(rng.normal(0.0, sd));
  std::fill(ps[s.bias].value.begin(), ps[s.bias].value.end(), T(0));
}

namespace detail {

template <typename T>
void im2col(const Tensor<T>& in, const ConvSpec& s, int oh, int ow, RowMatrix<T>& col) {
  const int k = s.kernel;
  col.resize(static_cast<Eigen::Index>(s.in) * k * k, static_cast<Eigen::Index>(oh) * ow);
  for (int c = 0; c < s.in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col.data() + ((static_cast<Eigen::Index>(c) * k + ky) * k + kx) * oh * ow;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * s.stride - s.pad + ky;
          T* dst = row + static_cast<std::size_t>(y) * ow;
          if (iy < 0 || iy >= in.height()) {
            std::fill_n(dst, ow, T(0));
            continue;
          }
          const T* src = &in(c, iy, 0);
          for (int x = 0; x < ow; ++x) {
            const int ix = x * s.stride - s.pad + kx;
            dst[x] = (ix >= 0 && ix < in.width()) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const RowMatrix<T>& col, const ConvSpec& s, int oh, int ow, Tensor<T>& din) {
  const int k = s.kernel;
  for (int c = 0; c < s.in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col.data() + ((static_cast<Eigen::Index>(c) * k + ky) * k + kx) * oh * ow;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * s.stride - s.pad + ky;
          if (iy < 0 || iy >= din.height()) continue;
          const T* src = row + static_cast<std::size_t>(y) * ow;
          T* dst = &din(c, iy, 0);
          for (int x = 0; x < ow; ++x) {
            const int ix = x * s.stride - s.pad + kx;
            if (ix >= 0 && ix < din.width()) dst[ix] += src[x];
          }
        }
      }
}

inline bool is_pointwise(const ConvSpec& s) { return s.kernel == 1 && s.stride == 1 && s.pad == 0; }

} // namespace detail

template <typename T>
Tensor<T> conv2d(const ParamSet<T>& ps, const ConvSpec& s, const Tensor<T>& in) {
  if (in.channels() != s.in)
    throw ShapeMismatch("conv2d: expected " + std::to_string(s.in) + " channels, got " +
                        std::to_string(in.channels()));
  const int oh = s.out_size(in.height()), ow = s.out_size(in.width());
  Tensor<T> out(s.out, oh, ow);
  ConstMatMap<T> w(ps[s.weight].value.data(), s.out, static_cast<Eigen::Index>(s.in) * s.kernel * s.kernel);
  MatMap<T> o(out.data(), s.out, static_cast<Eigen::Index>(oh) * ow);
  if (detail::is_pointwise(s)) {
    ConstMatMap<T> x(in.data(), s.in, static_cast<Eigen::Index>(oh) * ow);
    o.noalias() = w * x;
  } else {
    thread_local RowMatrix<T> col;
    detail::im2col(in, s, oh, ow, col);
    o.noalias() = w * col;
  }
  const auto& b = ps[s.bias].value;
  for (int c = 0; c < s.out; ++c) o.row(c).array() += b[c];
  return out;
}

// Accumulates weight/bias gradients into `grads` and returns d(input).
template <typename T>
Tensor<T> conv2d_backward(const ParamSet<T>& ps, const ConvSpec& s, const Tensor<T>& in,
                          const Tensor<T>& dout, ParamSet<T>& grads, bool need_input_grad = true) {
  const int oh = dout.height(), ow = dout.width();
  const Eigen::Index kk = static_cast<Eigen::Index>(s.in) * s.kernel * s.kernel;
  ConstMatMap<T> w(ps[s.weight].value.data(), s.out, kk);
  MatMap<T> dw(grads[s.weight].value.data(), s.out, kk);
  ConstMatMap<T> d(dout.data(), s.out, static_cast<Eigen::Index>(oh) * ow);
  auto& db = grads[s.bias].value;
  for (int c = 0; c < s.out; ++c) db[c] += d.row(c).sum();

  Tensor<T> din(s.in, in.height(), in.width());
  if (detail::is_pointwise(s)) {
    ConstMatMap<T> x(in.data(), s.in, static_cast<Eigen::Index>(oh) * ow);
    dw.noalias() += d * x.transpose();
    if (need_input_grad) {
      MatMap<T> dx(din.data(), s.in, static_cast<Eigen::Index>(oh) * ow);
      dx.noalias() = w.transpose() * d;
    }
    return din;
  }
  thread_local RowMatrix<T> col;
  detail::im2col(in, s, oh, ow, col);
  dw.noalias() += d * col.transpose();
  if (need_input_grad) {
    col.noalias() = w.transpose() * d;
    detail::col2im(col, s, oh, ow, din);
  }
  return din;
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.vec()) v = v > T(0) ? v : T(0);
}

// Gradient of ReLU given its output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, Tensor<T> dout) {
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!(out.data()[i] > T(0))) dout.data()[i] = T(0);
  return dout;
}

namespace detail {

// Half-pixel-centred source coordinate for bilinear resizing.
struct Tap {
  int i0, i1;
  double w1;
};

inline std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

} // namespace detail

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& in, int oh, int ow) {
  if (in.height() == oh && in.width() == ow) return in;
  const auto ty = detail::bilinear_taps(in.height(), oh);
  const auto tx = detail::bilinear_taps(in.width(), ow);
  Tensor<T> out(in.channels(), oh, ow);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < oh; ++y) {
      const auto& a = ty[y];
      for (int x = 0; x < ow; ++x) {
        const auto& b = tx[x];
        const double v = (1 - a.w1) * ((1 - b.w1) * in(c, a.i0, b.i0) + b.w1 * in(c, a.i0, b.i1)) +
                         a.w1 * ((1 - b.w1) * in(c, a.i1, b.i0) + b.w1 * in(c, a.i1, b.i1));
        out(c, y, x) = static_cast<T>(v);
      }
    }
  return out;
}

template <typename T>
Tensor<T> upsample_bilinear_backward(const Tensor<T>& dout, int ih, int iw) {
  if (dout.height() == ih && dout.width() == iw) return dout;
  const auto ty = detail::bilinear_taps(ih, dout.height());
  const auto tx = detail::bilinear_taps(iw, dout.width());
  Tensor<T> din(dout.channels(), ih, iw);
  for (int c = 0; c < dout.channels(); ++c)
    for (int y = 0; y < dout.height(); ++y) {
      const auto& a = ty[y];
      for (int x = 0; x < dout.width(); ++x) {
        const auto& b = tx[x];
        const T g = dout(c, y, x);
        din(c, a.i0, b.i0) += static_cast<T>((1 - a.w1) * (1 - b.w1) * g);
        din(c, a.i0, b.i1) += static_cast<T>((1 - a.w1) * b.w1 * g);
        din(c, a.i1, b.i0) += static_cast<T>(a.w1 * (1 - b.w1) * g);
        din(c, a.i1, b.i1) += static_cast<T>(a.w1 * b.w1 * g);
      }
    }
  return din;
}

// Per-cell softmax over channels.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> p(logits.channels(), logits.height(), logits.width());
  const std::size_t n = logits.plane();
  const int k = logits.channels();
  for (std::size_t i = 0; i < n; ++i) {
    T mx = logits.data()[i];
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits.data()[c * n + i]);
    T z = T(0);
    for (int c = 0; c < k; ++c) {
      const T e = std::exp(logits.data()[c * n + i] - mx);
      p.data()[c * n + i] = e;
      z += e;
    }
    for (int c = 0; c < k; ++c) p.data()[c * n + i] /= z;
  }
  return p;
}

// d(loss)/d(logits) given the softmax output and d(loss)/d(probs).
template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& probs, const Tensor<T>& dprobs) {
  Tensor<T> dl(probs.channels(), probs.height(), probs.width());
  const std::size_t n = probs.plane();
  const int k = probs.channels();
  for (std::size_t i = 0; i < n; ++i) {
    T dot = T(0);
    for (int c = 0; c < k; ++c) dot += probs.data()[c * n + i] * dprobs.data()[c * n + i];
    for (int c = 0; c < k; ++c)
      dl.data()[c * n + i] = probs.data()[c * n + i] * (dprobs.data()[c * n + i] - dot);
  }
  return dl;
}

} // namespace mrc::nn
