#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mrc/errors.hpp"

namespace mrc {

// 64-byte aligned storage so vectorized reductions peel identically on every
// allocation and results do not depend on heap addresses.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t align{64};
  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), align)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, align); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense channel-major (C, H, W) array. Single images, feature maps and
// density maps all use this layout; a density map is a 1-channel tensor.
template <typename T>
class Tensor {
public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : c_(channels), h_(height), w_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {
    assert(channels >= 0 && height >= 0 && width >= 0);
  }

  int channels() const noexcept { return c_; }
  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int c, int y, int x) noexcept {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  const T& operator()(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  // Single-channel shorthand.
  T& at(int y, int x) noexcept { return (*this)(0, y, x); }
  const T& at(int y, int x) const noexcept { return (*this)(0, y, x); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::span<T> channel(int c) noexcept { return {data_.data() + c * plane(), plane()}; }
  std::span<const T> channel(int c) const noexcept {
    return {data_.data() + c * plane(), plane()};
  }
  AlignedVector<T>& vec() noexcept { return data_; }
  const AlignedVector<T>& vec() const noexcept { return data_; }

  bool same_shape(const Tensor& o) const noexcept {
    return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  double sum() const {
    double s = 0.0;
    for (const T& v : data_) s += static_cast<double>(v);
    return s;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(c_, h_, w_);
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  Tensor& operator+=(const Tensor& o) {
    assert(same_shape(o));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

private:
  int c_ = 0, h_ = 0, w_ = 0;
  AlignedVector<T> data_;
};

using Image = Tensor<float>;

inline std::string shape_str(int c, int h, int w) {
  return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

template <typename T>
std::string shape_str(const Tensor<T>& t) {
  return shape_str(t.channels(), t.height(), t.width());
}

template <typename T, typename U>
void require_same_shape(const Tensor<T>& a, const Tensor<U>& b, const char* where) {
  if (a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width())
    throw ShapeMismatch(std::string(where) + ": " + shape_str(a) + " vs " + shape_str(b));
}

// Bilinear resample of every channel. Destination pixel (y, x) reads the
// source at (y / sy, x / sx), i.e. coordinates scale about the top-left
// corner, matching how point annotations are rescaled (p' = s * p).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& src, int out_h, int out_w) {
  Tensor<T> out(src.channels(), out_h, out_w);
  if (src.empty() || out_h == 0 || out_w == 0) return out;
  const double sy = static_cast<double>(out_h) / src.height();
  const double sx = static_cast<double>(out_w) / src.width();
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::min(y / sy, static_cast<double>(src.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::min(x / sx, static_cast<double>(src.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels(); ++c) {
        const double v = (1 - wy) * ((1 - wx) * src(c, y0, x0) + wx * src(c, y0, x1)) +
                         wy * ((1 - wx) * src(c, y1, x0) + wx * src(c, y1, x1));
        out(c, y, x) = static_cast<T>(v);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& src) {
  Tensor<T> out(src.channels(), src.height(), src.width());
  for (int c = 0; c < src.channels(); ++c)
    for (int y = 0; y < src.height(); ++y)
      for (int x = 0; x < src.width(); ++x)
        out(c, y, src.width() - 1 - x) = src(c, y, x);
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& src, int y0, int x0, int h, int w) {
  assert(y0 >= 0 && x0 >= 0 && y0 + h <= src.height() && x0 + w <= src.width());
  Tensor<T> out(src.channels(), h, w);
  for (int c = 0; c < src.channels(); ++c)
    for (int y = 0; y < h; ++y)
      std::copy_n(&src(c, y0 + y, x0), w, &out(c, y, 0));
  return out;
}

// Pads bottom/right up to the next multiple of `multiple`. Pixels use
// reflection, everything else (density) uses zeros.
enum class PadMode { Reflect, Zero };

template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& src, int multiple, PadMode mode) {
  const int h = (src.height() + multiple - 1) / multiple * multiple;
  const int w = (src.width() + multiple - 1) / multiple * multiple;
  if (h == src.height() && w == src.width()) return src;
  Tensor<T> out(src.channels(), h, w);
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  for (int c = 0; c < src.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (y < src.height() && x < src.width()) {
          out(c, y, x) = src(c, y, x);
        } else if (mode == PadMode::Reflect) {
          out(c, y, x) = src(c, reflect(y, src.height()), reflect(x, src.width()));
        }
      }
  return out;
}

} // namespace mrc
