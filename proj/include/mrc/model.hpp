#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mrc/errors.hpp"
#include "mrc/nn.hpp"
#include "mrc/rng.hpp"
#include "mrc/tensor.hpp"

namespace mrc {

struct ModelConfig {
  std::string backbone = "tiny"; // "tiny" | "vgg19"
  int levels = 25;
  std::array<int, 4> widths{16, 32, 64, 64}; // tiny backbone stage widths
  int fusion_width = 64;
  bool fusion = true;
  int reg_hidden1 = 128;
  int reg_hidden2 = 64;
  int cls_hidden = 64;

  void validate() const {
    if (levels < 2) throw BadConfig("model.levels must be >= 2");
    if (backbone != "tiny" && backbone != "vgg19") throw BadConfig("unknown backbone " + backbone);
    for (int w : widths)
      if (w <= 0) throw BadConfig("model.widths must be positive");
    if (fusion_width <= 0 || reg_hidden1 <= 0 || reg_hidden2 <= 0 || cls_hidden <= 0)
      throw BadConfig("model channel widths must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, backbone, levels, widths, fusion_width,
                                                fusion, reg_hidden1, reg_hidden2, cls_hidden)

inline constexpr std::array<float, 3> kPixelMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kPixelStd{0.229f, 0.224f, 0.225f};

// Backbone -> top-down fusion -> regression head (3x3, 3x3, 1x1, ReLU) and
// classification head (1x1, 1x1). Outputs live on the stride-8 grid.
template <typename T>
class CountingModel {
public:
  struct Output {
    Tensor<T> density; // 1 x ceil(H/8) x ceil(W/8), nonnegative
    Tensor<T> logits;  // K x ceil(H/8) x ceil(W/8)
  };

  struct Cache {
    std::vector<Tensor<T>> acts; // acts[0] = normalized input
    std::vector<std::vector<int>> pool_argmax;
    Tensor<T> l8, l16, l32, m16, feat;
    Tensor<T> r1, r2, c1;
    Output out;
  };

  explicit CountingModel(ModelConfig cfg = {}) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  int levels() const noexcept { return cfg_.levels; }
  // Layout-only parameter set; values are zero until `init`.
  const nn::ParamSet<T>& layout() const noexcept { return layout_; }

  nn::ParamSet<T> init(Rng& rng) const {
    nn::ParamSet<T> p = layout_;
    for (const auto& op : ops_)
      if (op.kind == OpKind::Conv) nn::init_conv(p, op.conv, rng);
    for (const auto* c : {&lat8_, &lat16_, &lat32_, &reg1_, &reg2_, &cls1_, &cls2_})
      if (c->weight >= 0) nn::init_conv(p, *c, rng);
    nn::init_conv(p, reg3_, rng, 0.1);
    std::fill(p[reg3_.bias].value.begin(), p[reg3_.bias].value.end(), T(0.01));
    return p;
  }

  Output forward(const nn::ParamSet<T>& p, const Tensor<T>& image, Cache* cache = nullptr) const {
    if (image.channels() != 3) throw ShapeMismatch("model input must have 3 channels");
    Cache local;
    Cache& c = cache ? *cache : local;
    c.acts.assign(1, normalize(image));
    c.pool_argmax.assign(ops_.size(), {});
    const Tensor<T>* t8 = nullptr;
    const Tensor<T>* t16 = nullptr;
    const Tensor<T>* t32 = nullptr;
    c.acts.reserve(ops_.size() + 1);
    for (std::size_t i = 0; i < ops_.size(); ++i) {
      const auto& op = ops_[i];
      if (op.kind == OpKind::Conv) {
        auto y = nn::conv2d(p, op.conv, c.acts.back());
        nn::relu_inplace(y);
        c.acts.push_back(std::move(y));
      } else {
        c.acts.push_back(maxpool(c.acts.back(), c.pool_argmax[i]));
      }
    }
    t8 = &c.acts[tap8_ + 1];
    t16 = &c.acts[tap16_ + 1];
    t32 = &c.acts[tap32_ + 1];

    c.l8 = nn::conv2d(p, lat8_, *t8);
    if (cfg_.fusion) {
      c.l16 = nn::conv2d(p, lat16_, *t16);
      c.l32 = nn::conv2d(p, lat32_, *t32);
      c.m16 = c.l16;
      c.m16 += nn::upsample_bilinear(c.l32, c.l16.height(), c.l16.width());
      c.feat = c.l8;
      c.feat += nn::upsample_bilinear(c.m16, c.l8.height(), c.l8.width());
    } else {
      c.feat = c.l8;
    }
    nn::relu_inplace(c.feat);

    c.r1 = nn::conv2d(p, reg1_, c.feat);
    nn::relu_inplace(c.r1);
    c.r2 = nn::conv2d(p, reg2_, c.r1);
    nn::relu_inplace(c.r2);
    c.out.density = nn::conv2d(p, reg3_, c.r2);
    nn::relu_inplace(c.out.density);

    c.c1 = nn::conv2d(p, cls1_, c.feat);
    nn::relu_inplace(c.c1);
    c.out.logits = nn::conv2d(p, cls2_, c.c1);
    return c.out;
  }

  // Accumulates parameter gradients. Either upstream gradient may be null.
  void backward(const nn::ParamSet<T>& p, const Cache& c, const Tensor<T>* d_density,
                const Tensor<T>* d_logits, nn::ParamSet<T>& grads) const {
    Tensor<T> dfeat(c.feat.channels(), c.feat.height(), c.feat.width());
    if (d_density) {
      require_same_shape(*d_density, c.out.density, "backward density");
      auto g = nn::relu_backward(c.out.density, *d_density);
      g = nn::conv2d_backward(p, reg3_, c.r2, g, grads);
      g = nn::relu_backward(c.r2, std::move(g));
      g = nn::conv2d_backward(p, reg2_, c.r1, g, grads);
      g = nn::relu_backward(c.r1, std::move(g));
      dfeat += nn::conv2d_backward(p, reg1_, c.feat, g, grads);
    }
    if (d_logits) {
      require_same_shape(*d_logits, c.out.logits, "backward logits");
      auto g = nn::conv2d_backward(p, cls2_, c.c1, *d_logits, grads);
      g = nn::relu_backward(c.c1, std::move(g));
      dfeat += nn::conv2d_backward(p, cls1_, c.feat, g, grads);
    }
    if (!d_density && !d_logits) return;
    dfeat = nn::relu_backward(c.feat, std::move(dfeat));

    std::vector<Tensor<T>> tap_grad(ops_.size() + 1);
    tap_grad[tap8_ + 1] = nn::conv2d_backward(p, lat8_, c.acts[tap8_ + 1], dfeat, grads);
    if (cfg_.fusion) {
      auto dm16 = nn::upsample_bilinear_backward(dfeat, c.m16.height(), c.m16.width());
      auto d16 = nn::conv2d_backward(p, lat16_, c.acts[tap16_ + 1], dm16, grads);
      auto dl32 = nn::upsample_bilinear_backward(dm16, c.l32.height(), c.l32.width());
      auto d32 = nn::conv2d_backward(p, lat32_, c.acts[tap32_ + 1], dl32, grads);
      accumulate(tap_grad[tap16_ + 1], d16);
      accumulate(tap_grad[tap32_ + 1], d32);
    }

    Tensor<T> g;
    for (int i = static_cast<int>(ops_.size()) - 1; i >= 0; --i) {
      if (!tap_grad[i + 1].empty()) accumulate(g, tap_grad[i + 1]);
      if (g.empty()) continue; // nothing flows past the deepest used tap yet
      const auto& op = ops_[i];
      if (op.kind == OpKind::Conv) {
        g = nn::relu_backward(c.acts[i + 1], std::move(g));
        g = nn::conv2d_backward(p, op.conv, c.acts[i], g, grads, i > 0);
      } else {
        g = maxpool_backward(g, c.acts[i], c.pool_argmax[i]);
      }
    }
  }

private:
  enum class OpKind { Conv, MaxPool };
  struct Op {
    OpKind kind;
    nn::ConvSpec conv;
  };

  void build() {
    auto& ps = layout_;
    auto conv = [&](const std::string& name, int in, int out, int k, int stride) {
      ops_.push_back({OpKind::Conv, nn::add_conv(ps, name, in, out, k, stride)});
    };
    int feat8 = 0, feat16 = 0, feat32 = 0;
    if (cfg_.backbone == "tiny") {
      const auto& w = cfg_.widths;
      conv("backbone.stage1.conv1", 3, w[0], 3, 2);
      conv("backbone.stage1.conv2", w[0], w[0], 3, 2);
      conv("backbone.stage2.conv", w[0], w[1], 3, 2);
      tap8_ = static_cast<int>(ops_.size()) - 1;
      conv("backbone.stage3.conv", w[1], w[2], 3, 2);
      tap16_ = static_cast<int>(ops_.size()) - 1;
      conv("backbone.stage4.conv", w[2], w[3], 3, 2);
      tap32_ = static_cast<int>(ops_.size()) - 1;
      feat8 = w[1];
      feat16 = w[2];
      feat32 = w[3];
    } else { // VGG-19 convolutional stack, cut after the last pooling layer
      const std::vector<std::vector<int>> blocks{
          {64, 64}, {128, 128}, {256, 256, 256, 256}, {512, 512, 512, 512}, {512, 512, 512, 512}};
      int in = 3;
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        for (std::size_t l = 0; l < blocks[b].size(); ++l) {
          conv("backbone.block" + std::to_string(b + 1) + ".conv" + std::to_string(l + 1), in,
               blocks[b][l], 3, 1);
          in = blocks[b][l];
        }
        ops_.push_back({OpKind::MaxPool, {}});
        if (b == 2) tap8_ = static_cast<int>(ops_.size()) - 1;
        if (b == 3) tap16_ = static_cast<int>(ops_.size()) - 1;
        if (b == 4) tap32_ = static_cast<int>(ops_.size()) - 1;
      }
      feat8 = 256;
      feat16 = 512;
      feat32 = 512;
    }
    const int F = cfg_.fusion_width;
    lat8_ = nn::add_conv(ps, "fusion.lateral8", feat8, F, 1, 1);
    if (cfg_.fusion) {
      lat16_ = nn::add_conv(ps, "fusion.lateral16", feat16, F, 1, 1);
      lat32_ = nn::add_conv(ps, "fusion.lateral32", feat32, F, 1, 1);
    }
    reg1_ = nn::add_conv(ps, "reg.conv1", F, cfg_.reg_hidden1, 3, 1);
    reg2_ = nn::add_conv(ps, "reg.conv2", cfg_.reg_hidden1, cfg_.reg_hidden2, 3, 1);
    reg3_ = nn::add_conv(ps, "reg.conv3", cfg_.reg_hidden2, 1, 1, 1);
    cls1_ = nn::add_conv(ps, "cls.conv1", F, cfg_.cls_hidden, 1, 1);
    cls2_ = nn::add_conv(ps, "cls.conv2", cfg_.cls_hidden, cfg_.levels, 1, 1);
  }

  static Tensor<T> normalize(const Tensor<T>& img) {
    Tensor<T> x(3, img.height(), img.width());
    for (int c = 0; c < 3; ++c) {
      const T m = static_cast<T>(kPixelMean[c]), s = static_cast<T>(kPixelStd[c]);
      auto src = img.channel(c);
      auto dst = x.channel(c);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = (src[i] - m) / s;
    }
    return x;
  }

  static void accumulate(Tensor<T>& into, const Tensor<T>& g) {
    if (into.empty()) into = g;
    else into += g;
  }

  // 2x2 max pooling, stride 2, ceil mode (partial windows at the border).
  static Tensor<T> maxpool(const Tensor<T>& in, std::vector<int>& argmax) {
    const int oh = (in.height() + 1) / 2, ow = (in.width() + 1) / 2;
    Tensor<T> out(in.channels(), oh, ow);
    argmax.assign(out.size(), 0);
    std::size_t o = 0;
    for (int c = 0; c < in.channels(); ++c)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          int bi = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int iy = 2 * y + dy, ix = 2 * x + dx;
              if (iy >= in.height() || ix >= in.width()) continue;
              if (in(c, iy, ix) > best) {
                best = in(c, iy, ix);
                bi = iy * in.width() + ix;
              }
            }
          out.data()[o] = best;
          argmax[o] = bi;
        }
    return out;
  }

  static Tensor<T> maxpool_backward(const Tensor<T>& dout, const Tensor<T>& in,
                                    const std::vector<int>& argmax) {
    Tensor<T> din(in.channels(), in.height(), in.width());
    const std::size_t plane_out = dout.plane();
    for (std::size_t o = 0; o < dout.size(); ++o) {
      const auto c = o / plane_out;
      din.data()[c * din.plane() + argmax[o]] += dout.data()[o];
    }
    return din;
  }

  ModelConfig cfg_;
  nn::ParamSet<T> layout_;
  std::vector<Op> ops_;
  int tap8_ = -1, tap16_ = -1, tap32_ = -1;
  nn::ConvSpec lat8_, lat16_, lat32_, reg1_, reg2_, reg3_, cls1_, cls2_;
};

template <typename T>
struct TeacherState {
  nn::ParamSet<T> params;
  double momentum = 0.999;
};

template <typename T>
TeacherState<T> init_teacher(const nn::ParamSet<T>& student, double momentum = 0.999) {
  return {student, momentum};
}

// theta_t <- m * theta_t + (1 - m) * theta_s for every parameter.
template <typename T>
void ema_update(TeacherState<T>& teacher, const nn::ParamSet<T>& student, double m) {
  if (!(m >= 0.0 && m < 1.0)) throw BadConfig("EMA momentum must lie in [0, 1)");
  if (!teacher.params.same_layout(student)) throw ShapeMismatch("teacher/student layouts differ");
  for (std::size_t i = 0; i < student.size(); ++i) {
    auto& t = teacher.params[i].value;
    const auto& s = student[i].value;
    for (std::size_t j = 0; j < t.size(); ++j)
      t[j] = static_cast<T>(m * static_cast<double>(t[j]) + (1.0 - m) * static_cast<double>(s[j]));
  }
}

template <typename T>
void ema_update(TeacherState<T>& teacher, const nn::ParamSet<T>& student) {
  ema_update(teacher, student, teacher.momentum);
}

struct Prediction {
  Tensor<float> density;
  Tensor<float> probs;
  double count() const { return density.sum(); }
};

// Evaluation-mode inference. The image is reflect-padded to a multiple of 8.
template <typename T>
Prediction predict(const CountingModel<T>& model, const nn::ParamSet<T>& params, const Image& image) {
  const auto padded = pad_to_multiple(image, 8, PadMode::Reflect);
  const auto out = model.forward(params, padded.template cast<T>());
  return {out.density.template cast<float>(), nn::softmax_channels(out.logits).template cast<float>()};
}

} // namespace mrc
