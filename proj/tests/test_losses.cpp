#include "doctest.h"
#include "oracles.hpp"

#include "mrc/losses.hpp"
#include "mrc/rng.hpp"

using namespace mrc;

namespace {

Tensor<double> random_map(int h, int w, Rng& rng, double zero_prob = 0.3, double hi = 3.0) {
  Tensor<double> t(1, h, w);
  for (auto& v : t.vec()) v = rng.uniform() < zero_prob ? 0.0 : rng.uniform(0.05, hi);
  return t;
}

Tensor<double> random_logits(int k, int h, int w, Rng& rng) {
  Tensor<double> t(k, h, w);
  for (auto& v : t.vec()) v = rng.normal(0.0, 2.0);
  return t;
}

std::vector<Cell> random_cells(int h, int w, Rng& rng) {
  std::vector<Cell> cells;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (rng.uniform() < 0.4) cells.push_back({y, x});
  return cells;
}

} // namespace

TEST_CASE("ssim of identical maps is one") {
  Rng rng(1);
  auto a = random_map(16, 16, rng);
  auto s = ssim_index(a, a);
  for (double v : s.vec()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim window shrinks to the map") {
  CHECK(ssim_window_size(8, 8, {}) == 8);
  CHECK(ssim_window_size(2, 5, {}) == 2);
  CHECK(ssim_window_size(32, 40, {}) == 11);
  Tensor<double> a(1, 4, 4), b(1, 4, 4);
  CHECK(ssim_index(a, b).size() == 1);
}

TEST_CASE("supervised regression loss matches the straight-line oracle") {
  Rng rng(7);
  LossWeights w;
  for (int it = 0; it < 20; ++it) {
    const int n = it % 2 ? 16 : 8;
    auto pred = random_map(n, n, rng, 0.1);
    auto gt = random_map(n, n, rng);
    const double got = supervised_reg_loss(pred, gt, w, {}, false).value;
    CHECK(oracle::rel_err(got, oracle::sup_reg(oracle::to_grid(pred), oracle::to_grid(gt))) < 1e-10);
  }
}

TEST_CASE("pyramid loss is zero for a perfect prediction") {
  Rng rng(3);
  auto gt = random_map(16, 16, rng);
  auto mask = dense_region_mask(gt, 1e-5);
  CHECK(pyramid_ssim_loss(gt, gt, mask, 3).value == doctest::Approx(0.0));
}

TEST_CASE("pyramid rejects maps too small for J levels") {
  Tensor<double> a(1, 7, 7);
  CHECK_THROWS_AS(pyramid_ssim_loss(a, a, a, 3), TooSmallForPyramid);
  CHECK_NOTHROW(pyramid_ssim_loss(a, a, a, 2));
}

TEST_CASE("tv loss is zero for proportional maps and guarded for empty ones") {
  Rng rng(5);
  auto gt = random_map(8, 8, rng);
  auto pred = gt;
  for (auto& v : pred.vec()) v *= 3.0;
  CHECK(tv_loss(pred, gt).value == doctest::Approx(0.0));
  Tensor<double> zero(1, 8, 8);
  CHECK(tv_loss(zero, gt).value == 0.0);
  CHECK(tv_loss(gt, zero).value == 0.0);
}

TEST_CASE("cross-entropy matches oracle and rejects bad targets") {
  Rng rng(11);
  for (int it = 0; it < 10; ++it) {
    auto logits = random_logits(25, 8, 8, rng);
    Tensor<int> tg(1, 8, 8);
    for (auto& v : tg.vec()) v = static_cast<int>(rng.below(25));
    std::vector<std::vector<int>> tgg(8, std::vector<int>(8));
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) tgg[y][x] = tg.at(y, x);
    const double got = supervised_cls_loss(logits, tg, false).value;
    CHECK(oracle::rel_err(got, oracle::sup_cls(oracle::to_grids(logits), tgg)) < 1e-12);
  }
  auto logits = random_logits(4, 2, 2, rng);
  Tensor<int> bad(1, 2, 2);
  bad.at(1, 1) = 4;
  CHECK_THROWS_AS(supervised_cls_loss(logits, bad), BadTargetRange);
  bad.at(1, 1) = -1;
  CHECK_THROWS_AS(supervised_cls_loss(logits, bad), BadTargetRange);
}

TEST_CASE("cross-entropy stays finite for saturated logits") {
  Tensor<double> logits(3, 1, 1);
  logits(0, 0, 0) = 1000;
  logits(1, 0, 0) = -1000;
  Tensor<int> t(1, 1, 1);
  t.at(0, 0) = 1;
  const auto r = supervised_cls_loss(logits, t);
  CHECK(std::isfinite(r.value));
  CHECK(r.value == doctest::Approx(2000.0));
}

TEST_CASE("consistency losses match oracle") {
  Rng rng(13);
  for (int it = 0; it < 10; ++it) {
    auto s = random_map(8, 8, rng, 0.0), t = random_map(8, 8, rng, 0.0);
    auto cells = random_cells(8, 8, rng);
    CHECK(oracle::rel_err(unsup_reg_loss(s, t, cells, false).value,
                          oracle::unsup_reg(oracle::to_grid(s), oracle::to_grid(t), cells)) < 1e-12);
    auto sl = random_logits(5, 8, 8, rng);
    auto tp = nn::softmax_channels(random_logits(5, 8, 8, rng));
    CHECK(oracle::rel_err(unsup_cls_loss(sl, tp, cells, false).value,
                          oracle::unsup_cls(oracle::to_grids(sl), oracle::to_grids(tp), cells)) < 1e-12);
  }
}

TEST_CASE("empty cell set gives zero consistency") {
  Rng rng(2);
  auto s = random_map(8, 8, rng), t = random_map(8, 8, rng);
  CHECK(unsup_reg_loss(s, t, {}).value == 0.0);
  CHECK(unsup_cls_loss(random_logits(3, 8, 8, rng), nn::softmax_channels(random_logits(3, 8, 8, rng)), {}).value ==
        0.0);
}

TEST_CASE("gradients agree with central differences") {
  Rng rng(17);
  LossWeights w;
  SUBCASE("supervised regression") {
    auto gt = random_map(8, 8, rng);
    auto pred = random_map(8, 8, rng, 0.0);
    auto f = [&](const Tensor<double>& p) { return supervised_reg_loss(p, gt, w, {}, false).value; };
    CHECK(oracle::grad_rel_err(supervised_reg_loss(pred, gt, w).grad, oracle::numeric_grad(f, pred)) < 1e-6);
  }
  SUBCASE("supervised classification") {
    auto logits = random_logits(6, 8, 8, rng);
    Tensor<int> tg(1, 8, 8);
    for (auto& v : tg.vec()) v = static_cast<int>(rng.below(6));
    auto f = [&](const Tensor<double>& l) { return supervised_cls_loss(l, tg, false).value; };
    CHECK(oracle::grad_rel_err(supervised_cls_loss(logits, tg).grad, oracle::numeric_grad(f, logits)) < 1e-6);
  }
  SUBCASE("consistency classification") {
    auto logits = random_logits(6, 8, 8, rng);
    auto tp = nn::softmax_channels(random_logits(6, 8, 8, rng));
    auto cells = random_cells(8, 8, rng);
    auto f = [&](const Tensor<double>& l) { return unsup_cls_loss(l, tp, cells, false).value; };
    CHECK(oracle::grad_rel_err(unsup_cls_loss(logits, tp, cells).grad, oracle::numeric_grad(f, logits)) < 1e-6);
  }
}

TEST_CASE("clamp keeps teacher targets in range") {
  Tensor<float> d(1, 2, 2);
  d.vec() = {-3.f, 0.5f, 30.f, 25.f};
  auto c = clamp_teacher(d);
  CHECK(std::vector<float>(c.vec().begin(), c.vec().end()) == std::vector<float>{0.f, 0.5f, 25.f, 25.f});
}

TEST_CASE("ramp-up schedule") {
  CHECK(rampup_weight(0) == doctest::Approx(std::exp(-5.0)));
  CHECK(rampup_weight(20) == 1.0);
  CHECK(rampup_weight(45, 20, 2.0) == 2.0);
  CHECK(rampup_weight(10) == doctest::Approx(std::exp(-1.25)));
  double prev = 0;
  for (int e = 0; e <= 30; ++e) {
    CHECK(rampup_weight(e) >= prev);
    prev = rampup_weight(e);
  }
  CHECK_THROWS_AS(rampup_weight(-1), BadConfig);
}

TEST_CASE("total loss combines parts and rejects non-finite values") {
  LossParts p{1.0, 2.0, 3.0, 4.0};
  CHECK(total_loss(p, 0.5, 2.0) == doctest::Approx(1 + 1 + 14));
  LossWeights w;
  CHECK(total_loss(p, w, 20) == doctest::Approx(1 + 2 + 7));
  p.unsup_cls = std::nan("");
  CHECK_THROWS_AS(total_loss(p, 1.0, 1.0), NonFiniteLoss);
  p.unsup_cls = INFINITY;
  CHECK_THROWS_AS(total_loss(p, 1.0, 1.0), NonFiniteLoss);
}

TEST_CASE("loss weights validate") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.J = 0;
  CHECK_THROWS_AS(w.validate(), BadConfig);
  w = {};
  w.clamp_hi = -1;
  CHECK_THROWS_AS(w.validate(), BadConfig);
}
