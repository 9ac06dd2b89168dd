// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dmsn/autodiff.hpp"
#include "dmsn/boxes.hpp"
#include "dmsn/errors.hpp"
#include "dmsn/tensor.hpp"

using namespace dmsn;
namespace ad = dmsn::ad;

namespace {

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
  return t;
}

}  // namespace

TEST_CASE("tensor shape and accessors") {
  Tensor t({2, 3, 4});
  CHECK(t.numel() == 24);
  t.at3(1, 2, 3) = 7.5;
  CHECK(t[23] == 7.5);
  CHECK_THROWS(Tensor({0, 2}));
  Tensor m({2, 3});
  m.at2(1, 2) = -1;
  CHECK(m[5] == -1);
  CHECK(m.all_finite());
  m[0] = std::nan("");
  CHECK_FALSE(m.all_finite());
}

TEST_CASE("elementwise ops match finite differences") {
  std::mt19937_64 rng(11);
  auto x = ad::leaf(random_tensor({3, 4}, rng, 0.1, 0.9));
  auto y = ad::leaf(random_tensor({3, 4}, rng, 0.1, 0.9));
  auto make = [&] {
    auto a = ad::add(ad::mul(x, y), ad::scale(ad::square(x), 0.5));
    auto b = ad::sigmoid(ad::sub(a, ad::add_const(y, 0.2)));
    return ad::mean(ad::add(ad::vlog(ad::add_const(b, 1.0)), ad::pow_const(x, 3.0)));
  };
  CHECK(ad::finite_diff_max_rel_err(make, {x, y}) < 1e-3);
}

TEST_CASE("relu and abs gradients away from the kink") {
  std::mt19937_64 rng(5);
  Tensor v = random_tensor({10}, rng);
  for (int64_t i = 0; i < v.numel(); ++i) {
    if (std::fabs(v[i]) < 0.05) v[i] = 0.1;  // keep FD off the nondifferentiable point
  }
  auto x = ad::leaf(v);
  auto make = [&] { return ad::sum(ad::add(ad::relu(x), ad::vabs(x))); };
  CHECK(ad::finite_diff_max_rel_err(make, {x}) < 1e-3);
}

TEST_CASE("conv2d matches an independent direct convolution") {
  std::mt19937_64 rng(3);
  const int C = 2, H = 5, W = 6, O = 3, K = 3, stride = 2, pad = 1;
  Tensor xt = random_tensor({C, H, W}, rng);
  Tensor wt = random_tensor({O, C, K, K}, rng);
  Tensor bt = random_tensor({O}, rng);
  auto out = ad::conv2d(ad::constant(xt), ad::constant(wt), ad::constant(bt), stride, pad);

  const int Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  REQUIRE(out->val.shape() == std::vector<int>{O, Ho, Wo});
  for (int o = 0; o < O; ++o) {
    for (int i = 0; i < Ho; ++i) {
      for (int j = 0; j < Wo; ++j) {
        double acc = bt[o];
        for (int c = 0; c < C; ++c) {
          for (int ki = 0; ki < K; ++ki) {
            for (int kj = 0; kj < K; ++kj) {
              const int y = i * stride + ki - pad, x = j * stride + kj - pad;
              if (y >= 0 && y < H && x >= 0 && x < W)
                acc += xt.at3(c, y, x) * wt[((o * C + c) * K + ki) * K + kj];
            }
          }
        }
        CHECK(out->val.at3(o, i, j) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv2d and linear gradients match finite differences") {
  std::mt19937_64 rng(17);
  auto x = ad::leaf(random_tensor({2, 4, 4}, rng));
  auto w = ad::leaf(random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5));
  auto b = ad::leaf(random_tensor({3}, rng));
  auto lw = ad::leaf(random_tensor({2, 3}, rng, -0.5, 0.5));
  auto lb = ad::leaf(random_tensor({2}, rng));
  auto make = [&] {
    auto f = ad::relu(ad::conv2d(x, w, b, 2, 1));
    auto pooled = ad::global_avg_pool(f);  // [1,3]
    return ad::mean(ad::sigmoid(ad::linear(pooled, lw, lb)));
  };
  CHECK(ad::finite_diff_max_rel_err(make, {x, w, b, lw, lb}) < 1e-3);
}

TEST_CASE("softmax rows sum to one and ce matches hand value") {
  auto logits = ad::leaf(Tensor({2, 3}, {1.0, 2.0, 3.0, 0.0, 0.0, 0.0}));
  auto p = ad::softmax(logits);
  CHECK(p->val.at2(0, 0) + p->val.at2(0, 1) + p->val.at2(0, 2) == doctest::Approx(1.0));
  // hand value: row0 label 2, row1 label 0
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const double expected = 0.5 * (-std::log(std::exp(3.0) / z) - std::log(1.0 / 3.0));
  auto ce = ad::softmax_ce(logits, {2, 0});
  CHECK(ce->scalar() == doctest::Approx(expected).epsilon(1e-9));
  auto make = [&] { return ad::softmax_ce(logits, {2, 0}); };
  CHECK(ad::finite_diff_max_rel_err(make, {logits}) < 1e-3);
}

TEST_CASE("bce with logits matches hand value and finite differences") {
  auto logits = ad::leaf(Tensor({2}, {0.4, -1.2}));
  const auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const double expected =
      0.5 * (-std::log(sig(0.4)) - std::log(1.0 - sig(-1.2)));
  CHECK(ad::bce_logits(logits, {1.0, 0.0})->scalar() == doctest::Approx(expected).epsilon(1e-9));
  auto make = [&] { return ad::bce_logits(logits, {1.0, 0.0}); };
  CHECK(ad::finite_diff_max_rel_err(make, {logits}) < 1e-3);
}

TEST_CASE("smooth l1 value and gradient") {
  auto pred = ad::leaf(Tensor({3}, {0.5, 2.0, -0.25}));
  Tensor target({3}, {0.0, 0.0, 0.0});
  // |0.5|<1 -> 0.125 ; |2|>=1 -> 1.5 ; |-0.25|<1 -> 0.03125 ; sum/2
  CHECK(ad::smooth_l1(pred, target, 2.0)->scalar() == doctest::Approx(0.828125));
  auto make = [&] { return ad::smooth_l1(pred, target, 2.0); };
  CHECK(ad::finite_diff_max_rel_err(make, {pred}) < 1e-3);
  CHECK_THROWS_AS(ad::smooth_l1(pred, target, 0.0), ContractError);
}

TEST_CASE("gather picks flat entries with gradient routing") {
  auto x = ad::leaf(Tensor({4}, {1, 2, 3, 4}));
  auto g = ad::gather(x, {3, 0});
  CHECK(g->val[0] == 4);
  CHECK(g->val[1] == 1);
  ad::backward(ad::sum(g));
  CHECK(x->grad[0] == 1);
  CHECK(x->grad[1] == 0);
  CHECK(x->grad[3] == 1);
}

TEST_CASE("grl is the identity forward and reverses gradients") {
  std::mt19937_64 rng(23);
  Tensor v = random_tensor({5}, rng);
  auto x = ad::leaf(v);
  auto y = ad::grl(x, 1.0);
  for (int64_t i = 0; i < v.numel(); ++i) CHECK(y->val[i] == v[i]);
  // scale=1, downstream loss sum -> upstream gradient all -1
  ad::backward(ad::sum(y));
  for (int64_t i = 0; i < v.numel(); ++i) CHECK(x->grad[i] == -1.0);
}

TEST_CASE("grl scale 0.5 matches negated half finite-difference gradient") {
  std::mt19937_64 rng(29);
  auto x = ad::leaf(random_tensor({6}, rng, 0.2, 0.8));
  auto loss = ad::sum(ad::square(ad::grl(x, 0.5)));
  ad::backward(loss);
  // finite differences of the same loss WITHOUT the gate
  const double eps = 1e-5;
  for (int64_t i = 0; i < x->val.numel(); ++i) {
    const double keep = x->val[i];
    auto eval = [&](double v) {
      x->val[i] = v;
      double s = 0;
      for (int64_t j = 0; j < x->val.numel(); ++j) s += x->val[j] * x->val[j];
      x->val[i] = keep;
      return s;
    };
    const double fd = (eval(keep + eps) - eval(keep - eps)) / (2 * eps);
    CHECK(x->grad[i] == doctest::Approx(-0.5 * fd).epsilon(1e-3));
  }
}

TEST_CASE("roi pool gradient flows through bilinear taps") {
  std::mt19937_64 rng(31);
  auto f = ad::leaf(random_tensor({2, 6, 6}, rng));
  std::vector<ad::RoiBox> rois = {{4.0, 4.0, 20.0, 16.0}, {0.5, 0.5, 10.0, 10.0}};
  auto make = [&] { return ad::mean(ad::roi_pool(f, rois, 2, 0.25)); };
  auto out = ad::roi_pool(f, rois, 2, 0.25);
  CHECK(out->val.shape() == std::vector<int>{2, 2 * 2 * 2});
  CHECK(ad::finite_diff_max_rel_err(make, {f}) < 1e-3);
}

TEST_CASE("lsq domain loss checks its range precondition") {
  auto bad = ad::constant(Tensor({2, 1, 1}, {0.5, 1.5}));
  CHECK_THROWS_AS(ad::lsq_domain_loss(bad, 0, true), ContractError);
  auto saturated = ad::constant(Tensor({2, 1, 1}, {0.0, 1.0}));
  CHECK_NOTHROW(ad::lsq_domain_loss(saturated, 0, true));
}

TEST_CASE("iou hand geometry and degenerate convention") {
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
  CHECK(iou({0, 0, 1, 1}, {5, 5, 6, 6}) == 0.0);
  CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou({0, 0, 0, 2}, {0, 0, 2, 2}) == 0.0);  // degenerate -> 0
  CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == iou({1, 1, 3, 3}, {0, 0, 2, 2}));
}

TEST_CASE("box delta encode and decode round trip") {
  const Box anchor{10, 12, 30, 40};
  const Box gt{14, 10, 26, 44};
  const Box back = decode_deltas(anchor, encode_deltas(anchor, gt));
  CHECK(back.x1 == doctest::Approx(gt.x1).epsilon(1e-9));
  CHECK(back.y1 == doctest::Approx(gt.y1).epsilon(1e-9));
  CHECK(back.x2 == doctest::Approx(gt.x2).epsilon(1e-9));
  CHECK(back.y2 == doctest::Approx(gt.y2).epsilon(1e-9));
}

namespace {

// reference suppression: literal restatement of the greedy contract
std::vector<int> nms_oracle(const std::vector<Box>& boxes, const std::vector<double>& scores,
                            double thr) {
  std::vector<int> order(boxes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)]; });
  std::vector<char> dead(boxes.size(), 0);
  std::vector<int> kept;
  for (int i : order) {
    if (dead[static_cast<size_t>(i)]) continue;
    kept.push_back(i);
    for (int j : order) {
      if (!dead[static_cast<size_t>(j)] && j != i &&
          iou(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(j)]) > thr)
        dead[static_cast<size_t>(j)] = 1;
    }
  }
  return kept;
}

}  // namespace

TEST_CASE("nms on five hand-placed boxes matches the suppression oracle") {
  // chain: A overlaps B, B overlaps C, C disjoint from A; D identical to A; E off alone
  std::vector<Box> boxes = {{0, 0, 10, 10}, {5, 0, 15, 10}, {11, 0, 21, 10},
                            {0, 0, 10, 10}, {50, 50, 60, 60}};
  std::vector<double> scores = {0.9, 0.85, 0.8, 0.7, 0.6};
  const auto kept = nms(boxes, scores, 0.3);
  CHECK(kept == nms_oracle(boxes, scores, 0.3));
  CHECK(kept == std::vector<int>{0, 2, 4});  // B suppressed by A, D by A
}

TEST_CASE("nms matches the oracle on random boxes") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0, 50);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::uniform_int_distribution<int> nd(1, 12);
    const int n = nd(rng);
    for (int i = 0; i < n; ++i) {
      const double x = u(rng), y = u(rng);
      boxes.push_back({x, y, x + 3 + u(rng) / 4, y + 3 + u(rng) / 4});
      scores.push_back(u(rng) / 50);
    }
    CHECK(nms(boxes, scores, 0.4) == nms_oracle(boxes, scores, 0.4));
  }
}

TEST_CASE("nms deterministic tie-break by index") {
  std::vector<Box> boxes = {{0, 0, 10, 10}, {0, 0, 10, 10}};
  std::vector<double> scores = {0.5, 0.5};
  CHECK(nms(boxes, scores, 0.5) == std::vector<int>{0});
}
