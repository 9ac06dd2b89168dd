// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dmsn/consistency.hpp"
#include "dmsn/detector.hpp"
#include "dmsn/errors.hpp"

using namespace dmsn;

namespace {

std::vector<Proposal> make_set(const std::vector<Box>& boxes) {
  std::vector<Proposal> out;
  for (size_t i = 0; i < boxes.size(); ++i) {
    Proposal p;
    p.box = boxes[i];
    p.objectness = 1.0 - 0.05 * static_cast<double>(i);
    p.rank = static_cast<int>(i) + 1;
    out.push_back(p);
  }
  return out;
}

std::vector<Proposal> random_set(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 40);
  std::vector<Box> boxes;
  for (int i = 0; i < n; ++i) {
    const double x = u(rng), y = u(rng);
    boxes.push_back({x, y, x + 2 + u(rng) / 5, y + 2 + u(rng) / 5});
  }
  return make_set(boxes);
}

// independent recomputation: full IoU matrix, argmax, weighted rank distance
double brute_force_loss(const std::vector<std::vector<Proposal>>& sources,
                        const std::vector<Proposal>& pseudo) {
  double total = 0;
  for (size_t n = 0; n < pseudo.size(); ++n) {
    for (const auto& src : sources) {
      double best = -1;
      int best_rank = 0;
      for (const auto& s : src) {
        const double v = iou(s.box, pseudo[n].box);
        if (v > best) {
          best = v;
          best_rank = s.rank;
        }
      }
      total += best * std::abs(best_rank - pseudo[n].rank);
    }
  }
  return total / static_cast<double>(pseudo.size());
}

}  // namespace

TEST_CASE("identical sets match rank-for-rank with full overlap") {
  const auto s = make_set({{0, 0, 4, 4}, {10, 0, 14, 4}, {20, 0, 24, 4}});
  const MatchResult m = match_proposals(s, s);
  REQUIRE(m.size() == 3);
  for (size_t n = 0; n < 3; ++n) {
    CHECK(m[n].best_iou == doctest::Approx(1.0));
    CHECK(m[n].matched_rank == static_cast<int>(n) + 1);
  }
  CHECK(consistency_loss({s, s}, s) == 0.0);
}

TEST_CASE("disjoint boxes give zero overlap so the term vanishes") {
  const auto pseudo = make_set({{0, 0, 1, 1}});
  const auto source = make_set({{30, 30, 31, 31}});
  const MatchResult m = match_proposals(source, pseudo);
  CHECK(m[0].best_iou == 0.0);
  CHECK(consistency_loss({source}, pseudo) == 0.0);
}

TEST_CASE("swapped-rank twin case evaluates to exactly 1.0") {
  const Box b1{0, 0, 1, 1}, b2{5, 5, 6, 6};
  const auto pseudo = make_set({b1, b2});
  const auto source = make_set({b2, b1});
  CHECK(consistency_loss({source}, pseudo) == 1.0);
}

TEST_CASE("hand-placed N=3 matching agrees with the brute-force argmax oracle") {
  const auto pseudo = make_set({{0, 0, 10, 10}, {8, 0, 18, 10}, {40, 40, 50, 50}});
  const auto source = make_set({{2, 0, 12, 10}, {41, 41, 51, 51}, {7, 0, 17, 10}});
  const MatchResult m = match_proposals(source, pseudo);
  for (size_t n = 0; n < pseudo.size(); ++n) {
    double best = -1;
    int best_rank = 0;
    for (const auto& s : source) {
      const double v = iou(s.box, pseudo[n].box);
      if (v > best) {
        best = v;
        best_rank = s.rank;
      }
    }
    CHECK(m[n].best_iou == doctest::Approx(best).epsilon(1e-12));
    CHECK(m[n].matched_rank == best_rank);
  }
}

TEST_CASE("random sets equal the brute-force recomputation") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 100; ++t) {
    const auto pseudo = random_set(6, rng);
    const std::vector<std::vector<Proposal>> sources = {random_set(6, rng), random_set(6, rng)};
    const double got = consistency_loss(sources, pseudo);
    const double want = brute_force_loss(sources, pseudo);
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
    CHECK(got >= 0);
    CHECK(got <= 2.0 * (6 - 1));  // M(N-1) bound
  }
}

TEST_CASE("tie on overlap breaks toward the lower source rank") {
  const Box b{0, 0, 4, 4};
  const auto pseudo = make_set({b, {30, 30, 34, 34}});
  const auto source = make_set({b, b});  // ranks 1 and 2, identical boxes
  CHECK(match_proposals(source, pseudo)[0].matched_rank == 1);
}

TEST_CASE("cyclically shifting ranks of an overlapping set increases the loss") {
  const auto pseudo = make_set({{0, 0, 4, 4}, {10, 0, 14, 4}, {20, 0, 24, 4}});
  auto shifted = pseudo;
  // rotate rank labels: box at rank 1 takes rank 2, etc.
  for (size_t i = 0; i < shifted.size(); ++i)
    shifted[i].rank = static_cast<int>((i + 1) % shifted.size()) + 1;
  CHECK(consistency_loss({pseudo}, pseudo) == 0.0);
  CHECK(consistency_loss({shifted}, pseudo) > 0.0);
}

TEST_CASE("set size mismatch is a contract error") {
  const auto a = make_set({{0, 0, 1, 1}});
  const auto b = make_set({{0, 0, 1, 1}, {2, 2, 3, 3}});
  CHECK_THROWS_AS(match_proposals(a, b), ContractError);
}

TEST_CASE("surrogate trains source scores and never touches pseudo parameters") {
  ModelConfig mc = ModelConfig::tiny();
  DetectorModel model(mc, 3);
  // branches start identical; displace branch 0 so matched scores differ
  for (const auto& v : model.registry().with_prefix(model.branch_prefix(0)))
    for (int64_t i = 0; i < v->val.numel(); ++i)
      v->val[i] += 0.01 * std::sin(0.7 * static_cast<double>(i) + 0.3);
  std::mt19937_64 rng(3);
  Tensor img({3, mc.image_h, mc.image_w});
  std::uniform_real_distribution<double> u(0, 1);
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = u(rng);

  const FeatureMap low = model.extract_low(img);
  const int N = 6;
  std::vector<RpnResult> source_results;
  std::vector<std::vector<Proposal>> source_sets;
  for (int i = 0; i < mc.num_sources; ++i) {
    source_results.push_back(model.rpn_forward(i, model.extract_high(i, low), N));
    source_sets.push_back(source_results.back().proposals);
  }
  const FeatureMap low_const{ad::constant(low.activations->val), low.stride};
  const RpnResult pseudo =
      model.rpn_forward(mc.pseudo_branch(), model.extract_high(mc.pseudo_branch(), low_const), N);

  auto surrogate = consistency_surrogate(source_results, pseudo.proposals);
  CHECK(surrogate->scalar() >= 0);
  // same zero set: surrogate against a source's own proposals with frozen scores is 0
  ad::backward(surrogate);

  double source_rpn_grad = 0;
  for (const auto& v : model.registry().with_prefix(model.branch_prefix(0) + "rpn/"))
    for (int64_t i = 0; i < v->grad.numel(); ++i) source_rpn_grad += std::fabs(v->grad[i]);
  CHECK(source_rpn_grad > 0);

  for (const auto& v : model.registry().with_prefix(model.branch_prefix(mc.pseudo_branch())))
    for (int64_t i = 0; i < v->grad.numel(); ++i) CHECK(v->grad[i] == 0.0);

  // discrete metric and surrogate share the zero set on identical inputs
  CHECK(consistency_loss({pseudo.proposals}, pseudo.proposals) == 0.0);
  auto self_surrogate = consistency_surrogate({pseudo}, pseudo.proposals);
  CHECK(self_surrogate->scalar() == doctest::Approx(0.0).epsilon(1e-12));
}
