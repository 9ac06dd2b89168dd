// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dmsn/errors.hpp"
#include "dmsn/psl.hpp"

using namespace dmsn;

TEST_CASE("loss memory bank ring semantics") {
  LossMemoryBank bank(1, 3);
  bank.push(0, 1);
  bank.push(0, 2);
  bank.push(0, 3);
  bank.push(0, 4);
  CHECK(bank.size(0) == 3);
  CHECK(*bank.mean(0) == doctest::Approx(3.0));  // holds {2,3,4}
}

TEST_CASE("bank rejects bad values without modification") {
  LossMemoryBank bank(2, 4);
  bank.push(0, 1.5);
  CHECK_THROWS_AS(bank.push(0, std::nan("")), NumericFault);
  CHECK_THROWS_AS(bank.push(0, -0.1), ContractError);
  CHECK(bank.size(0) == 1);
  CHECK(*bank.mean(0) == doctest::Approx(1.5));
  CHECK_FALSE(bank.all_nonempty());
  CHECK_FALSE(bank.mean(1).has_value());
}

TEST_CASE("bank json round trip") {
  LossMemoryBank bank(2, 5);
  bank.push(0, 1.25);
  bank.push(1, 2.5);
  bank.push(1, 0.5);
  const LossMemoryBank back = LossMemoryBank::from_json(bank.to_json());
  CHECK(back.capacity() == 5);
  CHECK(back.num_sources() == 2);
  CHECK(*back.mean(0) == doctest::Approx(1.25));
  CHECK(*back.mean(1) == doctest::Approx(1.5));
}

TEST_CASE("beta values follow the relative-similarity definition") {
  auto w = compute_beta({2.0, 2.0});
  CHECK(w.beta[0] == doctest::Approx(0.5));
  CHECK_FALSE(w.fallback_uniform);
  w = compute_beta({1.0, 3.0});
  CHECK(w.beta[0] == doctest::Approx(0.25));
  CHECK(w.beta[1] == doctest::Approx(0.75));
  w = compute_beta({0.0, 0.0});
  CHECK(w.fallback_uniform);
  CHECK(w.beta[0] == doctest::Approx(0.5));
}

TEST_CASE("beta normalizes and preserves the argmax on random input") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.01, 5.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v = {u(rng), u(rng), u(rng), u(rng)};
    const auto w = compute_beta(v);
    double sum = 0;
    for (double b : w.beta) {
      CHECK(b >= 0);
      sum += b;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    const auto am = [](const std::vector<double>& x) {
      return std::distance(x.begin(), std::max_element(x.begin(), x.end()));
    };
    CHECK(am(v) == am(w.beta));
  }
}

TEST_CASE("scripted 3x loss stream drives beta to (0.75, 0.25)") {
  LossMemoryBank bank(2, 100);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (int t = 0; t < 150; ++t) {
    const double x = u(rng);
    bank.push(0, 3.0 * x);  // source 0 pinned at three times source 1
    bank.push(1, x);
  }
  REQUIRE(bank.all_nonempty());
  const auto w = compute_beta(bank.means());
  CHECK(w.beta[0] == doctest::Approx(0.75).epsilon(1e-6));
  CHECK(w.beta[1] == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("ema hand arithmetic on scalar parameters") {
  ParamSet pseudo{{"p", Tensor::scalar(1.0)}};
  std::vector<ParamSet> sources{{{"p", Tensor::scalar(2.0)}}, {{"p", Tensor::scalar(4.0)}}};
  const ParamSet out = ema_update(pseudo, sources, {0.5, 0.5}, 0.99);
  CHECK(out.at("p")[0] == doctest::Approx(1.02).epsilon(1e-12));
}

TEST_CASE("ema fixed point and degenerate alpha") {
  std::vector<ParamSet> sources{{{"p", Tensor::scalar(2.0)}}, {{"p", Tensor::scalar(4.0)}}};
  ParamSet at_mix{{"p", Tensor::scalar(3.0)}};
  CHECK(ema_update(at_mix, sources, {0.5, 0.5}, 0.99).at("p")[0] == doctest::Approx(3.0));
  ParamSet far{{"p", Tensor::scalar(-7.0)}};
  CHECK(ema_update(far, sources, {0.5, 0.5}, 0.0).at("p")[0] == doctest::Approx(3.0));
  // init_pseudo is definitionally the alpha=0 update
  CHECK(init_pseudo(sources, {1.0, 0.0}).at("p")[0] == doctest::Approx(2.0));
}

TEST_CASE("ema residual decays as alpha^k for k in {1,10,100}") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-1, 1);
  ParamSet s1, s2, pseudo;
  for (const char* key : {"a", "b/w", "b/b"}) {
    Tensor t({4});
    Tensor t2({4});
    Tensor p({4});
    for (int i = 0; i < 4; ++i) {
      t[i] = u(rng);
      t2[i] = u(rng);
      p[i] = u(rng);
    }
    s1[key] = t;
    s2[key] = t2;
    pseudo[key] = p;
  }
  const std::vector<ParamSet> sources{s1, s2};
  const std::vector<double> beta{0.3, 0.7};
  const ParamSet mix = init_pseudo(sources, beta);
  const double d0 = param_distance(pseudo, mix);
  REQUIRE(d0 > 0);
  const double alpha = 0.99;
  ParamSet cur = pseudo;
  int k = 0;
  for (int target : {1, 10, 100}) {
    for (; k < target; ++k) cur = ema_update(cur, sources, beta, alpha);
    const double expect = std::pow(alpha, target) * d0;
    CHECK(param_distance(cur, mix) == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("aggregated values stay within the source/pseudo envelope") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int t = 0; t < 50; ++t) {
    ParamSet pseudo{{"p", Tensor({3})}};
    std::vector<ParamSet> sources{{{"p", Tensor({3})}}, {{"p", Tensor({3})}}};
    for (int i = 0; i < 3; ++i) {
      pseudo["p"][i] = u(rng);
      sources[0]["p"][i] = u(rng);
      sources[1]["p"][i] = u(rng);
    }
    const double b = std::uniform_real_distribution<double>(0, 1)(rng);
    const ParamSet out = ema_update(pseudo, sources, {b, 1 - b}, 0.9);
    for (int i = 0; i < 3; ++i) {
      const double lo = std::min({pseudo["p"][i], sources[0]["p"][i], sources[1]["p"][i]});
      const double hi = std::max({pseudo["p"][i], sources[0]["p"][i], sources[1]["p"][i]});
      CHECK(out.at("p")[i] >= lo - 1e-12);
      CHECK(out.at("p")[i] <= hi + 1e-12);
    }
  }
}

TEST_CASE("shape and key mismatches abort aggregation") {
  ParamSet pseudo{{"p", Tensor::scalar(1.0)}};
  std::vector<ParamSet> bad_key{{{"q", Tensor::scalar(2.0)}}};
  CHECK_THROWS_AS(ema_update(pseudo, bad_key, {1.0}, 0.5), ShapeError);
  std::vector<ParamSet> bad_shape{{{"p", Tensor({2})}}};
  CHECK_THROWS_AS(ema_update(pseudo, bad_shape, {1.0}, 0.5), ShapeError);
}
