// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0
//
// Hot-path microbenchmarks: convolution forward/backward, NMS, ROI pooling
// and a full training step at toy scale.

#include <benchmark/benchmark.h>

#include <random>

#include "dmsn/autodiff.hpp"
#include "dmsn/boxes.hpp"
#include "dmsn/detector.hpp"
#include "dmsn/trainer.hpp"

using namespace dmsn;
namespace ad = dmsn::ad;

namespace {

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(-1, 1);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = u(rng);
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int ch = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  const auto x = ad::leaf(random_tensor({ch, 32, 32}, rng));
  const auto w = ad::leaf(random_tensor({ch, ch, 3, 3}, rng));
  const auto b = ad::leaf(random_tensor({ch}, rng));
  for (auto _ : state) {
    auto y = ad::sum(ad::conv2d(x, w, b, 1, 1));
    ad::backward(y);
    benchmark::DoNotOptimize(y->val[0]);
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(8)->Arg(16);

void BM_Nms(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 100);
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (int i = 0; i < n; ++i) {
    const double x = u(rng), y = u(rng);
    boxes.push_back({x, y, x + 10 + u(rng) / 10, y + 10 + u(rng) / 10});
    scores.push_back(u(rng) / 100);
  }
  for (auto _ : state) {
    auto kept = nms(boxes, scores, 0.5);
    benchmark::DoNotOptimize(kept.size());
  }
}
BENCHMARK(BM_Nms)->Arg(64)->Arg(256)->Arg(1024);

void BM_RoiPool(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const auto fmap = ad::leaf(random_tensor({16, 16, 16}, rng));
  std::uniform_real_distribution<double> u(0, 100);
  std::vector<ad::RoiBox> rois;
  for (int i = 0; i < 32; ++i) {
    const double x = u(rng), y = u(rng);
    rois.push_back({x, y, x + 20, y + 20});
  }
  for (auto _ : state) {
    auto pooled = ad::roi_pool(fmap, rois, 4, 1.0 / 8.0);
    benchmark::DoNotOptimize(pooled->val[0]);
  }
}
BENCHMARK(BM_RoiPool);

void BM_TrainStep(benchmark::State& state) {
  DomainSpec base;
  base.domain_id = 0;
  base.appearance = {{{0.2, 0.3, 0.1}, {0.3, 0.4, 0.2}}, 0.0, 0.02, 0.0};
  base.num_images = 2;
  base.image_h = base.image_w = 64;
  base.classes = {"circle", "square", "triangle"};
  std::vector<DomainSpec> specs;
  for (int d = 0; d < 3; ++d) {
    DomainSpec s = base;
    s.domain_id = d;
    specs.push_back(s);
  }
  LoadedDataset data;
  data.data = generate_dataset(specs, 5);
  data.specs = specs;
  data.classes = base.classes;

  TrainConfig cfg;
  cfg.target_domain = 2;
  cfg.n_proposals = 16;
  cfg.probe_size = 1;
  Trainer trainer(cfg, data);
  const std::vector<ImageSample> batch = {data.data.at(0)[1], data.data.at(1)[1]};
  const ImageSample target = strip_labels(data.data.at(2))[1];
  for (auto _ : state) {
    auto stats = trainer.train_step(batch, target, 1, 0.0);
    benchmark::DoNotOptimize(stats.total);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
