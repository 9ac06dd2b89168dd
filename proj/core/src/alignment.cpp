// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/alignment.hpp"

#include "dmsn/errors.hpp"

namespace dmsn {

namespace {
constexpr double kEps = 1e-6;
}

LowLevelDiscriminator::LowLevelDiscriminator(int in_ch, int mid_ch, int num_domains, Rng& rng)
    : c1_(in_ch, mid_ch, 1, 1, 0, rng), c2_(mid_ch, num_domains, 1, 1, 0, rng) {}

ad::VarPtr LowLevelDiscriminator::operator()(const ad::VarPtr& fmap) const {
  return ad::sigmoid(c2_(ad::relu(c1_(fmap))));
}

void LowLevelDiscriminator::register_into(ParamRegistry& reg, const std::string& prefix) const {
  c1_.register_into(reg, prefix + "/conv1");
  c2_.register_into(reg, prefix + "/conv2");
}

HighLevelDiscriminator::HighLevelDiscriminator(int in_ch, int mid, Rng& rng)
    : fc1_(in_ch, mid, rng), fc2_(mid, 1, rng) {}

ad::VarPtr HighLevelDiscriminator::operator()(const ad::VarPtr& fmap) const {
  return ad::sigmoid(fc2_(ad::relu(fc1_(ad::global_avg_pool(fmap)))));
}

void HighLevelDiscriminator::register_into(ParamRegistry& reg, const std::string& prefix) const {
  fc1_.register_into(reg, prefix + "/fc1");
  fc2_.register_into(reg, prefix + "/fc2");
}

ad::VarPtr low_level_source_loss(const ad::VarPtr& squashed_map, int source_index) {
  const int K = squashed_map->val.dim(0);
  if (source_index < 0 || source_index >= K - 1)
    throw ContractError("low_level_source_loss: source index out of range");
  return ad::lsq_domain_loss(squashed_map, source_index, /*penalize_others=*/true);
}

ad::VarPtr low_level_target_loss(const ad::VarPtr& squashed_map) {
  const int K = squashed_map->val.dim(0);
  return ad::lsq_domain_loss(squashed_map, K - 1, /*penalize_others=*/false);
}

ad::VarPtr low_level_total_loss(const std::vector<ad::VarPtr>& components) {
  return ad::add_scalars(components);
}

ad::VarPtr high_level_domain_loss(const std::vector<ad::VarPtr>& d_source,
                                  const std::vector<ad::VarPtr>& d_target, double gamma) {
  if (gamma < 0) throw ContractError("high_level_domain_loss: gamma must be >= 0");
  std::vector<ad::VarPtr> terms;
  auto check = [](const ad::VarPtr& d) {
    if (d->val.numel() != 1) throw ShapeError("high_level_domain_loss: D must be scalar");
    if (d->val[0] < 0.0 || d->val[0] > 1.0)
      throw ContractError("high_level_domain_loss: D outside [0,1]");
  };
  if (!d_source.empty()) {
    std::vector<ad::VarPtr> parts;
    for (const auto& d : d_source) {
      check(d);
      auto dc = ad::clamp(d, kEps, 1.0 - kEps);
      auto one_minus = ad::add_const(ad::scale(dc, -1.0), 1.0);
      parts.push_back(ad::mul(ad::pow_const(one_minus, gamma), ad::vlog(dc)));
    }
    terms.push_back(ad::scale(ad::add_scalars(parts), -1.0 / static_cast<double>(parts.size())));
  }
  if (!d_target.empty()) {
    std::vector<ad::VarPtr> parts;
    for (const auto& d : d_target) {
      check(d);
      auto dc = ad::clamp(d, kEps, 1.0 - kEps);
      auto one_minus = ad::add_const(ad::scale(dc, -1.0), 1.0);
      parts.push_back(ad::mul(ad::pow_const(dc, gamma), ad::vlog(one_minus)));
    }
    terms.push_back(ad::scale(ad::add_scalars(parts), -1.0 / static_cast<double>(parts.size())));
  }
  return ad::add_scalars(terms);
}

AlignmentHeads::AlignmentHeads(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  d_low_ = LowLevelDiscriminator(cfg.g1_c3, cfg.dlow_mid, cfg.num_branches(), rng);
  d_low_.register_into(registry_, "d_low");
  for (int i = 0; i < cfg.num_sources; ++i) {
    d_high_.emplace_back(cfg.g2_c3, cfg.dhigh_mid, rng);
    d_high_.back().register_into(registry_, "d_high" + std::to_string(i));
  }
}

const HighLevelDiscriminator& AlignmentHeads::d_high(int source) const {
  if (source < 0 || source >= static_cast<int>(d_high_.size()))
    throw ContractError("d_high: source index out of range");
  return d_high_[static_cast<size_t>(source)];
}

}  // namespace dmsn
