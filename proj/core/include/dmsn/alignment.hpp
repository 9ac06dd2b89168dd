// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dmsn/detector.hpp"
#include "dmsn/nn.hpp"

namespace dmsn {

/// Identity forward, gradient multiplied by -scale on the way back.
struct GrlGate {
  double scale = 1.0;
};

inline ad::VarPtr grl_apply(const GrlGate& gate, const ad::VarPtr& fmap) {
  return ad::grl(fmap, gate.scale);
}

/// Per-location (M+1)-way domain scorer over G1 features: two 1x1 convs with
/// a nonlinearity, independent per-channel squashing to (0,1). Spatial size
/// is preserved (1x1 kernels only).
class LowLevelDiscriminator {
 public:
  LowLevelDiscriminator() = default;
  LowLevelDiscriminator(int in_ch, int mid_ch, int num_domains, Rng& rng);

  /// fmap [C,H,W] -> squashed map [M+1,H,W] with values in (0,1).
  ad::VarPtr operator()(const ad::VarPtr& fmap) const;
  void register_into(ParamRegistry& reg, const std::string& prefix) const;

 private:
  Conv2d c1_, c2_;
};

/// Binary probability-of-source head over a globally pooled high-level map.
class HighLevelDiscriminator {
 public:
  HighLevelDiscriminator() = default;
  HighLevelDiscriminator(int in_ch, int mid, Rng& rng);

  /// fmap [C,H,W] -> scalar in (0,1), shape [1,1].
  ad::VarPtr operator()(const ad::VarPtr& fmap) const;
  void register_into(ParamRegistry& reg, const std::string& prefix) const;

 private:
  Dense fc1_, fc2_;
};

/// Source loss on a squashed (M+1)-channel map: mean over locations of
/// (1 - D[i])^2 + sum_{k != i} D[k]^2. `source_index` is 0-based, so the
/// positive channel is `source_index` and the target channel is M.
ad::VarPtr low_level_source_loss(const ad::VarPtr& squashed_map, int source_index);

/// Target loss: mean over locations of (1 - D[M])^2.
ad::VarPtr low_level_target_loss(const ad::VarPtr& squashed_map);

/// Sum of per-domain low-level components.
ad::VarPtr low_level_total_loss(const std::vector<ad::VarPtr>& components);

/// Focal domain loss in the standard (non-negative, discriminator-descends)
/// sign: -mean_s[(1-D)^g log D] - mean_t[D^g log(1-D)]. D values are clamped
/// to [1e-6, 1-1e-6]. Either batch may be empty.
ad::VarPtr high_level_domain_loss(const std::vector<ad::VarPtr>& d_source,
                                  const std::vector<ad::VarPtr>& d_target, double gamma);

/// The adversarial heads for one DMSN model: a shared low-level discriminator
/// and one high-level discriminator per source subnet.
class AlignmentHeads {
 public:
  AlignmentHeads(const ModelConfig& cfg, uint64_t seed);

  const LowLevelDiscriminator& d_low() const { return d_low_; }
  const HighLevelDiscriminator& d_high(int source) const;
  int num_sources() const { return static_cast<int>(d_high_.size()); }

  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }

 private:
  LowLevelDiscriminator d_low_;
  std::vector<HighLevelDiscriminator> d_high_;
  ParamRegistry registry_;
};

}  // namespace dmsn
