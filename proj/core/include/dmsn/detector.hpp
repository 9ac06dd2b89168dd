// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmsn/boxes.hpp"
#include "dmsn/nn.hpp"
#include "dmsn/synth.hpp"

namespace dmsn {

/// Architecture knobs. All M+1 branches share this architecture; tests use
/// shrunken widths so exhaustive finite-difference checks stay cheap.
struct ModelConfig {
  int num_classes = 3;
  int num_sources = 2;  // M
  int image_h = 64, image_w = 64;

  int g1_c1 = 8, g1_c2 = 16, g1_c3 = 24;   // stride 4 after G1
  int g2_c1 = 32, g2_c2 = 32, g2_c3 = 48;  // stride 8 after G2
  int rpn_mid = 32;
  int roi_fc = 64;
  int roi_pool = 4;
  std::vector<double> anchor_scales = {12, 17, 24};
  int dlow_mid = 12;
  int dhigh_mid = 24;

  int low_stride() const { return 4; }
  int high_stride() const { return 8; }
  int num_branches() const { return num_sources + 1; }
  int pseudo_branch() const { return num_sources; }  // branch id M
  int num_anchors() const { return static_cast<int>(anchor_scales.size()); }

  static ModelConfig tiny();  // shrunk widths for gradient-oracle tests
};

struct FeatureMap {
  ad::VarPtr activations;  // [C,H,W]
  int stride = 1;
};

struct Proposal {
  Box box;
  double objectness = 0;  // squashed score in (0,1)
  int rank = 0;           // 1 = highest objectness
  int anchor_index = -1;  // flat index into the objectness logit map
};

struct RpnResult {
  std::vector<Proposal> proposals;  // exactly n_keep, ranks 1..n_keep
  ad::VarPtr obj_logits;            // [A,Hf,Wf]
  ad::VarPtr deltas;                // [4A,Hf,Wf]
};

struct RoiResult {
  ad::VarPtr logits;             // [V,C+1], valid rows only
  ad::VarPtr probs;              // [V,C+1]
  ad::VarPtr deltas;             // [V,4*(C+1)]
  std::vector<int> valid_rows;   // indices into the input proposal list
  Tensor class_scores;           // [R,C+1] values incl. degenerate rows (bg=1)
};

struct DetLossResult {
  ad::VarPtr total;
  ad::VarPtr rpn_total;  // first-stage terms only; fully differentiable in the backbone
  double rpn_cls = 0, rpn_reg = 0, rcnn_cls = 0, rcnn_reg = 0;
};

struct Detection {
  Box box;
  int class_id = 0;  // never background
  double score = 0;
  int subnet_id = 0;
};

struct G2Net {
  Conv2d c1, c2, c3;
};
struct RpnNet {
  Conv2d conv, cls, reg;
};
struct RoiHeadNet {
  Dense fc1, cls, reg;
};
struct BranchNet {
  G2Net g2;
  RpnNet rpn;
  RoiHeadNet roi;
};

/// The spindle: one shared low-level extractor G1 plus M+1 high-level
/// branches (M supervised source subnets and the EMA pseudo subnet, id M).
class DetectorModel {
 public:
  DetectorModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }

  FeatureMap extract_low(const Tensor& pixels) const;
  FeatureMap extract_low(const ImageSample& img) const { return extract_low(img.pixels); }
  FeatureMap extract_high(int branch_id, const FeatureMap& low) const;

  /// Anchors for a feature map of the given size, flat order (a, h, w).
  std::vector<Box> anchors(int feat_h, int feat_w) const;

  RpnResult rpn_forward(int branch_id, const FeatureMap& high, int n_keep) const;
  RoiResult roi_head(int branch_id, const FeatureMap& high,
                     const std::vector<Proposal>& proposals) const;

  DetLossResult detection_loss(int branch_id, const ImageSample& img, Rng& rng) const;
  /// Same loss on an already-computed high-level map (lets the trainer share
  /// forward passes between the detection and alignment objectives).
  DetLossResult detection_loss_on(int branch_id, const FeatureMap& high,
                                  const std::vector<BoxAnnotation>& boxes, Rng& rng) const;

  nlohmann::json checkpoint_metadata() const;

  /// Full single-branch inference on shared low features.
  std::vector<Detection> detect(int branch_id, const FeatureMap& low, int n_keep,
                                double score_threshold, double nms_iou) const;

  ParamSet branch_params(int branch_id) const;
  void load_branch_params(int branch_id, const ParamSet& set);

  /// False until the merged branch receives its first aggregated weights;
  /// evaluation skips the merged branch while this is unset.
  bool pseudo_initialized() const { return pseudo_initialized_; }
  void set_pseudo_initialized(bool v) { pseudo_initialized_ = v; }

  void save_checkpoint(const std::string& path) const;
  static DetectorModel load_checkpoint(const std::string& path);

  std::string branch_prefix(int branch_id) const;

 private:
  void check_branch(int branch_id) const;

  ModelConfig cfg_;
  Conv2d g1c1_, g1c2_, g1c3_;
  std::vector<BranchNet> branches_;
  ParamRegistry registry_;
  bool pseudo_initialized_ = false;
};

}  // namespace dmsn
