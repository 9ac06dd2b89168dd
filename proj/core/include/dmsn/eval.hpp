// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmsn/detector.hpp"
#include "dmsn/synth.hpp"

namespace dmsn {

struct EvalConfig {
  int n_eval_proposals = 128;
  double det_score_threshold = 0.05;
  // Above the generator's 0.3 max GT overlap, so true neighbors survive.
  double det_nms_iou = 0.45;
  double fusion_iou = 0.5;
  double iou_match_threshold = 0.5;
  bool score_average_fusion = false;   // ablation flag; default union-then-NMS
  bool include_empty_classes = false;  // score zero-GT classes as 0 instead of excluding
  std::vector<double> beta_weights;    // optional subnet score weights at fusion
};

/// Union of all subnets' detections followed by class-wise NMS. With
/// `score_average`, overlapping cross-subnet detections of one class are
/// merged by score averaging before suppression. Ties break by
/// (subnet_id, list order).
std::vector<Detection> fuse_predictions(const std::vector<std::vector<Detection>>& per_subnet,
                                        double iou_threshold, bool score_average = false,
                                        const std::vector<double>& subnet_weights = {});

struct PrPoint {
  double recall = 0, precision = 0;
};

/// Continuous all-points interpolated AP for one class. Detections and ground
/// truth are grouped per image (parallel vectors). Returns nullopt when the
/// class has no ground-truth instance.
std::optional<double> compute_ap(const std::vector<std::vector<Detection>>& dets_per_image,
                                 const std::vector<std::vector<BoxAnnotation>>& gt_per_image,
                                 int class_id, double iou_match_threshold = 0.5,
                                 std::vector<PrPoint>* curve = nullptr);

struct EvalReport {
  std::map<std::string, double> per_class_ap;  // only classes with >= 1 GT unless configured
  double map = 0;
  std::vector<double> per_subnet_map;  // standalone diagnostics, index = subnet id
  int num_images = 0;
  int num_gt_boxes = 0;
  std::string config_fingerprint;
  std::map<std::string, std::vector<PrPoint>> pr_curves;

  nlohmann::json to_json() const;
};

/// Shared-G1 inference over all M+1 subnets, fusion, and scoring against the
/// withheld ground truth of the evaluation split.
EvalReport evaluate(const DetectorModel& model, const std::vector<ImageSample>& samples,
                    const std::vector<std::string>& class_names, const EvalConfig& cfg);

}  // namespace dmsn
