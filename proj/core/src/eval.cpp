// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dmsn/errors.hpp"

namespace dmsn {

std::vector<Detection> fuse_predictions(const std::vector<std::vector<Detection>>& per_subnet,
                                        double iou_threshold, bool score_average,
                                        const std::vector<double>& subnet_weights) {
  std::vector<Detection> pool;
  for (size_t s = 0; s < per_subnet.size(); ++s) {
    for (const auto& d : per_subnet[s]) {
      Detection det = d;
      if (!subnet_weights.empty()) {
        if (subnet_weights.size() != per_subnet.size())
          throw ContractError("fuse_predictions: weight count mismatch");
        det.score *= subnet_weights[s];
      }
      if (!det.box.valid()) throw ContractError("fuse_predictions: malformed box");
      pool.push_back(det);
    }
  }
  // deterministic pre-order: (subnet_id, original order) is already the pool order
  std::vector<Detection> fused;
  std::vector<int> classes;
  for (const auto& d : pool) {
    if (std::find(classes.begin(), classes.end(), d.class_id) == classes.end())
      classes.push_back(d.class_id);
  }
  std::sort(classes.begin(), classes.end());
  for (int cls : classes) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<int> idx;
    for (size_t i = 0; i < pool.size(); ++i) {
      if (pool[i].class_id == cls) {
        boxes.push_back(pool[i].box);
        scores.push_back(pool[i].score);
        idx.push_back(static_cast<int>(i));
      }
    }
    const std::vector<int> kept = nms(boxes, scores, iou_threshold);
    for (int k : kept) {
      Detection d = pool[static_cast<size_t>(idx[static_cast<size_t>(k)])];
      if (score_average) {
        // average scores over the cluster this detection suppressed
        double acc = 0;
        int cnt = 0;
        for (size_t j = 0; j < boxes.size(); ++j) {
          if (iou(boxes[static_cast<size_t>(k)], boxes[j]) > iou_threshold ||
              static_cast<int>(j) == k) {
            acc += scores[j];
            ++cnt;
          }
        }
        d.score = acc / cnt;
      }
      fused.push_back(d);
    }
  }
  std::stable_sort(fused.begin(), fused.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return fused;
}

std::optional<double> compute_ap(const std::vector<std::vector<Detection>>& dets_per_image,
                                 const std::vector<std::vector<BoxAnnotation>>& gt_per_image,
                                 int class_id, double iou_match_threshold,
                                 std::vector<PrPoint>* curve) {
  if (dets_per_image.size() != gt_per_image.size())
    throw ContractError("compute_ap: per-image list size mismatch");
  int num_gt = 0;
  for (const auto& g : gt_per_image) {
    for (const auto& b : g) {
      if (b.class_id == class_id) ++num_gt;
    }
  }
  if (num_gt == 0) return std::nullopt;

  struct Entry {
    int img;
    int ord;  // position within the image's list, the deterministic tie-break
    double score;
    Box box;
  };
  std::vector<Entry> entries;
  for (size_t i = 0; i < dets_per_image.size(); ++i) {
    for (size_t j = 0; j < dets_per_image[i].size(); ++j) {
      const auto& d = dets_per_image[i][j];
      if (d.class_id == class_id)
        entries.push_back({static_cast<int>(i), static_cast<int>(j), d.score, d.box});
    }
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.img != b.img) return a.img < b.img;
    return a.ord < b.ord;
  });

  std::vector<std::vector<char>> taken(gt_per_image.size());
  for (size_t i = 0; i < gt_per_image.size(); ++i)
    taken[i].assign(gt_per_image[i].size(), 0);

  std::vector<double> prec, rec;
  int tp = 0, seen = 0;
  for (const auto& e : entries) {
    ++seen;
    double best = 0;
    int best_g = -1;
    const auto& gts = gt_per_image[static_cast<size_t>(e.img)];
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != class_id) continue;
      const double v = iou(e.box, gts[g].box);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best >= iou_match_threshold && !taken[static_cast<size_t>(e.img)][static_cast<size_t>(best_g)]) {
      taken[static_cast<size_t>(e.img)][static_cast<size_t>(best_g)] = 1;
      ++tp;
    }
    prec.push_back(static_cast<double>(tp) / seen);
    rec.push_back(static_cast<double>(tp) / num_gt);
  }

  // all-points interpolation: running max of precision from the right
  std::vector<double> pint = prec;
  for (int i = static_cast<int>(pint.size()) - 2; i >= 0; --i)
    pint[static_cast<size_t>(i)] = std::max(pint[static_cast<size_t>(i)], pint[static_cast<size_t>(i) + 1]);
  double ap = 0, prev_r = 0;
  for (size_t i = 0; i < rec.size(); ++i) {
    ap += (rec[i] - prev_r) * pint[i];
    prev_r = rec[i];
  }
  if (curve) {
    curve->clear();
    for (size_t i = 0; i < rec.size(); ++i) curve->push_back({rec[i], prec[i]});
  }
  return ap;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["per_class_ap"] = per_class_ap;
  j["map"] = map;
  j["per_subnet_map"] = per_subnet_map;
  j["num_images"] = num_images;
  j["num_gt_boxes"] = num_gt_boxes;
  j["config_fingerprint"] = config_fingerprint;
  nlohmann::json curves = nlohmann::json::object();
  for (const auto& [name, pts] : pr_curves) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : pts) arr.push_back({p.recall, p.precision});
    curves[name] = arr;
  }
  j["pr_curves"] = curves;
  return j;
}

namespace {

double map_over_classes(const std::vector<std::vector<Detection>>& dets,
                        const std::vector<std::vector<BoxAnnotation>>& gts, int num_classes,
                        const EvalConfig& cfg) {
  double sum = 0;
  int counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    auto ap = compute_ap(dets, gts, c, cfg.iou_match_threshold);
    if (ap) {
      sum += *ap;
      ++counted;
    } else if (cfg.include_empty_classes) {
      ++counted;  // scored as 0, the paper-style accounting
    }
  }
  return counted > 0 ? sum / counted : 0.0;
}

}  // namespace

EvalReport evaluate(const DetectorModel& model, const std::vector<ImageSample>& samples,
                    const std::vector<std::string>& class_names, const EvalConfig& cfg) {
  const ModelConfig& mc = model.config();
  if (static_cast<int>(class_names.size()) != mc.num_classes)
    throw ConfigError("evaluate: checkpoint/config class-count mismatch");

  const int B = mc.num_branches();
  // the merged branch only joins the fusion once it has aggregated weights
  const int fused_B = model.pseudo_initialized() ? B : B - 1;
  std::vector<std::vector<Detection>> fused_per_image;
  std::vector<std::vector<std::vector<Detection>>> subnet_per_image(
      static_cast<size_t>(B));
  std::vector<std::vector<BoxAnnotation>> gt_per_image;

  EvalReport rep;
  for (const auto& s : samples) {
    const FeatureMap low = model.extract_low(s);  // G1 runs once per image
    std::vector<std::vector<Detection>> per_subnet;
    for (int b = 0; b < B; ++b) {
      auto dets = model.detect(b, low, cfg.n_eval_proposals, cfg.det_score_threshold,
                               cfg.det_nms_iou);
      subnet_per_image[static_cast<size_t>(b)].push_back(dets);
      if (b < fused_B) per_subnet.push_back(std::move(dets));
    }
    fused_per_image.push_back(fuse_predictions(per_subnet, cfg.fusion_iou,
                                               cfg.score_average_fusion, cfg.beta_weights));
    gt_per_image.push_back(s.boxes);
    rep.num_gt_boxes += static_cast<int>(s.boxes.size());
  }
  rep.num_images = static_cast<int>(samples.size());

  double sum = 0;
  int counted = 0;
  for (int c = 0; c < mc.num_classes; ++c) {
    std::vector<PrPoint> curve;
    auto ap = compute_ap(fused_per_image, gt_per_image, c, cfg.iou_match_threshold, &curve);
    if (ap) {
      rep.per_class_ap[class_names[static_cast<size_t>(c)]] = *ap;
      rep.pr_curves[class_names[static_cast<size_t>(c)]] = std::move(curve);
      sum += *ap;
      ++counted;
    } else if (cfg.include_empty_classes) {
      rep.per_class_ap[class_names[static_cast<size_t>(c)]] = 0.0;
      ++counted;
    }
  }
  rep.map = counted > 0 ? sum / counted : 0.0;

  for (int b = 0; b < B; ++b)
    rep.per_subnet_map.push_back(
        map_over_classes(subnet_per_image[static_cast<size_t>(b)], gt_per_image, mc.num_classes, cfg));

  std::ostringstream fp;
  fp << "nprop=" << cfg.n_eval_proposals << ";thr=" << cfg.det_score_threshold
     << ";nms=" << cfg.det_nms_iou << ";fuse=" << cfg.fusion_iou
     << ";match=" << cfg.iou_match_threshold << ";avg=" << cfg.score_average_fusion
     << ";empty=" << cfg.include_empty_classes;
  rep.config_fingerprint = fp.str();
  return rep;
}

}  // namespace dmsn
