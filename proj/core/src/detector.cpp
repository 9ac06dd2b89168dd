// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dmsn/checkpoint.hpp"
#include "dmsn/errors.hpp"

namespace dmsn {

namespace {
// training-time sampling sizes (standard Faster R-CNN practice, scaled down)
constexpr int kRpnSampleTotal = 32;
constexpr int kRpnSamplePosMax = 16;
constexpr int kRoiSampleTotal = 16;
constexpr int kRoiSamplePosMax = 8;
constexpr int kTrainProposals = 32;
constexpr double kAnchorPosIou = 0.7;
constexpr double kAnchorNegIou = 0.3;
constexpr double kRoiPosIou = 0.5;
constexpr double kProposalNmsIou = 0.7;
}  // namespace

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.num_classes = 2;
  c.num_sources = 2;
  c.image_h = 16;
  c.image_w = 16;
  c.g1_c1 = 4;
  c.g1_c2 = 4;
  c.g1_c3 = 6;
  c.g2_c1 = 6;
  c.g2_c2 = 6;
  c.g2_c3 = 8;
  c.rpn_mid = 6;
  c.roi_fc = 8;
  c.roi_pool = 2;
  c.anchor_scales = {6, 10};
  c.dlow_mid = 4;
  c.dhigh_mid = 4;
  return c;
}

DetectorModel::DetectorModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  Rng rng(seed);
  g1c1_ = Conv2d(3, cfg_.g1_c1, 3, 1, 1, rng);
  g1c2_ = Conv2d(cfg_.g1_c1, cfg_.g1_c2, 3, 2, 1, rng);
  g1c3_ = Conv2d(cfg_.g1_c2, cfg_.g1_c3, 3, 2, 1, rng);
  g1c1_.register_into(registry_, "g1/conv1");
  g1c2_.register_into(registry_, "g1/conv2");
  g1c3_.register_into(registry_, "g1/conv3");

  const int C1 = cfg_.num_classes + 1;
  for (int b = 0; b < cfg_.num_branches(); ++b) {
    // all branches start from the same draw: best-behaved for EMA aggregation
    Rng brng(seed + 1);
    BranchNet net;
    net.g2.c1 = Conv2d(cfg_.g1_c3, cfg_.g2_c1, 3, 2, 1, brng);
    net.g2.c2 = Conv2d(cfg_.g2_c1, cfg_.g2_c2, 3, 1, 1, brng);
    net.g2.c3 = Conv2d(cfg_.g2_c2, cfg_.g2_c3, 3, 1, 1, brng);
    net.rpn.conv = Conv2d(cfg_.g2_c3, cfg_.rpn_mid, 3, 1, 1, brng);
    net.rpn.cls = Conv2d(cfg_.rpn_mid, cfg_.num_anchors(), 1, 1, 0, brng);
    net.rpn.reg = Conv2d(cfg_.rpn_mid, 4 * cfg_.num_anchors(), 1, 1, 0, brng);
    const int roi_in = cfg_.g2_c3 * cfg_.roi_pool * cfg_.roi_pool;
    net.roi.fc1 = Dense(roi_in, cfg_.roi_fc, brng);
    net.roi.cls = Dense(cfg_.roi_fc, C1, brng);
    net.roi.reg = Dense(cfg_.roi_fc, 4 * C1, brng);
    const std::string p = branch_prefix(b);
    net.g2.c1.register_into(registry_, p + "g2/conv1");
    net.g2.c2.register_into(registry_, p + "g2/conv2");
    net.g2.c3.register_into(registry_, p + "g2/conv3");
    net.rpn.conv.register_into(registry_, p + "rpn/conv");
    net.rpn.cls.register_into(registry_, p + "rpn/cls");
    net.rpn.reg.register_into(registry_, p + "rpn/reg");
    net.roi.fc1.register_into(registry_, p + "roi/fc1");
    net.roi.cls.register_into(registry_, p + "roi/cls");
    net.roi.reg.register_into(registry_, p + "roi/reg");
    branches_.push_back(std::move(net));
  }
}

std::string DetectorModel::branch_prefix(int branch_id) const {
  return "branch" + std::to_string(branch_id) + "/";
}

void DetectorModel::check_branch(int branch_id) const {
  if (branch_id < 0 || branch_id >= cfg_.num_branches())
    throw ContractError("unknown branch id " + std::to_string(branch_id));
}

FeatureMap DetectorModel::extract_low(const Tensor& pixels) const {
  if (pixels.ndim() != 3 || pixels.dim(0) != 3 || pixels.dim(1) != cfg_.image_h ||
      pixels.dim(2) != cfg_.image_w)
    throw ContractError("extract_low: image size does not match model config");
  for (int64_t i = 0; i < pixels.numel(); ++i) {
    if (pixels[i] < 0.0 || pixels[i] > 1.0)
      throw ContractError("extract_low: pixels must lie in [0,1]");
  }
  auto x = ad::constant(pixels);
  auto f = ad::relu(g1c1_(x));
  f = ad::relu(g1c2_(f));
  f = ad::relu(g1c3_(f));
  if (!f->val.all_finite()) throw NumericFault("non-finite activations in G1");
  return {f, cfg_.low_stride()};
}

FeatureMap DetectorModel::extract_high(int branch_id, const FeatureMap& low) const {
  check_branch(branch_id);
  const auto& g2 = branches_[static_cast<size_t>(branch_id)].g2;
  auto f = ad::relu(g2.c1(low.activations));
  f = ad::relu(g2.c2(f));
  f = ad::relu(g2.c3(f));
  if (!f->val.all_finite()) throw NumericFault("non-finite activations in G2");
  return {f, cfg_.high_stride()};
}

std::vector<Box> DetectorModel::anchors(int feat_h, int feat_w) const {
  std::vector<Box> out;
  out.reserve(static_cast<size_t>(cfg_.num_anchors()) * feat_h * feat_w);
  const double s = cfg_.high_stride();
  for (double scale : cfg_.anchor_scales) {
    for (int h = 0; h < feat_h; ++h) {
      for (int w = 0; w < feat_w; ++w) {
        const double cx = (w + 0.5) * s, cy = (h + 0.5) * s;
        out.push_back({cx - scale / 2, cy - scale / 2, cx + scale / 2, cy + scale / 2});
      }
    }
  }
  return out;
}

RpnResult DetectorModel::rpn_forward(int branch_id, const FeatureMap& high, int n_keep) const {
  check_branch(branch_id);
  if (n_keep < 1) throw ContractError("rpn_forward: n_keep must be >= 1");
  const auto& rpn = branches_[static_cast<size_t>(branch_id)].rpn;
  const int Hf = high.activations->val.dim(1), Wf = high.activations->val.dim(2);
  if (Hf < 1 || Wf < 1) throw ShapeError("rpn_forward: feature map too small");
  auto mid = ad::relu(rpn.conv(high.activations));
  auto logits = rpn.cls(mid);   // [A,Hf,Wf]
  auto deltas = rpn.reg(mid);   // [4A,Hf,Wf]

  const auto anchor_boxes = anchors(Hf, Wf);
  const int n = static_cast<int>(anchor_boxes.size());
  const double img_w = cfg_.image_w, img_h = cfg_.image_h;
  std::vector<Box> decoded(static_cast<size_t>(n));
  std::vector<double> scores(static_cast<size_t>(n));
  const auto& lv = logits->val;
  const auto& dv = deltas->val;
  for (int a = 0; a < cfg_.num_anchors(); ++a) {
    for (int h = 0; h < Hf; ++h) {
      for (int w = 0; w < Wf; ++w) {
        const int flat = (a * Hf + h) * Wf + w;
        scores[static_cast<size_t>(flat)] = 1.0 / (1.0 + std::exp(-lv[flat]));
        std::array<double, 4> d;
        for (int k = 0; k < 4; ++k) d[static_cast<size_t>(k)] = dv[((a * 4 + k) * Hf + h) * Wf + w];
        Box b = decode_deltas(anchor_boxes[static_cast<size_t>(flat)], d);
        b = clip_box(b, img_w, img_h);
        if (b.width() < 1.0) b.x2 = std::min(b.x1 + 1.0, img_w);
        if (b.height() < 1.0) b.y2 = std::min(b.y1 + 1.0, img_h);
        decoded[static_cast<size_t>(flat)] = b;
      }
    }
  }
  const std::vector<int> kept = nms(decoded, scores, kProposalNmsIou);

  RpnResult res;
  res.obj_logits = logits;
  res.deltas = deltas;
  const int take = std::min<int>(n_keep, static_cast<int>(kept.size()));
  for (int i = 0; i < take; ++i) {
    const int idx = kept[static_cast<size_t>(i)];
    res.proposals.push_back({decoded[static_cast<size_t>(idx)], scores[static_cast<size_t>(idx)],
                             i + 1, idx});
  }
  // pad by repeating the lowest-scoring survivor so ranks always span 1..n_keep
  while (static_cast<int>(res.proposals.size()) < n_keep) {
    Proposal p = res.proposals.back();
    p.rank = static_cast<int>(res.proposals.size()) + 1;
    res.proposals.push_back(p);
  }
  return res;
}

RoiResult DetectorModel::roi_head(int branch_id, const FeatureMap& high,
                                  const std::vector<Proposal>& proposals) const {
  check_branch(branch_id);
  if (proposals.empty()) throw ContractError("roi_head: empty proposal list");
  const auto& roi = branches_[static_cast<size_t>(branch_id)].roi;
  const int C1 = cfg_.num_classes + 1;

  RoiResult res;
  std::vector<ad::RoiBox> boxes;
  for (size_t i = 0; i < proposals.size(); ++i) {
    const Box& b = proposals[i].box;
    if (b.area() < 1.0) continue;  // degenerate: background score 1, no gradient
    res.valid_rows.push_back(static_cast<int>(i));
    boxes.push_back({b.x1, b.y1, b.x2, b.y2});
  }
  res.class_scores = Tensor({static_cast<int>(proposals.size()), C1});
  for (int r = 0; r < static_cast<int>(proposals.size()); ++r) res.class_scores.at2(r, 0) = 1.0;

  if (!boxes.empty()) {
    auto pooled = ad::roi_pool(high.activations, boxes, cfg_.roi_pool, 1.0 / high.stride);
    auto hidden = ad::relu(roi.fc1(pooled));
    res.logits = roi.cls(hidden);
    res.probs = ad::softmax(res.logits);
    res.deltas = roi.reg(hidden);
    for (size_t v = 0; v < res.valid_rows.size(); ++v) {
      for (int k = 0; k < C1; ++k)
        res.class_scores.at2(res.valid_rows[v], k) = res.probs->val.at2(static_cast<int>(v), k);
    }
  }
  return res;
}

DetLossResult DetectorModel::detection_loss(int branch_id, const ImageSample& img,
                                            Rng& rng) const {
  const FeatureMap low = extract_low(img);
  const FeatureMap high = extract_high(branch_id, low);
  return detection_loss_on(branch_id, high, img.boxes, rng);
}

DetLossResult DetectorModel::detection_loss_on(int branch_id, const FeatureMap& high,
                                               const std::vector<BoxAnnotation>& gt_boxes,
                                               Rng& rng) const {
  check_branch(branch_id);
  const int Hf = high.activations->val.dim(1), Wf = high.activations->val.dim(2);
  const auto anchor_boxes = anchors(Hf, Wf);
  const int n_anchors = static_cast<int>(anchor_boxes.size());

  RpnResult rpn = rpn_forward(branch_id, high, kTrainProposals);

  // ---- anchor assignment -----------------------------------------------------
  std::vector<int> label(static_cast<size_t>(n_anchors), -1);  // 1 pos, 0 neg, -1 ignore
  std::vector<int> best_gt(static_cast<size_t>(n_anchors), -1);
  if (gt_boxes.empty()) {
    std::fill(label.begin(), label.end(), 0);
  } else {
    std::vector<double> best_anchor_iou(gt_boxes.size(), 0.0);
    std::vector<int> best_anchor(gt_boxes.size(), -1);
    for (int a = 0; a < n_anchors; ++a) {
      double best = 0;
      for (size_t g = 0; g < gt_boxes.size(); ++g) {
        const double v = iou(anchor_boxes[static_cast<size_t>(a)], gt_boxes[g].box);
        if (v > best) {
          best = v;
          best_gt[static_cast<size_t>(a)] = static_cast<int>(g);
        }
        if (v > best_anchor_iou[g]) {
          best_anchor_iou[g] = v;
          best_anchor[g] = a;
        }
      }
      if (best >= kAnchorPosIou) label[static_cast<size_t>(a)] = 1;
      else if (best < kAnchorNegIou) label[static_cast<size_t>(a)] = 0;
    }
    // each GT claims its best-overlapping anchor
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      if (best_anchor[g] >= 0) {
        label[static_cast<size_t>(best_anchor[g])] = 1;
        best_gt[static_cast<size_t>(best_anchor[g])] = static_cast<int>(g);
      }
    }
  }

  std::vector<int> pos, neg;
  for (int a = 0; a < n_anchors; ++a) {
    if (label[static_cast<size_t>(a)] == 1) pos.push_back(a);
    else if (label[static_cast<size_t>(a)] == 0) neg.push_back(a);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  if (static_cast<int>(pos.size()) > kRpnSamplePosMax) pos.resize(kRpnSamplePosMax);
  const int want_neg = kRpnSampleTotal - static_cast<int>(pos.size());
  if (static_cast<int>(neg.size()) > want_neg) neg.resize(static_cast<size_t>(want_neg));

  std::vector<int64_t> cls_idx;
  std::vector<double> cls_tgt;
  for (int a : pos) {
    cls_idx.push_back(a);
    cls_tgt.push_back(1.0);
  }
  for (int a : neg) {
    cls_idx.push_back(a);
    cls_tgt.push_back(0.0);
  }
  auto rpn_cls = ad::bce_logits(ad::gather(rpn.obj_logits, cls_idx), cls_tgt);

  ad::VarPtr rpn_reg;
  if (pos.empty()) {
    rpn_reg = ad::constant(Tensor::scalar(0.0));
  } else {
    std::vector<int64_t> didx;
    Tensor target({static_cast<int>(pos.size()) * 4});
    int64_t t = 0;
    for (int a : pos) {
      const int ai = a / (Hf * Wf);
      const int rem = a % (Hf * Wf);
      const int h = rem / Wf, w = rem % Wf;
      const auto enc =
          encode_deltas(anchor_boxes[static_cast<size_t>(a)], gt_boxes[static_cast<size_t>(best_gt[static_cast<size_t>(a)])].box);
      for (int k = 0; k < 4; ++k) {
        didx.push_back(((ai * 4 + k) * Hf + h) * Wf + w);
        target[t++] = enc[static_cast<size_t>(k)];
      }
    }
    rpn_reg = ad::smooth_l1(ad::gather(rpn.deltas, didx), std::move(target),
                            static_cast<double>(cls_idx.size()));
  }

  // ---- ROI sampling ----------------------------------------------------------
  std::vector<Proposal> rois = rpn.proposals;
  for (const auto& gt : gt_boxes) rois.push_back({gt.box, 1.0, 0, -1});  // GT boxes as ROIs

  struct RoiLabel {
    int roi_idx;
    int cls;      // 0 = background
    int gt_idx;   // -1 for background
  };
  std::vector<RoiLabel> pos_rois, neg_rois;
  for (size_t i = 0; i < rois.size(); ++i) {
    if (rois[i].box.area() < 1.0) continue;
    double best = 0;
    int bg = -1;
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(rois[i].box, gt_boxes[g].box);
      if (v > best) {
        best = v;
        bg = static_cast<int>(g);
      }
    }
    if (bg >= 0 && best >= kRoiPosIou)
      pos_rois.push_back({static_cast<int>(i), gt_boxes[static_cast<size_t>(bg)].class_id + 1, bg});
    else
      neg_rois.push_back({static_cast<int>(i), 0, -1});
  }
  std::shuffle(pos_rois.begin(), pos_rois.end(), rng);
  std::shuffle(neg_rois.begin(), neg_rois.end(), rng);
  if (static_cast<int>(pos_rois.size()) > kRoiSamplePosMax) pos_rois.resize(kRoiSamplePosMax);
  const int want_bg = kRoiSampleTotal - static_cast<int>(pos_rois.size());
  if (static_cast<int>(neg_rois.size()) > want_bg) neg_rois.resize(static_cast<size_t>(want_bg));

  std::vector<RoiLabel> sampled = pos_rois;
  sampled.insert(sampled.end(), neg_rois.begin(), neg_rois.end());

  ad::VarPtr rcnn_cls, rcnn_reg;
  if (sampled.empty()) {
    rcnn_cls = ad::constant(Tensor::scalar(0.0));
    rcnn_reg = ad::constant(Tensor::scalar(0.0));
  } else {
    std::vector<Proposal> sel;
    std::vector<int> labels;
    for (const auto& rl : sampled) {
      sel.push_back(rois[static_cast<size_t>(rl.roi_idx)]);
      labels.push_back(rl.cls);
    }
    RoiResult rr = roi_head(branch_id, high, sel);
    rcnn_cls = ad::softmax_ce(rr.logits, labels);
    if (pos_rois.empty()) {
      rcnn_reg = ad::constant(Tensor::scalar(0.0));
    } else {
      const int C1 = cfg_.num_classes + 1;
      std::vector<int64_t> didx;
      Tensor target({static_cast<int>(pos_rois.size()) * 4});
      int64_t t = 0;
      for (size_t i = 0; i < pos_rois.size(); ++i) {
        const auto& rl = sampled[i];  // positives lead the sampled list
        const auto enc = encode_deltas(rois[static_cast<size_t>(rl.roi_idx)].box,
                                       gt_boxes[static_cast<size_t>(rl.gt_idx)].box);
        for (int k = 0; k < 4; ++k) {
          didx.push_back(static_cast<int64_t>(i) * 4 * C1 + rl.cls * 4 + k);
          target[t++] = enc[static_cast<size_t>(k)];
        }
      }
      rcnn_reg = ad::smooth_l1(ad::gather(rr.deltas, didx), std::move(target),
                               static_cast<double>(sampled.size()));
    }
  }

  DetLossResult out;
  out.rpn_total = ad::add(rpn_cls, rpn_reg);
  out.total = ad::add(out.rpn_total, ad::add(rcnn_cls, rcnn_reg));
  out.rpn_cls = rpn_cls->scalar();
  out.rpn_reg = rpn_reg->scalar();
  out.rcnn_cls = rcnn_cls->scalar();
  out.rcnn_reg = rcnn_reg->scalar();
  if (!std::isfinite(out.total->scalar())) throw NumericFault("non-finite detection loss");
  return out;
}

std::vector<Detection> DetectorModel::detect(int branch_id, const FeatureMap& low, int n_keep,
                                             double score_threshold, double nms_iou) const {
  check_branch(branch_id);
  const FeatureMap high = extract_high(branch_id, low);
  RpnResult rpn = rpn_forward(branch_id, high, n_keep);
  RoiResult rr = roi_head(branch_id, high, rpn.proposals);

  const int C1 = cfg_.num_classes + 1;
  std::vector<Detection> dets;
  for (size_t v = 0; v < rr.valid_rows.size(); ++v) {
    const Proposal& p = rpn.proposals[static_cast<size_t>(rr.valid_rows[v])];
    for (int cls = 1; cls < C1; ++cls) {
      // calibrate by objectness: off-domain branches propose with low
      // confidence, so their class scores must not dominate fusion
      const double score = p.objectness * rr.probs->val.at2(static_cast<int>(v), cls);
      if (score < score_threshold) continue;
      std::array<double, 4> d;
      for (int k = 0; k < 4; ++k)
        d[static_cast<size_t>(k)] = rr.deltas->val.at2(static_cast<int>(v), cls * 4 + k);
      Box b = clip_box(decode_deltas(p.box, d), cfg_.image_w, cfg_.image_h);
      if (!b.valid()) continue;
      dets.push_back({b, cls - 1, score, branch_id});
    }
  }
  // class-wise NMS
  std::vector<Detection> out;
  for (int cls = 0; cls < cfg_.num_classes; ++cls) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<int> idx;
    for (size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].class_id == cls) {
        boxes.push_back(dets[i].box);
        scores.push_back(dets[i].score);
        idx.push_back(static_cast<int>(i));
      }
    }
    for (int k : nms(boxes, scores, nms_iou)) out.push_back(dets[static_cast<size_t>(idx[static_cast<size_t>(k)])]);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

ParamSet DetectorModel::branch_params(int branch_id) const {
  check_branch(branch_id);
  return registry_.snapshot(branch_prefix(branch_id));
}

void DetectorModel::load_branch_params(int branch_id, const ParamSet& set) {
  check_branch(branch_id);
  registry_.load(branch_prefix(branch_id), set);
}

nlohmann::json DetectorModel::checkpoint_metadata() const {
  return {{"schema_version", 1},
          {"kind", "dmsn_model"},
                {"num_classes", cfg_.num_classes},
                {"num_sources", cfg_.num_sources},
                {"image_h", cfg_.image_h},
                {"image_w", cfg_.image_w},
          {"g1", {cfg_.g1_c1, cfg_.g1_c2, cfg_.g1_c3}},
          {"g2", {cfg_.g2_c1, cfg_.g2_c2, cfg_.g2_c3}},
          {"rpn_mid", cfg_.rpn_mid},
          {"roi_fc", cfg_.roi_fc},
          {"roi_pool", cfg_.roi_pool},
          {"anchor_scales", cfg_.anchor_scales},
          {"dlow_mid", cfg_.dlow_mid},
          {"dhigh_mid", cfg_.dhigh_mid},
          {"pseudo_initialized", pseudo_initialized_}};
}

void DetectorModel::save_checkpoint(const std::string& path) const {
  Archive a;
  a.metadata = checkpoint_metadata();
  for (const auto& [name, v] : registry_.all()) a.arrays[name] = v->val;
  save_archive(path, a);
}

DetectorModel DetectorModel::load_checkpoint(const std::string& path) {
  Archive a = load_archive(path);
  const auto& m = a.metadata;
  ModelConfig cfg;
  cfg.num_classes = m.at("num_classes").get<int>();
  cfg.num_sources = m.at("num_sources").get<int>();
  cfg.image_h = m.at("image_h").get<int>();
  cfg.image_w = m.at("image_w").get<int>();
  cfg.g1_c1 = m.at("g1").at(0).get<int>();
  cfg.g1_c2 = m.at("g1").at(1).get<int>();
  cfg.g1_c3 = m.at("g1").at(2).get<int>();
  cfg.g2_c1 = m.at("g2").at(0).get<int>();
  cfg.g2_c2 = m.at("g2").at(1).get<int>();
  cfg.g2_c3 = m.at("g2").at(2).get<int>();
  cfg.rpn_mid = m.at("rpn_mid").get<int>();
  cfg.roi_fc = m.at("roi_fc").get<int>();
  cfg.roi_pool = m.at("roi_pool").get<int>();
  cfg.anchor_scales = m.at("anchor_scales").get<std::vector<double>>();
  cfg.dlow_mid = m.at("dlow_mid").get<int>();
  cfg.dhigh_mid = m.at("dhigh_mid").get<int>();
  DetectorModel model(cfg, 0);
  for (const auto& [name, v] : model.registry_.all()) {
    auto it = a.arrays.find(name);
    if (it == a.arrays.end()) throw CorruptionError("checkpoint missing array: " + name);
    if (!it->second.same_shape(v->val)) throw ShapeError("checkpoint shape mismatch: " + name);
    v->val = it->second;
  }
  model.pseudo_initialized_ = m.value("pseudo_initialized", true);
  return model;
}

}  // namespace dmsn
