// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dmsn/tensor.hpp"

namespace dmsn::ad {

struct Var;
using VarPtr = std::shared_ptr<Var>;

/// One node in the define-by-run tape. `backprop` reads this node's grad and
/// accumulates into the parents' grads.
struct Var {
  Tensor val;
  Tensor grad;  // allocated on first backward touch
  bool requires_grad = false;
  std::vector<VarPtr> parents;
  std::function<void(Var&)> backprop;

  void ensure_grad() {
    if (grad.numel() != val.numel()) grad = Tensor::zeros(val.shape());
  }
  double scalar() const { return val[0]; }
};

VarPtr constant(Tensor t);
VarPtr leaf(Tensor t);  // requires_grad = true (parameters)

/// Runs reverse-mode accumulation from a scalar root. Seeds d(root)/d(root)=1.
void backward(const VarPtr& root);

// ---- elementwise / scalar ops ------------------------------------------------
VarPtr add(const VarPtr& a, const VarPtr& b);
VarPtr sub(const VarPtr& a, const VarPtr& b);
VarPtr mul(const VarPtr& a, const VarPtr& b);
VarPtr scale(const VarPtr& a, double s);
VarPtr add_const(const VarPtr& a, double c);
VarPtr relu(const VarPtr& a);
VarPtr sigmoid(const VarPtr& a);
VarPtr vlog(const VarPtr& a);
VarPtr square(const VarPtr& a);
VarPtr vabs(const VarPtr& a);
VarPtr pow_const(const VarPtr& a, double p);
VarPtr clamp(const VarPtr& a, double lo, double hi);

// ---- reductions --------------------------------------------------------------
VarPtr sum(const VarPtr& a);
VarPtr mean(const VarPtr& a);
VarPtr add_scalars(const std::vector<VarPtr>& xs);

// ---- structure ---------------------------------------------------------------
VarPtr gather(const VarPtr& a, std::vector<int64_t> idx);  // flat-index gather -> [n]

/// Gradient reversal gate: identity forward, -scale on the backward path.
VarPtr grl(const VarPtr& a, double scale);

// ---- NN primitives -----------------------------------------------------------
/// x: [C,H,W], w: [O,C,kh,kw], b: [O]; zero padding.
VarPtr conv2d(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride, int pad);
/// x: [N,K], w: [O,K], b: [O] -> [N,O]
VarPtr linear(const VarPtr& x, const VarPtr& w, const VarPtr& b);
/// [C,H,W] -> [1,C]
VarPtr global_avg_pool(const VarPtr& x);
/// Row-wise softmax over [N,K].
VarPtr softmax(const VarPtr& x);
/// Mean cross-entropy of rows of `logits` against integer labels.
VarPtr softmax_ce(const VarPtr& logits, std::vector<int> labels);
/// Mean binary cross-entropy with logits; targets in {0,1} (or soft).
VarPtr bce_logits(const VarPtr& logits, std::vector<double> targets);
/// Smooth-L1 (Huber, delta=1) summed over elements, divided by `normalizer`.
VarPtr smooth_l1(const VarPtr& pred, Tensor target, double normalizer);

/// Bilinear ROI pooling of `fmap` [C,H,W] over axis-aligned boxes given in
/// image pixels; spatial_scale maps image to feature coordinates. Output
/// [R, C*P*P] rows ready for a dense layer. Boxes are constants.
struct RoiBox {
  double x1, y1, x2, y2;
};
VarPtr roi_pool(const VarPtr& fmap, const std::vector<RoiBox>& rois, int pool, double spatial_scale);

/// Least-squares domain loss on a squashed (M+1)-channel map [K,H,W] with
/// values in (0,1): mean over locations of (1 - D[pos])^2 plus, when
/// `penalize_others`, sum over k != pos of D[k]^2.
VarPtr lsq_domain_loss(const VarPtr& map, int pos_channel, bool penalize_others);

/// Central-difference gradient check helper: recomputes `make_loss` while
/// perturbing up to `samples_per_param` entries of each leaf in `params`.
/// Returns the max relative error observed.
double finite_diff_max_rel_err(const std::function<VarPtr()>& make_loss,
                               const std::vector<VarPtr>& params,
                               double eps = 1e-5, int samples_per_param = -1,
                               unsigned sample_seed = 0);

}  // namespace dmsn::ad
