// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_set>

#include "dmsn/errors.hpp"

namespace dmsn::ad {

VarPtr constant(Tensor t) {
  auto v = std::make_shared<Var>();
  v->val = std::move(t);
  v->requires_grad = false;
  return v;
}

VarPtr leaf(Tensor t) {
  auto v = std::make_shared<Var>();
  v->val = std::move(t);
  v->requires_grad = true;
  return v;
}

namespace {

VarPtr make_node(Tensor val, std::vector<VarPtr> parents, std::function<void(Var&)> bp) {
  auto v = std::make_shared<Var>();
  v->val = std::move(val);
  v->parents = std::move(parents);
  bool any = false;
  for (const auto& p : v->parents) any = any || p->requires_grad;
  v->requires_grad = any;
  if (any) v->backprop = std::move(bp);
  return v;
}

void topo(const VarPtr& v, std::unordered_set<Var*>& seen, std::vector<VarPtr>& order) {
  if (!v->requires_grad || seen.count(v.get())) return;
  seen.insert(v.get());
  for (const auto& p : v->parents) topo(p, seen, order);
  order.push_back(v);
}

}  // namespace

void backward(const VarPtr& root) {
  if (root->val.numel() != 1) throw ShapeError("backward: root must be scalar");
  std::unordered_set<Var*> seen;
  std::vector<VarPtr> order;
  topo(root, seen, order);
  for (auto& v : order) v->ensure_grad();
  if (!root->requires_grad) return;
  root->grad.fill(0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Var& v = **it;
    if (v.backprop) {
      for (auto& p : v.parents) {
        if (p->requires_grad) p->ensure_grad();
      }
      v.backprop(v);
    }
  }
}

// ---- elementwise -------------------------------------------------------------

namespace {

using UnaryF = double (*)(double);

VarPtr unary(const VarPtr& a, std::function<double(double)> f,
             std::function<double(double /*x*/, double /*y*/)> dfdx) {
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(a->val[i]);
  return make_node(std::move(out), {a}, [a, dfdx](Var& self) {
    if (!a->requires_grad) return;
    for (int64_t i = 0; i < self.val.numel(); ++i)
      a->grad[i] += self.grad[i] * dfdx(a->val[i], self.val[i]);
  });
}

}  // namespace

VarPtr add(const VarPtr& a, const VarPtr& b) {
  if (!a->val.same_shape(b->val)) throw ShapeError("add: shape mismatch");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i];
  return make_node(std::move(out), {a, b}, [a, b](Var& self) {
    for (int64_t i = 0; i < self.val.numel(); ++i) {
      if (a->requires_grad) a->grad[i] += self.grad[i];
      if (b->requires_grad) b->grad[i] += self.grad[i];
    }
  });
}

VarPtr sub(const VarPtr& a, const VarPtr& b) {
  if (!a->val.same_shape(b->val)) throw ShapeError("sub: shape mismatch");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
  return make_node(std::move(out), {a, b}, [a, b](Var& self) {
    for (int64_t i = 0; i < self.val.numel(); ++i) {
      if (a->requires_grad) a->grad[i] += self.grad[i];
      if (b->requires_grad) b->grad[i] -= self.grad[i];
    }
  });
}

VarPtr mul(const VarPtr& a, const VarPtr& b) {
  if (!a->val.same_shape(b->val)) throw ShapeError("mul: shape mismatch");
  Tensor out(a->val.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
  return make_node(std::move(out), {a, b}, [a, b](Var& self) {
    for (int64_t i = 0; i < self.val.numel(); ++i) {
      if (a->requires_grad) a->grad[i] += self.grad[i] * b->val[i];
      if (b->requires_grad) b->grad[i] += self.grad[i] * a->val[i];
    }
  });
}

VarPtr scale(const VarPtr& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

VarPtr add_const(const VarPtr& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

VarPtr relu(const VarPtr& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

VarPtr sigmoid(const VarPtr& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

VarPtr vlog(const VarPtr& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

VarPtr square(const VarPtr& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

VarPtr vabs(const VarPtr& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

VarPtr pow_const(const VarPtr& a, double p) {
  return unary(a, [p](double x) { return std::pow(x, p); },
               [p](double x, double) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

VarPtr clamp(const VarPtr& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- reductions --------------------------------------------------------------

VarPtr sum(const VarPtr& a) {
  double s = 0;
  for (int64_t i = 0; i < a->val.numel(); ++i) s += a->val[i];
  return make_node(Tensor::scalar(s), {a}, [a](Var& self) {
    if (!a->requires_grad) return;
    for (int64_t i = 0; i < a->val.numel(); ++i) a->grad[i] += self.grad[0];
  });
}

VarPtr mean(const VarPtr& a) {
  const double inv = 1.0 / static_cast<double>(a->val.numel());
  return scale(sum(a), inv);
}

VarPtr add_scalars(const std::vector<VarPtr>& xs) {
  if (xs.empty()) return constant(Tensor::scalar(0.0));
  // canonicalize single-element tensors of any shape (e.g. [1,1] head outputs)
  auto as_scalar = [](const VarPtr& x) {
    if (x->val.numel() != 1) throw ShapeError("add_scalars: operand is not a scalar");
    return x->val.shape() == std::vector<int>{1} ? x : sum(x);
  };
  VarPtr acc = as_scalar(xs[0]);
  for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, as_scalar(xs[i]));
  return acc;
}

VarPtr gather(const VarPtr& a, std::vector<int64_t> idx) {
  Tensor out({static_cast<int>(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) out[static_cast<int64_t>(i)] = a->val[idx[i]];
  return make_node(std::move(out), {a}, [a, idx = std::move(idx)](Var& self) {
    if (!a->requires_grad) return;
    for (size_t i = 0; i < idx.size(); ++i)
      a->grad[idx[i]] += self.grad[static_cast<int64_t>(i)];
  });
}

VarPtr grl(const VarPtr& a, double s) {
  Tensor out = a->val;
  return make_node(std::move(out), {a}, [a, s](Var& self) {
    if (!a->requires_grad) return;
    for (int64_t i = 0; i < self.val.numel(); ++i) a->grad[i] -= s * self.grad[i];
  });
}

// ---- NN primitives -----------------------------------------------------------

VarPtr conv2d(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride, int pad) {
  const Tensor& xv = x->val;
  const Tensor& wv = w->val;
  if (xv.ndim() != 3 || wv.ndim() != 4) throw ShapeError("conv2d: expects [C,H,W] and [O,C,kh,kw]");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int O = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != C) throw ShapeError("conv2d: channel mismatch");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: output would be empty");
  Tensor out({O, Ho, Wo});
  for (int o = 0; o < O; ++o) {
    for (int oh = 0; oh < Ho; ++oh) {
      for (int ow = 0; ow < Wo; ++ow) {
        double acc = b->val[o];
        const int h0 = oh * stride - pad, w0 = ow * stride - pad;
        for (int c = 0; c < C; ++c) {
          for (int i = 0; i < kh; ++i) {
            const int hi = h0 + i;
            if (hi < 0 || hi >= H) continue;
            for (int j = 0; j < kw; ++j) {
              const int wi = w0 + j;
              if (wi < 0 || wi >= W) continue;
              acc += xv.at3(c, hi, wi) * wv[((static_cast<int64_t>(o) * C + c) * kh + i) * kw + j];
            }
          }
        }
        out.at3(o, oh, ow) = acc;
      }
    }
  }
  return make_node(std::move(out), {x, w, b}, [x, w, b, stride, pad](Var& self) {
    const Tensor& xv = x->val;
    const Tensor& wv = w->val;
    const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    const int O = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    const int Ho = self.val.dim(1), Wo = self.val.dim(2);
    for (int o = 0; o < O; ++o) {
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          const double g = self.grad.at3(o, oh, ow);
          if (g == 0.0) continue;
          if (b->requires_grad) b->grad[o] += g;
          const int h0 = oh * stride - pad, w0 = ow * stride - pad;
          for (int c = 0; c < C; ++c) {
            for (int i = 0; i < kh; ++i) {
              const int hi = h0 + i;
              if (hi < 0 || hi >= H) continue;
              for (int j = 0; j < kw; ++j) {
                const int wi = w0 + j;
                if (wi < 0 || wi >= W) continue;
                const int64_t widx = ((static_cast<int64_t>(o) * C + c) * kh + i) * kw + j;
                if (w->requires_grad) w->grad[widx] += g * xv.at3(c, hi, wi);
                if (x->requires_grad) x->grad.at3(c, hi, wi) += g * wv[widx];
              }
            }
          }
        }
      }
    }
  });
}

VarPtr linear(const VarPtr& x, const VarPtr& w, const VarPtr& b) {
  const Tensor& xv = x->val;
  const Tensor& wv = w->val;
  if (xv.ndim() != 2 || wv.ndim() != 2) throw ShapeError("linear: expects [N,K] and [O,K]");
  const int N = xv.dim(0), K = xv.dim(1), O = wv.dim(0);
  if (wv.dim(1) != K) throw ShapeError("linear: inner dim mismatch");
  Tensor out({N, O});
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      double acc = b->val[o];
      for (int k = 0; k < K; ++k) acc += xv.at2(n, k) * wv.at2(o, k);
      out.at2(n, o) = acc;
    }
  }
  return make_node(std::move(out), {x, w, b}, [x, w, b](Var& self) {
    const int N = x->val.dim(0), K = x->val.dim(1), O = w->val.dim(0);
    for (int n = 0; n < N; ++n) {
      for (int o = 0; o < O; ++o) {
        const double g = self.grad.at2(n, o);
        if (g == 0.0) continue;
        if (b->requires_grad) b->grad[o] += g;
        for (int k = 0; k < K; ++k) {
          if (w->requires_grad) w->grad.at2(o, k) += g * x->val.at2(n, k);
          if (x->requires_grad) x->grad.at2(n, k) += g * w->val.at2(o, k);
        }
      }
    }
  });
}

VarPtr global_avg_pool(const VarPtr& x) {
  const Tensor& xv = x->val;
  if (xv.ndim() != 3) throw ShapeError("global_avg_pool: expects [C,H,W]");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const double inv = 1.0 / (static_cast<double>(H) * W);
  Tensor out({1, C});
  for (int c = 0; c < C; ++c) {
    double acc = 0;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) acc += xv.at3(c, h, w);
    out.at2(0, c) = acc * inv;
  }
  return make_node(std::move(out), {x}, [x, inv](Var& self) {
    if (!x->requires_grad) return;
    const int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    for (int c = 0; c < C; ++c) {
      const double g = self.grad.at2(0, c) * inv;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) x->grad.at3(c, h, w) += g;
    }
  });
}

VarPtr softmax(const VarPtr& x) {
  const Tensor& xv = x->val;
  if (xv.ndim() != 2) throw ShapeError("softmax: expects [N,K]");
  const int N = xv.dim(0), K = xv.dim(1);
  Tensor out({N, K});
  for (int n = 0; n < N; ++n) {
    double mx = xv.at2(n, 0);
    for (int k = 1; k < K; ++k) mx = std::max(mx, xv.at2(n, k));
    double z = 0;
    for (int k = 0; k < K; ++k) {
      out.at2(n, k) = std::exp(xv.at2(n, k) - mx);
      z += out.at2(n, k);
    }
    for (int k = 0; k < K; ++k) out.at2(n, k) /= z;
  }
  return make_node(std::move(out), {x}, [x](Var& self) {
    if (!x->requires_grad) return;
    const int N = self.val.dim(0), K = self.val.dim(1);
    for (int n = 0; n < N; ++n) {
      double dot = 0;
      for (int k = 0; k < K; ++k) dot += self.grad.at2(n, k) * self.val.at2(n, k);
      for (int k = 0; k < K; ++k)
        x->grad.at2(n, k) += self.val.at2(n, k) * (self.grad.at2(n, k) - dot);
    }
  });
}

VarPtr softmax_ce(const VarPtr& logits, std::vector<int> labels) {
  const Tensor& xv = logits->val;
  if (xv.ndim() != 2) throw ShapeError("softmax_ce: expects [N,K]");
  const int N = xv.dim(0), K = xv.dim(1);
  if (static_cast<int>(labels.size()) != N) throw ShapeError("softmax_ce: label count mismatch");
  // cache probabilities for the backward pass
  auto probs = std::make_shared<Tensor>(Tensor({N, K}));
  double loss = 0;
  for (int n = 0; n < N; ++n) {
    double mx = xv.at2(n, 0);
    for (int k = 1; k < K; ++k) mx = std::max(mx, xv.at2(n, k));
    double z = 0;
    for (int k = 0; k < K; ++k) {
      probs->at2(n, k) = std::exp(xv.at2(n, k) - mx);
      z += probs->at2(n, k);
    }
    for (int k = 0; k < K; ++k) probs->at2(n, k) /= z;
    loss -= std::log(std::max(probs->at2(n, labels[static_cast<size_t>(n)]), 1e-300));
  }
  loss /= N;
  return make_node(Tensor::scalar(loss), {logits},
                   [logits, probs, labels = std::move(labels)](Var& self) {
                     if (!logits->requires_grad) return;
                     const int N = probs->dim(0), K = probs->dim(1);
                     const double g = self.grad[0] / N;
                     for (int n = 0; n < N; ++n) {
                       for (int k = 0; k < K; ++k) {
                         double d = probs->at2(n, k);
                         if (k == labels[static_cast<size_t>(n)]) d -= 1.0;
                         logits->grad.at2(n, k) += g * d;
                       }
                     }
                   });
}

VarPtr bce_logits(const VarPtr& logits, std::vector<double> targets) {
  const int64_t n = logits->val.numel();
  if (static_cast<int64_t>(targets.size()) != n) throw ShapeError("bce_logits: target count mismatch");
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double z = logits->val[i], t = targets[static_cast<size_t>(i)];
    // stable: max(z,0) - z*t + log(1+exp(-|z|))
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
  }
  loss /= static_cast<double>(n);
  return make_node(Tensor::scalar(loss), {logits},
                   [logits, targets = std::move(targets), n](Var& self) {
                     if (!logits->requires_grad) return;
                     const double g = self.grad[0] / static_cast<double>(n);
                     for (int64_t i = 0; i < n; ++i) {
                       const double p = 1.0 / (1.0 + std::exp(-logits->val[i]));
                       logits->grad[i] += g * (p - targets[static_cast<size_t>(i)]);
                     }
                   });
}

VarPtr smooth_l1(const VarPtr& pred, Tensor target, double normalizer) {
  if (!pred->val.same_shape(target)) throw ShapeError("smooth_l1: shape mismatch");
  if (normalizer <= 0) throw ContractError("smooth_l1: normalizer must be positive");
  double loss = 0;
  for (int64_t i = 0; i < pred->val.numel(); ++i) {
    const double d = pred->val[i] - target[i];
    const double a = std::fabs(d);
    loss += a < 1.0 ? 0.5 * d * d : a - 0.5;
  }
  loss /= normalizer;
  return make_node(Tensor::scalar(loss), {pred},
                   [pred, target = std::move(target), normalizer](Var& self) {
                     if (!pred->requires_grad) return;
                     const double g = self.grad[0] / normalizer;
                     for (int64_t i = 0; i < pred->val.numel(); ++i) {
                       const double d = pred->val[i] - target[i];
                       pred->grad[i] += g * (std::fabs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
                     }
                   });
}

VarPtr roi_pool(const VarPtr& fmap, const std::vector<RoiBox>& rois, int pool, double spatial_scale) {
  const Tensor& fv = fmap->val;
  if (fv.ndim() != 3) throw ShapeError("roi_pool: expects [C,H,W]");
  const int C = fv.dim(0), H = fv.dim(1), W = fv.dim(2);
  const int R = static_cast<int>(rois.size());
  if (R == 0) throw ContractError("roi_pool: empty roi list");
  Tensor out({R, C * pool * pool});
  // per output element: 4 (corner index, weight) pairs for the backward scatter
  struct Tap {
    int64_t idx[4];
    double w[4];
  };
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<size_t>(R) * pool * pool);
  for (int r = 0; r < R; ++r) {
    const double x1 = rois[static_cast<size_t>(r)].x1 * spatial_scale;
    const double y1 = rois[static_cast<size_t>(r)].y1 * spatial_scale;
    const double x2 = rois[static_cast<size_t>(r)].x2 * spatial_scale;
    const double y2 = rois[static_cast<size_t>(r)].y2 * spatial_scale;
    const double bw = std::max(x2 - x1, 1e-6) / pool;
    const double bh = std::max(y2 - y1, 1e-6) / pool;
    for (int py = 0; py < pool; ++py) {
      for (int px = 0; px < pool; ++px) {
        // sample at bin centers, in feature-cell center coordinates
        const double sx = x1 + (px + 0.5) * bw - 0.5;
        const double sy = y1 + (py + 0.5) * bh - 0.5;
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const double ax = sx - x0, ay = sy - y0;
        Tap& tap = (*taps)[(static_cast<size_t>(r) * pool + py) * pool + px];
        const int xs[2] = {x0, x0 + 1};
        const int ys[2] = {y0, y0 + 1};
        const double wx[2] = {1.0 - ax, ax};
        const double wy[2] = {1.0 - ay, ay};
        int t = 0;
        for (int iy = 0; iy < 2; ++iy) {
          for (int ix = 0; ix < 2; ++ix, ++t) {
            const int xi = std::min(std::max(xs[ix], 0), W - 1);
            const int yi = std::min(std::max(ys[iy], 0), H - 1);
            tap.idx[t] = static_cast<int64_t>(yi) * W + xi;
            tap.w[t] = wx[ix] * wy[iy];
          }
        }
        for (int c = 0; c < C; ++c) {
          double acc = 0;
          for (int q = 0; q < 4; ++q)
            acc += tap.w[q] * fv[static_cast<int64_t>(c) * H * W + tap.idx[q]];
          out.at2(r, (c * pool + py) * pool + px) = acc;
        }
      }
    }
  }
  return make_node(std::move(out), {fmap}, [fmap, taps, pool](Var& self) {
    if (!fmap->requires_grad) return;
    const int C = fmap->val.dim(0), H = fmap->val.dim(1), W = fmap->val.dim(2);
    const int R = self.val.dim(0);
    for (int r = 0; r < R; ++r) {
      for (int py = 0; py < pool; ++py) {
        for (int px = 0; px < pool; ++px) {
          const Tap& tap = (*taps)[(static_cast<size_t>(r) * pool + py) * pool + px];
          for (int c = 0; c < C; ++c) {
            const double g = self.grad.at2(r, (c * pool + py) * pool + px);
            if (g == 0.0) continue;
            for (int q = 0; q < 4; ++q)
              fmap->grad[static_cast<int64_t>(c) * H * W + tap.idx[q]] += g * tap.w[q];
          }
        }
      }
    }
  });
}

VarPtr lsq_domain_loss(const VarPtr& map, int pos_channel, bool penalize_others) {
  const Tensor& mv = map->val;
  if (mv.ndim() != 3) throw ShapeError("lsq_domain_loss: expects [K,H,W]");
  const int K = mv.dim(0), H = mv.dim(1), W = mv.dim(2);
  if (pos_channel < 0 || pos_channel >= K) throw ContractError("lsq_domain_loss: bad channel");
  for (int64_t i = 0; i < mv.numel(); ++i) {
    // endpoints are fine for a squared loss; a saturated sigmoid hits them
    if (mv[i] < 0.0 || mv[i] > 1.0 || !std::isfinite(mv[i]))
      throw ContractError("lsq_domain_loss: map values must lie in [0,1]");
  }
  const double inv = 1.0 / (static_cast<double>(H) * W);
  double loss = 0;
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      const double dp = mv.at3(pos_channel, h, w);
      loss += (1.0 - dp) * (1.0 - dp);
      if (penalize_others) {
        for (int k = 0; k < K; ++k) {
          if (k == pos_channel) continue;
          const double d = mv.at3(k, h, w);
          loss += d * d;
        }
      }
    }
  }
  loss *= inv;
  return make_node(Tensor::scalar(loss), {map},
                   [map, pos_channel, penalize_others, inv](Var& self) {
                     if (!map->requires_grad) return;
                     const int K = map->val.dim(0), H = map->val.dim(1), W = map->val.dim(2);
                     const double g = self.grad[0] * inv;
                     for (int h = 0; h < H; ++h) {
                       for (int w = 0; w < W; ++w) {
                         map->grad.at3(pos_channel, h, w) +=
                             g * 2.0 * (map->val.at3(pos_channel, h, w) - 1.0);
                         if (penalize_others) {
                           for (int k = 0; k < K; ++k) {
                             if (k == pos_channel) continue;
                             map->grad.at3(k, h, w) += g * 2.0 * map->val.at3(k, h, w);
                           }
                         }
                       }
                     }
                   });
}

double finite_diff_max_rel_err(const std::function<VarPtr()>& make_loss,
                               const std::vector<VarPtr>& params, double eps,
                               int samples_per_param, unsigned sample_seed) {
  VarPtr loss = make_loss();
  for (const auto& p : params) {
    p->ensure_grad();
    p->grad.fill(0.0);
  }
  backward(loss);
  std::mt19937 rng(sample_seed);
  double max_rel = 0;
  for (const auto& p : params) {
    std::vector<int64_t> idxs;
    const int64_t n = p->val.numel();
    if (samples_per_param < 0 || samples_per_param >= n) {
      idxs.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) idxs[static_cast<size_t>(i)] = i;
    } else {
      std::uniform_int_distribution<int64_t> pick(0, n - 1);
      for (int s = 0; s < samples_per_param; ++s) idxs.push_back(pick(rng));
    }
    for (int64_t i : idxs) {
      const double orig = p->val[i];
      p->val[i] = orig + eps;
      const double lp = make_loss()->scalar();
      p->val[i] = orig - eps;
      const double lm = make_loss()->scalar();
      p->val[i] = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = p->grad[i];
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-4});
      max_rel = std::max(max_rel, std::fabs(fd - an) / denom);
    }
  }
  return max_rel;
}

}  // namespace dmsn::ad
