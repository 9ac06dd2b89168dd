// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dmsn/errors.hpp"

namespace dmsn {

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) return 0.0;
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

Box clip_box(const Box& b, double img_w, double img_h) {
  Box c;
  c.x1 = std::min(std::max(b.x1, 0.0), img_w);
  c.y1 = std::min(std::max(b.y1, 0.0), img_h);
  c.x2 = std::min(std::max(b.x2, 0.0), img_w);
  c.y2 = std::min(std::max(b.y2, 0.0), img_h);
  return c;
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold) {
  if (boxes.size() != scores.size()) throw ShapeError("nms: boxes/scores length mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  std::vector<int> kept;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int idx : order) {
    if (suppressed[static_cast<size_t>(idx)]) continue;
    kept.push_back(idx);
    for (int j : order) {
      if (j == idx || suppressed[static_cast<size_t>(j)]) continue;
      if (iou(boxes[static_cast<size_t>(idx)], boxes[static_cast<size_t>(j)]) > iou_threshold)
        suppressed[static_cast<size_t>(j)] = 1;
    }
  }
  return kept;
}

std::array<double, 4> encode_deltas(const Box& anchor, const Box& gt) {
  const double aw = anchor.width(), ah = anchor.height();
  return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah,
          std::log(gt.width() / aw), std::log(gt.height() / ah)};
}

Box decode_deltas(const Box& anchor, const std::array<double, 4>& d) {
  const double aw = anchor.width(), ah = anchor.height();
  // clamp the size deltas so a wild early-training regression cannot overflow
  const double dw = std::min(d[2], 4.0), dh = std::min(d[3], 4.0);
  const double cx = anchor.cx() + d[0] * aw;
  const double cy = anchor.cy() + d[1] * ah;
  const double w = aw * std::exp(dw);
  const double h = ah * std::exp(dh);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace dmsn
