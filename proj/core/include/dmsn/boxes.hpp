// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <vector>

namespace dmsn {

/// Axis-aligned box in image pixel coordinates, x1 < x2 and y1 < y2 when valid.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
};

/// Intersection-over-union; degenerate boxes score 0 by convention.
double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double img_w, double img_h);

/// Greedy descending-score non-maximum suppression. Ties break toward the
/// lower index. Returns kept indices in suppression order.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold);

/// Faster R-CNN style box regression targets (tx, ty, tw, th) of `gt`
/// relative to `anchor`.
std::array<double, 4> encode_deltas(const Box& anchor, const Box& gt);
Box decode_deltas(const Box& anchor, const std::array<double, 4>& d);

}  // namespace dmsn
