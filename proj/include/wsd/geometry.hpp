#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "wsd/errors.hpp"

namespace wsd {

/// Axis-aligned box with strictly positive area.
class BBox {
 public:
  BBox(double x1, double y1, double x2, double y2) : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
    if (!(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2)) ||
        !(x1 < x2) || !(y1 < y2)) {
      throw InputError("invalid box (" + std::to_string(x1) + "," + std::to_string(y1) + "," +
                       std::to_string(x2) + "," + std::to_string(y2) +
                       "): requires x1 < x2 and y1 < y2");
    }
  }

  double x1() const { return x1_; }
  double y1() const { return y1_; }
  double x2() const { return x2_; }
  double y2() const { return y2_; }
  double width() const { return x2_ - x1_; }
  double height() const { return y2_ - y1_; }
  double area() const { return width() * height(); }

  friend bool operator==(const BBox&, const BBox&) = default;

 private:
  double x1_, y1_, x2_, y2_;
};

struct Detection {
  BBox box;
  int class_id = 0;
  double score = 0.0;
};

inline double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Greedy non-maximum suppression over detections of a single class.
/// Output is in descending score order; equal scores keep input order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw InputError("nms threshold must lie in (0, 1]");
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return iou(k.box, d.box) > threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

/// Score-weighted average of the pool boxes overlapping `kept` by at least `vote_threshold`.
inline BBox box_vote(const Detection& kept, const std::vector<Detection>& pool,
                     double vote_threshold) {
  // Offsets from the kept box, so a lone voter reproduces it exactly.
  double w = 0.0, dx1 = 0.0, dy1 = 0.0, dx2 = 0.0, dy2 = 0.0;
  const BBox& k = kept.box;
  for (const Detection& d : pool) {
    if (iou(d.box, k) < vote_threshold) continue;
    w += d.score;
    dx1 += d.score * (d.box.x1() - k.x1());
    dy1 += d.score * (d.box.y1() - k.y1());
    dx2 += d.score * (d.box.x2() - k.x2());
    dy2 += d.score * (d.box.y2() - k.y2());
  }
  // A zero-score kept box carries no weight; fall back to it unchanged.
  if (!(w > 0.0)) return k;
  return BBox(k.x1() + dx1 / w, k.y1() + dy1 / w, k.x2() + dx2 / w, k.y2() + dy2 / w);
}

}  // namespace wsd
