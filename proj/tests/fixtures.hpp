#pragma once

// Hand-built evaluation fixtures and a brute-force evaluation pipeline shared
// by the unit tests and the acceptance binary.

#include <string>
#include <utility>
#include <vector>

#include "oracles.hpp"
#include "wsd/data.hpp"
#include "wsd/eval.hpp"

namespace wsd::fixture {

/// Floor, brute-force NMS, explicit score-weighted vote, oracle eleven-point AP.
inline double brute_force_map(const Dataset& ds, const std::vector<Matrix<double>>& scores,
                              const EvalOptions& o = {}) {
  double sum = 0.0;
  for (std::size_t c = 0; c < ds.classes; ++c) {
    std::vector<oracle::RankedDet> ranked;
    std::vector<std::vector<BBox>> gt(ds.images.size());
    for (std::size_t k = 0; k < ds.images.size(); ++k) {
      const ImageBag& img = ds.images[k];
      for (const auto& g : img.ground_truth) {
        if (g.class_id == static_cast<int>(c)) gt[k].push_back(g.box);
      }
      std::vector<Detection> pool;
      for (std::size_t i = 0; i < img.proposals.size(); ++i) {
        if (scores[k](i, c) >= o.score_floor) {
          pool.push_back({img.proposals[i], static_cast<int>(c), scores[k](i, c)});
        }
      }
      for (std::size_t keep : oracle::greedy_nms_indices(pool, o.nms_threshold)) {
        // Offsets from the kept box; exact for boxes that vote only for themselves.
        const BBox& kb = pool[keep].box;
        double w = 0, x1 = 0, y1 = 0, x2 = 0, y2 = 0;
        for (const Detection& d : pool) {
          if (iou(d.box, kb) < o.vote_threshold) continue;
          w += d.score;
          x1 += d.score * (d.box.x1() - kb.x1());
          y1 += d.score * (d.box.y1() - kb.y1());
          x2 += d.score * (d.box.x2() - kb.x2());
          y2 += d.score * (d.box.y2() - kb.y2());
        }
        ranked.push_back({k, BBox(kb.x1() + x1 / w, kb.y1() + y1 / w, kb.x2() + x2 / w, kb.y2() + y2 / w),
                          pool[keep].score});
      }
    }
    std::size_t n_gt = 0;
    for (const auto& g : gt) n_gt += g.size();
    if (n_gt) sum += oracle::ap_eleven_point(ranked, gt, o.iou_threshold);
  }
  return sum / static_cast<double>(ds.classes);
}

struct ScoredDataset {
  Dataset ds;
  std::vector<Matrix<double>> scores;
};

/// Five images, two classes, hand-assigned scores.
/// cat ranking over 3 GT: TP .9, FP .85, TP .7, then only misses.
inline ScoredDataset five_image_fixture() {
  ScoredDataset f;
  f.ds.classes = 2;
  f.ds.dim = 1;
  f.ds.class_names = {"cat", "dog"};
  const BBox a(0, 0, 4, 4), a_near(0, 0, 4, 5), b(6, 6, 9, 9), far(20, 20, 22, 22);
  const struct {
    std::vector<BBox> props;
    std::vector<std::pair<double, double>> s;
    std::vector<GroundTruth> gt;
  } rows[5] = {
      {{a, a_near, far}, {{0.9, 0.1}, {0.6, 0.0}, {0.3, 0.2}}, {{0, a}}},
      {{b, far}, {{0.2, 0.8}, {0.0, 0.4}}, {{1, b}}},
      {{a, b}, {{0.7, 0.05}, {0.1, 0.5}}, {{0, a}, {1, b}}},
      {{far, a}, {{0.85, 0.0}, {0.0, 0.0}}, {{0, a}}},
      {{b, a}, {{0.0, 0.3}, {0.0, 0.95}}, {{1, b}}},
  };
  for (int k = 0; k < 5; ++k) {
    ImageBag img;
    img.id = "h" + std::to_string(k);
    img.proposals = rows[k].props;
    img.ground_truth = rows[k].gt;
    img.labels = {0, 0};
    for (const auto& g : img.ground_truth) img.labels[g.class_id] = 1;
    img.views = {Matrix<double>(img.proposals.size(), 1)};
    Matrix<double> s(img.proposals.size(), 2);
    for (std::size_t i = 0; i < img.proposals.size(); ++i) {
      s(i, 0) = rows[k].s[i].first;
      s(i, 1) = rows[k].s[i].second;
    }
    f.scores.push_back(s);
    f.ds.images.push_back(img);
  }
  return f;
}

inline constexpr double kFiveImageCatAp = (4 * 1.0 + 3 * (2.0 / 3.0)) / 11.0;

/// One positive image whose top-scoring proposal is `top`.
inline ScoredDataset one_image_fixture(const BBox& gt, const BBox& top) {
  ScoredDataset f;
  f.ds.classes = 1;
  f.ds.dim = 1;
  f.ds.class_names = {"a"};
  ImageBag img;
  img.id = "only";
  img.labels = {1};
  img.proposals = {BBox(500, 500, 501, 501), top};
  img.views = {Matrix<double>(2, 1)};
  img.ground_truth = {{0, gt}};
  f.ds.images.push_back(img);
  Matrix<double> s(2, 1);
  s(0, 0) = 0.2;
  s(1, 0) = 0.7;
  f.scores.push_back(s);
  return f;
}

inline double corloc_of_top(const BBox& gt, const BBox& top) {
  const ScoredDataset f = one_image_fixture(gt, top);
  return corloc_from_scores(f.ds, f.scores).per_class[0].value();
}

/// Two GT boxes; ranked detections hit, miss, hit.
inline ApResult tp_fp_tp_ap(ApProtocol protocol = ApProtocol::kElevenPoint) {
  const BBox a(0, 0, 1, 1), b(2, 2, 3, 3);
  const std::vector<ScoredBox> dets{{0, a, 0.9}, {0, BBox(5, 5, 6, 6), 0.8}, {0, b, 0.7}};
  return voc_ap(dets, {{a, b}}, 0.5, protocol);
}

}  // namespace wsd::fixture
