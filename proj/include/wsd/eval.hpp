#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsd/data.hpp"
#include "wsd/geometry.hpp"
#include "wsd/head.hpp"

namespace wsd {

/// Test-time mask for the importance softmax.
enum class MaskMode { kAll, kTopMpt };

enum class ApProtocol { kElevenPoint, kArea };

inline const char* to_string(MaskMode m) { return m == MaskMode::kAll ? "all" : "top_mpt"; }
inline const char* to_string(ApProtocol p) {
  return p == ApProtocol::kElevenPoint ? "eleven_point" : "area";
}

struct EvalOptions {
  MaskMode mask_mode = MaskMode::kAll;
  std::size_t m_pt = 128;
  double nms_threshold = 0.6;
  double vote_threshold = 0.5;
  double score_floor = 1e-4;
  double iou_threshold = 0.5;
  ApProtocol protocol = ApProtocol::kElevenPoint;
  bool both_protocols = false;
  std::size_t concentration_k = 128;
  unsigned threads = 1;
};

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// N x C matrix of v * p, averaged over the image's feature views.
inline Matrix<double> infer_image(const HeadParams<double>& params, const ImageBag& bag,
                                  MaskMode mode = MaskMode::kAll, std::size_t m_pt = 128) {
  if (bag.views.empty()) throw InputError("image '" + bag.id + "' has no feature views");
  const std::size_t n = bag.num_regions(), classes = params.classes();
  Matrix<double> scores(n, classes);
  std::vector<double> col(n);
  for (const Matrix<double>& feats : bag.views) {
    const LabelVector y(classes, 1);
    detail::check_head_shapes(params, feats, y);
    const Matrix<double> p = class_softmax(detail::linear(feats, params.w_cls, params.b_cls));
    const Matrix<double> phi = detail::linear(feats, params.w_imp, params.b_imp);
    const SelectionMask h = mode == MaskMode::kAll ? SelectionMask(n, classes, 1)
                                                   : select_regions(p, y, m_pt, m_pt);
    std::vector<std::uint8_t> mcol(n);
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = phi(i, c);
        mcol[i] = h(i, c);
      }
      const std::vector<double> v = masked_softmax<double>(col, mcol);
      for (std::size_t i = 0; i < n; ++i) scores(i, c) += v[i] * p(i, c);
    }
  }
  if (bag.views.size() > 1) {
    for (double& s : scores.flat()) s /= static_cast<double>(bag.views.size());
  }
  return scores;
}

/// Per class: score floor, NMS, then box voting over the pre-NMS pool.
inline std::vector<Detection> detect(const Matrix<double>& scores, const std::vector<BBox>& proposals,
                                     double nms_threshold = 0.6, double vote_threshold = 0.5,
                                     double score_floor = 1e-4) {
  if (scores.rows() != proposals.size()) throw InputError("detect: scores and proposals misaligned");
  std::vector<Detection> out;
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    std::vector<Detection> pool;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      if (scores(i, c) >= score_floor) pool.push_back({proposals[i], static_cast<int>(c), scores(i, c)});
    }
    for (const Detection& kept : nms(pool, nms_threshold)) {
      out.push_back({box_vote(kept, pool, vote_threshold), kept.class_id, kept.score});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// A detection tagged with the image it came from.
struct ScoredBox {
  std::size_t image = 0;
  BBox box;
  double score = 0.0;
};

struct PrPoint {
  double score = 0.0;
  bool true_positive = false;
  double precision = 0.0;
  double recall = 0.0;
};

struct ApResult {
  double ap = 0.0;
  std::size_t n_gt = 0;
  bool no_ground_truth = false;
  std::vector<PrPoint> curve;
};

/// Average precision for one class. `gt[k]` holds the class's boxes in image k.
inline ApResult voc_ap(const std::vector<ScoredBox>& dets, const std::vector<std::vector<BBox>>& gt,
                       double iou_threshold = 0.5, ApProtocol protocol = ApProtocol::kElevenPoint) {
  ApResult res;
  for (const auto& g : gt) res.n_gt += g.size();
  if (res.n_gt == 0) {
    res.no_ground_truth = true;
    return res;
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<std::vector<bool>> matched(gt.size());
  for (std::size_t k = 0; k < gt.size(); ++k) matched[k].assign(gt[k].size(), false);

  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const ScoredBox& d = dets[order[rank]];
    if (d.image >= gt.size()) throw InputError("voc_ap: detection refers to unknown image");
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gt[d.image].size(); ++j) {
      if (matched[d.image][j]) continue;
      const double o = iou(d.box, gt[d.image][j]);
      if (o > best) {
        best = o;
        best_j = j;
      }
    }
    const bool hit = best >= iou_threshold;
    if (hit) {
      matched[d.image][best_j] = true;
      ++tp;
    }
    res.curve.push_back({d.score, hit, static_cast<double>(tp) / static_cast<double>(rank + 1),
                         static_cast<double>(tp) / static_cast<double>(res.n_gt)});
  }

  if (protocol == ApProtocol::kElevenPoint) {
    for (int t = 0; t <= 10; ++t) {
      const double r = t / 10.0;
      double best = 0.0;
      for (const PrPoint& pt : res.curve) {
        if (pt.recall >= r) best = std::max(best, pt.precision);
      }
      res.ap += best / 11.0;
    }
  } else {
    std::vector<double> mrec{0.0}, mpre{0.0};
    for (const PrPoint& pt : res.curve) {
      mrec.push_back(pt.recall);
      mpre.push_back(pt.precision);
    }
    mrec.push_back(1.0);
    mpre.push_back(0.0);
    for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
    for (std::size_t i = 1; i < mrec.size(); ++i) {
      if (mrec[i] != mrec[i - 1]) res.ap += (mrec[i] - mrec[i - 1]) * mpre[i];
    }
  }
  return res;
}

struct CorLocResult {
  std::vector<std::optional<double>> per_class;  // empty optional: no positive image
  std::vector<std::size_t> positives;
  double mean = 0.0;
};

/// Fraction of positive images whose top-scoring proposal hits a GT box of the class.
inline CorLocResult corloc_from_scores(const Dataset& ds, const std::vector<Matrix<double>>& scores,
                                       double iou_threshold = 0.5) {
  const std::size_t classes = ds.classes;
  std::vector<std::size_t> correct(classes, 0);
  CorLocResult res;
  res.positives.assign(classes, 0);
  for (std::size_t k = 0; k < ds.images.size(); ++k) {
    const ImageBag& img = ds.images[k];
    for (std::size_t c = 0; c < classes; ++c) {
      if (!img.labels[c]) continue;
      bool has_gt = false;
      std::size_t top = 0;
      for (std::size_t i = 1; i < img.num_regions(); ++i) {
        if (scores[k](i, c) > scores[k](top, c)) top = i;
      }
      bool hit = false;
      for (const GroundTruth& g : img.ground_truth) {
        if (static_cast<std::size_t>(g.class_id) != c) continue;
        has_gt = true;
        hit = hit || iou(img.proposals[top], g.box) >= iou_threshold;
      }
      if (!has_gt) {
        throw DataError("image '" + img.id + "' is positive for class " + std::to_string(c) +
                        " but has no ground-truth box for it");
      }
      ++res.positives[c];
      if (hit) ++correct[c];
    }
  }
  double sum = 0.0;
  std::size_t defined = 0;
  res.per_class.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    if (res.positives[c] == 0) continue;
    res.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(res.positives[c]);
    sum += *res.per_class[c];
    ++defined;
  }
  res.mean = defined ? sum / static_cast<double>(defined) : 0.0;
  return res;
}

namespace detail {

/// Runs fn(k) for k in [0, count); each index is handled exactly once.
template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  if (threads == 1) {
    for (std::size_t k = 0; k < count; ++k) fn(k);
    return;
  }
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t k = t; k < count; k += threads) fn(k);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

inline std::vector<Matrix<double>> score_dataset(const Dataset& ds, const HeadParams<double>& params,
                                                 const EvalOptions& opt) {
  if (ds.classes != params.classes() || ds.dim != params.dim()) {
    throw InputError("checkpoint (C=" + std::to_string(params.classes()) + ", D=" +
                     std::to_string(params.dim()) + ") does not match dataset (C=" +
                     std::to_string(ds.classes) + ", D=" + std::to_string(ds.dim) + ")");
  }
  std::vector<Matrix<double>> scores(ds.images.size());
  detail::parallel_for(ds.images.size(), opt.threads, [&](std::size_t k) {
    scores[k] = infer_image(params, ds.images[k], opt.mask_mode, opt.m_pt);
  });
  return scores;
}

inline CorLocResult corloc(const Dataset& ds, const HeadParams<double>& params,
                           const EvalOptions& opt = {}) {
  return corloc_from_scores(ds, score_dataset(ds, params, opt), opt.iou_threshold);
}

/// Mean over positive (image, class) pairs of the importance mass (all-ones
/// mask) carried by the k regions with the highest class probability.
inline double weight_concentration(const HeadParams<double>& params, const Dataset& ds, std::size_t k) {
  if (k < 1) throw InputError("weight_concentration: k must be >= 1");
  double total = 0.0;
  std::size_t pairs = 0;
  for (const ImageBag& img : ds.images) {
    const std::size_t n = img.num_regions();
    for (std::size_t c = 0; c < ds.classes; ++c) {
      if (!img.labels[c]) continue;
      double frac = 0.0;
      for (const Matrix<double>& feats : img.views) {
        const Matrix<double> p = class_softmax(detail::linear(feats, params.w_cls, params.b_cls));
        const Matrix<double> phi = detail::linear(feats, params.w_imp, params.b_imp);
        const std::vector<double> phi_c = phi.column(c);
        const std::vector<std::uint8_t> ones(n, 1);
        const std::vector<double> v = masked_softmax<double>(phi_c, ones);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return p(a, c) > p(b, c); });
        for (std::size_t r = 0; r < std::min(k, n); ++r) frac += v[order[r]];
      }
      total += frac / static_cast<double>(img.views.size());
      ++pairs;
    }
  }
  return pairs ? total / static_cast<double>(pairs) : 0.0;
}

// ---------------------------------------------------------------------------
// Full evaluation
// ---------------------------------------------------------------------------

struct ClassReport {
  std::string name;
  double ap = 0.0;
  std::optional<double> ap_other;  // the second protocol when both are requested
  std::optional<double> corloc;
  std::size_t n_gt = 0;
  std::size_t n_positive_images = 0;
  std::size_t n_detections = 0;
  bool no_ground_truth = false;
};

struct EvalReport {
  std::vector<double> per_class_ap;
  double map = 0.0;
  std::optional<double> map_other;
  std::vector<std::optional<double>> per_class_corloc;
  double mean_corloc = 0.0;
  std::size_t n_images = 0;
  std::vector<ClassReport> classes;
  std::map<std::string, double> diagnostics;
  std::vector<std::vector<PrPoint>> pr_curves;
  EvalOptions options;
};

/// Detection and localization metrics for precomputed per-image score matrices.
inline EvalReport evaluate_scores(const Dataset& ds, const std::vector<Matrix<double>>& scores,
                                  const EvalOptions& opt = {}) {
  if (scores.size() != ds.images.size()) throw InputError("evaluate_scores: one score matrix per image required");
  const std::size_t classes = ds.classes;

  std::vector<std::vector<ScoredBox>> dets(classes);
  for (std::size_t k = 0; k < ds.images.size(); ++k) {
    for (const Detection& d :
         detect(scores[k], ds.images[k].proposals, opt.nms_threshold, opt.vote_threshold, opt.score_floor)) {
      dets[static_cast<std::size_t>(d.class_id)].push_back({k, d.box, d.score});
    }
  }

  EvalReport rep;
  rep.options = opt;
  rep.n_images = ds.images.size();
  const ApProtocol other =
      opt.protocol == ApProtocol::kElevenPoint ? ApProtocol::kArea : ApProtocol::kElevenPoint;
  double other_sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::vector<BBox>> gt(ds.images.size());
    for (std::size_t k = 0; k < ds.images.size(); ++k) {
      for (const GroundTruth& g : ds.images[k].ground_truth) {
        if (static_cast<std::size_t>(g.class_id) == c) gt[k].push_back(g.box);
      }
    }
    ApResult ap = voc_ap(dets[c], gt, opt.iou_threshold, opt.protocol);
    ClassReport cr;
    cr.name = ds.class_names[c];
    cr.ap = ap.ap;
    cr.n_gt = ap.n_gt;
    cr.n_detections = dets[c].size();
    cr.no_ground_truth = ap.no_ground_truth;
    if (opt.both_protocols) {
      cr.ap_other = voc_ap(dets[c], gt, opt.iou_threshold, other).ap;
      other_sum += *cr.ap_other;
    }
    rep.per_class_ap.push_back(ap.ap);
    rep.pr_curves.push_back(std::move(ap.curve));
    rep.classes.push_back(std::move(cr));
  }
  rep.map = classes ? std::accumulate(rep.per_class_ap.begin(), rep.per_class_ap.end(), 0.0) /
                          static_cast<double>(classes)
                    : 0.0;
  if (opt.both_protocols) rep.map_other = other_sum / static_cast<double>(classes);

  const CorLocResult cl = corloc_from_scores(ds, scores, opt.iou_threshold);
  rep.per_class_corloc = cl.per_class;
  rep.mean_corloc = cl.mean;
  for (std::size_t c = 0; c < classes; ++c) {
    rep.classes[c].corloc = cl.per_class[c];
    rep.classes[c].n_positive_images = cl.positives[c];
  }
  std::size_t n_dets = 0;
  for (const auto& d : dets) n_dets += d.size();
  rep.diagnostics["detections_per_image"] =
      ds.images.empty() ? 0.0 : static_cast<double>(n_dets) / static_cast<double>(ds.images.size());
  return rep;
}

/// Full pipeline: inference, detection post-processing, AP/mAP, CorLoc and
/// the weight-concentration diagnostic.
inline EvalReport evaluate_map(const Dataset& ds, const HeadParams<double>& params, const EvalOptions& opt = {}) {
  EvalReport rep = evaluate_scores(ds, score_dataset(ds, params, opt), opt);
  rep.diagnostics["weight_concentration"] = weight_concentration(params, ds, opt.concentration_k);
  return rep;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& rep) {
  using json = nlohmann::ordered_json;
  const EvalOptions& o = rep.options;
  const ApProtocol other =
      o.protocol == ApProtocol::kElevenPoint ? ApProtocol::kArea : ApProtocol::kElevenPoint;
  json j;
  j["n_images"] = rep.n_images;
  j["options"] = json{{"mask_mode", to_string(o.mask_mode)},
                      {"m_pt", o.m_pt},
                      {"ap_protocol", to_string(o.protocol)},
                      {"nms_threshold", o.nms_threshold},
                      {"vote_threshold", o.vote_threshold},
                      {"score_floor", o.score_floor},
                      {"iou_threshold", o.iou_threshold},
                      {"concentration_k", o.concentration_k}};
  j["map"] = rep.map;
  json maps;
  maps[to_string(o.protocol)] = rep.map;
  if (rep.map_other) maps[to_string(other)] = *rep.map_other;
  j["map_by_protocol"] = std::move(maps);
  j["mean_corloc"] = rep.mean_corloc;
  json classes = json::array();
  for (const ClassReport& c : rep.classes) {
    json cj;
    cj["name"] = c.name;
    json ap;
    ap[to_string(o.protocol)] = c.ap;
    if (c.ap_other) ap[to_string(other)] = *c.ap_other;
    cj["ap"] = std::move(ap);
    cj["corloc"] = c.corloc ? json(*c.corloc) : json(nullptr);
    cj["n_gt"] = c.n_gt;
    cj["n_positive_images"] = c.n_positive_images;
    cj["n_detections"] = c.n_detections;
    json flags = json::array();
    if (c.no_ground_truth) flags.push_back("no_ground_truth");
    if (!c.corloc) flags.push_back("corloc_undefined");
    cj["flags"] = std::move(flags);
    classes.push_back(std::move(cj));
  }
  j["classes"] = std::move(classes);
  j["diagnostics"] = rep.diagnostics;
  return j;
}

/// One CSV row per ranked detection: class,rank,score,tp,precision,recall.
inline void write_pr_csv(std::ostream& os, const EvalReport& rep) {
  os << "class,rank,score,tp,precision,recall\n";
  for (std::size_t c = 0; c < rep.pr_curves.size(); ++c) {
    for (std::size_t r = 0; r < rep.pr_curves[c].size(); ++r) {
      const PrPoint& pt = rep.pr_curves[c][r];
      os << rep.classes[c].name << ',' << r + 1 << ',' << pt.score << ',' << (pt.true_positive ? 1 : 0)
         << ',' << pt.precision << ',' << pt.recall << '\n';
    }
  }
}

}  // namespace wsd
