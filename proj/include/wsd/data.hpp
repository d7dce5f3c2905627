#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsd/binary_io.hpp"
#include "wsd/errors.hpp"
#include "wsd/geometry.hpp"
#include "wsd/head.hpp"
#include "wsd/matrix.hpp"
#include "wsd/rng.hpp"

namespace wsd {

struct GroundTruth {
  int class_id = 0;
  BBox box;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

/// One image: its proposals, one or more N x D feature views, image-level
/// labels and (evaluation only) ground-truth boxes.
struct ImageBag {
  std::string id;
  std::vector<BBox> proposals;
  std::vector<Matrix<double>> views;
  LabelVector labels;
  std::vector<GroundTruth> ground_truth;

  std::size_t num_regions() const { return proposals.size(); }

  friend bool operator==(const ImageBag&, const ImageBag&) = default;
};

struct Dataset {
  std::size_t classes = 0;
  std::size_t dim = 0;
  std::vector<std::string> class_names;
  std::vector<ImageBag> images;

  /// Throws DataError naming the first offending image.
  void validate() const {
    if (classes < 1 || dim < 1) throw DataError("dataset: c and d must be >= 1");
    if (class_names.size() != classes) {
      throw DataError("dataset: expected " + std::to_string(classes) + " class names, got " +
                      std::to_string(class_names.size()));
    }
    for (const ImageBag& img : images) {
      const std::string where = "image '" + img.id + "': ";
      const std::size_t n = img.proposals.size();
      if (n == 0) throw DataError(where + "no proposals");
      if (img.labels.size() != classes) {
        throw DataError(where + "label vector has " + std::to_string(img.labels.size()) +
                        " entries, expected " + std::to_string(classes));
      }
      for (int y : img.labels) {
        if (y != 0 && y != 1) throw DataError(where + "labels must be 0 or 1");
      }
      if (img.views.empty()) throw DataError(where + "needs at least one feature view");
      for (std::size_t v = 0; v < img.views.size(); ++v) {
        const auto& m = img.views[v];
        if (m.rows() != n || m.cols() != dim) {
          throw DataError(where + "view " + std::to_string(v) + " has shape " +
                          std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                          ", expected " + std::to_string(n) + "x" + std::to_string(dim));
        }
        for (double x : m.flat()) {
          if (!std::isfinite(x)) throw DataError(where + "non-finite feature value");
        }
      }
      for (const GroundTruth& gt : img.ground_truth) {
        if (gt.class_id < 0 || static_cast<std::size_t>(gt.class_id) >= classes) {
          throw DataError(where + "ground-truth class " + std::to_string(gt.class_id) +
                          " out of range");
        }
      }
    }
  }

  /// Images [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > images.size()) throw InputError("dataset slice out of range");
    Dataset out{classes, dim, class_names, {}};
    out.images.assign(images.begin() + static_cast<std::ptrdiff_t>(begin),
                      images.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

/// Parameters of the synthetic multiple-instance benchmark.
struct SynthConfig {
  std::size_t n_images = 200;
  std::size_t classes = 6;
  std::size_t dim = 64;
  std::size_t proposals = 64;
  std::size_t objects_min = 1;
  std::size_t objects_max = 2;
  double noise_sigma = 0.5;
  double context_fraction = 0.2;
  double distractor_strength = 1.0;
  std::size_t views = 1;
  std::uint64_t seed = 0;

  // Largest object count that can still be placed with limited mutual overlap.
  static constexpr std::size_t kMaxObjects = 12;

  void validate() const {
    if (n_images < 1 || classes < 1 || dim < 1 || proposals < 1 || views < 1) {
      throw ConfigError("synth: n_images, classes, dim, proposals and views must be >= 1");
    }
    if (objects_min < 1 || objects_max < 1) throw ConfigError("synth: objects_min/objects_max must be >= 1");
    if (objects_min > objects_max) throw ConfigError("synth: objects_min exceeds objects_max");
    if (objects_max > kMaxObjects) {
      throw ConfigError("synth: objects_max " + std::to_string(objects_max) +
                        " cannot be placed on the canvas (max " + std::to_string(kMaxObjects) + ")");
    }
    if (!(noise_sigma > 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("synth: noise_sigma must be > 0");
    if (!(context_fraction >= 0.0 && context_fraction < 1.0)) {
      throw ConfigError("synth: context_fraction must lie in [0, 1)");
    }
    if (!(distractor_strength >= 0.0) || !std::isfinite(distractor_strength)) {
      throw ConfigError("synth: distractor_strength must be >= 0");
    }
    if (proposals < 2 * objects_max) {
      throw ConfigError("synth: need at least two proposals per object");
    }
  }
};

namespace detail {

inline std::vector<double> unit_vector(Rng& rng, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> u(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : u) {
      x = normal(rng);
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (double& x : u) x /= norm;
  return u;
}

inline BBox clip_box(double x1, double y1, double x2, double y2) {
  constexpr double kMinSide = 0.02;
  x1 = std::clamp(x1, 0.0, 1.0 - kMinSide);
  y1 = std::clamp(y1, 0.0, 1.0 - kMinSide);
  x2 = std::clamp(x2, x1 + kMinSide, 1.0);
  y2 = std::clamp(y2, y1 + kMinSide, 1.0);
  return BBox(x1, y1, x2, y2);
}

// Box around `gt` with independently scaled sides and a shifted center.
inline BBox jitter_box(Rng& rng, const BBox& gt, double scale_lo, double scale_hi, double shift) {
  std::uniform_real_distribution<double> scale(scale_lo, scale_hi);
  std::uniform_real_distribution<double> offset(-shift, shift);
  const double w = gt.width() * scale(rng), h = gt.height() * scale(rng);
  const double cx = 0.5 * (gt.x1() + gt.x2()) + offset(rng) * gt.width();
  const double cy = 0.5 * (gt.y1() + gt.y2()) + offset(rng) * gt.height();
  return clip_box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
}

// Oversized box that contains `gt` with IoU below 0.5.
inline BBox context_box(Rng& rng, const BBox& gt) {
  std::uniform_real_distribution<double> scale(1.6, 2.6);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  BBox best = gt;
  for (int attempt = 0; attempt < 16; ++attempt) {
    const double w = gt.width() * scale(rng), h = gt.height() * scale(rng);
    const double x1 = gt.x1() - (w - gt.width()) * unit(rng);
    const double y1 = gt.y1() - (h - gt.height()) * unit(rng);
    best = clip_box(x1, y1, x1 + w, y1 + h);
    if (iou(best, gt) < 0.5) break;
  }
  return best;
}

inline std::vector<GroundTruth> place_objects(Rng& rng, const SynthConfig& cfg) {
  std::uniform_int_distribution<std::size_t> count(cfg.objects_min, cfg.objects_max);
  std::uniform_int_distribution<int> cls(0, static_cast<int>(cfg.classes) - 1);
  std::uniform_real_distribution<double> side(0.2, 0.4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t k = count(rng);
  std::vector<GroundTruth> objects;
  for (int attempt = 0; objects.size() < k; ++attempt) {
    if (attempt > 10000) throw ConfigError("synth: could not place objects on the canvas");
    const double w = side(rng), h = side(rng);
    const double x1 = unit(rng) * (1.0 - w), y1 = unit(rng) * (1.0 - h);
    const BBox box(x1, y1, x1 + w, y1 + h);
    const bool clash = std::any_of(objects.begin(), objects.end(),
                                   [&](const GroundTruth& o) { return iou(o.box, box) > 0.1; });
    if (!clash) objects.push_back({cls(rng), box});
  }
  return objects;
}

struct SynthSignal {
  std::vector<std::vector<double>> prototypes;  // one unit vector per class
  std::vector<double> scene;                    // shared context direction
};

inline SynthSignal make_signal(const SynthConfig& cfg) {
  Rng rng = make_rng(cfg.seed, "synth-prototypes");
  SynthSignal s;
  for (std::size_t c = 0; c < cfg.classes; ++c) s.prototypes.push_back(unit_vector(rng, cfg.dim));
  s.scene = unit_vector(rng, cfg.dim);
  return s;
}

inline ImageBag synth_image(const SynthConfig& cfg, const SynthSignal& signal, std::size_t index) {
  Rng rng = make_rng(cfg.seed, "synth-image", index);
  ImageBag img;
  {
    std::ostringstream id;
    id << "img_" << std::setw(5) << std::setfill('0') << index;
    img.id = id.str();
  }
  img.ground_truth = place_objects(rng, cfg);
  img.labels.assign(cfg.classes, 0);
  for (const auto& gt : img.ground_truth) img.labels[gt.class_id] = 1;

  const std::size_t n = cfg.proposals;
  const std::size_t k = img.ground_truth.size();
  const auto n_context = static_cast<std::size_t>(std::lround(cfg.context_fraction * n));
  const std::size_t per_object = std::max<std::size_t>(2, (n - n_context) * 3 / (8 * k));

  struct Proposal {
    BBox box;
    bool context;
  };
  std::vector<Proposal> props;
  for (std::size_t o = 0; o < k && props.size() < n; ++o) {
    const BBox& gt = img.ground_truth[o].box;
    BBox tight = gt;
    do {
      tight = jitter_box(rng, gt, 0.9, 1.1, 0.05);
    } while (iou(tight, gt) < 0.7);
    props.push_back({tight, false});
    for (std::size_t j = 1; j < per_object && props.size() < n; ++j) {
      props.push_back({jitter_box(rng, gt, 0.5, 1.6, 0.35), false});
    }
  }
  for (std::size_t j = 0; j < n_context && props.size() < n; ++j) {
    props.push_back({context_box(rng, img.ground_truth[j % k].box), true});
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> side(0.08, 0.5);
  while (props.size() < n) {
    const double w = side(rng), h = side(rng);
    const double x1 = unit(rng) * (1.0 - w), y1 = unit(rng) * (1.0 - h);
    props.push_back({BBox(x1, y1, x1 + w, y1 + h), false});
  }
  std::shuffle(props.begin(), props.end(), rng);

  // Noise-free signal: IoU-weighted class prototypes plus the scene
  // direction on context boxes.
  Matrix<double> clean(n, cfg.dim);
  for (std::size_t i = 0; i < n; ++i) {
    img.proposals.push_back(props[i].box);
    std::vector<double> overlap(cfg.classes, 0.0);
    for (const auto& gt : img.ground_truth) {
      overlap[gt.class_id] = std::max(overlap[gt.class_id], iou(props[i].box, gt.box));
    }
    auto row = clean.row(i);
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      if (overlap[c] == 0.0) continue;
      for (std::size_t d = 0; d < cfg.dim; ++d) row[d] += overlap[c] * signal.prototypes[c][d];
    }
    if (props[i].context) {
      for (std::size_t d = 0; d < cfg.dim; ++d) row[d] += cfg.distractor_strength * signal.scene[d];
    }
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t v = 0; v < cfg.views; ++v) {
    Matrix<double> feats(n, cfg.dim);
    for (std::size_t e = 0; e < feats.size(); ++e) {
      // Stored as float32 on disk; round now so save/load is lossless.
      feats.flat()[e] =
          static_cast<double>(static_cast<float>(clean.flat()[e] + cfg.noise_sigma * normal(rng)));
    }
    img.views.push_back(std::move(feats));
  }
  return img;
}

}  // namespace detail

/// Deterministic synthetic dataset: a pure function of `cfg`.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.classes = cfg.classes;
  ds.dim = cfg.dim;
  for (std::size_t c = 0; c < cfg.classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  const detail::SynthSignal signal = detail::make_signal(cfg);
  ds.images.reserve(cfg.n_images);
  for (std::size_t i = 0; i < cfg.n_images; ++i) ds.images.push_back(detail::synth_image(cfg, signal, i));
  return ds;
}

// ---------------------------------------------------------------------------
// Files: JSON manifest plus one binary feature sidecar per image.
//
// Sidecar layout (little endian):
//   "WSDF" | u16 version | u32 V | u32 N | u32 D | V*N*D f32, row-major
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kFeatureFormatVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 4 + 2 + 3 * 4;

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a temporary sibling and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string encode_features(const std::vector<Matrix<double>>& views) {
  std::ostringstream os(std::ios::binary);
  os.write("WSDF", 4);
  binary::write_u16(os, kFeatureFormatVersion);
  const std::size_t n = views.empty() ? 0 : views.front().rows();
  const std::size_t d = views.empty() ? 0 : views.front().cols();
  binary::write_u32(os, static_cast<std::uint32_t>(views.size()));
  binary::write_u32(os, static_cast<std::uint32_t>(n));
  binary::write_u32(os, static_cast<std::uint32_t>(d));
  for (const auto& m : views) {
    for (double x : m.flat()) binary::write_f32(os, static_cast<float>(x));
  }
  return os.str();
}

inline std::vector<Matrix<double>> decode_features(const std::string& bytes, const std::string& source) {
  binary::Reader r(bytes, source);
  if (r.read_magic(4) != "WSDF") throw DataError(source + ": bad magic, expected WSDF");
  const std::uint16_t version = r.read_u16("version");
  if (version != kFeatureFormatVersion) {
    throw DataError(source + ": unsupported feature format version " + std::to_string(version));
  }
  const std::uint32_t v = r.read_u32("V"), n = r.read_u32("N"), d = r.read_u32("D");
  const std::size_t expected = kFeatureHeaderBytes + std::size_t{4} * v * n * d;
  if (bytes.size() != expected) {
    throw DataError(source + ": expected " + std::to_string(expected) + " bytes for V=" +
                    std::to_string(v) + " N=" + std::to_string(n) + " D=" + std::to_string(d) +
                    ", got " + std::to_string(bytes.size()));
  }
  std::vector<Matrix<double>> views;
  for (std::uint32_t k = 0; k < v; ++k) {
    Matrix<double> m(n, d);
    for (double& x : m.flat()) {
      x = r.read_f32("feature");
      if (!std::isfinite(x)) {
        throw DataError(source + ": non-finite feature value at byte " + std::to_string(r.offset() - 4));
      }
    }
    views.push_back(std::move(m));
  }
  return views;
}

inline std::string feature_file_name(const ImageBag& img) { return img.id + ".wsdf"; }

inline nlohmann::ordered_json box_to_json(const BBox& b) {
  return nlohmann::ordered_json::array({b.x1(), b.y1(), b.x2(), b.y2()});
}

/// Writes `path` (JSON manifest) and one sidecar per image next to it.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  using json = nlohmann::ordered_json;
  json root;
  root["c"] = ds.classes;
  root["d"] = ds.dim;
  root["class_names"] = ds.class_names;
  json images = json::array();
  const std::filesystem::path dir = path.parent_path();
  for (const ImageBag& img : ds.images) {
    json j;
    j["id"] = img.id;
    j["labels"] = img.labels;
    json props = json::array();
    for (const BBox& b : img.proposals) props.push_back(box_to_json(b));
    j["proposals"] = std::move(props);
    json gts = json::array();
    for (const GroundTruth& g : img.ground_truth) {
      gts.push_back(json{{"class", g.class_id}, {"box", box_to_json(g.box)}});
    }
    j["ground_truth"] = std::move(gts);
    j["feature_file"] = feature_file_name(img);
    j["views"] = img.views.size();
    images.push_back(std::move(j));
    write_file_atomic(dir / feature_file_name(img), encode_features(img.views));
  }
  root["images"] = std::move(images);
  write_file_atomic(path, root.dump() + "\n");
}

namespace detail {

inline BBox box_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4) throw DataError(where + ": box must be [x1,y1,x2,y2]");
  for (const auto& x : j) {
    if (!x.is_number()) throw DataError(where + ": box coordinates must be numbers");
  }
  try {
    return BBox(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>());
  } catch (const InputError& e) {
    throw DataError(where + ": " + e.what());
  }
}

template <typename V>
V require(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": field '" + key + "' has the wrong type (" + e.what() + ")");
  }
}

}  // namespace detail

/// Loads and validates a dataset written by save_dataset.
inline Dataset load_dataset(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  const std::string top = path.string();
  if (!root.is_object()) throw DataError(top + ": top level must be an object");
  Dataset ds;
  ds.classes = detail::require<std::size_t>(root, "c", top);
  ds.dim = detail::require<std::size_t>(root, "d", top);
  ds.class_names = detail::require<std::vector<std::string>>(root, "class_names", top);
  if (!root.contains("images") || !root["images"].is_array()) {
    throw DataError(top + ": missing array 'images'");
  }
  const std::filesystem::path dir = path.parent_path();
  std::size_t index = 0;
  for (const auto& j : root["images"]) {
    std::string where = top + ": images[" + std::to_string(index++) + "]";
    ImageBag img;
    img.id = detail::require<std::string>(j, "id", where);
    where += " (id '" + img.id + "')";
    img.labels = detail::require<LabelVector>(j, "labels", where);
    if (!j.contains("proposals") || !j["proposals"].is_array()) throw DataError(where + ": missing proposals");
    for (std::size_t k = 0; k < j["proposals"].size(); ++k) {
      img.proposals.push_back(detail::box_from_json(j["proposals"][k], where + " proposal " + std::to_string(k)));
    }
    if (j.contains("ground_truth")) {
      for (const auto& g : j["ground_truth"]) {
        img.ground_truth.push_back({detail::require<int>(g, "class", where),
                                    detail::box_from_json(g.value("box", nlohmann::json()), where + " ground_truth")});
      }
    }
    const auto file = detail::require<std::string>(j, "feature_file", where);
    const auto n_views = detail::require<std::size_t>(j, "views", where);
    const std::filesystem::path fpath = dir / file;
    if (!std::filesystem::exists(fpath)) throw DataError(where + ": feature file " + fpath.string() + " not found");
    img.views = decode_features(read_file_bytes(fpath), where + " " + fpath.string());
    if (img.views.size() != n_views) {
      throw DataError(where + ": manifest declares " + std::to_string(n_views) + " views, sidecar holds " +
                      std::to_string(img.views.size()));
    }
    ds.images.push_back(std::move(img));
  }
  ds.validate();
  return ds;
}

}  // namespace wsd
