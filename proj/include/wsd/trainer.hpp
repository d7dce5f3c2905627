#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wsd/binary_io.hpp"
#include "wsd/data.hpp"
#include "wsd/errors.hpp"
#include "wsd/head.hpp"
#include "wsd/rng.hpp"
#include "wsd/schedule.hpp"

namespace wsd {

using Params = HeadParams<double>;

struct TrainConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int total_epochs = 40;
  std::uint64_t seed = 0;
  PruneSchedule schedule;
  double epsilon = kDefaultEpsilon;
  int lr_decay_epoch = 30;  // negative disables the step
  double lr_decay_factor = 0.1;
  bool baseline = false;    // M_p = M_n = N for every image and epoch

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
    if (total_epochs < 0) throw ConfigError("total_epochs must be >= 0");
    if (!(epsilon > 0.0 && epsilon < 0.5)) throw ConfigError("epsilon must lie in (0, 0.5)");
    if (!(lr_decay_factor > 0.0) || !std::isfinite(lr_decay_factor)) throw ConfigError("lr_decay_factor must be > 0");
    if (schedule.total_epochs != total_epochs) {
      throw ConfigError("schedule.total_epochs must equal total_epochs");
    }
    if (total_epochs > 0) schedule.validate();
  }

  double learning_rate_at(int epoch) const {
    return (lr_decay_epoch >= 0 && epoch >= lr_decay_epoch) ? learning_rate * lr_decay_factor
                                                            : learning_rate;
  }
};

struct TrainState {
  Params params;
  Params velocity;
  int epoch = 0;                    // completed epochs
  std::vector<double> loss_history; // mean loss per completed epoch
};

/// Rounds every entry to the nearest float32 so that checkpoints are exact.
inline void quantize_to_f32(Params& p) {
  for (auto blk : p.blocks()) {
    for (double& x : blk) x = static_cast<double>(static_cast<float>(x));
  }
}

/// Gaussian(0, 0.01) weights, zero biases; deterministic in `seed`.
inline Params init_params(std::size_t dim, std::size_t classes, std::uint64_t seed) {
  if (dim < 1 || classes < 1) throw InputError("init_params: D and C must be >= 1");
  Rng rng = make_rng(seed, "init");
  std::normal_distribution<double> normal(0.0, 0.01);
  Params p = Params::zeros(classes, dim);
  for (double& w : p.w_cls.flat()) w = normal(rng);
  for (double& w : p.w_imp.flat()) w = normal(rng);
  quantize_to_f32(p);
  return p;
}

inline TrainState init_state(std::size_t dim, std::size_t classes, std::uint64_t seed) {
  TrainState s;
  s.params = init_params(dim, classes, seed);
  s.velocity = Params::zeros(classes, dim);
  return s;
}

/// velocity <- momentum * velocity - lr * (grads + weight_decay * params);
/// params <- params + velocity.
inline void sgd_step(TrainState& state, const Params& grads, double lr, double momentum,
                     double weight_decay) {
  if (!grads.same_shape(state.params) || !state.velocity.same_shape(state.params)) {
    throw InputError("sgd_step: gradient / parameter shapes differ");
  }
  const auto g = grads.blocks();
  for (auto blk : g) {
    if (!std::all_of(blk.begin(), blk.end(), [](double x) { return std::isfinite(x); })) {
      throw NumericalError("non-finite gradient");
    }
  }
  auto p = state.params.blocks();
  auto v = state.velocity.blocks();
  for (std::size_t b = 0; b < p.size(); ++b) {
    for (std::size_t k = 0; k < p[b].size(); ++k) {
      v[b][k] = momentum * v[b][k] - lr * (g[b][k] + weight_decay * p[b][k]);
      p[b][k] += v[b][k];
    }
  }
}

inline void sgd_step(TrainState& state, const Params& grads, const TrainConfig& cfg) {
  sgd_step(state, grads, cfg.learning_rate_at(state.epoch), cfg.momentum, cfg.weight_decay);
}

/// What the trainer did for one image; handed to an optional observer.
struct StepInfo {
  int epoch = 0;
  std::size_t image_index = 0;
  const std::string* image_id = nullptr;
  std::size_t regions = 0;
  std::size_t m_pos = 0;
  std::size_t m_neg = 0;
  double loss = 0.0;
};

using StepObserver = std::function<void(const StepInfo&)>;

/// Seeded visiting order for one epoch; independent of the init stream.
inline std::vector<std::size_t> epoch_order(std::size_t n_images, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n_images);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, "shuffle", static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// One pass over the dataset, one image per update.
inline void train_epoch(TrainState& state, const Dataset& ds, const TrainConfig& cfg,
                        const StepObserver& observer = {}) {
  if (ds.images.empty()) throw InputError("train_epoch: empty dataset");
  if (ds.dim != state.params.dim() || ds.classes != state.params.classes()) {
    throw InputError("dataset (C=" + std::to_string(ds.classes) + ", D=" + std::to_string(ds.dim) +
                     ") does not match parameters (C=" + std::to_string(state.params.classes()) +
                     ", D=" + std::to_string(state.params.dim()) + ")");
  }
  const int epoch = state.epoch;
  double loss_sum = 0.0;
  for (std::size_t idx : epoch_order(ds.images.size(), cfg.seed, epoch)) {
    const ImageBag& img = ds.images[idx];
    const std::size_t n = img.num_regions();
    const std::size_t m_pos = cfg.baseline ? n : positive_budget(epoch, n, cfg.schedule);
    const std::size_t m_neg = cfg.baseline ? n : cfg.schedule.m_n;
    const Matrix<double>& feats = img.views[static_cast<std::size_t>(epoch) % img.views.size()];

    ForwardTrace<double> trace;
    try {
      trace = forward_image(state.params, feats, img.labels, m_pos, m_neg, cfg.epsilon);
      sgd_step(state, backward_image(trace, state.params, feats, img.labels), cfg);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " (image '" + img.id + "', epoch " +
                           std::to_string(epoch) + ")");
    }
    loss_sum += trace.loss;
    if (observer) observer({epoch, idx, &img.id, n, m_pos, m_neg, trace.loss});
  }
  state.loss_history.push_back(loss_sum / static_cast<double>(ds.images.size()));
  ++state.epoch;
  // Epoch boundaries are where checkpoints are taken.
  quantize_to_f32(state.params);
  quantize_to_f32(state.velocity);
}

/// Runs the remaining epochs of `state` up to cfg.total_epochs.
inline void train_from(TrainState& state, const Dataset& ds, const TrainConfig& cfg,
                       const StepObserver& observer = {}) {
  cfg.validate();
  while (state.epoch < cfg.total_epochs) train_epoch(state, ds, cfg, observer);
}

inline TrainState train(const Dataset& ds, const TrainConfig& cfg, const StepObserver& observer = {}) {
  cfg.validate();
  TrainState state = init_state(ds.dim, ds.classes, cfg.seed);
  train_from(state, ds, cfg, observer);
  return state;
}

// ---------------------------------------------------------------------------
// Checkpoint (little endian):
//   "WSDC" | u32 version | u32 C | u32 D
//   | f32 W_cls[C*D] b_cls[C] W_imp[C*D] b_imp[C]      (parameters)
//   | f32 W_cls[C*D] b_cls[C] W_imp[C*D] b_imp[C]      (velocity)
//   | u32 epoch
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const TrainState& s) {
  std::ostringstream os(std::ios::binary);
  os.write("WSDC", 4);
  binary::write_u32(os, kCheckpointVersion);
  binary::write_u32(os, static_cast<std::uint32_t>(s.params.classes()));
  binary::write_u32(os, static_cast<std::uint32_t>(s.params.dim()));
  for (const Params* p : {&s.params, &s.velocity}) {
    for (auto blk : p->blocks()) {
      for (double x : blk) binary::write_f32(os, static_cast<float>(x));
    }
  }
  binary::write_u32(os, static_cast<std::uint32_t>(s.epoch));
  return os.str();
}

inline TrainState decode_checkpoint(const std::string& bytes, const std::string& source) {
  binary::Reader r(bytes, source);
  if (r.read_magic(4) != "WSDC") throw DataError(source + ": bad magic, expected WSDC");
  const std::uint32_t version = r.read_u32("version");
  if (version != kCheckpointVersion) {
    throw DataError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t c = r.read_u32("C"), d = r.read_u32("D");
  if (c == 0 || d == 0) throw DataError(source + ": C and D must be >= 1");
  const std::size_t expected = 4 + 3 * 4 + std::size_t{4} * 2 * 2 * (c * d + c) + 4;
  if (bytes.size() != expected) {
    throw DataError(source + ": expected " + std::to_string(expected) + " bytes for C=" +
                    std::to_string(c) + " D=" + std::to_string(d) + ", got " + std::to_string(bytes.size()));
  }
  TrainState s;
  s.params = Params::zeros(c, d);
  s.velocity = Params::zeros(c, d);
  for (Params* p : {&s.params, &s.velocity}) {
    for (auto blk : p->blocks()) {
      for (double& x : blk) {
        x = r.read_f32("parameter");
        if (!std::isfinite(x)) throw DataError(source + ": non-finite parameter value");
      }
    }
  }
  s.epoch = static_cast<int>(r.read_u32("epoch"));
  return s;
}

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(s));
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), path.string());
}

}  // namespace wsd
