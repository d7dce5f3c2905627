#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "wsd/data.hpp"
#include "wsd/errors.hpp"
#include "wsd/eval.hpp"
#include "wsd/trainer.hpp"

// Flat `key = value` configuration files. Lines starting with '#' are
// comments. Every key can also be given as a command-line flag of the same
// name; flags win over the file, the file wins over built-in defaults.
namespace wsd::config {

using KeyValues = std::map<std::string, std::string>;

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse(std::string_view text, const std::string& source) {
  KeyValues kv;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

inline KeyValues load(const std::filesystem::path& path) {
  try {
    return parse(read_file_bytes(path), path.string());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

/// Throws listing every key not in `known`.
inline void reject_unknown(const KeyValues& kv, const std::vector<std::string>& known, const char* what) {
  std::string unknown;
  for (const auto& [k, v] : kv) {
    if (std::find(known.begin(), known.end(), k) == known.end()) unknown += (unknown.empty() ? "" : ", ") + k;
  }
  if (!unknown.empty()) throw ConfigError(std::string("unknown ") + what + " config keys: " + unknown);
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  T out{};
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
  } else if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else {
    const char* first = text.data();
    const char* last = text.data() + text.size();
    if constexpr (std::is_unsigned_v<T>) {
      if (!text.empty() && text.front() == '-') {
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + text + "'");
      }
    }
    const auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last) {
      throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
    }
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(out)) throw ConfigError("config key '" + key + "': value must be finite");
    }
    return out;
  }
}

template <typename T>
void assign(const KeyValues& kv, const std::string& key, T& target) {
  if (const auto it = kv.find(key); it != kv.end()) target = parse_value<T>(key, it->second);
}

inline std::string format_double(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

// --- synth -----------------------------------------------------------------

inline const std::vector<std::string>& synth_keys() {
  static const std::vector<std::string> keys{
      "n_images", "classes", "dim", "proposals", "objects_min", "objects_max", "noise_sigma",
      "context_fraction", "distractor_strength", "views", "seed"};
  return keys;
}

inline SynthConfig synth_config(const KeyValues& kv) {
  reject_unknown(kv, synth_keys(), "synth");
  SynthConfig c;
  assign(kv, "n_images", c.n_images);
  assign(kv, "classes", c.classes);
  assign(kv, "dim", c.dim);
  assign(kv, "proposals", c.proposals);
  assign(kv, "objects_min", c.objects_min);
  assign(kv, "objects_max", c.objects_max);
  assign(kv, "noise_sigma", c.noise_sigma);
  assign(kv, "context_fraction", c.context_fraction);
  assign(kv, "distractor_strength", c.distractor_strength);
  assign(kv, "views", c.views);
  assign(kv, "seed", c.seed);
  c.validate();
  return c;
}

inline KeyValues to_key_values(const SynthConfig& c) {
  return {{"n_images", std::to_string(c.n_images)},
          {"classes", std::to_string(c.classes)},
          {"dim", std::to_string(c.dim)},
          {"proposals", std::to_string(c.proposals)},
          {"objects_min", std::to_string(c.objects_min)},
          {"objects_max", std::to_string(c.objects_max)},
          {"noise_sigma", format_double(c.noise_sigma)},
          {"context_fraction", format_double(c.context_fraction)},
          {"distractor_strength", format_double(c.distractor_strength)},
          {"views", std::to_string(c.views)},
          {"seed", std::to_string(c.seed)}};
}

// --- train -----------------------------------------------------------------

inline const std::vector<std::string>& train_keys() {
  static const std::vector<std::string> keys{
      "learning_rate", "momentum", "weight_decay", "epochs", "seed", "warmup_epochs", "m_start",
      "m_pt", "m_n", "epsilon", "lr_decay_epoch", "lr_decay_factor", "baseline"};
  return keys;
}

/// Unset warmup_epochs and lr_decay_epoch scale with `epochs` (half and
/// three quarters of the run, i.e. 20 and 30 for 40 epochs).
inline TrainConfig train_config(const KeyValues& kv) {
  reject_unknown(kv, train_keys(), "train");
  TrainConfig c;
  assign(kv, "learning_rate", c.learning_rate);
  assign(kv, "momentum", c.momentum);
  assign(kv, "weight_decay", c.weight_decay);
  assign(kv, "epochs", c.total_epochs);
  assign(kv, "seed", c.seed);
  c.schedule.total_epochs = c.total_epochs;
  c.schedule.warmup_epochs = c.total_epochs / 2;
  c.lr_decay_epoch = c.total_epochs * 3 / 4;
  assign(kv, "warmup_epochs", c.schedule.warmup_epochs);
  assign(kv, "m_start", c.schedule.m_start);
  assign(kv, "m_pt", c.schedule.m_pt);
  assign(kv, "m_n", c.schedule.m_n);
  assign(kv, "epsilon", c.epsilon);
  assign(kv, "lr_decay_epoch", c.lr_decay_epoch);
  assign(kv, "lr_decay_factor", c.lr_decay_factor);
  assign(kv, "baseline", c.baseline);
  c.validate();
  return c;
}

inline KeyValues to_key_values(const TrainConfig& c) {
  return {{"learning_rate", format_double(c.learning_rate)},
          {"momentum", format_double(c.momentum)},
          {"weight_decay", format_double(c.weight_decay)},
          {"epochs", std::to_string(c.total_epochs)},
          {"seed", std::to_string(c.seed)},
          {"warmup_epochs", std::to_string(c.schedule.warmup_epochs)},
          {"m_start", std::to_string(c.schedule.m_start)},
          {"m_pt", std::to_string(c.schedule.m_pt)},
          {"m_n", std::to_string(c.schedule.m_n)},
          {"epsilon", format_double(c.epsilon)},
          {"lr_decay_epoch", std::to_string(c.lr_decay_epoch)},
          {"lr_decay_factor", format_double(c.lr_decay_factor)},
          {"baseline", c.baseline ? "true" : "false"}};
}

// --- eval ------------------------------------------------------------------

inline const std::vector<std::string>& eval_keys() {
  static const std::vector<std::string> keys{
      "mask_mode", "m_pt", "ap_protocol", "both", "nms_threshold", "vote_threshold",
      "score_floor", "iou_threshold", "concentration_k", "threads"};
  return keys;
}

inline EvalOptions eval_options(const KeyValues& kv) {
  reject_unknown(kv, eval_keys(), "eval");
  EvalOptions o;
  if (const auto it = kv.find("mask_mode"); it != kv.end()) {
    if (it->second == "all") o.mask_mode = MaskMode::kAll;
    else if (it->second == "top_mpt") o.mask_mode = MaskMode::kTopMpt;
    else throw ConfigError("mask_mode must be 'all' or 'top_mpt', got '" + it->second + "'");
  }
  if (const auto it = kv.find("ap_protocol"); it != kv.end()) {
    if (it->second == "eleven_point") o.protocol = ApProtocol::kElevenPoint;
    else if (it->second == "area") o.protocol = ApProtocol::kArea;
    else throw ConfigError("ap_protocol must be 'eleven_point' or 'area', got '" + it->second + "'");
  }
  assign(kv, "m_pt", o.m_pt);
  assign(kv, "both", o.both_protocols);
  assign(kv, "nms_threshold", o.nms_threshold);
  assign(kv, "vote_threshold", o.vote_threshold);
  assign(kv, "score_floor", o.score_floor);
  assign(kv, "iou_threshold", o.iou_threshold);
  assign(kv, "concentration_k", o.concentration_k);
  assign(kv, "threads", o.threads);
  if (!(o.nms_threshold > 0.0 && o.nms_threshold <= 1.0)) throw ConfigError("nms_threshold must lie in (0, 1]");
  if (!(o.vote_threshold >= 0.0 && o.vote_threshold <= 1.0)) throw ConfigError("vote_threshold must lie in [0, 1]");
  if (!(o.iou_threshold > 0.0 && o.iou_threshold <= 1.0)) throw ConfigError("iou_threshold must lie in (0, 1]");
  if (!(o.score_floor >= 0.0)) throw ConfigError("score_floor must be >= 0");
  if (o.m_pt < 1 || o.concentration_k < 1) throw ConfigError("m_pt and concentration_k must be >= 1");
  if (o.threads < 1) o.threads = 1;
  return o;
}

inline KeyValues to_key_values(const EvalOptions& o) {
  return {{"mask_mode", to_string(o.mask_mode)},
          {"m_pt", std::to_string(o.m_pt)},
          {"ap_protocol", to_string(o.protocol)},
          {"both", o.both_protocols ? "true" : "false"},
          {"nms_threshold", format_double(o.nms_threshold)},
          {"vote_threshold", format_double(o.vote_threshold)},
          {"score_floor", format_double(o.score_floor)},
          {"iou_threshold", format_double(o.iou_threshold)},
          {"concentration_k", std::to_string(o.concentration_k)},
          {"threads", std::to_string(o.threads)}};
}

}  // namespace wsd::config
