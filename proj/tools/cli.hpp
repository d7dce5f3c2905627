#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "wsd/ablation.hpp"
#include "wsd/config.hpp"
#include "wsd/data.hpp"
#include "wsd/errors.hpp"
#include "wsd/eval.hpp"
#include "wsd/gradcheck.hpp"
#include "wsd/trainer.hpp"
#include "wsd/version.hpp"

namespace wsd::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

/// Config keys exposed as `--key` flags (with a `--key-name` alias).
class KeyFlags {
 public:
  KeyFlags(CLI::App& app, const std::vector<std::string>& keys, const std::vector<std::string>& bool_keys = {}) {
    for (const std::string& key : keys) {
      std::string names = "--" + key;
      std::string dashed = key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      if (dashed != key) names += ",--" + dashed;
      auto& slot = values_[key];
      const bool is_bool = std::find(bool_keys.begin(), bool_keys.end(), key) != bool_keys.end();
      CLI::Option* opt = is_bool ? app.add_flag(names, flags_[key], "override config key '" + key + "'")
                                 : app.add_option(names, slot, "override config key '" + key + "'");
      options_.emplace_back(key, opt);
    }
  }

  /// File values overridden by any flag given on the command line.
  config::KeyValues merge(config::KeyValues kv) const {
    for (const auto& [key, opt] : options_) {
      if (opt->count() == 0) continue;
      if (const auto f = flags_.find(key); f != flags_.end()) {
        kv[key] = f->second ? "true" : "false";
      } else {
        kv[key] = values_.at(key);
      }
    }
    return kv;
  }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> flags_;
  std::vector<std::pair<std::string, CLI::Option*>> options_;
};

inline config::KeyValues load_optional(const std::string& path) {
  return path.empty() ? config::KeyValues{} : config::load(path);
}

inline json to_json(const config::KeyValues& kv) {
  json j = json::object();
  for (const auto& [k, v] : kv) j[k] = v;
  return j;
}

inline std::pair<std::size_t, std::size_t> parse_range(const std::string& text, std::size_t n) {
  if (text.empty()) return {0, n};
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ConfigError("--range expects begin:end, got '" + text + "'");
  const std::string a = text.substr(0, colon), b = text.substr(colon + 1);
  const std::size_t begin = a.empty() ? 0 : config::parse_value<std::size_t>("range", a);
  const std::size_t end = b.empty() ? n : config::parse_value<std::size_t>("range", b);
  if (begin >= end || end > n) {
    throw ConfigError("--range " + text + " is empty or exceeds the " + std::to_string(n) + " images");
  }
  return {begin, end};
}

/// Provenance record written next to an output artifact.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  config::KeyValues resolved;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& artifact) const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["version"] = kVersion;
    j["seed"] = seed;
    j["config"] = to_json(resolved);
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    fs::path p = artifact;
    p += ".run.json";
    write_file_atomic(p, j.dump(2) + "\n");
  }
};

inline std::string budget_label(std::size_t value, bool all_regions) {
  return all_regions ? "N" : std::to_string(value);
}

// ---------------------------------------------------------------------------

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline int run(const std::vector<std::string>& args, Streams io) {
  CLI::App app{"Weakly supervised detection with optimized region selection", "wsdsel"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic benchmark dataset");
  std::string synth_config_path, synth_out;
  synth->add_option("--config", synth_config_path, "key = value config file");
  synth->add_option("--out", synth_out, "output manifest path (sidecars go next to it)")->required();
  KeyFlags synth_flags(*synth, config::synth_keys());

  // train
  auto* tr = app.add_subcommand("train", "train the detection head");
  std::string train_config_path, train_data, train_out, train_range, train_resume;
  tr->add_option("--data", train_data, "dataset manifest")->required();
  tr->add_option("--config", train_config_path, "key = value config file");
  tr->add_option("--out", train_out, "checkpoint path")->required();
  tr->add_option("--range", train_range, "image subset begin:end");
  tr->add_option("--resume", train_resume, "continue from a checkpoint");
  KeyFlags train_flags(*tr, config::train_keys(), {"baseline"});

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (mAP, CorLoc)");
  std::string eval_config_path, eval_data, eval_ckpt, eval_out, eval_range, eval_pr;
  ev->add_option("--data", eval_data, "dataset manifest")->required();
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--out", eval_out, "report JSON path")->required();
  ev->add_option("--config", eval_config_path, "key = value config file");
  ev->add_option("--range", eval_range, "image subset begin:end");
  ev->add_option("--pr-csv", eval_pr, "write per-class precision/recall points");
  KeyFlags eval_flags(*ev, config::eval_keys(), {"both"});

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  std::uint64_t gc_seed = 0;
  GradCheckSizes sizes;
  bool inject_fault = false;
  gc->add_option("--seed", gc_seed);
  gc->add_option("--instances", sizes.instances);
  gc->add_option("--max-regions", sizes.max_regions)->check(CLI::PositiveNumber);
  gc->add_option("--max-classes", sizes.max_classes)->check(CLI::PositiveNumber);
  gc->add_option("--max-dim", sizes.max_dim)->check(CLI::PositiveNumber);
  gc->add_option("--step", sizes.step)->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", sizes.tolerance)->check(CLI::PositiveNumber);
  gc->add_flag("--inject-fault", inject_fault, "flip the sign of one gradient block (self-test)")->group("");

  // ablate
  auto* ab = app.add_subcommand("ablate", "selection schedule vs. no-selection baseline over several seeds");
  std::string ab_out;
  unsigned ab_seeds = 5;
  ab->add_option("--out", ab_out, "summary JSON path");
  ab->add_option("--seeds", ab_seeds, "number of seeds (1..n)")->check(CLI::PositiveNumber);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, io.out, io.err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  RunManifest manifest;
  manifest.argv = args;
  try {
    if (synth->parsed()) {
      manifest.command = "synth";
      const SynthConfig cfg = config::synth_config(synth_flags.merge(load_optional(synth_config_path)));
      manifest.resolved = config::to_key_values(cfg);
      manifest.seed = cfg.seed;
      manifest.inputs["config"] = synth_config_path;
      manifest.outputs["dataset"] = synth_out;
      const Dataset ds = generate_synthetic(cfg);
      save_dataset(ds, synth_out);
      manifest.write(synth_out);
      io.out << "wrote " << ds.images.size() << " images to " << synth_out << "\n";
      return kExitOk;
    }

    if (tr->parsed()) {
      manifest.command = "train";
      const TrainConfig cfg = config::train_config(train_flags.merge(load_optional(train_config_path)));
      manifest.resolved = config::to_key_values(cfg);
      manifest.seed = cfg.seed;
      const Dataset all = load_dataset(train_data);
      const auto [begin, end] = parse_range(train_range, all.images.size());
      const Dataset ds = all.slice(begin, end);
      manifest.resolved["range"] = std::to_string(begin) + ":" + std::to_string(end);
      manifest.inputs["data"] = train_data;
      if (!train_resume.empty()) manifest.inputs["resume"] = train_resume;

      TrainState state = train_resume.empty() ? init_state(ds.dim, ds.classes, cfg.seed) : load_checkpoint(train_resume);
      if (state.params.classes() != ds.classes || state.params.dim() != ds.dim) {
        throw InputError("checkpoint (C=" + std::to_string(state.params.classes()) + ", D=" +
                         std::to_string(state.params.dim()) + ") does not match dataset (C=" +
                         std::to_string(ds.classes) + ", D=" + std::to_string(ds.dim) + ")");
      }
      const int first_epoch = state.epoch;
      std::ostringstream log;
      log << "epoch,learning_rate,m_p,m_n,mean_loss\n";
      train_from(state, ds, cfg);
      for (int e = first_epoch; e < state.epoch; ++e) {
        const bool warm = cfg.baseline || e < cfg.schedule.warmup_epochs;
        log << e << ',' << config::format_double(cfg.learning_rate_at(e)) << ','
            << budget_label(warm ? 0 : positive_budget(e, 0, cfg.schedule), warm) << ','
            << budget_label(cfg.schedule.m_n, cfg.baseline) << ','
            << config::format_double(state.loss_history[static_cast<std::size_t>(e - first_epoch)]) << '\n';
      }
      save_checkpoint(state, train_out);
      const std::string log_path = train_out + ".loss.csv";
      write_file_atomic(log_path, log.str());
      manifest.outputs["checkpoint"] = train_out;
      manifest.outputs["loss_history"] = log_path;
      manifest.write(train_out);
      io.out << "trained epochs " << first_epoch << ".." << state.epoch;
      if (!state.loss_history.empty()) io.out << ", final mean loss " << state.loss_history.back();
      io.out << "\n";
      return kExitOk;
    }

    if (ev->parsed()) {
      manifest.command = "eval";
      const EvalOptions opt = config::eval_options(eval_flags.merge(load_optional(eval_config_path)));
      manifest.resolved = config::to_key_values(opt);
      const Dataset all = load_dataset(eval_data);
      const auto [begin, end] = parse_range(eval_range, all.images.size());
      manifest.resolved["range"] = std::to_string(begin) + ":" + std::to_string(end);
      const TrainState state = load_checkpoint(eval_ckpt);
      const EvalReport rep = evaluate_map(all.slice(begin, end), state.params, opt);
      manifest.inputs["data"] = eval_data;
      manifest.inputs["checkpoint"] = eval_ckpt;
      write_file_atomic(eval_out, report_to_json(rep).dump(2) + "\n");
      manifest.outputs["report"] = eval_out;
      if (!eval_pr.empty()) {
        std::ostringstream csv;
        write_pr_csv(csv, rep);
        write_file_atomic(eval_pr, csv.str());
        manifest.outputs["pr_csv"] = eval_pr;
      }
      manifest.write(eval_out);
      io.out << "mAP " << rep.map << "  mean CorLoc " << rep.mean_corloc << "\n";
      return kExitOk;
    }

    if (gc->parsed()) {
      GradCheckReport rep;
      if (inject_fault) {
        rep = run_gradcheck(gc_seed, sizes, [](HeadParams<double>& g) {
          for (double& x : g.w_cls.flat()) x = -x;
        });
      } else {
        rep = run_gradcheck(gc_seed, sizes);
      }
      io.out << "instances " << rep.instances << " (labels: " << rep.positive_labels << " positive, "
             << rep.negative_labels << " negative)\n"
             << "max relative error " << rep.max_rel_error << " (tolerance " << sizes.tolerance << ")\n";
      if (!rep.passed) {
        io.err << "gradcheck FAILED: worst instance #" << rep.worst_instance << " N=" << rep.worst_n
               << " C=" << rep.worst_c << " D=" << rep.worst_d << " rel error " << rep.max_rel_error << "\n";
        return kExitNumerical;
      }
      io.out << "gradcheck PASSED\n";
      return kExitOk;
    }

    if (ab->parsed()) {
      AblationSetup setup = default_ablation_setup();
      setup.seeds.clear();
      for (unsigned s = 1; s <= ab_seeds; ++s) setup.seeds.push_back(s);
      json runs = json::array();
      double diff_sum = 0.0;
      std::size_t wins = 0;
      io.out << std::fixed << std::setprecision(4);
      for (std::uint64_t seed : setup.seeds) {
        const AblationRun r = run_ablation_seed(setup, seed);
        const double diff = r.selection.map - r.baseline.map;
        diff_sum += diff;
        wins += diff > 0.0 ? 1 : 0;
        io.out << "seed " << seed << "  selection mAP " << r.selection.map << "  baseline mAP "
               << r.baseline.map << "  diff " << diff << "  (" << r.seconds << " s)\n";
        runs.push_back(json{{"seed", seed},
                            {"selection_map", r.selection.map},
                            {"baseline_map", r.baseline.map},
                            {"selection_corloc", r.selection.mean_corloc},
                            {"baseline_corloc", r.baseline.mean_corloc},
                            {"weight_concentration_init", r.concentration_init},
                            {"weight_concentration_trained", r.concentration_selection}});
      }
      const double mean_diff = diff_sum / static_cast<double>(setup.seeds.size());
      io.out << "selection wins " << wins << "/" << setup.seeds.size() << ", mean improvement " << mean_diff << "\n";
      if (!ab_out.empty()) {
        json j;
        j["runs"] = std::move(runs);
        j["wins"] = wins;
        j["mean_improvement"] = mean_diff;
        json cfg;
        cfg["synth"] = to_json(config::to_key_values(setup.synth));
        cfg["train"] = to_json(config::to_key_values(setup.train));
        cfg["eval"] = to_json(config::to_key_values(setup.eval));
        j["config"] = std::move(cfg);
        write_file_atomic(ab_out, j.dump(2) + "\n");
        manifest.command = "ablate";
        manifest.outputs["summary"] = ab_out;
        manifest.write(ab_out);
      }
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    io.err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    io.err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    io.err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const InputError& e) {
    io.err << "input error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace wsd::cli
