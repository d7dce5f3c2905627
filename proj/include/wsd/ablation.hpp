#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "wsd/data.hpp"
#include "wsd/eval.hpp"
#include "wsd/trainer.hpp"

namespace wsd {

/// Selection-schedule vs. no-selection comparison on the synthetic benchmark.
struct AblationSetup {
  SynthConfig synth;
  TrainConfig train;
  EvalOptions eval;
  std::size_t n_train = 160;  // remaining images form the test split
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

/// Budgets for the default 64-proposal benchmark: M_start = N/2 and
/// M_pt = M_n = N/8. The 1024/128/128 defaults never bind at this N.
inline PruneSchedule benchmark_schedule(int total_epochs = 40) {
  PruneSchedule s;
  s.total_epochs = total_epochs;
  s.warmup_epochs = total_epochs / 2;
  s.m_start = 32;
  s.m_pt = 8;
  s.m_n = 8;
  return s;
}

inline AblationSetup default_ablation_setup() {
  AblationSetup a;
  a.train.schedule = benchmark_schedule(a.train.total_epochs);
  a.eval.m_pt = a.train.schedule.m_pt;
  a.eval.concentration_k = a.train.schedule.m_pt;
  return a;
}

struct AblationRun {
  std::uint64_t seed = 0;
  EvalReport selection;
  EvalReport baseline;
  double concentration_init = 0.0;
  double concentration_selection = 0.0;
  std::vector<double> loss_selection;
  std::vector<double> loss_baseline;
  double seconds = 0.0;
};

inline AblationRun run_ablation_seed(const AblationSetup& setup, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SynthConfig sc = setup.synth;
  sc.seed = seed;
  const Dataset ds = generate_synthetic(sc);
  if (setup.n_train >= ds.images.size()) throw ConfigError("ablation: n_train leaves no test images");
  const Dataset train_split = ds.slice(0, setup.n_train);
  const Dataset test_split = ds.slice(setup.n_train, ds.images.size());

  TrainConfig tc = setup.train;
  tc.seed = seed;
  tc.baseline = false;
  const TrainState selection = train(train_split, tc);
  tc.baseline = true;
  const TrainState baseline = train(train_split, tc);

  AblationRun run;
  run.seed = seed;
  run.selection = evaluate_map(test_split, selection.params, setup.eval);
  run.baseline = evaluate_map(test_split, baseline.params, setup.eval);
  const std::size_t k = setup.train.schedule.m_pt;
  run.concentration_init = weight_concentration(init_params(ds.dim, ds.classes, seed), train_split, k);
  run.concentration_selection = weight_concentration(selection.params, train_split, k);
  run.loss_selection = selection.loss_history;
  run.loss_baseline = baseline.loss_history;
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

inline std::vector<AblationRun> run_ablation(const AblationSetup& setup) {
  std::vector<AblationRun> runs;
  for (std::uint64_t seed : setup.seeds) runs.push_back(run_ablation_seed(setup, seed));
  return runs;
}

}  // namespace wsd
