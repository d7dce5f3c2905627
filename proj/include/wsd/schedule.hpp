#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <string>

#include "wsd/errors.hpp"

namespace wsd {

/// Progressive pruning of the positive budget M_p; the negative budget M_n
/// stays fixed for the whole run.
struct PruneSchedule {
  int warmup_epochs = 20;
  std::size_t m_start = 1024;
  std::size_t m_pt = 128;
  std::size_t m_n = 128;
  int total_epochs = 40;

  /// Number of halvings from m_start down to m_pt.
  int halvings() const { return std::countr_zero(m_start / m_pt); }

  void validate() const {
    if (m_pt < 1 || m_pt > m_start) throw ConfigError("schedule: need 1 <= m_pt <= m_start");
    if (m_start % m_pt != 0 || !std::has_single_bit(m_start / m_pt)) {
      throw ConfigError("schedule: m_start / m_pt must be a power of two");
    }
    if (m_n < 1) throw ConfigError("schedule: m_n must be >= 1");
    if (warmup_epochs < 0) throw ConfigError("schedule: warmup_epochs must be >= 0");
    if (total_epochs > 0 && warmup_epochs >= total_epochs) {
      throw ConfigError("schedule: warmup_epochs must be smaller than total_epochs");
    }
  }
};

/// Epochs between consecutive halvings of M_p after warmup.
inline double epochs_per_halving(const PruneSchedule& s) {
  s.validate();
  return static_cast<double>(s.total_epochs - s.warmup_epochs) / (s.halvings() + 1);
}

/// M_p for an image with n regions at the given epoch: n during warmup,
/// then m_start halved every epochs_per_halving() epochs, floored at m_pt.
inline std::size_t positive_budget(int epoch, std::size_t n, const PruneSchedule& s) {
  s.validate();
  if (epoch < 0 || epoch >= s.total_epochs) {
    throw InputError("epoch " + std::to_string(epoch) + " outside [0, " +
                     std::to_string(s.total_epochs) + ")");
  }
  if (epoch < s.warmup_epochs) return n;
  // floor((epoch - warmup) / N_e) in exact integer arithmetic.
  const long long post = epoch - s.warmup_epochs;
  const long long span = s.total_epochs - s.warmup_epochs;
  const long long step = post * (s.halvings() + 1) / span;
  if (step >= 63) return s.m_pt;
  return std::max(s.m_pt, static_cast<std::size_t>(s.m_start >> step));
}

}  // namespace wsd
