#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "wsd/head.hpp"
#include "wsd/rng.hpp"

namespace wsd {

/// Central-difference gradient of the head loss. Every perturbed evaluation
/// reuses the selection mask of the unperturbed forward pass.
template <typename T>
HeadParams<T> finite_diff_grads(const HeadParams<T>& params, const Matrix<T>& feats,
                                const LabelVector& y, std::size_t m_pos, std::size_t m_neg,
                                T step = T(1e-4), T epsilon = T(kDefaultEpsilon)) {
  if (!(step > T(0))) throw InputError("finite difference step must be positive");
  const SelectionMask h = forward_image(params, feats, y, m_pos, m_neg, epsilon).h;
  HeadParams<T> probe = params;
  HeadParams<T> g = HeadParams<T>::zeros(params.classes(), params.dim());
  auto probe_blocks = probe.blocks();
  auto grad_blocks = g.blocks();
  for (std::size_t b = 0; b < probe_blocks.size(); ++b) {
    for (std::size_t k = 0; k < probe_blocks[b].size(); ++k) {
      T& slot = probe_blocks[b][k];
      const T orig = slot;
      slot = orig + step;
      const T up = forward_with_mask(probe, feats, y, h, epsilon).loss;
      slot = orig - step;
      const T down = forward_with_mask(probe, feats, y, h, epsilon).loss;
      slot = orig;
      grad_blocks[b][k] = (up - down) / (T(2) * step);
    }
  }
  return g;
}

/// Entry-wise |a - b| / max(|a|, |b|, floor), maximized over all parameters.
template <typename T>
T max_relative_error(const HeadParams<T>& a, const HeadParams<T>& b, T floor = T(1e-6)) {
  if (!a.same_shape(b)) throw InputError("gradient shapes differ");
  T worst{};
  const auto ab = a.blocks();
  const auto bb = b.blocks();
  for (std::size_t blk = 0; blk < ab.size(); ++blk) {
    for (std::size_t k = 0; k < ab[blk].size(); ++k) {
      const T x = ab[blk][k], z = bb[blk][k];
      const T denom = std::max({std::abs(x), std::abs(z), floor});
      worst = std::max(worst, std::abs(x - z) / denom);
    }
  }
  return worst;
}

/// One randomized head instance for gradient verification.
struct GradInstance {
  HeadParams<double> params;
  Matrix<double> feats;
  LabelVector labels;
  std::size_t m_pos = 1;
  std::size_t m_neg = 1;
};

struct GradCheckSizes {
  std::size_t max_regions = 12;
  std::size_t max_classes = 4;
  std::size_t max_dim = 8;
  std::size_t instances = 100;
  double step = 1e-4;
  double tolerance = 1e-4;
};

/// Random instance with N, C, D drawn up to the given maxima, weights of
/// moderate scale and budgets below N so that selection is active.
inline GradInstance random_grad_instance(Rng& rng, const GradCheckSizes& sizes) {
  std::uniform_int_distribution<std::size_t> pick_n(1, sizes.max_regions);
  std::uniform_int_distribution<std::size_t> pick_c(1, sizes.max_classes);
  std::uniform_int_distribution<std::size_t> pick_d(1, sizes.max_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  GradInstance inst;
  const std::size_t n = pick_n(rng), c = pick_c(rng), d = pick_d(rng);
  inst.params = HeadParams<double>::zeros(c, d);
  for (auto blk : inst.params.blocks()) {
    for (double& x : blk) x = 0.5 * normal(rng);
  }
  inst.feats = Matrix<double>(n, d);
  for (double& x : inst.feats.flat()) x = normal(rng);
  inst.labels.resize(c);
  for (int& y : inst.labels) y = coin(rng) ? 1 : 0;
  std::uniform_int_distribution<std::size_t> pick_m(1, n);
  inst.m_pos = pick_m(rng);
  inst.m_neg = pick_m(rng);
  return inst;
}

struct GradCheckReport {
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  std::size_t worst_instance = 0;
  std::size_t worst_n = 0, worst_c = 0, worst_d = 0;
  std::size_t positive_labels = 0;
  std::size_t negative_labels = 0;
  bool passed = false;
};

/// Compares analytic and finite-difference gradients over random instances.
/// `mutate` (if set) is applied to each analytic gradient before comparison.
template <typename Mutation = std::nullptr_t>
GradCheckReport run_gradcheck(std::uint64_t seed, const GradCheckSizes& sizes,
                              Mutation mutate = nullptr) {
  Rng rng = make_rng(seed, "gradcheck");
  GradCheckReport rep;
  for (std::size_t k = 0; k < sizes.instances; ++k) {
    GradInstance inst = random_grad_instance(rng, sizes);
    const auto trace = forward_image(inst.params, inst.feats, inst.labels, inst.m_pos, inst.m_neg);
    HeadParams<double> analytic = backward_image(trace, inst.params, inst.feats, inst.labels);
    if constexpr (!std::is_same_v<Mutation, std::nullptr_t>) mutate(analytic);
    const auto numeric = finite_diff_grads(inst.params, inst.feats, inst.labels, inst.m_pos,
                                           inst.m_neg, sizes.step);
    const double err = max_relative_error(analytic, numeric);
    for (int y : inst.labels) (y ? rep.positive_labels : rep.negative_labels) += 1;
    if (k == 0 || err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_instance = k;
      rep.worst_n = inst.feats.rows();
      rep.worst_c = inst.params.classes();
      rep.worst_d = inst.params.dim();
    }
    ++rep.instances;
  }
  rep.passed = rep.max_rel_error < sizes.tolerance;
  return rep;
}

}  // namespace wsd
