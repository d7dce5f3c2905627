#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wsd/errors.hpp"
#include "wsd/matrix.hpp"

namespace wsd {

/// Image-level labels, one 0/1 entry per class.
using LabelVector = std::vector<int>;

/// h(i, c) == 1 when region i is selected for training class c.
using SelectionMask = Matrix<std::uint8_t>;

inline constexpr double kDefaultEpsilon = 1e-12;

/// Parameters of the two linear branches: classification (softmax over
/// classes) and importance (masked softmax over regions).
template <typename T>
struct HeadParams {
  Matrix<T> w_cls;
  std::vector<T> b_cls;
  Matrix<T> w_imp;
  std::vector<T> b_imp;

  static HeadParams zeros(std::size_t classes, std::size_t dim) {
    return {Matrix<T>(classes, dim), std::vector<T>(classes), Matrix<T>(classes, dim),
            std::vector<T>(classes)};
  }

  std::size_t classes() const { return w_cls.rows(); }
  std::size_t dim() const { return w_cls.cols(); }
  std::size_t num_values() const { return 2 * (w_cls.size() + b_cls.size()); }

  /// The four parameter blocks in storage order: w_cls, b_cls, w_imp, b_imp.
  std::array<std::span<T>, 4> blocks() {
    return {w_cls.flat(), std::span<T>(b_cls), w_imp.flat(), std::span<T>(b_imp)};
  }
  std::array<std::span<const T>, 4> blocks() const {
    return {w_cls.flat(), std::span<const T>(b_cls), w_imp.flat(), std::span<const T>(b_imp)};
  }

  bool same_shape(const HeadParams& o) const {
    return w_cls.same_shape(o.w_cls) && w_imp.same_shape(o.w_imp) &&
           b_cls.size() == o.b_cls.size() && b_imp.size() == o.b_imp.size();
  }

  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

/// Intermediates of one image's forward pass.
template <typename T>
struct ForwardTrace {
  Matrix<T> logits_cls;  // N x C
  Matrix<T> p;           // N x C, rows sum to one
  Matrix<T> logits_imp;  // N x C
  SelectionMask h;       // N x C
  Matrix<T> v;           // N x C, selected entries of each column sum to one
  std::vector<T> f_raw;  // aggregated scores before clamping
  std::vector<T> f;      // clamped to [eps, 1 - eps]
  T loss{};
  T epsilon{};
};

namespace detail {

template <typename T>
void check_head_shapes(const HeadParams<T>& params, const Matrix<T>& feats, const LabelVector& y) {
  const std::size_t c = params.classes(), d = params.dim();
  if (c == 0 || d == 0) throw InputError("head parameters must have C >= 1 and D >= 1");
  if (params.b_cls.size() != c || params.b_imp.size() != c || params.w_imp.rows() != c ||
      params.w_imp.cols() != d) {
    throw InputError("inconsistent head parameter block shapes");
  }
  if (feats.rows() == 0) throw InputError("an image needs at least one region");
  if (feats.cols() != d) {
    throw InputError("feature dimension " + std::to_string(feats.cols()) +
                     " does not match head dimension " + std::to_string(d));
  }
  if (y.size() != c) {
    throw InputError("label vector has " + std::to_string(y.size()) + " entries, expected " +
                     std::to_string(c));
  }
}

/// out = feats * W^T + b; a non-finite result is a numerical failure.
template <typename T>
Matrix<T> linear(const Matrix<T>& feats, const Matrix<T>& w, const std::vector<T>& b) {
  Matrix<T> out(feats.rows(), w.rows());
  for (std::size_t i = 0; i < feats.rows(); ++i) {
    const auto x = feats.row(i);
    for (std::size_t c = 0; c < w.rows(); ++c) {
      const auto wc = w.row(c);
      T acc = b[c];
      for (std::size_t k = 0; k < x.size(); ++k) acc += wc[k] * x[k];
      if (!std::isfinite(acc)) {
        throw NumericalError("non-finite logit at region " + std::to_string(i) + ", class " + std::to_string(c));
      }
      out(i, c) = acc;
    }
  }
  return out;
}

}  // namespace detail

/// Row-wise softmax, stabilized by subtracting the row maximum.
template <typename T>
Matrix<T> class_softmax(const Matrix<T>& logits) {
  Matrix<T> p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto z = logits.row(i);
    const T zmax = *std::max_element(z.begin(), z.end());
    T sum{};
    for (std::size_t c = 0; c < z.size(); ++c) {
      p(i, c) = std::exp(z[c] - zmax);
      sum += p(i, c);
    }
    for (std::size_t c = 0; c < z.size(); ++c) p(i, c) /= sum;
  }
  return p;
}

/// Per class, marks the min(N, budget) regions with the highest p, where the
/// budget is M_p for positive labels and M_n otherwise. Ties go to the lower
/// region index.
template <typename T>
SelectionMask select_regions(const Matrix<T>& p, const LabelVector& y, std::size_t m_pos,
                             std::size_t m_neg) {
  if (m_pos < 1 || m_neg < 1) throw InputError("selection budgets must be >= 1");
  if (y.size() != p.cols()) throw InputError("label vector does not match class count");
  const std::size_t n = p.rows();
  SelectionMask h(n, p.cols(), 0);
  std::vector<std::size_t> order(n);
  for (std::size_t c = 0; c < p.cols(); ++c) {
    const std::size_t budget = std::min(n, y[c] ? m_pos : m_neg);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return p(a, c) > p(b, c); });
    for (std::size_t k = 0; k < budget; ++k) h(order[k], c) = 1;
  }
  return h;
}

/// Softmax over the entries with mask 1; masked entries are exactly zero.
template <typename T>
std::vector<T> masked_softmax(std::span<const T> logits, std::span<const std::uint8_t> mask) {
  if (logits.size() != mask.size()) throw InputError("masked_softmax: size mismatch");
  T zmax = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i]) {
      zmax = std::max(zmax, logits[i]);
      any = true;
    }
  }
  if (!any) throw InputError("masked_softmax: mask selects no region");
  std::vector<T> v(logits.size(), T{});
  T sum{};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i]) {
      v[i] = std::exp(logits[i] - zmax);
      sum += v[i];
    }
  }
  for (T& x : v) x /= sum;
  return v;
}

/// Importance-weighted sum of region probabilities, clamped to [eps, 1 - eps].
template <typename T>
T aggregate(std::span<const T> v, std::span<const T> p, T epsilon = T(kDefaultEpsilon)) {
  if (v.size() != p.size()) throw InputError("aggregate: size mismatch");
  T s{};
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * p[i];
  return std::clamp(s, epsilon, T(1) - epsilon);
}

/// Summed per-class binary cross entropy of the image-level scores.
template <typename T>
T image_loss(const LabelVector& y, std::span<const T> f) {
  if (y.size() != f.size()) throw InputError("image_loss: size mismatch");
  T loss{};
  for (std::size_t c = 0; c < y.size(); ++c) {
    loss -= y[c] ? std::log(f[c]) : std::log(T(1) - f[c]);
  }
  return loss;
}

/// Forward pass with a fixed selection mask.
template <typename T>
ForwardTrace<T> forward_with_mask(const HeadParams<T>& params, const Matrix<T>& feats,
                                  const LabelVector& y, const SelectionMask& h,
                                  T epsilon = T(kDefaultEpsilon)) {
  detail::check_head_shapes(params, feats, y);
  if (h.rows() != feats.rows() || h.cols() != params.classes()) {
    throw InputError("selection mask shape does not match regions x classes");
  }
  const std::size_t n = feats.rows(), classes = params.classes();
  ForwardTrace<T> t;
  t.epsilon = epsilon;
  t.logits_cls = detail::linear(feats, params.w_cls, params.b_cls);
  t.p = class_softmax(t.logits_cls);
  t.logits_imp = detail::linear(feats, params.w_imp, params.b_imp);
  t.h = h;
  t.v = Matrix<T>(n, classes);
  t.f_raw.assign(classes, T{});
  t.f.assign(classes, T{});
  std::vector<T> col(n);
  std::vector<std::uint8_t> mcol(n);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = t.logits_imp(i, c);
      mcol[i] = h(i, c);
    }
    const std::vector<T> vc = masked_softmax<T>(col, mcol);
    T s{};
    for (std::size_t i = 0; i < n; ++i) {
      t.v(i, c) = vc[i];
      s += vc[i] * t.p(i, c);
    }
    t.f_raw[c] = s;
    t.f[c] = std::clamp(s, epsilon, T(1) - epsilon);
  }
  t.loss = image_loss<T>(y, t.f);
  return t;
}

/// Full forward pass: both branches, class-specific top-M selection,
/// masked-softmax weighting, aggregation and loss.
template <typename T>
ForwardTrace<T> forward_image(const HeadParams<T>& params, const Matrix<T>& feats,
                              const LabelVector& y, std::size_t m_pos, std::size_t m_neg,
                              T epsilon = T(kDefaultEpsilon)) {
  detail::check_head_shapes(params, feats, y);
  const Matrix<T> p = class_softmax(detail::linear(feats, params.w_cls, params.b_cls));
  return forward_with_mask(params, feats, y, select_regions(p, y, m_pos, m_neg), epsilon);
}

/// Exact gradient of trace.loss. The selection mask is held constant and a
/// saturated clamp on f passes no gradient. Regions unselected for every
/// class are skipped entirely.
template <typename T>
HeadParams<T> backward_image(const ForwardTrace<T>& trace, const HeadParams<T>& params,
                             const Matrix<T>& feats, const LabelVector& y) {
  detail::check_head_shapes(params, feats, y);
  const std::size_t n = feats.rows(), classes = params.classes(), dim = params.dim();
  if (trace.p.rows() != n || trace.p.cols() != classes) {
    throw InputError("forward trace does not match the given inputs");
  }

  std::vector<T> dl_df(classes, T{});
  for (std::size_t c = 0; c < classes; ++c) {
    const T fr = trace.f_raw[c];
    if (fr < trace.epsilon || fr > T(1) - trace.epsilon) continue;
    dl_df[c] = y[c] ? -T(1) / fr : T(1) / (T(1) - fr);
  }

  HeadParams<T> g = HeadParams<T>::zeros(classes, dim);
  std::vector<T> dz_cls(classes), dz_imp(classes);
  for (std::size_t i = 0; i < n; ++i) {
    bool selected = false;
    for (std::size_t c = 0; c < classes; ++c) selected = selected || trace.h(i, c);
    if (!selected) continue;

    // dL/dp(i,c) = dL/df_c * v(i,c); softmax Jacobian over classes.
    T dot{};
    for (std::size_t c = 0; c < classes; ++c) dot += trace.p(i, c) * dl_df[c] * trace.v(i, c);
    for (std::size_t c = 0; c < classes; ++c) {
      dz_cls[c] = trace.p(i, c) * (dl_df[c] * trace.v(i, c) - dot);
      // Masked softmax over regions: dL/dphi = dL/df * v * (p - f_raw).
      dz_imp[c] = trace.h(i, c) ? dl_df[c] * trace.v(i, c) * (trace.p(i, c) - trace.f_raw[c])
                                : T{};
    }

    const auto x = feats.row(i);
    for (std::size_t c = 0; c < classes; ++c) {
      g.b_cls[c] += dz_cls[c];
      g.b_imp[c] += dz_imp[c];
      auto wc = g.w_cls.row(c);
      auto wi = g.w_imp.row(c);
      for (std::size_t k = 0; k < dim; ++k) {
        wc[k] += dz_cls[c] * x[k];
        wi[k] += dz_imp[c] * x[k];
      }
    }
  }
  return g;
}

}  // namespace wsd
