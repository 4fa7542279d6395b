#pragma once

// Closed-form expected node discrepancy for two fine-tuned copies of a
// pre-activation, and the Monte-Carlo and quadrature routines that check it.
//
// Model: x ~ U(-k, k) is the pretrained pre-activation, a, b ~ N(x, sigma^2)
// are two fine-tuned pre-activations, D = |f((a+b)/2) - (f(a)+f(b))/2|.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "mloss/activation.hpp"
#include "mloss/errors.hpp"
#include "mloss/random.hpp"

namespace mloss {

struct TheoryParams {
  Activation activation = Activation::relu();
  double sigma = 0.1;  ///< fine-tune perturbation std
  double k = 10.0;     ///< half-range of the pretrained pre-activation

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ParameterError("sigma must be > 0");
    if (!(k > 0.0) || !std::isfinite(k)) throw ParameterError("k must be > 0");
  }
  double ratio() const { return k / sigma; }
};

struct MCSettings {
  std::uint64_t samples = 1'000'000;
  std::uint64_t seed = 42;
  double window = 8.0;  ///< importance window multiplier c
  bool importance = true;

  void validate() const {
    if (samples == 0) throw ParameterError("Monte-Carlo needs at least one sample");
    if (importance && !(window >= 4.0)) throw ParameterError("importance window c must be >= 4");
  }
};

/// sigma^2/(sqrt2 pi k) for ReLU, (1-slope) times that for LeakyReLU, sigma^2/(4k) for GELU.
/// The formulas are small-sigma approximations, meaningful for k >> sigma.
inline double expected_mloss_analytic(const TheoryParams& p) {
  p.validate();
  const double relu_like = p.sigma * p.sigma / (std::numbers::sqrt2 * std::numbers::pi * p.k);
  switch (p.activation.type) {
    case ActivationType::kReLU:
      return (1.0 - 0.0) * relu_like;
    case ActivationType::kLeakyReLU:
      return (1.0 - p.activation.slope) * relu_like;
    case ActivationType::kGELU:
      return p.sigma * p.sigma / (4.0 * p.k);
    case ActivationType::kIdentity:
      break;
  }
  throw UnsupportedActivation("no closed form for activation '" + activation_name(p.activation) + "'");
}

/// Half-width of the importance-sampling window for x. D vanishes once a and b
/// cannot straddle the kink (|x| >> sigma) for the piecewise-linear activations;
/// GELU curvature lives on a unit scale, so its window is c * max(sigma, 1).
inline double importance_half_width(const TheoryParams& p, const MCSettings& s) {
  if (p.activation.type == ActivationType::kGELU) return s.window * std::max(p.sigma, 1.0);
  return s.window * p.sigma;
}

struct MCResult {
  double estimate = 0.0;
  double std_error = 0.0;
  double half_width = 0.0;  ///< sampling range of x actually used
  bool importance = false;
};

namespace detail {

struct RunningStats {
  std::uint64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void push(double v) {
    ++n;
    const double delta = v - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (v - mean);
  }

  void merge(const RunningStats& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    const double total = static_cast<double>(n + o.n);
    const double delta = o.mean - mean;
    mean += delta * static_cast<double>(o.n) / total;
    m2 += o.m2 + delta * delta * static_cast<double>(n) * static_cast<double>(o.n) / total;
    n += o.n;
  }
};

inline constexpr std::uint64_t kMcShards = 16;

}  // namespace detail

/// Monte-Carlo estimate of E[D] with its standard error.
///
/// With importance sampling, x is drawn from U(-w, w) and the sample mean is
/// scaled by w / k. The draws are split into a fixed number of shards with
/// seeds derived from (seed, shard) and the shard statistics are merged in
/// shard order, so the result depends only on the settings.
inline MCResult mc_expected_mloss(const TheoryParams& p, const MCSettings& s) {
  p.validate();
  s.validate();
  double w = p.k;
  if (s.importance) {
    w = importance_half_width(p, s);
    if (w > p.k) {
      throw ParameterError("importance window " + std::to_string(w) + " exceeds k = " +
                           std::to_string(p.k));
    }
  }
  const Activation& act = p.activation;
  detail::RunningStats total;
  for (std::uint64_t shard = 0; shard < detail::kMcShards; ++shard) {
    std::uint64_t count = s.samples / detail::kMcShards;
    if (shard < s.samples % detail::kMcShards) ++count;
    Rng rng(derive_seed(s.seed, {shard}));
    detail::RunningStats st;
    for (std::uint64_t i = 0; i < count; ++i) {
      const double x = -w + 2.0 * w * rng.uniform();
      const auto [na, nb] = rng.normal_pair();
      const double a = x + p.sigma * na;
      const double b = x + p.sigma * nb;
      const double merged = 0.5 * a + 0.5 * b;
      const double ensembled = 0.5 * apply_activation(act, a) + 0.5 * apply_activation(act, b);
      st.push(std::abs(apply_activation(act, merged) - ensembled));
    }
    total.merge(st);
  }
  const double scale = w / p.k;
  MCResult r;
  r.half_width = w;
  r.importance = s.importance;
  r.estimate = scale * total.mean;
  const double var = total.n > 1 ? total.m2 / static_cast<double>(total.n - 1) : 0.0;
  r.std_error = scale * std::sqrt(var / static_cast<double>(total.n));
  return r;
}

inline double phi_product_integrand(double u) { return normal_cdf(u) * normal_cdf(-u); }

/// Composite Simpson of Phi(u) Phi(-u) over [-12, 12] with `intervals`
/// subintervals (rounded up to even). The exact value over the real line is 1/sqrt(pi).
inline double phi_product_integral(std::size_t intervals) {
  if (intervals < 2) throw ParameterError("quadrature needs at least 2 intervals");
  const std::size_t n = intervals + (intervals % 2);
  const double lo = -12.0;
  const double hi = 12.0;
  const double h = (hi - lo) / static_cast<double>(n);
  double odd = 0.0;
  double even = 0.0;
  for (std::size_t i = 1; i < n; ++i) {
    const double v = phi_product_integrand(lo + h * static_cast<double>(i));
    (i % 2 ? odd : even) += v;
  }
  return h / 3.0 * (phi_product_integrand(lo) + 4.0 * odd + 2.0 * even + phi_product_integrand(hi));
}

/// |estimate - reference| / |reference|; 0 when both are 0, inf when only the reference is.
inline double relative_error(double estimate, double reference) {
  if (reference == 0.0) return estimate == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::abs(estimate - reference) / std::abs(reference);
}

struct SweepRow {
  double sigma = 0.0;
  double k = 0.0;
  double ratio = 0.0;
  double analytic = 0.0;
  double mc = 0.0;
  double std_error = 0.0;
  double rel_err = 0.0;  ///< |mc - analytic| / analytic
  bool importance = false;
};

/// One row per (sigma, k) cell. Cells whose importance window would not fit
/// inside [-k, k] are sampled plainly over the full range instead.
inline std::vector<SweepRow> theory_sweep(std::span<const std::pair<double, double>> grid,
                                          const Activation& act, const MCSettings& s) {
  std::vector<SweepRow> rows;
  rows.reserve(grid.size());
  for (const auto& [sigma, k] : grid) {
    TheoryParams p{act, sigma, k};
    MCSettings cell = s;
    if (cell.importance && importance_half_width(p, cell) > k) cell.importance = false;
    SweepRow row;
    row.sigma = sigma;
    row.k = k;
    row.ratio = p.ratio();
    row.analytic = expected_mloss_analytic(p);
    const MCResult mc = mc_expected_mloss(p, cell);
    row.mc = mc.estimate;
    row.std_error = mc.std_error;
    row.importance = cell.importance;
    row.rel_err = relative_error(mc.estimate, row.analytic);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mloss
