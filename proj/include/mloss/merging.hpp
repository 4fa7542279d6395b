#pragma once

// Weight-space merging: simple averaging, task arithmetic, TIES, DARE and the
// M-Loss guided TIES variant (per-node keep rates from node discrepancy), plus
// output ensembling as the reference predictor.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mloss/errors.hpp"
#include "mloss/metric.hpp"
#include "mloss/network.hpp"
#include "mloss/random.hpp"
#include "mloss/tensor.hpp"

namespace mloss {

enum class MergeMethod { kAverage, kTaskArithmetic, kTies, kDare, kMTies, kMTiesFew };

inline std::string method_name(MergeMethod m) {
  switch (m) {
    case MergeMethod::kAverage: return "avg";
    case MergeMethod::kTaskArithmetic: return "task_arith";
    case MergeMethod::kTies: return "ties";
    case MergeMethod::kDare: return "dare";
    case MergeMethod::kMTies: return "mties";
    case MergeMethod::kMTiesFew: return "mties_few";
  }
  return "avg";
}

inline MergeMethod parse_method(std::string_view s) {
  for (MergeMethod m : {MergeMethod::kAverage, MergeMethod::kTaskArithmetic, MergeMethod::kTies,
                        MergeMethod::kDare, MergeMethod::kMTies, MergeMethod::kMTiesFew}) {
    if (s == method_name(m)) return m;
  }
  throw ParameterError("unknown merge method '" + std::string(s) + "'");
}

/// How sign-agreeing task-vector entries are combined after election.
enum class ElectMerge {
  kDisjointMean,  ///< sum of agreeing a_i v_i divided by the agreeing a-mass
  kWeightedSum,   ///< sum of agreeing a_i v_i
};

struct MergeConfig {
  MergeMethod method = MergeMethod::kTies;
  std::vector<double> alphas;  ///< empty means uniform 1/q
  double keep = 0.2;           ///< base keep rate k
  double evar = 0.1;           ///< keep-rate variation e (M-TIES)
  double lambda = 1.0;         ///< scale of the merged task vector
  std::uint64_t seed = 0;      ///< DARE masks
  std::vector<std::size_t> dynamic_layers;  ///< 0-based; Few-Layer M-TIES only
  bool normalized = false;     ///< node scores use the normalized discrepancy
  double epsilon = 1e-4;
  ElectMerge elect = ElectMerge::kDisjointMean;
  bool rescale_kept = false;   ///< M-TIES: scale kept entries by 1/keep ratio

  std::vector<double> resolved_alphas(std::size_t q) const {
    if (alphas.empty()) return std::vector<double>(q, 1.0 / static_cast<double>(q));
    return alphas;
  }

  MLossConfig mloss_config(std::size_t q) const {
    return MLossConfig{resolved_alphas(q), normalized, epsilon};
  }

  void validate(std::size_t q, std::size_t num_layers) const {
    if (q == 0) throw ParameterError("need at least one source model");
    if (!alphas.empty() && alphas.size() != q) {
      throw ShapeError(std::to_string(alphas.size()) + " merging weights for " + std::to_string(q) +
                       " models");
    }
    mloss_config(q).validate();
    if (!(keep > 0.0 && keep <= 1.0)) throw ParameterError("keep must be in (0,1]");
    if (!(evar >= 0.0 && evar < keep)) throw ParameterError("evar must be in [0, keep)");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ParameterError("lambda must be > 0");
    for (std::size_t l : dynamic_layers) {
      if (l >= num_layers) {
        throw ParameterError("dynamic layer " + std::to_string(l + 1) + " out of range 1.." +
                             std::to_string(num_layers));
      }
    }
  }
};

/// Per-layer parameter deltas of one source relative to the base.
struct LayerDelta {
  Matrix w;
  Vector b;
};

struct TaskVector {
  std::vector<LayerDelta> layers;
  std::size_t source_id = 0;
};

inline LayerDelta layer_task_vector(const ModelParams& model, const ModelParams& base, std::size_t l) {
  LayerDelta d{Matrix(base.weights[l].rows(), base.weights[l].cols()), Vector(base.biases[l].size())};
  auto mw = model.weights[l].flat();
  auto bw = base.weights[l].flat();
  auto dw = d.w.flat();
  for (std::size_t i = 0; i < dw.size(); ++i) dw[i] = mw[i] - bw[i];
  for (std::size_t i = 0; i < d.b.size(); ++i) d.b[i] = model.biases[l][i] - base.biases[l][i];
  return d;
}

inline TaskVector task_vector(const ModelParams& model, const ModelParams& base, std::size_t source_id = 0) {
  require_compatible(base, model);
  TaskVector t;
  t.source_id = source_id;
  for (std::size_t l = 0; l < base.num_layers(); ++l) t.layers.push_back(layer_task_vector(model, base, l));
  return t;
}

// ---------------------------------------------------------------------------
// Primitive stages

/// Number of entries kept out of `len` at rate `keep`: ceil(keep * len), at
/// least 1. The 1e-9 slack absorbs products like 0.7 * 10 = 7.000000000000001.
inline std::size_t keep_count(std::size_t len, double keep) {
  if (len == 0) return 0;
  const double raw = std::ceil(keep * static_cast<double>(len) - 1e-9);
  const auto n = static_cast<std::size_t>(std::max(raw, 1.0));
  return std::min(n, len);
}

/// Keeps the ceil(keep * len) largest-magnitude entries (ties to the lower index)
/// and zeroes the rest.
inline Vector trim_topk(std::span<const double> v, double keep) {
  if (!(keep > 0.0 && keep <= 1.0)) throw ParameterError("trim keep rate must be in (0,1]");
  const std::size_t n = keep_count(v.size(), keep);
  Vector out(v.size(), 0.0);
  if (n == v.size()) {
    std::copy(v.begin(), v.end(), out.begin());
    return out;
  }
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto by_magnitude = [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(v[a]);
    const double mb = std::abs(v[b]);
    return ma > mb || (ma == mb && a < b);
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(), by_magnitude);
  for (std::size_t i = 0; i < n; ++i) out[idx[i]] = v[idx[i]];
  return out;
}

inline int sign_of(double x) { return (x > 0.0) - (x < 0.0); }

/// Elects the sign of sum_i a_i v_i and combines the entries that agree with it.
/// A zero sum, or no agreeing entry, gives 0.
inline double elect_and_merge(std::span<const double> values, std::span<const double> alphas,
                              ElectMerge mode = ElectMerge::kDisjointMean) {
  if (values.size() != alphas.size()) throw ShapeError("elect_and_merge: weight count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) total += alphas[i] * values[i];
  const int s = sign_of(total);
  if (s == 0) return 0.0;
  double num = 0.0;
  double mass = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (sign_of(values[i]) == s) {
      num += alphas[i] * values[i];
      mass += alphas[i];
    }
  }
  if (mass == 0.0) return 0.0;
  return mode == ElectMerge::kDisjointMean ? num / mass : num;
}

/// Keeps each entry with probability `keep` and scales survivors by 1/keep.
inline Vector dare_prune(std::span<const double> v, double keep, Rng& rng) {
  if (!(keep > 0.0 && keep <= 1.0)) throw ParameterError("DARE keep rate must be in (0,1]");
  const double scale = 1.0 / keep;
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = rng.uniform() < keep ? v[i] * scale : 0.0;
  return out;
}

inline TaskVector dare_prune(const TaskVector& t, double keep, std::uint64_t seed) {
  TaskVector out;
  out.source_id = t.source_id;
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    Rng rng(derive_seed(seed, {t.source_id, l}));
    const LayerDelta& d = t.layers[l];
    Vector w = dare_prune(d.w.flat(), keep, rng);
    out.layers.push_back({Matrix(d.w.rows(), d.w.cols(), std::move(w)), dare_prune(d.b, keep, rng)});
  }
  return out;
}

/// Per-node keep ratios in [k - e, k]: nodes sorted by ascending score (ties by
/// index); rank r gets k - e * r / (d - 1), so lower discrepancy keeps more.
inline Vector rank_norm(std::span<const double> scores, double keep, double evar) {
  if (scores.empty()) throw DomainError("rank_norm of an empty layer");
  if (!(evar >= 0.0 && evar < keep)) throw ParameterError("rank_norm needs 0 <= e < k");
  const std::size_t d = scores.size();
  Vector ratios(d, keep);
  if (d == 1) return ratios;
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  for (std::size_t r = 0; r < d; ++r) {
    const double v = keep - evar * static_cast<double>(r) / static_cast<double>(d - 1);
    ratios[order[r]] = std::clamp(v, keep - evar, keep);  // rounding must not leave the band
  }
  return ratios;
}

/// Trims the linearly correlated parameters of node j (weight row j plus bias j) of one
/// layer's task vector at the given keep rate.
inline std::pair<Vector, double> prune_lcp_row(const Matrix& dw, const Vector& db, std::size_t j,
                                               double keep) {
  if (j >= dw.rows() || j >= db.size()) {
    throw DomainError("node " + std::to_string(j) + " out of range for layer with " +
                      std::to_string(dw.rows()) + " nodes");
  }
  Vector lcp(dw.row(j).begin(), dw.row(j).end());
  lcp.push_back(db[j]);
  Vector kept = trim_topk(lcp, keep);
  const double bias = kept.back();
  kept.pop_back();
  return {std::move(kept), bias};
}

// ---------------------------------------------------------------------------
// Layer-level building blocks shared by TIES, DARE and M-TIES

namespace detail {

/// Trims weights and bias of one layer together, as one flat tensor.
inline void trim_layer_flat(LayerDelta& d, double keep) {
  Vector flat(d.w.flat().begin(), d.w.flat().end());
  flat.insert(flat.end(), d.b.begin(), d.b.end());
  const Vector kept = trim_topk(flat, keep);
  std::copy(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(d.w.size()), d.w.flat().begin());
  std::copy(kept.begin() + static_cast<std::ptrdiff_t>(d.w.size()), kept.end(), d.b.begin());
}

inline void trim_layer_rows(LayerDelta& d, std::span<const double> ratios, bool rescale) {
  for (std::size_t j = 0; j < d.w.rows(); ++j) {
    auto [row, bias] = prune_lcp_row(d.w, d.b, j, ratios[j]);
    if (rescale) {
      const double s = 1.0 / ratios[j];
      for (double& x : row) x *= s;
      bias *= s;
    }
    std::copy(row.begin(), row.end(), d.w.row(j).begin());
    d.b[j] = bias;
  }
}

inline LayerDelta elect_layer(std::span<const LayerDelta> pruned, std::span<const double> alphas,
                              ElectMerge mode) {
  const LayerDelta& first = pruned.front();
  LayerDelta out{Matrix(first.w.rows(), first.w.cols()), Vector(first.b.size())};
  Vector values(pruned.size());
  auto dw = out.w.flat();
  for (std::size_t c = 0; c < dw.size(); ++c) {
    for (std::size_t i = 0; i < pruned.size(); ++i) values[i] = pruned[i].w.flat()[c];
    dw[c] = elect_and_merge(values, alphas, mode);
  }
  for (std::size_t c = 0; c < out.b.size(); ++c) {
    for (std::size_t i = 0; i < pruned.size(); ++i) values[i] = pruned[i].b[c];
    out.b[c] = elect_and_merge(values, alphas, mode);
  }
  return out;
}

inline void add_scaled(ModelParams& target, std::size_t l, const LayerDelta& delta, double lambda) {
  auto w = target.weights[l].flat();
  auto dw = delta.w.flat();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = w[i] + lambda * dw[i];
  for (std::size_t i = 0; i < delta.b.size(); ++i) {
    target.biases[l][i] = target.biases[l][i] + lambda * delta.b[i];
  }
}

inline void check_models(const ModelParams& base, std::span<const ModelParams> models) {
  if (models.empty()) throw ParameterError("need at least one source model");
  base.validate();
  for (const auto& m : models) {
    require_compatible(base, m);
    m.validate();
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Merging methods

/// sum_i a_i theta_i.
inline ModelParams simple_average(std::span<const ModelParams> models, std::span<const double> alphas) {
  if (models.empty()) throw ParameterError("need at least one source model");
  if (alphas.size() != models.size()) throw ShapeError("simple_average: weight count mismatch");
  for (const auto& m : models) require_compatible(models[0], m);
  ModelParams out = ModelParams::zeros(models[0].arch);
  for (std::size_t l = 0; l < out.num_layers(); ++l) {
    auto w = out.weights[l].flat();
    for (std::size_t i = 0; i < models.size(); ++i) {
      auto src = models[i].weights[l].flat();
      for (std::size_t c = 0; c < w.size(); ++c) w[c] += alphas[i] * src[c];
      for (std::size_t c = 0; c < out.biases[l].size(); ++c) {
        out.biases[l][c] += alphas[i] * models[i].biases[l][c];
      }
    }
  }
  return out;
}

/// theta_pre + sum_i (lambda / n) (theta_i - theta_pre).
inline ModelParams task_arithmetic(const ModelParams& base, std::span<const ModelParams> models,
                                   double lambda) {
  detail::check_models(base, models);
  const double scale = lambda / static_cast<double>(models.size());
  ModelParams out = base;
  for (std::size_t l = 0; l < base.num_layers(); ++l) {
    LayerDelta acc{Matrix(base.weights[l].rows(), base.weights[l].cols()), Vector(base.biases[l].size())};
    for (const auto& m : models) {
      const LayerDelta d = layer_task_vector(m, base, l);
      auto a = acc.w.flat();
      auto dw = d.w.flat();
      for (std::size_t c = 0; c < a.size(); ++c) a[c] += scale * dw[c];
      for (std::size_t c = 0; c < acc.b.size(); ++c) acc.b[c] += scale * d.b[c];
    }
    detail::add_scaled(out, l, acc, 1.0);
  }
  return out;
}

/// Trim every task vector per layer (weights and bias as one tensor) at rate
/// cfg.keep, elect signs, merge, add lambda times the result to the base.
inline ModelParams ties_merge(const ModelParams& base, std::span<const ModelParams> models,
                              const MergeConfig& cfg) {
  detail::check_models(base, models);
  cfg.validate(models.size(), base.num_layers());
  const auto alphas = cfg.resolved_alphas(models.size());
  ModelParams out = base;
  std::vector<LayerDelta> pruned(models.size());
  for (std::size_t l = 0; l < base.num_layers(); ++l) {
    for (std::size_t i = 0; i < models.size(); ++i) {
      pruned[i] = layer_task_vector(models[i], base, l);
      detail::trim_layer_flat(pruned[i], cfg.keep);
    }
    detail::add_scaled(out, l, detail::elect_layer(pruned, alphas, cfg.elect), cfg.lambda);
  }
  return out;
}

/// TIES with the magnitude trim replaced by DARE's random keep-and-rescale.
inline ModelParams dare_merge(const ModelParams& base, std::span<const ModelParams> models,
                              const MergeConfig& cfg) {
  detail::check_models(base, models);
  cfg.validate(models.size(), base.num_layers());
  const auto alphas = cfg.resolved_alphas(models.size());
  std::vector<TaskVector> pruned;
  for (std::size_t i = 0; i < models.size(); ++i) {
    pruned.push_back(dare_prune(task_vector(models[i], base, i), cfg.keep, cfg.seed));
  }
  ModelParams out = base;
  std::vector<LayerDelta> layer(models.size());
  for (std::size_t l = 0; l < base.num_layers(); ++l) {
    for (std::size_t i = 0; i < models.size(); ++i) layer[i] = pruned[i].layers[l];
    detail::add_scaled(out, l, detail::elect_layer(layer, alphas, cfg.elect), cfg.lambda);
  }
  return out;
}

/// What M-TIES saw per layer: node scores and keep ratios (empty for layers
/// trimmed flat).
struct MergeTrace {
  std::vector<Vector> node_scores;
  std::vector<Vector> keep_ratios;
};

/// M-TIES restricted to `dynamic_layers`; every other layer is trimmed as in TIES.
///
/// Layers are merged in order. For a dynamic hidden layer the node scores are
/// computed on `batch` with all sources sharing the already merged prefix,
/// rank-normalized into [keep - evar, keep] and used to trim each node's weight
/// row and bias. After merging, the layer is copied into every source. The
/// output layer has no activation and is always trimmed flat, and so is every
/// layer when evar == 0 (no variation to schedule).
inline ModelParams few_layer_mties(const ModelParams& base, std::span<const ModelParams> models,
                                   const MergeConfig& cfg, const Matrix& batch,
                                   MergeTrace* trace = nullptr) {
  detail::check_models(base, models);
  cfg.validate(models.size(), base.num_layers());
  if (cfg.dynamic_layers.empty()) throw ParameterError("few-layer M-TIES needs at least one dynamic layer");
  if (batch.rows() == 0) throw DomainError("M-TIES needs a non-empty unlabeled batch");
  if (batch.cols() != base.arch.input_dim) throw ShapeError("unlabeled batch width does not match input dim");

  const auto alphas = cfg.resolved_alphas(models.size());
  const MLossConfig mcfg = cfg.mloss_config(models.size());
  const std::set<std::size_t> dynamic(cfg.dynamic_layers.begin(), cfg.dynamic_layers.end());

  ModelParams merged = base;
  std::vector<ModelParams> sources(models.begin(), models.end());
  std::vector<LayerDelta> pruned(models.size());
  if (trace) *trace = MergeTrace{std::vector<Vector>(base.num_layers()), std::vector<Vector>(base.num_layers())};

  for (std::size_t l = 0; l < base.num_layers(); ++l) {
    for (std::size_t i = 0; i < sources.size(); ++i) pruned[i] = layer_task_vector(sources[i], merged, l);

    if (cfg.evar > 0.0 && base.arch.has_activation(l) && dynamic.count(l)) {
      const Vector scores = batch_node_mloss(merged, sources, l, batch, mcfg);
      const Vector ratios = rank_norm(scores, cfg.keep, cfg.evar);
      for (auto& d : pruned) detail::trim_layer_rows(d, ratios, cfg.rescale_kept);
      if (trace) {
        trace->node_scores[l] = scores;
        trace->keep_ratios[l] = ratios;
      }
    } else {
      for (auto& d : pruned) detail::trim_layer_flat(d, cfg.keep);
    }

    detail::add_scaled(merged, l, detail::elect_layer(pruned, alphas, cfg.elect), cfg.lambda);
    for (auto& s : sources) {
      s.weights[l] = merged.weights[l];
      s.biases[l] = merged.biases[l];
    }
  }
  return merged;
}

inline ModelParams mties_merge(const ModelParams& base, std::span<const ModelParams> models,
                               const MergeConfig& cfg, const Matrix& batch,
                               MergeTrace* trace = nullptr) {
  MergeConfig all = cfg;
  all.dynamic_layers.resize(base.num_layers());
  std::iota(all.dynamic_layers.begin(), all.dynamic_layers.end(), std::size_t{0});
  return few_layer_mties(base, models, all, batch, trace);
}

/// sum_i a_i f_i(x).
inline Vector ensemble_predict(std::span<const ModelParams> models, std::span<const double> alphas,
                               std::span<const double> x) {
  if (models.empty()) throw ParameterError("need at least one model to ensemble");
  if (alphas.size() != models.size()) throw ShapeError("ensemble_predict: weight count mismatch");
  for (const auto& m : models) require_compatible(models[0], m);
  Vector out(models[0].arch.output_dim, 0.0);
  for (std::size_t i = 0; i < models.size(); ++i) {
    const Vector y = forward(models[i], x);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += alphas[i] * y[c];
  }
  return out;
}

/// Dispatches on cfg.method. `batch` is only read by the M-TIES variants.
inline ModelParams merge(const ModelParams& base, std::span<const ModelParams> models,
                         const MergeConfig& cfg, const Matrix& batch = {}) {
  switch (cfg.method) {
    case MergeMethod::kAverage: {
      detail::check_models(base, models);
      cfg.validate(models.size(), base.num_layers());
      return simple_average(models, cfg.resolved_alphas(models.size()));
    }
    case MergeMethod::kTaskArithmetic:
      cfg.validate(models.size(), base.num_layers());
      return task_arithmetic(base, models, cfg.lambda);
    case MergeMethod::kTies:
      return ties_merge(base, models, cfg);
    case MergeMethod::kDare:
      return dare_merge(base, models, cfg);
    case MergeMethod::kMTies:
      return mties_merge(base, models, cfg, batch);
    case MergeMethod::kMTiesFew:
      return few_layer_mties(base, models, cfg, batch);
  }
  throw ParameterError("unknown merge method");
}

}  // namespace mloss
