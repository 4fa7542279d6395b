#pragma once

// Merging-ensembling discrepancy at node and layer level.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mloss/activation.hpp"
#include "mloss/errors.hpp"
#include "mloss/network.hpp"
#include "mloss/tensor.hpp"

namespace mloss {

struct MLossConfig {
  std::vector<double> weights;  ///< merging weights, one per source
  bool normalized = false;
  double epsilon = 1e-4;

  static MLossConfig uniform(std::size_t q, bool normalized = false, double epsilon = 1e-4) {
    if (q == 0) throw ParameterError("need at least one source model");
    return {std::vector<double>(q, 1.0 / static_cast<double>(q)), normalized, epsilon};
  }

  void validate() const {
    if (weights.empty()) throw ParameterError("need at least one merging weight");
    double sum = 0.0;
    for (double a : weights) {
      if (!(a >= 0.0) || !std::isfinite(a)) throw ParameterError("merging weights must be >= 0");
      sum += a;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      throw ParameterError("merging weights must sum to 1, got " + std::to_string(sum));
    }
    if (!(epsilon > 0.0)) throw ParameterError("epsilon must be > 0");
  }
};

/// |act(sum_p a_p h_p) - sum_p a_p act(h_p)|, optionally divided by |act(sum_p a_p h_p)| + eps.
inline double node_mloss(std::span<const double> h, const MLossConfig& cfg, const Activation& act) {
  if (h.size() != cfg.weights.size()) {
    throw ShapeError("node_mloss: " + std::to_string(h.size()) + " pre-activations but " +
                     std::to_string(cfg.weights.size()) + " weights");
  }
  double merged = 0.0;
  double ensembled = 0.0;
  for (std::size_t p = 0; p < h.size(); ++p) {
    merged += cfg.weights[p] * h[p];
    ensembled += cfg.weights[p] * apply_activation(act, h[p]);
  }
  const double merged_act = apply_activation(act, merged);
  const double gap = std::abs(merged_act - ensembled);
  return cfg.normalized ? gap / (std::abs(merged_act) + cfg.epsilon) : gap;
}

/// sqrt of the summed squared (plain) node scores.
inline double layer_mloss(std::span<const double> node_scores) {
  if (node_scores.empty()) throw DomainError("layer_mloss of an empty layer");
  return l2_norm(node_scores);
}

/// Layer discrepancy computed on whole vectors: ||act(a.h) - a.act(h)||_2, or the
/// normalized variant ||...|| / (||act(a.h)||_2 + eps). `h[p]` is source p's pre-activation.
inline double layer_mloss_direct(std::span<const Vector> h, const MLossConfig& cfg,
                                 const Activation& act) {
  if (h.size() != cfg.weights.size()) throw ShapeError("layer_mloss_direct: weight count mismatch");
  if (h.empty() || h[0].empty()) throw DomainError("layer_mloss_direct of an empty layer");
  const std::size_t d = h[0].size();
  Vector merged_act(d), gap(d);
  for (std::size_t i = 0; i < d; ++i) {
    double merged = 0.0;
    double ensembled = 0.0;
    for (std::size_t p = 0; p < h.size(); ++p) {
      merged += cfg.weights[p] * h[p][i];
      ensembled += cfg.weights[p] * apply_activation(act, h[p][i]);
    }
    merged_act[i] = apply_activation(act, merged);
    gap[i] = merged_act[i] - ensembled;
  }
  const double num = l2_norm(gap);
  return cfg.normalized ? num / (l2_norm(merged_act) + cfg.epsilon) : num;
}

/// Activation that governs node scores at `layer`; the output layer has none.
inline Activation layer_activation(const Architecture& arch, std::size_t layer) {
  return arch.has_activation(layer) ? arch.activation : Activation::identity();
}

/// Node scores at `layer` (0-based) averaged over the batch, with sources
/// synchronized through layer - 1. Used to drive the keep-rate schedule.
inline Vector batch_node_mloss(const ModelParams& merged_prefix, std::span<const ModelParams> sources,
                               std::size_t layer, const Matrix& batch, const MLossConfig& cfg) {
  if (batch.rows() == 0) throw DomainError("batch_node_mloss: empty batch");
  cfg.validate();
  if (cfg.weights.size() != sources.size()) {
    throw ShapeError("batch_node_mloss: " + std::to_string(sources.size()) + " sources but " +
                     std::to_string(cfg.weights.size()) + " weights");
  }
  const auto pre = shared_prefix_preactivations(merged_prefix, sources, layer, batch);
  const Activation act = layer_activation(merged_prefix.arch, layer);
  const std::size_t d = merged_prefix.arch.layer_out(layer);
  const std::size_t n = batch.rows();

  Vector scores(d);
  Vector h(sources.size());
  Vector per_row(n);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t p = 0; p < sources.size(); ++p) h[p] = pre[p](r, i);
      per_row[r] = node_mloss(h, cfg, act);
    }
    scores[i] = pairwise_sum(per_row) / static_cast<double>(n);
  }
  return scores;
}

/// Batch-averaged node and layer scores for the hidden layers of a set of sources.
/// Layer scores are the mean of per-sample layer scores.
struct MLossReport {
  std::vector<Vector> per_layer;  ///< per_layer[l][i]: node i of hidden layer l
  Vector layer_scores;
  bool normalized = false;
  std::size_t sample_count = 0;
};

/// Each source runs its own full forward pass (no synchronization).
inline MLossReport compute_report(std::span<const ModelParams> sources, const Matrix& batch,
                                  const MLossConfig& cfg) {
  if (sources.empty()) throw ParameterError("compute_report: no source models");
  if (batch.rows() == 0) throw DomainError("compute_report: empty batch");
  cfg.validate();
  if (cfg.weights.size() != sources.size()) throw ShapeError("compute_report: weight count mismatch");
  for (const auto& s : sources) require_compatible(sources[0], s);

  const Architecture& arch = sources[0].arch;
  const std::size_t hidden = arch.hidden_dims.size();
  const std::size_t n = batch.rows();

  // samples[l][i][r] and layer_samples[l][r], reduced pairwise at the end.
  std::vector<std::vector<Vector>> samples(hidden);
  std::vector<Vector> layer_samples(hidden, Vector(n));
  for (std::size_t l = 0; l < hidden; ++l) samples[l].assign(arch.hidden_dims[l], Vector(n));

  std::vector<ActivationTrace> traces(sources.size());
  std::vector<Vector> h(sources.size());
  Vector node_h(sources.size());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t p = 0; p < sources.size(); ++p) traces[p] = forward_trace(sources[p], batch.row(r));
    for (std::size_t l = 0; l < hidden; ++l) {
      for (std::size_t p = 0; p < sources.size(); ++p) h[p] = traces[p].pre[l];
      for (std::size_t i = 0; i < arch.hidden_dims[l]; ++i) {
        for (std::size_t p = 0; p < sources.size(); ++p) node_h[p] = h[p][i];
        samples[l][i][r] = node_mloss(node_h, cfg, arch.activation);
      }
      layer_samples[l][r] = layer_mloss_direct(h, cfg, arch.activation);
    }
  }

  MLossReport report;
  report.normalized = cfg.normalized;
  report.sample_count = n;
  for (std::size_t l = 0; l < hidden; ++l) {
    Vector nodes(arch.hidden_dims[l]);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      nodes[i] = pairwise_sum(samples[l][i]) / static_cast<double>(n);
    }
    report.per_layer.push_back(std::move(nodes));
    report.layer_scores.push_back(pairwise_sum(layer_samples[l]) / static_cast<double>(n));
  }
  return report;
}

/// Means of consecutive groups of `group_size` node scores per layer; a ragged
/// final group averages whatever remains.
inline std::vector<Vector> heatmap_groups(std::span<const Vector> per_layer, std::size_t group_size) {
  if (group_size == 0) throw ParameterError("group size must be >= 1");
  std::vector<Vector> out;
  out.reserve(per_layer.size());
  for (const Vector& scores : per_layer) {
    Vector groups;
    for (std::size_t start = 0; start < scores.size(); start += group_size) {
      const std::size_t len = std::min(group_size, scores.size() - start);
      groups.push_back(pairwise_sum(std::span<const double>(scores).subspan(start, len)) /
                       static_cast<double>(len));
    }
    out.push_back(std::move(groups));
  }
  return out;
}

inline std::vector<Vector> heatmap_groups(const MLossReport& report, std::size_t group_size) {
  return heatmap_groups(std::span<const Vector>(report.per_layer), group_size);
}

}  // namespace mloss
