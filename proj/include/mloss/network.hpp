#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mloss/activation.hpp"
#include "mloss/errors.hpp"
#include "mloss/random.hpp"
#include "mloss/tensor.hpp"

namespace mloss {

/// Layer sizes m0 (input), m1..mL (hidden) and m_{L+1} (output). There are
/// L + 1 affine layers; the activation follows every layer except the last.
struct Architecture {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 1;
  Activation activation;

  std::size_t num_layers() const noexcept { return hidden_dims.size() + 1; }

  std::size_t layer_in(std::size_t l) const { return l == 0 ? input_dim : hidden_dims[l - 1]; }
  std::size_t layer_out(std::size_t l) const {
    return l < hidden_dims.size() ? hidden_dims[l] : output_dim;
  }
  bool has_activation(std::size_t l) const noexcept { return l < hidden_dims.size(); }

  void validate() const {
    if (hidden_dims.empty()) throw ShapeError("architecture needs at least one hidden layer");
    if (input_dim == 0 || output_dim == 0) throw ShapeError("architecture dims must be >= 1");
    for (std::size_t d : hidden_dims) {
      if (d == 0) throw ShapeError("architecture dims must be >= 1");
    }
  }

  bool operator==(const Architecture&) const = default;
};

/// Weights and biases of a feedforward network; layer l maps layer_in(l) -> layer_out(l).
struct ModelParams {
  Architecture arch;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static ModelParams zeros(const Architecture& arch) {
    arch.validate();
    ModelParams m;
    m.arch = arch;
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
      m.weights.emplace_back(arch.layer_out(l), arch.layer_in(l));
      m.biases.emplace_back(arch.layer_out(l), 0.0);
    }
    return m;
  }

  std::size_t num_layers() const noexcept { return weights.size(); }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  /// Throws ShapeError naming the first offending layer.
  void validate() const {
    arch.validate();
    if (weights.size() != arch.num_layers() || biases.size() != arch.num_layers()) {
      throw ShapeError("model has " + std::to_string(weights.size()) + " weight and " +
                       std::to_string(biases.size()) + " bias tensors, architecture needs " +
                       std::to_string(arch.num_layers()));
    }
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != arch.layer_out(l) || weights[l].cols() != arch.layer_in(l) ||
          biases[l].size() != arch.layer_out(l)) {
        throw ShapeError("layer " + std::to_string(l + 1) + " shape does not match architecture");
      }
    }
  }

  bool operator==(const ModelParams&) const = default;
};

inline void require_compatible(const ModelParams& a, const ModelParams& b) {
  if (!(a.arch == b.arch)) throw ShapeError("models are not merge-compatible: architectures differ");
}

inline bool layer_equal(const ModelParams& a, const ModelParams& b, std::size_t l) {
  return a.weights[l] == b.weights[l] && a.biases[l] == b.biases[l];
}

/// Gaussian init with std gain / sqrt(fan_in), biases zero.
inline ModelParams init_model(const Architecture& arch, std::uint64_t seed, double gain = 1.0) {
  ModelParams m = ModelParams::zeros(arch);
  Rng rng(seed);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const double scale = gain / std::sqrt(static_cast<double>(arch.layer_in(l)));
    for (double& w : m.weights[l].flat()) w = scale * rng.normal();
  }
  return m;
}

/// Pre-activations h^1..h^{L+1} and post-activations x_1..x_L for one input.
struct ActivationTrace {
  Vector input;
  std::vector<Vector> pre;
  std::vector<Vector> post;
};

/// h = W x + b, row by row with dot() then the bias.
inline Vector affine(const Matrix& w, const Vector& b, std::span<const double> x) {
  Vector h(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) h[i] = dot(w.row(i), x) + b[i];
  return h;
}

inline Vector activate(const Activation& act, Vector h) {
  for (double& v : h) v = apply_activation(act, v);
  return h;
}

namespace detail {
inline void check_input(const ModelParams& model, std::size_t n) {
  if (n != model.arch.input_dim) {
    throw ShapeError("layer 1: input has length " + std::to_string(n) + ", expected " +
                     std::to_string(model.arch.input_dim));
  }
}
}  // namespace detail

inline ActivationTrace forward_trace(const ModelParams& model, std::span<const double> x) {
  detail::check_input(model, x.size());
  ActivationTrace t;
  t.input.assign(x.begin(), x.end());
  const std::size_t n = model.num_layers();
  t.pre.reserve(n);
  t.post.reserve(n - 1);
  std::span<const double> cur = t.input;
  for (std::size_t l = 0; l < n; ++l) {
    if (model.weights[l].cols() != cur.size()) {
      throw ShapeError("layer " + std::to_string(l + 1) + ": weight has " +
                       std::to_string(model.weights[l].cols()) + " columns, input has " +
                       std::to_string(cur.size()));
    }
    t.pre.push_back(affine(model.weights[l], model.biases[l], cur));
    if (l + 1 < n) {
      t.post.push_back(activate(model.arch.activation, t.pre.back()));
      cur = t.post.back();
    }
  }
  return t;
}

inline Vector forward(const ModelParams& model, std::span<const double> x) {
  return std::move(forward_trace(model, x).pre.back());
}

/// Post-activation x_l of the first `layers` layers (x_0 = input when layers == 0).
inline Vector forward_prefix(const ModelParams& model, std::span<const double> x, std::size_t layers) {
  detail::check_input(model, x.size());
  Vector cur(x.begin(), x.end());
  for (std::size_t l = 0; l < layers; ++l) {
    cur = activate(model.arch.activation, affine(model.weights[l], model.biases[l], cur));
  }
  return cur;
}

/// Per-source pre-activations at `layer` (0-based) for every batch row.
///
/// Every source must already share layers [0, layer) with `merged_prefix`; the
/// prefix is then evaluated once per row and only the layer-`layer` affine map
/// differs per source. Results are bitwise equal to forward_trace(source).pre[layer].
inline std::vector<Matrix> shared_prefix_preactivations(const ModelParams& merged_prefix,
                                                        std::span<const ModelParams> sources,
                                                        std::size_t layer, const Matrix& batch) {
  if (layer >= merged_prefix.num_layers()) {
    throw ShapeError("layer " + std::to_string(layer + 1) + " out of range");
  }
  for (std::size_t p = 0; p < sources.size(); ++p) {
    require_compatible(merged_prefix, sources[p]);
    for (std::size_t l = 0; l < layer; ++l) {
      if (!layer_equal(sources[p], merged_prefix, l)) {
        throw ContractViolation("source " + std::to_string(p) + " layer " + std::to_string(l + 1) +
                                " is not synchronized with the merged prefix");
      }
    }
  }
  const std::size_t d = merged_prefix.arch.layer_out(layer);
  std::vector<Matrix> out(sources.size(), Matrix(batch.rows(), d));
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const Vector x = forward_prefix(merged_prefix, batch.row(r), layer);
    for (std::size_t p = 0; p < sources.size(); ++p) {
      const Vector h = affine(sources[p].weights[layer], sources[p].biases[layer], x);
      std::copy(h.begin(), h.end(), out[p].row(r).begin());
    }
  }
  return out;
}

}  // namespace mloss
