#pragma once

#include <cstdint>
#include <vector>

#include "mloss.hpp"

namespace testing_support {

using namespace mloss;

inline ModelParams random_model(const Architecture& arch, Rng& rng, double scale = 1.0) {
  ModelParams m = ModelParams::zeros(arch);
  for (auto& w : m.weights) {
    for (double& x : w.flat()) x = scale * rng.normal();
  }
  for (auto& b : m.biases) {
    for (double& x : b) x = scale * rng.normal();
  }
  return m;
}

/// base + N(0, sigma^2) on every parameter.
inline ModelParams perturb(const ModelParams& base, double sigma, Rng& rng) {
  ModelParams m = base;
  for (auto& w : m.weights) {
    for (double& x : w.flat()) x += sigma * rng.normal();
  }
  for (auto& b : m.biases) {
    for (double& x : b) x += sigma * rng.normal();
  }
  return m;
}

inline Matrix random_batch(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& x : m.flat()) x = rng.normal();
  return m;
}

inline Architecture arch_of(std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
                            Activation act = Activation::relu()) {
  return Architecture{in, std::move(hidden), out, act};
}

/// Straightforward per-coordinate TIES: flat top-k per layer over weights then
/// bias, sign election by alpha-weighted sum, alpha-weighted mean of agreeing entries.
inline ModelParams brute_force_ties(const ModelParams& base, const std::vector<ModelParams>& models, double keep,
                                    const std::vector<double>& alphas) {
  ModelParams out = base;
  for (std::size_t l = 0; l < base.num_layers(); ++l) {
    const std::size_t nw = base.weights[l].size();
    const std::size_t len = nw + base.biases[l].size();
    auto coord = [&](const ModelParams& m, std::size_t c) {
      return c < nw ? m.weights[l].flat()[c] : m.biases[l][c - nw];
    };
    std::size_t keep_n = 0;
    while (static_cast<double>(keep_n) < keep * static_cast<double>(len) - 1e-9) ++keep_n;
    keep_n = std::max<std::size_t>(keep_n, 1);

    std::vector<std::vector<double>> trimmed;
    for (const auto& m : models) {
      std::vector<double> t(len);
      for (std::size_t c = 0; c < len; ++c) t[c] = coord(m, c) - coord(base, c);
      std::vector<double> kept(len, 0.0);
      for (std::size_t c = 0; c < len; ++c) {
        // c survives if fewer than keep_n entries beat it (larger magnitude, or equal and earlier).
        std::size_t better = 0;
        for (std::size_t o = 0; o < len; ++o) {
          if (std::abs(t[o]) > std::abs(t[c]) || (std::abs(t[o]) == std::abs(t[c]) && o < c)) ++better;
        }
        if (better < keep_n) kept[c] = t[c];
      }
      trimmed.push_back(kept);
    }
    for (std::size_t c = 0; c < len; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < models.size(); ++i) total += alphas[i] * trimmed[i][c];
      double merged = 0.0;
      if (total != 0.0) {
        double num = 0.0;
        double mass = 0.0;
        for (std::size_t i = 0; i < models.size(); ++i) {
          const double v = trimmed[i][c];
          if ((v > 0.0 && total > 0.0) || (v < 0.0 && total < 0.0)) {
            num += alphas[i] * v;
            mass += alphas[i];
          }
        }
        if (mass > 0.0) merged = num / mass;
      }
      const double value = coord(base, c) + merged;
      if (c < nw) {
        out.weights[l].flat()[c] = value;
      } else {
        out.biases[l][c - nw] = value;
      }
    }
  }
  return out;
}

}  // namespace testing_support
