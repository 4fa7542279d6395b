#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

#include "mloss/errors.hpp"

namespace mloss {

/// Standard normal CDF via erfc (accurate in both tails).
inline double normal_cdf(double u) { return 0.5 * std::erfc(-u / std::numbers::sqrt2); }

inline double normal_pdf(double u) {
  return std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
}

enum class ActivationType { kReLU, kGELU, kLeakyReLU, kIdentity };

/// kPaper is z * Phi(z * sqrt(2/pi)), the form used by the expected-discrepancy
/// analysis. kStandard is the usual z * Phi(z).
enum class GeluForm { kPaper, kStandard };

/// Elementwise activation. LeakyReLU carries its negative-side slope in [0, 1].
struct Activation {
  ActivationType type = ActivationType::kReLU;
  double slope = 0.0;
  GeluForm gelu_form = GeluForm::kPaper;

  static Activation relu() { return {ActivationType::kReLU, 0.0, GeluForm::kPaper}; }
  static Activation gelu(GeluForm form = GeluForm::kPaper) {
    return {ActivationType::kGELU, 0.0, form};
  }
  static Activation identity() { return {ActivationType::kIdentity, 0.0, GeluForm::kPaper}; }
  static Activation leaky_relu(double slope) {
    if (!(slope >= 0.0 && slope <= 1.0)) {
      throw ParameterError("leaky relu slope must be in [0,1], got " + std::to_string(slope));
    }
    return {ActivationType::kLeakyReLU, slope, GeluForm::kPaper};
  }

  bool operator==(const Activation& o) const {
    if (type != o.type) return false;
    if (type == ActivationType::kLeakyReLU) return slope == o.slope;
    if (type == ActivationType::kGELU) return gelu_form == o.gelu_form;
    return true;
  }
};

inline double gelu_scale(GeluForm form) {
  return form == GeluForm::kPaper ? std::sqrt(2.0 / std::numbers::pi) : 1.0;
}

inline double apply_activation(const Activation& act, double z) {
  switch (act.type) {
    case ActivationType::kReLU:
      return z > 0.0 ? z : 0.0;
    case ActivationType::kGELU:
      return z * normal_cdf(z * gelu_scale(act.gelu_form));
    case ActivationType::kLeakyReLU:
      return z < 0.0 ? act.slope * z : z;
    case ActivationType::kIdentity:
      return z;
  }
  return z;
}

/// Derivative used by the trainer. ReLU takes 0 at the kink.
inline double activation_derivative(const Activation& act, double z) {
  switch (act.type) {
    case ActivationType::kReLU:
      return z > 0.0 ? 1.0 : 0.0;
    case ActivationType::kGELU: {
      const double c = gelu_scale(act.gelu_form);
      return normal_cdf(c * z) + c * z * normal_pdf(c * z);
    }
    case ActivationType::kLeakyReLU:
      return z < 0.0 ? act.slope : 1.0;
    case ActivationType::kIdentity:
      return 1.0;
  }
  return 1.0;
}

/// Names: relu, gelu (paper form), gelu-standard, leaky (slope stored separately), identity.
inline std::string activation_name(const Activation& act) {
  switch (act.type) {
    case ActivationType::kReLU: return "relu";
    case ActivationType::kGELU:
      return act.gelu_form == GeluForm::kPaper ? "gelu" : "gelu-standard";
    case ActivationType::kLeakyReLU: return "leaky";
    case ActivationType::kIdentity: return "identity";
  }
  return "relu";
}

inline Activation parse_activation(std::string_view name, double slope = 0.01) {
  if (name == "relu") return Activation::relu();
  if (name == "gelu") return Activation::gelu(GeluForm::kPaper);
  if (name == "gelu-standard") return Activation::gelu(GeluForm::kStandard);
  if (name == "leaky") return Activation::leaky_relu(slope);
  if (name == "identity") return Activation::identity();
  throw ParameterError("unknown activation '" + std::string(name) + "'");
}

}  // namespace mloss
