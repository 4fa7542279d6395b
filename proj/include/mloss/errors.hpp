#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mloss {

/// Base of every error thrown by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or architecture dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input is outside the domain of an operation (empty batch, missing labels, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or configuration value.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A caller-side precondition was violated, e.g. an unsynchronized prefix.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class UnsupportedActivation : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind {
  kBadMagic,
  kTruncated,
  kHeaderParse,
  kLengthMismatch,
  kOverlappingTensors,
  kShapeMismatch,
  kBadDtype,
  kNonFinite,
  kBadLabel,
};

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::kBadMagic: return "bad-magic";
    case FormatErrorKind::kTruncated: return "truncated";
    case FormatErrorKind::kHeaderParse: return "header-parse";
    case FormatErrorKind::kLengthMismatch: return "length-mismatch";
    case FormatErrorKind::kOverlappingTensors: return "overlapping-tensors";
    case FormatErrorKind::kShapeMismatch: return "shape-mismatch";
    case FormatErrorKind::kBadDtype: return "bad-dtype";
    case FormatErrorKind::kNonFinite: return "non-finite";
    case FormatErrorKind::kBadLabel: return "bad-label";
  }
  return "unknown";
}

/// Malformed container file. Carries the byte offset at which the violation was detected.
class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, std::uint64_t offset, const std::string& what)
      : Error(std::string(to_string(kind)) + " at byte " + std::to_string(offset) + ": " + what),
        kind_(kind),
        offset_(offset) {}

  FormatErrorKind kind() const noexcept { return kind_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  FormatErrorKind kind_;
  std::uint64_t offset_;
};

}  // namespace mloss
