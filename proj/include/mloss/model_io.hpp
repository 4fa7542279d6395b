#pragma once

// MTM1 container: "MTM1" | u32 LE header_len | JSON header | raw f32 LE payload.
//
// The header lists every tensor with name, shape, dtype ("f32"), byte_offset
// (relative to the payload start) and byte_len. Tensors are stored row-major,
// contiguous, in directory order, so the file length is exactly
// 8 + header_len + sum(byte_len). Parameters are doubles in memory and are
// rounded to nearest f32 on write.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mloss/activation.hpp"
#include "mloss/errors.hpp"
#include "mloss/network.hpp"
#include "mloss/tensor.hpp"

namespace mloss {

inline constexpr char kMagic[4] = {'M', 'T', 'M', '1'};
inline constexpr std::size_t kPreambleSize = 8;

/// Feature rows plus optional integer class labels.
struct DatasetMatrix {
  Matrix features;
  std::optional<std::vector<int>> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return features.rows(); }
  bool operator==(const DatasetMatrix&) const = default;
};

/// Rounds every parameter to f32 and back, i.e. what a write/read round trip yields.
inline ModelParams quantize_f32(ModelParams m) {
  for (auto& w : m.weights) {
    for (double& x : w.flat()) x = static_cast<double>(static_cast<float>(x));
  }
  for (auto& b : m.biases) {
    for (double& x : b) x = static_cast<double>(static_cast<float>(x));
  }
  return m;
}

namespace detail {

using ojson = nlohmann::ordered_json;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
  return v;
}

class PayloadWriter {
 public:
  void add(const std::string& name, std::vector<std::uint64_t> shape, std::span<const double> values) {
    const std::uint64_t offset = payload_.size();
    for (double v : values) {
      const float f = static_cast<float>(v);
      if (!std::isfinite(v) || !std::isfinite(f)) {
        throw FormatError(FormatErrorKind::kNonFinite, offset, "tensor '" + name + "' has a value that is not finite in f32");
      }
      put_u32(payload_, std::bit_cast<std::uint32_t>(f));
    }
    directory_.push_back({{"name", name},
                          {"shape", shape},
                          {"dtype", "f32"},
                          {"byte_offset", offset},
                          {"byte_len", payload_.size() - offset}});
  }

  std::string finish(ojson header) const {
    header["tensors"] = directory_;
    const std::string text = header.dump();
    std::string out(kMagic, kMagic + 4);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    out += payload_;
    return out;
  }

 private:
  std::string payload_;
  ojson directory_ = ojson::array();
};

struct TensorEntry {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::uint64_t byte_offset = 0;  // absolute file offset
  std::uint64_t byte_len = 0;
};

/// Validated view of a container; every accessor checks against declared lengths.
class ContainerReader {
 public:
  explicit ContainerReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
    if (bytes.size() < kPreambleSize) {
      throw FormatError(FormatErrorKind::kTruncated, bytes.size(),
                        "file has " + std::to_string(bytes.size()) + " bytes, preamble needs 8");
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
      throw FormatError(FormatErrorKind::kBadMagic, 0, "expected magic MTM1");
    }
    const std::uint64_t header_len = get_u32(bytes, 4);
    if (header_len > bytes.size() - kPreambleSize) {
      throw FormatError(FormatErrorKind::kTruncated, 4,
                        "header_len " + std::to_string(header_len) + " exceeds remaining " +
                            std::to_string(bytes.size() - kPreambleSize) + " bytes");
    }
    payload_start_ = kPreambleSize + header_len;
    const auto* text = reinterpret_cast<const char*>(bytes.data() + kPreambleSize);
    try {
      header_ = nlohmann::json::parse(text, text + header_len);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(FormatErrorKind::kHeaderParse, kPreambleSize + e.byte, e.what());
    }
    if (!header_.is_object()) throw header_error("header is not a JSON object");
    parse_directory();
  }

  const nlohmann::json& header() const { return header_; }

  FormatError header_error(const std::string& what) const {
    return FormatError(FormatErrorKind::kHeaderParse, kPreambleSize, what);
  }

  std::string get_string(const nlohmann::json& obj, const char* key) const {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) throw header_error(std::string("missing string field '") + key + "'");
    return it->get<std::string>();
  }

  std::uint64_t get_uint(const nlohmann::json& obj, const char* key) const {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_number_unsigned()) {
      throw header_error(std::string("missing unsigned field '") + key + "'");
    }
    return it->get<std::uint64_t>();
  }

  double get_number(const nlohmann::json& obj, const char* key, double fallback) const {
    auto it = obj.find(key);
    if (it == obj.end()) return fallback;
    if (!it->is_number()) throw header_error(std::string("field '") + key + "' is not a number");
    return it->get<double>();
  }

  const TensorEntry& tensor(std::size_t i) const { return tensors_.at(i); }
  std::size_t tensor_count() const noexcept { return tensors_.size(); }

  /// Checks that tensor i is named `name` with exactly `shape`.
  const TensorEntry& expect(std::size_t i, const std::string& name,
                            const std::vector<std::uint64_t>& shape) const {
    if (i >= tensors_.size()) {
      throw FormatError(FormatErrorKind::kShapeMismatch, kPreambleSize, "missing tensor '" + name + "'");
    }
    const TensorEntry& t = tensors_[i];
    if (t.name != name || t.shape != shape) {
      throw FormatError(FormatErrorKind::kShapeMismatch, t.byte_offset,
                        "tensor " + std::to_string(i) + " is '" + t.name + "' with mismatched shape, expected '" +
                            name + "'");
    }
    return t;
  }

  std::vector<double> values(const TensorEntry& t) const {
    std::vector<double> out(t.byte_len / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::uint64_t at = t.byte_offset + 4 * i;
      const float f = std::bit_cast<float>(get_u32(bytes_, at));
      if (!std::isfinite(f)) {
        throw FormatError(FormatErrorKind::kNonFinite, at, "non-finite value in tensor '" + t.name + "'");
      }
      out[i] = static_cast<double>(f);
    }
    return out;
  }

 private:
  void parse_directory() {
    auto it = header_.find("tensors");
    if (it == header_.end() || !it->is_array()) throw header_error("missing tensor directory");
    const std::uint64_t payload_size = bytes_.size() - payload_start_;
    std::uint64_t cursor = 0;
    std::uint64_t declared = 0;
    for (const auto& entry : *it) {
      if (!entry.is_object()) throw header_error("tensor entry is not an object");
      TensorEntry t;
      t.name = get_string(entry, "name");
      if (get_string(entry, "dtype") != "f32") {
        throw FormatError(FormatErrorKind::kBadDtype, kPreambleSize, "tensor '" + t.name + "' dtype is not f32");
      }
      auto shape = entry.find("shape");
      if (shape == entry.end() || !shape->is_array()) throw header_error("tensor '" + t.name + "' has no shape");
      std::uint64_t count = 1;
      for (const auto& dim : *shape) {
        if (!dim.is_number_unsigned()) throw header_error("tensor '" + t.name + "' has a bad dimension");
        const std::uint64_t d = dim.get<std::uint64_t>();
        if (d != 0 && count > (std::numeric_limits<std::uint64_t>::max() / 4) / d) {
          throw FormatError(FormatErrorKind::kLengthMismatch, kPreambleSize, "tensor '" + t.name + "' shape overflows");
        }
        count *= d;
        t.shape.push_back(d);
      }
      const std::uint64_t offset = get_uint(entry, "byte_offset");
      t.byte_len = get_uint(entry, "byte_len");
      if (t.byte_len != count * 4) {
        throw FormatError(FormatErrorKind::kLengthMismatch, payload_start_ + std::min(offset, payload_size),
                          "tensor '" + t.name + "' declares " + std::to_string(t.byte_len) + " bytes, shape needs " +
                              std::to_string(count * 4));
      }
      if (offset < cursor) {
        throw FormatError(FormatErrorKind::kOverlappingTensors, payload_start_ + std::min(offset, payload_size),
                          "tensor '" + t.name + "' starts at " + std::to_string(offset) +
                              " before the previous tensor ends at " + std::to_string(cursor));
      }
      if (offset > payload_size || t.byte_len > payload_size - offset) {
        throw FormatError(FormatErrorKind::kTruncated, bytes_.size(),
                          "tensor '" + t.name + "' needs payload bytes up to " +
                              std::to_string(payload_start_ + offset + t.byte_len) + ", file has " +
                              std::to_string(bytes_.size()));
      }
      cursor = offset + t.byte_len;
      declared += t.byte_len;
      t.byte_offset = payload_start_ + offset;
      tensors_.push_back(std::move(t));
    }
    if (declared != payload_size) {
      const std::uint64_t expected = payload_start_ + declared;
      throw FormatError(expected > bytes_.size() ? FormatErrorKind::kTruncated : FormatErrorKind::kLengthMismatch,
                        std::min<std::uint64_t>(expected, bytes_.size()),
                        "expected file length " + std::to_string(expected) + ", actual " +
                            std::to_string(bytes_.size()));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::uint64_t payload_start_ = 0;
  nlohmann::json header_;
  std::vector<TensorEntry> tensors_;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error reading '" + path + "'");
  return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error writing '" + path + "'");
}

inline std::string layer_name(std::size_t l, const char* what) {
  return "layer" + std::to_string(l + 1) + "." + what;
}

}  // namespace detail

inline std::string encode_model(const ModelParams& model) {
  model.validate();
  detail::PayloadWriter w;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    w.add(detail::layer_name(l, "weight"), {model.weights[l].rows(), model.weights[l].cols()},
          model.weights[l].flat());
    w.add(detail::layer_name(l, "bias"), {model.biases[l].size()}, model.biases[l]);
  }
  const Architecture& a = model.arch;
  detail::ojson arch = {{"input_dim", a.input_dim},
                        {"hidden_dims", a.hidden_dims},
                        {"output_dim", a.output_dim},
                        {"activation", activation_name(a.activation)}};
  if (a.activation.type == ActivationType::kLeakyReLU) arch["slope"] = a.activation.slope;
  return w.finish({{"kind", "model"}, {"architecture", arch}});
}

inline ModelParams decode_model(std::span<const std::uint8_t> bytes) {
  detail::ContainerReader r(bytes);
  if (r.get_string(r.header(), "kind") != "model") throw r.header_error("kind is not 'model'");
  auto it = r.header().find("architecture");
  if (it == r.header().end() || !it->is_object()) throw r.header_error("missing architecture");
  const auto& aj = *it;

  Architecture arch;
  arch.input_dim = r.get_uint(aj, "input_dim");
  arch.output_dim = r.get_uint(aj, "output_dim");
  auto hd = aj.find("hidden_dims");
  if (hd == aj.end() || !hd->is_array()) throw r.header_error("missing hidden_dims");
  for (const auto& d : *hd) {
    if (!d.is_number_unsigned()) throw r.header_error("bad hidden dim");
    arch.hidden_dims.push_back(d.get<std::uint64_t>());
  }
  try {
    arch.activation = parse_activation(r.get_string(aj, "activation"), r.get_number(aj, "slope", 0.01));
    arch.validate();
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(FormatErrorKind::kShapeMismatch, kPreambleSize, e.what());
  }
  if (r.tensor_count() != 2 * arch.num_layers()) {
    throw FormatError(FormatErrorKind::kShapeMismatch, kPreambleSize,
                      "architecture needs " + std::to_string(2 * arch.num_layers()) + " tensors, header lists " +
                          std::to_string(r.tensor_count()));
  }
  ModelParams m;
  m.arch = arch;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const auto rows = arch.layer_out(l);
    const auto cols = arch.layer_in(l);
    const auto& wt = r.expect(2 * l, detail::layer_name(l, "weight"), {rows, cols});
    const auto& bt = r.expect(2 * l + 1, detail::layer_name(l, "bias"), {rows});
    m.weights.emplace_back(rows, cols, r.values(wt));
    m.biases.push_back(r.values(bt));
  }
  return m;
}

inline std::string encode_dataset(const DatasetMatrix& d) {
  if (d.features.rows() == 0) throw DomainError("dataset needs at least one row");
  detail::PayloadWriter w;
  w.add("features", {d.features.rows(), d.features.cols()}, d.features.flat());
  detail::ojson header = {{"kind", "dataset"}, {"shape", {d.features.rows(), d.features.cols()}}};
  if (d.labels) {
    if (d.labels->size() != d.features.rows()) throw ShapeError("label count does not match row count");
    Vector labels;
    for (int y : *d.labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= d.num_classes) {
        throw DomainError("label " + std::to_string(y) + " outside [0, " + std::to_string(d.num_classes) + ")");
      }
      labels.push_back(y);
    }
    w.add("labels", {labels.size()}, labels);
    header["num_classes"] = d.num_classes;
  }
  return w.finish(header);
}

inline DatasetMatrix decode_dataset(std::span<const std::uint8_t> bytes) {
  detail::ContainerReader r(bytes);
  if (r.get_string(r.header(), "kind") != "dataset") throw r.header_error("kind is not 'dataset'");
  auto sh = r.header().find("shape");
  if (sh == r.header().end() || !sh->is_array() || sh->size() != 2 || !(*sh)[0].is_number_unsigned() ||
      !(*sh)[1].is_number_unsigned()) {
    throw r.header_error("dataset shape must be [rows, cols]");
  }
  const std::uint64_t rows = (*sh)[0].get<std::uint64_t>();
  const std::uint64_t cols = (*sh)[1].get<std::uint64_t>();
  if (rows == 0) throw FormatError(FormatErrorKind::kShapeMismatch, kPreambleSize, "dataset has no rows");
  const bool has_labels = r.header().contains("num_classes");
  if (r.tensor_count() != (has_labels ? 2u : 1u)) {
    throw FormatError(FormatErrorKind::kShapeMismatch, kPreambleSize, "unexpected tensor count");
  }
  DatasetMatrix d;
  d.features = Matrix(rows, cols, r.values(r.expect(0, "features", {rows, cols})));
  if (has_labels) {
    d.num_classes = r.get_uint(r.header(), "num_classes");
    const auto& lt = r.expect(1, "labels", {rows});
    const auto raw = r.values(lt);
    std::vector<int> labels(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] != std::floor(raw[i]) || raw[i] < 0 || raw[i] >= static_cast<double>(d.num_classes)) {
        throw FormatError(FormatErrorKind::kBadLabel, lt.byte_offset + 4 * i,
                          "label " + std::to_string(raw[i]) + " is not a class id below " +
                              std::to_string(d.num_classes));
      }
      labels[i] = static_cast<int>(raw[i]);
    }
    d.labels = std::move(labels);
  }
  return d;
}

inline void write_model(const ModelParams& model, const std::string& path) {
  detail::write_file(path, encode_model(model));
}

inline ModelParams read_model(const std::string& path) { return decode_model(detail::read_file(path)); }

inline void write_dataset(const DatasetMatrix& d, const std::string& path) {
  detail::write_file(path, encode_dataset(d));
}

inline DatasetMatrix read_dataset(const std::string& path) { return decode_dataset(detail::read_file(path)); }

}  // namespace mloss
