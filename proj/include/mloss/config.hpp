#pragma once

// Plain-text key=value configuration. One pair per line, '#' starts a comment.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mloss/csv.hpp"
#include "mloss/errors.hpp"
#include "mloss/merging.hpp"

namespace mloss {

using KeyValues = std::map<std::string, std::string>;

namespace detail {
inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}
}  // namespace detail

inline KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ParameterError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ParameterError("config line " + std::to_string(line_no) + ": empty key");
    kv[key] = detail::trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

inline double parse_double(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ParameterError("'" + key + "': '" + s + "' is not a number");
  return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    if (!s.empty() && s[0] != '-') v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ParameterError("'" + key + "': '" + s + "' is not a non-negative integer");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw ParameterError("'" + key + "': '" + s + "' is not a boolean");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t end = std::min(s.find(',', pos), s.size());
    const std::string item = detail::trim(std::string_view(s).substr(pos, end - pos));
    if (!item.empty()) out.push_back(item);
    pos = end + 1;
  }
  return out;
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(key, item));
  return out;
}

inline std::vector<std::uint64_t> parse_uint_list(const std::string& key, const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(s)) out.push_back(parse_uint(key, item));
  return out;
}

/// Parses 1-based layer indices ("1,3") into 0-based ones.
inline std::vector<std::size_t> parse_layer_list(const std::string& key, const std::string& s) {
  std::vector<std::size_t> out;
  for (std::uint64_t v : parse_uint_list(key, s)) {
    if (v == 0) throw ParameterError("'" + key + "': layer indices start at 1");
    out.push_back(static_cast<std::size_t>(v - 1));
  }
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += fmt(items[i]);
  }
  return out;
}

inline KeyValues to_key_values(const MergeConfig& c) {
  KeyValues kv;
  kv["method"] = method_name(c.method);
  kv["alphas"] = join(c.alphas, format_double);
  kv["keep"] = format_double(c.keep);
  kv["evar"] = format_double(c.evar);
  kv["lambda"] = format_double(c.lambda);
  kv["seed"] = std::to_string(c.seed);
  kv["layers"] = join(c.dynamic_layers, [](std::size_t l) { return std::to_string(l + 1); });
  kv["normalized"] = c.normalized ? "1" : "0";
  kv["epsilon"] = format_double(c.epsilon);
  kv["elect"] = c.elect == ElectMerge::kDisjointMean ? "disjoint_mean" : "weighted_sum";
  kv["rescale_kept"] = c.rescale_kept ? "1" : "0";
  return kv;
}

/// Applies the recognised keys of `kv` on top of `c`; unknown keys are an error.
inline MergeConfig apply_key_values(MergeConfig c, const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "method") c.method = parse_method(v);
    else if (k == "alphas") c.alphas = parse_double_list(k, v);
    else if (k == "keep") c.keep = parse_double(k, v);
    else if (k == "evar") c.evar = parse_double(k, v);
    else if (k == "lambda") c.lambda = parse_double(k, v);
    else if (k == "seed") c.seed = parse_uint(k, v);
    else if (k == "layers") c.dynamic_layers = parse_layer_list(k, v);
    else if (k == "normalized") c.normalized = parse_bool(k, v);
    else if (k == "epsilon") c.epsilon = parse_double(k, v);
    else if (k == "elect") {
      if (v == "disjoint_mean") c.elect = ElectMerge::kDisjointMean;
      else if (v == "weighted_sum") c.elect = ElectMerge::kWeightedSum;
      else throw ParameterError("'elect': expected disjoint_mean or weighted_sum");
    } else if (k == "rescale_kept") c.rescale_kept = parse_bool(k, v);
    else throw ParameterError("unknown merge config key '" + k + "'");
  }
  return c;
}

}  // namespace mloss
