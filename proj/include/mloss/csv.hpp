#pragma once

// CSV emitters. '.' decimal separator, '\n' line endings, header row always present.
// Numbers use the shortest round-trip representation, independent of locale.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mloss/metric.hpp"
#include "mloss/theory.hpp"

namespace mloss {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

class CsvWriter {
 public:
  explicit CsvWriter(std::initializer_list<std::string_view> header) {
    std::vector<std::string> cells(header.begin(), header.end());
    row(cells);
  }

  void row(std::span<const std::string> cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ += ',';
      out_ += cells[i];
    }
    out_ += '\n';
  }

  void row(std::initializer_list<std::string> cells) { row(std::vector<std::string>(cells)); }

  const std::string& str() const noexcept { return out_; }

 private:
  std::string out_;
};

enum class ReportLevel { kNode, kLayer, kGroup };

/// Columns: layer_index, node_index (group_index for grouped output), score,
/// normalized_flag, sample_count. Layer indices are 1-based. Layer-level rows
/// carry "all" in the node_index column.
inline std::string report_csv(const MLossReport& report, ReportLevel level, std::size_t group_size = 1) {
  const std::string flag = report.normalized ? "1" : "0";
  const std::string count = std::to_string(report.sample_count);
  if (level == ReportLevel::kGroup) {
    CsvWriter w({"layer_index", "group_index", "score", "normalized_flag", "sample_count"});
    const auto groups = heatmap_groups(report, group_size);
    for (std::size_t l = 0; l < groups.size(); ++l) {
      for (std::size_t g = 0; g < groups[l].size(); ++g) {
        w.row({std::to_string(l + 1), std::to_string(g), format_double(groups[l][g]), flag, count});
      }
    }
    return w.str();
  }
  CsvWriter w({"layer_index", "node_index", "score", "normalized_flag", "sample_count"});
  for (std::size_t l = 0; l < report.per_layer.size(); ++l) {
    if (level == ReportLevel::kLayer) {
      w.row({std::to_string(l + 1), "all", format_double(report.layer_scores[l]), flag, count});
      continue;
    }
    for (std::size_t i = 0; i < report.per_layer[l].size(); ++i) {
      w.row({std::to_string(l + 1), std::to_string(i), format_double(report.per_layer[l][i]), flag, count});
    }
  }
  return w.str();
}

inline std::string sweep_csv(std::span<const SweepRow> rows, std::string_view activation) {
  CsvWriter w({"activation", "sigma", "k", "k_over_sigma", "analytic", "mc", "std_error", "rel_err", "importance"});
  for (const auto& r : rows) {
    w.row({std::string(activation), format_double(r.sigma), format_double(r.k), format_double(r.ratio),
           format_double(r.analytic), format_double(r.mc), format_double(r.std_error), format_double(r.rel_err),
           r.importance ? "1" : "0"});
  }
  return w.str();
}

}  // namespace mloss
