// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "moelora/losses.hpp"

namespace moelora {

struct RoutingRecord {
  std::uint64_t step = 0;
  std::size_t layer = 0;
  std::size_t token = 0;
  std::string token_type;
  std::vector<double> probs;
  std::vector<std::size_t> selected;
};

struct LayerRouting {
  std::size_t tokens = 0;
  std::vector<double> load_fraction;  // argmax occupancy, sums to 1
  double entropy = 0.0;               // of load_fraction, divided by ln n
  double nmi = 0.0;                   // token type vs argmax expert
  std::optional<SeparationScore> separation;

  friend bool operator==(const LayerRouting&, const LayerRouting&) = default;
};

struct RoutingSummary {
  std::size_t num_experts = 0;
  std::size_t top_k = 0;
  std::uint64_t records = 0;
  /// (layer, token type) -> per-expert selection counts.
  std::map<std::pair<std::size_t, std::string>, std::vector<std::uint64_t>> histograms;
  std::map<std::size_t, LayerRouting> layers;
  double nmi = 0.0;  // mean over layers

  /// Mean over layers that carry a separation score.
  std::optional<SeparationScore> mean_separation() const;

  friend bool operator==(const RoutingSummary&, const RoutingSummary&) = default;
};

/// Append-only log of routing decisions. Single writer.
class RoutingTracer {
 public:
  RoutingTracer(std::size_t num_experts, std::size_t top_k);

  /// ParameterError when the record breaks an invariant: probabilities must
  /// be finite, non-negative and sum to 1 +- 1e-9; `selected` must hold top_k
  /// distinct in-range experts.
  void record(RoutingRecord rec);

  const std::vector<RoutingRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  std::size_t num_experts() const noexcept { return num_experts_; }
  std::size_t top_k() const noexcept { return top_k_; }
  void clear() { records_.clear(); }

 private:
  std::size_t num_experts_;
  std::size_t top_k_;
  std::vector<RoutingRecord> records_;
};

RoutingSummary summarize(const std::vector<RoutingRecord>& records, std::size_t num_experts,
                         std::size_t top_k);
inline RoutingSummary summarize(const RoutingTracer& tracer) {
  return summarize(tracer.records(), tracer.num_experts(), tracer.top_k());
}

/// Normalized mutual information with arithmetic-mean normalization. Two
/// constant labelings score 1.
double normalized_mutual_information(const std::vector<std::string>& a,
                                     const std::vector<std::size_t>& b);

/// Tokens per type, counting each (step, token) once. Descending frequency,
/// ties by tag.
std::vector<std::pair<std::string, std::uint64_t>> token_frequency_table(
    const std::vector<RoutingRecord>& records);

enum class ExportFormat { kCsv, kJson };

/// kCsv writes the histogram table `layer,token_type,expert,count,fraction`
/// to `path` and the scalar metrics to `metrics_path_for(path)`. kJson writes
/// everything to `path`.
void export_summary(const RoutingSummary& summary, const std::filesystem::path& path,
                    ExportFormat format);
RoutingSummary import_summary(const std::filesystem::path& path, ExportFormat format);
std::filesystem::path metrics_path_for(const std::filesystem::path& csv_path);

void write_frequency_table(const std::vector<std::pair<std::string, std::uint64_t>>& table,
                           const std::filesystem::path& path);

}  // namespace moelora
