// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelora/config.hpp"

namespace moelora {

struct AblationVariant {
  std::string label;
  nlohmann::json overrides = nlohmann::json::object();
};

struct AblationGrid {
  TrainConfig base;
  std::vector<AblationVariant> variants;
  std::size_t seeds = 3;  // run r uses base.seed + r
};

/// Grid file layout:
///   {"base": {...config keys...}, "seeds": 5,
///    "axes": {"beta": [0.0, 0.01], "top_k": [1, 2, 4]}}
/// expands to the cartesian product of the axes (keys in sorted order).
/// An explicit "variants": [{"label": "...", ...overrides}] list is accepted
/// instead of "axes". ConfigError on an empty grid or unknown keys.
AblationGrid ablation_grid_from_json(const nlohmann::json& j);

struct SeedMetrics {
  std::uint64_t seed = 0;
  double final_loss = 0.0;  // eval task loss after training
  double nmi = 0.0;
  double intra = 0.0;
  double inter = 0.0;
  double separation_ratio = 0.0;
  double load_entropy = 0.0;
  double max_load_fraction = 0.0;
  double balance_loss = 0.0;      // last step
  double contrastive_loss = 0.0;  // last step
};

struct AblationRow {
  std::string label;
  TrainConfig config;
  std::vector<SeedMetrics> runs;
};

/// Trains and evaluates one config; the metrics that feed every ablation row.
SeedMetrics train_and_measure(const TrainConfig& cfg);

std::vector<AblationRow> run_ablation(
    const AblationGrid& grid,
    const std::function<void(const std::string& label, const SeedMetrics&)>& on_run = {});

/// Column order is fixed; see kAblationColumns in the implementation.
std::string ablation_csv(const std::vector<AblationRow>& rows);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace moelora
