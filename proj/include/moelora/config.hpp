// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "moelora/adapters.hpp"
#include "moelora/losses.hpp"
#include "moelora/task.hpp"

namespace moelora {

enum class OptimizerKind { kSgd, kAdam };

/// Everything a training run depends on. Adapter defaults follow the
/// reference configuration (n=8, r=4, top-2, tau=0.07, alpha=beta=0.01);
/// model and task sizes are desk-scale.
struct TrainConfig {
  AdapterKind adapter = AdapterKind::kMoELora;
  std::size_t steps = 200;
  std::size_t batch_size = 32;
  double learning_rate = 0.5;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  /// Global L2 norm cap on the trainable gradient; 0 disables clipping.
  double grad_clip = 1.0;

  std::size_t d = 32;
  std::size_t n_layers = 2;
  std::size_t n_experts = 8;
  std::size_t rank = 4;
  std::size_t top_k = 2;
  double dropout = 0.05;
  double scaling = 1.0;
  bool renormalize_topk = true;

  AuxLossConfig aux;

  std::size_t n_clusters = 4;
  double noise_std = 0.01;
  double delta_scale = 4.0;
  std::size_t delta_rank = 2;
  double cluster_spread = 1.0;
  double input_std = 0.1;

  std::size_t eval_batches = 8;
  std::uint64_t seed = 0;

  /// ConfigError on any inconsistent value.
  void validate() const;
  TaskSpec task_spec() const;
  /// Trainable parameter count of the toy model under this config.
  std::uint64_t trainable_params() const;
};

nlohmann::json to_json(const TrainConfig& cfg);

/// Applies the keys of `j` on top of `base`. Unknown keys, wrong types and
/// invalid values raise ConfigError.
TrainConfig apply_config_json(const TrainConfig& base, const nlohmann::json& j);

/// Reads a JSON config file over the defaults. ConfigError naming the path
/// when the file is missing or malformed.
TrainConfig load_config_file(const std::filesystem::path& path);

std::string to_string(AdapterKind kind);
std::string to_string(OptimizerKind kind);

}  // namespace moelora
