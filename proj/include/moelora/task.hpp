// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "moelora/rng.hpp"
#include "moelora/tensor.hpp"

namespace moelora {

struct TaskSpec {
  std::size_t d = 32;
  std::size_t n_clusters = 4;
  double noise_std = 0.01;
  /// Cluster maps are I + delta_scale * U V / d with U (d x delta_rank),
  /// V (delta_rank x d) standard normal.
  double delta_scale = 4.0;
  std::size_t delta_rank = 2;
  /// L2 norm of each cluster's mean input.
  double cluster_spread = 1.0;
  double input_std = 0.1;
  std::uint64_t seed = 0;
};

struct Batch {
  Tensor2D x;
  Tensor2D y;
  std::vector<std::size_t> cluster_ids;
};

/// Regression over clusters: tokens of cluster c are drawn around mean_c and
/// mapped by their own d x d target map.
class SyntheticTask {
 public:
  /// maps: one d x d target map per cluster; means: n_clusters x d.
  SyntheticTask(std::vector<Tensor2D> maps, Tensor2D means, double input_std, double noise_std);

  /// Random task. ConfigError if the cluster maps cannot be made pairwise
  /// distinct (Frobenius distance > 0.1).
  static SyntheticTask generate(const TaskSpec& spec);

  std::size_t dim() const noexcept { return means_.cols(); }
  std::size_t num_clusters() const noexcept { return maps_.size(); }
  const Tensor2D& map(std::size_t cluster) const { return maps_.at(cluster); }
  const Tensor2D& means() const noexcept { return means_; }
  double input_std() const noexcept { return input_std_; }
  double noise_std() const noexcept { return noise_std_; }

  /// Minimum pairwise Frobenius distance between cluster maps (infinity for
  /// a single cluster).
  double min_map_distance() const;

 private:
  std::vector<Tensor2D> maps_;
  Tensor2D means_;
  double input_std_;
  double noise_std_;
};

/// Draws T tokens with uniformly chosen clusters; y = x M_c + noise.
Batch generate_batch(const SyntheticTask& task, std::size_t tokens, SeededRng& rng);

}  // namespace moelora
