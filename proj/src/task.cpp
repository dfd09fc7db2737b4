// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/task.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "moelora/error.hpp"

namespace moelora {

SyntheticTask::SyntheticTask(std::vector<Tensor2D> maps, Tensor2D means, double input_std,
                             double noise_std)
    : maps_(std::move(maps)), means_(std::move(means)), input_std_(input_std), noise_std_(noise_std) {
  if (maps_.empty()) throw ConfigError("synthetic task needs at least one cluster");
  if (means_.rows() != maps_.size()) {
    throw DimensionError("synthetic task: " + std::to_string(maps_.size()) + " maps but means " +
                         means_.shape_string());
  }
  for (const auto& m : maps_) {
    if (m.rows() != means_.cols() || m.cols() != means_.cols()) {
      throw DimensionError("synthetic task: map " + m.shape_string() + " does not match width " +
                           std::to_string(means_.cols()));
    }
  }
  if (!(input_std >= 0.0) || !(noise_std >= 0.0)) {
    throw ConfigError("synthetic task: standard deviations must be non-negative");
  }
}

SyntheticTask SyntheticTask::generate(const TaskSpec& spec) {
  if (spec.d == 0 || spec.n_clusters == 0 || spec.delta_rank == 0) {
    throw ConfigError("synthetic task: d, n_clusters and delta_rank must be positive");
  }
  SeededRng rng(spec.seed);
  constexpr int kAttempts = 16;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    std::vector<Tensor2D> maps;
    for (std::size_t c = 0; c < spec.n_clusters; ++c) {
      Tensor2D u(spec.d, spec.delta_rank), v(spec.delta_rank, spec.d);
      for (double& x : u.data()) x = rng.normal();
      for (double& x : v.data()) x = rng.normal();
      Tensor2D delta = scale(matmul(u, v), spec.delta_scale / static_cast<double>(spec.d));
      maps.push_back(add(Tensor2D::identity(spec.d), delta));
    }
    Tensor2D means(spec.n_clusters, spec.d);
    for (std::size_t c = 0; c < spec.n_clusters; ++c) {
      auto row = means.row(c);
      double sq = 0.0;
      for (double& x : row) {
        x = rng.normal();
        sq += x * x;
      }
      const double norm = std::sqrt(sq);
      for (double& x : row) x *= spec.cluster_spread / norm;
    }
    SyntheticTask task(std::move(maps), std::move(means), spec.input_std, spec.noise_std);
    if (task.min_map_distance() > 0.1) return task;
  }
  throw ConfigError("synthetic task: cluster maps not separable; increase delta_scale");
}

double SyntheticTask::min_map_distance() const {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < maps_.size(); ++a)
    for (std::size_t b = a + 1; b < maps_.size(); ++b)
      best = std::min(best, frobenius_norm(sub(maps_[a], maps_[b])));
  return best;
}

Batch generate_batch(const SyntheticTask& task, std::size_t tokens, SeededRng& rng) {
  if (tokens == 0) throw ParameterError("generate_batch: T must be at least 1");
  const std::size_t d = task.dim();
  Batch batch{Tensor2D(tokens, d), Tensor2D(tokens, d), {}};
  batch.cluster_ids.reserve(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    const std::size_t c = rng.uniform_index(task.num_clusters());
    batch.cluster_ids.push_back(c);
    auto x = batch.x.row(t);
    auto mean = task.means().row(c);
    for (std::size_t j = 0; j < d; ++j) x[j] = mean[j] + task.input_std() * rng.normal();
    const Tensor2D& m = task.map(c);
    auto y = batch.y.row(t);
    for (std::size_t k = 0; k < d; ++k) {
      const double xk = x[k];
      for (std::size_t j = 0; j < d; ++j) y[j] += xk * m(k, j);
    }
    if (task.noise_std() > 0.0) {
      for (double& v : y) v += task.noise_std() * rng.normal();
    }
  }
  return batch;
}

}  // namespace moelora
