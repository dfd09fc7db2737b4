// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "moelora/adapters.hpp"
#include "moelora/autodiff.hpp"
#include "moelora/tensor.hpp"

namespace moelora {

struct AuxLossConfig {
  double alpha = 0.01;  // load-balance weight
  double beta = 0.01;   // contrastive weight
  double tau = 0.07;    // contrastive temperature
  std::size_t queue_capacity = 256;
  bool normalize_embeddings = true;
  /// Count every top-k assignment in f instead of only the argmax expert.
  bool balance_count_topk = false;

  void validate() const;
};

/// Per-expert fraction f used by the balance loss: argmax occupancy over T
/// tokens, or top-k occupancy over T*k assignments when `count_topk`.
std::vector<double> load_fractions(const DispatchResult& assignments, bool count_topk = false);

/// n * sum_i f_i * P_i, with P_i the mean gate probability of expert i.
/// Gradient flows through P only.
Var load_balance_loss(Var gate_probs, const DispatchResult& assignments, bool count_topk = false);
double load_balance_loss_value(const Tensor2D& gate_probs, const DispatchResult& assignments,
                               bool count_topk = false);

/// Fixed-capacity ring of detached vectors. With normalization on, vectors are
/// stored at unit L2 norm. Zero vectors are never stored.
class ExpertQueue {
 public:
  explicit ExpertQueue(std::size_t capacity, bool normalize = true);

  /// Returns false when the vector was skipped (zero norm or zero capacity).
  bool push(std::span<const double> v);

  std::size_t size() const noexcept { return count_; }
  std::size_t capacity() const noexcept { return capacity_; }
  bool empty() const noexcept { return count_ == 0; }
  bool normalizes() const noexcept { return normalize_; }

  /// Entries from oldest to newest.
  std::vector<std::vector<double>> entries() const;
  /// size() x dim matrix, oldest first. Empty tensor when the queue is empty.
  Tensor2D as_matrix() const;

  friend bool operator==(const ExpertQueue&, const ExpertQueue&);

 private:
  std::size_t capacity_;
  bool normalize_;
  std::vector<std::vector<double>> slots_;
  std::size_t head_ = 0;  // next slot to overwrite
  std::size_t count_ = 0;
};

/// Pushes every row of expert_outputs[i] (one row per token in t_i) into
/// queues[i].
void update_queues(std::vector<ExpertQueue>& queues, std::span<const Tensor2D> expert_outputs,
                   const DispatchResult& assignments);

/// InfoNCE over per-expert queues. For expert i every non-zero current output
/// is an anchor q, every entry of queue i is a positive k+, and the
/// denominator runs over the entries of all queues. Per-pair terms are
/// -log(exp(q.k+/tau) / sum_k exp(q.k/tau)); the result is their sum over
/// experts divided by the number of (anchor, positive) pairs, or 0 when there
/// are no pairs. Queues carry no gradient.
Var experts_contrastive_loss(Tape& tape, std::span<const std::optional<Var>> current_outputs,
                             std::span<const ExpertQueue> queues, double tau,
                             bool normalize = true);

Var auxiliary_loss(Var balance, Var contrastive, const AuxLossConfig& cfg);
double auxiliary_loss(double balance, double contrastive, const AuxLossConfig& cfg);

struct SeparationScore {
  double intra = 0.0;  // mean cosine distance between outputs of the same expert
  double inter = 0.0;  // mean cosine distance between outputs of different experts

  double ratio() const { return inter > 0.0 ? intra / inter : 0.0; }

  friend bool operator==(const SeparationScore&, const SeparationScore&) = default;
};

/// Pooled mean pairwise cosine distance (1 - cos) within and across experts.
/// Zero rows are ignored. ParameterError when no expert has two outputs
/// (intra side) or fewer than two experts have any (inter side).
SeparationScore expert_separation_score(std::span<const Tensor2D> outputs);

}  // namespace moelora
