// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "moelora/autodiff.hpp"
#include "moelora/rng.hpp"
#include "moelora/tensor.hpp"

namespace moelora {

/// One low-rank branch: out = scaling * dropout(x) * A * B, with A (d x r)
/// and B (r x d).
struct LoraExpert {
  Tensor2D a;
  Tensor2D b;
  double dropout_p = 0.0;
  double scaling = 1.0;

  std::size_t dim() const noexcept { return a.rows(); }
  std::size_t rank() const noexcept { return a.cols(); }

  /// A ~ N(0, init_std^2), B = 0, so a fresh expert outputs exactly zero.
  static LoraExpert initialized(std::size_t d, std::size_t r, double dropout_p, double scaling,
                                SeededRng& rng, double init_std = 0.02);
  void validate() const;
};

/// Linear gate without bias followed by a row softmax. weight is d x n.
struct GatingNetwork {
  Tensor2D weight;

  std::size_t num_experts() const noexcept { return weight.cols(); }
};

/// Frozen base weight plus a gated set of experts. A layer without a gate is
/// plain LoRA: exactly one expert, always selected with weight 1.
struct MoELoraLayer {
  Tensor2D base;
  std::optional<GatingNetwork> gate;
  std::vector<LoraExpert> experts;
  std::size_t top_k = 1;
  bool renormalize_topk = true;

  std::size_t in_dim() const noexcept { return base.rows(); }
  std::size_t out_dim() const noexcept { return base.cols(); }
  std::size_t num_experts() const noexcept { return experts.size(); }

  void validate() const;
};

/// Builds a layer with n experts of rank r over a square base. n_experts == 1
/// with `with_gate == false` yields plain LoRA.
MoELoraLayer make_moelora_layer(Tensor2D base, std::size_t n_experts, std::size_t rank,
                                std::size_t top_k, bool with_gate, bool renormalize_topk,
                                double dropout_p, double scaling, SeededRng& rng,
                                double gate_init_std = 0.02);

struct DispatchResult {
  Tensor2D gate_probs;       // T x n dense softmax output
  std::vector<std::vector<std::size_t>> selected;  // per token, by descending probability
  Tensor2D sparse_weights;   // T x n, zero outside the selection
  std::vector<std::vector<std::size_t>> per_expert_tokens;  // ascending token indices

  std::size_t num_tokens() const noexcept { return selected.size(); }
  std::size_t num_experts() const noexcept { return per_expert_tokens.size(); }
  /// Sum over experts of |t_i|; equals T * top_k.
  std::size_t total_assignments() const;
};

/// Keeps the top_k probabilities per row (ties to the lower expert index) and
/// optionally renormalizes them to sum to one.
DispatchResult dispatch(const Tensor2D& gate_probs, std::size_t top_k, bool renormalize = true);

/// Tape handles for one layer's parameters. The base weight is recorded as a
/// constant so it never receives a gradient.
struct ExpertBinding {
  Var a;
  Var b;
};

struct LayerBinding {
  Var base;
  std::optional<Var> gate;
  std::vector<ExpertBinding> experts;
};

LayerBinding bind_layer(const MoELoraLayer& layer, Tape& tape);

Var lora_forward(const LoraExpert& expert, const ExpertBinding& params, Var x, SeededRng& rng,
                 bool training);

/// softmax_rows(x * Wg).
Var gate_forward(Var gate_weight, Var x);

struct LayerOutput {
  Var output;
  Var gate_probs;
  DispatchResult dispatch;
  /// Unweighted expert outputs on the routed tokens, rows ordered as
  /// dispatch.per_expert_tokens[i]; empty for experts that received no token.
  std::vector<std::optional<Var>> expert_outputs;
};

LayerOutput moelora_forward(const MoELoraLayer& layer, const LayerBinding& params, Var x,
                            SeededRng& rng, bool training);

/// Same as moelora_forward but reuses a previously computed selection, so the
/// top-k mask is held fixed. Gate probabilities and weights are still
/// recomputed from the current parameters.
LayerOutput moelora_forward_with_selection(const MoELoraLayer& layer, const LayerBinding& params,
                                           Var x, const DispatchResult& selection,
                                           SeededRng& rng, bool training);

enum class AdapterKind { kLora, kMoELora };

/// Trainable parameters over `adapted_matrices` square d x d projections:
/// plain LoRA 2*d*R each; MoELoRA n*2*d*r + d*n each (gate has no bias).
std::uint64_t trainable_param_count(AdapterKind kind, std::uint64_t n_experts, std::uint64_t rank,
                                    std::uint64_t d, std::uint64_t adapted_matrices);

}  // namespace moelora
