// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "moelora/error.hpp"

namespace moelora {

LoraExpert LoraExpert::initialized(std::size_t d, std::size_t r, double dropout_p, double scaling,
                                   SeededRng& rng, double init_std) {
  LoraExpert e;
  e.a = Tensor2D(d, r);
  for (double& v : e.a.data()) v = rng.normal(0.0, init_std);
  e.b = Tensor2D(r, d);
  e.dropout_p = dropout_p;
  e.scaling = scaling;
  e.validate();
  return e;
}

void LoraExpert::validate() const {
  if (a.cols() != b.rows() || a.rows() != b.cols()) {
    throw DimensionError("LoRA expert factors do not chain: A " + a.shape_string() + ", B " +
                         b.shape_string());
  }
  if (a.cols() == 0 || a.rows() == 0) throw ParameterError("LoRA expert with zero rank or width");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw ParameterError("LoRA dropout must be in [0, 1), got " + std::to_string(dropout_p));
  }
}

void MoELoraLayer::validate() const {
  if (experts.empty()) throw ParameterError("MoELoRA layer needs at least one expert");
  if (top_k < 1 || top_k > experts.size()) {
    throw ConfigError("top_k must be in [1, " + std::to_string(experts.size()) + "], got " +
                      std::to_string(top_k));
  }
  if (!gate && experts.size() != 1) {
    throw ConfigError("a layer without gate must have exactly one expert");
  }
  if (gate) {
    if (gate->weight.rows() != in_dim() || gate->weight.cols() != experts.size()) {
      throw DimensionError("gate weight " + gate->weight.shape_string() + " does not match " +
                           std::to_string(in_dim()) + " inputs and " +
                           std::to_string(experts.size()) + " experts");
    }
  }
  const LoraExpert& first = experts.front();
  for (const LoraExpert& e : experts) {
    e.validate();
    if (e.dim() != first.dim() || e.rank() != first.rank()) {
      throw DimensionError("experts in one layer must share (d, r)");
    }
  }
  if (first.dim() != in_dim() || first.dim() != out_dim()) {
    throw DimensionError("expert width " + std::to_string(first.dim()) +
                         " does not match base " + base.shape_string());
  }
}

MoELoraLayer make_moelora_layer(Tensor2D base, std::size_t n_experts, std::size_t rank,
                                std::size_t top_k, bool with_gate, bool renormalize_topk,
                                double dropout_p, double scaling, SeededRng& rng,
                                double gate_init_std) {
  MoELoraLayer layer;
  const std::size_t d = base.rows();
  layer.base = std::move(base);
  layer.top_k = top_k;
  layer.renormalize_topk = renormalize_topk;
  if (with_gate) {
    GatingNetwork gate{Tensor2D(d, n_experts)};
    for (double& v : gate.weight.data()) v = rng.normal(0.0, gate_init_std);
    layer.gate = std::move(gate);
  }
  for (std::size_t i = 0; i < n_experts; ++i) {
    layer.experts.push_back(LoraExpert::initialized(d, rank, dropout_p, scaling, rng));
  }
  layer.validate();
  return layer;
}

std::size_t DispatchResult::total_assignments() const {
  std::size_t total = 0;
  for (const auto& t : per_expert_tokens) total += t.size();
  return total;
}

DispatchResult dispatch(const Tensor2D& gate_probs, std::size_t top_k, bool renormalize) {
  const std::size_t n = gate_probs.cols();
  const std::size_t tokens = gate_probs.rows();
  if (top_k < 1 || top_k > n) {
    throw ConfigError("top_k must be in [1, " + std::to_string(n) + "], got " +
                      std::to_string(top_k));
  }
  DispatchResult out;
  out.gate_probs = gate_probs;
  out.sparse_weights = Tensor2D(tokens, n);
  out.selected.resize(tokens);
  out.per_expert_tokens.resize(n);

  std::vector<std::size_t> order(n);
  for (std::size_t t = 0; t < tokens; ++t) {
    auto row = gate_probs.row(t);
    std::iota(order.begin(), order.end(), 0);
    // Stable sort keeps the lower index first among equal probabilities.
    std::stable_sort(order.begin(), order.end(),
                     [&row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    out.selected[t].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k));
    double kept = 0.0;
    for (std::size_t i : out.selected[t]) kept += row[i];
    for (std::size_t i : out.selected[t]) {
      out.sparse_weights(t, i) = renormalize && top_k < n ? row[i] / kept : row[i];
      out.per_expert_tokens[i].push_back(t);
    }
  }
  return out;
}

LayerBinding bind_layer(const MoELoraLayer& layer, Tape& tape) {
  LayerBinding binding;
  binding.base = tape.constant(layer.base);
  if (layer.gate) binding.gate = tape.parameter(layer.gate->weight);
  for (const LoraExpert& e : layer.experts) {
    binding.experts.push_back({tape.parameter(e.a), tape.parameter(e.b)});
  }
  return binding;
}

Var lora_forward(const LoraExpert& expert, const ExpertBinding& params, Var x, SeededRng& rng,
                 bool training) {
  if (x.cols() != params.a.rows()) {
    throw DimensionError("lora_forward: input " + x.value().shape_string() +
                         " does not match A " + params.a.value().shape_string());
  }
  Var h = dropout(x, expert.dropout_p, rng, training);
  Var out = matmul(matmul(h, params.a), params.b);
  return expert.scaling == 1.0 ? out : scale(out, expert.scaling);
}

Var gate_forward(Var gate_weight, Var x) {
  return softmax_rows(matmul(x, gate_weight));
}

namespace {

void check_input(const MoELoraLayer& layer, Var x) {
  if (x.cols() != layer.in_dim()) {
    throw DimensionError("moelora_forward: input " + x.value().shape_string() +
                         " does not match base " + layer.base.shape_string());
  }
}

LayerOutput plain_lora_forward(const MoELoraLayer& layer, const LayerBinding& params, Var x,
                               SeededRng& rng, bool training) {
  Tape& tape = *x.tape;
  const std::size_t tokens = x.rows();
  LayerOutput out;
  out.gate_probs = tape.constant(Tensor2D(tokens, 1, 1.0));
  out.dispatch = dispatch(out.gate_probs.value(), 1, true);
  Var delta = lora_forward(layer.experts.front(), params.experts.front(), x, rng, training);
  out.output = add(matmul(x, params.base), delta);
  out.expert_outputs.push_back(delta);
  return out;
}

LayerOutput combine(const MoELoraLayer& layer, const LayerBinding& params, Var x, Var probs,
                    DispatchResult selection, SeededRng& rng, bool training) {
  Tape& tape = *x.tape;
  const std::size_t tokens = x.rows();
  const std::size_t n = layer.num_experts();

  Tensor2D mask(tokens, n);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t i : selection.selected[t]) mask(t, i) = 1.0;
  Var weights = mul(probs, tape.constant(mask));
  if (layer.renormalize_topk && layer.top_k < n) {
    weights = scale_rows(weights, reciprocal(sum_rows(weights)));
  }

  LayerOutput out;
  out.gate_probs = probs;
  selection.gate_probs = probs.value();
  selection.sparse_weights = weights.value();
  out.output = matmul(x, params.base);
  out.expert_outputs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& routed = selection.per_expert_tokens[i];
    if (routed.empty()) continue;
    Var xi = gather_rows(x, routed);
    Var yi = lora_forward(layer.experts[i], params.experts[i], xi, rng, training);
    Var wi = gather_rows(column(weights, i), routed);
    out.output = add(out.output, scatter_rows(scale_rows(yi, wi), routed, tokens));
    out.expert_outputs[i] = yi;
  }
  out.dispatch = std::move(selection);
  return out;
}

}  // namespace

LayerOutput moelora_forward(const MoELoraLayer& layer, const LayerBinding& params, Var x,
                            SeededRng& rng, bool training) {
  check_input(layer, x);
  if (!layer.gate) return plain_lora_forward(layer, params, x, rng, training);
  Var probs = gate_forward(*params.gate, x);
  DispatchResult selection = dispatch(probs.value(), layer.top_k, layer.renormalize_topk);
  return combine(layer, params, x, probs, std::move(selection), rng, training);
}

LayerOutput moelora_forward_with_selection(const MoELoraLayer& layer, const LayerBinding& params,
                                           Var x, const DispatchResult& selection,
                                           SeededRng& rng, bool training) {
  check_input(layer, x);
  if (!layer.gate) return plain_lora_forward(layer, params, x, rng, training);
  if (selection.num_tokens() != x.rows() || selection.num_experts() != layer.num_experts()) {
    throw DimensionError("fixed selection covers " + std::to_string(selection.num_tokens()) +
                         " tokens and " + std::to_string(selection.num_experts()) +
                         " experts; input has " + std::to_string(x.rows()) + " tokens");
  }
  Var probs = gate_forward(*params.gate, x);
  return combine(layer, params, x, probs, selection, rng, training);
}

std::uint64_t trainable_param_count(AdapterKind kind, std::uint64_t n_experts, std::uint64_t rank,
                                    std::uint64_t d, std::uint64_t adapted_matrices) {
  if (kind == AdapterKind::kLora) return adapted_matrices * (2 * d * rank);
  return adapted_matrices * (n_experts * (2 * d * rank) + d * n_experts);
}

}  // namespace moelora
