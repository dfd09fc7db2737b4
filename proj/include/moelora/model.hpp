// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <variant>
#include <vector>

#include "moelora/adapters.hpp"
#include "moelora/autodiff.hpp"
#include "moelora/checkpoint.hpp"
#include "moelora/config.hpp"

namespace moelora {

/// A frozen dense projection with no adapter.
struct DenseLayer {
  Tensor2D weight;
};

using ModelLayer = std::variant<DenseLayer, MoELoraLayer>;

struct ModelForward {
  Var output;
  /// One entry per MoELoRA layer, in layer order.
  std::vector<LayerOutput> adapted;
  std::vector<std::size_t> adapted_index;
};

/// Stack of square layers with tanh between consecutive layers. Base
/// weights are frozen; only gates and experts train.
class ToyModel {
 public:
  ToyModel() = default;
  explicit ToyModel(std::vector<ModelLayer> layers);

  /// n_layers adapted layers over identity base weights.
  static ToyModel build(const TrainConfig& cfg, SeededRng& rng);

  const std::vector<ModelLayer>& layers() const noexcept { return layers_; }
  std::size_t num_adapted() const;
  std::size_t dim() const;

  /// Records the forward pass on x's tape. The binding of every layer's
  /// parameters is returned through `bindings` for gradient lookup.
  ModelForward forward(Var x, SeededRng& rng, bool training,
                       std::vector<LayerBinding>* bindings = nullptr) const;

  /// The frozen network alone (adapters removed).
  Tensor2D base_forward(const Tensor2D& x) const;
  /// Eval-mode output of the adapted network.
  Tensor2D infer(const Tensor2D& x) const;

  /// Trainable tensors in a fixed order: per adapted layer, gate weight
  /// (if any) then A and B of each expert.
  std::vector<Tensor2D*> trainable();
  std::vector<const Tensor2D*> frozen() const;
  /// FNV-1a over the bit patterns of all frozen tensors.
  std::uint64_t frozen_hash() const;

  std::vector<NamedTensor> named_tensors() const;
  /// Rebuilds a model of `cfg`'s shape from named tensors.
  static ToyModel from_tensors(const TrainConfig& cfg, const Checkpoint& checkpoint);

 private:
  std::vector<ModelLayer> layers_;
};

/// Gradients for model.trainable(), in the same order. Tensors that received
/// no gradient (experts without tokens) come back as zeros.
std::vector<Tensor2D> collect_gradients(const ToyModel& model,
                                        const std::vector<LayerBinding>& bindings,
                                        const Gradients& grads);

}  // namespace moelora
