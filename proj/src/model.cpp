// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/model.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "moelora/error.hpp"

namespace moelora {

ToyModel::ToyModel(std::vector<ModelLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ConfigError("model needs at least one layer");
  const std::size_t d = dim();
  for (const auto& layer : layers_) {
    if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      if (dense->weight.rows() != d || dense->weight.cols() != d) {
        throw DimensionError("dense layer " + dense->weight.shape_string() + " in a width-" +
                             std::to_string(d) + " model");
      }
    } else {
      const auto& moe = std::get<MoELoraLayer>(layer);
      moe.validate();
      if (moe.in_dim() != d || moe.out_dim() != d) {
        throw DimensionError("adapted layer base " + moe.base.shape_string() + " in a width-" +
                             std::to_string(d) + " model");
      }
    }
  }
}

ToyModel ToyModel::build(const TrainConfig& cfg, SeededRng& rng) {
  cfg.validate();
  std::vector<ModelLayer> layers;
  const bool moe = cfg.adapter == AdapterKind::kMoELora;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    layers.emplace_back(make_moelora_layer(Tensor2D::identity(cfg.d), moe ? cfg.n_experts : 1,
                                           cfg.rank, moe ? cfg.top_k : 1, moe,
                                           cfg.renormalize_topk, cfg.dropout, cfg.scaling, rng));
  }
  return ToyModel(std::move(layers));
}

std::size_t ToyModel::num_adapted() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += std::holds_alternative<MoELoraLayer>(layer) ? 1 : 0;
  return n;
}

std::size_t ToyModel::dim() const {
  const auto& first = layers_.front();
  if (const auto* dense = std::get_if<DenseLayer>(&first)) return dense->weight.rows();
  return std::get<MoELoraLayer>(first).in_dim();
}

ModelForward ToyModel::forward(Var x, SeededRng& rng, bool training,
                               std::vector<LayerBinding>* bindings) const {
  Tape& tape = *x.tape;
  ModelForward out;
  Var h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (l > 0) h = tanh(h);
    if (const auto* dense = std::get_if<DenseLayer>(&layers_[l])) {
      h = matmul(h, tape.constant(dense->weight));
      continue;
    }
    const auto& moe = std::get<MoELoraLayer>(layers_[l]);
    LayerBinding binding = bind_layer(moe, tape);
    LayerOutput lo = moelora_forward(moe, binding, h, rng, training);
    h = lo.output;
    out.adapted.push_back(std::move(lo));
    out.adapted_index.push_back(l);
    if (bindings) bindings->push_back(std::move(binding));
  }
  out.output = h;
  return out;
}

Tensor2D ToyModel::base_forward(const Tensor2D& x) const {
  Tensor2D h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (l > 0) {
      for (double& v : h.data()) v = std::tanh(v);
    }
    if (const auto* dense = std::get_if<DenseLayer>(&layers_[l])) {
      h = matmul(h, dense->weight);
    } else {
      h = matmul(h, std::get<MoELoraLayer>(layers_[l]).base);
    }
  }
  return h;
}

Tensor2D ToyModel::infer(const Tensor2D& x) const {
  Tape tape;
  SeededRng rng(0);
  return forward(tape.constant(x), rng, false).output.value();
}

std::vector<Tensor2D*> ToyModel::trainable() {
  std::vector<Tensor2D*> out;
  for (auto& layer : layers_) {
    auto* moe = std::get_if<MoELoraLayer>(&layer);
    if (!moe) continue;
    if (moe->gate) out.push_back(&moe->gate->weight);
    for (auto& e : moe->experts) {
      out.push_back(&e.a);
      out.push_back(&e.b);
    }
  }
  return out;
}

std::vector<const Tensor2D*> ToyModel::frozen() const {
  std::vector<const Tensor2D*> out;
  for (const auto& layer : layers_) {
    if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      out.push_back(&dense->weight);
    } else {
      out.push_back(&std::get<MoELoraLayer>(layer).base);
    }
  }
  return out;
}

std::uint64_t ToyModel::frozen_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor2D* t : frozen()) {
    for (double v : t->data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

std::vector<NamedTensor> ToyModel::named_tensors() const {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    if (const auto* dense = std::get_if<DenseLayer>(&layers_[l])) {
      out.push_back({prefix + "weight", dense->weight});
      continue;
    }
    const auto& moe = std::get<MoELoraLayer>(layers_[l]);
    out.push_back({prefix + "base", moe.base});
    if (moe.gate) out.push_back({prefix + "gate", moe.gate->weight});
    for (std::size_t i = 0; i < moe.experts.size(); ++i) {
      const std::string e = prefix + "experts." + std::to_string(i) + ".";
      out.push_back({e + "A", moe.experts[i].a});
      out.push_back({e + "B", moe.experts[i].b});
    }
  }
  return out;
}

ToyModel ToyModel::from_tensors(const TrainConfig& cfg, const Checkpoint& checkpoint) {
  SeededRng scratch(0);
  ToyModel model = build(cfg, scratch);
  for (std::size_t l = 0; l < model.layers_.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    auto& moe = std::get<MoELoraLayer>(model.layers_[l]);
    auto load = [&](const std::string& name, Tensor2D& into) {
      const Tensor2D& t = checkpoint.tensor(name);
      if (!t.same_shape(into)) {
        throw IoError("checkpoint tensor " + name + " is " + t.shape_string() + ", expected " +
                      into.shape_string());
      }
      into = t;
    };
    load(prefix + "base", moe.base);
    if (moe.gate) load(prefix + "gate", moe.gate->weight);
    for (std::size_t i = 0; i < moe.experts.size(); ++i) {
      const std::string e = prefix + "experts." + std::to_string(i) + ".";
      load(e + "A", moe.experts[i].a);
      load(e + "B", moe.experts[i].b);
    }
  }
  return model;
}

std::vector<Tensor2D> collect_gradients(const ToyModel& model,
                                        const std::vector<LayerBinding>& bindings,
                                        const Gradients& grads) {
  std::vector<Tensor2D> out;
  std::size_t b = 0;
  for (const auto& layer : model.layers()) {
    const auto* moe = std::get_if<MoELoraLayer>(&layer);
    if (!moe) continue;
    const LayerBinding& binding = bindings.at(b++);
    auto grab = [&](Var v, const Tensor2D& shape) {
      out.push_back(grads.has(v) ? grads.of(v) : Tensor2D(shape.rows(), shape.cols()));
    };
    if (moe->gate) grab(*binding.gate, moe->gate->weight);
    for (std::size_t i = 0; i < moe->experts.size(); ++i) {
      grab(binding.experts[i].a, moe->experts[i].a);
      grab(binding.experts[i].b, moe->experts[i].b);
    }
  }
  return out;
}

}  // namespace moelora
