// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelora/checkpoint.hpp"
#include "moelora/config.hpp"
#include "moelora/losses.hpp"
#include "moelora/model.hpp"
#include "moelora/task.hpp"
#include "moelora/tracer.hpp"

namespace moelora {

struct StepReport {
  std::uint64_t step = 0;
  double task_loss = 0.0;
  double balance_loss = 0.0;      // summed over adapted layers
  double contrastive_loss = 0.0;  // summed over adapted layers
  double total_loss = 0.0;

  friend bool operator==(const StepReport&, const StepReport&) = default;
};

nlohmann::json to_json(const StepReport& report);
/// One JSON object per line, keys in fixed order.
std::string to_jsonl(const StepReport& report);

/// Plain SGD or Adam (beta1 0.9, beta2 0.999, eps 1e-8) over a fixed list of
/// tensors.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate);

  void apply(std::span<Tensor2D* const> params, std::span<const Tensor2D> grads);

 private:
  OptimizerKind kind_;
  double lr_;
  std::uint64_t t_ = 0;
  std::vector<Tensor2D> m_;
  std::vector<Tensor2D> v_;
};

struct EvalReport {
  double task_loss = 0.0;
  double base_loss = 0.0;  // the frozen network on the same batches
  RoutingSummary routing;

  double separation_ratio() const;
};

/// Eval mode: dropout off, queues untouched. Batches come from a stream
/// derived from cfg.seed only, so repeated calls agree exactly. Routing
/// records are appended to `tracer` when given.
EvalReport evaluate(const ToyModel& model, const SyntheticTask& task, const TrainConfig& cfg,
                    std::size_t num_batches, RoutingTracer* tracer = nullptr);

/// One training run: task, model, optimizer state and contrastive queues.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);
  /// Resumes from a checkpoint written by checkpoint(); queues and optimizer
  /// moments start empty.
  static Trainer from_checkpoint(const Checkpoint& checkpoint);

  /// Draws the next batch and trains on it.
  StepReport step();
  /// Forward, task loss plus the auxiliary loss of every adapted layer,
  /// backward, optimizer update, then queue insertion. NumericError naming
  /// the step on a non-finite loss.
  StepReport train_step(const Batch& batch);
  /// Runs cfg.steps steps (or `steps` when given).
  std::vector<StepReport> run(std::optional<std::size_t> steps = std::nullopt,
                              const std::function<void(const StepReport&)>& on_step = {});

  EvalReport evaluate(std::size_t num_batches, RoutingTracer* tracer = nullptr) const;
  Checkpoint checkpoint() const;

  const TrainConfig& config() const noexcept { return cfg_; }
  const ToyModel& model() const noexcept { return model_; }
  ToyModel& model() noexcept { return model_; }
  const SyntheticTask& task() const noexcept { return task_; }
  std::uint64_t steps_done() const noexcept { return step_; }
  const std::vector<ExpertQueue>& queues(std::size_t adapted_layer) const {
    return queues_.at(adapted_layer);
  }

 private:
  Trainer(TrainConfig cfg, ToyModel model, std::uint64_t step);

  TrainConfig cfg_;
  SyntheticTask task_;
  ToyModel model_;
  Optimizer optimizer_;
  std::vector<std::vector<ExpertQueue>> queues_;
  Tape tape_;
  std::uint64_t step_ = 0;
};

}  // namespace moelora
