// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/trainer.hpp"

#include <cmath>
#include <string>

#include "moelora/error.hpp"

namespace moelora {

namespace {

// Independent RNG streams derived from the run seed.
constexpr std::uint64_t kModelStream = 2;
constexpr std::uint64_t kBatchStream = 3;
constexpr std::uint64_t kEvalStream = 4;
constexpr std::uint64_t kDropoutStream = 5;

// Cap on outputs per expert fed to the O(N^2) separation score.
constexpr std::size_t kSeparationSamples = 256;

SeededRng stream(const TrainConfig& cfg, std::uint64_t id) { return SeededRng(cfg.seed).fork(id); }

double mse(const Tensor2D& pred, const Tensor2D& target) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    s += e * e;
  }
  return s / static_cast<double>(pred.size());
}

}  // namespace

nlohmann::json to_json(const StepReport& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["task_loss"] = r.task_loss;
  j["balance_loss"] = r.balance_loss;
  j["contrastive_loss"] = r.contrastive_loss;
  j["total_loss"] = r.total_loss;
  return nlohmann::json(j);
}

std::string to_jsonl(const StepReport& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["task_loss"] = r.task_loss;
  j["balance_loss"] = r.balance_loss;
  j["contrastive_loss"] = r.contrastive_loss;
  j["total_loss"] = r.total_loss;
  return j.dump();
}

Optimizer::Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {}

void Optimizer::apply(std::span<Tensor2D* const> params, std::span<const Tensor2D> grads) {
  if (params.size() != grads.size()) {
    throw DimensionError("optimizer: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (kind_ == OptimizerKind::kSgd) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      require_same_shape(*params[p], grads[p], "optimizer");
      Tensor2D& w = *params[p];
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * grads[p][i];
    }
    return;
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  if (m_.empty()) {
    for (Tensor2D* p : params) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    require_same_shape(*params[p], grads[p], "optimizer");
    Tensor2D& w = *params[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grads[p][i];
      m_[p][i] = kBeta1 * m_[p][i] + (1.0 - kBeta1) * g;
      v_[p][i] = kBeta2 * v_[p][i] + (1.0 - kBeta2) * g * g;
      w[i] -= lr_ * (m_[p][i] / c1) / (std::sqrt(v_[p][i] / c2) + kEps);
    }
  }
}

double EvalReport::separation_ratio() const {
  const auto sep = routing.mean_separation();
  return sep ? sep->ratio() : std::nan("");
}

EvalReport evaluate(const ToyModel& model, const SyntheticTask& task, const TrainConfig& cfg,
                    std::size_t num_batches, RoutingTracer* tracer) {
  if (num_batches == 0) throw ParameterError("evaluate: num_batches must be >= 1");
  const bool moe = cfg.adapter == AdapterKind::kMoELora;
  const std::size_t n = moe ? cfg.n_experts : 1;
  const std::size_t k = moe ? cfg.top_k : 1;
  RoutingTracer local(n, k);
  SeededRng rng = stream(cfg, kEvalStream);
  SeededRng unused_dropout(0);

  const std::size_t adapted = model.num_adapted();
  std::vector<std::vector<Tensor2D>> samples(adapted, std::vector<Tensor2D>(n));
  std::vector<std::size_t> layer_ids;
  double loss = 0.0, base_loss = 0.0;
  for (std::size_t b = 0; b < num_batches; ++b) {
    Batch batch = generate_batch(task, cfg.batch_size, rng);
    Tape tape;
    ModelForward fwd = model.forward(tape.constant(batch.x), unused_dropout, false);
    loss += mse(fwd.output.value(), batch.y);
    base_loss += mse(model.base_forward(batch.x), batch.y);
    layer_ids = fwd.adapted_index;

    for (std::size_t a = 0; a < adapted; ++a) {
      const LayerOutput& lo = fwd.adapted[a];
      const DispatchResult& dr = lo.dispatch;
      for (std::size_t t = 0; t < dr.num_tokens(); ++t) {
        RoutingRecord rec;
        rec.step = b;
        rec.layer = fwd.adapted_index[a];
        rec.token = t;
        rec.token_type = std::to_string(batch.cluster_ids[t]);
        auto probs = dr.gate_probs.row(t);
        rec.probs.assign(probs.begin(), probs.end());
        rec.selected = dr.selected[t];
        local.record(rec);
        if (tracer) tracer->record(std::move(rec));
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (!lo.expert_outputs[i]) continue;
        Tensor2D& acc = samples[a][i];
        const Tensor2D& out = lo.expert_outputs[i]->value();
        const std::size_t room = kSeparationSamples - std::min(kSeparationSamples, acc.rows());
        const std::size_t take = std::min(room, out.rows());
        if (take == 0) continue;
        Tensor2D grown(acc.rows() + take, out.cols());
        std::copy(acc.data().begin(), acc.data().end(), grown.data().begin());
        std::copy_n(out.data().begin(), take * out.cols(), grown.data().begin() + acc.size());
        acc = std::move(grown);
      }
    }
  }

  EvalReport report;
  report.task_loss = loss / static_cast<double>(num_batches);
  report.base_loss = base_loss / static_cast<double>(num_batches);
  report.routing = summarize(local);
  for (std::size_t a = 0; a < adapted; ++a) {
    try {
      report.routing.layers.at(layer_ids[a]).separation = expert_separation_score(samples[a]);
    } catch (const ParameterError&) {
      // Too few non-zero outputs (fresh adapters or a single expert).
    }
  }
  return report;
}

Trainer::Trainer(TrainConfig cfg) : Trainer(cfg, [&] {
  SeededRng rng = stream(cfg, kModelStream);
  return ToyModel::build(cfg, rng);
}(), 0) {}

Trainer::Trainer(TrainConfig cfg, ToyModel model, std::uint64_t step)
    : cfg_(std::move(cfg)),
      task_(SyntheticTask::generate(cfg_.task_spec())),
      model_(std::move(model)),
      optimizer_(cfg_.optimizer, cfg_.learning_rate),
      step_(step) {
  cfg_.validate();
  cfg_.aux.validate();
  const std::size_t n = cfg_.adapter == AdapterKind::kMoELora ? cfg_.n_experts : 1;
  queues_.assign(model_.num_adapted(),
                 std::vector<ExpertQueue>(n, ExpertQueue(cfg_.aux.queue_capacity,
                                                         cfg_.aux.normalize_embeddings)));
}

Trainer Trainer::from_checkpoint(const Checkpoint& checkpoint) {
  TrainConfig cfg;
  std::uint64_t step = 0;
  try {
    cfg = apply_config_json(TrainConfig{}, checkpoint.metadata.at("config"));
    step = checkpoint.metadata.at("step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint metadata: ") + e.what());
  }
  ToyModel model = ToyModel::from_tensors(cfg, checkpoint);
  return Trainer(std::move(cfg), std::move(model), step);
}

StepReport Trainer::step() {
  SeededRng rng = stream(cfg_, kBatchStream).fork(step_);
  return train_step(generate_batch(task_, cfg_.batch_size, rng));
}

StepReport Trainer::train_step(const Batch& batch) {
  SeededRng dropout_rng = stream(cfg_, kDropoutStream).fork(step_);
  tape_.reset();
  std::vector<LayerBinding> bindings;
  ModelForward fwd = model_.forward(tape_.constant(batch.x), dropout_rng, true, &bindings);
  Var task_loss = mean(square(sub(fwd.output, tape_.constant(batch.y))));

  StepReport report;
  report.step = step_;
  report.task_loss = task_loss.value().item();
  Var total = task_loss;

  const bool moe = cfg_.adapter == AdapterKind::kMoELora;
  std::vector<std::vector<Tensor2D>> outputs(fwd.adapted.size());
  if (moe) {
    for (std::size_t a = 0; a < fwd.adapted.size(); ++a) {
      const LayerOutput& lo = fwd.adapted[a];
      Var balance = load_balance_loss(lo.gate_probs, lo.dispatch, cfg_.aux.balance_count_topk);
      Var contrast = experts_contrastive_loss(tape_, lo.expert_outputs, queues_[a], cfg_.aux.tau,
                                              cfg_.aux.normalize_embeddings);
      total = add(total, auxiliary_loss(balance, contrast, cfg_.aux));
      report.balance_loss += balance.value().item();
      report.contrastive_loss += contrast.value().item();
      for (const auto& out : lo.expert_outputs) {
        outputs[a].push_back(out ? out->value() : Tensor2D(0, model_.dim()));
      }
    }
  }
  report.total_loss = total.value().item();
  if (!std::isfinite(report.total_loss) || !std::isfinite(report.task_loss)) {
    throw NumericError("non-finite loss at step " + std::to_string(step_));
  }

  Gradients grads = tape_.backward(total);
  std::vector<Tensor2D> g = collect_gradients(model_, bindings, grads);
  if (cfg_.grad_clip > 0.0) {
    double sq = 0.0;
    for (const Tensor2D& t : g)
      for (double v : t.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip) {
      for (Tensor2D& t : g) t = scale(t, cfg_.grad_clip / norm);
    }
  }
  std::vector<Tensor2D*> params = model_.trainable();
  optimizer_.apply(params, g);

  // Queues see this step's outputs only after its loss was computed.
  if (moe) {
    for (std::size_t a = 0; a < fwd.adapted.size(); ++a) {
      update_queues(queues_[a], outputs[a], fwd.adapted[a].dispatch);
    }
  }
  ++step_;
  return report;
}

std::vector<StepReport> Trainer::run(std::optional<std::size_t> steps,
                                     const std::function<void(const StepReport&)>& on_step) {
  const std::size_t total = steps.value_or(cfg_.steps);
  std::vector<StepReport> reports;
  reports.reserve(total);
  for (std::size_t s = 0; s < total; ++s) {
    reports.push_back(step());
    if (on_step) on_step(reports.back());
  }
  return reports;
}

EvalReport Trainer::evaluate(std::size_t num_batches, RoutingTracer* tracer) const {
  return moelora::evaluate(model_, task_, cfg_, num_batches, tracer);
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint cp;
  cp.metadata["config"] = to_json(cfg_);
  cp.metadata["seed"] = cfg_.seed;
  cp.metadata["step"] = step_;
  cp.metadata["trainable_params"] = cfg_.trainable_params();
  cp.tensors = model_.named_tensors();
  return cp;
}

}  // namespace moelora
