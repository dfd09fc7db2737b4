// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/losses.hpp"

#include <cmath>
#include <string>

#include "moelora/error.hpp"

namespace moelora {

void AuxLossConfig::validate() const {
  if (!(tau > 0.0)) throw ParameterError("tau must be positive, got " + std::to_string(tau));
  if (!(alpha >= 0.0)) throw ParameterError("alpha must be non-negative");
  if (!(beta >= 0.0)) throw ParameterError("beta must be non-negative");
}

std::vector<double> load_fractions(const DispatchResult& assignments, bool count_topk) {
  const std::size_t tokens = assignments.num_tokens();
  const std::size_t n = assignments.num_experts();
  if (tokens == 0) throw ParameterError("load balance over an empty batch");
  std::vector<double> counts(n, 0.0);
  double denom = static_cast<double>(tokens);
  if (count_topk) {
    for (const auto& sel : assignments.selected)
      for (std::size_t i : sel) counts[i] += 1.0;
    denom *= static_cast<double>(assignments.selected.front().size());
  } else {
    for (const auto& sel : assignments.selected) counts[sel.front()] += 1.0;
  }
  for (double& c : counts) c /= denom;
  return counts;
}

namespace {

void check_probs(const Tensor2D& probs, const DispatchResult& assignments) {
  if (probs.rows() == 0) throw ParameterError("load balance over an empty batch");
  if (probs.rows() != assignments.num_tokens() || probs.cols() != assignments.num_experts()) {
    throw DimensionError("load balance: gate probabilities " + probs.shape_string() +
                         " do not match dispatch of " + std::to_string(assignments.num_tokens()) +
                         " tokens over " + std::to_string(assignments.num_experts()) + " experts");
  }
}

double balance_value(const Tensor2D& probs, const std::vector<double>& f) {
  const std::size_t n = probs.cols();
  const double tokens = static_cast<double>(probs.rows());
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double col = 0.0;
    for (std::size_t t = 0; t < probs.rows(); ++t) col += probs(t, i);
    dot += f[i] * (col / tokens);
  }
  return static_cast<double>(n) * dot;
}

}  // namespace

double load_balance_loss_value(const Tensor2D& gate_probs, const DispatchResult& assignments,
                               bool count_topk) {
  check_probs(gate_probs, assignments);
  return balance_value(gate_probs, load_fractions(assignments, count_topk));
}

Var load_balance_loss(Var gate_probs, const DispatchResult& assignments, bool count_topk) {
  const Tensor2D& probs = gate_probs.value();
  check_probs(probs, assignments);
  std::vector<double> f = load_fractions(assignments, count_topk);
  const double value = balance_value(probs, f);
  const std::size_t tokens = probs.rows();
  const std::size_t n = probs.cols();
  const Var inputs[] = {gate_probs};
  return gate_probs.tape->record(Tensor2D::scalar(value), inputs, [f, tokens, n](const Tensor2D& g) {
    Tensor2D grad(tokens, n);
    const double c = g.item() * static_cast<double>(n) / static_cast<double>(tokens);
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t i = 0; i < n; ++i) grad(t, i) = c * f[i];
    return std::vector<Tensor2D>{std::move(grad)};
  });
}

ExpertQueue::ExpertQueue(std::size_t capacity, bool normalize)
    : capacity_(capacity), normalize_(normalize) {
  slots_.reserve(capacity);
}

bool ExpertQueue::push(std::span<const double> v) {
  if (capacity_ == 0) return false;
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (sq == 0.0) return false;
  if (count_ > 0 && v.size() != slots_.front().size()) {
    throw DimensionError("queue holds " + std::to_string(slots_.front().size()) +
                         "-dim vectors, got " + std::to_string(v.size()));
  }
  std::vector<double> entry(v.begin(), v.end());
  if (normalize_) {
    const double norm = std::sqrt(sq);
    for (double& x : entry) x /= norm;
  }
  if (slots_.size() < capacity_) {
    slots_.push_back(std::move(entry));
  } else {
    slots_[head_] = std::move(entry);
  }
  head_ = (head_ + 1) % capacity_;
  if (count_ < capacity_) ++count_;
  return true;
}

std::vector<std::vector<double>> ExpertQueue::entries() const {
  std::vector<std::vector<double>> out;
  out.reserve(count_);
  const std::size_t start = count_ < capacity_ ? 0 : head_;
  for (std::size_t k = 0; k < count_; ++k) out.push_back(slots_[(start + k) % slots_.size()]);
  return out;
}

Tensor2D ExpertQueue::as_matrix() const {
  if (count_ == 0) return {};
  const std::size_t dim = slots_.front().size();
  Tensor2D out(count_, dim);
  const std::size_t start = count_ < capacity_ ? 0 : head_;
  for (std::size_t k = 0; k < count_; ++k) {
    const auto& src = slots_[(start + k) % slots_.size()];
    std::copy(src.begin(), src.end(), out.row(k).begin());
  }
  return out;
}

bool operator==(const ExpertQueue& a, const ExpertQueue& b) {
  return a.capacity_ == b.capacity_ && a.normalize_ == b.normalize_ && a.entries() == b.entries();
}

void update_queues(std::vector<ExpertQueue>& queues, std::span<const Tensor2D> expert_outputs,
                   const DispatchResult& assignments) {
  if (queues.size() != expert_outputs.size() || queues.size() != assignments.num_experts()) {
    throw DimensionError("update_queues: " + std::to_string(queues.size()) + " queues, " +
                         std::to_string(expert_outputs.size()) + " output blocks, " +
                         std::to_string(assignments.num_experts()) + " experts");
  }
  for (std::size_t i = 0; i < queues.size(); ++i) {
    const Tensor2D& out = expert_outputs[i];
    if (out.rows() != assignments.per_expert_tokens[i].size()) {
      throw DimensionError("update_queues: expert " + std::to_string(i) + " has " +
                           std::to_string(out.rows()) + " output rows for " +
                           std::to_string(assignments.per_expert_tokens[i].size()) + " tokens");
    }
    for (std::size_t r = 0; r < out.rows(); ++r) queues[i].push(out.row(r));
  }
}

Var experts_contrastive_loss(Tape& tape, std::span<const std::optional<Var>> current_outputs,
                             std::span<const ExpertQueue> queues, double tau, bool normalize) {
  if (!(tau > 0.0)) throw ParameterError("tau must be positive, got " + std::to_string(tau));
  if (current_outputs.size() != queues.size()) {
    throw DimensionError("contrastive loss: " + std::to_string(current_outputs.size()) +
                         " output blocks for " + std::to_string(queues.size()) + " queues");
  }

  std::vector<Tensor2D> keys;
  std::size_t total_keys = 0;
  for (const auto& q : queues) {
    keys.push_back(q.as_matrix());
    total_keys += q.size();
  }
  if (total_keys == 0) return tape.constant(Tensor2D::scalar(0.0));

  std::size_t dim = 0;
  for (const auto& k : keys) {
    if (k.empty()) continue;
    if (dim != 0 && k.cols() != dim) throw DimensionError("contrastive loss: queue widths differ");
    dim = k.cols();
  }
  Tensor2D all_keys(total_keys, dim);
  std::size_t offset = 0;
  for (const auto& k : keys) {
    std::copy(k.data().begin(), k.data().end(), all_keys.data().begin() + offset * dim);
    offset += k.rows();
  }
  Var all_keys_t = tape.constant(transpose(all_keys));
  const double inv_tau = 1.0 / tau;

  std::optional<Var> total;
  double pairs = 0.0;
  for (std::size_t i = 0; i < queues.size(); ++i) {
    if (!current_outputs[i] || keys[i].empty()) continue;
    Var out = *current_outputs[i];
    if (out.cols() != dim) {
      throw DimensionError("contrastive loss: expert " + std::to_string(i) + " outputs " +
                           out.value().shape_string() + " but queues hold " +
                           std::to_string(dim) + "-dim vectors");
    }
    std::vector<std::size_t> live;
    for (std::size_t r = 0; r < out.rows(); ++r) {
      double sq = 0.0;
      for (double v : out.value().row(r)) sq += v * v;
      if (sq > 0.0) live.push_back(r);
    }
    if (live.empty()) continue;
    Var anchors = live.size() == out.rows() ? out : gather_rows(out, live);
    if (normalize) anchors = l2_normalize_rows(anchors);

    const double positives = static_cast<double>(keys[i].rows());
    Var lse = logsumexp_rows(scale(matmul(anchors, all_keys_t), inv_tau));
    Tensor2D key_sum(dim, 1);
    for (std::size_t r = 0; r < keys[i].rows(); ++r)
      for (std::size_t c = 0; c < dim; ++c) key_sum(c, 0) += keys[i](r, c);
    Var pos = scale(matmul(anchors, tape.constant(std::move(key_sum))), inv_tau);
    Var term = sub(scale(sum(lse), positives), sum(pos));
    total = total ? add(*total, term) : term;
    pairs += static_cast<double>(live.size()) * positives;
  }
  if (!total) return tape.constant(Tensor2D::scalar(0.0));
  return scale(*total, 1.0 / pairs);
}

Var auxiliary_loss(Var balance, Var contrastive, const AuxLossConfig& cfg) {
  return add(scale(balance, cfg.alpha), scale(contrastive, cfg.beta));
}

double auxiliary_loss(double balance, double contrastive, const AuxLossConfig& cfg) {
  return cfg.alpha * balance + cfg.beta * contrastive;
}

SeparationScore expert_separation_score(std::span<const Tensor2D> outputs) {
  struct Unit {
    std::size_t expert;
    std::vector<double> v;
  };
  std::vector<Unit> units;
  std::vector<std::size_t> per_expert(outputs.size(), 0);
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    for (std::size_t r = 0; r < outputs[i].rows(); ++r) {
      auto row = outputs[i].row(r);
      double sq = 0.0;
      for (double v : row) sq += v * v;
      if (sq == 0.0) continue;
      const double norm = std::sqrt(sq);
      Unit u{i, std::vector<double>(row.begin(), row.end())};
      for (double& v : u.v) v /= norm;
      units.push_back(std::move(u));
      ++per_expert[i];
    }
  }
  bool intra_ok = false;
  std::size_t populated = 0;
  for (std::size_t c : per_expert) {
    intra_ok = intra_ok || c >= 2;
    populated += c > 0 ? 1 : 0;
  }
  if (!intra_ok) throw ParameterError("separation score: intra side needs an expert with >= 2 outputs");
  if (populated < 2) throw ParameterError("separation score: inter side needs >= 2 experts with outputs");

  double intra = 0.0, inter = 0.0;
  double n_intra = 0.0, n_inter = 0.0;
  for (std::size_t a = 0; a < units.size(); ++a) {
    for (std::size_t b = a + 1; b < units.size(); ++b) {
      double cos = 0.0;
      for (std::size_t j = 0; j < units[a].v.size(); ++j) cos += units[a].v[j] * units[b].v[j];
      const double dist = 1.0 - cos;
      if (units[a].expert == units[b].expert) {
        intra += dist;
        n_intra += 1.0;
      } else {
        inter += dist;
        n_inter += 1.0;
      }
    }
  }
  return {intra / n_intra, inter / n_inter};
}

}  // namespace moelora
