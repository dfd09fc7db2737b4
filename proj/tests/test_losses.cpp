// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "moelora/error.hpp"
#include "moelora/losses.hpp"
#include "support/gradcheck.hpp"

namespace moelora {
namespace {

using testing::random_tensor;

using Vec = std::vector<double>;

Vec unit(const Vec& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  Vec out = v;
  for (double& x : out) x /= std::sqrt(sq);
  return out;
}

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Direct evaluation: f_i from argmax counts, P_i from column means,
// L = n * sum_i f_i * P_i.
double balance_by_summation(const Tensor2D& probs) {
  const std::size_t T = probs.rows(), n = probs.cols();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double f = 0.0, P = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < n; ++j)
        if (probs(t, j) > probs(t, best)) best = j;
      f += best == i ? 1.0 : 0.0;
      P += probs(t, i);
    }
    loss += (f / static_cast<double>(T)) * (P / static_cast<double>(T));
  }
  return static_cast<double>(n) * loss;
}

// Nested loops over anchors q of expert i, positives k+ in queue i and
// denominator keys k in every queue:
//   sum -log(exp(q.k+/tau) / sum_k exp(q.k/tau)) / (number of (q, k+) pairs).
double contrastive_by_loops(const std::vector<std::vector<Vec>>& anchors,
                            const std::vector<std::vector<Vec>>& queues, double tau,
                            bool normalize) {
  double total = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    for (const Vec& raw : anchors[i]) {
      const Vec q = normalize ? unit(raw) : raw;
      for (const Vec& kp : queues[i]) {
        double denom = 0.0;
        for (const auto& queue : queues)
          for (const Vec& k : queue) denom += std::exp(dot(q, k) / tau);
        total += -std::log(std::exp(dot(q, kp) / tau) / denom);
        pairs += 1.0;
      }
    }
  }
  return pairs == 0.0 ? 0.0 : total / pairs;
}

TEST(LoadBalance, UniformGatingIsExactlyOne) {
  for (std::size_t n : {1u, 2u, 4u, 8u, 16u}) {
    for (std::size_t T : {1u, 7u, 64u}) {
      Tensor2D probs(T, n, 1.0 / static_cast<double>(n));
      EXPECT_EQ(load_balance_loss_value(probs, dispatch(probs, 1)), 1.0) << n << " " << T;
    }
  }
}

TEST(LoadBalance, OneHotIsN) {
  for (std::size_t n : {2u, 3u, 8u}) {
    Tensor2D probs(10, n);
    for (std::size_t t = 0; t < 10; ++t) probs(t, 0) = 1.0;
    EXPECT_EQ(load_balance_loss_value(probs, dispatch(probs, 1)), static_cast<double>(n));
  }
}

TEST(LoadBalance, MatchesDirectSummation) {
  SeededRng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(7), T = 1 + rng.uniform_index(16);
    const std::size_t k = 1 + rng.uniform_index(n);
    Tensor2D probs = softmax_rows(random_tensor(T, n, rng, 2.0));
    const double got = load_balance_loss_value(probs, dispatch(probs, k));
    EXPECT_NEAR(got, balance_by_summation(probs), 1e-12);
    Tape tape;
    EXPECT_EQ(load_balance_loss(tape.parameter(probs), dispatch(probs, k)).value().item(), got);
  }
}

TEST(LoadBalance, ArgmaxCountRegardlessOfTopK) {
  Tensor2D probs = Tensor2D::from_rows({{0.6, 0.3, 0.1}, {0.2, 0.5, 0.3}});
  const auto f1 = load_fractions(dispatch(probs, 1));
  const auto f2 = load_fractions(dispatch(probs, 2));
  EXPECT_EQ(f1, f2);
  EXPECT_EQ(f1, (std::vector<double>{0.5, 0.5, 0.0}));
  const auto occupancy = load_fractions(dispatch(probs, 2), true);
  EXPECT_EQ(occupancy, (std::vector<double>{0.25, 0.5, 0.25}));
}

TEST(LoadBalance, PermutationInvariant) {
  SeededRng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor2D probs = softmax_rows(random_tensor(9, 5, rng));
    std::vector<std::size_t> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    Tensor2D permuted(9, 5);
    for (std::size_t t = 0; t < 9; ++t)
      for (std::size_t i = 0; i < 5; ++i) permuted(t, perm[i]) = probs(t, i);
    EXPECT_NEAR(load_balance_loss_value(probs, dispatch(probs, 2)),
                load_balance_loss_value(permuted, dispatch(permuted, 2)), 1e-14);
  }
}

TEST(LoadBalance, AtLeastOneWhenRowsAreIdentical) {
  SeededRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor2D row = softmax_rows(random_tensor(1, 6, rng));
    Tensor2D probs(12, 6);
    for (std::size_t t = 0; t < 12; ++t) std::copy(row.data().begin(), row.data().end(), probs.row(t).begin());
    EXPECT_GE(load_balance_loss_value(probs, dispatch(probs, 1)), 1.0 - 1e-12);
  }
}

TEST(LoadBalance, GradientFlowsThroughProbabilitiesOnly) {
  SeededRng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor2D probs = softmax_rows(random_tensor(6, 4, rng));
    const DispatchResult frozen = dispatch(probs, 2);
    const auto r = testing::gradcheck(
        [&](Tape&, const std::vector<Var>& p) { return load_balance_loss(p[0], frozen); }, {probs});
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
  }
}

TEST(LoadBalance, EmptyBatchIsError) {
  Tensor2D empty(0, 4);
  EXPECT_THROW(load_balance_loss_value(empty, dispatch(empty, 1)), ParameterError);
}

TEST(ExpertQueue, KeepsNewestUpToCapacity) {
  ExpertQueue q(4);
  for (int i = 1; i <= 6; ++i) EXPECT_TRUE(q.push(Vec{static_cast<double>(i)}));
  EXPECT_EQ(q.size(), 4u);
  EXPECT_EQ(q.entries(), (std::vector<Vec>{{1.0}, {1.0}, {1.0}, {1.0}}));
  ExpertQueue raw(4, false);
  for (int i = 1; i <= 6; ++i) raw.push(Vec{static_cast<double>(i)});
  EXPECT_EQ(raw.entries(), (std::vector<Vec>{{3.0}, {4.0}, {5.0}, {6.0}}));
  EXPECT_EQ(raw.as_matrix(), Tensor2D::from_rows({{3.0}, {4.0}, {5.0}, {6.0}}));
}

TEST(ExpertQueue, NormalizesAndSkipsZeros) {
  ExpertQueue q(3);
  EXPECT_TRUE(q.push(Vec{3.0, 4.0}));
  EXPECT_EQ(q.entries().front(), (Vec{0.6, 0.8}));
  EXPECT_FALSE(q.push(Vec{0.0, 0.0}));
  EXPECT_EQ(q.size(), 1u);
  EXPECT_THROW(q.push(Vec{1.0, 2.0, 3.0}), DimensionError);
  ExpertQueue none(0);
  EXPECT_FALSE(none.push(Vec{1.0}));
}

TEST(ExpertQueue, StoredVectorsHaveUnitNorm) {
  SeededRng rng(5);
  ExpertQueue q(16);
  for (int i = 0; i < 40; ++i) q.push(random_tensor(1, 7, rng, 3.0).row(0));
  for (const Vec& v : q.entries()) EXPECT_NEAR(dot(v, v), 1.0, 1e-9);
}

TEST(ExpertQueue, DeterministicUnderIdenticalPushes) {
  SeededRng a(6), b(6);
  ExpertQueue qa(5), qb(5);
  for (int i = 0; i < 12; ++i) {
    qa.push(random_tensor(1, 3, a).row(0));
    qb.push(random_tensor(1, 3, b).row(0));
  }
  EXPECT_TRUE(qa == qb);
}

TEST(ExpertQueue, UpdateQueuesRoutesRowsToTheirExpert) {
  Tensor2D probs = Tensor2D::from_rows({{0.9, 0.1}, {0.2, 0.8}, {0.7, 0.3}});
  DispatchResult d = dispatch(probs, 1);
  std::vector<ExpertQueue> queues(2, ExpertQueue(8, false));
  std::vector<Tensor2D> outputs = {Tensor2D::from_rows({{1.0}, {3.0}}),
                                   Tensor2D::from_rows({{2.0}})};
  update_queues(queues, outputs, d);
  EXPECT_EQ(queues[0].entries(), (std::vector<Vec>{{1.0}, {3.0}}));
  EXPECT_EQ(queues[1].entries(), (std::vector<Vec>{{2.0}}));
  outputs[1] = Tensor2D(2, 1, 1.0);
  EXPECT_THROW(update_queues(queues, outputs, d), DimensionError);
}

TEST(Contrastive, ClosedFormThreeVectors) {
  Tape tape;
  std::vector<ExpertQueue> queues(2, ExpertQueue(4));
  queues[0].push(Vec{1.0, 0.0});
  queues[1].push(Vec{-1.0, 0.0});
  std::vector<std::optional<Var>> outputs = {tape.parameter(Tensor2D::from_rows({{1.0, 0.0}})),
                                             std::nullopt};
  const double got = experts_contrastive_loss(tape, outputs, queues, 1.0).value().item();
  EXPECT_NEAR(got, std::log(1.0 + std::exp(-2.0)), 1e-12);
}

TEST(Contrastive, SharperTemperatureLowersTheThreeVectorLoss) {
  double previous = std::numeric_limits<double>::infinity();
  for (double tau : {2.0, 1.0, 0.5, 0.07}) {
    Tape tape;
    std::vector<ExpertQueue> queues(2, ExpertQueue(4));
    queues[0].push(Vec{1.0, 0.0});
    queues[1].push(Vec{-1.0, 0.0});
    std::vector<std::optional<Var>> outputs = {tape.parameter(Tensor2D::from_rows({{1.0, 0.0}})),
                                               std::nullopt};
    const double v = experts_contrastive_loss(tape, outputs, queues, tau).value().item();
    EXPECT_LT(v, previous);
    previous = v;
  }
}

TEST(Contrastive, MatchesNestedLoopOracle) {
  SeededRng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(4), dim = 2 + rng.uniform_index(5);
    const bool normalize = trial % 5 != 0;
    const double tau = trial % 2 == 0 ? 0.07 : rng.uniform(0.2, 2.0);
    std::vector<std::vector<Vec>> anchor_rows(n), queue_rows(n);
    std::vector<ExpertQueue> queues;
    Tape tape;
    std::vector<std::optional<Var>> outputs(n);
    std::size_t anchors_left = 8;
    for (std::size_t i = 0; i < n; ++i) {
      queues.emplace_back(8, normalize);
      const std::size_t q = rng.uniform_index(9);
      for (std::size_t j = 0; j < q; ++j) {
        Vec v(dim);
        for (double& x : v) x = rng.normal();
        queues.back().push(v);
      }
      queue_rows[i] = queues.back().entries();
      const std::size_t a = std::min<std::size_t>(anchors_left, rng.uniform_index(4));
      anchors_left -= a;
      if (a == 0) continue;
      Tensor2D t = random_tensor(a, dim, rng, normalize ? 1.0 : 0.3);
      for (std::size_t r = 0; r < a; ++r) anchor_rows[i].push_back(Vec(t.row(r).begin(), t.row(r).end()));
      outputs[i] = tape.parameter(t);
    }
    const double expected = contrastive_by_loops(anchor_rows, queue_rows, tau, normalize);
    const double got = experts_contrastive_loss(tape, outputs, queues, tau, normalize).value().item();
    if (expected == 0.0) {
      EXPECT_EQ(got, 0.0);
    } else {
      EXPECT_LT(std::abs(got - expected) / std::abs(expected), 1e-10) << "trial " << trial;
    }
  }
}

TEST(Contrastive, EmptyQueuesAndMissingPositivesContributeZero) {
  Tape tape;
  std::vector<ExpertQueue> queues(2, ExpertQueue(4));
  std::vector<std::optional<Var>> outputs = {tape.parameter(Tensor2D::from_rows({{1.0, 2.0}})),
                                             tape.parameter(Tensor2D::from_rows({{2.0, 1.0}}))};
  EXPECT_EQ(experts_contrastive_loss(tape, outputs, queues, 0.07).value().item(), 0.0);
  queues[1].push(Vec{0.0, 1.0});
  // Expert 0 has anchors but an empty queue; expert 1 has one pair.
  const double v = experts_contrastive_loss(tape, outputs, queues, 0.07).value().item();
  EXPECT_NEAR(v, 0.0, 1e-15);  // its only key is also the positive
}

TEST(Contrastive, ZeroAnchorsAreSkipped) {
  Tape tape;
  std::vector<ExpertQueue> queues(2, ExpertQueue(4));
  queues[0].push(Vec{1.0, 0.0});
  queues[1].push(Vec{-1.0, 0.0});
  std::vector<std::optional<Var>> outputs = {
      tape.parameter(Tensor2D::from_rows({{1.0, 0.0}, {0.0, 0.0}})), std::nullopt};
  const double got = experts_contrastive_loss(tape, outputs, queues, 1.0).value().item();
  EXPECT_NEAR(got, std::log(1.0 + std::exp(-2.0)), 1e-12);
}

TEST(Contrastive, NonPositiveTemperatureIsError) {
  Tape tape;
  std::vector<ExpertQueue> queues(1, ExpertQueue(4));
  std::vector<std::optional<Var>> outputs = {std::nullopt};
  EXPECT_THROW(experts_contrastive_loss(tape, outputs, queues, 0.0), ParameterError);
  EXPECT_THROW(experts_contrastive_loss(tape, outputs, queues, -1.0), ParameterError);
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  SeededRng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(3), dim = 2 + rng.uniform_index(6);
    const bool normalize = trial % 4 != 0;
    std::vector<ExpertQueue> queues;
    for (std::size_t i = 0; i < n; ++i) {
      queues.emplace_back(6, normalize);
      for (int j = 0; j < 5; ++j) queues.back().push(random_tensor(1, dim, rng).row(0));
    }
    std::vector<Tensor2D> anchors;
    for (std::size_t i = 0; i < n; ++i) anchors.push_back(random_tensor(1 + rng.uniform_index(3), dim, rng, 0.5));
    const double tau = normalize ? 0.07 : 0.5;
    const auto r = testing::gradcheck(
        [&](Tape& tape, const std::vector<Var>& p) {
          std::vector<std::optional<Var>> outputs(p.begin(), p.end());
          return experts_contrastive_loss(tape, outputs, queues, tau, normalize);
        },
        anchors);
    EXPECT_LT(r.max_rel_error, 1e-5) << "trial " << trial << " at " << r.worst;
  }
}

TEST(Contrastive, TermsAreNonNegative) {
  SeededRng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ExpertQueue> queues(3, ExpertQueue(5));
    for (auto& q : queues)
      for (int j = 0; j < 5; ++j) q.push(random_tensor(1, 4, rng).row(0));
    Tape tape;
    std::vector<std::optional<Var>> outputs;
    for (int i = 0; i < 3; ++i) outputs.push_back(tape.parameter(random_tensor(2, 4, rng)));
    EXPECT_GE(experts_contrastive_loss(tape, outputs, queues, 0.07).value().item(), 0.0);
  }
}

TEST(AuxiliaryLoss, WeightedSum) {
  AuxLossConfig cfg;
  EXPECT_DOUBLE_EQ(auxiliary_loss(1.0, 2.0, cfg), 0.03);
  cfg.alpha = cfg.beta = 0.0;
  EXPECT_EQ(auxiliary_loss(5.0, 7.0, cfg), 0.0);
  EXPECT_EQ(AuxLossConfig{}.alpha, 0.01);
  EXPECT_EQ(AuxLossConfig{}.beta, 0.01);
  EXPECT_EQ(AuxLossConfig{}.tau, 0.07);
  Tape tape;
  AuxLossConfig d;
  EXPECT_DOUBLE_EQ(auxiliary_loss(tape.parameter(Tensor2D::scalar(1.0)),
                                  tape.parameter(Tensor2D::scalar(2.0)), d)
                       .value()
                       .item(),
                   0.03);
}

TEST(Separation, IdenticalOutputsGiveZero) {
  std::vector<Tensor2D> outs = {Tensor2D(3, 4, 0.7), Tensor2D(2, 4, 0.7)};
  SeparationScore s = expert_separation_score(outs);
  EXPECT_NEAR(s.intra, 0.0, 1e-15);
  EXPECT_NEAR(s.inter, 0.0, 1e-15);
}

TEST(Separation, OrthogonalClusters) {
  std::vector<Tensor2D> outs = {Tensor2D::from_rows({{1, 0}, {2, 0}}),
                                Tensor2D::from_rows({{0, 1}, {0, 3}})};
  SeparationScore s = expert_separation_score(outs);
  EXPECT_EQ(s.intra, 0.0);
  EXPECT_EQ(s.inter, 1.0);
}

TEST(Separation, MatchesPairwiseOracle) {
  SeededRng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(3);
    std::vector<Tensor2D> outs;
    std::vector<std::pair<std::size_t, Vec>> all;
    for (std::size_t i = 0; i < n; ++i) {
      outs.push_back(random_tensor(2 + rng.uniform_index(3), 5, rng));
      for (std::size_t r = 0; r < outs.back().rows(); ++r)
        all.emplace_back(i, unit(Vec(outs.back().row(r).begin(), outs.back().row(r).end())));
    }
    double intra = 0, inter = 0, ni = 0, nx = 0;
    for (std::size_t a = 0; a < all.size(); ++a)
      for (std::size_t b = 0; b < all.size(); ++b) {
        if (a == b) continue;
        const double dist = 1.0 - dot(all[a].second, all[b].second);
        if (all[a].first == all[b].first) {
          intra += dist;
          ni += 1;
        } else {
          inter += dist;
          nx += 1;
        }
      }
    SeparationScore s = expert_separation_score(outs);
    EXPECT_NEAR(s.intra, intra / ni, 1e-13);
    EXPECT_NEAR(s.inter, inter / nx, 1e-13);
  }
}

TEST(Separation, InsufficientSamplesNameTheSide) {
  std::vector<Tensor2D> one_each = {Tensor2D(1, 2, 1.0), Tensor2D(1, 2, 2.0)};
  try {
    expert_separation_score(one_each);
    FAIL();
  } catch (const ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("intra"), std::string::npos);
  }
  std::vector<Tensor2D> single = {Tensor2D(3, 2, 1.0)};
  try {
    expert_separation_score(single);
    FAIL();
  } catch (const ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("inter"), std::string::npos);
  }
}

}  // namespace
}  // namespace moelora
