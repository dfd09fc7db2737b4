// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "moelora/autodiff.hpp"
#include "moelora/error.hpp"
#include "support/gradcheck.hpp"

namespace moelora {
namespace {

using testing::gradcheck;
using testing::positive_tensor;
using testing::random_tensor;

constexpr int kTrials = 20;
constexpr double kTolerance = 1e-5;

// Reduces any output to a scalar through fixed random weights so every
// output element reaches the gradient.
Var project(Tape& tape, Var v, std::uint64_t seed) {
  SeededRng rng(seed);
  return sum(mul(v, tape.constant(random_tensor(v.rows(), v.cols(), rng))));
}

struct Shape {
  std::size_t rows, cols;
};

Shape random_shape(SeededRng& rng, std::size_t max_dim = 6) {
  return {1 + rng.uniform_index(max_dim), 1 + rng.uniform_index(max_dim)};
}

void expect_passes(const testing::ScalarFn& f, const std::vector<Tensor2D>& inputs,
                   const std::string& label) {
  const auto r = gradcheck(f, inputs);
  EXPECT_LT(r.max_rel_error, kTolerance) << label << " at " << r.worst;
}

TEST(Gradients, Matmul) {
  SeededRng rng(1);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, k] = random_shape(rng);
    const std::size_t n = 1 + rng.uniform_index(6);
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, matmul(p[0], p[1]), 100 + t);
    }, {random_tensor(m, k, rng), random_tensor(k, n, rng)}, "matmul");
  }
}

TEST(Gradients, Transpose) {
  SeededRng rng(2);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, transpose(p[0]), 200 + t);
    }, {random_tensor(m, n, rng)}, "transpose");
  }
}

TEST(Gradients, ElementwiseBinary) {
  SeededRng rng(3);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    const std::vector<Tensor2D> in = {random_tensor(m, n, rng), random_tensor(m, n, rng)};
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, add(p[0], p[1]), 300 + t);
    }, in, "add");
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, sub(p[0], p[1]), 300 + t);
    }, in, "sub");
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, mul(p[0], p[1]), 300 + t);
    }, in, "mul");
  }
}

TEST(Gradients, SameVarOnBothSides) {
  SeededRng rng(4);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, mul(p[0], p[0]), 400 + t);
    }, {random_tensor(m, n, rng)}, "mul(x, x)");
  }
}

TEST(Gradients, Scale) {
  SeededRng rng(5);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    const double s = rng.normal();
    expect_passes([t, s](Tape& tape, const std::vector<Var>& p) {
      return project(tape, scale(p[0], s), 500 + t);
    }, {random_tensor(m, n, rng)}, "scale");
  }
}

TEST(Gradients, ScaleRows) {
  SeededRng rng(6);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, scale_rows(p[0], p[1]), 600 + t);
    }, {random_tensor(m, n, rng), random_tensor(m, 1, rng)}, "scale_rows");
  }
}

TEST(Gradients, UnaryMaps) {
  SeededRng rng(7);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    const Tensor2D any = random_tensor(m, n, rng);
    const Tensor2D pos = positive_tensor(m, n, rng);
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, reciprocal(p[0]), 700 + t);
    }, {pos}, "reciprocal");
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, log(p[0]), 700 + t);
    }, {pos}, "log");
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, square(p[0]), 700 + t);
    }, {any}, "square");
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, exp(p[0]), 700 + t);
    }, {any}, "exp");
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, tanh(p[0]), 700 + t);
    }, {any}, "tanh");
  }
}

TEST(Gradients, RowReductions) {
  SeededRng rng(8);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    const Tensor2D x = random_tensor(m, n, rng, 2.0);
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, softmax_rows(p[0]), 800 + t);
    }, {x}, "softmax_rows");
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, logsumexp_rows(p[0]), 800 + t);
    }, {x}, "logsumexp_rows");
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, l2_normalize_rows(p[0]), 800 + t);
    }, {x}, "l2_normalize_rows");
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      return project(tape, sum_rows(p[0]), 800 + t);
    }, {x}, "sum_rows");
    const std::size_t j = rng.uniform_index(n);
    expect_passes([t, j](Tape& tape, const std::vector<Var>& p) {
      return project(tape, column(p[0], j), 800 + t);
    }, {x}, "column");
  }
}

TEST(Gradients, RowMovement) {
  SeededRng rng(9);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    std::vector<std::size_t> idx;
    const std::size_t picks = 1 + rng.uniform_index(2 * m);
    for (std::size_t i = 0; i < picks; ++i) idx.push_back(rng.uniform_index(m));
    const Tensor2D x = random_tensor(m, n, rng);
    expect_passes([t, idx](Tape& tape, const std::vector<Var>& p) {
      return project(tape, gather_rows(p[0], idx), 900 + t);
    }, {x}, "gather_rows");

    const std::size_t target = m + rng.uniform_index(3);
    std::vector<std::size_t> dest;
    for (std::size_t i = 0; i < m; ++i) dest.push_back(rng.uniform_index(target));
    expect_passes([t, dest, target](Tape& tape, const std::vector<Var>& p) {
      return project(tape, scatter_rows(p[0], dest, target), 900 + t);
    }, {x}, "scatter_rows");

    const std::size_t m2 = 1 + rng.uniform_index(4);
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      const Var parts[] = {p[0], p[1]};
      return project(tape, concat_rows(parts), 900 + t);
    }, {x, random_tensor(m2, n, rng)}, "concat_rows");
  }
}

TEST(Gradients, FullReductions) {
  SeededRng rng(10);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    const Tensor2D x = random_tensor(m, n, rng);
    expect_passes([](Tape&, const std::vector<Var>& p) { return sum(p[0]); }, {x}, "sum");
    expect_passes([](Tape&, const std::vector<Var>& p) { return mean(p[0]); }, {x}, "mean");
  }
}

TEST(Gradients, DropoutWithCapturedMask) {
  SeededRng rng(11);
  for (int t = 0; t < kTrials; ++t) {
    const auto [m, n] = random_shape(rng);
    expect_passes([t](Tape& tape, const std::vector<Var>& p) {
      SeededRng mask_rng(1100 + t);
      return project(tape, dropout(p[0], 0.3, mask_rng, true), 1100 + t);
    }, {random_tensor(m, n, rng)}, "dropout");
  }
}

TEST(Gradients, Composite) {
  SeededRng rng(12);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t T = 2 + rng.uniform_index(5), d = 2 + rng.uniform_index(14);
    expect_passes([](Tape& tape, const std::vector<Var>& p) {
      Var h = tanh(matmul(p[0], p[1]));
      Var w = softmax_rows(h);
      return mean(square(sub(scale_rows(h, reciprocal(sum_rows(exp(w)))), tape.constant(
          Tensor2D(h.rows(), h.cols(), 0.1)))));
    }, {random_tensor(T, d, rng), random_tensor(d, d, rng, 0.5)}, "composite");
  }
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape tape;
  Var c = tape.constant(Tensor2D::from_rows({{1.0, 2.0}}));
  Var p = tape.parameter(Tensor2D::from_rows({{3.0, 4.0}}));
  Gradients g = tape.backward(sum(mul(c, p)));
  EXPECT_FALSE(g.has(c));
  ASSERT_TRUE(g.has(p));
  EXPECT_EQ(g.of(p), Tensor2D::from_rows({{1.0, 2.0}}));
}

TEST(Tape, FanOutAccumulates) {
  Tape tape;
  Var p = tape.parameter(Tensor2D::from_rows({{2.0}}));
  Gradients g = tape.backward(add(add(p, p), mul(p, p)));
  EXPECT_EQ(g.of(p).item(), 2.0 + 4.0);
}

TEST(Tape, BackwardConsumesTheTape) {
  Tape tape;
  Var p = tape.parameter(Tensor2D::scalar(1.0));
  Var loss = square(p);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), StateError);
  EXPECT_THROW(square(p), StateError);
}

TEST(Tape, ResetInvalidatesVars) {
  Tape tape;
  Var p = tape.parameter(Tensor2D::scalar(1.0));
  tape.reset();
  EXPECT_THROW(p.value(), StateError);
}

TEST(Tape, MixingTapesFails) {
  Tape a, b;
  Var x = a.parameter(Tensor2D::scalar(1.0));
  Var y = b.parameter(Tensor2D::scalar(1.0));
  EXPECT_THROW(add(x, y), StateError);
}

TEST(Tape, LossMustBeScalar) {
  Tape tape;
  Var p = tape.parameter(Tensor2D(2, 2, 1.0));
  EXPECT_THROW(tape.backward(p), DimensionError);
}

TEST(Ops, ShapeErrors) {
  Tape tape;
  Var a = tape.parameter(Tensor2D(2, 3));
  Var b = tape.parameter(Tensor2D(2, 3));
  EXPECT_THROW(matmul(a, b), DimensionError);
  EXPECT_THROW(add(a, tape.parameter(Tensor2D(3, 2))), DimensionError);
  EXPECT_THROW(scale_rows(a, tape.parameter(Tensor2D(3, 1))), DimensionError);
}

TEST(Ops, L2NormalizeRejectsZeroRow) {
  Tape tape;
  Var a = tape.parameter(Tensor2D::from_rows({{3.0, 4.0}, {0.0, 0.0}}));
  EXPECT_THROW(l2_normalize_rows(a), NumericError);
}

TEST(Ops, DropoutEvalIsIdentityAndTrainingIsInverted) {
  Tape tape;
  SeededRng rng(3);
  Tensor2D x(40, 50, 1.0);
  Var v = tape.parameter(x);
  EXPECT_EQ(dropout(v, 0.5, rng, false).value(), x);
  const Tensor2D y = dropout(v, 0.5, rng, true).value();
  for (double e : y.data()) EXPECT_TRUE(e == 0.0 || e == 2.0);
  EXPECT_THROW(dropout(v, 1.0, rng, true), ParameterError);
  EXPECT_THROW(dropout(v, -0.1, rng, true), ParameterError);
}

TEST(Ops, SoftmaxIsStableForLargeLogits) {
  Tape tape;
  Var a = tape.parameter(Tensor2D::from_rows({{1000.0, 1000.0}, {-1000.0, 0.0}}));
  const Tensor2D s = softmax_rows(a).value();
  EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s(1, 1), 1.0);
  const Tensor2D l = logsumexp_rows(a).value();
  EXPECT_NEAR(l(0, 0), 1000.0 + std::log(2.0), 1e-12);
}

}  // namespace
}  // namespace moelora
