// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient checking against the tape.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "moelora/autodiff.hpp"
#include "moelora/rng.hpp"
#include "moelora/tensor.hpp"

namespace moelora::testing {

// Builds a scalar from the parameter Vars on `tape`.
using ScalarFn = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "input i, element e"
};

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor2D>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  return f(tape, vars).value().item();
}

// Error per element, scaled by the larger of the two full gradient norms
// over all inputs (floored at 1e-8).
inline GradCheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor2D>& inputs,
                                 double h = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  Var out = f(tape, vars);
  Gradients grads = tape.backward(out);

  std::vector<Tensor2D> analytic, numeric;
  double sq_analytic = 0.0, sq_numeric = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    analytic.push_back(grads.has(vars[i]) ? grads.of(vars[i])
                                          : Tensor2D(inputs[i].rows(), inputs[i].cols()));
    Tensor2D fd(inputs[i].rows(), inputs[i].cols());
    for (std::size_t e = 0; e < inputs[i].size(); ++e) {
      std::vector<Tensor2D> plus = inputs, minus = inputs;
      plus[i][e] += h;
      minus[i][e] -= h;
      fd[e] = (eval_scalar(f, plus) - eval_scalar(f, minus)) / (2.0 * h);
    }
    numeric.push_back(std::move(fd));
    sq_analytic += std::pow(frobenius_norm(analytic.back()), 2);
    sq_numeric += std::pow(frobenius_norm(numeric.back()), 2);
  }
  const double scale = std::max({std::sqrt(sq_analytic), std::sqrt(sq_numeric), 1e-8});

  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t e = 0; e < inputs[i].size(); ++e) {
      const double err = std::abs(analytic[i][e] - numeric[i][e]) / scale;
      if (err > result.max_rel_error || std::isnan(err)) {
        result.max_rel_error = std::isnan(err) ? INFINITY : err;
        result.worst = "input " + std::to_string(i) + ", element " + std::to_string(e);
      }
    }
  }
  return result;
}

inline Tensor2D random_tensor(std::size_t rows, std::size_t cols, SeededRng& rng,
                              double stddev = 1.0) {
  Tensor2D t(rows, cols);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

inline Tensor2D positive_tensor(std::size_t rows, std::size_t cols, SeededRng& rng) {
  Tensor2D t(rows, cols);
  for (double& v : t.data()) v = rng.uniform(0.5, 2.0);
  return t;
}

}  // namespace moelora::testing
