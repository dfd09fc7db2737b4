// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "moelora/rng.hpp"
#include "moelora/tensor.hpp"

namespace moelora {

class Tape;

/// Handle to a tensor recorded on a Tape. Becomes stale once the tape is
/// reset or consumed by backward(); stale handles throw StateError on use.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
  std::uint64_t generation = 0;

  const Tensor2D& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Gradients produced by one backward pass, keyed by the Vars of that pass.
class Gradients {
 public:
  bool has(Var v) const;
  /// StateError if `v` received no gradient (constant, or not reachable).
  const Tensor2D& of(Var v) const;

 private:
  friend class Tape;
  std::uint64_t generation_ = 0;
  std::vector<std::optional<Tensor2D>> grads_;
};

/// Reverse-mode record. Nodes are appended in evaluation order, which is a
/// topological order by construction. Owned by a single run; not thread-safe.
class Tape {
 public:
  /// Maps the upstream gradient to one gradient per input, in input order.
  /// An empty tensor means "no contribution".
  using BackwardFn = std::function<std::vector<Tensor2D>(const Tensor2D& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor2D value);
  Var parameter(Tensor2D value);

  /// Seeds d(loss)/d(loss) = 1 and propagates. The tape is cleared afterwards,
  /// so every Var recorded so far (including `loss`) becomes stale.
  Gradients backward(Var loss);
  void reset();

  std::size_t size() const noexcept { return nodes_.size(); }
  std::uint64_t generation() const noexcept { return generation_; }

  // Primitive authoring interface.
  Var record(Tensor2D value, std::span<const Var> inputs, BackwardFn backward);
  const Tensor2D& value(Var v) const;
  bool requires_grad(Var v) const;

 private:
  struct Node {
    Tensor2D value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check(Var v) const;
  Var push(Node node);

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 1;
};

// Differentiable primitives. Every input must live on the same tape.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// out[t, j] = a[t, j] * c[t] for a column c of shape rows x 1.
Var scale_rows(Var a, Var c);
Var reciprocal(Var a);
Var square(Var a);
Var log(Var a);
Var exp(Var a);
Var tanh(Var a);
Var softmax_rows(Var a);
Var logsumexp_rows(Var a);
/// Rows scaled to unit L2 norm; NumericError on a zero row.
Var l2_normalize_rows(Var a);
/// rows x cols -> rows x 1.
Var sum_rows(Var a);
/// rows x cols -> rows x 1, column j.
Var column(Var a, std::size_t j);
Var gather_rows(Var a, std::span<const std::size_t> index);
/// Scatter-add of a's rows into a zero matrix with `rows` rows.
Var scatter_rows(Var a, std::span<const std::size_t> index, std::size_t rows);
Var concat_rows(std::span<const Var> parts);
Var sum(Var a);
Var mean(Var a);
/// Inverted dropout. Training: entries zeroed with probability p, survivors
/// scaled by 1/(1-p); the mask is captured for the backward pass. Eval: identity.
Var dropout(Var a, double p, SeededRng& rng, bool training);

}  // namespace moelora
