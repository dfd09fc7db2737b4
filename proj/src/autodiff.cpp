// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "moelora/error.hpp"

namespace moelora {

const Tensor2D& Var::value() const {
  if (tape == nullptr) throw StateError("use of an unbound Var");
  return tape->value(*this);
}

bool Gradients::has(Var v) const {
  return v.generation == generation_ && v.id < grads_.size() && grads_[v.id].has_value();
}

const Tensor2D& Gradients::of(Var v) const {
  if (v.generation != generation_) throw StateError("gradient lookup with a Var from another pass");
  if (v.id >= grads_.size() || !grads_[v.id]) {
    throw StateError("no gradient recorded for node " + std::to_string(v.id));
  }
  return *grads_[v.id];
}

void Tape::check(Var v) const {
  if (v.tape != this) throw StateError("Var belongs to a different tape");
  if (v.generation != generation_ || v.id >= nodes_.size()) {
    throw StateError("stale Var: the tape was reset or already consumed by backward()");
  }
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1, generation_};
}

Var Tape::constant(Tensor2D value) {
  return push(Node{std::move(value), {}, nullptr, false});
}

Var Tape::parameter(Tensor2D value) {
  return push(Node{std::move(value), {}, nullptr, true});
}

const Tensor2D& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

Var Tape::record(Tensor2D value, std::span<const Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    check(in);
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

void Tape::reset() {
  nodes_.clear();
  ++generation_;
}

Gradients Tape::backward(Var loss) {
  check(loss);
  const Tensor2D& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw DimensionError("backward: loss must be 1x1, got " + lv.shape_string());
  }
  Gradients out;
  out.generation_ = generation_;
  out.grads_.resize(nodes_.size());
  if (nodes_[loss.id].requires_grad) out.grads_[loss.id] = Tensor2D::scalar(1.0);

  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!out.grads_[i] || !node.backward) continue;
    std::vector<Tensor2D> in_grads = node.backward(*out.grads_[i]);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t src = node.inputs[k];
      if (k >= in_grads.size() || in_grads[k].empty() || !nodes_[src].requires_grad) continue;
      if (!in_grads[k].same_shape(nodes_[src].value)) {
        throw DimensionError("backward: gradient shape " + in_grads[k].shape_string() +
                             " does not match node shape " + nodes_[src].value.shape_string());
      }
      if (out.grads_[src]) {
        auto& acc = *out.grads_[src];
        for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += in_grads[k][e];
      } else {
        out.grads_[src] = std::move(in_grads[k]);
      }
    }
  }
  reset();
  return out;
}

namespace {

Tape& common_tape(std::initializer_list<Var> vars) {
  Tape* tape = vars.begin()->tape;
  if (tape == nullptr) throw StateError("use of an unbound Var");
  for (const Var& v : vars) {
    if (v.tape != tape) throw StateError("operands live on different tapes");
  }
  return *tape;
}

template <typename F>
Tensor2D map(const Tensor2D& a, F f) {
  Tensor2D out = a;
  for (double& v : out.data()) v = f(v);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = common_tape({a, b});
  Tensor2D out = matmul(a.value(), b.value());
  const bool grad_a = tape.requires_grad(a);
  const bool grad_b = tape.requires_grad(b);
  Tensor2D bt = grad_a ? transpose(b.value()) : Tensor2D{};
  Tensor2D at = grad_b ? transpose(a.value()) : Tensor2D{};
  const Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [at = std::move(at), bt = std::move(bt)](const Tensor2D& g) {
    return std::vector<Tensor2D>{bt.empty() ? Tensor2D{} : matmul(g, bt),
                                 at.empty() ? Tensor2D{} : matmul(at, g)};
  });
}

Var transpose(Var a) {
  Tape& tape = common_tape({a});
  const Var inputs[] = {a};
  return tape.record(transpose(a.value()), inputs, [](const Tensor2D& g) {
    return std::vector<Tensor2D>{transpose(g)};
  });
}

Var add(Var a, Var b) {
  Tape& tape = common_tape({a, b});
  const Var inputs[] = {a, b};
  return tape.record(add(a.value(), b.value()), inputs, [](const Tensor2D& g) {
    return std::vector<Tensor2D>{g, g};
  });
}

Var sub(Var a, Var b) {
  Tape& tape = common_tape({a, b});
  const Var inputs[] = {a, b};
  return tape.record(sub(a.value(), b.value()), inputs, [](const Tensor2D& g) {
    return std::vector<Tensor2D>{g, scale(g, -1.0)};
  });
}

Var mul(Var a, Var b) {
  Tape& tape = common_tape({a, b});
  Tensor2D av = a.value();
  Tensor2D bv = b.value();
  Tensor2D out = hadamard(av, bv);
  const Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [av, bv](const Tensor2D& g) {
    return std::vector<Tensor2D>{hadamard(g, bv), hadamard(g, av)};
  });
}

Var scale(Var a, double s) {
  Tape& tape = common_tape({a});
  const Var inputs[] = {a};
  return tape.record(scale(a.value(), s), inputs, [s](const Tensor2D& g) {
    return std::vector<Tensor2D>{scale(g, s)};
  });
}

Var scale_rows(Var a, Var c) {
  Tape& tape = common_tape({a, c});
  Tensor2D av = a.value();
  Tensor2D cv = c.value();
  if (cv.cols() != 1 || cv.rows() != av.rows()) {
    throw DimensionError("scale_rows: expected a " + std::to_string(av.rows()) +
                         "x1 column, got " + cv.shape_string() + " for " + av.shape_string());
  }
  Tensor2D out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= cv(r, 0);
  const Var inputs[] = {a, c};
  return tape.record(std::move(out), inputs, [av, cv](const Tensor2D& g) {
    Tensor2D ga = g;
    Tensor2D gc(cv.rows(), 1);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) {
        ga(r, j) *= cv(r, 0);
        acc += g(r, j) * av(r, j);
      }
      gc(r, 0) = acc;
    }
    return std::vector<Tensor2D>{std::move(ga), std::move(gc)};
  });
}

Var reciprocal(Var a) {
  Tape& tape = common_tape({a});
  for (double v : a.value().data()) {
    if (v == 0.0) throw NumericError("reciprocal of zero");
  }
  Tensor2D out = map(a.value(), [](double v) { return 1.0 / v; });
  const Var inputs[] = {a};
  return tape.record(out, inputs, [out](const Tensor2D& g) {
    Tensor2D ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= -out[i] * out[i];
    return std::vector<Tensor2D>{std::move(ga)};
  });
}

Var square(Var a) {
  Tape& tape = common_tape({a});
  Tensor2D av = a.value();
  const Var inputs[] = {a};
  return tape.record(map(av, [](double v) { return v * v; }), inputs, [av](const Tensor2D& g) {
    Tensor2D ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 2.0 * av[i];
    return std::vector<Tensor2D>{std::move(ga)};
  });
}

Var log(Var a) {
  Tape& tape = common_tape({a});
  Tensor2D av = a.value();
  for (double v : av.data()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
  }
  const Var inputs[] = {a};
  return tape.record(map(av, [](double v) { return std::log(v); }), inputs,
                     [av](const Tensor2D& g) {
                       Tensor2D ga = g;
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= av[i];
                       return std::vector<Tensor2D>{std::move(ga)};
                     });
}

Var exp(Var a) {
  Tape& tape = common_tape({a});
  Tensor2D out = map(a.value(), [](double v) { return std::exp(v); });
  const Var inputs[] = {a};
  return tape.record(out, inputs, [out](const Tensor2D& g) {
    return std::vector<Tensor2D>{hadamard(g, out)};
  });
}

Var tanh(Var a) {
  Tape& tape = common_tape({a});
  Tensor2D out = map(a.value(), [](double v) { return std::tanh(v); });
  const Var inputs[] = {a};
  return tape.record(out, inputs, [out](const Tensor2D& g) {
    Tensor2D ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - out[i] * out[i];
    return std::vector<Tensor2D>{std::move(ga)};
  });
}

Var softmax_rows(Var a) {
  Tape& tape = common_tape({a});
  Tensor2D out = softmax_rows(a.value());
  const Var inputs[] = {a};
  return tape.record(out, inputs, [out](const Tensor2D& g) {
    Tensor2D ga(g.rows(), g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) dot += g(r, j) * out(r, j);
      for (std::size_t j = 0; j < g.cols(); ++j) ga(r, j) = out(r, j) * (g(r, j) - dot);
    }
    return std::vector<Tensor2D>{std::move(ga)};
  });
}

Var logsumexp_rows(Var a) {
  Tape& tape = common_tape({a});
  const Tensor2D& av = a.value();
  if (av.cols() == 0) throw DimensionError("logsumexp_rows: zero columns");
  Tensor2D out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto row = av.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    out(r, 0) = m + std::log(z);
  }
  Tensor2D probs = softmax_rows(av);
  const Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [probs](const Tensor2D& g) {
    Tensor2D ga = probs;
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (double& v : ga.row(r)) v *= g(r, 0);
    return std::vector<Tensor2D>{std::move(ga)};
  });
}

Var l2_normalize_rows(Var a) {
  Tape& tape = common_tape({a});
  const Tensor2D& av = a.value();
  Tensor2D out = av;
  Tensor2D norms(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (double v : av.row(r)) s += v * v;
    const double n = std::sqrt(s);
    if (n == 0.0) throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    norms(r, 0) = n;
    for (double& v : out.row(r)) v /= n;
  }
  const Var inputs[] = {a};
  return tape.record(out, inputs, [out, norms](const Tensor2D& g) {
    Tensor2D ga(g.rows(), g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) dot += g(r, j) * out(r, j);
      for (std::size_t j = 0; j < g.cols(); ++j)
        ga(r, j) = (g(r, j) - out(r, j) * dot) / norms(r, 0);
    }
    return std::vector<Tensor2D>{std::move(ga)};
  });
}

Var sum_rows(Var a) {
  Tape& tape = common_tape({a});
  const Tensor2D& av = a.value();
  Tensor2D out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (double v : av.row(r)) s += v;
    out(r, 0) = s;
  }
  const std::size_t cols = av.cols();
  const Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [cols](const Tensor2D& g) {
    Tensor2D ga(g.rows(), cols);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (double& v : ga.row(r)) v = g(r, 0);
    return std::vector<Tensor2D>{std::move(ga)};
  });
}

Var column(Var a, std::size_t j) {
  Tape& tape = common_tape({a});
  const Tensor2D& av = a.value();
  if (j >= av.cols()) {
    throw DimensionError("column: index " + std::to_string(j) + " out of range for " +
                         av.shape_string());
  }
  Tensor2D out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) out(r, 0) = av(r, j);
  const std::size_t cols = av.cols();
  const Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [j, cols](const Tensor2D& g) {
    Tensor2D ga(g.rows(), cols);
    for (std::size_t r = 0; r < g.rows(); ++r) ga(r, j) = g(r, 0);
    return std::vector<Tensor2D>{std::move(ga)};
  });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  Tape& tape = common_tape({a});
  Tensor2D out = gather_rows(a.value(), index);
  std::vector<std::size_t> idx(index.begin(), index.end());
  const std::size_t rows = a.rows();
  const Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [idx, rows](const Tensor2D& g) {
    Tensor2D ga(rows, g.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto dst = ga.row(idx[k]);
      auto src = g.row(k);
      for (std::size_t j = 0; j < g.cols(); ++j) dst[j] += src[j];
    }
    return std::vector<Tensor2D>{std::move(ga)};
  });
}

Var scatter_rows(Var a, std::span<const std::size_t> index, std::size_t rows) {
  Tape& tape = common_tape({a});
  const Tensor2D& av = a.value();
  if (index.size() != av.rows()) {
    throw DimensionError("scatter_rows: " + std::to_string(index.size()) + " indices for " +
                         av.shape_string());
  }
  Tensor2D out(rows, av.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= rows) {
      throw DimensionError("scatter_rows: index " + std::to_string(index[k]) +
                           " out of range for " + std::to_string(rows) + " rows");
    }
    auto dst = out.row(index[k]);
    auto src = av.row(k);
    for (std::size_t j = 0; j < av.cols(); ++j) dst[j] += src[j];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  const Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [idx](const Tensor2D& g) {
    return std::vector<Tensor2D>{gather_rows(g, idx)};
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Tape* tape = parts.front().tape;
  if (tape == nullptr) throw StateError("use of an unbound Var");
  const std::size_t cols = parts.front().cols();
  std::vector<std::size_t> offsets;
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.tape != tape) throw StateError("operands live on different tapes");
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + parts.front().value().shape_string() +
                           " vs " + p.value().shape_string());
    }
    offsets.push_back(rows);
    rows += p.rows();
  }
  Tensor2D out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto src = parts[i].value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + offsets[i] * cols);
  }
  std::vector<std::size_t> heights;
  for (const Var& p : parts) heights.push_back(p.rows());
  return tape->record(std::move(out), parts, [offsets, heights, cols](const Tensor2D& g) {
    std::vector<Tensor2D> grads;
    for (std::size_t i = 0; i < heights.size(); ++i) {
      Tensor2D gi(heights[i], cols);
      std::copy_n(g.data().begin() + offsets[i] * cols, heights[i] * cols, gi.data().begin());
      grads.push_back(std::move(gi));
    }
    return grads;
  });
}

Var sum(Var a) {
  Tape& tape = common_tape({a});
  const std::size_t rows = a.rows(), cols = a.cols();
  const Var inputs[] = {a};
  return tape.record(Tensor2D::scalar(sum(a.value())), inputs, [rows, cols](const Tensor2D& g) {
    return std::vector<Tensor2D>{Tensor2D(rows, cols, g.item())};
  });
}

Var mean(Var a) {
  Tape& tape = common_tape({a});
  const std::size_t rows = a.rows(), cols = a.cols();
  const std::size_t n = rows * cols;
  if (n == 0) throw DimensionError("mean of an empty tensor");
  const Var inputs[] = {a};
  return tape.record(Tensor2D::scalar(sum(a.value()) / static_cast<double>(n)), inputs,
                     [rows, cols, n](const Tensor2D& g) {
                       return std::vector<Tensor2D>{
                           Tensor2D(rows, cols, g.item() / static_cast<double>(n))};
                     });
}

Var dropout(Var a, double p, SeededRng& rng, bool training) {
  Tape& tape = common_tape({a});
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout probability must be in [0, 1), got " + std::to_string(p));
  }
  const Var inputs[] = {a};
  if (!training || p == 0.0) {
    return tape.record(a.value(), inputs, [](const Tensor2D& g) { return std::vector<Tensor2D>{g}; });
  }
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor2D mask(a.rows(), a.cols());
  for (double& m : mask.data()) m = rng.uniform() < p ? 0.0 : keep_scale;
  return tape.record(hadamard(a.value(), mask), inputs, [mask](const Tensor2D& g) {
    return std::vector<Tensor2D>{hadamard(g, mask)};
  });
}

}  // namespace moelora
