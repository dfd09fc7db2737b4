// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "moelora/error.hpp"

namespace moelora {

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("tensor data has " + std::to_string(data_.size()) +
                         " entries, expected " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

Tensor2D Tensor2D::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged row list in Tensor2D::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor2D(r, c, std::move(data));
}

Tensor2D Tensor2D::identity(std::size_t n) {
  Tensor2D out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

double Tensor2D::item() const {
  if (rows_ != 1 || cols_ != 1) throw DimensionError("item() on non-scalar tensor " + shape_string());
  return data_[0];
}

std::string Tensor2D::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape mismatch " + a.shape_string() + " x " + b.shape_string());
  }
  Tensor2D out(a.rows(), b.cols());
  const std::size_t inner = a.cols();
  const std::size_t width = b.cols();
  const double* __restrict pa = a.data().data();
  const double* __restrict pb = b.data().data();
  double* __restrict po = out.data().data();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* __restrict out_row = po + i * width;
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = pa[i * inner + k];
      if (aik == 0.0) continue;
      const double* __restrict b_row = pb + k * width;
      for (std::size_t j = 0; j < width; ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Tensor2D transpose(const Tensor2D& a) {
  Tensor2D out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor2D add(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "add");
  Tensor2D out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor2D sub(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "sub");
  Tensor2D out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor2D hadamard(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "hadamard");
  Tensor2D out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Tensor2D scale(const Tensor2D& a, double s) {
  Tensor2D out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

Tensor2D softmax_rows(const Tensor2D& a) {
  Tensor2D out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto in = a.row(r);
    auto o = out.row(r);
    if (in.empty()) continue;
    const double m = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - m);
      z += o[j];
    }
    for (double& v : o) v /= z;
  }
  return out;
}

Tensor2D gather_rows(const Tensor2D& a, std::span<const std::size_t> index) {
  Tensor2D out(index.size(), a.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= a.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(index[k]) +
                           " out of range for " + a.shape_string());
    }
    std::copy_n(a.row(index[k]).begin(), a.cols(), out.row(k).begin());
  }
  return out;
}

double sum(const Tensor2D& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double frobenius_norm(const Tensor2D& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor2D& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace moelora
