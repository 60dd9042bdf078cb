// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense containers used across the library.

#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace dlm {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Row-major rows x cols matrix.
template <class Real>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, Real fill = Real(0)) : rows(r), cols(c), data(r * c, fill) {}

  Real* row(std::size_t i) { return data.data() + i * cols; }
  const Real* row(std::size_t i) const { return data.data() + i * cols; }
  std::span<Real> row_span(std::size_t i) { return {row(i), cols}; }
  std::span<const Real> row_span(std::size_t i) const { return {row(i), cols}; }
  Real& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const Real& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// Named n-dimensional tensor, row-major.
template <class Real>
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<Real> data;

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }
};

}  // namespace dlm
