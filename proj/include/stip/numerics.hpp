// Copyright 2026 The STIP Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace stip {

// Dense row-major fp32 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0F);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// Per-feature parameter vector (gamma, beta).
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, float fill = 0.0F) : data_(dim, fill) {}
  explicit Vector(std::vector<float> data) : data_(std::move(data)) {}
  Vector(std::initializer_list<float> values) : data_(values) {}

  std::size_t dim() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<float> data_;
};

// A permutation of feature indices stored as an index vector:
// map[j] is the source column placed at position j, so applying it to the
// columns of x computes x * P with P[map[j]][j] = 1.
class PermutationVec {
 public:
  PermutationVec() = default;
  // Throws kInvalidDimension unless `map` is a bijection on {0..n-1}.
  explicit PermutationVec(std::vector<std::uint32_t> map);

  static PermutationVec identity(std::size_t dim);

  std::size_t dim() const noexcept { return map_.size(); }
  std::uint32_t operator[](std::size_t j) const { return map_[j]; }
  std::span<const std::uint32_t> map() const noexcept { return map_; }
  bool is_identity() const noexcept;

  bool operator==(const PermutationVec&) const = default;

 private:
  std::vector<std::uint32_t> map_;
};

/// Uniform random permutation via Fisher-Yates; deterministic per seed.
PermutationVec gen_permutation(std::size_t dim, std::uint64_t seed);
PermutationVec gen_permutation(std::size_t dim, std::mt19937_64& rng);

PermutationVec inverse_perm(const PermutationVec& p);

/// Permutation equivalent to applying `first` and then `second` to columns.
PermutationVec compose(const PermutationVec& first, const PermutationVec& second);

/// Explicit 0/1 matrix. Test oracles and benchmarks only.
Matrix to_matrix(const PermutationVec& p);

/// x * P: out[i][j] = x[i][p[j]].
Matrix apply_col_perm(const Matrix& x, const PermutationVec& p);

/// P^T * x: row i of the result is row p[i] of x.
Matrix apply_row_perm(const Matrix& x, const PermutationVec& p);

/// gamma * P for a row vector.
Vector apply_perm(const Vector& v, const PermutationVec& p);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& x);
Matrix add(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& x, float factor);

/// Row-wise softmax. -inf entries get probability 0; an all -inf row throws
/// kDegenerateRow.
Matrix softmax_rows(const Matrix& x);

inline constexpr float kDefaultNormEps = 1e-5F;

/// gamma * (x - mean) / sqrt(var + eps) + beta with population variance.
Matrix layernorm(const Matrix& x, const Vector& gamma, const Vector& beta,
                 float eps = kDefaultNormEps);

/// gamma * x / sqrt(mean(x^2) + eps).
Matrix rmsnorm(const Matrix& x, const Vector& gamma, float eps = kDefaultNormEps);

Matrix relu(const Matrix& x);
/// Exact form x * Phi(x).
Matrix gelu(const Matrix& x);
Matrix sigmoid(const Matrix& x);

// Per-row statistics. Sums are taken in sorted order so the results do not
// depend on the column order.
struct RowStats {
  double mean = 0.0;
  double variance = 0.0;  // population
  double mean_square = 0.0;
};
RowStats row_stats(std::span<const float> row);

double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs_diff(const Vector& a, const Vector& b);

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev,
                       std::mt19937_64& rng);
Vector gaussian_vector(std::size_t dim, double mean, double stddev,
                       std::mt19937_64& rng);

}  // namespace stip
