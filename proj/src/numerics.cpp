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

#include "stip/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "stip/error.hpp"

namespace stip {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::kInvalidDimension, what);
}

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// Sum in ascending order so the result is independent of input order.
double ordered_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows * cols, "matrix data length " + std::to_string(data_.size()) +
                                           " does not match " + std::to_string(rows) + "x" +
                                           std::to_string(cols));
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    require(row.size() == c, "ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0F;
  return m;
}

PermutationVec::PermutationVec(std::vector<std::uint32_t> map) : map_(std::move(map)) {
  std::vector<bool> seen(map_.size(), false);
  for (std::uint32_t idx : map_) {
    if (idx >= map_.size() || seen[idx]) {
      throw Error(ErrorCode::kInvalidDimension,
                  "index vector is not a permutation of 0.." + std::to_string(map_.size()));
    }
    seen[idx] = true;
  }
}

PermutationVec PermutationVec::identity(std::size_t dim) {
  std::vector<std::uint32_t> map(dim);
  std::iota(map.begin(), map.end(), 0U);
  return PermutationVec(std::move(map));
}

bool PermutationVec::is_identity() const noexcept {
  for (std::size_t j = 0; j < map_.size(); ++j) {
    if (map_[j] != j) return false;
  }
  return true;
}

PermutationVec gen_permutation(std::size_t dim, std::mt19937_64& rng) {
  if (dim == 0) throw Error(ErrorCode::kInvalidDimension, "permutation dimension must be >= 1");
  std::vector<std::uint32_t> map(dim);
  std::iota(map.begin(), map.end(), 0U);
  for (std::size_t i = dim - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(map[i], map[pick(rng)]);
  }
  return PermutationVec(std::move(map));
}

PermutationVec gen_permutation(std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gen_permutation(dim, rng);
}

PermutationVec inverse_perm(const PermutationVec& p) {
  std::vector<std::uint32_t> inv(p.dim());
  for (std::size_t j = 0; j < p.dim(); ++j) inv[p[j]] = static_cast<std::uint32_t>(j);
  return PermutationVec(std::move(inv));
}

PermutationVec compose(const PermutationVec& first, const PermutationVec& second) {
  require(first.dim() == second.dim(), "compose: permutation dims differ");
  std::vector<std::uint32_t> map(first.dim());
  for (std::size_t j = 0; j < map.size(); ++j) map[j] = first[second[j]];
  return PermutationVec(std::move(map));
}

Matrix to_matrix(const PermutationVec& p) {
  Matrix m(p.dim(), p.dim());
  for (std::size_t j = 0; j < p.dim(); ++j) m(p[j], j) = 1.0F;
  return m;
}

Matrix apply_col_perm(const Matrix& x, const PermutationVec& p) {
  require(x.cols() == p.dim(), "apply_col_perm: matrix " + shape(x) + " vs permutation dim " +
                                   std::to_string(p.dim()));
  Matrix out(x.rows(), x.cols());
  const auto map = p.map();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto src = x.row(i);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < map.size(); ++j) dst[j] = src[map[j]];
  }
  return out;
}

Matrix apply_row_perm(const Matrix& x, const PermutationVec& p) {
  require(x.rows() == p.dim(), "apply_row_perm: matrix " + shape(x) + " vs permutation dim " +
                                   std::to_string(p.dim()));
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto src = x.row(p[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Vector apply_perm(const Vector& v, const PermutationVec& p) {
  require(v.dim() == p.dim(), "apply_perm: vector dim " + std::to_string(v.dim()) +
                                  " vs permutation dim " + std::to_string(p.dim()));
  std::vector<float> out(v.dim());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = v[p[j]];
  return Vector(std::move(out));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: " + shape(a) + " * " + shape(b));
  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  const std::size_t m = b.cols();
  Matrix out(n, m);
  std::vector<double> acc(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const auto arow = a.row(i);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = arow[t];
      if (av == 0.0) continue;
      const float* brow = b.row(t).data();
      for (std::size_t j = 0; j < m; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < m; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

Matrix transpose(const Matrix& x) {
  Matrix out(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: " + shape(a) + " + " + shape(b));
  Matrix out = a;
  auto o = out.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          "hadamard: " + shape(a) + " . " + shape(b));
  Matrix out = a;
  auto o = out.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  return out;
}

Matrix scale(const Matrix& x, float factor) {
  Matrix out = x;
  for (float& v : out.data()) v *= factor;
  return out;
}

Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  std::vector<double> exps(x.cols());
  std::vector<double> scratch;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    const float mx = *std::max_element(row.begin(), row.end());
    if (std::isinf(mx) && mx < 0) {
      throw Error(ErrorCode::kDegenerateRow, "softmax row " + std::to_string(i) + " is entirely -inf");
    }
    for (std::size_t j = 0; j < row.size(); ++j) {
      exps[j] = std::isinf(row[j]) ? 0.0 : std::exp(static_cast<double>(row[j]) - mx);
    }
    scratch = exps;
    const double total = ordered_sum(scratch);
    auto orow = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) orow[j] = static_cast<float>(exps[j] / total);
  }
  return out;
}

RowStats row_stats(std::span<const float> row) {
  RowStats s;
  if (row.empty()) return s;
  std::vector<double> sorted(row.begin(), row.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double sum = 0.0;
  double sq = 0.0;
  for (double v : sorted) {
    sum += v;
    sq += v * v;
  }
  s.mean = sum / n;
  double dev = 0.0;
  for (double v : sorted) dev += (v - s.mean) * (v - s.mean);
  s.variance = dev / n;
  s.mean_square = sq / n;
  return s;
}

Matrix layernorm(const Matrix& x, const Vector& gamma, const Vector& beta, float eps) {
  require(x.cols() == gamma.dim() && x.cols() == beta.dim(),
          "layernorm: input " + shape(x) + " vs gamma/beta dims " + std::to_string(gamma.dim()) +
              "/" + std::to_string(beta.dim()));
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    const RowStats st = row_stats(row);
    const double denom = std::sqrt(st.variance + static_cast<double>(eps));
    auto orow = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double normed = denom > 0.0 ? (row[j] - st.mean) / denom : 0.0;
      orow[j] = static_cast<float>(gamma[j] * normed + beta[j]);
    }
  }
  return out;
}

Matrix rmsnorm(const Matrix& x, const Vector& gamma, float eps) {
  require(x.cols() == gamma.dim(), "rmsnorm: input " + shape(x) + " vs gamma dim " +
                                       std::to_string(gamma.dim()));
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    const double denom = std::sqrt(row_stats(row).mean_square + static_cast<double>(eps));
    auto orow = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double normed = denom > 0.0 ? row[j] / denom : 0.0;
      orow[j] = static_cast<float>(gamma[j] * normed);
    }
  }
  return out;
}

Matrix relu(const Matrix& x) {
  Matrix out = x;
  for (float& v : out.data()) v = v > 0.0F ? v : 0.0F;
  return out;
}

Matrix gelu(const Matrix& x) {
  Matrix out = x;
  for (float& v : out.data()) {
    const double d = v;
    v = static_cast<float>(0.5 * d * (1.0 + std::erf(d / std::sqrt(2.0))));
  }
  return out;
}

Matrix sigmoid(const Matrix& x) {
  Matrix out = x;
  for (float& v : out.data()) v = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          "max_abs_diff: " + shape(a) + " vs " + shape(b));
  double worst = 0.0;
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(ad[i]) - bd[i]));
  }
  return worst;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  require(a.dim() == b.dim(), "max_abs_diff: vector dims differ");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]));
  }
  return worst;
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (float& v : m.data()) v = static_cast<float>(dist(rng));
  return m;
}

Vector gaussian_vector(std::size_t dim, double mean, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  Vector v(dim);
  for (float& x : v.data()) x = static_cast<float>(dist(rng));
  return v;
}

}  // namespace stip
