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

#include "stip/security.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "stip/error.hpp"

namespace stip {

namespace {

// Running sums for the one-pass estimator. With a_ij, b_ij the pairwise
// distances and bars denoting row and grand means:
//   dCov^2 = mean(a_ij b_ij) + mean(a) mean(b) - 2 mean_i(abar_i bbar_i)
struct PairSums {
  std::vector<double> row_a;
  std::vector<double> row_b;
  double ab = 0.0;
  double aa = 0.0;
  double bb = 0.0;

  explicit PairSums(std::size_t n) : row_a(n, 0.0), row_b(n, 0.0) {}

  void add(std::size_t i, std::size_t j, double a, double b) {
    row_a[i] += a;
    row_a[j] += a;
    row_b[i] += b;
    row_b[j] += b;
    ab += 2.0 * a * b;
    aa += 2.0 * a * a;
    bb += 2.0 * b * b;
  }

  double finish() const {
    const auto n = static_cast<double>(row_a.size());
    double grand_a = 0.0;
    double grand_b = 0.0;
    double cross = 0.0;
    double sq_a = 0.0;
    double sq_b = 0.0;
    for (std::size_t i = 0; i < row_a.size(); ++i) {
      const double ra = row_a[i] / n;
      const double rb = row_b[i] / n;
      grand_a += ra;
      grand_b += rb;
      cross += ra * rb;
      sq_a += ra * ra;
      sq_b += rb * rb;
    }
    grand_a /= n;
    grand_b /= n;
    const double n2 = n * n;
    const double dcov = ab / n2 + grand_a * grand_b - 2.0 * cross / n;
    const double dvar_x = aa / n2 + grand_a * grand_a - 2.0 * sq_a / n;
    const double dvar_y = bb / n2 + grand_b * grand_b - 2.0 * sq_b / n;
    if (dvar_x <= 0.0 || dvar_y <= 0.0) return 0.0;
    const double r2 = std::max(dcov, 0.0) / std::sqrt(dvar_x * dvar_y);
    return std::clamp(std::sqrt(r2), 0.0, 1.0);
  }
};

double row_distance(const Matrix& m, std::size_t i, std::size_t j) {
  auto ri = m.row(i);
  auto rj = m.row(j);
  double s = 0.0;
  for (std::size_t k = 0; k < ri.size(); ++k) {
    const double diff = static_cast<double>(ri[k]) - rj[k];
    s += diff * diff;
  }
  return std::sqrt(s);
}

double scalar_dcorr(std::span<const float> x, std::span<const float> y) {
  const std::size_t n = x.size();
  std::vector<double> xd(x.begin(), x.end());
  std::vector<double> yd(y.begin(), y.end());
  PairSums sums(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = xd[i];
    const double yi = yd[i];
    for (std::size_t j = i + 1; j < n; ++j) sums.add(i, j, std::abs(xi - xd[j]), std::abs(yi - yd[j]));
  }
  return sums.finish();
}

Matrix row_restore(const Matrix& w, const PermutationVec& inv) { return apply_row_perm(w, inv); }
Matrix col_restore(const Matrix& w, const PermutationVec& inv) { return apply_col_perm(w, inv); }

Matrix as_row(const Vector& v) { return Matrix(1, v.dim(), std::vector<float>(v.data().begin(), v.data().end())); }

}  // namespace

DcorrReport distance_correlation(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) {
    throw Error(ErrorCode::kInvalidDimension, "distance correlation needs equal row counts, got " +
                                                  std::to_string(x.rows()) + " and " + std::to_string(y.rows()));
  }
  if (x.rows() < 2) throw Error(ErrorCode::kInsufficientSamples, "distance correlation needs at least 2 rows");
  const std::size_t n = x.rows();
  PairSums sums(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) sums.add(i, j, row_distance(x, i, j), row_distance(y, i, j));
  }
  return {sums.finish(), n, n, x.cols() + y.cols()};
}

DcorrReport token_leakage(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw Error(ErrorCode::kInvalidDimension, "token leakage needs equal shapes");
  }
  if (x.cols() < 2) throw Error(ErrorCode::kInsufficientSamples, "token leakage needs at least 2 features");
  if (x.rows() == 0) throw Error(ErrorCode::kInsufficientSamples, "token leakage needs at least 1 token");
  double total = 0.0;
  for (std::size_t t = 0; t < x.rows(); ++t) total += scalar_dcorr(x.row(t), y.row(t));
  return {total / static_cast<double>(x.rows()), x.cols(), x.rows(), x.cols()};
}

std::string_view to_string(ProjectionKind k) {
  return k == ProjectionKind::kRandomLinear ? "random_linear_dxd" : "random_1d";
}

DcorrReport projected_dcorr(const Matrix& x, const Matrix& a, const PermutationVec& pi) {
  return distance_correlation(x, apply_col_perm(matmul(x, a), pi));
}

DcorrReport dcorr_baseline_projection(const Matrix& x, ProjectionKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t d = x.cols();
  if (kind == ProjectionKind::kRandom1d) return distance_correlation(x, matmul(x, gaussian_matrix(d, 1, 1.0, rng)));
  const Matrix a = gaussian_matrix(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  return projected_dcorr(x, a, gen_permutation(d, rng));
}

LeakageComparison compare_token_leakage(std::size_t dim, std::size_t n_tokens, std::size_t seeds,
                                        std::uint64_t base_seed) {
  LeakageComparison out{dim, seeds, 0.0, 0.0};
  for (std::size_t s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(base_seed + s);
    const Matrix x = gaussian_matrix(n_tokens, dim, 1.0, rng);
    const PermutationVec pi = gen_permutation(dim, rng);
    const Matrix a = gaussian_matrix(dim, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
    out.permuted_mean += token_leakage(x, apply_col_perm(x, pi)).value;
    out.projected_mean += token_leakage(x, matmul(x, a)).value;
  }
  out.permuted_mean /= static_cast<double>(seeds);
  out.projected_mean /= static_cast<double>(seeds);
  return out;
}

ProjectionBound compare_projection_bound(std::size_t dim, std::size_t n_rows, std::size_t seeds,
                                         std::uint64_t base_seed) {
  ProjectionBound out{dim, seeds, 0.0, 0.0};
  for (std::size_t s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(base_seed + s);
    const Matrix x = gaussian_matrix(n_rows, dim, 1.0, rng);
    out.permuted_projection_mean += dcorr_baseline_projection(x, ProjectionKind::kRandomLinear, rng()).value;
    out.one_dim_mean += dcorr_baseline_projection(x, ProjectionKind::kRandom1d, rng()).value;
  }
  out.permuted_projection_mean /= static_cast<double>(seeds);
  out.one_dim_mean /= static_cast<double>(seeds);
  return out;
}

double log_factorial(std::uint64_t n) { return n < 2 ? 0.0 : std::lgamma(static_cast<double>(n) + 1.0); }

KeyspaceSize keyspace_log_size(const ModelConfig& cfg) {
  cfg.validate();
  KeyspaceSize k;
  k.data = log_factorial(cfg.d_model);
  k.parameters = 3.0 * cfg.n_layers * k.data;
  k.vocabulary = log_factorial(cfg.vocab_size);
  const double inner_count = cfg.is_moe() ? cfg.n_experts : 1.0;
  k.layer_keys_exact = cfg.n_layers * (2.0 * k.data + inner_count * log_factorial(cfg.d_ff));
  return k;
}

std::string_view to_string(KpaResult::Outcome o) {
  switch (o) {
    case KpaResult::Outcome::kRecovered: return "recovered";
    case KpaResult::Outcome::kAmbiguous: return "ambiguous";
    case KpaResult::Outcome::kFailed: return "failed";
  }
  return "unknown";
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::kInvalidDimension, "plaintext and ciphertext shapes differ");
  }
}

}  // namespace

KpaResult bfa_exhaustive(const Matrix& x_plain, const Matrix& x_perm, std::size_t max_dim) {
  require_same_shape(x_plain, x_perm);
  const std::size_t d = x_plain.cols();
  if (d > max_dim) {
    throw Error(ErrorCode::kKeyspaceTooLarge, "refusing to enumerate " + std::to_string(d) +
                                                  "! permutations (cap " + std::to_string(max_dim) + ")");
  }
  const Matrix plain_t = transpose(x_plain);
  const Matrix perm_t = transpose(x_perm);
  auto same_column = [&](std::size_t plain_col, std::size_t perm_col) {
    auto a = plain_t.row(plain_col);
    auto b = perm_t.row(perm_col);
    return std::equal(a.begin(), a.end(), b.begin());
  };
  KpaResult r;
  std::vector<std::uint32_t> candidate(d);
  std::iota(candidate.begin(), candidate.end(), 0U);
  do {
    ++r.candidates_tried;
    bool ok = true;
    for (std::size_t j = 0; j < d && ok; ++j) ok = same_column(candidate[j], j);
    if (ok) {
      r.outcome = KpaResult::Outcome::kRecovered;
      r.perm = PermutationVec(candidate);
      return r;
    }
  } while (std::next_permutation(candidate.begin(), candidate.end()));
  return r;
}

KpaResult kpa_column_match(const Matrix& x_plain, const Matrix& x_perm, double tol) {
  require_same_shape(x_plain, x_perm);
  const std::size_t d = x_plain.cols();
  const Matrix plain_t = transpose(x_plain);
  const Matrix perm_t = transpose(x_perm);
  auto close = [&](std::size_t plain_col, std::size_t perm_col) {
    auto a = plain_t.row(plain_col);
    auto b = perm_t.row(perm_col);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!(std::abs(static_cast<double>(a[i]) - b[i]) <= tol)) return false;
    }
    return true;
  };

  KpaResult r;
  std::vector<std::vector<std::uint32_t>> candidates(d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = 0; k < d; ++k) {
      ++r.candidates_tried;
      if (close(k, j)) candidates[j].push_back(static_cast<std::uint32_t>(k));
    }
    if (candidates[j].empty()) return r;
  }
  for (const auto& c : candidates) {
    if (c.size() > 1 && std::find(r.groups.begin(), r.groups.end(), c) == r.groups.end()) r.groups.push_back(c);
  }
  if (!r.groups.empty()) {
    r.outcome = KpaResult::Outcome::kAmbiguous;
    return r;
  }
  std::vector<std::uint32_t> map(d);
  std::vector<bool> used(d, false);
  for (std::size_t j = 0; j < d; ++j) {
    map[j] = candidates[j][0];
    if (used[map[j]]) return r;
    used[map[j]] = true;
  }
  r.outcome = KpaResult::Outcome::kRecovered;
  r.perm = PermutationVec(std::move(map));
  return r;
}

const WeightRecovery& ResistanceReport::find(std::string_view name) const {
  for (const auto& w : weights) {
    if (w.name == name) return w;
  }
  throw Error(ErrorCode::kMissingWeight, "no recovery entry for " + std::string(name));
}

ResistanceReport kpa_parameter_resistance_demo(const ModelParams& params, const PermutationSet& set,
                                               const PermutationVec& recovered_pi) {
  const TransformedModel deployed = para_trans(params, set);
  const PermutationVec inv = inverse_perm(recovered_pi);
  ResistanceReport report;
  auto record = [&](std::string name, const Matrix& truth, const Matrix& guess) {
    WeightRecovery w{std::move(name), max_abs_diff(truth, guess), 0.0, false};
    w.recovered = w.max_abs_diff == 0.0;
    w.dcorr = truth.cols() >= 2 ? token_leakage(truth, guess).value : 0.0;
    report.weights.push_back(std::move(w));
  };
  auto record_vec = [&](std::string name, const Vector& truth, const Vector& deployed_vec) {
    if (truth.dim() == 0) return;
    record(std::move(name), as_row(truth), as_row(apply_perm(deployed_vec, inv)));
  };
  auto record_ffn = [&](const std::string& prefix, const FfnWeights& truth, const FfnWeights& dep) {
    record(prefix + "w1", truth.w1, row_restore(dep.w1, inv));
    record(prefix + "w2", truth.w2, col_restore(dep.w2, inv));
    if (truth.w3) record(prefix + "w3", *truth.w3, row_restore(*dep.w3, inv));
  };

  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const LayerWeights& t = params.layers[i];
    const LayerWeights& d = deployed.params.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    record(p + "wq", t.wq, row_restore(d.wq, inv));
    record(p + "wk", t.wk, row_restore(d.wk, inv));
    record(p + "wv", t.wv, row_restore(d.wv, inv));
    record(p + "wo", t.wo, col_restore(d.wo, inv));
    record_vec(p + "gamma1", t.gamma1, d.gamma1);
    record_vec(p + "beta1", t.beta1, d.beta1);
    record_vec(p + "gamma2", t.gamma2, d.gamma2);
    record_vec(p + "beta2", t.beta2, d.beta2);
    if (t.w_gate) {
      record(p + "w_gate", *t.w_gate, row_restore(*d.w_gate, inv));
      for (std::size_t e = 0; e < t.experts.size(); ++e) {
        record_ffn(p + "experts." + std::to_string(e) + ".", t.experts[e], d.experts[e]);
      }
    } else {
      record_ffn(p + "ffn.", t.ffn, d.ffn);
    }
  }
  record("classifier", params.w_c, row_restore(deployed.params.w_c, inv));
  return report;
}

UnauthorizedUseReport unauthorized_use_demo(const TransformedModel& transformed, const SharedKeys& keys,
                                            std::span<const std::uint32_t> prompt,
                                            const EmbeddingTable& table, std::size_t max_tokens) {
  const ModelParams& p = transformed.params;
  const Mask mask = Mask::for_kind(p.config.mask_kind);
  UnauthorizedUseReport r;
  std::vector<std::uint32_t> legit(prompt.begin(), prompt.end());
  std::vector<std::uint32_t> rogue(prompt.begin(), prompt.end());
  std::size_t mismatched = 0;
  for (std::size_t step = 0; step < max_tokens; ++step) {
    const Matrix o_legit =
        recover_output(model_forward(protect_input(embed(legit, table), keys.pi), p, mask), keys.pi_c);
    const Matrix o_rogue = model_forward(embed(rogue, table), p, mask);
    const std::uint32_t a = greedy_decode_step(o_legit);
    const std::uint32_t b = greedy_decode_step(o_rogue);
    if (a != b) ++mismatched;
    legit.push_back(a);
    rogue.push_back(b);
    r.legitimate_tokens.push_back(a);
    r.unauthorized_tokens.push_back(b);
  }
  r.argmax_mismatch_rate = max_tokens == 0 ? 0.0 : static_cast<double>(mismatched) / static_cast<double>(max_tokens);
  return r;
}

void to_json(nlohmann::json& j, const MetricRecord& r) {
  j = nlohmann::json{{"metric", r.metric}, {"value", r.value}, {"dims", r.dims}, {"seeds", r.seeds},
                     {"samples", r.samples}};
}

}  // namespace stip
