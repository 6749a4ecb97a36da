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

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stip/model.hpp"
#include "stip/numerics.hpp"
#include "stip/transform.hpp"

namespace stip {

struct DcorrReport {
  double value = 0.0;  // in [0, 1]
  std::size_t n_samples = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// Sample distance correlation with rows as observations. Pairwise distances
/// are recomputed on the fly, so memory stays linear in the row count. Zero
/// when either distance variance vanishes; fewer than two rows throws
/// kInsufficientSamples.
DcorrReport distance_correlation(const Matrix& x, const Matrix& y);

/// Mean over tokens of the distance correlation between one row of `x` and
/// the same row of `y`, each read as a sample of d scalars. This is how much
/// a single protected embedding reveals about the plain one.
DcorrReport token_leakage(const Matrix& x, const Matrix& y);

enum class ProjectionKind { kRandomLinear, kRandom1d };
std::string_view to_string(ProjectionKind k);

/// Corr(x, x A pi) with Gaussian A (d x d) and random pi, or Corr(x, x B)
/// with Gaussian B (d x 1).
DcorrReport dcorr_baseline_projection(const Matrix& x, ProjectionKind kind, std::uint64_t seed);
/// Corr(x, x A pi) for explicit A and pi.
DcorrReport projected_dcorr(const Matrix& x, const Matrix& a, const PermutationVec& pi);

struct LeakageComparison {
  std::size_t dim = 0;
  std::size_t seeds = 0;
  double permuted_mean = 0.0;   // token leakage of x pi
  double projected_mean = 0.0;  // token leakage of x A
};
/// Gaussian x (n_tokens x dim), fresh pi and A per seed.
LeakageComparison compare_token_leakage(std::size_t dim, std::size_t n_tokens, std::size_t seeds,
                                        std::uint64_t base_seed);

struct ProjectionBound {
  std::size_t dim = 0;
  std::size_t seeds = 0;
  double permuted_projection_mean = 0.0;  // Corr(x, x A pi)
  double one_dim_mean = 0.0;              // Corr(x, x B)
};
ProjectionBound compare_projection_bound(std::size_t dim, std::size_t n_rows, std::size_t seeds,
                                         std::uint64_t base_seed);

struct KeyspaceSize {
  double data = 0.0;        // ln d!, one input permutation
  double parameters = 0.0;  // 3L ln d!
  double vocabulary = 0.0;  // ln s!
  double layer_keys_exact = 0.0;  // sum of ln(dim!) over every private permutation
};
double log_factorial(std::uint64_t n);
KeyspaceSize keyspace_log_size(const ModelConfig& cfg);

struct KpaResult {
  enum class Outcome { kRecovered, kAmbiguous, kFailed };
  Outcome outcome = Outcome::kFailed;
  std::optional<PermutationVec> perm;            // set when recovered
  std::vector<std::vector<std::uint32_t>> groups;  // colliding plaintext columns when ambiguous
  std::size_t candidates_tried = 0;
};
std::string_view to_string(KpaResult::Outcome o);

inline constexpr std::size_t kDefaultBfaCap = 8;

/// Tries all d! permutations; refuses with kKeyspaceTooLarge above `max_dim`.
KpaResult bfa_exhaustive(const Matrix& x_plain, const Matrix& x_perm, std::size_t max_dim = kDefaultBfaCap);

/// Matches every ciphertext column against the plaintext columns within `tol`.
KpaResult kpa_column_match(const Matrix& x_plain, const Matrix& x_perm, double tol = 0.0);

struct WeightRecovery {
  std::string name;
  double max_abs_diff = 0.0;
  double dcorr = 0.0;
  bool recovered = false;
};

struct ResistanceReport {
  std::vector<WeightRecovery> weights;
  const WeightRecovery& find(std::string_view name) const;
};

/// An attacker holding the deployed weights and the shared feature
/// permutation undoes it wherever it appears and compares with the truth.
ResistanceReport kpa_parameter_resistance_demo(const ModelParams& params, const PermutationSet& set,
                                               const PermutationVec& recovered_pi);

struct UnauthorizedUseReport {
  double argmax_mismatch_rate = 0.0;
  std::vector<std::uint32_t> legitimate_tokens;
  std::vector<std::uint32_t> unauthorized_tokens;
};

/// Greedy generation through the deployed model twice: with the shared keys
/// applied, and with raw embeddings and raw output order.
UnauthorizedUseReport unauthorized_use_demo(const TransformedModel& transformed, const SharedKeys& keys,
                                            std::span<const std::uint32_t> prompt,
                                            const EmbeddingTable& table, std::size_t max_tokens = 50);

struct MetricRecord {
  std::string metric;
  double value = 0.0;
  std::vector<std::size_t> dims;
  std::vector<std::uint64_t> seeds;
  std::size_t samples = 0;
};
void to_json(nlohmann::json& j, const MetricRecord& r);

}  // namespace stip
