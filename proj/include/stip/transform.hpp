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
#include <vector>

#include "stip/bytes.hpp"
#include "stip/model.hpp"
#include "stip/numerics.hpp"

namespace stip {

// Developer-private permutations of one layer. `inner` holds the hidden-space
// permutation of the feedforward block: one entry for a dense layer, one per
// expert for an MoE layer.
struct LayerPermutations {
  PermutationVec pi1;  // attention score space (Q, K)
  PermutationVec pi2;  // value space (V, W_o)
  std::vector<PermutationVec> inner;

  bool operator==(const LayerPermutations&) const = default;
};

// The half of the key material the data owner receives.
struct SharedKeys {
  std::uint64_t epoch = 0;
  PermutationVec pi;    // feature space, d
  PermutationVec pi_c;  // vocabulary space, s

  bool operator==(const SharedKeys&) const = default;
};

struct PermutationSet {
  std::uint64_t epoch = 1;
  PermutationVec pi;
  PermutationVec pi_c;
  std::vector<LayerPermutations> layers;
  std::optional<PermutationVec> pi_v;  // multimodal projection, visual side
  std::optional<PermutationVec> pi_t;  // multimodal projection, text side

  SharedKeys shared_part() const { return {epoch, pi, pi_c}; }
  const std::vector<LayerPermutations>& private_part() const noexcept { return layers; }

  /// Number of permutations, projection keys included.
  std::size_t count() const;

  /// Throws kInvalidDimension when dims disagree with the config.
  void validate(const ModelConfig& cfg) const;

  /// Every member inverted; transforming with it undoes a transform with *this.
  PermutationSet inverse() const;

  static PermutationSet identity(const ModelConfig& cfg, std::uint64_t epoch = 1);

  bool operator==(const PermutationSet&) const = default;
};

/// Draws pi, pi_c and every per-layer permutation from one seeded stream.
PermutationSet gen_permutation_set(const ModelConfig& cfg, std::uint64_t seed,
                                   std::uint64_t epoch = 1);

LayerWeights transform_layer(const LayerWeights& w, const PermutationVec& pi,
                             const LayerPermutations& perms, const ModelConfig& cfg);

/// pi^T W_c pi_c
Matrix transform_classifier(const Matrix& w_c, const PermutationVec& pi, const PermutationVec& pi_c);

/// pi_v^T W pi_t
Matrix transform_projection(const Matrix& w, const PermutationVec& pi_v, const PermutationVec& pi_t);

struct TransformedModel {
  ModelParams params;  // same layout as an untransformed model
  std::uint64_t epoch = 0;
};

/// Transforms every layer and the classifier. The embedding table is left as
/// is because it never leaves the data owner.
TransformedModel para_trans(const ModelParams& params, const PermutationSet& set);

/// x pi, done on the data owner before sending.
Matrix protect_input(const Matrix& x, const PermutationVec& pi);
/// o' pi_c^T, done on the data owner after receiving.
Matrix recover_output(const Matrix& o_permuted, const PermutationVec& pi_c);

struct EquivalenceReport {
  double max_abs_diff = 0.0;
  double argmax_match_rate = 1.0;  // over every (trial, row)
  std::size_t trials = 0;
  std::size_t rows_compared = 0;
  bool passed = false;  // match rate 1 and max diff within tolerance
};

/// Runs random inputs through F_theta and through the protected path
/// recover(F_theta'(x pi)). Custom-mask configs draw a random sparse mask per
/// trial.
EquivalenceReport verify_equivalence(const ModelParams& params, const PermutationSet& set,
                                     std::size_t trials, double tol, std::uint64_t seed = 0,
                                     std::size_t seq_len = 16);
/// Same check against an already deployed model, using only the shared keys.
EquivalenceReport verify_equivalence(const ModelParams& params, const ModelParams& deployed,
                                     const SharedKeys& keys, std::size_t trials, double tol,
                                     std::uint64_t seed = 0, std::size_t seq_len = 16);

// Key file: "STPK" | version u16 | epoch u64 | count u32 | records, each
// (role u8, layer u16, dim u32, dim x u32 indices). Shared records come first.
inline constexpr std::uint16_t kKeyFormatVersion = 1;

enum class KeyRole : std::uint8_t {
  kPi = 0,
  kPiC = 1,
  kLayerPi1 = 2,
  kLayerPi2 = 3,
  kLayerInner = 4,  // repeated per expert, in expert order
  kProjVisual = 5,
  kProjText = 6,
};

Bytes encode_keys(const PermutationSet& set);
PermutationSet decode_keys(std::span<const std::uint8_t> bytes);

Bytes encode_shared_keys(const SharedKeys& keys);
SharedKeys decode_shared_keys(std::span<const std::uint8_t> bytes);

struct KeyRecordInfo {
  KeyRole role;
  std::uint16_t layer;
  std::uint32_t dim;
};
/// Record headers of a key file without assembling a set.
std::vector<KeyRecordInfo> inspect_keys(std::span<const std::uint8_t> bytes);

}  // namespace stip
