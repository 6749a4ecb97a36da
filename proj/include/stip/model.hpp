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
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "stip/numerics.hpp"

namespace stip {

enum class NormKind : std::uint8_t { kLayerNorm = 0, kRmsNorm = 1 };
enum class NormPlacement : std::uint8_t { kPost = 0, kPre = 1 };
enum class FfnKind : std::uint8_t { kRelu = 0, kGelu = 1, kSwiglu = 2 };
enum class MaskKind : std::uint8_t { kNone = 0, kCausal = 1, kCustom = 2 };

std::string_view to_string(NormKind k);
std::string_view to_string(NormPlacement k);
std::string_view to_string(FfnKind k);
std::string_view to_string(MaskKind k);
NormKind parse_norm_kind(std::string_view s);
NormPlacement parse_norm_placement(std::string_view s);
FfnKind parse_ffn_kind(std::string_view s);
MaskKind parse_mask_kind(std::string_view s);

struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 64;
  std::uint32_t d_ff = 256;
  std::uint32_t vocab_size = 100;
  std::uint32_t n_experts = 0;  // 0 = dense feedforward
  std::uint32_t top_k = 2;      // experts per token, MoE only
  float attn_scale = 64.0F;     // scores are divided by sqrt(attn_scale)
  float norm_eps = kDefaultNormEps;
  NormKind norm_kind = NormKind::kLayerNorm;
  NormPlacement norm_placement = NormPlacement::kPost;
  FfnKind ffn_kind = FfnKind::kRelu;
  MaskKind mask_kind = MaskKind::kCausal;

  bool is_moe() const noexcept { return n_experts >= 2; }

  /// Throws kInvalidConfig on violated invariants.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct FfnWeights {
  Matrix w1;                  // d x m
  Matrix w2;                  // m x d
  std::optional<Matrix> w3;   // d x m, SwiGLU value path

  bool operator==(const FfnWeights&) const = default;
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;      // d x d
  FfnWeights ffn;             // dense layers only
  Vector gamma1, beta1;       // beta empty under RMSNorm
  Vector gamma2, beta2;
  std::optional<Matrix> w_gate;    // d x e router, MoE only
  std::vector<FfnWeights> experts;  // e entries, MoE only

  bool operator==(const LayerWeights&) const = default;
};

struct EmbeddingTable {
  Matrix table;  // vocab x d; row i embeds token i

  std::size_t vocab_size() const noexcept { return table.rows(); }
  std::size_t d_model() const noexcept { return table.cols(); }
  bool operator==(const EmbeddingTable&) const = default;
};

struct ModelParams {
  ModelConfig config;
  EmbeddingTable embedding;  // may be empty on the server side
  std::vector<LayerWeights> layers;
  Matrix w_c;  // d x s

  /// Checks every tensor shape against the config. Throws kInvalidDimension.
  void validate(bool require_embedding = true) const;

  bool operator==(const ModelParams&) const = default;
};

// Additive attention mask: 0 keeps a position, -inf removes it.
class Mask {
 public:
  static Mask none() { return Mask(MaskKind::kNone, {}); }
  static Mask causal() { return Mask(MaskKind::kCausal, {}); }
  /// Values must be square with entries 0 or -inf.
  static Mask custom(Matrix values);
  /// Mask for the config's mask kind; custom masks cannot be derived.
  static Mask for_kind(MaskKind kind);

  MaskKind kind() const noexcept { return kind_; }
  const Matrix& values() const noexcept { return values_; }

  /// n x n additive matrix.
  Matrix materialize(std::size_t n) const;

 private:
  Mask(MaskKind kind, Matrix values) : kind_(kind), values_(std::move(values)) {}
  MaskKind kind_;
  Matrix values_;
};

/// Random sparse mask that always keeps the diagonal so no row is empty.
Mask random_sparse_mask(std::size_t n, double keep_prob, std::mt19937_64& rng);

Matrix embed(std::span<const std::uint32_t> token_ids, const EmbeddingTable& table);

struct AttentionTrace {
  Matrix q, k, value;
  Matrix u;
};

/// u = softmax(Q K^T / sqrt(scale) + M) V W_o, single head.
Matrix attention(const Matrix& x, const LayerWeights& w, const Mask& mask, float scale,
                 AttentionTrace* trace = nullptr);

Matrix ffn(const Matrix& v, const FfnWeights& w, FfnKind kind);

struct Routing {
  std::vector<std::uint32_t> experts;  // chosen expert ids, descending weight
  std::vector<double> weights;         // renormalized, sums to 1
};

/// Top-k selection on one router logit row; ties go to the lower index.
Routing route(std::span<const float> logits, std::size_t top_k);

struct MoeTrace {
  Matrix router_logits;          // n x e
  std::vector<Routing> routing;  // per token
};

Matrix moe_ffn(const Matrix& v, const LayerWeights& w, FfnKind kind, std::size_t top_k,
               MoeTrace* trace = nullptr);

// Intermediates of one layer, named after the forward-pass formulas.
struct LayerTrace {
  AttentionTrace attn;
  Matrix v;  // output of the attention sub-block
  Matrix z;  // feedforward output before the residual
  Matrix y;  // layer output
  std::optional<MoeTrace> moe;
};

Matrix layer_forward(const Matrix& x, const LayerWeights& w, const ModelConfig& cfg,
                     const Mask& mask, LayerTrace* trace = nullptr);

struct ModelTrace {
  std::vector<LayerTrace> layers;
  Matrix logits;  // y_L W_c
};

/// o = softmax(y_L W_c) after L stacked layers.
Matrix model_forward(const Matrix& x, const ModelParams& params, const Mask& mask,
                     ModelTrace* trace = nullptr);

/// Argmax of the last row, lowest index on ties.
std::uint32_t greedy_decode_step(const Matrix& o);

/// Unprotected local greedy generation with full re-embedding every round.
std::vector<std::uint32_t> generate_greedy(const ModelParams& params,
                                           std::span<const std::uint32_t> prompt,
                                           std::size_t max_tokens);

/// Seeded Gaussian weights with stddev 1/sqrt(d); norm weights near 1/0.
ModelParams gen_model(const ModelConfig& cfg, std::uint64_t seed);

}  // namespace stip
