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

#include <random>
#include <set>

#include "doctest.h"
#include "equivalence_checks.hpp"
#include "oracles.hpp"
#include "stip/error.hpp"
#include "stip/model_io.hpp"
#include "stip/transform.hpp"

using namespace stip;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode{};
}

ModelConfig desk_config(FfnKind ffn, NormKind norm, NormPlacement place, std::uint32_t experts = 0) {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 64;
  c.d_ff = 256;
  c.vocab_size = 100;
  c.attn_scale = 64.0F;
  c.ffn_kind = ffn;
  c.norm_kind = norm;
  c.norm_placement = place;
  c.n_experts = experts;
  c.top_k = 2;
  return c;
}

std::vector<ModelConfig> tiny_variants() {
  return {oracle::tiny_config(FfnKind::kRelu, NormKind::kLayerNorm, NormPlacement::kPost),
          oracle::tiny_config(FfnKind::kGelu, NormKind::kLayerNorm, NormPlacement::kPre),
          oracle::tiny_config(FfnKind::kSwiglu, NormKind::kRmsNorm, NormPlacement::kPre),
          oracle::tiny_config(FfnKind::kRelu, NormKind::kLayerNorm, NormPlacement::kPost, 4)};
}

}  // namespace

TEST_CASE("gen_permutation_set") {
  ModelConfig c = oracle::tiny_config();
  c.n_layers = 1;
  const PermutationSet s = gen_permutation_set(c, 1);
  CHECK(s.count() == 5);
  CHECK(s.pi.dim() == c.d_model);
  CHECK(s.pi_c.dim() == c.vocab_size);
  CHECK(s.layers[0].pi1.dim() == c.d_model);
  CHECK(s.layers[0].pi2.dim() == c.d_model);
  CHECK(s.layers[0].inner.size() == 1);
  CHECK(s.layers[0].inner[0].dim() == c.d_ff);
  CHECK(gen_permutation_set(c, 1) == s);

  ModelConfig c4 = oracle::tiny_config();
  c4.n_layers = 4;
  const PermutationSet s4 = gen_permutation_set(c4, 2);
  std::set<std::vector<std::uint32_t>> distinct;
  for (const auto& l : s4.layers) {
    distinct.emplace(l.pi1.map().begin(), l.pi1.map().end());
    distinct.emplace(l.pi2.map().begin(), l.pi2.map().end());
  }
  distinct.emplace(s4.pi.map().begin(), s4.pi.map().end());
  CHECK(distinct.size() > 1);

  ModelConfig moe = oracle::tiny_config(FfnKind::kRelu, NormKind::kLayerNorm, NormPlacement::kPost, 3);
  CHECK(gen_permutation_set(moe, 3).count() == 2 + moe.n_layers * (2 + 3));
}

TEST_CASE("shared and private halves") {
  const ModelConfig c = oracle::tiny_config();
  const PermutationSet s = gen_permutation_set(c, 4, 7);
  const SharedKeys shared = s.shared_part();
  CHECK(shared.epoch == 7);
  CHECK(shared.pi == s.pi);
  CHECK(shared.pi_c == s.pi_c);
  CHECK(s.private_part().size() == c.n_layers);
}

TEST_CASE("transform_layer") {
  const ModelConfig cfg = oracle::tiny_config();
  const ModelParams p = gen_model(cfg, 5);

  SUBCASE("identity permutations leave weights unchanged") {
    const PermutationSet id = PermutationSet::identity(cfg);
    CHECK(transform_layer(p.layers[0], id.pi, id.layers[0], cfg) == p.layers[0]);
  }
  SUBCASE("d=2 hand case") {
    ModelConfig c2 = cfg;
    c2.d_model = 2;
    c2.d_ff = 1;
    LayerWeights w;
    w.wq = Matrix::from_rows({{1, 2}, {3, 4}});
    w.wk = w.wv = w.wo = Matrix::identity(2);
    w.ffn.w1 = Matrix(2, 1);
    w.ffn.w2 = Matrix(1, 2);
    w.gamma1 = w.gamma2 = Vector{1, 2};
    w.beta1 = w.beta2 = Vector{3, 4};
    const PermutationVec swap({1, 0});
    const LayerPermutations lp{PermutationVec::identity(2), PermutationVec::identity(2), {PermutationVec::identity(1)}};
    const LayerWeights out = transform_layer(w, swap, lp, c2);
    CHECK(out.wq == Matrix::from_rows({{3, 4}, {1, 2}}));
    CHECK(out.gamma1 == Vector{2, 1});
    CHECK(out.beta2 == Vector{4, 3});
  }
  SUBCASE("u' = u pi on a random layer") {
    std::mt19937_64 rng(6);
    const PermutationSet s = gen_permutation_set(cfg, 7);
    const LayerWeights w2 = transform_layer(p.layers[0], s.pi, s.layers[0], cfg);
    const Matrix x = oracle::random_matrix(5, 8, rng);
    const Matrix u = attention(x, p.layers[0], Mask::causal(), cfg.attn_scale);
    const Matrix u2 = attention(apply_col_perm(x, s.pi), w2, Mask::causal(), cfg.attn_scale);
    CHECK(max_abs_diff(apply_col_perm(u, s.pi), u2) <= 1e-5);
  }
  SUBCASE("dimension mismatch") {
    const PermutationSet s = gen_permutation_set(cfg, 7);
    CHECK(code_of([&] { transform_layer(p.layers[0], PermutationVec::identity(3), s.layers[0], cfg); }) ==
          ErrorCode::kInvalidDimension);
  }
}

TEST_CASE("transform_classifier") {
  std::mt19937_64 rng(8);
  const Matrix wc = oracle::random_matrix(6, 9, rng);
  CHECK(transform_classifier(wc, PermutationVec::identity(6), PermutationVec::identity(9)) == wc);

  const PermutationVec pi = oracle::random_perm(6, rng);
  const PermutationVec pi_c = oracle::random_perm(9, rng);
  const Matrix y = oracle::random_matrix(4, 6, rng);
  const Matrix o = softmax_rows(matmul(y, wc));
  const Matrix o2 = softmax_rows(matmul(apply_col_perm(y, pi), transform_classifier(wc, pi, pi_c)));
  CHECK(max_abs_diff(apply_col_perm(o, pi_c), o2) <= 1e-6);

  const PermutationVec swap({1, 0});
  CHECK(transform_classifier(Matrix::from_rows({{1, 2}, {3, 4}}), swap, swap) == Matrix::from_rows({{4, 3}, {2, 1}}));
  CHECK(code_of([&] { transform_classifier(wc, pi_c, pi); }) == ErrorCode::kInvalidDimension);
}

TEST_CASE("transform_projection") {
  std::mt19937_64 rng(9);
  const Matrix w = oracle::random_matrix(5, 7, rng);
  CHECK(transform_projection(w, PermutationVec::identity(5), PermutationVec::identity(7)) == w);
  const PermutationVec pv = oracle::random_perm(5, rng);
  const PermutationVec pt = oracle::random_perm(7, rng);
  const Matrix xv = oracle::random_matrix(3, 5, rng);
  CHECK(max_abs_diff(matmul(apply_col_perm(xv, pv), transform_projection(w, pv, pt)),
                     apply_col_perm(matmul(xv, w), pt)) <= 1e-5);
  CHECK(transform_projection(Matrix::identity(2), PermutationVec({1, 0}), PermutationVec::identity(2)) ==
        Matrix::from_rows({{0, 1}, {1, 0}}));
}

TEST_CASE("para_trans") {
  SUBCASE("identity set") {
    const ModelConfig cfg = oracle::tiny_config();
    const ModelParams p = gen_model(cfg, 10);
    const TransformedModel t = para_trans(p, PermutationSet::identity(cfg));
    CHECK(t.params == p);
  }
  SUBCASE("embedding stays, epoch follows the set") {
    const ModelConfig cfg = oracle::tiny_config();
    const ModelParams p = gen_model(cfg, 10);
    const TransformedModel t = para_trans(p, gen_permutation_set(cfg, 1, 9));
    CHECK(t.params.embedding == p.embedding);
    CHECK(t.epoch == 9);
  }
  SUBCASE("inverse set restores the original exactly") {
    for (const ModelConfig& cfg : tiny_variants()) {
      const ModelParams p = gen_model(cfg, 11);
      const PermutationSet s = gen_permutation_set(cfg, 12);
      CHECK(para_trans(para_trans(p, s).params, s.inverse()).params == p);
    }
  }
  SUBCASE("end to end at d=64, L=4") {
    const ModelConfig cfg = desk_config(FfnKind::kRelu, NormKind::kLayerNorm, NormPlacement::kPost);
    const ModelParams p = gen_model(cfg, 13);
    const PermutationSet s = gen_permutation_set(cfg, 14);
    const TransformedModel t = para_trans(p, s);
    std::mt19937_64 rng(15);
    const Matrix x = oracle::random_matrix(16, 64, rng);
    const Matrix expected = model_forward(x, p, Mask::causal());
    const Matrix got = recover_output(model_forward(protect_input(x, s.pi), t.params, Mask::causal()), s.pi_c);
    CHECK(max_abs_diff(expected, got) <= 1e-4);
  }
  SUBCASE("mismatched set") {
    const ModelParams p = gen_model(oracle::tiny_config(), 16);
    ModelConfig other = oracle::tiny_config();
    other.d_model = 10;
    CHECK(code_of([&] { para_trans(p, gen_permutation_set(other, 1)); }) == ErrorCode::kInvalidDimension);
  }
}

TEST_CASE("every intermediate is its permuted original") {
  std::mt19937_64 rng(20);
  for (const ModelConfig& base : tiny_variants()) {
    for (MaskKind mk : {MaskKind::kNone, MaskKind::kCausal, MaskKind::kCustom}) {
      ModelConfig cfg = base;
      cfg.mask_kind = mk;
      const ModelParams p = gen_model(cfg, rng());
      const PermutationSet s = gen_permutation_set(cfg, rng());
      const TransformedModel t = para_trans(p, s);
      const Matrix x = oracle::random_matrix(6, cfg.d_model, rng);
      const Mask mask = mk == MaskKind::kCustom ? random_sparse_mask(6, 0.4, rng) : Mask::for_kind(mk);
      const testing::StepDiffs d = testing::step_diffs(p, s, t, x, mask);
      CAPTURE(to_string(cfg.ffn_kind));
      CAPTURE(to_string(mk));
      CHECK(d.worst() <= 1e-5);
      CHECK(d.routing_identical);
    }
  }
}

TEST_CASE("SwiGLU feedforward equivariance") {
  std::mt19937_64 rng(30);
  const ModelConfig cfg = oracle::tiny_config(FfnKind::kSwiglu, NormKind::kRmsNorm, NormPlacement::kPre);
  const ModelParams p = gen_model(cfg, 31);
  const PermutationSet s = gen_permutation_set(cfg, 32);
  const LayerWeights w2 = transform_layer(p.layers[0], s.pi, s.layers[0], cfg);
  const Matrix v = oracle::random_matrix(4, 8, rng);
  const Matrix lhs = ffn(apply_col_perm(v, s.pi), w2.ffn, FfnKind::kSwiglu);
  const Matrix rhs = apply_col_perm(ffn(v, p.layers[0].ffn, FfnKind::kSwiglu), s.pi);
  CHECK(max_abs_diff(lhs, rhs) <= 1e-5);

  // W_1' = pi^T W_1 without the hidden permutation leaves the gate in the
  // original hidden order while W_3' is permuted; the product no longer lines up.
  FfnWeights left_only = w2.ffn;
  left_only.w1 = apply_row_perm(p.layers[0].ffn.w1, s.pi);
  const Matrix broken = ffn(apply_col_perm(v, s.pi), left_only, FfnKind::kSwiglu);
  CHECK(max_abs_diff(broken, rhs) > 1e-3);
}

TEST_CASE("MoE router is invariant") {
  std::mt19937_64 rng(40);
  const ModelConfig cfg = oracle::tiny_config(FfnKind::kGelu, NormKind::kLayerNorm, NormPlacement::kPost, 4);
  const ModelParams p = gen_model(cfg, 41);
  const PermutationSet s = gen_permutation_set(cfg, 42);
  const TransformedModel t = para_trans(p, s);
  const Matrix v = oracle::random_matrix(7, 8, rng);
  const Matrix logits = matmul(v, *p.layers[0].w_gate);
  const Matrix logits2 = matmul(apply_col_perm(v, s.pi), *t.params.layers[0].w_gate);
  CHECK(max_abs_diff(logits, logits2) <= 1e-6);
  MoeTrace a;
  MoeTrace b;
  const Matrix out = moe_ffn(v, p.layers[0], cfg.ffn_kind, 2, &a);
  const Matrix out2 = moe_ffn(apply_col_perm(v, s.pi), t.params.layers[0], cfg.ffn_kind, 2, &b);
  for (std::size_t i = 0; i < a.routing.size(); ++i) CHECK(a.routing[i].experts == b.routing[i].experts);
  CHECK(max_abs_diff(apply_col_perm(out, s.pi), out2) <= 1e-5);
}

TEST_CASE("verify_equivalence") {
  const ModelConfig cfg = desk_config(FfnKind::kGelu, NormKind::kLayerNorm, NormPlacement::kPre);
  const ModelParams p = gen_model(cfg, 50);
  const EquivalenceReport id = verify_equivalence(p, PermutationSet::identity(cfg), 3, 1e-4);
  CHECK(id.max_abs_diff == 0.0);
  CHECK(id.argmax_match_rate == 1.0);
  CHECK(id.passed);

  const EquivalenceReport r = verify_equivalence(p, gen_permutation_set(cfg, 51), 5, 1e-4);
  CHECK(r.argmax_match_rate == 1.0);
  CHECK(r.max_abs_diff <= 1e-4);
  CHECK(r.rows_compared == 5 * 16);

  CHECK(code_of([&] { verify_equivalence(p, PermutationSet::identity(cfg), 0, 1e-4); }) == ErrorCode::kInvalidConfig);

  // One swapped index in the private half breaks equivalence.
  PermutationSet corrupted = gen_permutation_set(cfg, 51);
  std::vector<std::uint32_t> m(corrupted.layers[1].pi2.map().begin(), corrupted.layers[1].pi2.map().end());
  std::swap(m[0], m[1]);
  corrupted.layers[1].pi2 = PermutationVec(m);
  const TransformedModel good = para_trans(p, gen_permutation_set(cfg, 51));
  std::mt19937_64 rng(52);
  const Matrix x = oracle::random_matrix(16, 64, rng);
  const Matrix expected = model_forward(x, p, Mask::causal());
  const Matrix via_good = recover_output(model_forward(protect_input(x, corrupted.pi), good.params, Mask::causal()),
                                         corrupted.pi_c);
  CHECK(max_abs_diff(expected, via_good) <= 1e-4);  // pi2 never reaches the data owner
}

TEST_CASE("transformed model is a valid model container") {
  for (const ModelConfig& cfg : tiny_variants()) {
    const ModelParams p = gen_model(cfg, 60);
    const TransformedModel t = para_trans(p, gen_permutation_set(cfg, 61));
    const ModelParams parsed = decode_model(encode_model(t.params, false));
    CHECK(parsed.layers == t.params.layers);
    CHECK(parsed.w_c == t.params.w_c);
  }
}

TEST_CASE("key file") {
  const ModelConfig cfg = oracle::tiny_config(FfnKind::kRelu, NormKind::kLayerNorm, NormPlacement::kPost, 3);
  PermutationSet s = gen_permutation_set(cfg, 70, 5);
  s.pi_v = gen_permutation(6, 71U);
  s.pi_t = gen_permutation(8, 72U);
  const Bytes b = encode_keys(s);
  CHECK(decode_keys(b) == s);
  CHECK(std::string(b.begin(), b.begin() + 4) == "STPK");

  const auto records = inspect_keys(b);
  CHECK(records.size() == s.count());
  CHECK(records[0].role == KeyRole::kPi);
  CHECK(records[1].role == KeyRole::kPiC);
  for (std::size_t i = 2; i < records.size(); ++i) CHECK(records[i].role != KeyRole::kPi);

  const ModelConfig dense = oracle::tiny_config();
  CHECK(inspect_keys(encode_keys(gen_permutation_set(dense, 1))).size() == 3 * dense.n_layers + 2);

  const SharedKeys shared = s.shared_part();
  CHECK(decode_shared_keys(encode_shared_keys(shared)) == shared);
  CHECK(code_of([&] { decode_shared_keys(b); }) == ErrorCode::kParse);

  Bytes dup = b;
  // first index of pi duplicated into the second slot
  const std::size_t first_idx = 4 + 2 + 8 + 4 + 1 + 2 + 4;
  for (std::size_t i = 0; i < 4; ++i) dup[first_idx + 4 + i] = dup[first_idx + i];
  CHECK(code_of([&] { decode_keys(dup); }) == ErrorCode::kParse);
  CHECK(code_of([&] { decode_keys(std::span(b).first(b.size() - 1)); }) == ErrorCode::kParse);
}
