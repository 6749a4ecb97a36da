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

#include "stip/transform.hpp"

#include <map>
#include <random>
#include <string>

#include "stip/error.hpp"

namespace stip {

namespace {

constexpr std::string_view kKeyMagic = "STPK";

void require_dims(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::kInvalidDimension, what);
}

[[noreturn]] void parse_fail(const std::string& what) { throw Error(ErrorCode::kParse, what); }

// left^T * w * right in a single gather: out[i][j] = w[left[i]][right[j]].
Matrix sandwich(const Matrix& w, const PermutationVec& left, const PermutationVec& right) {
  require_dims(w.rows() == left.dim() && w.cols() == right.dim(),
               "transform: weight " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                   " vs permutations " + std::to_string(left.dim()) + "/" +
                   std::to_string(right.dim()));
  Matrix out(w.rows(), w.cols());
  const auto rmap = right.map();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const auto src = w.row(left[i]);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < rmap.size(); ++j) dst[j] = src[rmap[j]];
  }
  return out;
}

FfnWeights transform_ffn(const FfnWeights& f, const PermutationVec& pi, const PermutationVec& inner,
                         FfnKind kind) {
  FfnWeights out;
  // SwiGLU gates elementwise, so W_1 must share W_3's hidden permutation.
  out.w1 = sandwich(f.w1, pi, inner);
  out.w2 = sandwich(f.w2, inner, pi);
  if (kind == FfnKind::kSwiglu) {
    if (!f.w3) throw Error(ErrorCode::kMissingWeight, "swiglu feedforward requires W_3");
    out.w3 = sandwich(*f.w3, pi, inner);
  }
  return out;
}

Vector permute_if_present(const Vector& v, const PermutationVec& pi) {
  return v.empty() ? v : apply_perm(v, pi);
}

void write_perm(ByteWriter& out, KeyRole role, std::uint16_t layer, const PermutationVec& p) {
  out.u8(static_cast<std::uint8_t>(role));
  out.u16(layer);
  out.u32(static_cast<std::uint32_t>(p.dim()));
  for (std::uint32_t idx : p.map()) out.u32(idx);
}

struct KeyRecord {
  KeyRole role;
  std::uint16_t layer;
  PermutationVec perm;
};

std::pair<std::uint64_t, std::vector<KeyRecord>> read_records(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (in.str(4) != kKeyMagic) parse_fail("bad key file magic");
  const std::uint16_t version = in.u16();
  if (version != kKeyFormatVersion) parse_fail("unsupported key file version " + std::to_string(version));
  const std::uint64_t epoch = in.u64();
  const std::uint32_t count = in.u32();
  std::vector<KeyRecord> records;
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint8_t role = in.u8();
    if (role > static_cast<std::uint8_t>(KeyRole::kProjText)) parse_fail("unknown key role " + std::to_string(role));
    const std::uint16_t layer = in.u16();
    const std::uint32_t dim = in.u32();
    if (static_cast<std::size_t>(dim) * 4 > in.remaining()) parse_fail("key record truncated");
    std::vector<std::uint32_t> map(dim);
    for (auto& idx : map) idx = in.u32();
    try {
      records.push_back({static_cast<KeyRole>(role), layer, PermutationVec(std::move(map))});
    } catch (const Error& e) {
      parse_fail(std::string("key record ") + std::to_string(r) + ": " + e.what());
    }
  }
  if (!in.done()) parse_fail("trailing bytes after key records");
  return {epoch, std::move(records)};
}

}  // namespace

std::size_t PermutationSet::count() const {
  std::size_t n = 2 + (pi_v ? 1 : 0) + (pi_t ? 1 : 0);
  for (const auto& l : layers) n += 2 + l.inner.size();
  return n;
}

void PermutationSet::validate(const ModelConfig& cfg) const {
  require_dims(pi.dim() == cfg.d_model, "pi dim " + std::to_string(pi.dim()) + " != d_model");
  require_dims(pi_c.dim() == cfg.vocab_size, "pi_c dim " + std::to_string(pi_c.dim()) + " != vocab_size");
  require_dims(layers.size() == cfg.n_layers, "permutation set layer count != n_layers");
  const std::size_t inner_count = cfg.is_moe() ? cfg.n_experts : 1;
  for (const auto& l : layers) {
    require_dims(l.pi1.dim() == cfg.d_model && l.pi2.dim() == cfg.d_model, "per-layer pi1/pi2 dims");
    require_dims(l.inner.size() == inner_count, "per-layer inner permutation count");
    for (const auto& p : l.inner) require_dims(p.dim() == cfg.d_ff, "inner permutation dim != d_ff");
  }
}

PermutationSet PermutationSet::inverse() const {
  PermutationSet out;
  out.epoch = epoch;
  out.pi = inverse_perm(pi);
  out.pi_c = inverse_perm(pi_c);
  for (const auto& l : layers) {
    LayerPermutations inv{inverse_perm(l.pi1), inverse_perm(l.pi2), {}};
    for (const auto& p : l.inner) inv.inner.push_back(inverse_perm(p));
    out.layers.push_back(std::move(inv));
  }
  if (pi_v) out.pi_v = inverse_perm(*pi_v);
  if (pi_t) out.pi_t = inverse_perm(*pi_t);
  return out;
}

PermutationSet PermutationSet::identity(const ModelConfig& cfg, std::uint64_t epoch) {
  cfg.validate();
  PermutationSet s;
  s.epoch = epoch;
  s.pi = PermutationVec::identity(cfg.d_model);
  s.pi_c = PermutationVec::identity(cfg.vocab_size);
  const std::size_t inner_count = cfg.is_moe() ? cfg.n_experts : 1;
  for (std::uint32_t i = 0; i < cfg.n_layers; ++i) {
    LayerPermutations l{PermutationVec::identity(cfg.d_model), PermutationVec::identity(cfg.d_model), {}};
    for (std::size_t e = 0; e < inner_count; ++e) l.inner.push_back(PermutationVec::identity(cfg.d_ff));
    s.layers.push_back(std::move(l));
  }
  return s;
}

PermutationSet gen_permutation_set(const ModelConfig& cfg, std::uint64_t seed, std::uint64_t epoch) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  PermutationSet s;
  s.epoch = epoch;
  s.pi = gen_permutation(cfg.d_model, rng);
  s.pi_c = gen_permutation(cfg.vocab_size, rng);
  const std::size_t inner_count = cfg.is_moe() ? cfg.n_experts : 1;
  for (std::uint32_t i = 0; i < cfg.n_layers; ++i) {
    LayerPermutations l;
    l.pi1 = gen_permutation(cfg.d_model, rng);
    l.pi2 = gen_permutation(cfg.d_model, rng);
    for (std::size_t e = 0; e < inner_count; ++e) l.inner.push_back(gen_permutation(cfg.d_ff, rng));
    s.layers.push_back(std::move(l));
  }
  return s;
}

LayerWeights transform_layer(const LayerWeights& w, const PermutationVec& pi,
                             const LayerPermutations& perms, const ModelConfig& cfg) {
  LayerWeights out;
  out.wq = sandwich(w.wq, pi, perms.pi1);
  out.wk = sandwich(w.wk, pi, perms.pi1);
  out.wv = sandwich(w.wv, pi, perms.pi2);
  out.wo = sandwich(w.wo, perms.pi2, pi);
  out.gamma1 = apply_perm(w.gamma1, pi);
  out.gamma2 = apply_perm(w.gamma2, pi);
  out.beta1 = permute_if_present(w.beta1, pi);
  out.beta2 = permute_if_present(w.beta2, pi);
  if (cfg.is_moe()) {
    if (!w.w_gate) throw Error(ErrorCode::kMissingWeight, "MoE layer without router weights");
    require_dims(perms.inner.size() == w.experts.size(), "one inner permutation per expert required");
    out.w_gate = apply_row_perm(*w.w_gate, pi);
    for (std::size_t e = 0; e < w.experts.size(); ++e) {
      out.experts.push_back(transform_ffn(w.experts[e], pi, perms.inner[e], cfg.ffn_kind));
    }
  } else {
    require_dims(perms.inner.size() == 1, "dense layer takes exactly one inner permutation");
    out.ffn = transform_ffn(w.ffn, pi, perms.inner.front(), cfg.ffn_kind);
  }
  return out;
}

Matrix transform_classifier(const Matrix& w_c, const PermutationVec& pi, const PermutationVec& pi_c) {
  return sandwich(w_c, pi, pi_c);
}

Matrix transform_projection(const Matrix& w, const PermutationVec& pi_v, const PermutationVec& pi_t) {
  return sandwich(w, pi_v, pi_t);
}

TransformedModel para_trans(const ModelParams& params, const PermutationSet& set) {
  set.validate(params.config);
  TransformedModel out;
  out.epoch = set.epoch;
  out.params.config = params.config;
  out.params.embedding = params.embedding;
  out.params.layers.reserve(params.layers.size());
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    out.params.layers.push_back(transform_layer(params.layers[i], set.pi, set.layers[i], params.config));
  }
  out.params.w_c = transform_classifier(params.w_c, set.pi, set.pi_c);
  return out;
}

Matrix protect_input(const Matrix& x, const PermutationVec& pi) { return apply_col_perm(x, pi); }

Matrix recover_output(const Matrix& o_permuted, const PermutationVec& pi_c) {
  return apply_col_perm(o_permuted, inverse_perm(pi_c));
}

EquivalenceReport verify_equivalence(const ModelParams& params, const PermutationSet& set,
                                     std::size_t trials, double tol, std::uint64_t seed,
                                     std::size_t seq_len) {
  if (trials == 0) throw Error(ErrorCode::kInvalidConfig, "verify_equivalence needs trials >= 1");
  return verify_equivalence(params, para_trans(params, set).params, set.shared_part(), trials, tol, seed, seq_len);
}

EquivalenceReport verify_equivalence(const ModelParams& params, const ModelParams& deployed,
                                     const SharedKeys& keys, std::size_t trials, double tol,
                                     std::uint64_t seed, std::size_t seq_len) {
  if (trials == 0) throw Error(ErrorCode::kInvalidConfig, "verify_equivalence needs trials >= 1");
  if (keys.pi.dim() != params.config.d_model || keys.pi_c.dim() != params.config.vocab_size) {
    throw Error(ErrorCode::kInvalidDimension, "shared keys do not match the model dims");
  }
  std::mt19937_64 rng(seed);
  EquivalenceReport report;
  std::size_t matches = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const Matrix x = gaussian_matrix(seq_len, params.config.d_model, 1.0, rng);
    const Mask mask = params.config.mask_kind == MaskKind::kCustom
                          ? random_sparse_mask(seq_len, 0.5, rng)
                          : Mask::for_kind(params.config.mask_kind);
    const Matrix expected = model_forward(x, params, mask);
    const Matrix got = recover_output(model_forward(protect_input(x, keys.pi), deployed, mask), keys.pi_c);
    report.max_abs_diff = std::max(report.max_abs_diff, max_abs_diff(expected, got));
    for (std::size_t r = 0; r < seq_len; ++r) {
      const Matrix a(1, expected.cols(), std::vector<float>(expected.row(r).begin(), expected.row(r).end()));
      const Matrix b(1, got.cols(), std::vector<float>(got.row(r).begin(), got.row(r).end()));
      if (greedy_decode_step(a) == greedy_decode_step(b)) ++matches;
    }
    report.rows_compared += seq_len;
  }
  report.trials = trials;
  report.argmax_match_rate = static_cast<double>(matches) / static_cast<double>(report.rows_compared);
  report.passed = report.argmax_match_rate == 1.0 && report.max_abs_diff <= tol;
  return report;
}

Bytes encode_keys(const PermutationSet& set) {
  ByteWriter out;
  out.str(kKeyMagic);
  out.u16(kKeyFormatVersion);
  out.u64(set.epoch);
  out.u32(static_cast<std::uint32_t>(set.count()));
  write_perm(out, KeyRole::kPi, 0, set.pi);
  write_perm(out, KeyRole::kPiC, 0, set.pi_c);
  for (std::size_t i = 0; i < set.layers.size(); ++i) {
    const auto layer = static_cast<std::uint16_t>(i);
    write_perm(out, KeyRole::kLayerPi1, layer, set.layers[i].pi1);
    write_perm(out, KeyRole::kLayerPi2, layer, set.layers[i].pi2);
    for (const auto& p : set.layers[i].inner) write_perm(out, KeyRole::kLayerInner, layer, p);
  }
  if (set.pi_v) write_perm(out, KeyRole::kProjVisual, 0, *set.pi_v);
  if (set.pi_t) write_perm(out, KeyRole::kProjText, 0, *set.pi_t);
  return out.take();
}

PermutationSet decode_keys(std::span<const std::uint8_t> bytes) {
  auto [epoch, records] = read_records(bytes);
  PermutationSet s;
  s.epoch = epoch;
  bool have_pi = false;
  bool have_pi_c = false;
  std::map<std::uint16_t, LayerPermutations> layers;
  std::map<std::uint16_t, int> seen_mask;  // bit 0: pi1, bit 1: pi2
  for (auto& r : records) {
    switch (r.role) {
      case KeyRole::kPi: s.pi = std::move(r.perm); have_pi = true; break;
      case KeyRole::kPiC: s.pi_c = std::move(r.perm); have_pi_c = true; break;
      case KeyRole::kLayerPi1: layers[r.layer].pi1 = std::move(r.perm); seen_mask[r.layer] |= 1; break;
      case KeyRole::kLayerPi2: layers[r.layer].pi2 = std::move(r.perm); seen_mask[r.layer] |= 2; break;
      case KeyRole::kLayerInner: layers[r.layer].inner.push_back(std::move(r.perm)); break;
      case KeyRole::kProjVisual: s.pi_v = std::move(r.perm); break;
      case KeyRole::kProjText: s.pi_t = std::move(r.perm); break;
    }
  }
  if (!have_pi || !have_pi_c) parse_fail("key file lacks pi or pi_c");
  std::uint16_t expect = 0;
  for (auto& [idx, l] : layers) {
    if (idx != expect++) parse_fail("key file layer indices are not contiguous");
    if (seen_mask[idx] != 3 || l.inner.empty()) parse_fail("key file layer " + std::to_string(idx) + " incomplete");
    s.layers.push_back(std::move(l));
  }
  return s;
}

Bytes encode_shared_keys(const SharedKeys& keys) {
  ByteWriter out;
  out.str(kKeyMagic);
  out.u16(kKeyFormatVersion);
  out.u64(keys.epoch);
  out.u32(2);
  write_perm(out, KeyRole::kPi, 0, keys.pi);
  write_perm(out, KeyRole::kPiC, 0, keys.pi_c);
  return out.take();
}

SharedKeys decode_shared_keys(std::span<const std::uint8_t> bytes) {
  auto [epoch, records] = read_records(bytes);
  if (records.size() != 2 || records[0].role != KeyRole::kPi || records[1].role != KeyRole::kPiC) {
    parse_fail("shared key block must hold exactly pi and pi_c");
  }
  return {epoch, std::move(records[0].perm), std::move(records[1].perm)};
}

std::vector<KeyRecordInfo> inspect_keys(std::span<const std::uint8_t> bytes) {
  auto [epoch, records] = read_records(bytes);
  std::vector<KeyRecordInfo> out;
  for (const auto& r : records) out.push_back({r.role, r.layer, static_cast<std::uint32_t>(r.perm.dim())});
  return out;
}

}  // namespace stip
