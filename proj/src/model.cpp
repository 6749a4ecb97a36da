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

#include "stip/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "stip/error.hpp"

namespace stip {

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

[[noreturn]] void bad_config(const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); }

void require_dims(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::kInvalidDimension, what);
}

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  require_dims(m.rows() == rows && m.cols() == cols,
               name + " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                   ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
}

Matrix apply_norm(const Matrix& x, const Vector& gamma, const Vector& beta, const ModelConfig& cfg) {
  if (cfg.norm_kind == NormKind::kRmsNorm) return rmsnorm(x, gamma, cfg.norm_eps);
  return layernorm(x, gamma, beta, cfg.norm_eps);
}

void validate_ffn(const FfnWeights& f, const ModelConfig& cfg, const std::string& name) {
  require_shape(f.w1, cfg.d_model, cfg.d_ff, name + ".w1");
  require_shape(f.w2, cfg.d_ff, cfg.d_model, name + ".w2");
  if (cfg.ffn_kind == FfnKind::kSwiglu) {
    if (!f.w3) throw Error(ErrorCode::kMissingWeight, name + ".w3 required for swiglu");
    require_shape(*f.w3, cfg.d_model, cfg.d_ff, name + ".w3");
  }
}

FfnWeights random_ffn(const ModelConfig& cfg, double stddev, std::mt19937_64& rng) {
  FfnWeights f;
  f.w1 = gaussian_matrix(cfg.d_model, cfg.d_ff, stddev, rng);
  f.w2 = gaussian_matrix(cfg.d_ff, cfg.d_model, stddev, rng);
  if (cfg.ffn_kind == FfnKind::kSwiglu) f.w3 = gaussian_matrix(cfg.d_model, cfg.d_ff, stddev, rng);
  return f;
}

}  // namespace

std::string_view to_string(NormKind k) { return k == NormKind::kRmsNorm ? "rmsnorm" : "layernorm"; }
std::string_view to_string(NormPlacement k) { return k == NormPlacement::kPre ? "pre" : "post"; }
std::string_view to_string(FfnKind k) {
  switch (k) {
    case FfnKind::kRelu: return "relu";
    case FfnKind::kGelu: return "gelu";
    case FfnKind::kSwiglu: return "swiglu";
  }
  return "?";
}
std::string_view to_string(MaskKind k) {
  switch (k) {
    case MaskKind::kNone: return "none";
    case MaskKind::kCausal: return "causal";
    case MaskKind::kCustom: return "custom";
  }
  return "?";
}

NormKind parse_norm_kind(std::string_view s) {
  if (s == "layernorm") return NormKind::kLayerNorm;
  if (s == "rmsnorm") return NormKind::kRmsNorm;
  bad_config("unknown norm_kind '" + std::string(s) + "'");
}
NormPlacement parse_norm_placement(std::string_view s) {
  if (s == "post") return NormPlacement::kPost;
  if (s == "pre") return NormPlacement::kPre;
  bad_config("unknown norm_placement '" + std::string(s) + "'");
}
FfnKind parse_ffn_kind(std::string_view s) {
  if (s == "relu") return FfnKind::kRelu;
  if (s == "gelu") return FfnKind::kGelu;
  if (s == "swiglu") return FfnKind::kSwiglu;
  bad_config("unknown ffn_kind '" + std::string(s) + "'");
}
MaskKind parse_mask_kind(std::string_view s) {
  if (s == "none") return MaskKind::kNone;
  if (s == "causal") return MaskKind::kCausal;
  if (s == "custom") return MaskKind::kCustom;
  bad_config("unknown mask_kind '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 1) bad_config("n_layers must be >= 1");
  if (d_model < 2) bad_config("d_model must be >= 2");
  if (d_ff < 1) bad_config("d_ff must be >= 1");
  if (vocab_size < 2) bad_config("vocab_size must be >= 2");
  if (n_experts == 1) bad_config("n_experts must be 0 or >= 2");
  if (is_moe() && (top_k < 1 || top_k > n_experts)) {
    bad_config("top_k must be in [1, n_experts]");
  }
  if (!(attn_scale > 0.0F) || !std::isfinite(attn_scale)) bad_config("attn_scale must be > 0");
  if (!(norm_eps >= 0.0F)) bad_config("norm_eps must be >= 0");
}

void ModelParams::validate(bool require_embedding) const {
  config.validate();
  const std::size_t d = config.d_model;
  if (require_embedding || !embedding.table.empty()) {
    require_shape(embedding.table, config.vocab_size, d, "embedding");
  }
  require_dims(layers.size() == config.n_layers,
               "layer count " + std::to_string(layers.size()) + " != n_layers " +
                   std::to_string(config.n_layers));
  const bool rms = config.norm_kind == NormKind::kRmsNorm;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerWeights& w = layers[i];
    const std::string p = "layers." + std::to_string(i);
    require_shape(w.wq, d, d, p + ".wq");
    require_shape(w.wk, d, d, p + ".wk");
    require_shape(w.wv, d, d, p + ".wv");
    require_shape(w.wo, d, d, p + ".wo");
    require_dims(w.gamma1.dim() == d && w.gamma2.dim() == d, p + ": gamma dims");
    if (rms) {
      require_dims(w.beta1.empty() && w.beta2.empty(), p + ": rmsnorm layers carry no beta");
    } else {
      require_dims(w.beta1.dim() == d && w.beta2.dim() == d, p + ": beta dims");
    }
    if (config.is_moe()) {
      if (!w.w_gate) throw Error(ErrorCode::kMissingWeight, p + ".w_gate required for MoE");
      require_shape(*w.w_gate, d, config.n_experts, p + ".w_gate");
      require_dims(w.experts.size() == config.n_experts, p + ": expert count");
      for (std::size_t e = 0; e < w.experts.size(); ++e) {
        validate_ffn(w.experts[e], config, p + ".experts." + std::to_string(e));
      }
    } else {
      validate_ffn(w.ffn, config, p + ".ffn");
    }
  }
  require_shape(w_c, d, config.vocab_size, "classifier");
}

Mask Mask::custom(Matrix values) {
  require_dims(values.rows() == values.cols(), "custom mask must be square");
  for (float v : values.data()) {
    require_dims(v == 0.0F || (std::isinf(v) && v < 0), "custom mask entries must be 0 or -inf");
  }
  return Mask(MaskKind::kCustom, std::move(values));
}

Mask Mask::for_kind(MaskKind kind) {
  switch (kind) {
    case MaskKind::kNone: return none();
    case MaskKind::kCausal: return causal();
    case MaskKind::kCustom: break;
  }
  bad_config("custom masks must be supplied explicitly");
}

Matrix Mask::materialize(std::size_t n) const {
  switch (kind_) {
    case MaskKind::kNone: return Matrix(n, n);
    case MaskKind::kCausal: {
      Matrix m(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) m(i, j) = kNegInf;
      }
      return m;
    }
    case MaskKind::kCustom:
      require_dims(values_.rows() == n, "custom mask is " + std::to_string(values_.rows()) +
                                            "x" + std::to_string(values_.rows()) +
                                            " for sequence length " + std::to_string(n));
      return values_;
  }
  return Matrix(n, n);
}

Mask random_sparse_mask(std::size_t n, double keep_prob, std::mt19937_64& rng) {
  std::bernoulli_distribution keep(keep_prob);
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && !keep(rng)) m(i, j) = kNegInf;
    }
  }
  return Mask::custom(std::move(m));
}

Matrix embed(std::span<const std::uint32_t> token_ids, const EmbeddingTable& table) {
  Matrix out(token_ids.size(), table.d_model());
  for (std::size_t j = 0; j < token_ids.size(); ++j) {
    if (token_ids[j] >= table.vocab_size()) {
      throw Error(ErrorCode::kUnknownToken, "token id " + std::to_string(token_ids[j]) +
                                                " outside vocabulary of " +
                                                std::to_string(table.vocab_size()));
    }
    const auto src = table.table.row(token_ids[j]);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
  return out;
}

Matrix attention(const Matrix& x, const LayerWeights& w, const Mask& mask, float scale,
                 AttentionTrace* trace) {
  require_dims(x.cols() == w.wq.rows(), "attention: input width " + std::to_string(x.cols()) +
                                            " vs W_q rows " + std::to_string(w.wq.rows()));
  Matrix q = matmul(x, w.wq);
  Matrix k = matmul(x, w.wk);
  Matrix value = matmul(x, w.wv);
  Matrix scores = matmul(q, transpose(k));
  const float inv = static_cast<float>(1.0 / std::sqrt(static_cast<double>(scale)));
  const Matrix m = mask.materialize(x.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      scores(i, j) = scores(i, j) * inv + m(i, j);
    }
  }
  Matrix u = matmul(matmul(softmax_rows(scores), value), w.wo);
  if (trace != nullptr) {
    trace->q = std::move(q);
    trace->k = std::move(k);
    trace->value = std::move(value);
    trace->u = u;
  }
  return u;
}

Matrix ffn(const Matrix& v, const FfnWeights& w, FfnKind kind) {
  switch (kind) {
    case FfnKind::kRelu: return matmul(relu(matmul(v, w.w1)), w.w2);
    case FfnKind::kGelu: return matmul(gelu(matmul(v, w.w1)), w.w2);
    case FfnKind::kSwiglu: {
      if (!w.w3) throw Error(ErrorCode::kMissingWeight, "swiglu feedforward requires W_3");
      const Matrix gate = matmul(v, w.w1);
      const Matrix hidden = hadamard(hadamard(gate, sigmoid(gate)), matmul(v, *w.w3));
      return matmul(hidden, w.w2);
    }
  }
  bad_config("unknown feedforward kind");
}

Routing route(std::span<const float> logits, std::size_t top_k) {
  if (top_k < 1 || top_k > logits.size()) {
    bad_config("top_k " + std::to_string(top_k) + " outside [1, " +
               std::to_string(logits.size()) + "]");
  }
  Matrix row(1, logits.size(), std::vector<float>(logits.begin(), logits.end()));
  const Matrix probs = softmax_rows(row);
  std::vector<std::uint32_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0U);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return logits[a] > logits[b]; });
  Routing r;
  r.experts.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k));
  double total = 0.0;
  for (std::uint32_t e : r.experts) total += probs(0, e);
  for (std::uint32_t e : r.experts) r.weights.push_back(probs(0, e) / total);
  return r;
}

Matrix moe_ffn(const Matrix& v, const LayerWeights& w, FfnKind kind, std::size_t top_k,
               MoeTrace* trace) {
  if (!w.w_gate) throw Error(ErrorCode::kMissingWeight, "MoE layer without router weights");
  const std::size_t e = w.experts.size();
  if (e < 2 || w.w_gate->cols() != e) bad_config("MoE layer needs >= 2 experts matching W_g");
  if (top_k < 1 || top_k > e) bad_config("top_k exceeds expert count");

  Matrix logits = matmul(v, *w.w_gate);
  std::vector<Routing> routing;
  routing.reserve(v.rows());
  for (std::size_t t = 0; t < v.rows(); ++t) routing.push_back(route(logits.row(t), top_k));

  // Expert outputs are computed per expert on the tokens routed to it, then
  // combined per token in routing order.
  std::vector<std::vector<std::size_t>> tokens_of(e);
  for (std::size_t t = 0; t < routing.size(); ++t) {
    for (std::uint32_t ex : routing[t].experts) tokens_of[ex].push_back(t);
  }
  std::vector<Matrix> expert_out(e);
  std::vector<std::vector<std::size_t>> slot_of(e, std::vector<std::size_t>(v.rows(), 0));
  for (std::size_t ex = 0; ex < e; ++ex) {
    if (tokens_of[ex].empty()) continue;
    Matrix batch(tokens_of[ex].size(), v.cols());
    for (std::size_t s = 0; s < tokens_of[ex].size(); ++s) {
      const auto src = v.row(tokens_of[ex][s]);
      std::copy(src.begin(), src.end(), batch.row(s).begin());
      slot_of[ex][tokens_of[ex][s]] = s;
    }
    expert_out[ex] = ffn(batch, w.experts[ex], kind);
  }
  Matrix out(v.rows(), v.cols());
  std::vector<double> acc(v.cols());
  for (std::size_t t = 0; t < v.rows(); ++t) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t r = 0; r < routing[t].experts.size(); ++r) {
      const std::uint32_t ex = routing[t].experts[r];
      const auto src = expert_out[ex].row(slot_of[ex][t]);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += routing[t].weights[r] * src[j];
    }
    auto orow = out.row(t);
    for (std::size_t j = 0; j < acc.size(); ++j) orow[j] = static_cast<float>(acc[j]);
  }
  if (trace != nullptr) {
    trace->router_logits = std::move(logits);
    trace->routing = std::move(routing);
  }
  return out;
}

Matrix layer_forward(const Matrix& x, const LayerWeights& w, const ModelConfig& cfg,
                     const Mask& mask, LayerTrace* trace) {
  require_dims(x.cols() == cfg.d_model, "layer_forward: input width " +
                                            std::to_string(x.cols()) + " != d_model " +
                                            std::to_string(cfg.d_model));
  AttentionTrace attn_trace;
  MoeTrace moe_trace;
  auto feedforward = [&](const Matrix& in) {
    if (cfg.is_moe()) return moe_ffn(in, w, cfg.ffn_kind, cfg.top_k, &moe_trace);
    return ffn(in, w.ffn, cfg.ffn_kind);
  };

  Matrix v;
  Matrix z;
  Matrix y;
  if (cfg.norm_placement == NormPlacement::kPost) {
    const Matrix u = attention(x, w, mask, cfg.attn_scale, &attn_trace);
    v = apply_norm(add(u, x), w.gamma1, w.beta1, cfg);
    z = feedforward(v);
    y = apply_norm(add(z, v), w.gamma2, w.beta2, cfg);
  } else {
    const Matrix u =
        attention(apply_norm(x, w.gamma1, w.beta1, cfg), w, mask, cfg.attn_scale, &attn_trace);
    v = add(u, x);
    z = feedforward(apply_norm(v, w.gamma2, w.beta2, cfg));
    y = add(z, v);
  }
  if (trace != nullptr) {
    trace->attn = std::move(attn_trace);
    trace->v = std::move(v);
    trace->z = std::move(z);
    trace->y = y;
    if (cfg.is_moe()) trace->moe = std::move(moe_trace);
  }
  return y;
}

Matrix model_forward(const Matrix& x, const ModelParams& params, const Mask& mask,
                     ModelTrace* trace) {
  const ModelConfig& cfg = params.config;
  require_dims(params.layers.size() == cfg.n_layers, "model_forward: layer count mismatch");
  Matrix h = x;
  if (trace != nullptr) trace->layers.resize(params.layers.size());
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    h = layer_forward(h, params.layers[i], cfg, mask,
                      trace != nullptr ? &trace->layers[i] : nullptr);
  }
  Matrix logits = matmul(h, params.w_c);
  Matrix o = softmax_rows(logits);
  if (trace != nullptr) trace->logits = std::move(logits);
  return o;
}

std::uint32_t greedy_decode_step(const Matrix& o) {
  require_dims(o.rows() > 0 && o.cols() > 0, "greedy_decode_step on empty output");
  const auto last = o.row(o.rows() - 1);
  std::uint32_t best = 0;
  for (std::size_t j = 1; j < last.size(); ++j) {
    if (last[j] > last[best]) best = static_cast<std::uint32_t>(j);
  }
  return best;
}

std::vector<std::uint32_t> generate_greedy(const ModelParams& params,
                                           std::span<const std::uint32_t> prompt,
                                           std::size_t max_tokens) {
  const Mask mask = Mask::for_kind(params.config.mask_kind);
  std::vector<std::uint32_t> seq(prompt.begin(), prompt.end());
  std::vector<std::uint32_t> produced;
  for (std::size_t step = 0; step < max_tokens; ++step) {
    const Matrix o = model_forward(embed(seq, params.embedding), params, mask);
    const std::uint32_t tok = greedy_decode_step(o);
    produced.push_back(tok);
    seq.push_back(tok);
  }
  return produced;
}

ModelParams gen_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const bool rms = cfg.norm_kind == NormKind::kRmsNorm;
  ModelParams p;
  p.config = cfg;
  p.embedding.table = gaussian_matrix(cfg.vocab_size, cfg.d_model, 1.0, rng);
  p.layers.reserve(cfg.n_layers);
  for (std::uint32_t i = 0; i < cfg.n_layers; ++i) {
    LayerWeights w;
    w.wq = gaussian_matrix(cfg.d_model, cfg.d_model, stddev, rng);
    w.wk = gaussian_matrix(cfg.d_model, cfg.d_model, stddev, rng);
    w.wv = gaussian_matrix(cfg.d_model, cfg.d_model, stddev, rng);
    w.wo = gaussian_matrix(cfg.d_model, cfg.d_model, stddev, rng);
    w.gamma1 = gaussian_vector(cfg.d_model, 1.0, 0.1, rng);
    w.gamma2 = gaussian_vector(cfg.d_model, 1.0, 0.1, rng);
    if (!rms) {
      w.beta1 = gaussian_vector(cfg.d_model, 0.0, 0.1, rng);
      w.beta2 = gaussian_vector(cfg.d_model, 0.0, 0.1, rng);
    }
    if (cfg.is_moe()) {
      w.w_gate = gaussian_matrix(cfg.d_model, cfg.n_experts, stddev, rng);
      for (std::uint32_t e = 0; e < cfg.n_experts; ++e) w.experts.push_back(random_ffn(cfg, stddev, rng));
    } else {
      w.ffn = random_ffn(cfg, stddev, rng);
    }
    p.layers.push_back(std::move(w));
  }
  p.w_c = gaussian_matrix(cfg.d_model, cfg.vocab_size, stddev, rng);
  return p;
}

}  // namespace stip
