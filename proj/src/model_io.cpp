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

#include "stip/model_io.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>

#include "json.hpp"

namespace stip {

namespace {

constexpr std::string_view kMagic = "STIP";

[[noreturn]] void parse_fail(const std::string& what) { throw Error(ErrorCode::kParse, what); }

struct NamedTensor {
  std::string name;
  const Matrix* matrix = nullptr;
  const Vector* vector = nullptr;
};

void collect_ffn(std::vector<NamedTensor>& out, const std::string& prefix, const FfnWeights& f) {
  out.push_back({prefix + ".w1", &f.w1, nullptr});
  out.push_back({prefix + ".w2", &f.w2, nullptr});
  if (f.w3) out.push_back({prefix + ".w3", &*f.w3, nullptr});
}

std::vector<NamedTensor> collect(const ModelParams& p, bool include_embedding) {
  std::vector<NamedTensor> out;
  if (include_embedding && !p.embedding.table.empty()) {
    out.push_back({"embedding", &p.embedding.table, nullptr});
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const LayerWeights& w = p.layers[i];
    const std::string pre = "layers." + std::to_string(i);
    out.push_back({pre + ".wq", &w.wq, nullptr});
    out.push_back({pre + ".wk", &w.wk, nullptr});
    out.push_back({pre + ".wv", &w.wv, nullptr});
    out.push_back({pre + ".wo", &w.wo, nullptr});
    out.push_back({pre + ".gamma1", nullptr, &w.gamma1});
    if (!w.beta1.empty()) out.push_back({pre + ".beta1", nullptr, &w.beta1});
    out.push_back({pre + ".gamma2", nullptr, &w.gamma2});
    if (!w.beta2.empty()) out.push_back({pre + ".beta2", nullptr, &w.beta2});
    if (w.w_gate) out.push_back({pre + ".w_gate", &*w.w_gate, nullptr});
    if (w.experts.empty()) {
      collect_ffn(out, pre + ".ffn", w.ffn);
    } else {
      for (std::size_t e = 0; e < w.experts.size(); ++e) {
        collect_ffn(out, pre + ".experts." + std::to_string(e), w.experts[e]);
      }
    }
  }
  out.push_back({"classifier", &p.w_c, nullptr});
  return out;
}

void check_finite(const TensorRecord& t) {
  for (float v : t.data) {
    if (!std::isfinite(v)) parse_fail("tensor '" + t.name + "' holds a non-finite value");
  }
}

Vector tensor_to_vector(const TensorRecord& t) {
  if (t.dims.size() != 1) parse_fail("tensor '" + t.name + "' must be rank 1");
  return Vector(t.data);
}

// Rebuild the parameter structure from named tensors. Consumes the map.
ModelParams assemble(const ModelConfig& cfg, std::map<std::string, TensorRecord> tensors) {
  auto take = [&](const std::string& name) -> TensorRecord {
    auto it = tensors.find(name);
    if (it == tensors.end()) parse_fail("missing tensor '" + name + "'");
    TensorRecord t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  auto take_opt = [&](const std::string& name) -> std::optional<TensorRecord> {
    if (!tensors.contains(name)) return std::nullopt;
    return take(name);
  };
  auto take_ffn = [&](const std::string& prefix) {
    FfnWeights f;
    f.w1 = tensor_to_matrix(take(prefix + ".w1"));
    f.w2 = tensor_to_matrix(take(prefix + ".w2"));
    if (auto w3 = take_opt(prefix + ".w3")) f.w3 = tensor_to_matrix(*w3);
    return f;
  };

  ModelParams p;
  p.config = cfg;
  if (auto emb = take_opt("embedding")) p.embedding.table = tensor_to_matrix(*emb);
  for (std::uint32_t i = 0; i < cfg.n_layers; ++i) {
    const std::string pre = "layers." + std::to_string(i);
    LayerWeights w;
    w.wq = tensor_to_matrix(take(pre + ".wq"));
    w.wk = tensor_to_matrix(take(pre + ".wk"));
    w.wv = tensor_to_matrix(take(pre + ".wv"));
    w.wo = tensor_to_matrix(take(pre + ".wo"));
    w.gamma1 = tensor_to_vector(take(pre + ".gamma1"));
    w.gamma2 = tensor_to_vector(take(pre + ".gamma2"));
    if (auto b = take_opt(pre + ".beta1")) w.beta1 = tensor_to_vector(*b);
    if (auto b = take_opt(pre + ".beta2")) w.beta2 = tensor_to_vector(*b);
    if (auto g = take_opt(pre + ".w_gate")) w.w_gate = tensor_to_matrix(*g);
    if (cfg.is_moe()) {
      for (std::uint32_t e = 0; e < cfg.n_experts; ++e) {
        w.experts.push_back(take_ffn(pre + ".experts." + std::to_string(e)));
      }
    } else {
      w.ffn = take_ffn(pre + ".ffn");
    }
    p.layers.push_back(std::move(w));
  }
  p.w_c = tensor_to_matrix(take("classifier"));
  if (!tensors.empty()) parse_fail("unexpected tensor '" + tensors.begin()->first + "'");
  try {
    p.validate(/*require_embedding=*/false);
  } catch (const Error& e) {
    parse_fail(std::string("inconsistent model container: ") + e.what());
  }
  return p;
}

}  // namespace

void write_tensor(ByteWriter& out, std::string_view name, const Matrix& m) {
  out.u16(static_cast<std::uint16_t>(name.size()));
  out.str(name);
  out.u8(2);
  out.u32(static_cast<std::uint32_t>(m.rows()));
  out.u32(static_cast<std::uint32_t>(m.cols()));
  out.f32s(m.data());
}

void write_tensor(ByteWriter& out, std::string_view name, const Vector& v) {
  out.u16(static_cast<std::uint16_t>(name.size()));
  out.str(name);
  out.u8(1);
  out.u32(static_cast<std::uint32_t>(v.dim()));
  out.f32s(v.data());
}

TensorRecord read_tensor(ByteReader& in) {
  TensorRecord t;
  t.name = in.str(in.u16());
  const std::uint8_t rank = in.u8();
  if (rank < 1 || rank > 2) parse_fail("tensor '" + t.name + "' has unsupported rank " + std::to_string(rank));
  std::size_t count = 1;
  for (std::uint8_t r = 0; r < rank; ++r) {
    t.dims.push_back(in.u32());
    count *= t.dims.back();
  }
  if (count * 4 > in.remaining()) parse_fail("tensor '" + t.name + "' payload truncated");
  t.data = in.f32s(count);
  return t;
}

Matrix tensor_to_matrix(const TensorRecord& t) {
  if (t.dims.size() != 2) parse_fail("tensor '" + t.name + "' must be rank 2");
  return Matrix(t.dims[0], t.dims[1], t.data);
}

void write_config(ByteWriter& out, const ModelConfig& cfg) {
  out.u32(cfg.n_layers);
  out.u32(cfg.d_model);
  out.u32(cfg.d_ff);
  out.u32(cfg.vocab_size);
  out.u32(cfg.n_experts);
  out.u32(cfg.top_k);
  out.f32(cfg.attn_scale);
  out.f32(cfg.norm_eps);
  out.u8(static_cast<std::uint8_t>(cfg.norm_kind));
  out.u8(static_cast<std::uint8_t>(cfg.norm_placement));
  out.u8(static_cast<std::uint8_t>(cfg.ffn_kind));
  out.u8(static_cast<std::uint8_t>(cfg.mask_kind));
}

ModelConfig read_config(ByteReader& in) {
  ModelConfig cfg;
  cfg.n_layers = in.u32();
  cfg.d_model = in.u32();
  cfg.d_ff = in.u32();
  cfg.vocab_size = in.u32();
  cfg.n_experts = in.u32();
  cfg.top_k = in.u32();
  cfg.attn_scale = in.f32();
  cfg.norm_eps = in.f32();
  const std::uint8_t norm = in.u8();
  const std::uint8_t place = in.u8();
  const std::uint8_t ffn_kind = in.u8();
  const std::uint8_t mask = in.u8();
  if (norm > 1 || place > 1 || ffn_kind > 2 || mask > 2) parse_fail("config enum out of range");
  cfg.norm_kind = static_cast<NormKind>(norm);
  cfg.norm_placement = static_cast<NormPlacement>(place);
  cfg.ffn_kind = static_cast<FfnKind>(ffn_kind);
  cfg.mask_kind = static_cast<MaskKind>(mask);
  try {
    cfg.validate();
  } catch (const Error& e) {
    parse_fail(std::string("invalid config: ") + e.what());
  }
  return cfg;
}

Bytes encode_model(const ModelParams& params, bool include_embedding) {
  const auto tensors = collect(params, include_embedding);
  ByteWriter out;
  out.str(kMagic);
  out.u16(kModelFormatVersion);
  write_config(out, params.config);
  out.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.matrix != nullptr) {
      write_tensor(out, t.name, *t.matrix);
    } else {
      write_tensor(out, t.name, *t.vector);
    }
  }
  return out.take();
}

ModelParams decode_model(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (in.str(4) != kMagic) parse_fail("bad model magic");
  const std::uint16_t version = in.u16();
  if (version != kModelFormatVersion) parse_fail("unsupported model version " + std::to_string(version));
  const ModelConfig cfg = read_config(in);
  const std::uint32_t count = in.u32();
  std::map<std::string, TensorRecord> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t = read_tensor(in);
    check_finite(t);
    std::string name = t.name;
    if (!tensors.emplace(std::move(name), std::move(t)).second) parse_fail("duplicate tensor");
  }
  if (!in.done()) parse_fail("trailing bytes after model container");
  return assemble(cfg, std::move(tensors));
}

void save_model(const std::string& path, const ModelParams& params, bool include_embedding) {
  write_file(path, encode_model(params, include_embedding));
}

ModelParams load_model(const std::string& path) { return decode_model(read_file(path)); }

std::string model_to_json(const ModelParams& params) {
  using nlohmann::json;
  const ModelConfig& c = params.config;
  json cfg = {
      {"n_layers", c.n_layers},     {"d_model", c.d_model},
      {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
      {"n_experts", c.n_experts},   {"top_k", c.top_k},
      {"attn_scale", c.attn_scale}, {"norm_eps", c.norm_eps},
      {"norm_kind", to_string(c.norm_kind)},
      {"norm_placement", to_string(c.norm_placement)},
      {"ffn_kind", to_string(c.ffn_kind)},
      {"mask_kind", to_string(c.mask_kind)},
  };
  json tensors = json::array();
  for (const auto& t : collect(params, true)) {
    json dims = json::array();
    std::span<const float> data;
    if (t.matrix != nullptr) {
      dims = {t.matrix->rows(), t.matrix->cols()};
      data = t.matrix->data();
    } else {
      dims = {t.vector->dim()};
      data = t.vector->data();
    }
    tensors.push_back({{"name", t.name}, {"dims", dims}, {"data", std::vector<float>(data.begin(), data.end())}});
  }
  json doc = {{"magic", kMagic}, {"version", kModelFormatVersion}, {"config", cfg}, {"tensors", tensors}};
  return doc.dump();
}

ModelParams model_from_json(std::string_view text) {
  using nlohmann::json;
  try {
    const json doc = json::parse(text);
    if (doc.at("magic").get<std::string>() != kMagic) parse_fail("bad model magic");
    if (doc.at("version").get<std::uint16_t>() != kModelFormatVersion) parse_fail("unsupported version");
    const json& c = doc.at("config");
    ModelConfig cfg;
    cfg.n_layers = c.at("n_layers").get<std::uint32_t>();
    cfg.d_model = c.at("d_model").get<std::uint32_t>();
    cfg.d_ff = c.at("d_ff").get<std::uint32_t>();
    cfg.vocab_size = c.at("vocab_size").get<std::uint32_t>();
    cfg.n_experts = c.at("n_experts").get<std::uint32_t>();
    cfg.top_k = c.at("top_k").get<std::uint32_t>();
    cfg.attn_scale = c.at("attn_scale").get<float>();
    cfg.norm_eps = c.at("norm_eps").get<float>();
    cfg.norm_kind = parse_norm_kind(c.at("norm_kind").get<std::string>());
    cfg.norm_placement = parse_norm_placement(c.at("norm_placement").get<std::string>());
    cfg.ffn_kind = parse_ffn_kind(c.at("ffn_kind").get<std::string>());
    cfg.mask_kind = parse_mask_kind(c.at("mask_kind").get<std::string>());
    cfg.validate();
    std::map<std::string, TensorRecord> tensors;
    for (const json& t : doc.at("tensors")) {
      TensorRecord rec;
      rec.name = t.at("name").get<std::string>();
      rec.dims = t.at("dims").get<std::vector<std::uint32_t>>();
      rec.data = t.at("data").get<std::vector<float>>();
      std::size_t count = 1;
      for (auto d : rec.dims) count *= d;
      if (rec.dims.empty() || rec.dims.size() > 2 || count != rec.data.size()) {
        parse_fail("tensor '" + rec.name + "' dims do not match data");
      }
      check_finite(rec);
      std::string name = rec.name;
      tensors.emplace(std::move(name), std::move(rec));
    }
    return assemble(cfg, std::move(tensors));
  } catch (const json::exception& e) {
    parse_fail(std::string("model json: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kParse) throw;
    parse_fail(e.what());
  }
}

Matrix mask_to_finite(const Matrix& mask) {
  Matrix out = mask;
  for (float& v : out.data()) {
    if (std::isinf(v) && v < 0) v = std::numeric_limits<float>::lowest();
  }
  return out;
}

Matrix mask_from_finite(const Matrix& mask) {
  Matrix out = mask;
  for (float& v : out.data()) {
    if (v == std::numeric_limits<float>::lowest()) v = -std::numeric_limits<float>::infinity();
  }
  return out;
}

Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path + "' for reading");
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

void write_file(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error(ErrorCode::kIo, "write to '" + path + "' failed");
}

}  // namespace stip
