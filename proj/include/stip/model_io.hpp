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
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stip/bytes.hpp"
#include "stip/model.hpp"

namespace stip {

// Binary model container:
//   "STIP" | version u16 | config | tensor count u32 | tensors...
// where each tensor is (name length u16, name, rank u8, dims u32..., f32 payload).
inline constexpr std::uint16_t kModelFormatVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

void write_tensor(ByteWriter& out, std::string_view name, const Matrix& m);
void write_tensor(ByteWriter& out, std::string_view name, const Vector& v);
TensorRecord read_tensor(ByteReader& in);
Matrix tensor_to_matrix(const TensorRecord& t);

void write_config(ByteWriter& out, const ModelConfig& cfg);
ModelConfig read_config(ByteReader& in);

/// The server-side copy omits the embedding table.
Bytes encode_model(const ModelParams& params, bool include_embedding = true);
ModelParams decode_model(std::span<const std::uint8_t> bytes);

void save_model(const std::string& path, const ModelParams& params, bool include_embedding = true);
ModelParams load_model(const std::string& path);

/// JSON mirror of the binary container with the same field names.
std::string model_to_json(const ModelParams& params);
ModelParams model_from_json(std::string_view text);

/// -inf mask entries become the most negative finite float and back.
Matrix mask_to_finite(const Matrix& mask);
Matrix mask_from_finite(const Matrix& mask);

}  // namespace stip
