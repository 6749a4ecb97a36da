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

#include "stip/bytes.hpp"
#include "stip/error.hpp"
#include "stip/model.hpp"
#include "stip/numerics.hpp"
#include "stip/transform.hpp"

namespace stip {

// Frame: "STIP" | version u16 | msg_type u8 | epoch u64 | session_id u64 |
// payload_len u64 | payload, all little-endian.
inline constexpr std::uint16_t kWireVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 4 + 2 + 1 + 8 + 8 + 8;
inline constexpr std::uint64_t kMaxPayloadBytes = std::uint64_t{1} << 32;

enum class MsgType : std::uint8_t {
  kDeployModel = 1,
  kDeployKeys = 2,
  kInferRequest = 3,
  kInferResponse = 4,
  kReKey = 5,
  kError = 6,
};

std::string_view to_string(MsgType t);
bool is_known_msg_type(std::uint8_t raw);

struct WireMessage {
  MsgType type = MsgType::kError;
  std::uint64_t epoch = 0;
  std::uint64_t session_id = 0;
  Bytes payload;

  bool operator==(const WireMessage&) const = default;
};

struct FrameHeader {
  MsgType type;
  std::uint64_t epoch;
  std::uint64_t session_id;
  std::uint64_t payload_len;
};

Bytes encode_frame(const WireMessage& msg);
/// Throws kProtocol on bad magic, version, type, or a length that disagrees
/// with the body.
WireMessage decode_frame(std::span<const std::uint8_t> frame);
/// Parses just the fixed-size header, for stream readers.
FrameHeader decode_frame_header(std::span<const std::uint8_t> header);

// Payload codecs. Matrices travel as rows u32 | cols u32 | f32 row-major.
Bytes encode_matrix_payload(const Matrix& m);
Matrix decode_matrix_payload(std::span<const std::uint8_t> payload);

/// Shared key file (u32 length prefixed) followed by the embedding tensor.
Bytes encode_deploy_keys_payload(const SharedKeys& keys, const EmbeddingTable& table);
struct DeployKeysPayload {
  SharedKeys keys;
  EmbeddingTable table;
};
DeployKeysPayload decode_deploy_keys_payload(std::span<const std::uint8_t> payload);

/// ReKey carries the epoch that is now active.
Bytes encode_rekey_payload(std::uint64_t active_epoch);
std::uint64_t decode_rekey_payload(std::span<const std::uint8_t> payload);

struct ErrorPayload {
  ErrorCode code;
  std::string detail;
};
Bytes encode_error_payload(ErrorCode code, std::string_view detail);
ErrorPayload decode_error_payload(std::span<const std::uint8_t> payload);

WireMessage make_error_message(std::uint64_t epoch, std::uint64_t session_id, ErrorCode code,
                               std::string_view detail);
/// Rethrows the error carried by an Error frame.
[[noreturn]] void raise_error_message(const WireMessage& msg);

}  // namespace stip
