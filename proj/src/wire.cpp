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

#include "stip/wire.hpp"

#include <cmath>

#include "stip/model_io.hpp"

namespace stip {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'I', 'P'};

[[noreturn]] void protocol_error(const std::string& what) { throw Error(ErrorCode::kProtocol, what); }

}  // namespace

std::string_view to_string(MsgType t) {
  switch (t) {
    case MsgType::kDeployModel: return "DeployModel";
    case MsgType::kDeployKeys: return "DeployKeys";
    case MsgType::kInferRequest: return "InferRequest";
    case MsgType::kInferResponse: return "InferResponse";
    case MsgType::kReKey: return "ReKey";
    case MsgType::kError: return "Error";
  }
  return "Unknown";
}

bool is_known_msg_type(std::uint8_t raw) { return raw >= 1 && raw <= 6; }

Bytes encode_frame(const WireMessage& msg) {
  ByteWriter w;
  w.str(std::string_view(kMagic, 4));
  w.u16(kWireVersion);
  w.u8(static_cast<std::uint8_t>(msg.type));
  w.u64(msg.epoch);
  w.u64(msg.session_id);
  w.u64(msg.payload.size());
  w.raw(msg.payload);
  return w.take();
}

FrameHeader decode_frame_header(std::span<const std::uint8_t> header) {
  if (header.size() < kFrameHeaderSize) protocol_error("frame shorter than header");
  ByteReader r(header.first(kFrameHeaderSize));
  if (r.str(4) != std::string_view(kMagic, 4)) protocol_error("bad frame magic");
  const std::uint16_t version = r.u16();
  if (version != kWireVersion) protocol_error("unsupported wire version " + std::to_string(version));
  const std::uint8_t raw_type = r.u8();
  if (!is_known_msg_type(raw_type)) protocol_error("unknown msg_type " + std::to_string(raw_type));
  FrameHeader h{static_cast<MsgType>(raw_type), r.u64(), r.u64(), r.u64()};
  if (h.payload_len > kMaxPayloadBytes) protocol_error("payload_len too large");
  return h;
}

WireMessage decode_frame(std::span<const std::uint8_t> frame) {
  const FrameHeader h = decode_frame_header(frame);
  if (frame.size() - kFrameHeaderSize != h.payload_len) {
    protocol_error("payload_len " + std::to_string(h.payload_len) + " but body has " +
                   std::to_string(frame.size() - kFrameHeaderSize) + " bytes");
  }
  auto body = frame.subspan(kFrameHeaderSize);
  return {h.type, h.epoch, h.session_id, Bytes(body.begin(), body.end())};
}

Bytes encode_matrix_payload(const Matrix& m) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  w.f32s(m.data());
  return w.take();
}

Matrix decode_matrix_payload(std::span<const std::uint8_t> payload) {
  try {
    ByteReader r(payload);
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    if (r.remaining() != rows * cols * 4) protocol_error("matrix payload size disagrees with dims");
    return Matrix(rows, cols, r.f32s(rows * cols));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kProtocol) throw;
    protocol_error(std::string("bad matrix payload: ") + e.what());
  }
}

Bytes encode_deploy_keys_payload(const SharedKeys& keys, const EmbeddingTable& table) {
  const Bytes key_bytes = encode_shared_keys(keys);
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(key_bytes.size()));
  w.raw(key_bytes);
  write_tensor(w, "embedding", table.table);
  return w.take();
}

DeployKeysPayload decode_deploy_keys_payload(std::span<const std::uint8_t> payload) {
  try {
    ByteReader r(payload);
    const std::uint32_t key_len = r.u32();
    DeployKeysPayload out{decode_shared_keys(r.raw(key_len)), {}};
    const TensorRecord t = read_tensor(r);
    if (t.name != "embedding") protocol_error("expected embedding tensor, got " + t.name);
    out.table.table = tensor_to_matrix(t);
    if (!r.done()) protocol_error("trailing bytes after embedding tensor");
    return out;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kProtocol) throw;
    protocol_error(std::string("bad DeployKeys payload: ") + e.what());
  }
}

Bytes encode_rekey_payload(std::uint64_t active_epoch) {
  ByteWriter w;
  w.u64(active_epoch);
  return w.take();
}

std::uint64_t decode_rekey_payload(std::span<const std::uint8_t> payload) {
  if (payload.size() != 8) protocol_error("ReKey payload must be 8 bytes");
  ByteReader r(payload);
  return r.u64();
}

Bytes encode_error_payload(ErrorCode code, std::string_view detail) {
  ByteWriter w;
  w.u16(static_cast<std::uint16_t>(code));
  w.str(detail);
  return w.take();
}

ErrorPayload decode_error_payload(std::span<const std::uint8_t> payload) {
  if (payload.size() < 2) protocol_error("Error payload shorter than code");
  ByteReader r(payload);
  const auto code = static_cast<ErrorCode>(r.u16());
  return {code, r.str(r.remaining())};
}

WireMessage make_error_message(std::uint64_t epoch, std::uint64_t session_id, ErrorCode code,
                               std::string_view detail) {
  return {MsgType::kError, epoch, session_id, encode_error_payload(code, detail)};
}

void raise_error_message(const WireMessage& msg) {
  const ErrorPayload e = decode_error_payload(msg.payload);
  throw Error(e.code, "remote: " + e.detail);
}

}  // namespace stip
