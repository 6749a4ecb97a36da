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
#include <stdexcept>
#include <string>
#include <string_view>

namespace stip {

enum class ErrorCode : std::uint16_t {
  kInvalidDimension = 1,
  kDegenerateRow = 2,
  kUnknownToken = 3,
  kMissingWeight = 4,
  kInvalidConfig = 5,
  kInsufficientSamples = 6,
  kKeyspaceTooLarge = 7,
  kNotInitialized = 8,
  kStaleEpoch = 9,
  kProtocol = 10,
  kAbortedGeneration = 11,
  kIo = 12,
  kParse = 13,
};

std::string_view error_code_name(ErrorCode code);

// All library failures are reported through this exception; the code is
// stable and travels over the wire in Error frames.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidDimension: return "invalid-dimension";
    case ErrorCode::kDegenerateRow: return "degenerate-row";
    case ErrorCode::kUnknownToken: return "unknown-token";
    case ErrorCode::kMissingWeight: return "missing-weight";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kInsufficientSamples: return "insufficient-samples";
    case ErrorCode::kKeyspaceTooLarge: return "keyspace-too-large";
    case ErrorCode::kNotInitialized: return "not-initialized";
    case ErrorCode::kStaleEpoch: return "stale-epoch";
    case ErrorCode::kProtocol: return "protocol-error";
    case ErrorCode::kAbortedGeneration: return "aborted-generation";
    case ErrorCode::kIo: return "io-error";
    case ErrorCode::kParse: return "parse-error";
  }
  return "unknown-error";
}

}  // namespace stip
