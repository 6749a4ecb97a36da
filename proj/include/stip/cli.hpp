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
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "stip/model.hpp"
#include "stip/parties.hpp"

namespace stip::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitVerifyFailed = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitProtocol = 4,
};

inline constexpr const char* kEnvPrefix = "STIP_";

// Every tunable shared by the subcommands. Values come from defaults, then a
// key=value file, then STIP_<KEY> environment variables, then flags.
struct RunConfig {
  std::uint32_t layers = 4;
  std::uint32_t d_model = 64;
  std::uint32_t d_ff = 256;
  std::uint32_t vocab = 100;
  std::uint32_t experts = 0;
  std::uint32_t top_k = 2;
  float attn_scale = 0.0F;  // 0 means d_model
  std::string norm_kind = "layernorm";
  std::string norm_placement = "post";
  std::string ffn_kind = "relu";
  std::string mask_kind = "causal";
  std::uint64_t seed = 1;
  std::uint64_t key_seed = 2;
  std::string transport = "inproc";
  std::string host = "127.0.0.1";
  std::uint32_t port = 0;
  double latency_ms = 0.0;
  std::uint32_t trials = 20;
  double tol = 1e-4;
  std::uint32_t tokens = 10;
  std::uint32_t prompts = 1;
  std::uint32_t prompt_len = 4;
  std::uint32_t seq_len = 16;
  std::uint32_t reps = 30;
  std::uint32_t bench_dim = 1024;
  std::uint32_t attack_dim = 6;
  std::uint32_t samples = 16;

  ModelConfig model_config() const;
  /// Sorted key=value lines; the config hash is taken over this text.
  std::string canonical() const;
  std::string hash() const;
};

/// Names accepted in config files, as flags (--name) and as STIP_NAME.
const std::vector<std::string>& run_config_keys();

/// Applies one key; throws kInvalidConfig on unknown keys or bad values.
void set_run_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Parses key=value lines with '#' comments.
std::map<std::string, std::string> parse_config_text(const std::string& text);

RunConfig load_run_config(const std::string& config_path, const std::map<std::string, std::string>& flags);

/// Entry point shared by the executable and the tests. `args` excludes argv[0].
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stip::cli
