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

#include <chrono>
#include <cstdint>
#include <optional>
#include <random>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "stip/model.hpp"
#include "stip/transform.hpp"
#include "stip/transport.hpp"
#include "stip/wire.hpp"

namespace stip {

enum class PartyRole : std::uint8_t { kDeveloper, kServer, kDataOwner };
std::string_view to_string(PartyRole r);

// What a party currently holds, for asserting the key split.
struct PartyKnowledge {
  PartyRole role;
  bool original_weights = false;
  bool transformed_model = false;
  bool shared_keys = false;
  bool private_keys = false;
  bool embedding_table = false;
  bool saw_inference_traffic = false;
  std::size_t permutations_held = 0;
};

struct Deployment {
  WireMessage to_server;      // DeployModel
  WireMessage to_data_owner;  // DeployKeys
};

// Model developer: owns the original weights and the full permutation set.
class Developer {
 public:
  explicit Developer(ModelParams params, std::uint64_t session_id = 0);

  /// Draws a permutation set, transforms the model and frames both
  /// deployments. `force_identity` deploys the untransformed model.
  Deployment initialize(std::uint64_t seed, bool force_identity = false);
  /// Fresh set at epoch + 1.
  Deployment rekey(std::uint64_t seed);
  /// Tells a party to drop the current epoch ahead of a redeployment.
  WireMessage rekey_notice() const;

  /// The developer never takes part in inference; such frames are refused.
  void accept(const WireMessage& msg);

  std::uint64_t epoch() const noexcept { return epoch_; }
  const PermutationSet& keys() const;
  const ModelParams& params() const noexcept { return params_; }
  PartyKnowledge knowledge() const;
  Bytes serialize_state() const;

 private:
  Deployment deploy(PermutationSet set);

  ModelParams params_;
  std::optional<PermutationSet> keys_;
  std::uint64_t epoch_ = 0;
  std::uint64_t session_id_;
};

// Model server: runs the transformed model and nothing else.
class Server {
 public:
  /// Handles one inbound frame. Returns the reply, if any; failures become
  /// Error frames. Deployments are not acknowledged.
  std::optional<WireMessage> handle(const WireMessage& msg);

  /// Serves one InferRequest; throws kStaleEpoch, kNotInitialized or kProtocol.
  WireMessage serve(const WireMessage& request) const;

  /// Answers requests on `ch` until the peer closes it.
  void run(Channel& ch);

  std::uint64_t epoch() const;
  PartyKnowledge knowledge() const;
  Bytes serialize_state() const;
  /// Seconds spent inside model_forward since construction.
  double compute_seconds() const;
  std::uint64_t requests_served() const;

 private:
  mutable std::shared_mutex mu_;
  std::optional<TransformedModel> model_;
  std::uint64_t epoch_ = 0;
  mutable std::mutex stats_mu_;
  mutable double compute_seconds_ = 0.0;
  mutable std::uint64_t served_ = 0;
};

/// Thrown by DataOwner::generate; carries what was produced before the failure.
class GenerationAborted : public Error {
 public:
  GenerationAborted(const std::string& what, std::vector<std::uint32_t> tokens, ErrorCode cause)
      : Error(ErrorCode::kAbortedGeneration, what), tokens_(std::move(tokens)), cause_(cause) {}
  const std::vector<std::uint32_t>& tokens() const noexcept { return tokens_; }
  ErrorCode cause() const noexcept { return cause_; }

 private:
  std::vector<std::uint32_t> tokens_;
  ErrorCode cause_;
};

struct GenerationResult {
  std::vector<std::uint32_t> tokens;  // generated tokens only, prompt excluded
  std::size_t rounds = 0;
  std::vector<double> round_seconds;
  double device_seconds = 0.0;
};

// Data owner: holds the shared keys and the embedding table, embeds and
// protects inputs, recovers outputs.
class DataOwner {
 public:
  explicit DataOwner(std::uint64_t session_id = 0) : session_id_(session_id) {}

  void install(const WireMessage& deploy_keys);
  /// Handles DeployKeys or ReKey frames.
  void accept(const WireMessage& msg);

  WireMessage make_request(std::span<const std::uint32_t> token_ids) const;
  Matrix recover(const WireMessage& response) const;

  /// Greedy autoregressive generation, one request/response round per token.
  GenerationResult generate(std::span<const std::uint32_t> prompt, std::size_t max_tokens,
                            Channel& server);

  std::uint64_t epoch() const noexcept { return epoch_; }
  std::uint64_t session_id() const noexcept { return session_id_; }
  PartyKnowledge knowledge() const;
  Bytes serialize_state() const;

 private:
  std::optional<SharedKeys> keys_;
  std::optional<EmbeddingTable> table_;
  std::uint64_t epoch_ = 0;
  std::uint64_t session_id_;
  bool saw_inference_ = false;
};

enum class TransportKind { kInProc, kSocket };
std::string_view to_string(TransportKind k);
TransportKind parse_transport_kind(std::string_view s);

struct SimulationOptions {
  TransportKind transport = TransportKind::kInProc;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // server port for the data-owner link, 0 = ephemeral
  std::chrono::microseconds latency{0};
  std::uint64_t seed = 0;
  bool force_identity = false;
  std::ostream* transcript = nullptr;
};

struct SimulationResult {
  std::vector<std::vector<std::uint32_t>> outputs;  // one per prompt
  std::size_t rounds = 0;
  std::size_t transcript_lines = 0;
  std::vector<double> round_seconds;
  double wall_seconds = 0.0;
  double device_seconds = 0.0;
  double cloud_seconds = 0.0;
  double comm_seconds = 0.0;
  TrafficStats data_owner_traffic;
  std::uint64_t epoch = 0;
};

/// Runs developer, server and data owner on separate threads over the chosen
/// transport: deployment, then greedy generation for each prompt. A failure
/// is rethrown with the failing party named.
SimulationResult run_simulation(const ModelParams& params,
                                const std::vector<std::vector<std::uint32_t>>& prompts,
                                std::size_t max_tokens, const SimulationOptions& options);

}  // namespace stip
