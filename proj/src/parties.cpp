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

#include "stip/parties.hpp"

#include <exception>
#include <thread>

#include "stip/model_io.hpp"

namespace stip {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

[[noreturn]] void protocol_error(const std::string& what) { throw Error(ErrorCode::kProtocol, what); }

Bytes encode_deploy_model_payload(const ModelParams& params) { return encode_model(params, false); }

}  // namespace

std::string_view to_string(PartyRole r) {
  switch (r) {
    case PartyRole::kDeveloper: return "developer";
    case PartyRole::kServer: return "server";
    case PartyRole::kDataOwner: return "data-owner";
  }
  return "unknown";
}

std::string_view to_string(TransportKind k) { return k == TransportKind::kInProc ? "inproc" : "socket"; }

TransportKind parse_transport_kind(std::string_view s) {
  if (s == "inproc") return TransportKind::kInProc;
  if (s == "socket") return TransportKind::kSocket;
  throw Error(ErrorCode::kInvalidConfig, "unknown transport: " + std::string(s));
}

Developer::Developer(ModelParams params, std::uint64_t session_id)
    : params_(std::move(params)), session_id_(session_id) {
  params_.validate(true);
}

Deployment Developer::initialize(std::uint64_t seed, bool force_identity) {
  const std::uint64_t epoch = epoch_ + 1;
  return deploy(force_identity ? PermutationSet::identity(params_.config, epoch)
                               : gen_permutation_set(params_.config, seed, epoch));
}

Deployment Developer::rekey(std::uint64_t seed) {
  if (!keys_) throw Error(ErrorCode::kNotInitialized, "rekey before initialize");
  return deploy(gen_permutation_set(params_.config, seed, epoch_ + 1));
}

Deployment Developer::deploy(PermutationSet set) {
  const TransformedModel t = para_trans(params_, set);
  epoch_ = set.epoch;
  Deployment d{
      {MsgType::kDeployModel, epoch_, session_id_, encode_deploy_model_payload(t.params)},
      {MsgType::kDeployKeys, epoch_, session_id_,
       encode_deploy_keys_payload(set.shared_part(), params_.embedding)},
  };
  keys_ = std::move(set);
  return d;
}

WireMessage Developer::rekey_notice() const {
  return {MsgType::kReKey, epoch_, session_id_, encode_rekey_payload(epoch_ + 1)};
}

void Developer::accept(const WireMessage& msg) {
  switch (msg.type) {
    case MsgType::kError: raise_error_message(msg);
    default: protocol_error("developer does not accept " + std::string(to_string(msg.type)));
  }
}

const PermutationSet& Developer::keys() const {
  if (!keys_) throw Error(ErrorCode::kNotInitialized, "developer has no keys yet");
  return *keys_;
}

PartyKnowledge Developer::knowledge() const {
  PartyKnowledge k{PartyRole::kDeveloper};
  k.original_weights = true;
  k.embedding_table = true;
  k.shared_keys = keys_.has_value();
  k.private_keys = keys_.has_value();
  k.permutations_held = keys_ ? keys_->count() : 0;
  return k;
}

Bytes Developer::serialize_state() const {
  ByteWriter w;
  w.u64(epoch_);
  const Bytes model = encode_model(params_);
  w.u64(model.size());
  w.raw(model);
  if (keys_) w.raw(encode_keys(*keys_));
  return w.take();
}

std::optional<WireMessage> Server::handle(const WireMessage& msg) {
  try {
    switch (msg.type) {
      case MsgType::kDeployModel: {
        ModelParams params = decode_model(msg.payload);
        std::unique_lock lock(mu_);
        if (msg.epoch < epoch_) {
          throw Error(ErrorCode::kStaleEpoch, "deployment for epoch " + std::to_string(msg.epoch) +
                                                  " after epoch " + std::to_string(epoch_));
        }
        model_ = TransformedModel{std::move(params), msg.epoch};
        epoch_ = msg.epoch;
        return std::nullopt;
      }
      case MsgType::kReKey: {
        const std::uint64_t next = decode_rekey_payload(msg.payload);
        std::unique_lock lock(mu_);
        if (next > epoch_) {
          model_.reset();
          epoch_ = next;
        }
        return std::nullopt;
      }
      case MsgType::kInferRequest: return serve(msg);
      case MsgType::kError: return std::nullopt;
      default: protocol_error("server does not accept " + std::string(to_string(msg.type)));
    }
  } catch (const Error& e) {
    return make_error_message(msg.epoch, msg.session_id, e.code(), e.what());
  }
}

WireMessage Server::serve(const WireMessage& request) const {
  if (request.type != MsgType::kInferRequest) protocol_error("expected InferRequest");
  std::shared_lock lock(mu_);
  if (request.epoch != epoch_) {
    throw Error(ErrorCode::kStaleEpoch, "request epoch " + std::to_string(request.epoch) +
                                            ", serving epoch " + std::to_string(epoch_));
  }
  if (!model_) throw Error(ErrorCode::kNotInitialized, "no model deployed for epoch " + std::to_string(epoch_));
  const Matrix x = decode_matrix_payload(request.payload);
  const ModelParams& p = model_->params;
  if (x.cols() != p.config.d_model || x.rows() == 0) {
    protocol_error("request dims (" + std::to_string(x.rows()) + ", " + std::to_string(x.cols()) +
                   ") do not fit d=" + std::to_string(p.config.d_model));
  }
  const auto start = Clock::now();
  const Matrix o = model_forward(x, p, Mask::for_kind(p.config.mask_kind));
  const double elapsed = seconds_since(start);
  {
    std::lock_guard s(stats_mu_);
    compute_seconds_ += elapsed;
    ++served_;
  }
  return {MsgType::kInferResponse, request.epoch, request.session_id, encode_matrix_payload(o)};
}

void Server::run(Channel& ch) {
  for (;;) {
    WireMessage msg;
    try {
      msg = ch.receive();
    } catch (const ChannelClosed&) {
      return;
    }
    if (auto reply = handle(msg)) ch.send(*reply);
  }
}

std::uint64_t Server::epoch() const {
  std::shared_lock lock(mu_);
  return epoch_;
}

PartyKnowledge Server::knowledge() const {
  std::shared_lock lock(mu_);
  PartyKnowledge k{PartyRole::kServer};
  k.transformed_model = model_.has_value();
  k.saw_inference_traffic = requests_served() > 0;
  return k;
}

Bytes Server::serialize_state() const {
  std::shared_lock lock(mu_);
  ByteWriter w;
  w.u64(epoch_);
  if (model_) w.raw(encode_model(model_->params, false));
  return w.take();
}

double Server::compute_seconds() const {
  std::lock_guard s(stats_mu_);
  return compute_seconds_;
}

std::uint64_t Server::requests_served() const {
  std::lock_guard s(stats_mu_);
  return served_;
}

void DataOwner::install(const WireMessage& deploy_keys) {
  if (deploy_keys.type != MsgType::kDeployKeys) protocol_error("expected DeployKeys");
  DeployKeysPayload p = decode_deploy_keys_payload(deploy_keys.payload);
  if (p.keys.epoch != deploy_keys.epoch) protocol_error("key file epoch disagrees with frame epoch");
  if (p.table.table.cols() != p.keys.pi.dim() || p.table.table.rows() != p.keys.pi_c.dim()) {
    protocol_error("embedding table does not match key dims");
  }
  if (deploy_keys.epoch < epoch_) throw Error(ErrorCode::kStaleEpoch, "keys for an older epoch");
  keys_ = std::move(p.keys);
  table_ = std::move(p.table);
  epoch_ = deploy_keys.epoch;
}

void DataOwner::accept(const WireMessage& msg) {
  switch (msg.type) {
    case MsgType::kDeployKeys: install(msg); return;
    case MsgType::kReKey: {
      const std::uint64_t next = decode_rekey_payload(msg.payload);
      if (next > epoch_) {
        keys_.reset();
        epoch_ = next;
      }
      return;
    }
    case MsgType::kError: raise_error_message(msg);
    default: protocol_error("data owner does not accept " + std::string(to_string(msg.type)));
  }
}

WireMessage DataOwner::make_request(std::span<const std::uint32_t> token_ids) const {
  if (!keys_ || !table_) throw Error(ErrorCode::kNotInitialized, "data owner has no keys");
  const Matrix x = embed(token_ids, *table_);
  return {MsgType::kInferRequest, epoch_, session_id_, encode_matrix_payload(protect_input(x, keys_->pi))};
}

Matrix DataOwner::recover(const WireMessage& response) const {
  if (response.type == MsgType::kError) raise_error_message(response);
  if (response.type != MsgType::kInferResponse) protocol_error("expected InferResponse");
  if (!keys_) throw Error(ErrorCode::kNotInitialized, "data owner has no keys");
  if (response.epoch != epoch_) {
    throw Error(ErrorCode::kStaleEpoch, "response epoch " + std::to_string(response.epoch) +
                                            ", holding epoch " + std::to_string(epoch_));
  }
  const Matrix o = decode_matrix_payload(response.payload);
  if (o.cols() != keys_->pi_c.dim()) protocol_error("response width does not match vocabulary");
  return recover_output(o, keys_->pi_c);
}

GenerationResult DataOwner::generate(std::span<const std::uint32_t> prompt, std::size_t max_tokens,
                                     Channel& server) {
  GenerationResult out;
  std::vector<std::uint32_t> seq(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < max_tokens; ++step) {
    try {
      const auto round_start = Clock::now();
      auto t = Clock::now();
      const WireMessage req = make_request(seq);
      double device = seconds_since(t);
      server.send(req);
      const WireMessage resp = server.receive();
      ++out.rounds;
      saw_inference_ = true;
      t = Clock::now();
      const std::uint32_t tok = greedy_decode_step(recover(resp));
      device += seconds_since(t);
      out.tokens.push_back(tok);
      seq.push_back(tok);
      out.device_seconds += device;
      out.round_seconds.push_back(seconds_since(round_start));
    } catch (const Error& e) {
      throw GenerationAborted("generation stopped after " + std::to_string(out.tokens.size()) +
                                  " tokens: " + e.what(),
                              out.tokens, e.code());
    }
  }
  return out;
}

PartyKnowledge DataOwner::knowledge() const {
  PartyKnowledge k{PartyRole::kDataOwner};
  k.shared_keys = keys_.has_value();
  k.embedding_table = table_.has_value();
  k.saw_inference_traffic = saw_inference_;
  k.permutations_held = keys_ ? 2 : 0;
  return k;
}

Bytes DataOwner::serialize_state() const {
  ByteWriter w;
  w.u64(epoch_);
  if (keys_ && table_) w.raw(encode_deploy_keys_payload(*keys_, *table_));
  return w.take();
}

namespace {

ChannelPair make_link(const SimulationOptions& o, std::uint16_t port) {
  ChannelPair pair = o.transport == TransportKind::kInProc ? make_inproc_pair() : make_socket_pair(o.host, port);
  if (o.latency.count() > 0) {
    pair.first = std::make_unique<DelayedChannel>(std::move(pair.first), o.latency);
    pair.second = std::make_unique<DelayedChannel>(std::move(pair.second), o.latency);
  }
  return pair;
}

struct PartyFailure {
  std::exception_ptr error;
  PartyRole role;
};

}  // namespace

SimulationResult run_simulation(const ModelParams& params,
                                const std::vector<std::vector<std::uint32_t>>& prompts,
                                std::size_t max_tokens, const SimulationOptions& options) {
  TranscriptLog log(options.transcript);
  std::mt19937_64 session_rng(options.seed ^ 0x5eed5e55u);
  const std::uint64_t session_id = session_rng();

  // first = receiving side, second = sending side
  auto [dev_to_server_rx, dev_to_server_tx] = make_link(options, 0);
  auto [dev_to_owner_rx, dev_to_owner_tx] = make_link(options, 0);
  auto [server_end, owner_end] = make_link(options, options.port);
  ChannelPtr dev_server = std::make_unique<TranscriptChannel>(std::move(dev_to_server_tx), log, "P1->P2");
  ChannelPtr dev_owner = std::make_unique<TranscriptChannel>(std::move(dev_to_owner_tx), log, "P1->P3");
  ChannelPtr server_link = std::make_unique<TranscriptChannel>(std::move(server_end), log, "P2->P3");
  ChannelPtr owner_link = std::make_unique<TranscriptChannel>(std::move(owner_end), log, "P3->P2");

  Server server;
  DataOwner owner(session_id);
  SimulationResult result;
  std::vector<PartyFailure> failures;
  std::mutex failures_mu;
  auto guarded = [&](PartyRole role, auto&& body, std::initializer_list<Channel*> on_fail) {
    return [&, role, body, on_fail = std::vector<Channel*>(on_fail)]() mutable {
      try {
        body();
      } catch (...) {
        {
          std::lock_guard lock(failures_mu);
          failures.push_back({std::current_exception(), role});
        }
        for (Channel* c : on_fail) c->close();
      }
    };
  };

  const auto start = Clock::now();
  std::thread developer(guarded(
      PartyRole::kDeveloper,
      [&] {
        Developer dev(params, session_id);
        Deployment d = dev.initialize(options.seed, options.force_identity);
        result.epoch = dev.epoch();
        dev_server->send(d.to_server);
        dev_owner->send(d.to_data_owner);
      },
      {dev_server.get(), dev_owner.get()}));
  std::thread server_thread(guarded(
      PartyRole::kServer,
      [&] {
        if (auto reply = server.handle(dev_to_server_rx->receive())) raise_error_message(*reply);
        server.run(*server_link);
      },
      {server_link.get()}));
  std::thread owner_thread(guarded(
      PartyRole::kDataOwner,
      [&] {
        owner.accept(dev_to_owner_rx->receive());
        for (const auto& prompt : prompts) {
          GenerationResult g = owner.generate(prompt, max_tokens, *owner_link);
          result.rounds += g.rounds;
          result.device_seconds += g.device_seconds;
          result.round_seconds.insert(result.round_seconds.end(), g.round_seconds.begin(), g.round_seconds.end());
          result.outputs.push_back(std::move(g.tokens));
        }
        result.data_owner_traffic = owner_link->traffic();
        owner_link->close();
      },
      {owner_link.get()}));
  developer.join();
  owner_thread.join();
  server_thread.join();
  result.wall_seconds = seconds_since(start);

  if (!failures.empty()) {
    // The first recorded failure is the root cause; later ones are fallout.
    const PartyFailure& f = failures.front();
    try {
      std::rethrow_exception(f.error);
    } catch (const Error& e) {
      throw Error(e.code(), std::string(to_string(f.role)) + " failed: " + e.what());
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kProtocol, std::string(to_string(f.role)) + " failed: " + e.what());
    }
  }
  result.cloud_seconds = server.compute_seconds();
  double round_total = 0.0;
  for (double s : result.round_seconds) round_total += s;
  result.comm_seconds = std::max(0.0, round_total - result.device_seconds - result.cloud_seconds);
  result.transcript_lines = log.lines();
  return result;
}

}  // namespace stip
