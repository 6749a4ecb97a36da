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

#include <algorithm>
#include <random>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "oracles.hpp"
#include "stip/model_io.hpp"
#include "stip/parties.hpp"
#include "stip/transport.hpp"
#include "stip/wire.hpp"

using namespace stip;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode{};
}

WireMessage random_message(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> type(1, 6);
  std::uniform_int_distribution<std::size_t> len(0, 300);
  WireMessage m{static_cast<MsgType>(type(rng)), rng(), rng(), Bytes(len(rng))};
  for (auto& b : m.payload) b = static_cast<std::uint8_t>(rng());
  return m;
}

Bytes perm_bytes(const PermutationVec& p) {
  ByteWriter w;
  for (std::uint32_t v : p.map()) w.u32(v);
  return w.take();
}

bool contains(const Bytes& hay, const Bytes& needle) {
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

// Forwards to an inner channel and fails every send after the first `budget`.
class FlakyChannel : public Channel {
 public:
  FlakyChannel(Channel& inner, std::size_t budget) : inner_(inner), budget_(budget) {}
  void send(const WireMessage& m) override {
    if (budget_ == 0) throw ChannelClosed("link dropped");
    --budget_;
    inner_.send(m);
  }
  WireMessage receive() override { return inner_.receive(); }
  void close() override { inner_.close(); }
  TrafficStats traffic() const override { return inner_.traffic(); }

 private:
  Channel& inner_;
  std::size_t budget_;
};

struct Session {
  Developer dev;
  Server server;
  DataOwner owner;

  Session(const ModelParams& p, std::uint64_t seed, bool identity = false) : dev(p, 77), owner(77) {
    Deployment d = dev.initialize(seed, identity);
    CHECK_FALSE(server.handle(d.to_server).has_value());
    owner.accept(d.to_data_owner);
  }
};

std::vector<std::uint32_t> random_prompt(std::mt19937_64& rng, std::size_t vocab, std::size_t len) {
  std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(vocab - 1));
  std::vector<std::uint32_t> out(len);
  for (auto& t : out) t = tok(rng);
  return out;
}

std::vector<ModelConfig> variants() {
  return {oracle::tiny_config(FfnKind::kRelu, NormKind::kLayerNorm, NormPlacement::kPost),
          oracle::tiny_config(FfnKind::kGelu, NormKind::kLayerNorm, NormPlacement::kPre),
          oracle::tiny_config(FfnKind::kSwiglu, NormKind::kRmsNorm, NormPlacement::kPre),
          oracle::tiny_config(FfnKind::kRelu, NormKind::kLayerNorm, NormPlacement::kPost, 4)};
}

}  // namespace

TEST_CASE("frame layout") {
  const WireMessage m{MsgType::kInferRequest, 3, 9, Bytes{1, 2, 3}};
  const Bytes f = encode_frame(m);
  REQUIRE(f.size() == kFrameHeaderSize + 3);
  CHECK(kFrameHeaderSize == 31);
  CHECK(std::string(f.begin(), f.begin() + 4) == "STIP");
  CHECK(f[4] == 1);
  CHECK(f[5] == 0);
  CHECK(f[6] == 3);
  CHECK(f[7] == 3);
  CHECK(f[15] == 9);
  CHECK(f[23] == 3);
  CHECK(decode_frame(f) == m);
}

TEST_CASE("frame round trip over random messages") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 300; ++i) {
    const WireMessage m = random_message(rng);
    const Bytes f = encode_frame(m);
    const WireMessage back = decode_frame(f);
    CHECK(back == m);
    CHECK(encode_frame(back) == f);
  }
}

TEST_CASE("malformed frames") {
  const Bytes good = encode_frame({MsgType::kReKey, 1, 2, encode_rekey_payload(2)});
  Bytes bad = good;
  bad[6] = 7;
  CHECK(code_of([&] { decode_frame(bad); }) == ErrorCode::kProtocol);
  bad = good;
  bad[6] = 0;
  CHECK(code_of([&] { decode_frame(bad); }) == ErrorCode::kProtocol);
  bad = good;
  bad[0] = 'X';
  CHECK(code_of([&] { decode_frame(bad); }) == ErrorCode::kProtocol);
  bad = good;
  bad[4] = 2;
  CHECK(code_of([&] { decode_frame(bad); }) == ErrorCode::kProtocol);
  bad = good;
  bad.push_back(0);
  CHECK(code_of([&] { decode_frame(bad); }) == ErrorCode::kProtocol);
  CHECK(code_of([&] { decode_frame(std::span(good).first(good.size() - 1)); }) == ErrorCode::kProtocol);
  CHECK(code_of([&] { decode_frame(std::span(good).first(10)); }) == ErrorCode::kProtocol);
}

TEST_CASE("payload codecs") {
  std::mt19937_64 rng(2);
  const Matrix m = oracle::random_matrix(3, 5, rng);
  CHECK(decode_matrix_payload(encode_matrix_payload(m)) == m);
  CHECK(encode_matrix_payload(m).size() == 8 + 4 * 15);
  Bytes short_payload = encode_matrix_payload(m);
  short_payload.pop_back();
  CHECK(code_of([&] { decode_matrix_payload(short_payload); }) == ErrorCode::kProtocol);

  const ErrorPayload e = decode_error_payload(encode_error_payload(ErrorCode::kStaleEpoch, "old"));
  CHECK(e.code == ErrorCode::kStaleEpoch);
  CHECK(e.detail == "old");
  CHECK(decode_rekey_payload(encode_rekey_payload(42)) == 42);
}

TEST_CASE("developer initialization") {
  const ModelConfig cfg = oracle::tiny_config();
  const ModelParams p = gen_model(cfg, 3);

  SUBCASE("identity hook deploys the original weights") {
    Developer dev(p);
    const Deployment d = dev.initialize(0, true);
    CHECK(d.to_server.payload == encode_model(p, false));
  }
  SUBCASE("matching epochs and exactly the shared pair") {
    Developer dev(p);
    const Deployment d = dev.initialize(5);
    CHECK(d.to_server.epoch == d.to_data_owner.epoch);
    CHECK(d.to_server.type == MsgType::kDeployModel);
    CHECK(d.to_data_owner.type == MsgType::kDeployKeys);
    ByteReader r(d.to_data_owner.payload);
    const auto records = inspect_keys(r.raw(r.u32()));
    REQUIRE(records.size() == 2);
    CHECK(records[0].dim == cfg.d_model);
    CHECK(records[1].dim == cfg.vocab_size);
    const DeployKeysPayload dk = decode_deploy_keys_payload(d.to_data_owner.payload);
    CHECK(dk.table.table == p.embedding.table);
    CHECK(dk.keys == dev.keys().shared_part());
  }
  SUBCASE("developer refuses inference traffic") {
    Developer dev(p);
    dev.initialize(1);
    CHECK(code_of([&] { dev.accept({MsgType::kInferRequest, 1, 0, {}}); }) == ErrorCode::kProtocol);
    CHECK(code_of([&] { dev.accept({MsgType::kInferResponse, 1, 0, {}}); }) == ErrorCode::kProtocol);
  }
}

TEST_CASE("data owner request") {
  const ModelConfig cfg = oracle::tiny_config();
  const ModelParams p = gen_model(cfg, 4);
  const std::vector<std::uint32_t> tokens{3, 1, 4, 1, 5};

  DataOwner fresh;
  CHECK(code_of([&] { fresh.make_request(tokens); }) == ErrorCode::kNotInitialized);

  Session id(p, 0, true);
  const WireMessage raw = id.owner.make_request(tokens);
  CHECK(raw.payload == encode_matrix_payload(embed(tokens, p.embedding)));

  Session s(p, 6);
  const Matrix x = decode_matrix_payload(s.owner.make_request(tokens).payload);
  CHECK(x.rows() == tokens.size());
  CHECK(x.cols() == cfg.d_model);
  CHECK(x == apply_col_perm(embed(tokens, p.embedding), s.dev.keys().pi));
}

TEST_CASE("serve and recover") {
  std::mt19937_64 rng(7);
  for (const ModelConfig& cfg : variants()) {
    const ModelParams p = gen_model(cfg, rng());
    Session s(p, rng());
    const auto tokens = random_prompt(rng, cfg.vocab_size, 9);
    const WireMessage req = s.owner.make_request(tokens);
    const WireMessage resp = s.server.serve(req);
    const Matrix o_prime = decode_matrix_payload(resp.payload);
    CHECK(o_prime.rows() == tokens.size());
    CHECK(o_prime.cols() == cfg.vocab_size);
    CHECK(s.server.serve(req) == resp);

    const Matrix o = s.owner.recover(resp);
    const Matrix local = model_forward(embed(tokens, p.embedding), p, Mask::for_kind(cfg.mask_kind));
    CHECK(max_abs_diff(o, local) <= 1e-4);
    for (std::size_t i = 0; i < o.rows(); ++i) {
      double sum = 0.0;
      for (float v : o.row(i)) sum += v;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-4));
    }
  }

  const ModelParams p = gen_model(oracle::tiny_config(), 8);
  Session id(p, 0, true);
  const WireMessage resp = id.server.serve(id.owner.make_request(std::vector<std::uint32_t>{1, 2}));
  CHECK(id.owner.recover(resp) == decode_matrix_payload(resp.payload));
}

TEST_CASE("server rejects bad requests as Error frames") {
  const ModelParams p = gen_model(oracle::tiny_config(), 9);
  Server empty;
  const auto reply = empty.handle({MsgType::kInferRequest, 0, 1, encode_matrix_payload(Matrix(1, 8))});
  REQUIRE(reply);
  CHECK(reply->type == MsgType::kError);
  CHECK(decode_error_payload(reply->payload).code == ErrorCode::kNotInitialized);

  Session s(p, 10);
  const auto wrong_width = s.server.handle({MsgType::kInferRequest, 1, 1, encode_matrix_payload(Matrix(2, 5))});
  CHECK(decode_error_payload(wrong_width->payload).code == ErrorCode::kProtocol);
  const auto garbage = s.server.handle({MsgType::kInferRequest, 1, 1, Bytes{1, 2, 3}});
  CHECK(decode_error_payload(garbage->payload).code == ErrorCode::kProtocol);
  const auto wrong_type = s.server.handle({MsgType::kInferResponse, 1, 1, {}});
  CHECK(decode_error_payload(wrong_type->payload).code == ErrorCode::kProtocol);
  CHECK(code_of([&] { s.owner.recover(*wrong_type); }) == ErrorCode::kProtocol);
}

TEST_CASE("rekey") {
  std::mt19937_64 rng(11);
  const ModelConfig cfg = oracle::tiny_config();
  const ModelParams p = gen_model(cfg, 12);
  Session s(p, 13);
  const auto tokens = random_prompt(rng, cfg.vocab_size, 8);
  const WireMessage old_req = s.owner.make_request(tokens);
  const DataOwner old_owner = s.owner;
  const std::uint64_t old_epoch = s.dev.epoch();

  const Deployment d = s.dev.rekey(14);
  CHECK(s.dev.epoch() == old_epoch + 1);
  CHECK(d.to_server.epoch == old_epoch + 1);
  s.server.handle(d.to_server);
  s.owner.accept(d.to_data_owner);

  CHECK(code_of([&] { s.server.serve(old_req); }) == ErrorCode::kStaleEpoch);
  const WireMessage new_req = s.owner.make_request(tokens);
  const WireMessage resp = s.server.serve(new_req);
  const Matrix local = model_forward(embed(tokens, p.embedding), p, Mask::causal());
  CHECK(max_abs_diff(s.owner.recover(resp), local) <= 1e-4);

  CHECK(code_of([&] { old_owner.recover(resp); }) == ErrorCode::kStaleEpoch);
  // Force the old pi_c onto the new response: the order no longer lines up.
  WireMessage relabelled = resp;
  relabelled.epoch = old_epoch;
  const Matrix wrong = old_owner.recover(relabelled);
  std::size_t mismatched = 0;
  for (std::size_t i = 0; i < wrong.rows(); ++i) {
    const auto a = std::max_element(wrong.row(i).begin(), wrong.row(i).end()) - wrong.row(i).begin();
    const auto b = std::max_element(local.row(i).begin(), local.row(i).end()) - local.row(i).begin();
    if (a != b) ++mismatched;
  }
  CHECK(mismatched > 0);

  SUBCASE("notice retires the model until redeployment") {
    Session t(p, 15);
    const WireMessage req = t.owner.make_request(tokens);
    t.server.handle(t.dev.rekey_notice());
    CHECK(code_of([&] { t.server.serve(req); }) == ErrorCode::kStaleEpoch);
    const Deployment nd = t.dev.rekey(16);
    t.server.handle(nd.to_server);
    t.owner.accept(nd.to_data_owner);
    CHECK(t.server.serve(t.owner.make_request(tokens)).type == MsgType::kInferResponse);
  }
}

TEST_CASE("knowledge partition") {
  const ModelConfig cfg = oracle::tiny_config(FfnKind::kSwiglu, NormKind::kRmsNorm, NormPlacement::kPre);
  const ModelParams p = gen_model(cfg, 17);
  Session s(p, 18);
  const PermutationSet& keys = s.dev.keys();

  const PartyKnowledge server = s.server.knowledge();
  CHECK(server.transformed_model);
  CHECK_FALSE(server.original_weights);
  CHECK_FALSE(server.shared_keys);
  CHECK_FALSE(server.private_keys);
  CHECK_FALSE(server.embedding_table);
  CHECK(server.permutations_held == 0);

  const PartyKnowledge owner = s.owner.knowledge();
  CHECK(owner.shared_keys);
  CHECK_FALSE(owner.private_keys);
  CHECK(owner.permutations_held == 2);
  CHECK_FALSE(owner.transformed_model);

  const PartyKnowledge dev = s.dev.knowledge();
  CHECK(dev.private_keys);
  CHECK_FALSE(dev.saw_inference_traffic);
  CHECK(dev.permutations_held == keys.count());

  const Bytes server_state = s.server.serialize_state();
  const Bytes owner_state = s.owner.serialize_state();
  CHECK_FALSE(contains(server_state, perm_bytes(keys.pi)));
  CHECK_FALSE(contains(server_state, perm_bytes(keys.pi_c)));
  for (const auto& l : keys.layers) {
    for (const auto* q : {&l.pi1, &l.pi2, &l.inner[0]}) {
      CHECK_FALSE(contains(server_state, perm_bytes(*q)));
      CHECK_FALSE(contains(owner_state, perm_bytes(*q)));
    }
  }
  CHECK(contains(owner_state, perm_bytes(keys.pi)));
  CHECK(contains(s.dev.serialize_state(), perm_bytes(keys.layers[0].pi1)));
}

TEST_CASE("generation") {
  std::mt19937_64 rng(19);
  for (const ModelConfig& cfg : variants()) {
    const ModelParams p = gen_model(cfg, rng());
    Session s(p, rng());
    auto [server_end, owner_end] = make_inproc_pair();
    std::thread serve([&, ch = server_end.get()] { s.server.run(*ch); });
    const auto prompt = random_prompt(rng, cfg.vocab_size, 4);
    const GenerationResult none = s.owner.generate(prompt, 0, *owner_end);
    CHECK(none.tokens.empty());
    CHECK(none.rounds == 0);
    const GenerationResult g = s.owner.generate(prompt, 6, *owner_end);
    CHECK(g.tokens == generate_greedy(p, prompt, 6));
    CHECK(g.rounds == 6);
    owner_end->close();
    serve.join();
  }
}

TEST_CASE("transport failure aborts generation with partial output") {
  const ModelParams p = gen_model(oracle::tiny_config(), 20);
  Session s(p, 21);
  auto [server_end, owner_end] = make_inproc_pair();
  std::thread serve([&, ch = server_end.get()] { s.server.run(*ch); });
  FlakyChannel flaky(*owner_end, 3);
  const std::vector<std::uint32_t> prompt{1, 2, 3};
  try {
    s.owner.generate(prompt, 8, flaky);
    FAIL("expected abort");
  } catch (const GenerationAborted& e) {
    CHECK(e.code() == ErrorCode::kAbortedGeneration);
    CHECK(e.cause() == ErrorCode::kProtocol);
    CHECK(e.tokens() == generate_greedy(p, prompt, 3));
  }
  owner_end->close();
  serve.join();
}

TEST_CASE("stale epoch mid-generation") {
  const ModelParams p = gen_model(oracle::tiny_config(), 22);
  Session s(p, 23);
  s.server.handle(s.dev.rekey(24).to_server);
  auto [server_end, owner_end] = make_inproc_pair();
  std::thread serve([&, ch = server_end.get()] { s.server.run(*ch); });
  try {
    s.owner.generate(std::vector<std::uint32_t>{1}, 2, *owner_end);
    FAIL("expected abort");
  } catch (const GenerationAborted& e) {
    CHECK(e.cause() == ErrorCode::kStaleEpoch);
    CHECK(e.tokens().empty());
  }
  owner_end->close();
  serve.join();
}

TEST_CASE("socket channel") {
  auto [a, b] = make_socket_pair();
  std::mt19937_64 rng(25);
  for (int i = 0; i < 20; ++i) {
    const WireMessage m = random_message(rng);
    b->send(m);
    CHECK(a->receive() == m);
    a->send(m);
    CHECK(b->receive() == m);
  }
  CHECK(a->traffic().messages_received == 20);
  b->close();
  CHECK_THROWS_AS(a->receive(), ChannelClosed);
}

TEST_CASE("concurrent sessions share one server") {
  const ModelConfig cfg = oracle::tiny_config();
  const ModelParams p = gen_model(cfg, 26);
  Session s(p, 27);
  const std::vector<std::uint32_t> prompt{4, 5};
  const auto expected = generate_greedy(p, prompt, 5);
  std::vector<std::vector<std::uint32_t>> got(3);
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < got.size(); ++i) {
    workers.emplace_back([&, i] {
      auto [server_end, owner_end] = make_inproc_pair();
      std::thread serve([&, ch = server_end.get()] { s.server.run(*ch); });
      DataOwner owner = s.owner;
      got[i] = owner.generate(prompt, 5, *owner_end).tokens;
      owner_end->close();
      serve.join();
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& g : got) CHECK(g == expected);
}

TEST_CASE("simulation") {
  std::mt19937_64 rng(28);
  const ModelConfig cfg = oracle::tiny_config(FfnKind::kGelu, NormKind::kLayerNorm, NormPlacement::kPre);
  const ModelParams p = gen_model(cfg, 29);
  const std::vector<std::vector<std::uint32_t>> prompts{random_prompt(rng, cfg.vocab_size, 3),
                                                        random_prompt(rng, cfg.vocab_size, 5)};
  std::ostringstream transcript;
  SimulationOptions o;
  o.seed = 30;
  o.transcript = &transcript;
  const SimulationResult in = run_simulation(p, prompts, 4, o);
  REQUIRE(in.outputs.size() == 2);
  for (std::size_t i = 0; i < prompts.size(); ++i) CHECK(in.outputs[i] == generate_greedy(p, prompts[i], 4));
  CHECK(in.rounds == 8);
  CHECK(in.transcript_lines == 2 + 2 * 8);
  std::size_t lines = 0;
  std::string line;
  std::istringstream is(transcript.str());
  while (std::getline(is, line)) {
    ++lines;
    CHECK(line.find("\"direction\"") != std::string::npos);
    CHECK(line.find("\"msg_type\"") != std::string::npos);
  }
  CHECK(lines == in.transcript_lines);
  CHECK(transcript.str().find("\"dims\":[3,8]") != std::string::npos);

  SimulationOptions so = o;
  so.transcript = nullptr;
  so.transport = TransportKind::kSocket;
  const SimulationResult sock = run_simulation(p, prompts, 4, so);
  CHECK(sock.outputs == in.outputs);
  CHECK(sock.transcript_lines == in.transcript_lines);

  SimulationOptions slow = so;
  slow.transport = TransportKind::kInProc;
  slow.latency = std::chrono::milliseconds(10);
  const SimulationResult delayed = run_simulation(p, {prompts[0]}, 3, slow);
  REQUIRE(delayed.round_seconds.size() == 3);
  for (double t : delayed.round_seconds) CHECK(t >= 0.020);
}

TEST_CASE("simulation failures name the party") {
  ModelConfig cfg = oracle::tiny_config();
  const ModelParams p = gen_model(cfg, 31);
  try {
    run_simulation(p, {{static_cast<std::uint32_t>(cfg.vocab_size)}}, 2, {});
    FAIL("expected failure");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("data-owner") != std::string::npos);
    CHECK(e.code() == ErrorCode::kAbortedGeneration);
  }
}
