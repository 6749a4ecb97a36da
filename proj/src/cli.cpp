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

#include "stip/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "stip/model_io.hpp"
#include "stip/security.hpp"
#include "stip/transform.hpp"
#include "stip/wire.hpp"

namespace stip::cli {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw Error(ErrorCode::kInvalidConfig, "bad value for " + key + ": '" + value + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value);
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) bad_value(key, value);
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, value);
  }
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Binds each config key to its field, for parsing and for canonical output.
struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field uint_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = parse_number<T>("value", v); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

template <typename T>
Field real_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = static_cast<T>(parse_real("value", v)); },
          [member](const RunConfig& c) {
            std::ostringstream os;
            os << std::setprecision(17) << c.*member;
            return os.str();
          }};
}

Field string_field(std::string RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"layers", uint_field(&RunConfig::layers)},
      {"d_model", uint_field(&RunConfig::d_model)},
      {"d_ff", uint_field(&RunConfig::d_ff)},
      {"vocab", uint_field(&RunConfig::vocab)},
      {"experts", uint_field(&RunConfig::experts)},
      {"top_k", uint_field(&RunConfig::top_k)},
      {"attn_scale", real_field(&RunConfig::attn_scale)},
      {"norm_kind", string_field(&RunConfig::norm_kind)},
      {"norm_placement", string_field(&RunConfig::norm_placement)},
      {"ffn_kind", string_field(&RunConfig::ffn_kind)},
      {"mask_kind", string_field(&RunConfig::mask_kind)},
      {"seed", uint_field(&RunConfig::seed)},
      {"key_seed", uint_field(&RunConfig::key_seed)},
      {"transport", string_field(&RunConfig::transport)},
      {"host", string_field(&RunConfig::host)},
      {"port", uint_field(&RunConfig::port)},
      {"latency_ms", real_field(&RunConfig::latency_ms)},
      {"trials", uint_field(&RunConfig::trials)},
      {"tol", real_field(&RunConfig::tol)},
      {"tokens", uint_field(&RunConfig::tokens)},
      {"prompts", uint_field(&RunConfig::prompts)},
      {"prompt_len", uint_field(&RunConfig::prompt_len)},
      {"seq_len", uint_field(&RunConfig::seq_len)},
      {"reps", uint_field(&RunConfig::reps)},
      {"bench_dim", uint_field(&RunConfig::bench_dim)},
      {"attack_dim", uint_field(&RunConfig::attack_dim)},
      {"samples", uint_field(&RunConfig::samples)},
  };
  return table;
}

std::string env_name(const std::string& key) {
  std::string out = kEnvPrefix;
  for (char c : key) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

ModelConfig RunConfig::model_config() const {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d_model;
  c.d_ff = d_ff;
  c.vocab_size = vocab;
  c.n_experts = experts;
  c.top_k = top_k;
  c.attn_scale = attn_scale > 0.0F ? attn_scale : static_cast<float>(d_model);
  c.norm_kind = parse_norm_kind(norm_kind);
  c.norm_placement = parse_norm_placement(norm_placement);
  c.ffn_kind = parse_ffn_kind(ffn_kind);
  c.mask_kind = parse_mask_kind(mask_kind);
  c.validate();
  return c;
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + "=" + field.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(canonical());
  return os.str();
}

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [key, field] : fields()) k.push_back(key);
    return k;
  }();
  return keys;
}

void set_run_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw Error(ErrorCode::kInvalidConfig, "unknown config key: " + key);
  try {
    it->second.set(cfg, value);
  } catch (const Error&) {
    bad_value(key, value);
  }
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kInvalidConfig, "config line " + std::to_string(lineno) + " is not key=value");
    }
    out[trim(std::string_view(t).substr(0, eq))] = trim(std::string_view(t).substr(eq + 1));
  }
  return out;
}

RunConfig load_run_config(const std::string& config_path, const std::map<std::string, std::string>& flags) {
  RunConfig cfg;
  if (!config_path.empty()) {
    const Bytes raw = read_file(config_path);
    for (const auto& [k, v] : parse_config_text(std::string(raw.begin(), raw.end()))) set_run_config_value(cfg, k, v);
  }
  for (const auto& key : run_config_keys()) {
    if (const char* v = std::getenv(env_name(key).c_str())) set_run_config_value(cfg, key, v);
  }
  for (const auto& [k, v] : flags) set_run_config_value(cfg, k, v);
  cfg.model_config();
  return cfg;
}

namespace {

struct Context {
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;
  std::string report_path;
};

json report_header(const Context& ctx, std::string_view command) {
  json j;
  j["command"] = command;
  j["config_hash"] = ctx.cfg.hash();
  j["seed"] = ctx.cfg.seed;
  j["config"] = json::object();
  for (const auto& [key, field] : fields()) j["config"][key] = field.get(ctx.cfg);
  j["records"] = json::array();
  return j;
}

void add_record(json& report, const MetricRecord& r) {
  json rec = r;
  rec["config_hash"] = report["config_hash"];
  rec["seed"] = report["seed"];
  report["records"].push_back(std::move(rec));
}

void emit(const Context& ctx, const json& report) {
  ctx.out << report.dump(2) << '\n';
  if (!ctx.report_path.empty()) {
    const std::string text = report.dump(2) + "\n";
    write_file(ctx.report_path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
}

void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::vector<std::uint32_t>> make_prompts(const RunConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::uint32_t> tok(0, cfg.vocab - 1);
  std::vector<std::vector<std::uint32_t>> out(cfg.prompts, std::vector<std::uint32_t>(cfg.prompt_len));
  for (auto& p : out) {
    for (auto& t : p) t = tok(rng);
  }
  return out;
}

ModelParams model_from_flag_or_config(const Context& ctx, const std::string& path) {
  return path.empty() ? gen_model(ctx.cfg.model_config(), ctx.cfg.seed) : load_model(path);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_genmodel(const Context& ctx, const std::string& out_path, const std::string& format) {
  const ModelParams p = gen_model(ctx.cfg.model_config(), ctx.cfg.seed);
  std::size_t bytes = 0;
  if (format == "json") {
    const std::string text = model_to_json(p);
    write_text(out_path, text);
    bytes = text.size();
  } else if (format == "binary") {
    const Bytes b = encode_model(p);
    write_file(out_path, b);
    bytes = b.size();
  } else {
    throw Error(ErrorCode::kInvalidConfig, "unknown model format: " + format);
  }
  json r = report_header(ctx, "genmodel");
  r["out"] = out_path;
  r["format"] = format;
  r["bytes"] = bytes;
  emit(ctx, r);
  return kExitOk;
}

int cmd_transform(const Context& ctx, const std::string& model_path, const std::string& out_model,
                  const std::string& out_keys, bool identity) {
  const ModelParams p = load_model(model_path);
  const auto start = Clock::now();
  const PermutationSet set =
      identity ? PermutationSet::identity(p.config) : gen_permutation_set(p.config, ctx.cfg.key_seed);
  const TransformedModel t = para_trans(p, set);
  const double seconds = seconds_since(start);
  save_model(out_model, t.params, false);
  write_file(out_keys, encode_keys(set));

  json r = report_header(ctx, "transform");
  r["model"] = model_path;
  r["out_model"] = out_model;
  r["out_keys"] = out_keys;
  r["identity"] = identity;
  r["epoch"] = set.epoch;
  r["permutations"] = set.count();
  r["shared_permutations"] = 2;
  r["private_permutations"] = set.count() - 2;
  add_record(r, {"transform_seconds", seconds, {p.config.n_layers, p.config.d_model}, {ctx.cfg.key_seed}, 1});
  emit(ctx, r);
  return kExitOk;
}

int cmd_verify(const Context& ctx, const std::string& model_path, const std::string& keys_path,
               const std::string& transformed_path) {
  if (ctx.cfg.trials == 0) {
    ctx.err << "verify: trials must be at least 1\n";
    return kExitUsage;
  }
  const ModelParams p = load_model(model_path);
  json r = report_header(ctx, "verify");
  r["model"] = model_path;
  r["keys"] = keys_path;
  PermutationSet set;
  try {
    set = decode_keys(read_file(keys_path));
    set.validate(p.config);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIo) throw;
    r["passed"] = false;
    r["error"] = e.what();
    emit(ctx, r);
    return kExitVerifyFailed;
  }

  ModelParams deployed;
  bool deployed_matches = true;
  if (transformed_path.empty()) {
    deployed = para_trans(p, set).params;
  } else {
    deployed = load_model(transformed_path);
    const ModelParams expected = para_trans(p, set).params;
    deployed_matches = deployed.layers == expected.layers && deployed.w_c == expected.w_c;
    r["transformed"] = transformed_path;
  }
  EquivalenceReport eq;
  try {
    eq = verify_equivalence(p, deployed, set.shared_part(), ctx.cfg.trials, ctx.cfg.tol, ctx.cfg.seed,
                            ctx.cfg.seq_len);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kInvalidDimension) throw;
    r["passed"] = false;
    r["error"] = e.what();
    emit(ctx, r);
    return kExitVerifyFailed;
  }
  const bool passed = eq.passed && deployed_matches;
  r["deployed_matches_keys"] = deployed_matches;
  r["max_abs_diff"] = eq.max_abs_diff;
  r["argmax_match_rate"] = eq.argmax_match_rate;
  r["trials"] = eq.trials;
  r["rows_compared"] = eq.rows_compared;
  r["tol"] = ctx.cfg.tol;
  r["passed"] = passed;
  add_record(r, {"max_abs_diff", eq.max_abs_diff, {ctx.cfg.seq_len, p.config.d_model}, {ctx.cfg.seed}, eq.trials});
  add_record(r, {"argmax_match_rate", eq.argmax_match_rate, {ctx.cfg.seq_len, p.config.vocab_size}, {ctx.cfg.seed},
                 eq.rows_compared});
  emit(ctx, r);
  return passed ? kExitOk : kExitVerifyFailed;
}

SimulationOptions simulation_options(const RunConfig& cfg, std::ostream* transcript) {
  SimulationOptions o;
  o.transport = parse_transport_kind(cfg.transport);
  o.host = cfg.host;
  o.port = static_cast<std::uint16_t>(cfg.port);
  o.latency = std::chrono::microseconds(static_cast<std::int64_t>(cfg.latency_ms * 1000.0));
  o.seed = cfg.key_seed;
  o.transcript = transcript;
  return o;
}

// Least-squares slope of cumulative wall time against token index.
double per_token_slope(const std::vector<double>& round_seconds) {
  const std::size_t n = round_seconds.size();
  if (n < 2) return n == 1 ? round_seconds[0] : 0.0;
  double cum = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cum += round_seconds[i];
    const double x = static_cast<double>(i + 1);
    sx += x;
    sy += cum;
    sxx += x * x;
    sxy += x * cum;
  }
  const double dn = static_cast<double>(n);
  return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

int cmd_simulate(const Context& ctx, const std::string& model_path, const std::string& transcript_path) {
  const ModelParams p = model_from_flag_or_config(ctx, model_path);
  const auto prompts = make_prompts(ctx.cfg);
  std::ofstream transcript_file;
  std::ostringstream transcript_buf;
  if (!transcript_path.empty()) {
    transcript_file.open(transcript_path);
    if (!transcript_file) throw Error(ErrorCode::kIo, "cannot open " + transcript_path);
  }
  std::ostream* transcript = transcript_path.empty() ? static_cast<std::ostream*>(&transcript_buf) : &transcript_file;
  const SimulationResult sim = run_simulation(p, prompts, ctx.cfg.tokens, simulation_options(ctx.cfg, transcript));

  bool matches_local = true;
  json outputs = json::array();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto local = generate_greedy(p, prompts[i], ctx.cfg.tokens);
    matches_local = matches_local && local == sim.outputs[i];
    outputs.push_back({{"prompt", prompts[i]}, {"tokens", sim.outputs[i]}, {"local", local}});
  }
  json r = report_header(ctx, "simulate");
  r["transport"] = ctx.cfg.transport;
  r["latency_ms"] = ctx.cfg.latency_ms;
  r["outputs"] = outputs;
  r["matches_local"] = matches_local;
  r["rounds"] = sim.rounds;
  r["transcript_lines"] = sim.transcript_lines;
  r["epoch"] = sim.epoch;
  r["round_seconds"] = sim.round_seconds;
  r["per_token_seconds"] = per_token_slope(sim.round_seconds);
  r["latency_split"] = {{"device_seconds", sim.device_seconds},
                        {"communication_seconds", sim.comm_seconds},
                        {"cloud_seconds", sim.cloud_seconds}};
  if (!transcript_path.empty()) r["transcript"] = transcript_path;
  add_record(r, {"per_token_seconds", r["per_token_seconds"].get<double>(), {ctx.cfg.prompt_len, p.config.d_model},
                 {ctx.cfg.seed, ctx.cfg.key_seed}, sim.rounds});
  emit(ctx, r);
  return matches_local ? kExitOk : kExitVerifyFailed;
}

json kpa_json(const KpaResult& k) {
  json j{{"outcome", to_string(k.outcome)}, {"candidates_tried", k.candidates_tried}};
  if (k.perm) j["perm"] = std::vector<std::uint32_t>(k.perm->map().begin(), k.perm->map().end());
  if (!k.groups.empty()) j["groups"] = k.groups;
  return j;
}

int cmd_attack(const Context& ctx, const std::string& kind) {
  const RunConfig& c = ctx.cfg;
  json r = report_header(ctx, "attack");
  r["kind"] = kind;
  std::mt19937_64 rng(c.seed);
  if (kind == "kpa") {
    const std::size_t d = c.d_model;
    const Matrix x = gaussian_matrix(c.samples, d, 1.0, rng);
    const PermutationVec pi = gen_permutation(d, rng);
    const KpaResult k = kpa_column_match(x, apply_col_perm(x, pi));
    r["column_match"] = kpa_json(k);
    r["recovered_matches_truth"] = k.perm.has_value() && *k.perm == pi;

    const ModelParams p = gen_model(c.model_config(), c.seed);
    const PermutationSet set = gen_permutation_set(p.config, c.key_seed);
    const ResistanceReport res = kpa_parameter_resistance_demo(p, set, set.pi);
    json weights = json::array();
    for (const auto& w : res.weights) {
      weights.push_back({{"name", w.name}, {"max_abs_diff", w.max_abs_diff}, {"dcorr", w.dcorr},
                         {"recovered", w.recovered}});
    }
    r["parameter_resistance"] = weights;
    add_record(r, {"kpa_recovered", k.outcome == KpaResult::Outcome::kRecovered ? 1.0 : 0.0, {c.samples, d},
                   {c.seed}, 1});
  } else if (kind == "bfa") {
    const std::size_t d = c.attack_dim;
    const Matrix x = gaussian_matrix(c.samples, d, 1.0, rng);
    const PermutationVec pi = gen_permutation(d, rng);
    r["dim"] = d;
    r["keyspace_log"] = log_factorial(d);
    try {
      const KpaResult k = bfa_exhaustive(x, apply_col_perm(x, pi));
      r["brute_force"] = kpa_json(k);
      add_record(r, {"bfa_candidates", static_cast<double>(k.candidates_tried), {c.samples, d}, {c.seed}, 1});
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kKeyspaceTooLarge) throw;
      r["brute_force"] = {{"outcome", "refused"}, {"reason", e.what()}};
    }
  } else if (kind == "unauthorized") {
    const ModelParams p = gen_model(c.model_config(), c.seed);
    const PermutationSet set = gen_permutation_set(p.config, c.key_seed);
    const auto prompt = make_prompts(c).front();
    const UnauthorizedUseReport u =
        unauthorized_use_demo(para_trans(p, set), set.shared_part(), prompt, p.embedding, c.tokens);
    r["argmax_mismatch_rate"] = u.argmax_mismatch_rate;
    r["legitimate_tokens"] = u.legitimate_tokens;
    r["unauthorized_tokens"] = u.unauthorized_tokens;
    add_record(r, {"argmax_mismatch_rate", u.argmax_mismatch_rate, {c.tokens, p.config.vocab_size},
                   {c.seed, c.key_seed}, c.tokens});
  } else {
    throw Error(ErrorCode::kInvalidConfig, "unknown attack kind: " + kind);
  }
  emit(ctx, r);
  return kExitOk;
}

int cmd_bench(const Context& ctx, const std::string& csv_path) {
  const RunConfig& c = ctx.cfg;
  if (c.reps == 0) throw Error(ErrorCode::kInvalidConfig, "reps must be at least 1");
  json r = report_header(ctx, "bench");
  std::mt19937_64 rng(c.seed);

  const Matrix x = gaussian_matrix(c.bench_dim, c.bench_dim, 1.0, rng);
  const PermutationVec pi = gen_permutation(c.bench_dim, rng);
  const Matrix pm = to_matrix(pi);
  std::vector<double> index_times;
  std::vector<double> matmul_times;
  bool same = true;
  for (std::uint32_t i = 0; i < c.reps; ++i) {
    auto t = Clock::now();
    const Matrix a = apply_col_perm(x, pi);
    index_times.push_back(seconds_since(t));
    t = Clock::now();
    const Matrix b = matmul(x, pm);
    matmul_times.push_back(seconds_since(t));
    same = same && a == b;
  }
  r["permutation"] = {{"dim", c.bench_dim},
                      {"reps", c.reps},
                      {"index_median_seconds", median(index_times)},
                      {"matmul_median_seconds", median(matmul_times)},
                      {"outputs_identical", same}};

  const ModelParams p = gen_model(c.model_config(), c.seed);
  auto t = Clock::now();
  const PermutationSet set = gen_permutation_set(p.config, c.key_seed);
  const TransformedModel tm = para_trans(p, set);
  r["transform_seconds"] = seconds_since(t);

  DataOwner probe;
  probe.install({MsgType::kDeployKeys, set.epoch, 0, encode_deploy_keys_payload(set.shared_part(), p.embedding)});
  const std::vector<std::uint32_t> n_tokens(c.prompt_len, 0);
  const std::size_t header = kFrameHeaderSize + 8;
  const std::size_t request_bytes = encode_frame(probe.make_request(n_tokens)).size();
  Server srv;
  srv.handle({MsgType::kDeployModel, set.epoch, 0, encode_model(tm.params, false)});
  const std::size_t response_bytes = encode_frame(srv.serve(probe.make_request(n_tokens))).size();
  r["traffic"] = {{"tokens", c.prompt_len},
                  {"header_bytes", header},
                  {"request_bytes", request_bytes},
                  {"request_expected", 4ULL * c.prompt_len * p.config.d_model + header},
                  {"response_bytes", response_bytes},
                  {"response_expected", 4ULL * c.prompt_len * p.config.vocab_size + header}};

  const SimulationResult sim = run_simulation(p, make_prompts(c), c.tokens, simulation_options(c, nullptr));
  const double tokens_per_second = sim.wall_seconds > 0 ? static_cast<double>(sim.rounds) / sim.wall_seconds : 0.0;
  r["end_to_end"] = {{"tokens", sim.rounds}, {"wall_seconds", sim.wall_seconds}, {"tokens_per_second", tokens_per_second}};
  r["latency_split"] = {{"device_seconds", sim.device_seconds},
                        {"communication_seconds", sim.comm_seconds},
                        {"cloud_seconds", sim.cloud_seconds}};

  const std::vector<std::uint64_t> seeds{c.seed, c.key_seed};
  add_record(r, {"perm_index_median_seconds", median(index_times), {c.bench_dim, c.bench_dim}, seeds, c.reps});
  add_record(r, {"perm_matmul_median_seconds", median(matmul_times), {c.bench_dim, c.bench_dim}, seeds, c.reps});
  add_record(r, {"transform_seconds", r["transform_seconds"].get<double>(), {c.layers, c.d_model}, seeds, 1});
  add_record(r, {"tokens_per_second", tokens_per_second, {c.prompt_len, c.d_model}, seeds, sim.rounds});
  add_record(r, {"request_bytes", static_cast<double>(request_bytes), {c.prompt_len, c.d_model}, seeds, 1});
  add_record(r, {"response_bytes", static_cast<double>(response_bytes), {c.prompt_len, c.vocab}, seeds, 1});
  add_record(r, {"device_seconds", sim.device_seconds, {}, seeds, sim.rounds});
  add_record(r, {"communication_seconds", sim.comm_seconds, {}, seeds, sim.rounds});
  add_record(r, {"cloud_seconds", sim.cloud_seconds, {}, seeds, sim.rounds});

  if (!csv_path.empty()) {
    std::ostringstream csv;
    csv << std::setprecision(17) << "metric,value,samples,config_hash,seed\n";
    for (const auto& rec : r["records"]) {
      csv << rec["metric"].get<std::string>() << ',' << rec["value"].get<double>() << ','
          << rec["samples"].get<std::size_t>() << ',' << rec["config_hash"].get<std::string>() << ','
          << rec["seed"].get<std::uint64_t>() << '\n';
    }
    write_text(csv_path, csv.str());
    r["csv"] = csv_path;
  }
  emit(ctx, r);
  return kExitOk;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIo:
    case ErrorCode::kParse: return kExitIo;
    case ErrorCode::kProtocol:
    case ErrorCode::kStaleEpoch:
    case ErrorCode::kAbortedGeneration:
    case ErrorCode::kNotInitialized: return kExitProtocol;
    case ErrorCode::kInvalidConfig: return kExitUsage;
    default: return kExitVerifyFailed;
  }
}

std::string env_help() {
  std::string s = "Settings resolve in order: defaults, --config file (key=value, '#' comments), ";
  s += std::string("environment variables ") + kEnvPrefix + "<KEY> (e.g. " + kEnvPrefix +
       "D_MODEL=128), then flags.\nExit codes: 0 ok, 1 verification failure, 2 usage, 3 I/O, 4 protocol.";
  return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Permutation-based private transformer inference toolkit", "stip"};
  app.footer(env_help());
  app.require_subcommand(1);

  std::string config_path;
  std::string report_path;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, std::vector<CLI::Option*>> flag_options;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value configuration file");
    sub->add_option("--report", report_path, "also write the JSON report here");
    for (const auto& key : run_config_keys()) {
      flag_options[key].push_back(sub->add_option("--" + key, flag_values[key], "config override"));
    }
  };

  std::string out_path, format = "binary", model_path, out_model, out_keys, keys_path, transformed_path,
                        transcript_path, kind, csv_path;
  bool identity = false;

  auto* genmodel = app.add_subcommand("genmodel", "write a random-weight model");
  add_common(genmodel);
  genmodel->add_option("--out", out_path, "output model file")->required();
  genmodel->add_option("--format", format, "binary or json");

  auto* transform = app.add_subcommand("transform", "permute a model and write the keys");
  add_common(transform);
  transform->add_option("--model", model_path, "input model file")->required();
  transform->add_option("--out-model", out_model, "transformed model file")->required();
  transform->add_option("--out-keys", out_keys, "permutation key file")->required();
  transform->add_flag("--identity", identity, "use identity permutations");

  auto* verify = app.add_subcommand("verify", "check protected inference against the original");
  add_common(verify);
  verify->add_option("--model", model_path, "original model file")->required();
  verify->add_option("--keys", keys_path, "permutation key file")->required();
  verify->add_option("--transformed", transformed_path, "deployed model file");

  auto* simulate = app.add_subcommand("simulate", "run developer, server and data owner");
  add_common(simulate);
  simulate->add_option("--model", model_path, "model file (default: generated from config)");
  simulate->add_option("--transcript", transcript_path, "JSON-lines transcript output");

  auto* attack = app.add_subcommand("attack", "run an attack demonstration");
  add_common(attack);
  attack->add_option("--kind", kind, "kpa, bfa or unauthorized")->required();

  auto* bench = app.add_subcommand("bench", "permutation cost, throughput and traffic");
  add_common(bench);
  bench->add_option("--csv", csv_path, "CSV output");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  std::map<std::string, std::string> flags;
  for (const auto& [key, opts] : flag_options) {
    for (const CLI::Option* o : opts) {
      if (o->count() > 0) flags[key] = flag_values[key];
    }
  }

  try {
    Context ctx{load_run_config(config_path, flags), out, err, report_path};
    if (*genmodel) return cmd_genmodel(ctx, out_path, format);
    if (*transform) return cmd_transform(ctx, model_path, out_model, out_keys, identity);
    if (*verify) return cmd_verify(ctx, model_path, keys_path, transformed_path);
    if (*simulate) return cmd_simulate(ctx, model_path, transcript_path);
    if (*attack) return cmd_attack(ctx, kind);
    if (*bench) return cmd_bench(ctx, csv_path);
  } catch (const Error& e) {
    err << "stip: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "stip: " << e.what() << '\n';
    return kExitVerifyFailed;
  }
  return kExitUsage;
}

}  // namespace stip::cli
