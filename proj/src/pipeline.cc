#include "dymo/pipeline.h"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "dymo/errors.h"
#include "dymo/grammar.h"
#include "dymo/hashing.h"
#include "dymo/image_io.h"

namespace dymo {
namespace {

Tensor gaussian(const std::vector<int>& shape, std::mt19937_64& rng) {
  Tensor t(shape);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : t.data()) v = n(rng);
  return t;
}

std::mt19937_64 stream(uint64_t seed, uint32_t which) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), which};
  return std::mt19937_64(seq);
}

constexpr uint32_t kInitStream = 1;
constexpr uint32_t kEps1Stream = 2;
constexpr uint32_t kEps2Stream = 3;

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string eta_mode_name(EtaMode m) { return m == EtaMode::kBeta ? "beta" : "constant"; }

EtaMode eta_mode_from(const std::string& v) {
  if (v == "beta") return EtaMode::kBeta;
  if (v == "constant") return EtaMode::kConstant;
  throw ConfigError("eta_mode: expected constant or beta, got '" + v + "'");
}

nlohmann::ordered_json events_json(const EventLog& events) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const Event& e : events) {
    nlohmann::ordered_json j{{"kind", e.kind}, {"message", e.message}};
    if (e.t >= 0) j["t"] = e.t;
    out.push_back(j);
  }
  return out;
}

EventLog events_from(const nlohmann::json& j) {
  EventLog out;
  for (const auto& e : j) out.push_back({e.at("kind"), e.at("message"), e.value("t", -1)});
  return out;
}

Stage stage_from(const std::string& s) {
  if (s == "semantic") return Stage::kSemantic;
  if (s == "blended") return Stage::kBlended;
  if (s == "refine") return Stage::kRefine;
  throw FormatError("unknown stage '" + s + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// --- config -----------------------------------------------------------------

void SamplerConfig::validate() const {
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end) {
    throw ConfigError("beta range must satisfy 0 < beta_start <= beta_end < 1");
  }
  stage.validate();
  if (graph_source != "rules" && graph_source != "llm" && graph_source != "file") {
    throw ConfigError("graph_source must be rules, llm or file");
  }
  if (graph_source == "file" && graph_file.empty()) throw ConfigError("graph_source=file needs graph_file");
  if (fixed_recurrence < -1) throw ConfigError("fixed_recurrence must be >= 0, or -1 for dynamic");
}

nlohmann::ordered_json SamplerConfig::to_json() const {
  return {{"schema_version", kSchemaVersion},
          {"steps", steps},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"stage", stage.to_json()},
          {"eta_mode", eta_mode_name(eta_mode)},
          {"denoiser", denoiser_path},
          {"scorer", scorer_path},
          {"graph_source", graph_source},
          {"graph_file", graph_file},
          {"seed", seed},
          {"guidance", guidance},
          {"use_la", use_la},
          {"use_lr", use_lr},
          {"adaptive_w", adaptive_w},
          {"polyak", polyak},
          {"fixed_recurrence", fixed_recurrence},
          {"loss_form", to_string(loss_form)},
          {"keep_trajectory", keep_trajectory},
          {"out", out_dir}};
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != kSchemaVersion) {
    throw FormatError("sampler config schema_version " + std::to_string(j.value("schema_version", 0)) +
                      ", expected " + std::to_string(kSchemaVersion));
  }
  SamplerConfig c;
  c.steps = j.at("steps");
  c.beta_start = j.at("beta_start");
  c.beta_end = j.at("beta_end");
  c.stage = StageConfig::from_json(j.at("stage"));
  c.eta_mode = eta_mode_from(j.at("eta_mode"));
  c.denoiser_path = j.at("denoiser");
  c.scorer_path = j.at("scorer");
  c.graph_source = j.at("graph_source");
  c.graph_file = j.at("graph_file");
  c.seed = j.at("seed");
  c.guidance = j.at("guidance");
  c.use_la = j.at("use_la");
  c.use_lr = j.at("use_lr");
  c.adaptive_w = j.at("adaptive_w");
  c.polyak = j.at("polyak");
  c.fixed_recurrence = j.at("fixed_recurrence");
  c.loss_form = preference_loss_form_from_string(j.at("loss_form"));
  c.keep_trajectory = j.value("keep_trajectory", false);
  c.out_dir = j.value("out", "");
  c.validate();
  return c;
}

void apply_setting(SamplerConfig& c, const std::string& key, const std::string& value) {
  auto table = [&](StageTable& t, const std::string& field) {
    const std::string sub = key.substr(field.size());
    const double v = parse_double(key, value);
    if (sub.empty()) {
      t = {v, v, v};
    } else if (sub == ".semantic") {
      t.semantic = v;
    } else if (sub == ".blended") {
      t.blended = v;
    } else if (sub == ".refine") {
      t.refine = v;
    } else {
      throw ConfigError("unknown setting '" + key + "'");
    }
  };
  if (key == "schema_version") {
    if (parse_int(key, value) != SamplerConfig::kSchemaVersion) {
      throw ConfigError("schema_version " + value + " is not supported (expected " +
                        std::to_string(SamplerConfig::kSchemaVersion) + ")");
    }
  } else if (key == "steps") {
    c.steps = static_cast<int>(parse_int(key, value));
  } else if (key == "beta_start") {
    c.beta_start = parse_double(key, value);
  } else if (key == "beta_end") {
    c.beta_end = parse_double(key, value);
  } else if (key == "t1_frac") {
    c.stage.t1_frac = parse_double(key, value);
  } else if (key == "t2_frac") {
    c.stage.t2_frac = parse_double(key, value);
  } else if (key == "k") {
    c.stage.k = parse_double(key, value);
  } else if (key.rfind("eta", 0) == 0 && key != "eta_mode") {
    table(c.stage.eta, "eta");
  } else if (key == "eta_mode") {
    c.eta_mode = eta_mode_from(value);
  } else if (key.rfind("h", 0) == 0 && (key == "h" || key[1] == '.')) {
    table(c.stage.h, "h");
  } else if (key == "r_max") {
    c.stage.r_max = static_cast<int>(parse_int(key, value));
  } else if (key == "z0_prev_latest") {
    c.stage.z0_prev_latest = parse_bool(key, value);
  } else if (key == "denoiser") {
    c.denoiser_path = value;
  } else if (key == "scorer") {
    c.scorer_path = value;
  } else if (key == "graph_source") {
    c.graph_source = value;
  } else if (key == "graph_file") {
    c.graph_file = value;
  } else if (key == "seed") {
    c.seed = static_cast<uint64_t>(parse_int(key, value));
  } else if (key == "guidance") {
    c.guidance = parse_bool(key, value);
  } else if (key == "use_la") {
    c.use_la = parse_bool(key, value);
  } else if (key == "use_lr") {
    c.use_lr = parse_bool(key, value);
  } else if (key == "adaptive_w") {
    c.adaptive_w = parse_bool(key, value);
  } else if (key == "polyak") {
    c.polyak = parse_bool(key, value);
  } else if (key == "fixed_recurrence") {
    c.fixed_recurrence = static_cast<int>(parse_int(key, value));
  } else if (key == "loss_form") {
    c.loss_form = preference_loss_form_from_string(value);
  } else if (key == "keep_trajectory") {
    c.keep_trajectory = parse_bool(key, value);
  } else if (key == "out") {
    c.out_dir = value;
  } else {
    throw ConfigError("unknown setting '" + key + "'");
  }
}

std::vector<std::pair<std::string, std::string>> parse_key_value(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

SamplerConfig load_sampler_config(const std::string& path) {
  SamplerConfig c;
  int lineno = 0;
  for (const auto& [k, v] : parse_key_value(read_text(path))) {
    ++lineno;
    try {
      apply_setting(c, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

std::string to_key_value(const SamplerConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "schema_version = " << SamplerConfig::kSchemaVersion << "\n"
      << "steps = " << c.steps << "\nbeta_start = " << c.beta_start << "\nbeta_end = " << c.beta_end << "\n"
      << "t1_frac = " << c.stage.t1_frac << "\nt2_frac = " << c.stage.t2_frac << "\nk = " << c.stage.k << "\n"
      << "eta.semantic = " << c.stage.eta.semantic << "\neta.blended = " << c.stage.eta.blended
      << "\neta.refine = " << c.stage.eta.refine << "\neta_mode = " << eta_mode_name(c.eta_mode) << "\n"
      << "h.semantic = " << c.stage.h.semantic << "\nh.blended = " << c.stage.h.blended
      << "\nh.refine = " << c.stage.h.refine << "\n"
      << "r_max = " << c.stage.r_max << "\nz0_prev_latest = " << (c.stage.z0_prev_latest ? "true" : "false") << "\n"
      << "denoiser = " << c.denoiser_path << "\nscorer = " << c.scorer_path << "\n"
      << "graph_source = " << c.graph_source << "\ngraph_file = " << c.graph_file << "\n"
      << "seed = " << c.seed << "\nguidance = " << (c.guidance ? "true" : "false") << "\n"
      << "use_la = " << (c.use_la ? "true" : "false") << "\nuse_lr = " << (c.use_lr ? "true" : "false") << "\n"
      << "adaptive_w = " << (c.adaptive_w ? "true" : "false") << "\npolyak = " << (c.polyak ? "true" : "false")
      << "\nfixed_recurrence = " << c.fixed_recurrence << "\nloss_form = " << to_string(c.loss_form) << "\n"
      << "keep_trajectory = " << (c.keep_trajectory ? "true" : "false") << "\nout = " << c.out_dir << "\n";
  return out.str();
}

LoadedModels load_models(const SamplerConfig& config) {
  LoadedModels m;
  for (const auto& [path, what] : {std::pair{config.denoiser_path, "denoiser"}, std::pair{config.scorer_path, "scorer"}}) {
    if (path.empty()) throw InputError(std::string("no ") + what + " checkpoint configured");
    if (!std::filesystem::exists(path)) throw InputError(std::string(what) + " checkpoint not found: " + path);
  }
  m.denoiser = std::make_unique<ToyDenoiser>(ToyDenoiser::from_checkpoint(load_checkpoint(config.denoiser_path)));
  m.scorer = std::make_unique<PreferenceScorer>(PreferenceScorer::from_checkpoint(load_checkpoint(config.scorer_path)));
  m.denoiser_hash = sha256_file(config.denoiser_path);
  m.scorer_hash = sha256_file(config.scorer_path);
  return m;
}

// --- run record ---------------------------------------------------------------

int64_t RunRecord::expected_denoiser_calls() const {
  int64_t n = 0;
  for (const StepEntry& s : steps) n += 1 + s.r_t;
  return n;
}

nlohmann::ordered_json RunRecord::to_json() const {
  nlohmann::ordered_json steps_json = nlohmann::ordered_json::array();
  for (const StepEntry& s : steps) {
    nlohmann::ordered_json cycles = nlohmann::ordered_json::array();
    for (const CycleEntry& c : s.cycles) {
      cycles.push_back({{"cycle", c.cycle},
                        {"stage", to_string(c.stage)},
                        {"w_a", c.w_a},
                        {"w_r", c.w_r},
                        {"rel_change", c.rel_change ? nlohmann::ordered_json(*c.rel_change) : nlohmann::ordered_json()},
                        {"l_a", c.l_a},
                        {"l_r", c.l_r},
                        {"total", c.total},
                        {"grad_norm", c.grad_norm},
                        {"eta", c.eta},
                        {"step_magnitude", c.step_magnitude},
                        {"degenerate", c.degenerate}});
    }
    steps_json.push_back({{"t", s.t}, {"r_t", s.r_t}, {"cycles", cycles}, {"events", events_json(s.events)}});
  }
  return {{"id", id},
          {"mode", mode},
          {"prompt", prompt},
          {"seed", seed},
          {"config", config},
          {"checkpoints", {{"denoiser", denoiser_hash}, {"scorer", scorer_hash}}},
          {"graph", graph},
          {"nfe", {{"denoiser_calls", denoiser_calls}, {"scorer_calls", scorer_calls},
                   {"expected_denoiser_calls", expected_denoiser_calls()},
                   {"recurrence_evaluations", recurrence_evaluations}}},
          {"completed", completed},
          {"error", error},
          {"events", events_json(events)},
          {"image_sha256", image_hash},
          {"metrics", metrics},
          {"steps", steps_json},
          {"wall_time_s", wall_time_s}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.id = j.at("id");
  r.mode = j.at("mode");
  r.prompt = j.at("prompt");
  r.seed = j.at("seed");
  r.config = j.at("config");
  r.denoiser_hash = j.at("checkpoints").at("denoiser");
  r.scorer_hash = j.at("checkpoints").at("scorer");
  r.graph = j.at("graph");
  r.denoiser_calls = j.at("nfe").at("denoiser_calls");
  r.scorer_calls = j.at("nfe").at("scorer_calls");
  r.recurrence_evaluations = j.at("nfe").at("recurrence_evaluations");
  r.completed = j.at("completed");
  r.error = j.at("error");
  r.events = events_from(j.at("events"));
  r.image_hash = j.at("image_sha256");
  r.metrics = j.at("metrics");
  r.wall_time_s = j.at("wall_time_s");
  for (const auto& s : j.at("steps")) {
    StepEntry e;
    e.t = s.at("t");
    e.r_t = s.at("r_t");
    e.events = events_from(s.at("events"));
    for (const auto& c : s.at("cycles")) {
      CycleEntry ce;
      ce.cycle = c.at("cycle");
      ce.stage = stage_from(c.at("stage"));
      ce.w_a = c.at("w_a");
      ce.w_r = c.at("w_r");
      if (!c.at("rel_change").is_null()) ce.rel_change = c.at("rel_change").get<double>();
      ce.l_a = c.at("l_a");
      ce.l_r = c.at("l_r");
      ce.total = c.at("total");
      ce.grad_norm = c.at("grad_norm");
      ce.eta = c.at("eta");
      ce.step_magnitude = c.at("step_magnitude");
      ce.degenerate = c.at("degenerate");
      e.cycles.push_back(ce);
    }
    r.steps.push_back(std::move(e));
  }
  return r;
}

std::string RunRecord::hash() const {
  // Sorted keys, so the hash survives a round trip through any JSON reader.
  nlohmann::json j = to_json();
  j.erase("wall_time_s");
  return sha256_hex(j.dump());
}

// --- graph --------------------------------------------------------------------

SemanticGraph resolve_graph(const std::string& prompt, const SamplerConfig& config, const TextEncoding& text,
                            EventLog* events, LlmClient* client) {
  const Grammar& grammar = Grammar::builtin();
  SemanticGraph g;
  if (config.graph_source == "file") {
    g = graph_from_json(nlohmann::ordered_json::parse(read_text(config.graph_file)));
    if (g.prompt != prompt && events) {
      events->push_back({"graph_prompt_mismatch", "graph file was written for '" + g.prompt + "'"});
    }
  } else if (config.graph_source == "llm") {
    std::shared_ptr<LlmClient> owned;
    if (!client) {
      const char* cache = std::getenv("DYMO_LLM_CACHE");
      owned = llm_client_from_env(cache ? cache : "");
      client = owned.get();
    }
    if (client) {
      g = extract_graph_llm(prompt, *client, grammar, events);
    } else {
      if (events) events->push_back({"llm_unavailable", "DYMO_LLM_ENDPOINT not set; using the rule parser"});
      g = extract_graph_rules(prompt, grammar, events);
    }
  } else {
    g = extract_graph_rules(prompt, grammar, events);
  }
  return bind_tokens(std::move(g), text, events);
}

// --- sampling -----------------------------------------------------------------

namespace {

std::string default_run_id(const std::string& mode, const std::string& prompt, const SamplerConfig& config) {
  return mode + "-" + sha256_hex(mode + "\n" + prompt + "\n" + config.to_json().dump()).substr(0, 16);
}

void persist_partial(const RunRecord& record, const SamplerConfig& config) {
  if (config.out_dir.empty()) return;
  std::filesystem::create_directories(config.out_dir);
  std::ofstream out(std::filesystem::path(config.out_dir) / (record.id + ".json"));
  out << record.to_json().dump(2) << "\n";
}

struct Sampler {
  const std::string& prompt;
  const SamplerConfig& cfg;
  const SamplerModels& models;
  bool guided;
  NoiseSchedule schedule;
  RunRecord record;

  Sampler(const std::string& p, const SamplerConfig& c, const SamplerModels& m, bool g)
      : prompt(p), cfg(c), models(m), guided(g), schedule(make_linear_schedule(c.steps, c.beta_start, c.beta_end)) {}

  double eta_at(Stage stage, int t) const {
    const double base = cfg.stage.eta.at(stage);
    return cfg.eta_mode == EtaMode::kBeta ? base * schedule.beta(t) : base;
  }

  Tensor run(const SemanticGraph* graph) {
    const auto start = std::chrono::steady_clock::now();
    const TextEncoding dtext = models.denoiser->encode(prompt);
    ObjectiveInputs inputs;
    if (guided) {
      if (!models.scorer) throw InputError("guided sampling needs a preference scorer");
      inputs.denoiser_text = dtext;
      inputs.scorer_text = models.scorer->encode(prompt);
      inputs.graph = graph ? *graph : resolve_graph(prompt, cfg, dtext, &record.events);
      record.graph = graph_to_json(inputs.graph);
    }
    const ObjectiveModels objective_models{models.denoiser, models.scorer};
    CombinedOptions copts;
    copts.form = cfg.loss_form;

    std::mt19937_64 init_rng = stream(cfg.seed, kInitStream);
    std::mt19937_64 eps1_rng = stream(cfg.seed, kEps1Stream);
    std::mt19937_64 eps2_rng = stream(cfg.seed, kEps2Stream);
    const std::vector<int> shape{models.denoiser->config().image_channels, 32, 32};

    Tensor z = gaussian(shape, init_rng);
    std::optional<Tensor> z0_outer_prev;  // latest prediction of the previous outer step
    const int T = schedule.steps();
    for (int t = T; t >= 1; --t) {
      StepEntry step;
      step.t = t;
      step.r_t = -1;
      std::optional<Tensor> z0_latest;
      Tensor z_next;
      int recurrence_calls = 0;
      for (int cycle = 0;; ++cycle) {
        const Tensor eps1 = t > 1 ? gaussian(shape, eps1_rng) : Tensor(shape);
        CycleEntry entry;
        entry.cycle = cycle;
        Tensor score, z0;
        CombinedResult res;
        if (guided) {
          const Tensor* prev = cfg.stage.z0_prev_latest && z0_latest ? &*z0_latest
                               : z0_outer_prev                      ? &*z0_outer_prev
                                                                    : nullptr;
          WeightDecision decision;
          res = combined_loss(
              z, t, schedule, inputs, objective_models,
              [&](const Tensor& z0_now) {
                decision = stage_weights(t, T, z0_now, prev, cfg.stage, &step.events);
                double w_a = decision.w_a, w_r = decision.w_r;
                if (!cfg.adaptive_w && decision.stage == Stage::kBlended) w_a = w_r = 0.5;
                if (!cfg.use_la) w_a = 0.0;
                if (!cfg.use_lr) w_r = 0.0;
                return std::pair{w_a, w_r};
              },
              copts, &step.events);
          score = std::move(res.score);
          z0 = std::move(res.z0_pred);
          entry.stage = decision.stage;
          entry.rel_change = decision.rel_change;
          entry.w_a = res.objective.w_a;
          entry.w_r = res.objective.w_r;
          entry.l_a = res.objective.l_a;
          entry.l_r = res.objective.l_r;
          entry.total = res.objective.total;
          entry.grad_norm = res.grad.norm;
          if (res.scorer_called) ++record.scorer_calls;
        } else {
          ad::Tape tape;
          const ScoreOutput out = denoise(tape.constant(z), t, dtext, *models.denoiser, schedule);
          score = out.score.value();
          z0 = predict_clean(z, score, t, schedule);
          entry.stage = stage_of(t, T, cfg.stage);
        }
        ++record.denoiser_calls;
        require_finite(score, "score");

        const Tensor m = reverse_step(z, score, t, schedule, eps1);
        if (guided) {
          entry.eta = eta_at(entry.stage, t);
          if (cfg.polyak) {
            const double score_norm = std::sqrt(dot(score.data(), score.data()));
            GuidedUpdate upd = guided_update(m, res.grad.g, entry.eta, score_norm);
            z_next = std::move(upd.z);
            entry.step_magnitude = upd.step_magnitude;
            entry.degenerate = upd.degenerate;
          } else if (res.grad.norm < kDegenerateGradient) {
            z_next = m;
            entry.degenerate = true;
          } else {
            z_next = m;
            for (size_t i = 0; i < z_next.size(); ++i) z_next[i] -= entry.eta * res.grad.g[i];
            entry.step_magnitude = entry.eta * res.grad.norm;
          }
          if (entry.degenerate) step.events.push_back({"degenerate_gradient", "|g| < 1e-12; update skipped", t});
        } else {
          z_next = m;
        }
        require_finite(z_next, "z_{t-1}");

        if (cycle == 0) {
          ++recurrence_calls;
          ++record.recurrence_evaluations;
          if (cfg.fixed_recurrence >= 0) {
            step.r_t = cfg.fixed_recurrence;
          } else if (guided) {
            step.r_t = recurrence_count(cfg.stage.h.at(entry.stage), entry.grad_norm, cfg.stage.r_max);
          } else {
            step.r_t = 0;
          }
          if (cfg.keep_trajectory) record.trajectory.emplace_back(t, z0);
        }
        step.cycles.push_back(entry);
        z0_latest = std::move(z0);
        if (cycle == step.r_t) break;
        const Tensor eps2 = gaussian(shape, eps2_rng);
        z = renoise(z_next, t, schedule, eps2);
      }
      if (recurrence_calls != 1) throw std::logic_error("r_t evaluated more than once at one step");
      z0_outer_prev = std::move(z0_latest);
      z = std::move(z_next);
      record.steps.push_back(std::move(step));
    }
    if (record.recurrence_evaluations != T) throw std::logic_error("r_t evaluation count does not match T");
    record.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return decode(z);
  }
};

SampleResult sample(const std::string& prompt, const SamplerConfig& config, const SamplerModels& models,
                    const SemanticGraph* graph, const std::string& run_id, bool guided) {
  config.validate();
  if (!models.denoiser) throw InputError("sampling needs a denoiser");
  const std::string mode = guided ? "dymo" : "baseline";
  Sampler s(prompt, config, models, guided);
  RunRecord& r = s.record;
  r.id = run_id.empty() ? default_run_id(mode, prompt, config) : run_id;
  r.mode = mode;
  r.prompt = prompt;
  r.seed = config.seed;
  r.config = config.to_json();
  r.denoiser_hash = models.denoiser_hash;
  r.scorer_hash = models.scorer_hash;
  r.graph = nullptr;
  SampleResult out;
  try {
    out.image = s.run(graph);
  } catch (const NumericalError& e) {
    r.completed = false;
    r.error = e.what();
    persist_partial(r, config);
    throw SamplingAborted(std::string("sampling aborted: ") + e.what(), r);
  }
  r.completed = true;
  r.image = out.image;
  r.image_hash = sha256_hex(std::span<const double>(out.image.data()));
  out.record = std::move(r);
  return out;
}

}  // namespace

SampleResult dymo_sample(const std::string& prompt, const SamplerConfig& config, const SamplerModels& models,
                         const SemanticGraph* graph, const std::string& run_id) {
  return sample(prompt, config, models, graph, run_id, config.guidance);
}

SampleResult baseline_sample(const std::string& prompt, const SamplerConfig& config, const SamplerModels& models,
                             const std::string& run_id) {
  return sample(prompt, config, models, nullptr, run_id, false);
}

std::vector<std::pair<int, Tensor>> strip_frames(const RunRecord& record, int stride) {
  std::vector<std::pair<int, Tensor>> out;
  if (stride < 1) throw InputError("strip stride must be >= 1");
  for (size_t i = 0; i < record.trajectory.size(); i += static_cast<size_t>(stride)) out.push_back(record.trajectory[i]);
  return out;
}

Tensor strip_image(const std::vector<std::pair<int, Tensor>>& frames) {
  if (frames.empty()) throw InputError("strip needs at least one frame");
  const int h = frames.front().second.dim(1), w = frames.front().second.dim(2);
  Tensor strip({3, h, w * static_cast<int>(frames.size())});
  for (size_t f = 0; f < frames.size(); ++f) {
    const Tensor img = decode(frames[f].second);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) strip.at(c, y, static_cast<int>(f) * w + x) = img.at(c, y, x);
      }
    }
  }
  return strip;
}

void write_run(const SampleResult& result, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base = std::filesystem::path(dir) / result.record.id;
  write_png(base.string() + ".png", result.image);
  {
    std::ofstream out(base.string() + ".json");
    if (!out) throw InputError("cannot write " + base.string() + ".json");
    out << result.record.to_json().dump(2) << "\n";
  }
  if (!result.record.trajectory.empty()) {
    const int T = static_cast<int>(result.record.trajectory.size());
    const Tensor strip = strip_image(strip_frames(result.record, std::max(1, T / 10)));
    write_png(base.string() + "_strip.png", strip);
  }
}

}  // namespace dymo
