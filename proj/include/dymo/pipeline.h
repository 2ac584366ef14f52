#ifndef DYMO_PIPELINE_H_
#define DYMO_PIPELINE_H_

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dymo/diffusion.h"
#include "dymo/errors.h"
#include "dymo/events.h"
#include "dymo/models.h"
#include "dymo/objectives.h"
#include "dymo/scheduler.h"
#include "dymo/semantic_graph.h"
#include "json.hpp"

namespace dymo {

// How the per-stage eta table becomes eta_t.
enum class EtaMode {
  kConstant,  // eta_t = eta[stage]
  kBeta,      // eta_t = eta[stage] * beta_t
};

struct SamplerConfig {
  static constexpr int kSchemaVersion = 1;

  int steps = 50;
  double beta_start = 0.002;
  double beta_end = 0.4;
  StageConfig stage;
  EtaMode eta_mode = EtaMode::kConstant;

  std::string denoiser_path;
  std::string scorer_path;
  std::string graph_source = "rules";  // rules | llm | file
  std::string graph_file;

  uint64_t seed = 0;
  bool guidance = true;
  bool use_la = true;
  bool use_lr = true;
  bool adaptive_w = true;  // false: fixed 0.5 / 0.5 in the blended stage
  bool polyak = true;      // false: plain step m - eta_t * g
  int fixed_recurrence = -1;  // >= 0 replaces the dynamic r_t
  PreferenceLossForm loss_form = PreferenceLossForm::kNegLogReward;
  bool keep_trajectory = false;

  std::string out_dir;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SamplerConfig from_json(const nlohmann::json& j);
};

// Sets one field from its key=value spelling. Throws ConfigError on an
// unknown key or a malformed value.
void apply_setting(SamplerConfig& config, const std::string& key, const std::string& value);

// "key = value" lines; '#' starts a comment. Throws ConfigError with the line number.
std::vector<std::pair<std::string, std::string>> parse_key_value(const std::string& text);
SamplerConfig load_sampler_config(const std::string& path);
std::string to_key_value(const SamplerConfig& config);

struct SamplerModels {
  const ToyDenoiser* denoiser = nullptr;
  const PreferenceScorer* scorer = nullptr;
  std::string denoiser_hash;
  std::string scorer_hash;
};

struct LoadedModels {
  std::unique_ptr<ToyDenoiser> denoiser;
  std::unique_ptr<PreferenceScorer> scorer;
  std::string denoiser_hash;
  std::string scorer_hash;

  SamplerModels view() const { return {denoiser.get(), scorer.get(), denoiser_hash, scorer_hash}; }
};

// Loads the checkpoints named in the config. A missing file is an InputError.
LoadedModels load_models(const SamplerConfig& config);

struct CycleEntry {
  int cycle = 0;
  Stage stage = Stage::kSemantic;
  double w_a = 0.0;
  double w_r = 0.0;
  std::optional<double> rel_change;
  double l_a = 0.0;
  double l_r = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  double eta = 0.0;
  double step_magnitude = 0.0;
  bool degenerate = false;
};

struct StepEntry {
  int t = 0;
  int r_t = 0;
  // cycles[0] is the main pass; the rest are time-travel repeats.
  std::vector<CycleEntry> cycles;
  EventLog events;
};

struct RunRecord {
  std::string id;
  std::string mode;  // "dymo" or "baseline"
  std::string prompt;
  uint64_t seed = 0;
  nlohmann::ordered_json config;
  std::string denoiser_hash;
  std::string scorer_hash;
  nlohmann::ordered_json graph;
  std::vector<StepEntry> steps;
  int64_t denoiser_calls = 0;
  int64_t scorer_calls = 0;
  int recurrence_evaluations = 0;
  double wall_time_s = 0.0;
  bool completed = false;
  std::string error;
  EventLog events;
  std::string image_hash;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();

  // Not serialized.
  Tensor image;
  std::vector<std::pair<int, Tensor>> trajectory;  // (t, z'_0|t) of each main pass

  // Sum over recorded steps of (1 + r_t).
  int64_t expected_denoiser_calls() const;

  nlohmann::ordered_json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
  // SHA-256 of the key-sorted record without wall time.
  std::string hash() const;
};

// Thrown when sampling hits a non-finite value. Carries the partial record,
// which is also written to out_dir when one is configured.
class SamplingAborted : public NumericalError {
 public:
  SamplingAborted(const std::string& what, RunRecord record)
      : NumericalError(what), record_(std::move(record)) {}
  const RunRecord& record() const { return record_; }

 private:
  RunRecord record_;
};

// Builds and binds the semantic graph the config asks for. `client`
// overrides the environment-configured LLM client.
SemanticGraph resolve_graph(const std::string& prompt, const SamplerConfig& config, const TextEncoding& text,
                            EventLog* events = nullptr, LlmClient* client = nullptr);

struct SampleResult {
  Tensor image;
  RunRecord record;
};

// Guided sampling with dynamic time travel. `graph` (already bound to the
// denoiser's tokens) skips resolve_graph.
SampleResult dymo_sample(const std::string& prompt, const SamplerConfig& config, const SamplerModels& models,
                         const SemanticGraph* graph = nullptr, const std::string& run_id = "");

// The same chain without guidance or time travel.
SampleResult baseline_sample(const std::string& prompt, const SamplerConfig& config, const SamplerModels& models,
                             const std::string& run_id = "");

// Writes <dir>/<id>.png (16-bit), <dir>/<id>.json and, when the trajectory
// was kept, <dir>/<id>_strip.png.
void write_run(const SampleResult& result, const std::string& dir);

// Every `stride`-th main-pass prediction starting at t = T.
std::vector<std::pair<int, Tensor>> strip_frames(const RunRecord& record, int stride);

// Decoded frames side by side, {3, H, W * frames}.
Tensor strip_image(const std::vector<std::pair<int, Tensor>>& frames);

}  // namespace dymo

#endif  // DYMO_PIPELINE_H_
