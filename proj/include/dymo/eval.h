#ifndef DYMO_EVAL_H_
#define DYMO_EVAL_H_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "dymo/pipeline.h"
#include "json.hpp"

namespace dymo {

// One sampler configuration of an evaluation. Names:
//   baseline, full, no_LA, no_LR, no_adaptive_w, no_polyak,
//   fixed_recurrence(r), dynamic_recurrence
struct Variant {
  std::string name;

  static Variant parse(const std::string& name);  // throws ConfigError
  bool guided() const { return name != "baseline"; }
  SamplerConfig apply(SamplerConfig base) const;
};

struct AblationSpec {
  std::vector<std::string> variants;
  std::vector<std::string> prompts;
  std::vector<uint64_t> seeds;
  std::vector<std::string> metrics{"preference", "semantic", "semantic_fraction", "l_a_final", "nfe",
                                   "wall_time_s"};

  // Duplicate or unknown variants or metrics, empty prompt/seed lists.
  void validate() const;
};

// Mixed multi-object captions from the dataset grammar, deterministic per seed.
std::vector<std::string> default_prompts(int count, uint64_t seed = 2024, int min_shapes = 2);

struct Stats {
  double mean = 0.0;
  double std = 0.0;
  int n = 0;
};

Stats stats_of(const std::vector<double>& xs);

// Metric names of a report. l_a_final, nfe and wall_time_s are better when lower.
const std::vector<std::string>& known_metrics();
bool higher_is_better(const std::string& metric);

// Metric value of a completed record, if it has one. nfe and wall_time_s
// come from the record itself; the rest from record.metrics.
std::optional<double> metric_of(const RunRecord& record, const std::string& metric);

// Paired over index; a win is a[i] better than b[i].
struct SignTest {
  int wins = 0;
  int losses = 0;
  int ties = 0;
  double mean_delta = 0.0;  // mean of a - b
  // One-sided P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
  double p_value = 1.0;
};

SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b, bool higher_better = true);

struct Comparison {
  std::string variant;
  std::string reference;
  std::string metric;
  SignTest test;
  bool significant = false;  // p < alpha
  std::vector<std::pair<std::string, std::string>> pairs;  // (variant run, reference run)
};

struct VariantSummary {
  std::string variant;
  std::map<std::string, Stats> metrics;
  std::vector<std::string> run_ids;
  std::vector<std::string> failed_ids;
};

struct EvalReport {
  std::string kind;
  double alpha = 0.05;
  std::vector<VariantSummary> variants;
  std::vector<Comparison> comparisons;
  std::vector<std::string> errors;

  const VariantSummary& variant(const std::string& name) const;
  const Comparison* comparison(const std::string& variant, const std::string& reference,
                               const std::string& metric) const;
  bool complete() const;
  nlohmann::ordered_json to_json() const;
  // variant,metric,mean,std,n,failed
  std::string to_csv() const;
  // variant,reference,metric,wins,losses,ties,mean_delta,p_value,significant
  std::string comparisons_csv() const;
  // SHA-256 of to_json().
  std::string hash() const;
};

struct EvalOptions {
  int workers = 0;  // 0: hardware concurrency
  // Records go to <out_dir>/runs/<id>.json (plus images when write_images);
  // empty keeps everything in memory.
  std::string out_dir;
  bool write_images = false;
  std::string id_prefix;
  std::function<void(int done, int total)> progress;
};

// Stores into record.metrics: preference (toy score at t = 0), semantic (1
// when the detector confirms every captioned object), semantic_fraction and,
// for guided runs, l_a_final (L_A of the last main pass).
void score_run(RunRecord& record, const Tensor& image, const SamplerModels& models);

// Runs every (variant, prompt, seed) with a bounded worker pool. Run ids are
// <prefix><variant>-p<prompt index>-s<seed>; a prefix ends in '-'. Failed runs come back with
// completed == false and the error set.
std::vector<RunRecord> run_grid(const std::vector<Variant>& variants, const std::vector<std::string>& prompts,
                                const std::vector<uint64_t>& seeds, const SamplerConfig& base,
                                const SamplerModels& models, const EvalOptions& opts);

// Pure function of stored records: summaries plus paired sign tests of each
// (variant, reference, metric) triple, matched on (prompt, seed).
EvalReport build_report(const std::string& kind, const std::vector<RunRecord>& records,
                        const std::vector<std::string>& variant_order,
                        const std::vector<std::tuple<std::string, std::string, std::string>>& comparisons,
                        double alpha = 0.05);

// Every RunRecord json in dir, sorted by id.
std::vector<RunRecord> load_records(const std::string& dir);

// Compares each variant with full on every metric, and full with baseline.
EvalReport run_ablation(const AblationSpec& spec, const SamplerConfig& base, const SamplerModels& models,
                        const EvalOptions& opts = {}, std::vector<RunRecord>* records = nullptr);

// Fixed budgets plus the dynamic schedule over the spec's prompts and seeds.
EvalReport run_recurrence_study(const std::vector<int>& budgets, const AblationSpec& spec, const SamplerConfig& base,
                                const SamplerModels& models, const EvalOptions& opts = {},
                                std::vector<RunRecord>* records = nullptr);

// param "t1_t2": each grid point is {t1_frac, t2_frac}; param "k": {k}.
// Invalid points become per-cell errors in the report.
struct SensitivityCell {
  std::vector<double> point;
  std::optional<std::string> error;
  std::map<std::string, Stats> metrics;
  std::vector<std::string> run_ids;
};

struct SensitivityReport {
  std::string param;
  std::vector<SensitivityCell> cells;
  // (max - min) / |mean| of each metric's cell means over valid cells.
  std::map<std::string, double> relative_variation;
  nlohmann::ordered_json to_json() const;
};

SensitivityReport run_sensitivity(const std::string& param, const std::vector<std::vector<double>>& grid,
                                  const AblationSpec& spec, const SamplerConfig& base, const SamplerModels& models,
                                  const EvalOptions& opts = {});

// Per run: <id>_curves.svg (weights, |g|, r_t, losses against t) and, when
// the trajectory was kept, <id>_strip.png with T/5 evenly spaced predictions.
// An empty list writes nothing.
// Returns the written paths.
std::vector<std::string> plot_trajectories(const std::vector<RunRecord>& records, const std::string& out_dir);

// Steps t of the strip: every 5th outer step starting at t = T.
std::vector<int> strip_steps(int T);

// <dir>/report.json, report.csv, comparisons.csv.
void write_report(const EvalReport& report, const std::string& dir);

}  // namespace dymo

#endif  // DYMO_EVAL_H_
