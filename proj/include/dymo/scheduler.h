#ifndef DYMO_SCHEDULER_H_
#define DYMO_SCHEDULER_H_

#include <optional>
#include <string>

#include "dymo/events.h"
#include "dymo/tensor.h"
#include "json.hpp"

namespace dymo {

enum class Stage { kSemantic = 0, kBlended = 1, kRefine = 2 };

std::string to_string(Stage stage);

// One value per stage.
struct StageTable {
  double semantic = 0.0;
  double blended = 0.0;
  double refine = 0.0;

  double at(Stage s) const;
  friend bool operator==(const StageTable&, const StageTable&) = default;
};

struct StageConfig {
  double t1_frac = 0.8;
  double t2_frac = 0.5;
  double k = 10.0;
  StageTable eta{0.5, 1.0, 1.0};
  StageTable h{1.0, 1.0, 1.0};
  int r_max = 10;
  // Inside a recurrence loop, compare against the most recent clean
  // prediction (true) or the one from the previous outer step (false).
  bool z0_prev_latest = true;

  // Throws ConfigError naming the offending field.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static StageConfig from_json(const nlohmann::json& j);
  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct WeightDecision {
  double w_a = 1.0;
  double w_r = 0.0;
  Stage stage = Stage::kSemantic;
  std::optional<double> rel_change;
};

Stage stage_of(int t, int T, const StageConfig& config);

// Blended-stage weight 1 - exp(-k * rel_change).
double adaptive_weight(double rel_change, double k);

// Throws InputError when the blended stage is reached without z0_prev.
WeightDecision stage_weights(int t, int T, const Tensor& z0_now, const Tensor* z0_prev, const StageConfig& config,
                             EventLog* events = nullptr);

// eta * score_norm / grad_norm^2.
double polyak_scale(double eta, double score_norm, double grad_norm);

// min(floor(h * grad_norm), r_max).
int recurrence_count(double h, double grad_norm, int r_max);

}  // namespace dymo

#endif  // DYMO_SCHEDULER_H_
