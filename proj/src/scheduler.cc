#include "dymo/scheduler.h"

#include <cmath>

#include "dymo/errors.h"

namespace dymo {

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::kSemantic:
      return "semantic";
    case Stage::kBlended:
      return "blended";
    case Stage::kRefine:
      return "refine";
  }
  return "?";
}

double StageTable::at(Stage s) const {
  switch (s) {
    case Stage::kSemantic:
      return semantic;
    case Stage::kBlended:
      return blended;
    case Stage::kRefine:
      return refine;
  }
  return 0.0;
}

void StageConfig::validate() const {
  if (!(t1_frac < 1.0)) throw ConfigError("t1_frac must be < 1");
  if (!(t2_frac > 0.0)) throw ConfigError("t2_frac must be > 0");
  if (!(t1_frac > t2_frac)) throw ConfigError("t1_frac must be > t2_frac");
  if (!(k > 0.0)) throw ConfigError("k must be > 0");
  if (r_max < 0) throw ConfigError("r_max must be >= 0");
  for (double v : {eta.semantic, eta.blended, eta.refine}) {
    if (!(v >= 0.0)) throw ConfigError("eta must be >= 0");
  }
  for (double v : {h.semantic, h.blended, h.refine}) {
    if (!(v >= 0.0)) throw ConfigError("h must be >= 0");
  }
}

namespace {
nlohmann::ordered_json table_json(const StageTable& t) {
  return {{"semantic", t.semantic}, {"blended", t.blended}, {"refine", t.refine}};
}
StageTable table_from(const nlohmann::json& j) {
  if (j.is_number()) {
    const double v = j.get<double>();
    return {v, v, v};
  }
  return {j.at("semantic").get<double>(), j.at("blended").get<double>(), j.at("refine").get<double>()};
}
}  // namespace

nlohmann::ordered_json StageConfig::to_json() const {
  return {{"t1_frac", t1_frac}, {"t2_frac", t2_frac},       {"k", k},
          {"eta", table_json(eta)}, {"h", table_json(h)},   {"r_max", r_max},
          {"z0_prev_latest", z0_prev_latest}};
}

StageConfig StageConfig::from_json(const nlohmann::json& j) {
  StageConfig c;
  c.t1_frac = j.at("t1_frac");
  c.t2_frac = j.at("t2_frac");
  c.k = j.at("k");
  c.eta = table_from(j.at("eta"));
  c.h = table_from(j.at("h"));
  c.r_max = j.at("r_max");
  c.z0_prev_latest = j.value("z0_prev_latest", true);
  c.validate();
  return c;
}

Stage stage_of(int t, int T, const StageConfig& config) {
  if (T < 1 || t < 1 || t > T) throw IndexError("stage_of: t = " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  const double u = static_cast<double>(t) / static_cast<double>(T);
  if (u >= config.t1_frac) return Stage::kSemantic;
  if (u >= config.t2_frac) return Stage::kBlended;
  return Stage::kRefine;
}

double adaptive_weight(double rel_change, double k) { return 1.0 - std::exp(-k * rel_change); }

WeightDecision stage_weights(int t, int T, const Tensor& z0_now, const Tensor* z0_prev, const StageConfig& config,
                             EventLog* events) {
  WeightDecision d;
  d.stage = stage_of(t, T, config);
  switch (d.stage) {
    case Stage::kSemantic:
      d.w_a = 1.0;
      d.w_r = 0.0;
      return d;
    case Stage::kRefine:
      d.w_a = 0.0;
      d.w_r = 1.0;
      return d;
    case Stage::kBlended:
      break;
  }
  if (!z0_prev) throw InputError("stage_weights: blended stage at t = " + std::to_string(t) + " needs z0_prev");
  if (!z0_prev->same_shape(z0_now)) throw InputError("stage_weights: z0_prev shape mismatch");
  double diff = 0.0, base = 0.0;
  for (size_t i = 0; i < z0_now.size(); ++i) {
    const double e = z0_now[i] - (*z0_prev)[i];
    diff += e * e;
    base += (*z0_prev)[i] * (*z0_prev)[i];
  }
  base = std::sqrt(base);
  double rel = 0.0;
  if (base < 1e-12) {
    if (events) events->push_back({"degenerate_z0_prev", "|z0_prev| < 1e-12; rel_change taken as 0", t});
  } else {
    rel = std::sqrt(diff) / base;
  }
  d.rel_change = rel;
  d.w_a = adaptive_weight(rel, config.k);
  d.w_r = 1.0 - d.w_a;
  return d;
}

double polyak_scale(double eta, double score_norm, double grad_norm) {
  if (!(grad_norm > 0.0)) throw InputError("polyak_scale: grad_norm must be > 0");
  return eta * score_norm / (grad_norm * grad_norm);
}

int recurrence_count(double h, double grad_norm, int r_max) {
  if (h < 0 || r_max < 0) throw InputError("recurrence_count: h and r_max must be >= 0");
  const double r = std::floor(h * grad_norm);
  if (!(r < static_cast<double>(r_max))) return r_max;
  return static_cast<int>(r);
}

}  // namespace dymo
