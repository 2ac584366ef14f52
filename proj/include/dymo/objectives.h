#ifndef DYMO_OBJECTIVES_H_
#define DYMO_OBJECTIVES_H_

#include <functional>
#include <string>
#include <vector>

#include "dymo/autodiff.h"
#include "dymo/events.h"
#include "dymo/models.h"
#include "dymo/semantic_graph.h"

namespace dymo {

struct EdgeCosine {
  bool positive = true;
  // Positive edge: (entity, attribute index). Negative edge: (entity, entity).
  int first = 0;
  int second = 0;
  double cosine = 0.0;
};

struct ObjectiveValue {
  double total = 0.0;
  double l_a = 0.0;
  double l_r = 0.0;
  double w_a = 0.0;
  double w_r = 0.0;
  std::vector<EdgeCosine> per_edge;
};

// -mean_{S_pos} cos(M_s, M_l) + mean_{S_neg} cos(M_s, M_l). Nodes spanning
// several tokens use token_attention_map over their tokens. An empty edge set
// contributes 0; a graph without bound nodes yields 0 and a "no_graph" event.
// Edges are summed in a canonical order keyed by token positions, so the
// value does not depend on entity or edge order.
ad::Var semantic_alignment_loss(const AttentionBundle& bundle, const SemanticGraph& graph, int text_length,
                                EventLog* events = nullptr, std::vector<EdgeCosine>* per_edge = nullptr);

enum class PreferenceLossForm {
  kNegLogReward,  // -tau * cos
  kNegReward,     // -exp(tau * cos)
  kRawReward,     // +exp(tau * cos), the reward itself
};

std::string to_string(PreferenceLossForm form);
PreferenceLossForm preference_loss_form_from_string(const std::string& name);

// The loss as a function of the tower cosine.
ad::Var preference_loss_from_cosine(const ad::Var& cos, double tau, PreferenceLossForm form);

ad::Var preference_loss(const ad::Var& image, double log_snr, const TextEncoding& text, const PreferenceScorer& scorer,
                        PreferenceLossForm form = PreferenceLossForm::kNegLogReward);
double preference_loss(const Tensor& image, const std::string& prompt, double log_snr, const PreferenceScorer& scorer,
                       PreferenceLossForm form = PreferenceLossForm::kNegLogReward);

// total = w_a * l_a + w_r * l_r.
ObjectiveValue make_objective(double w_a, double l_a, double w_r, double l_r);

struct GuidanceGradient {
  Tensor g;
  double norm = 0.0;
  double value = 0.0;
  std::vector<std::string> provenance;
};

// Gradient of a scalar objective built on z's tape. Throws NumericalError
// when the value or any gradient entry is not finite.
GuidanceGradient gradient(const std::function<ad::Var(const ad::Var& z)>& objective, const Tensor& z);

struct ObjectiveModels {
  const ToyDenoiser* denoiser = nullptr;
  const PreferenceScorer* scorer = nullptr;
};

struct ObjectiveInputs {
  TextEncoding denoiser_text;
  TextEncoding scorer_text;
  SemanticGraph graph;
};

struct CombinedOptions {
  PreferenceLossForm form = PreferenceLossForm::kNegLogReward;
  // Skip the forward pass of a term whose weight is zero.
  bool skip_zero_weight = false;
};

// Everything one guided evaluation at (z_t, t) produces.
struct CombinedResult {
  ObjectiveValue objective;
  GuidanceGradient grad;
  Tensor eps;      // raw noise prediction
  Tensor score;    // -eps / sigma_t
  Tensor z0_pred;  // one-step clean prediction
  bool scorer_called = false;
};

// Picks (w_a, w_r) from the clean prediction; called between the forward
// pass and the loss assembly.
using WeightFn = std::function<std::pair<double, double>(const Tensor& z0_pred)>;

// denoise -> predict_clean -> decode -> both losses -> gradient wrt z_t, on one tape.
CombinedResult combined_loss(const Tensor& z_t, int t, const NoiseSchedule& schedule, const ObjectiveInputs& inputs,
                             const ObjectiveModels& models, const WeightFn& weights, const CombinedOptions& opts = {},
                             EventLog* events = nullptr);
CombinedResult combined_loss(const Tensor& z_t, int t, const NoiseSchedule& schedule, const ObjectiveInputs& inputs,
                             const ObjectiveModels& models, double w_a, double w_r, const CombinedOptions& opts = {},
                             EventLog* events = nullptr);

}  // namespace dymo

#endif  // DYMO_OBJECTIVES_H_
