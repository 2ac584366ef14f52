#include "dymo/objectives.h"

#include <algorithm>
#include <cmath>

#include "dymo/errors.h"

namespace dymo {
namespace {

struct KeyedEdge {
  std::vector<int> a;
  std::vector<int> b;
  EdgeCosine info;
  ad::Var map_a;
  ad::Var map_b;
};

bool key_less(const KeyedEdge& x, const KeyedEdge& y) {
  if (x.a != y.a) return x.a < y.a;
  return x.b < y.b;
}

// Mean of cosines over edges sorted by key. Returns an invalid Var for an
// empty edge set.
ad::Var mean_cosine(std::vector<KeyedEdge>& edges, std::vector<EdgeCosine>* per_edge) {
  if (edges.empty()) return {};
  std::sort(edges.begin(), edges.end(), key_less);
  ad::Var total;
  for (KeyedEdge& e : edges) {
    const ad::Var c = ad::cosine(e.map_a, e.map_b, 1e-12);
    e.info.cosine = c.value().item();
    if (per_edge) per_edge->push_back(e.info);
    total = total.valid() ? total + c : c;
  }
  return ad::scale(total, 1.0 / static_cast<double>(edges.size()));
}

}  // namespace

ad::Var semantic_alignment_loss(const AttentionBundle& bundle, const SemanticGraph& graph, int text_length,
                                EventLog* events, std::vector<EdgeCosine>* per_edge) {
  ad::Tape& tape = *bundle.maps.tape();
  auto node_map = [&](const GraphNode& node) { return token_attention_map(bundle, node.tokens, text_length); };
  auto usable = [&](const GraphNode& node) {
    return std::any_of(node.tokens.begin(), node.tokens.end(), [&](int u) { return u >= 0 && u < text_length; });
  };

  bool any_node = false;
  for (const GraphEntity& e : graph.entities) any_node = any_node || usable(e.node);
  if (!any_node) {
    if (events) events->push_back({"no_graph", "graph has no nodes bound to tokens; L_A = 0"});
    return tape.constant(Tensor({1}));
  }

  std::vector<ad::Var> entity_maps(graph.entities.size());
  for (size_t i = 0; i < graph.entities.size(); ++i) {
    if (usable(graph.entities[i].node)) entity_maps[i] = node_map(graph.entities[i].node);
  }

  std::vector<KeyedEdge> pos;
  for (const auto& [ei, ai] : graph.s_pos) {
    const GraphEntity& e = graph.entities[static_cast<size_t>(ei)];
    const GraphNode& attr = e.attributes[static_cast<size_t>(ai)];
    if (!entity_maps[static_cast<size_t>(ei)].valid() || !usable(attr)) continue;
    pos.push_back({e.node.tokens, attr.tokens, {true, ei, ai, 0.0}, entity_maps[static_cast<size_t>(ei)],
                   node_map(attr)});
  }
  std::vector<KeyedEdge> neg;
  for (const auto& [i, m] : graph.s_neg) {
    const ad::Var& mi = entity_maps[static_cast<size_t>(i)];
    const ad::Var& mm = entity_maps[static_cast<size_t>(m)];
    if (!mi.valid() || !mm.valid()) continue;
    const std::vector<int>& ti = graph.entities[static_cast<size_t>(i)].node.tokens;
    const std::vector<int>& tm = graph.entities[static_cast<size_t>(m)].node.tokens;
    if (ti < tm) {
      neg.push_back({ti, tm, {false, i, m, 0.0}, mi, mm});
    } else {
      neg.push_back({tm, ti, {false, m, i, 0.0}, mm, mi});
    }
  }

  const ad::Var p = mean_cosine(pos, per_edge);
  const ad::Var n = mean_cosine(neg, per_edge);
  if (p.valid() && n.valid()) return ad::neg(p) + n;
  if (p.valid()) return ad::neg(p);
  if (n.valid()) return n;
  return tape.constant(Tensor({1}));
}

std::string to_string(PreferenceLossForm form) {
  switch (form) {
    case PreferenceLossForm::kNegLogReward:
      return "neg_log_reward";
    case PreferenceLossForm::kNegReward:
      return "neg_reward";
    case PreferenceLossForm::kRawReward:
      return "raw_reward";
  }
  return "?";
}

PreferenceLossForm preference_loss_form_from_string(const std::string& name) {
  if (name == "neg_log_reward") return PreferenceLossForm::kNegLogReward;
  if (name == "neg_reward") return PreferenceLossForm::kNegReward;
  if (name == "raw_reward") return PreferenceLossForm::kRawReward;
  throw ConfigError("unknown preference loss form '" + name + "' (neg_log_reward, neg_reward, raw_reward)");
}

ad::Var preference_loss_from_cosine(const ad::Var& cos, double tau, PreferenceLossForm form) {
  switch (form) {
    case PreferenceLossForm::kNegLogReward:
      return ad::scale(cos, -tau);
    case PreferenceLossForm::kNegReward:
      return ad::neg(ad::exp(ad::scale(cos, tau)));
    case PreferenceLossForm::kRawReward:
      return ad::exp(ad::scale(cos, tau));
  }
  throw ConfigError("bad preference loss form");
}

ad::Var preference_loss(const ad::Var& image, double log_snr, const TextEncoding& text, const PreferenceScorer& scorer,
                        PreferenceLossForm form) {
  return preference_loss_from_cosine(preference_cosine(image, log_snr, text, scorer), scorer.tau(), form);
}

ObjectiveValue make_objective(double w_a, double l_a, double w_r, double l_r) {
  ObjectiveValue v;
  v.w_a = w_a;
  v.l_a = l_a;
  v.w_r = w_r;
  v.l_r = l_r;
  v.total = w_a * l_a + w_r * l_r;
  return v;
}

double preference_loss(const Tensor& image, const std::string& prompt, double log_snr, const PreferenceScorer& scorer,
                       PreferenceLossForm form) {
  ad::Tape tape;
  return preference_loss(tape.constant(image), log_snr, scorer.encode(prompt), scorer, form).value().item();
}

GuidanceGradient gradient(const std::function<ad::Var(const ad::Var& z)>& objective, const Tensor& z) {
  ad::Tape tape;
  const ad::Var zv = tape.variable(z);
  const ad::Var f = objective(zv);
  if (f.size() != 1) throw InputError("gradient: objective must be a scalar");
  GuidanceGradient out;
  out.value = f.value().item();
  if (!std::isfinite(out.value)) throw NumericalError("objective value is not finite");
  if (f.requires_grad()) {
    tape.backward(f);
    out.g = zv.grad();
  } else {
    out.g = Tensor::like(z);
  }
  out.norm = std::sqrt(dot(out.g.data(), out.g.data()));
  if (!std::isfinite(out.norm)) throw NumericalError("guidance gradient has non-finite entries");
  return out;
}

CombinedResult combined_loss(const Tensor& z_t, int t, const NoiseSchedule& schedule, const ObjectiveInputs& inputs,
                             const ObjectiveModels& models, const WeightFn& weights, const CombinedOptions& opts,
                             EventLog* events) {
  if (!models.denoiser || !models.scorer) throw InputError("combined_loss needs a denoiser and a scorer");
  CombinedResult res;
  res.grad.value = 0.0;
  res.grad.g = gradient(
      [&](const ad::Var& z) {
        ad::Tape& tape = *z.tape();
        const ScoreOutput out = denoise(z, t, inputs.denoiser_text, *models.denoiser, schedule);
        const ad::Var z0 = predict_clean(z, out.score, t, schedule);
        res.eps = out.eps.value();
        res.score = out.score.value();
        res.z0_pred = z0.value();
        const auto [w_a, w_r] = weights(res.z0_pred);
        if (w_a < 0 || w_r < 0) throw InputError("objective weights must be >= 0");
        ObjectiveValue& ov = res.objective;
        ov.w_a = w_a;
        ov.w_r = w_r;

        ad::Var total;
        if (!(opts.skip_zero_weight && w_a == 0.0)) {
          const ad::Var la = semantic_alignment_loss(out.attention, inputs.graph, inputs.denoiser_text.length(),
                                                     events, &ov.per_edge);
          ov.l_a = la.value().item();
          total = ad::scale(la, w_a);
          if (w_a != 0.0) res.grad.provenance.push_back("L_A");
        }
        if (!(opts.skip_zero_weight && w_r == 0.0)) {
          const ad::Var lr = preference_loss(decode(z0), noise_level(schedule, t), inputs.scorer_text,
                                             *models.scorer, opts.form);
          res.scorer_called = true;
          ov.l_r = lr.value().item();
          const ad::Var term = ad::scale(lr, w_r);
          total = total.valid() ? total + term : term;
          if (w_r != 0.0) res.grad.provenance.push_back("L_R");
        }
        ov.total = w_a * ov.l_a + w_r * ov.l_r;
        return total.valid() ? total : tape.constant(Tensor({1}));
      },
      z_t).g;
  res.grad.norm = std::sqrt(dot(res.grad.g.data(), res.grad.g.data()));
  res.grad.value = res.objective.total;
  return res;
}

CombinedResult combined_loss(const Tensor& z_t, int t, const NoiseSchedule& schedule, const ObjectiveInputs& inputs,
                             const ObjectiveModels& models, double w_a, double w_r, const CombinedOptions& opts,
                             EventLog* events) {
  return combined_loss(
      z_t, t, schedule, inputs, models, [=](const Tensor&) { return std::pair{w_a, w_r}; }, opts, events);
}

}  // namespace dymo
