#include "dymo/objectives.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>

#include "doctest.h"
#include "dymo/errors.h"
#include "dymo/grammar.h"
#include "fd_oracle.h"

namespace dymo {
namespace {

using testing::central_difference;
using testing::gaussian_tensor;
using testing::random_tensor;
using testing::relative_error;

constexpr int kTokens = 16;

Vocabulary vocab() { return Vocabulary::from_grammar(Grammar::builtin()); }

AttentionBundle bundle_of(const ad::Var& maps, int h, int w) {
  AttentionBundle b;
  b.maps = maps;
  b.height = h;
  b.width = w;
  b.tokens = maps.shape()[1];
  b.head_count = 1;
  b.layer_ids = {0};
  return b;
}

Tensor column_maps(int positions, const std::vector<std::pair<int, std::vector<double>>>& columns) {
  Tensor m({positions, kTokens});
  for (const auto& [u, values] : columns) {
    for (int p = 0; p < positions; ++p) m.at(p, u) = values[static_cast<size_t>(p)];
  }
  return m;
}

SemanticGraph graph_of(const std::string& prompt) { return extract_graph_rules(prompt, Grammar::builtin()); }

int text_length(const std::string& prompt) { return encode_text(prompt, vocab(), kTokens).length(); }

double l_a(const Tensor& maps, const SemanticGraph& g, int len, int h = 2, int w = 2) {
  ad::Tape tape;
  return semantic_alignment_loss(bundle_of(tape.constant(maps), h, w), g, len).value().item();
}

TEST_CASE("single positive edge with identical maps gives -1") {
  const std::string prompt = "a red circle";
  const Tensor maps = column_maps(4, {{1, {0.1, 0.2, 0.3, 0.4}}, {2, {0.1, 0.2, 0.3, 0.4}}});
  CHECK(l_a(maps, graph_of(prompt), text_length(prompt)) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("single negative edge with disjoint maps gives 0") {
  const std::string prompt = "a circle and a square";
  const Tensor maps = column_maps(4, {{1, {0.5, 0.5, 0.0, 0.0}}, {4, {0.0, 0.0, 0.3, 0.7}}});
  CHECK(l_a(maps, graph_of(prompt), text_length(prompt)) == 0.0);
}

TEST_CASE("constructed maps give pos cosines 0.9, 0.8 and neg cosine 0.3") {
  // a red circle and a blue square: red=1 circle=2 blue=5 square=6.
  const std::string prompt = "a red circle and a blue square";
  const double s91 = std::sqrt(0.91), s19 = std::sqrt(0.19);
  const std::vector<double> circle{1, 0, 0, 0};
  const std::vector<double> square{0.3, s91, 0, 0};
  const std::vector<double> red{0.9, 0, s19, 0};
  const std::vector<double> blue{0.8 * 0.3, 0.8 * s91, 0, 0.6};
  const Tensor maps = column_maps(4, {{1, red}, {2, circle}, {5, blue}, {6, square}});
  ad::Tape tape;
  std::vector<EdgeCosine> edges;
  const double v = semantic_alignment_loss(bundle_of(tape.constant(maps), 2, 2), graph_of(prompt),
                                           text_length(prompt), nullptr, &edges)
                       .value()
                       .item();
  CHECK(v == doctest::Approx(-0.55).epsilon(1e-12));
  REQUIRE(edges.size() == 3);
  CHECK(edges[0].cosine == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(edges[1].cosine == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(!edges[2].positive);
  CHECK(edges[2].cosine == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("empty edge sets contribute zero") {
  // One entity, no attributes: both sets empty.
  const Tensor maps = column_maps(4, {{1, {0.1, 0.2, 0.3, 0.4}}});
  CHECK(l_a(maps, graph_of("a circle"), 2) == 0.0);
  // Single entity with attribute: only the positive term.
  const Tensor maps2 = column_maps(4, {{1, {1, 0, 0, 0}}, {2, {1, 1, 0, 0}}});
  CHECK(l_a(maps2, graph_of("a red circle"), 3) == doctest::Approx(-1.0 / std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("graph without bound nodes returns 0 and logs no_graph") {
  SemanticGraph g = graph_of("a red circle");
  for (GraphEntity& e : g.entities) e.node.tokens.clear();
  ad::Tape tape;
  EventLog events;
  const Tensor maps = column_maps(4, {{1, {1, 0, 0, 0}}});
  const ad::Var v = semantic_alignment_loss(bundle_of(tape.constant(maps), 2, 2), g, 3, &events);
  CHECK(v.value().item() == 0.0);
  REQUIRE(events.size() == 1);
  CHECK(events[0].kind == "no_graph");
  SemanticGraph empty;
  CHECK(semantic_alignment_loss(bundle_of(tape.constant(maps), 2, 2), empty, 3).value().item() == 0.0);
}

Tensor random_maps(std::mt19937_64& rng, int positions) { return random_tensor({positions, kTokens}, rng, 0.0, 1.0); }

SemanticGraph permuted(const SemanticGraph& g, const std::vector<int>& order) {
  SemanticGraph out = g;
  out.entities.clear();
  for (int i : order) out.entities.push_back(g.entities[static_cast<size_t>(i)]);
  build_edges(out);
  return out;
}

TEST_CASE("L_A is exactly invariant under entity and edge permutation") {
  std::mt19937_64 rng(1);
  const std::string prompt = "a small red circle and a large blue square and a green triangle";
  const SemanticGraph g = graph_of(prompt);
  REQUIRE(g.entity_count() == 3);
  const int len = text_length(prompt);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor maps = random_maps(rng, 16);
    const double ref = l_a(maps, g, len, 4, 4);
    std::vector<int> order{0, 1, 2};
    while (std::next_permutation(order.begin(), order.end())) {
      CHECK(std::bit_cast<uint64_t>(l_a(maps, permuted(g, order), len, 4, 4)) == std::bit_cast<uint64_t>(ref));
    }
    SemanticGraph shuffled = g;
    std::shuffle(shuffled.s_pos.begin(), shuffled.s_pos.end(), rng);
    std::shuffle(shuffled.s_neg.begin(), shuffled.s_neg.end(), rng);
    CHECK(std::bit_cast<uint64_t>(l_a(maps, shuffled, len, 4, 4)) == std::bit_cast<uint64_t>(ref));
  }
}

TEST_CASE("L_A is invariant under positive rescaling of one map") {
  std::mt19937_64 rng(2);
  const std::string prompt = "a red circle and a blue square";
  const SemanticGraph g = graph_of(prompt);
  const int len = text_length(prompt);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor maps = random_maps(rng, 16);
    const double ref = l_a(maps, g, len, 4, 4);
    for (int u : {1, 2, 5, 6}) {
      // Power-of-two scales are exact in binary floating point.
      Tensor m2 = maps;
      for (int p = 0; p < 16; ++p) m2.at(p, u) *= 0.25;
      CHECK(std::bit_cast<uint64_t>(l_a(m2, g, len, 4, 4)) == std::bit_cast<uint64_t>(ref));
      // Other scales agree to rounding.
      Tensor mc = maps;
      const double c = scale(rng);
      for (int p = 0; p < 16; ++p) mc.at(p, u) *= c;
      CHECK(std::abs(l_a(mc, g, len, 4, 4) - ref) < 1e-14);
    }
  }
}

TEST_CASE("descent on L_A separates attribute and entity maps") {
  std::mt19937_64 rng(3);
  const std::string prompt = "a red circle and a blue square";
  const SemanticGraph g = graph_of(prompt);
  const int len = text_length(prompt);
  Tensor logits = gaussian_tensor({16, kTokens}, rng);
  auto margin = [&](const Tensor& lg) {
    ad::Tape tape;
    std::vector<EdgeCosine> edges;
    semantic_alignment_loss(bundle_of(ad::softmax_cols(tape.constant(lg)), 4, 4), g, len, nullptr, &edges);
    double pos = 0, neg = 0;
    int np = 0, nn = 0;
    for (const EdgeCosine& e : edges) (e.positive ? (++np, pos) : (++nn, neg)) += e.cosine;
    return pos / np - neg / nn;
  };
  const double start = margin(logits);
  double prev = start;
  for (int step = 0; step < 100; ++step) {
    const GuidanceGradient gr = gradient(
        [&](const ad::Var& lg) { return semantic_alignment_loss(bundle_of(ad::softmax_cols(lg), 4, 4), g, len); },
        logits);
    for (size_t i = 0; i < logits.size(); ++i) logits[i] -= 0.5 * gr.g[i];
    const double now = margin(logits);
    CHECK(now > prev);
    prev = now;
  }
  CHECK(prev > start + 0.5);
}

TEST_CASE("preference loss as a function of the cosine") {
  ad::Tape tape;
  const double tau = 7.0;
  auto loss_at = [&](double c, PreferenceLossForm f) {
    Tensor t({1});
    t[0] = c;
    return preference_loss_from_cosine(tape.constant(t), tau, f).value().item();
  };
  CHECK(loss_at(1.0, PreferenceLossForm::kNegLogReward) == -tau);
  CHECK(loss_at(0.0, PreferenceLossForm::kNegLogReward) == 0.0);
  CHECK(loss_at(0.0, PreferenceLossForm::kRawReward) == 1.0);
  CHECK(loss_at(1.0, PreferenceLossForm::kNegReward) == doctest::Approx(-std::exp(tau)));

  // d loss / d cos = -tau, against finite differences.
  for (double c : {-0.7, -0.1, 0.0, 0.35, 0.9}) {
    Tensor x({1});
    x[0] = c;
    const ad::Var v = tape.variable(x);
    tape.backward(preference_loss_from_cosine(v, tau, PreferenceLossForm::kNegLogReward));
    const Tensor fd = central_difference(
        [&](const Tensor& cc) { return loss_at(cc[0], PreferenceLossForm::kNegLogReward); }, x, 1e-6);
    CHECK(v.grad()[0] == -tau);
    CHECK(fd[0] == doctest::Approx(-tau).epsilon(1e-8));
  }
  // Strictly decreasing in the cosine.
  for (PreferenceLossForm f : {PreferenceLossForm::kNegLogReward, PreferenceLossForm::kNegReward}) {
    double prev = loss_at(-1.0, f);
    for (int i = 1; i <= 200; ++i) {
      const double now = loss_at(-1.0 + 0.01 * i, f);
      CHECK(now < prev);
      prev = now;
    }
  }
  CHECK(preference_loss_form_from_string("raw_reward") == PreferenceLossForm::kRawReward);
  CHECK_THROWS_AS(preference_loss_form_from_string("bogus"), ConfigError);
}

TEST_CASE("objective identity") {
  const ObjectiveValue v = make_objective(0.6, -0.5, 0.4, -1.2);
  CHECK(v.total == doctest::Approx(-0.78).epsilon(1e-15));
  CHECK(v.total == 0.6 * -0.5 + 0.4 * -1.2);
  CHECK(make_objective(1, -0.3, 0, -2).total == -0.3);
  CHECK(make_objective(0, -0.3, 1, -2).total == -2);
}

TEST_CASE("gradient of simple objectives") {
  std::mt19937_64 rng(4);
  const Tensor z = gaussian_tensor({3, 4, 4}, rng);
  const GuidanceGradient c = gradient([](const ad::Var& v) { return v.tape()->constant(Tensor({1}, 2.0)); }, z);
  CHECK(c.norm == 0.0);
  const GuidanceGradient q = gradient([](const ad::Var& v) { return ad::scale(ad::dot(v, v), 0.5); }, z);
  for (size_t i = 0; i < z.size(); ++i) CHECK(q.g[i] == doctest::Approx(z[i]).epsilon(1e-15));
  CHECK(q.norm == doctest::Approx(std::sqrt(dot(z.data(), z.data()))).epsilon(1e-12));
  CHECK_THROWS_AS(gradient([](const ad::Var& v) { return ad::log(ad::add_scalar(ad::scale(ad::sum(v), 0.0), -1.0)); }, z),
                  NumericalError);
}

struct Stack {
  ToyDenoiser denoiser{DenoiserConfig{}, vocab(), 11};
  PreferenceScorer scorer{ScorerConfig{}, vocab(), 12};
  ObjectiveModels models() const { return {&denoiser, &scorer}; }
  ObjectiveInputs inputs(const std::string& prompt) const {
    const TextEncoding text = denoiser.encode(prompt);
    return {text, scorer.encode(prompt), bind_tokens(graph_of(prompt), text)};
  }
};

TEST_CASE("combined loss respects the weights and the identity") {
  const Stack stack;
  const NoiseSchedule s = make_linear_schedule(50, 0.002, 0.4);
  std::mt19937_64 rng(5);
  const Tensor z = gaussian_tensor({3, 8, 8}, rng);
  const ObjectiveInputs in = stack.inputs("a red circle and a blue square");
  const CombinedResult a = combined_loss(z, 30, s, in, stack.models(), 1.0, 0.0);
  CHECK(a.objective.total == a.objective.l_a);
  CHECK(a.grad.provenance == std::vector<std::string>{"L_A"});
  const CombinedResult r = combined_loss(z, 30, s, in, stack.models(), 0.0, 1.0);
  CHECK(r.objective.total == r.objective.l_r);
  CHECK(r.objective.l_a == a.objective.l_a);
  const CombinedResult m = combined_loss(z, 30, s, in, stack.models(), 0.6, 0.4);
  CHECK(m.objective.total == 0.6 * m.objective.l_a + 0.4 * m.objective.l_r);
  CHECK(m.objective.l_a >= -2.0);
  CHECK(m.objective.l_a <= 2.0);
  CHECK(m.grad.norm == doctest::Approx(std::sqrt(dot(m.grad.g.data(), m.grad.g.data()))).epsilon(1e-9));
  CHECK(m.grad.value == m.objective.total);
}

TEST_CASE("combined loss gradient matches finite differences on 8x8") {
  const Stack stack;
  const NoiseSchedule s = make_linear_schedule(50, 0.002, 0.4);
  std::mt19937_64 rng(6);
  for (const auto& [prompt, t] : std::vector<std::pair<std::string, int>>{
           {"a red circle and a blue square", 35}, {"a small green triangle", 10}, {"a yellow square", 45}}) {
    const Tensor z = gaussian_tensor({3, 8, 8}, rng);
    const ObjectiveInputs in = stack.inputs(prompt);
    const CombinedResult res = combined_loss(z, t, s, in, stack.models(), 0.3, 0.7);
    const Tensor fd = central_difference(
        [&](const Tensor& zz) { return combined_loss(zz, t, s, in, stack.models(), 0.3, 0.7).objective.total; }, z,
        1e-5);
    CHECK(relative_error(res.grad.g, fd) < 1e-4);
  }
}

}  // namespace
}  // namespace dymo
