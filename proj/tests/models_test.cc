#include "dymo/models.h"

#include <bit>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "dymo/errors.h"
#include "dymo/grammar.h"
#include "dymo/training.h"
#include "fd_oracle.h"

namespace dymo {
namespace {

using testing::central_difference;
using testing::gaussian_tensor;
using testing::random_tensor;
using testing::relative_error;

Vocabulary vocab() { return Vocabulary::from_grammar(Grammar::builtin()); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<uint64_t>(a[i]) != std::bit_cast<uint64_t>(b[i])) return false;
  }
  return true;
}

TEST_CASE("denoise is deterministic") {
  const ToyDenoiser model(DenoiserConfig{}, vocab(), 3);
  const NoiseSchedule s = make_linear_schedule(50, 0.002, 0.4);
  std::mt19937_64 rng(1);
  const Tensor z = gaussian_tensor({3, 32, 32}, rng);
  const TextEncoding text = model.encode("a red circle and a blue square");
  ad::Tape t1, t2;
  const ScoreOutput a = denoise(t1.constant(z), 20, text, model, s);
  const ScoreOutput b = denoise(t2.constant(z), 20, text, model, s);
  CHECK(bit_equal(a.eps.value(), b.eps.value()));
  CHECK(bit_equal(a.score.value(), b.score.value()));
  CHECK(bit_equal(a.attention.maps.value(), b.attention.maps.value()));
}

TEST_CASE("attention maps are nonnegative and each sums to one") {
  const ToyDenoiser model(DenoiserConfig{}, vocab(), 4);
  const NoiseSchedule s = make_linear_schedule(50, 0.002, 0.4);
  std::mt19937_64 rng(2);
  ad::Tape tape;
  const ScoreOutput out = denoise(tape.constant(gaussian_tensor({3, 32, 32}, rng)), 10,
                                  model.encode("a small green triangle"), model, s);
  const AttentionBundle& b = out.attention;
  CHECK(b.height == 8);
  CHECK(b.width == 8);
  CHECK(b.tokens == DenoiserConfig{}.max_tokens);
  CHECK(b.head_count == DenoiserConfig{}.heads);
  CHECK(b.layer_ids.size() == static_cast<size_t>(DenoiserConfig{}.attention_blocks));
  for (int u = 0; u < b.tokens; ++u) {
    const Tensor m = b.map(u);
    double total = 0.0;
    for (double v : m.data()) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("denoise gradient wrt the latent matches finite differences on 8x8") {
  const ToyDenoiser model(DenoiserConfig{}, vocab(), 5);
  const NoiseSchedule s = make_linear_schedule(50, 0.002, 0.4);
  std::mt19937_64 rng(3);
  const Tensor z0 = gaussian_tensor({3, 8, 8}, rng);
  const Tensor w_eps = random_tensor({3, 8, 8}, rng);
  const Tensor w_map = random_tensor({4}, rng);
  const TextEncoding text = model.encode("a red circle");
  const std::vector<int> idx{1, 2};

  // Scalar mixing both outputs: <w, score> + <w', M_{red,circle}>.
  auto scalar = [&](ad::Tape& tape, const ad::Var& z) {
    const ScoreOutput out = denoise(z, 30, text, model, s);
    const ad::Var m = token_attention_map(out.attention, idx, text.length());
    return ad::dot(ad::reshape(out.score, {192}), tape.constant(w_eps.reshaped({192}))) +
           ad::dot(m, tape.constant(w_map));
  };
  ad::Tape tape;
  const ad::Var z = tape.variable(z0);
  const ad::Var f = scalar(tape, z);
  tape.backward(f);
  const Tensor fd = central_difference(
      [&](const Tensor& zz) {
        ad::Tape t;
        return scalar(t, t.constant(zz)).value().item();
      },
      z0, 1e-5);
  CHECK(relative_error(z.grad(), fd) < 1e-4);
}

TEST_CASE("denoise rejects bad inputs") {
  const ToyDenoiser model(DenoiserConfig{}, vocab(), 5);
  const NoiseSchedule s = make_linear_schedule(50, 0.002, 0.4);
  const TextEncoding text = model.encode("a red circle");
  ad::Tape tape;
  CHECK_THROWS_AS(denoise(tape.constant(Tensor({3, 10, 10})), 5, text, model, s), InputError);
  CHECK_THROWS_AS(denoise(tape.constant(Tensor({1, 8, 8})), 5, text, model, s), InputError);
  CHECK_THROWS_AS(denoise(tape.constant(Tensor({3, 8, 8})), 0, text, model, s), IndexError);
  CHECK_THROWS_AS(denoise(tape.constant(Tensor({3, 8, 8})), 51, text, model, s), IndexError);
}

AttentionBundle hand_bundle(ad::Tape& tape, const Tensor& maps, int h, int w) {
  AttentionBundle b;
  b.maps = tape.constant(maps);
  b.height = h;
  b.width = w;
  b.tokens = maps.dim(1);
  b.head_count = 1;
  b.layer_ids = {0};
  return b;
}

TEST_CASE("token_attention_map examples") {
  ad::Tape tape;
  std::mt19937_64 rng(6);
  Tensor maps = random_tensor({4, 3}, rng, 0.0, 1.0);
  for (int u = 0; u < 3; ++u) {
    double s = 0.0;
    for (int p = 0; p < 4; ++p) s += maps.at(p, u);
    for (int p = 0; p < 4; ++p) maps.at(p, u) /= s;
  }
  const AttentionBundle b = hand_bundle(tape, maps, 2, 2);

  SUBCASE("single index returns that map") {
    const std::vector<int> idx{1};
    const Tensor m = token_attention_map(b, idx, 3).value();
    for (int p = 0; p < 4; ++p) CHECK(m[static_cast<size_t>(p)] == maps.at(p, 1));
  }
  SUBCASE("two identical maps give the same map") {
    Tensor twin = maps;
    for (int p = 0; p < 4; ++p) twin.at(p, 2) = twin.at(p, 0);
    const AttentionBundle bt = hand_bundle(tape, twin, 2, 2);
    const std::vector<int> idx{0, 2};
    const Tensor m = token_attention_map(bt, idx, 3).value();
    for (int p = 0; p < 4; ++p) CHECK(m[static_cast<size_t>(p)] == doctest::Approx(twin.at(p, 0)).epsilon(1e-15));
  }
  SUBCASE("two deltas average to one half each") {
    Tensor deltas({4, 2});
    deltas.at(0, 0) = 1.0;
    deltas.at(3, 1) = 1.0;
    const AttentionBundle bd = hand_bundle(tape, deltas, 2, 2);
    const std::vector<int> idx{0, 1};
    const Tensor m = token_attention_map(bd, idx, 2).value();
    CHECK(m[0] == 0.5);
    CHECK(m[1] == 0.0);
    CHECK(m[2] == 0.0);
    CHECK(m[3] == 0.5);
  }
  SUBCASE("padding-only selection is an input error") {
    const std::vector<int> pad{2};
    CHECK_THROWS_AS(token_attention_map(b, pad, 2), InputError);
    const std::vector<int> none;
    CHECK_THROWS_AS(token_attention_map(b, none, 2), InputError);
    const std::vector<int> bad{3};
    CHECK_THROWS_AS(token_attention_map(b, bad, 3), InputError);
  }
  SUBCASE("padding entries inside a mixed selection are skipped") {
    const std::vector<int> mixed{0, 2};
    const Tensor m = token_attention_map(b, mixed, 2).value();
    for (int p = 0; p < 4; ++p) CHECK(m[static_cast<size_t>(p)] == maps.at(p, 0));
  }
}

TEST_CASE("decode clamps and passes gradient only inside the range") {
  ad::Tape tape;
  Tensor x({5});
  x[0] = 0.3;
  x[1] = -0.9;
  x[2] = 1.7;
  x[3] = -2.5;
  x[4] = 0.999;
  const ad::Var v = tape.variable(x);
  const ad::Var y = decode(v);
  CHECK(y.value()[0] == 0.3);
  CHECK(y.value()[1] == -0.9);
  CHECK(y.value()[2] == 1.0);
  CHECK(y.value()[3] == -1.0);
  CHECK(decode(x)[2] == 1.0);
  tape.backward(ad::sum(y));
  const Tensor fd = central_difference(
      [](const Tensor& t) {
        const Tensor d = decode(t);
        double s = 0.0;
        for (double e : d.data()) s += e;
        return s;
      },
      x, 1e-6);
  for (size_t i = 0; i < 5; ++i) CHECK(v.grad()[i] == doctest::Approx(fd[i]).epsilon(1e-8));
  CHECK(v.grad()[0] == 1.0);
  CHECK(v.grad()[2] == 0.0);
  CHECK(v.grad()[3] == 0.0);
}

TEST_CASE("scorer towers emit unit vectors") {
  const PreferenceScorer scorer(ScorerConfig{}, vocab(), 7);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    ad::Tape tape;
    const BoundParams p(tape, scorer.params(), false);
    const ad::Var fv = scorer.vision(tape.constant(random_tensor({3, 32, 32}, rng)), 0.5 * trial - 1.0, p);
    const ad::Var ft = scorer.text(tape, scorer.encode(trial % 2 ? "a red circle" : "two large blue squares"), p);
    CHECK(std::abs(ad::norm(fv).value().item() - 1.0) < 1e-6);
    CHECK(std::abs(ad::norm(ft).value().item() - 1.0) < 1e-6);
  }
}

TEST_CASE("preference score bounds and ties") {
  ScorerConfig cfg;
  cfg.tau = 3.0;
  const PreferenceScorer scorer(cfg, vocab(), 9);
  std::mt19937_64 rng(10);
  const Tensor img = random_tensor({3, 32, 32}, rng);
  const double s = preference_score(img, "a green square", kCleanLogSnr, scorer);
  CHECK(s > 0.0);
  CHECK(s >= std::exp(-3.0));
  CHECK(s <= std::exp(3.0));
  CHECK(preference_score(img, "a green square", kCleanLogSnr, scorer) - s == 0.0);

  // exp(tau * cos) at the extremes.
  ad::Tape tape;
  Tensor a({4}), b({4});
  a[0] = 1.0;
  b[1] = 1.0;
  const ad::Var va = tape.constant(a), vb = tape.constant(b);
  CHECK(std::exp(cfg.tau * ad::dot(va, va).value().item()) == doctest::Approx(std::exp(3.0)));
  CHECK(std::exp(cfg.tau * ad::dot(va, vb).value().item()) == 1.0);
}

TEST_CASE("preference cosine gradient matches finite differences") {
  ScorerConfig cfg;
  const PreferenceScorer scorer(cfg, vocab(), 11);
  std::mt19937_64 rng(12);
  const Tensor x0 = random_tensor({3, 8, 8}, rng);
  const TextEncoding text = scorer.encode("a large yellow circle");
  ad::Tape tape;
  const ad::Var x = tape.variable(x0);
  tape.backward(preference_cosine(x, 1.5, text, scorer));
  const Tensor fd = central_difference(
      [&](const Tensor& xx) {
        ad::Tape t;
        return preference_cosine(t.constant(xx), 1.5, text, scorer).value().item();
      },
      x0, 1e-5);
  CHECK(relative_error(x.grad(), fd) < 1e-4);
}

TEST_CASE("checkpoints round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "dymo_models_test";
  std::filesystem::create_directories(dir);
  const ToyDenoiser d(DenoiserConfig{}, vocab(), 13);
  save_checkpoint(d.to_checkpoint(), (dir / "d.ckpt").string());
  const ToyDenoiser d2 = ToyDenoiser::from_checkpoint(load_checkpoint((dir / "d.ckpt").string()));
  CHECK(d2.params() == d.params());
  CHECK(d2.config() == d.config());
  CHECK(d2.vocab() == d.vocab());

  const PreferenceScorer s(ScorerConfig{}, vocab(), 14);
  save_checkpoint(s.to_checkpoint(), (dir / "s.ckpt").string());
  const PreferenceScorer s2 = PreferenceScorer::from_checkpoint(load_checkpoint((dir / "s.ckpt").string()));
  CHECK(s2.params() == s.params());
  CHECK(s2.config() == s.config());
  CHECK_THROWS_AS(ToyDenoiser::from_checkpoint(load_checkpoint((dir / "s.ckpt").string())), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("zero-step training returns the initialization") {
  DatasetConfig dc;
  const Dataset data = make_dataset(8, 1, Grammar::builtin(), dc);
  DenoiserTrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 21;
  cfg.eval_samples = 2;
  const DenoiserTrainResult r = train_toy_denoiser(data, cfg);
  const ToyDenoiser init(cfg.model, vocab(), cfg.seed);
  CHECK(r.model.params() == init.params());
  CHECK(r.final_eval_loss == r.initial_eval_loss);

  const auto pairs = make_preference_pairs(data, 2, Grammar::builtin());
  REQUIRE(!pairs.empty());
  ScorerTrainConfig scfg;
  scfg.steps = 0;
  scfg.seed = 22;
  const ScorerTrainResult sr = train_preference_scorer(pairs, vocab(), scfg);
  CHECK(sr.scorer.params() == PreferenceScorer(scfg.model, vocab(), scfg.seed).params());
}

TEST_CASE("a few training steps lower the denoiser loss") {
  DatasetConfig dc;
  const Dataset data = make_dataset(32, 2, Grammar::builtin(), dc);
  DenoiserTrainConfig cfg;
  cfg.steps = 40;
  cfg.batch = 4;
  cfg.warmup = 5;
  cfg.eval_samples = 32;
  cfg.log_every = 10;
  const DenoiserTrainResult r = train_toy_denoiser(data, cfg);
  CHECK(r.final_eval_loss < r.initial_eval_loss);
  CHECK(r.curve.size() == 5);
}

TEST_CASE("Adam takes a bias-corrected first step of size lr") {
  ParameterStore ps;
  Tensor w({3});
  w[0] = 1.0;
  w[1] = -2.0;
  w[2] = 0.5;
  ps.add("w", w);
  Tensor g({3});
  g[0] = 0.1;
  g[1] = -0.3;
  g[2] = 0.0;
  Adam adam(AdamConfig{.lr = 0.01, .clip_norm = 0.0});
  adam.step(ps, {g});
  CHECK(ps.value(0)[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(ps.value(0)[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
  CHECK(ps.value(0)[2] == 0.5);
  Tensor bad({3});
  bad[0] = std::nan("");
  CHECK_THROWS_AS(adam.step(ps, {bad}), NumericalError);
}

}  // namespace
}  // namespace dymo
