#include "dymo/eval.h"

#include <bit>
#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "dymo/errors.h"
#include "dymo/grammar.h"
#include "dymo/image_io.h"

namespace dymo {
namespace {

namespace fs = std::filesystem;

Vocabulary vocab() { return Vocabulary::from_grammar(Grammar::builtin()); }

struct Stack {
  ToyDenoiser denoiser{DenoiserConfig{}, vocab(), 41};
  PreferenceScorer scorer{ScorerConfig{}, vocab(), 42};
  SamplerModels view() const { return {&denoiser, &scorer, "d", "s"}; }
};

const Stack& stack() {
  static const Stack s;
  return s;
}

SamplerConfig short_config() {
  SamplerConfig c;
  c.steps = 10;
  c.stage.eta = {0.05, 0.05, 0.05};
  c.stage.h = {0.5, 0.5, 0.5};
  c.stage.r_max = 1;
  return c;
}

AblationSpec small_spec(std::vector<std::string> variants) {
  AblationSpec s;
  s.variants = std::move(variants);
  s.prompts = {"a red circle and a blue square", "a green triangle"};
  s.seeds = {3, 4};
  return s;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

TEST_CASE("variants differ from full in exactly one toggle") {
  const SamplerConfig base;
  const nlohmann::ordered_json full = Variant::parse("full").apply(base).to_json();
  for (const std::string name : {"no_LA", "no_LR", "no_adaptive_w", "no_polyak", "fixed_recurrence(5)"}) {
    const nlohmann::ordered_json v = Variant::parse(name).apply(base).to_json();
    int diffs = 0;
    for (auto it = full.begin(); it != full.end(); ++it) diffs += v.at(it.key()) != it.value();
    CHECK_MESSAGE(diffs == 1, name);
  }
  CHECK(Variant::parse("dynamic_recurrence").apply(base).to_json() == full);
  CHECK(Variant::parse("fixed_recurrence(0)").apply(base).fixed_recurrence == 0);
  CHECK_FALSE(Variant::parse("baseline").guided());
  CHECK_THROWS_AS(Variant::parse("no_anything"), ConfigError);
  CHECK_THROWS_AS(Variant::parse("fixed_recurrence(-1)"), ConfigError);
  CHECK_THROWS_AS(Variant::parse("fixed_recurrence()"), ConfigError);
}

TEST_CASE("ablation spec validation") {
  CHECK_NOTHROW(small_spec({"full", "no_LA"}).validate());
  CHECK_THROWS_AS(small_spec({"full", "no_LA", "full"}).validate(), ConfigError);
  CHECK_THROWS_AS(small_spec({"full", "bogus"}).validate(), ConfigError);
  AblationSpec s = small_spec({"full"});
  s.seeds.clear();
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec({"full"});
  s.seeds = {1, 1};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec({"full"});
  s.metrics = {"fid"};
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("default prompts are distinct multi-object captions") {
  const auto a = default_prompts(50);
  CHECK(a.size() == 50);
  CHECK(std::set<std::string>(a.begin(), a.end()).size() == 50);
  CHECK(default_prompts(50) == a);
  const Grammar& g = Grammar::builtin();
  for (const std::string& p : a) {
    int nouns = 0;
    std::string word;
    for (char c : p + " ") {
      if (c == ' ' || c == ',') {
        nouns += g.is_noun(word);
        word.clear();
      } else {
        word += c;
      }
    }
    CHECK_MESSAGE(nouns >= 2, p);
  }
}

// Brute force: average over every equally likely sign assignment.
double enumerated_p(int wins, int n) {
  int hits = 0;
  for (int mask = 0; mask < (1 << n); ++mask) hits += std::popcount(static_cast<unsigned>(mask)) >= wins;
  return static_cast<double>(hits) / (1 << n);
}

TEST_CASE("sign test matches exhaustive enumeration") {
  for (int n = 1; n <= 14; ++n) {
    for (int w = 0; w <= n; ++w) {
      std::vector<double> a, b;
      for (int i = 0; i < n; ++i) {
        a.push_back(i < w ? 2.0 : 0.0);
        b.push_back(1.0);
      }
      a.push_back(5.0);  // one tie
      b.push_back(5.0);
      const SignTest t = sign_test(a, b);
      CHECK(t.wins == w);
      CHECK(t.losses == n - w);
      CHECK(t.ties == 1);
      CHECK(t.p_value == doctest::Approx(enumerated_p(w, n)).epsilon(1e-12));
      const SignTest lower = sign_test(a, b, false);
      CHECK(lower.wins == n - w);
    }
  }
  CHECK(sign_test({}, {}).p_value == 1.0);
  CHECK(sign_test({1.0}, {1.0}).p_value == 1.0);
  CHECK_THROWS_AS(sign_test({1.0}, {}), InputError);
  // 10 of 10 wins: 2^-10.
  CHECK(sign_test(std::vector<double>(10, 1.0), std::vector<double>(10, 0.0)).p_value == doctest::Approx(1.0 / 1024));
}

TEST_CASE("stats") {
  const Stats s = stats_of({1.0, 2.0, 3.0, 4.0});
  CHECK(s.mean == 2.5);
  CHECK(s.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(s.n == 4);
  CHECK(stats_of({}).n == 0);
}

TEST_CASE("ablation runs every cell and regenerates from stored records") {
  const fs::path dir = scratch("dymo_eval_ablation");
  EvalOptions opts;
  opts.workers = 2;
  opts.out_dir = dir.string();
  std::vector<RunRecord> records;
  const AblationSpec spec = small_spec({"baseline", "full", "no_LR"});
  const EvalReport rep = run_ablation(spec, short_config(), stack().view(), opts, &records);
  CHECK(rep.complete());
  CHECK(records.size() == 12);
  REQUIRE(rep.variants.size() == 3);
  for (const VariantSummary& v : rep.variants) {
    CHECK(v.run_ids.size() == 4);
    CHECK(v.metrics.at("preference").n == 4);
    CHECK(v.metrics.at("nfe").n == 4);
  }
  CHECK(rep.variant("baseline").metrics.count("l_a_final") == 0);
  CHECK(rep.variant("baseline").metrics.at("nfe").mean == 10.0);
  CHECK(rep.variant("full").metrics.at("l_a_final").n == 4);

  const Comparison* c = rep.comparison("full", "no_LR", "preference");
  REQUIRE(c != nullptr);
  CHECK(c->pairs.size() == 4);
  for (const auto& [a, b] : c->pairs) {
    CHECK(a.substr(a.find("-p")) == b.substr(b.find("-p")));
  }
  CHECK(c->test.wins + c->test.losses + c->test.ties == 4);
  CHECK(rep.comparison("full", "baseline", "semantic") != nullptr);
  CHECK(rep.comparison("full", "baseline", "nfe") == nullptr);

  CHECK(fs::exists(dir / "report.json"));
  CHECK(fs::exists(dir / "report.csv"));
  CHECK(fs::exists(dir / "comparisons.csv"));
  const std::vector<RunRecord> stored = load_records((dir / "runs").string());
  CHECK(stored.size() == 12);
  std::vector<std::tuple<std::string, std::string, std::string>> cmp;
  for (const Comparison& x : rep.comparisons) cmp.emplace_back(x.variant, x.reference, x.metric);
  const EvalReport again = build_report("ablation", stored, spec.variants, cmp);
  CHECK(again.hash() == rep.hash());
  CHECK(again.to_csv() == rep.to_csv());

  // Worker count does not change any run.
  opts.workers = 1;
  opts.out_dir.clear();
  std::vector<RunRecord> serial;
  run_ablation(spec, short_config(), stack().view(), opts, &serial);
  REQUIRE(serial.size() == records.size());
  for (size_t i = 0; i < serial.size(); ++i) CHECK(serial[i].hash() == records[i].hash());
  fs::remove_all(dir);
}

TEST_CASE("failed runs mark the report incomplete") {
  ToyDenoiser broken = stack().denoiser;
  broken.params().get("out.w")[0] = std::nan("");
  const SamplerModels m{&broken, &stack().scorer, "", ""};
  EvalOptions opts;
  opts.workers = 1;
  AblationSpec spec = small_spec({"baseline", "full"});
  spec.prompts.resize(1);
  spec.seeds = {1};
  const EvalReport rep = run_ablation(spec, short_config(), m, opts);
  CHECK_FALSE(rep.complete());
  CHECK(rep.errors.size() == 2);
  CHECK(rep.variant("full").failed_ids.size() == 1);
  CHECK(rep.to_json()["complete"] == false);
}

TEST_CASE("recurrence study budgets") {
  EvalOptions opts;
  opts.workers = 1;
  AblationSpec spec = small_spec({});
  spec.prompts.resize(1);
  std::vector<RunRecord> records;
  const EvalReport rep = run_recurrence_study({0, 2}, spec, short_config(), stack().view(), opts, &records);
  CHECK(rep.complete());
  CHECK(rep.variant("fixed_recurrence(0)").metrics.at("nfe").mean == 10.0);
  CHECK(rep.variant("fixed_recurrence(2)").metrics.at("nfe").mean == 30.0);
  const double dyn = rep.variant("dynamic_recurrence").metrics.at("nfe").mean;
  CHECK(dyn >= 10.0);
  CHECK(dyn <= 20.0);  // r_max = 1
  CHECK(rep.comparison("dynamic_recurrence", "fixed_recurrence(2)", "preference") != nullptr);

  // Budget 0 is plain guided sampling without recurrence.
  SamplerConfig plain = short_config();
  plain.stage.r_max = 0;
  for (const RunRecord& r : records) {
    if (r.id.rfind("fixed_recurrence-0", 0) != 0) continue;
    plain.seed = r.seed;
    const SampleResult s = dymo_sample(r.prompt, plain, stack().view());
    CHECK(s.record.image_hash == r.image_hash);
  }
  CHECK_THROWS_AS(run_recurrence_study({-1}, spec, short_config(), stack().view(), opts), ConfigError);
}

TEST_CASE("sensitivity grid with invalid cells") {
  EvalOptions opts;
  opts.workers = 1;
  AblationSpec spec = small_spec({});
  spec.prompts.resize(1);
  spec.seeds = {1};
  const SensitivityReport rep =
      run_sensitivity("t1_t2", {{0.8, 0.5}, {0.5, 0.8}, {0.9, 0.4}}, spec, short_config(), stack().view(), opts);
  REQUIRE(rep.cells.size() == 3);
  CHECK_FALSE(rep.cells[0].error.has_value());
  CHECK(rep.cells[1].error.has_value());
  CHECK(rep.cells[1].run_ids.empty());
  CHECK_FALSE(rep.cells[2].error.has_value());
  CHECK(rep.cells[0].run_ids.size() == 1);
  CHECK(rep.relative_variation.count("preference") == 1);
  CHECK(rep.relative_variation.at("preference") >= 0.0);

  const SensitivityReport one = run_sensitivity("k", {{10.0}}, spec, short_config(), stack().view(), opts);
  REQUIRE(one.cells.size() == 1);
  CHECK(one.relative_variation.at("preference") == 0.0);
  CHECK_THROWS_AS(run_sensitivity("tau", {{1.0}}, spec, short_config(), stack().view(), opts), ConfigError);
  CHECK(run_sensitivity("k", {{-1.0}}, spec, short_config(), stack().view(), opts).cells[0].error.has_value());
}

TEST_CASE("trajectory plots") {
  const fs::path dir = scratch("dymo_eval_plots");
  CHECK(plot_trajectories({}, dir.string()).empty());
  CHECK_FALSE(fs::exists(dir));

  CHECK(strip_steps(50) == std::vector<int>{50, 45, 40, 35, 30, 25, 20, 15, 10, 5});
  CHECK(strip_steps(50).size() == 10);

  SamplerConfig c = short_config();
  c.steps = 20;
  c.keep_trajectory = true;
  const SampleResult r = dymo_sample("a red circle and a blue square", c, stack().view(), nullptr, "plotrun");
  CHECK(r.record.steps.front().cycles[0].w_a == 1.0);
  CHECK(r.record.steps.back().cycles[0].w_r == 1.0);
  RunRecord rec = r.record;
  const auto files = plot_trajectories({rec}, dir.string());
  REQUIRE(files.size() == 2);
  CHECK(fs::exists(dir / "plotrun_curves.svg"));
  CHECK(fs::file_size(dir / "plotrun_curves.svg") > 500);
  const Tensor strip = read_png((dir / "plotrun_strip.png").string());
  CHECK(strip.dim(2) == 32 * 4);
  // First frame is the prediction at t = T.
  const Tensor first = decode(rec.trajectory.front().second);
  double worst = 0.0;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) worst = std::max(worst, std::abs(strip.at(0, y, x) - first.at(0, y, x)));
  }
  CHECK(worst < 1e-4);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace dymo
