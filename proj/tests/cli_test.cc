#include "cli.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "dymo/grammar.h"
#include "dymo/models.h"
#include "dymo/nn.h"
#include "json.hpp"

namespace dymo {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "dymo");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Untrained checkpoints are enough to exercise the plumbing.
struct Checkpoints {
  fs::path dir = fs::temp_directory_path() / "dymo_cli_ckpt";
  std::string denoiser = (dir / "d.ckpt").string();
  std::string scorer = (dir / "s.ckpt").string();
  std::string broken = (dir / "broken.ckpt").string();

  Checkpoints() {
    fs::create_directories(dir);
    const Vocabulary v = Vocabulary::from_grammar(Grammar::builtin());
    ToyDenoiser d(DenoiserConfig{}, v, 5);
    save_checkpoint(d.to_checkpoint(), denoiser);
    save_checkpoint(PreferenceScorer(ScorerConfig{}, v, 6).to_checkpoint(), scorer);
    d.params().get("out.w")[0] = std::nan("");
    save_checkpoint(d.to_checkpoint(), broken);
  }
};

const Checkpoints& ckpt() {
  static const Checkpoints c;
  return c;
}

std::vector<std::string> sampler_args(const std::string& out) {
  return {"--denoiser", ckpt().denoiser, "--scorer", ckpt().scorer, "--steps", "10", "--out", out};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  CHECK(run({"generate", "--prompt", "a red circle", "--out", "/tmp/x", "--bogus"}).code == kExitUsage);
  CHECK(run({"generate", "--out", "/tmp/x"}).code == kExitUsage);
  const Result missing = run({"generate", "--prompt", "a red circle", "--out", "/tmp/x", "--denoiser",
                              "/nonexistent.ckpt", "--scorer", "/nonexistent.ckpt"});
  CHECK(missing.code == kExitUsage);
  CHECK(missing.err.find("not found") != std::string::npos);
  auto bad_set = sampler_args("/tmp/x");
  bad_set.insert(bad_set.begin(), {"generate", "--prompt", "a red circle", "--set", "steps=ten"});
  CHECK(run(bad_set).code == kExitUsage);
  CHECK(run({"--help"}).code == kExitOk);
}

TEST_CASE("json logs carry machine-readable errors") {
  const Result r = run({"--json-logs", "generate", "--prompt", "a red circle", "--out", "/tmp/x"});
  CHECK(r.code == kExitUsage);
  const auto j = nlohmann::json::parse(r.err.substr(0, r.err.find('\n')));
  CHECK(j["event"] == "error");
  CHECK(j["code"] == 2);
  const Result p = run({"--json-logs", "generate", "--unknown"});
  CHECK(p.code == kExitUsage);
  CHECK(nlohmann::json::parse(p.err.substr(0, p.err.find('\n')))["type"] == "usage");
}

TEST_CASE("generate writes image and record; no-guidance equals the baseline") {
  const fs::path dir = scratch("dymo_cli_generate");
  auto args = sampler_args(dir.string());
  auto with = [&](std::vector<std::string> extra) {
    std::vector<std::string> a{"generate", "--prompt", "a red circle and a blue square", "--seed", "7"};
    a.insert(a.end(), args.begin(), args.end());
    a.insert(a.end(), extra.begin(), extra.end());
    return run(a);
  };
  const Result guided = with({"--id", "g", "--r-max", "1", "--eta", "0.05"});
  REQUIRE(guided.code == kExitOk);
  CHECK(fs::exists(dir / "g.png"));
  CHECK(fs::exists(dir / "g.json"));
  const auto summary = nlohmann::json::parse(guided.out);
  CHECK(summary["id"] == "g");
  CHECK(summary["nfe"].get<int>() >= 10);

  const Result off = with({"--id", "off", "--no-guidance"});
  const Result base = with({"--id", "base", "--baseline"});
  REQUIRE(off.code == kExitOk);
  REQUIRE(base.code == kExitOk);
  CHECK(nlohmann::json::parse(off.out)["image_hash"] == nlohmann::json::parse(base.out)["image_hash"]);
  CHECK(nlohmann::json::parse(base.out)["nfe"] == 10);

  const Result traj = with({"--id", "t", "--trajectory", "--r-max", "0"});
  REQUIRE(traj.code == kExitOk);
  CHECK(fs::exists(dir / "t_strip.png"));
  CHECK(fs::exists(dir / "t_curves.svg"));

  // A config file sets the same keys; flags override it.
  std::ofstream(dir / "run.cfg") << "steps = 12\nseed = 1\n";
  const Result cfg = with({"--id", "c", "--config", (dir / "run.cfg").string(), "--r-max", "0"});
  REQUIRE(cfg.code == kExitOk);
  std::ifstream rec(dir / "c.json");
  CHECK(nlohmann::json::parse(rec)["config"]["steps"] == 10);
  fs::remove_all(dir);
}

TEST_CASE("runtime failures exit with 1 and keep the partial record") {
  const fs::path dir = scratch("dymo_cli_broken");
  const Result r = run({"generate", "--prompt", "a red circle", "--id", "b", "--denoiser", ckpt().broken, "--scorer",
                        ckpt().scorer, "--steps", "5", "--out", dir.string()});
  CHECK(r.code == kExitRuntime);
  CHECK(fs::exists(dir / "b.json"));
  fs::remove_all(dir);
}

TEST_CASE("extract-graph emits one document per prompt") {
  const fs::path dir = scratch("dymo_cli_graph");
  fs::create_directories(dir);
  std::ofstream(dir / "prompts.txt") << "a red circle and a blue square\n\na large green triangle\n";
  const Result r = run({"extract-graph", "--input", (dir / "prompts.txt").string()});
  REQUIRE(r.code == kExitOk);
  std::istringstream lines(r.out);
  std::vector<nlohmann::json> docs;
  for (std::string l; std::getline(lines, l);) docs.push_back(nlohmann::json::parse(l));
  REQUIRE(docs.size() == 2);
  CHECK(docs[0]["Graph"].size() == 2);
  CHECK(docs[1]["Graph"][0]["triangle"] == nlohmann::json::array({"large", "green"}));
  CHECK(run({"extract-graph"}).code == kExitUsage);
  CHECK(run({"extract-graph", "--prompt", "x", "--source", "oracle"}).code == kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("make-dataset writes a loadable container") {
  const fs::path dir = scratch("dymo_cli_dataset");
  const Result r = run({"make-dataset", "--n", "4", "--seed", "3", "--out", dir.string()});
  REQUIRE(r.code == kExitOk);
  CHECK(fs::exists(dir / "index.json"));
  CHECK(nlohmann::json::parse(r.out)["scenes"] == 4);
  fs::remove_all(dir);
}

TEST_CASE("training subcommands write checkpoints") {
  const fs::path dir = scratch("dymo_cli_train");
  const Result d = run({"train-denoiser", "--scenes", "16", "--steps", "3", "--batch", "2", "--log-every", "1", "--out",
                        (dir / "d.ckpt").string(), "--curve", (dir / "d.csv").string()});
  REQUIRE(d.code == kExitOk);
  CHECK(fs::exists(dir / "d.ckpt"));
  CHECK(fs::exists(dir / "d.csv"));
  const Result s = run({"train-scorer", "--scenes", "8", "--heldout-scenes", "4", "--steps", "2", "--batch", "2",
                        "--denoiser", (dir / "d.ckpt").string(), "--out", (dir / "s.ckpt").string()});
  REQUIRE(s.code == kExitOk);
  const auto j = nlohmann::json::parse(s.out);
  CHECK(j.contains("heldout_accuracy"));
  CHECK(run({"train-scorer", "--scenes", "8", "--denoiser", "/nonexistent", "--out", (dir / "x.ckpt").string()}).code ==
        kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("eval emits the ablation table and plots") {
  const fs::path dir = scratch("dymo_cli_eval");
  std::vector<std::string> a{"eval", "--ablation", "full", "--num-prompts", "1", "--seeds", "1", "--workers", "1",
                             "--plots", "1", "--eta", "0.05", "--r-max", "1"};
  const auto s = sampler_args(dir.string());
  a.insert(a.end(), s.begin(), s.end());
  const Result r = run(a);
  REQUIRE(r.code == kExitOk);
  std::ifstream in(dir / "report.json");
  const auto rep = nlohmann::json::parse(in);
  CHECK(rep["variants"].size() == 6);
  CHECK(rep["variants"][0]["variant"] == "baseline");
  CHECK(fs::exists(dir / "report.csv"));
  CHECK(fs::exists(dir / "comparisons.csv"));
  CHECK(fs::exists(dir / "plots" / "full-p0-s0_curves.svg"));
  CHECK(run({"eval", "--out", dir.string(), "--denoiser", ckpt().denoiser, "--scorer", ckpt().scorer}).code ==
        kExitUsage);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace dymo
