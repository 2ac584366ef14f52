#include "cli.h"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dymo/dataset.h"
#include "dymo/errors.h"
#include "dymo/eval.h"
#include "dymo/grammar.h"
#include "dymo/hashing.h"
#include "dymo/pipeline.h"
#include "dymo/training.h"
#include "json.hpp"

namespace dymo {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Logger {
  std::ostream& err;
  bool json = false;

  void log(const std::string& event, const ojson& fields = ojson::object()) const {
    if (json) {
      ojson line;
      line["event"] = event;
      for (auto it = fields.begin(); it != fields.end(); ++it) line[it.key()] = it.value();
      err << line.dump() << "\n";
      return;
    }
    err << event;
    for (auto it = fields.begin(); it != fields.end(); ++it) {
      err << " " << it.key() << "=" << (it.value().is_string() ? it.value().get<std::string>() : it.value().dump());
    }
    err << "\n";
  }
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

double to_double(const std::string& s, const std::string& what) {
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError("bad number '" + s + "' in " + what);
}

// Sampler settings shared by generate and eval. Precedence: config file,
// then the named flags, then --set in command-line order.
struct SamplerFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::optional<std::string>>> named{
      {"denoiser", {}}, {"scorer", {}},  {"graph_source", {}}, {"graph_file", {}},      {"steps", {}},
      {"t1_frac", {}},  {"t2_frac", {}}, {"k", {}},            {"eta", {}},             {"eta_mode", {}},
      {"h", {}},        {"r_max", {}},   {"fixed_recurrence", {}}, {"loss_form", {}},   {"z0_prev_latest", {}}};
  bool no_guidance = false;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "Key-value run config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override any config key: key=value (repeatable)");
    app->add_flag("--no-guidance", no_guidance, "Disable guidance (baseline chain)");
    for (auto& [key, value] : named) {
      // -h belongs to help.
      std::string flag = key == "h" ? "--h-scale" : "--" + key;
      for (char& c : flag) c = c == '_' ? '-' : c;
      app->add_option(flag, value, "Config key " + key);
    }
  }

  SamplerConfig build() const {
    SamplerConfig c = config_file.empty() ? SamplerConfig{} : load_sampler_config(config_file);
    for (const auto& [key, value] : named) {
      if (value) apply_setting(c, key, *value);
    }
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      apply_setting(c, s.substr(0, eq), s.substr(eq + 1));
    }
    if (no_guidance) c.guidance = false;
    c.validate();
    return c;
  }
};

LoadedModels models_for(const SamplerConfig& c) {
  if (c.denoiser_path.empty()) throw UsageError("no denoiser checkpoint: pass --denoiser or set denoiser=");
  if (c.scorer_path.empty()) throw UsageError("no scorer checkpoint: pass --scorer or set scorer=");
  return load_models(c);
}

Dataset dataset_for(const std::string& dir, int scenes, uint64_t seed) {
  if (!dir.empty()) return load_dataset(dir);
  return make_dataset(scenes, seed, Grammar::builtin());
}

// --- subcommands ---------------------------------------------------------------

struct GenerateArgs {
  SamplerFlags flags;
  std::string prompt;
  uint64_t seed = 0;
  std::string out;
  std::string id;
  bool baseline = false;
  bool trajectory = false;
};

int run_generate(const GenerateArgs& a, const Logger& log, std::ostream& out) {
  SamplerConfig c = a.flags.build();
  c.seed = a.seed;
  c.out_dir = a.out;
  c.keep_trajectory = c.keep_trajectory || a.trajectory;
  const LoadedModels models = models_for(c);
  log.log("generate_start", {{"prompt", a.prompt}, {"seed", a.seed}, {"mode", a.baseline ? "baseline" : "dymo"}});
  SampleResult r = a.baseline ? baseline_sample(a.prompt, c, models.view(), a.id)
                              : dymo_sample(a.prompt, c, models.view(), nullptr, a.id);
  score_run(r.record, r.image, models.view());
  write_run(r, a.out);
  if (c.keep_trajectory) plot_trajectories({r.record}, a.out);
  for (const Event& e : r.record.events) log.log("run_event", {{"kind", e.kind}, {"message", e.message}});
  ojson summary;
  summary["id"] = r.record.id;
  summary["image"] = (fs::path(a.out) / (r.record.id + ".png")).string();
  summary["record"] = (fs::path(a.out) / (r.record.id + ".json")).string();
  summary["record_hash"] = r.record.hash();
  summary["image_hash"] = r.record.image_hash;
  summary["nfe"] = r.record.denoiser_calls;
  summary["metrics"] = r.record.metrics;
  out << summary.dump() << "\n";
  return kExitOk;
}

struct TrainDenoiserArgs {
  std::string dataset;
  int scenes = 5000;
  uint64_t data_seed = 1;
  DenoiserTrainConfig cfg;
  std::string out;
  std::string curve;
};

int run_train_denoiser(const TrainDenoiserArgs& a, const Logger& log, std::ostream& out) {
  const Dataset data = dataset_for(a.dataset, a.scenes, a.data_seed);
  log.log("train_denoiser_start", {{"scenes", data.scenes.size()}, {"steps", a.cfg.steps}});
  const DenoiserTrainResult r = train_toy_denoiser(data, a.cfg, [&](const LossPoint& p) {
    log.log("train_step", {{"step", p.step}, {"train_loss", p.train_loss}, {"eval_loss", p.eval_loss}});
  });
  if (!fs::path(a.out).parent_path().empty()) fs::create_directories(fs::path(a.out).parent_path());
  save_checkpoint(r.model.to_checkpoint(), a.out);
  if (!a.curve.empty()) write_loss_csv(r.curve, a.curve);
  ojson s;
  s["checkpoint"] = a.out;
  s["sha256"] = sha256_file(a.out);
  s["initial_eval_loss"] = r.initial_eval_loss;
  s["final_eval_loss"] = r.final_eval_loss;
  s["gate_passed"] = r.final_eval_loss < r.initial_eval_loss;
  out << s.dump() << "\n";
  return kExitOk;
}

struct TrainScorerArgs {
  std::string dataset;
  int scenes = 3000;
  uint64_t data_seed = 11;
  int heldout_scenes = 500;
  uint64_t heldout_seed = 12;
  uint64_t pair_seed = 13;
  std::string denoiser;
  ScorerTrainConfig cfg;
  std::string out;
  std::string curve;
};

int run_train_scorer(const TrainScorerArgs& a, const Logger& log, std::ostream& out) {
  const Grammar& g = Grammar::builtin();
  const Dataset train = dataset_for(a.dataset, a.scenes, a.data_seed);
  const auto pairs = make_preference_pairs(train, a.pair_seed, g);
  std::unique_ptr<ToyDenoiser> den;
  if (!a.denoiser.empty()) {
    if (!fs::exists(a.denoiser)) throw InputError("missing denoiser checkpoint " + a.denoiser);
    den = std::make_unique<ToyDenoiser>(ToyDenoiser::from_checkpoint(load_checkpoint(a.denoiser)));
  }
  log.log("train_scorer_start", {{"pairs", pairs.size()}, {"steps", a.cfg.steps}, {"noisy_pairs", den != nullptr}});
  const ScorerTrainResult r =
      train_preference_scorer(pairs, Vocabulary::from_grammar(g), a.cfg, den.get(), [&](const LossPoint& p) {
        log.log("train_step", {{"step", p.step}, {"train_loss", p.train_loss}});
      });
  if (!fs::path(a.out).parent_path().empty()) fs::create_directories(fs::path(a.out).parent_path());
  save_checkpoint(r.scorer.to_checkpoint(), a.out);
  if (!a.curve.empty()) write_loss_csv(r.curve, a.curve);
  ojson s;
  s["checkpoint"] = a.out;
  s["sha256"] = sha256_file(a.out);
  s["train_accuracy"] = ranking_accuracy(r.scorer, pairs);
  if (a.heldout_scenes > 0) {
    const Dataset held = make_dataset(a.heldout_scenes, a.heldout_seed, g);
    const double acc = ranking_accuracy(r.scorer, make_preference_pairs(held, a.pair_seed + 1, g));
    s["heldout_accuracy"] = acc;
    s["gate_passed"] = acc >= 0.9;
  }
  out << s.dump() << "\n";
  return kExitOk;
}

struct ExtractArgs {
  std::string input;
  std::vector<std::string> prompts;
  std::string source = "rules";
  std::string llm_cache;
  std::string out;
};

int run_extract(const ExtractArgs& a, const Logger& log, std::ostream& out) {
  std::vector<std::string> prompts = a.prompts;
  if (!a.input.empty()) {
    std::ifstream file;
    std::istream* in = &std::cin;
    if (a.input != "-") {
      file.open(a.input);
      if (!file) throw InputError("cannot read " + a.input);
      in = &file;
    }
    for (std::string line; std::getline(*in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) prompts.push_back(line);
    }
  }
  if (prompts.empty()) throw UsageError("no prompts: pass --input or --prompt");
  std::shared_ptr<LlmClient> client;
  if (a.source == "llm") {
    client = llm_client_from_env(a.llm_cache);
    if (!client) log.log("llm_unavailable", {{"message", "DYMO_LLM_ENDPOINT unset, using the rule parser"}});
  }
  std::ofstream file;
  std::ostream* dst = &out;
  if (!a.out.empty()) {
    file.open(a.out);
    if (!file) throw InputError("cannot write " + a.out);
    dst = &file;
  }
  const Grammar& g = Grammar::builtin();
  for (const std::string& p : prompts) {
    EventLog events;
    const SemanticGraph graph = client ? extract_graph_llm(p, *client, g, &events) : extract_graph_rules(p, g, &events);
    for (const Event& e : events) log.log("graph_event", {{"prompt", p}, {"kind", e.kind}, {"message", e.message}});
    *dst << graph_to_json(graph).dump() << "\n";
  }
  return kExitOk;
}

struct EvalArgs {
  SamplerFlags flags;
  std::string ablation;
  std::string recurrence;
  std::string sensitivity;
  std::string grid;
  std::string prompts_file;
  int num_prompts = 50;
  uint64_t prompt_seed = 2024;
  int seeds = 10;
  int workers = 0;
  int plots = 0;
  bool images = false;
  std::string out;
};

const std::vector<std::string> kTableVariants{"baseline", "full", "no_LA", "no_LR", "no_adaptive_w", "no_polyak"};

int run_eval(const EvalArgs& a, const Logger& log, std::ostream& out) {
  const int modes = !a.ablation.empty() + !a.recurrence.empty() + !a.sensitivity.empty();
  if (modes != 1) throw UsageError("pass exactly one of --ablation, --recurrence, --sensitivity");
  SamplerConfig base = a.flags.build();
  base.keep_trajectory = base.keep_trajectory || a.plots > 0;
  const LoadedModels models = models_for(base);

  AblationSpec spec;
  if (!a.prompts_file.empty()) {
    std::ifstream in(a.prompts_file);
    if (!in) throw InputError("cannot read " + a.prompts_file);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) spec.prompts.push_back(line);
    }
  } else {
    spec.prompts = default_prompts(a.num_prompts, a.prompt_seed);
  }
  for (int s = 0; s < a.seeds; ++s) spec.seeds.push_back(static_cast<uint64_t>(s));

  EvalOptions opts;
  opts.workers = a.workers;
  opts.out_dir = a.out;
  opts.write_images = a.images;
  opts.progress = [&](int done, int total) {
    if (done % 10 == 0 || done == total) log.log("eval_progress", {{"done", done}, {"total", total}});
  };

  std::vector<RunRecord> records;
  ojson summary;
  if (!a.sensitivity.empty()) {
    std::vector<std::vector<double>> grid;
    for (const std::string& point : split(a.grid, ',')) {
      std::vector<double> p;
      for (const std::string& v : split(point, ':')) p.push_back(to_double(v, "--grid"));
      grid.push_back(p);
    }
    if (grid.empty()) throw UsageError("--sensitivity needs --grid, e.g. 0.8:0.5,0.7:0.4");
    const SensitivityReport rep = run_sensitivity(a.sensitivity, grid, spec, base, models.view(), opts);
    summary = rep.to_json();
    summary.erase("cells");
    summary["report"] = (fs::path(a.out) / "sensitivity.json").string();
  } else {
    EvalReport rep;
    if (!a.recurrence.empty()) {
      std::vector<int> budgets;
      for (const std::string& b : split(a.recurrence, ',')) budgets.push_back(static_cast<int>(to_double(b, "--recurrence")));
      rep = run_recurrence_study(budgets, spec, base, models.view(), opts, &records);
    } else {
      // "full" alone asks for the whole ablation table; any other list runs
      // the named variants next to the full method.
      std::vector<std::string> names = split(a.ablation, ',');
      if (names == std::vector<std::string>{"full"}) names = kTableVariants;
      if (std::find(names.begin(), names.end(), "full") == names.end()) names.insert(names.begin(), "full");
      spec.variants = names;
      rep = run_ablation(spec, base, models.view(), opts, &records);
    }
    summary["report"] = (fs::path(a.out) / "report.json").string();
    summary["complete"] = rep.complete();
    summary["report_hash"] = rep.hash();
    for (const VariantSummary& v : rep.variants) {
      for (const auto& [m, s] : v.metrics) summary["means"][v.variant][m] = s.mean;
    }
    for (const Comparison& c : rep.comparisons) {
      if (c.significant) summary["significant"].push_back(c.variant + ">" + c.reference + ":" + c.metric);
    }
  }
  if (a.plots > 0 && !records.empty()) {
    std::map<std::string, int> per_variant;
    std::vector<RunRecord> chosen;
    for (const RunRecord& r : records) {
      const std::string v = r.id.substr(0, r.id.rfind("-p"));
      if (per_variant[v]++ < a.plots) chosen.push_back(r);
    }
    plot_trajectories(chosen, (fs::path(a.out) / "plots").string());
  }
  out << summary.dump() << "\n";
  return kExitOk;
}

struct MakeDatasetArgs {
  int n = 5000;
  uint64_t seed = 1;
  DatasetConfig cfg;
  std::string out;
};

int run_make_dataset(const MakeDatasetArgs& a, const Logger& log, std::ostream& out) {
  const Dataset d = make_dataset(a.n, a.seed, Grammar::builtin(), a.cfg);
  save_dataset(d, a.out);
  log.log("dataset_written", {{"dir", a.out}, {"scenes", d.scenes.size()}});
  out << ojson{{"dir", a.out}, {"scenes", d.scenes.size()}, {"seed", a.seed}}.dump() << "\n";
  return kExitOk;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Guided sampling on a toy text-to-image diffusion stack", "dymo"};
  app.require_subcommand(1);
  bool json_logs = false;
  app.add_flag("--json-logs", json_logs, "Log and report errors as JSON lines on stderr");

  GenerateArgs gen;
  CLI::App* g = app.add_subcommand("generate", "Sample one image with guidance (or the baseline chain)");
  g->add_option("--prompt", gen.prompt, "Caption")->required();
  g->add_option("--seed", gen.seed, "Sampling seed");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--id", gen.id, "Run id (default: derived from the config)");
  g->add_flag("--baseline", gen.baseline, "Plain reverse chain");
  g->add_flag("--trajectory", gen.trajectory, "Keep intermediate predictions; write strip and curves");
  gen.flags.add(g);

  TrainDenoiserArgs td;
  CLI::App* t = app.add_subcommand("train-denoiser", "Train the toy noise-prediction network");
  t->add_option("--dataset", td.dataset, "Dataset directory (default: generate in memory)");
  t->add_option("--scenes", td.scenes, "Scenes to generate when no dataset is given");
  t->add_option("--data-seed", td.data_seed, "Seed of the generated dataset");
  t->add_option("--steps", td.cfg.steps, "Optimizer steps");
  t->add_option("--batch", td.cfg.batch, "Batch size");
  t->add_option("--lr", td.cfg.lr, "Peak learning rate");
  t->add_option("--seed", td.cfg.seed, "Training seed");
  t->add_option("--log-every", td.cfg.log_every, "Steps between loss reports");
  t->add_option("--out", td.out, "Checkpoint path")->required();
  t->add_option("--curve", td.curve, "Loss curve CSV path");

  TrainScorerArgs ts;
  CLI::App* s = app.add_subcommand("train-scorer", "Train the toy two-tower preference scorer");
  s->add_option("--dataset", ts.dataset, "Dataset directory (default: generate in memory)");
  s->add_option("--scenes", ts.scenes, "Scenes to generate when no dataset is given");
  s->add_option("--data-seed", ts.data_seed, "Seed of the generated dataset");
  s->add_option("--heldout-scenes", ts.heldout_scenes, "Held-out scenes for the accuracy report");
  s->add_option("--heldout-seed", ts.heldout_seed, "Seed of the held-out scenes");
  s->add_option("--pair-seed", ts.pair_seed, "Seed of the preference pair degradations");
  s->add_option("--denoiser", ts.denoiser, "Denoiser checkpoint for noisy-prediction pairs");
  s->add_option("--steps", ts.cfg.steps, "Optimizer steps");
  s->add_option("--batch", ts.cfg.batch, "Pairs per batch");
  s->add_option("--lr", ts.cfg.lr, "Peak learning rate");
  s->add_option("--seed", ts.cfg.seed, "Training seed");
  s->add_option("--noisy-fraction", ts.cfg.noisy_fraction, "Share of pairs shown as noisy predictions");
  s->add_option("--log-every", ts.cfg.log_every, "Steps between loss reports");
  s->add_option("--out", ts.out, "Checkpoint path")->required();
  s->add_option("--curve", ts.curve, "Loss curve CSV path");

  ExtractArgs ex;
  CLI::App* e = app.add_subcommand("extract-graph", "Build semantic graphs, one JSON document per prompt");
  e->add_option("--input", ex.input, "Prompt file, one per line ('-' for stdin)");
  e->add_option("--prompt", ex.prompts, "Prompt (repeatable)");
  e->add_option("--source", ex.source, "rules or llm")->check(CLI::IsMember({"rules", "llm"}));
  e->add_option("--llm-cache", ex.llm_cache, "Reply cache directory for the LLM client");
  e->add_option("--out", ex.out, "Output file (default: stdout)");

  EvalArgs ev;
  CLI::App* v = app.add_subcommand("eval", "Run an ablation, recurrence study or sensitivity sweep");
  v->add_option("--ablation", ev.ablation, "Comma-separated variants; 'full' alone runs the whole table");
  v->add_option("--recurrence", ev.recurrence, "Comma-separated fixed budgets compared with the dynamic one");
  v->add_option("--sensitivity", ev.sensitivity, "t1_t2 or k")->check(CLI::IsMember({"t1_t2", "k"}));
  v->add_option("--grid", ev.grid, "Sensitivity points, e.g. 0.8:0.5,0.7:0.4 or 5,10,20");
  v->add_option("--prompts-file", ev.prompts_file, "Prompt file, one per line");
  v->add_option("--num-prompts", ev.num_prompts, "Generated prompts when no file is given");
  v->add_option("--prompt-seed", ev.prompt_seed, "Seed of the generated prompts");
  v->add_option("--seeds", ev.seeds, "Sampling seeds 0..n-1 per prompt");
  v->add_option("--workers", ev.workers, "Worker threads (0: all cores)");
  v->add_option("--plots", ev.plots, "Trajectory plots for the first n runs of each variant");
  v->add_flag("--images", ev.images, "Write every sample as PNG next to its record");
  v->add_option("--out", ev.out, "Report directory")->required();
  ev.flags.add(v);

  MakeDatasetArgs md;
  CLI::App* m = app.add_subcommand("make-dataset", "Write a synthetic shapes dataset");
  m->add_option("--n", md.n, "Scenes");
  m->add_option("--seed", md.seed, "Dataset seed");
  m->add_option("--min-shapes", md.cfg.min_shapes, "Fewest shapes per scene");
  m->add_option("--max-shapes", md.cfg.max_shapes, "Most shapes per scene");
  m->add_option("--image-size", md.cfg.image_size, "Canvas edge in pixels");
  m->add_option("--out", md.out, "Dataset directory")->required();

  Logger log{err, false};
  auto fail = [&](int code, const std::string& type, const std::string& message) {
    if (log.json) {
      err << ojson{{"event", "error"}, {"code", code}, {"type", type}, {"message", message}}.dump() << "\n";
    } else {
      err << "error: " << message << "\n";
    }
    return code;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& h) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& p) {
    for (int i = 1; i < argc; ++i) json_logs = json_logs || std::string(argv[i]) == "--json-logs";
    log.json = json_logs;
    return fail(kExitUsage, "usage", p.what());
  }
  log.json = json_logs;

  try {
    if (*g) return run_generate(gen, log, out);
    if (*t) return run_train_denoiser(td, log, out);
    if (*s) return run_train_scorer(ts, log, out);
    if (*e) return run_extract(ex, log, out);
    if (*v) return run_eval(ev, log, out);
    if (*m) return run_make_dataset(md, log, out);
  } catch (const UsageError& x) {
    return fail(kExitUsage, "usage", x.what());
  } catch (const ConfigError& x) {
    return fail(kExitUsage, "config", x.what());
  } catch (const InputError& x) {
    return fail(kExitUsage, "input", x.what());
  } catch (const SamplingAborted& x) {
    return fail(kExitRuntime, "numerical", std::string(x.what()) + " (partial record " + x.record().id + ")");
  } catch (const NumericalError& x) {
    return fail(kExitRuntime, "numerical", x.what());
  } catch (const FormatError& x) {
    return fail(kExitRuntime, "format", x.what());
  } catch (const std::exception& x) {
    return fail(kExitRuntime, "runtime", x.what());
  }
  return kExitUsage;
}

}  // namespace dymo
