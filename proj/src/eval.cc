#include "dymo/eval.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "dymo/dataset.h"
#include "dymo/errors.h"
#include "dymo/grammar.h"
#include "dymo/hashing.h"
#include "dymo/image_io.h"

namespace dymo {

namespace fs = std::filesystem;

namespace {

bool parse_fixed(const std::string& name, int* r) {
  const std::string head = "fixed_recurrence(";
  if (name.rfind(head, 0) != 0 || name.back() != ')') return false;
  const std::string digits = name.substr(head.size(), name.size() - head.size() - 1);
  if (digits.empty() || digits.size() > 6 ||
      !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return false;
  }
  *r = std::stoi(digits);
  return true;
}

std::string slug(const std::string& name) {
  std::string out;
  for (char c : name) {
    if (c == '(') out += '-';
    else if (c != ')') out += c;
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

}  // namespace

// --- variants ------------------------------------------------------------------

Variant Variant::parse(const std::string& name) {
  static const std::set<std::string> plain{"baseline", "full",          "no_LA",     "no_LR",
                                           "no_adaptive_w", "no_polyak", "dynamic_recurrence"};
  int r = 0;
  if (plain.count(name) == 0 && !parse_fixed(name, &r)) throw ConfigError("unknown variant '" + name + "'");
  return Variant{name};
}

SamplerConfig Variant::apply(SamplerConfig c) const {
  int r = 0;
  if (name == "baseline") c.guidance = false;
  else if (name == "no_LA") c.use_la = false;
  else if (name == "no_LR") c.use_lr = false;
  else if (name == "no_adaptive_w") c.adaptive_w = false;
  else if (name == "no_polyak") c.polyak = false;
  else if (name == "dynamic_recurrence") c.fixed_recurrence = -1;
  else if (parse_fixed(name, &r)) c.fixed_recurrence = r;
  return c;
}

const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> m{"preference", "semantic",    "semantic_fraction",
                                          "l_a_final",  "nfe",         "wall_time_s"};
  return m;
}

bool higher_is_better(const std::string& metric) {
  return metric != "l_a_final" && metric != "nfe" && metric != "wall_time_s";
}

void AblationSpec::validate() const {
  if (variants.empty()) throw ConfigError("ablation needs at least one variant");
  std::set<std::string> seen;
  for (const std::string& v : variants) {
    Variant::parse(v);
    if (!seen.insert(v).second) throw ConfigError("duplicate variant '" + v + "'");
  }
  if (prompts.empty()) throw ConfigError("ablation needs at least one prompt");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (std::set<uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("duplicate seed");
  for (const std::string& m : metrics) {
    if (std::find(known_metrics().begin(), known_metrics().end(), m) == known_metrics().end()) {
      throw ConfigError("unknown metric '" + m + "'");
    }
  }
}

std::vector<std::string> default_prompts(int count, uint64_t seed, int min_shapes) {
  DatasetConfig cfg;
  cfg.min_shapes = min_shapes;
  cfg.max_shapes = std::max(min_shapes, cfg.max_shapes);
  const Grammar& grammar = Grammar::builtin();
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (int i = 0; static_cast<int>(out.size()) < count; ++i) {
    if (i > 100 * count + 1000) throw InputError("grammar cannot produce enough distinct prompts");
    ShapeScene scene = make_scene(seed, i, grammar, cfg);
    // Placement can give up on crowded canvases and return fewer shapes.
    if (static_cast<int>(scene.shapes.size()) < min_shapes) continue;
    if (seen.insert(scene.caption).second) out.push_back(std::move(scene.caption));
  }
  return out;
}

// --- statistics ------------------------------------------------------------------

Stats stats_of(const std::vector<double>& xs) {
  Stats s;
  s.n = static_cast<int>(xs.size());
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= s.n;
  if (s.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / (s.n - 1));
  }
  return s;
}

SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b, bool higher_better) {
  if (a.size() != b.size()) throw InputError("sign test needs paired samples");
  SignTest t;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    t.mean_delta += d;
    if (d == 0.0) ++t.ties;
    else if ((d > 0.0) == higher_better) ++t.wins;
    else ++t.losses;
  }
  if (!a.empty()) t.mean_delta /= static_cast<double>(a.size());
  const int n = t.wins + t.losses;
  if (n == 0) return t;
  double p = 0.0;
  for (int k = t.wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  t.p_value = std::min(1.0, p);
  return t;
}

// --- runs ------------------------------------------------------------------------

std::optional<double> metric_of(const RunRecord& r, const std::string& metric) {
  if (!r.completed) return std::nullopt;
  if (metric == "nfe") return static_cast<double>(r.denoiser_calls);
  if (metric == "wall_time_s") return r.wall_time_s;
  if (!r.metrics.contains(metric)) return std::nullopt;
  return r.metrics.at(metric).get<double>();
}

void score_run(RunRecord& record, const Tensor& image, const SamplerModels& models) {
  const SemanticReport sem = detect_semantics(image, record.prompt, Grammar::builtin());
  record.metrics["preference"] = preference_score(image, record.prompt, kCleanLogSnr, *models.scorer);
  record.metrics["semantic"] = sem.all_correct() ? 1.0 : 0.0;
  record.metrics["semantic_fraction"] = sem.pass_fraction();
  if (record.mode == "dymo" && !record.steps.empty() && !record.steps.back().cycles.empty()) {
    record.metrics["l_a_final"] = record.steps.back().cycles.front().l_a;
  }
}

std::vector<RunRecord> run_grid(const std::vector<Variant>& variants, const std::vector<std::string>& prompts,
                                const std::vector<uint64_t>& seeds, const SamplerConfig& base,
                                const SamplerModels& models, const EvalOptions& opts) {
  struct Job {
    size_t variant, prompt;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (size_t v = 0; v < variants.size(); ++v) {
    for (size_t p = 0; p < prompts.size(); ++p) {
      for (uint64_t s : seeds) jobs.push_back({v, p, s});
    }
  }
  std::vector<RunRecord> out(jobs.size());
  const fs::path run_dir = opts.out_dir.empty() ? fs::path() : fs::path(opts.out_dir) / "runs";
  if (!run_dir.empty()) fs::create_directories(run_dir);

  std::atomic<size_t> next{0};
  std::atomic<int> done{0};
  std::mutex progress_mu;
  auto work = [&] {
    for (size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      const Variant& variant = variants[job.variant];
      const std::string& prompt = prompts[job.prompt];
      SamplerConfig cfg = variant.apply(base);
      cfg.seed = job.seed;
      cfg.out_dir.clear();
      const std::string id =
          opts.id_prefix + slug(variant.name) + "-p" + std::to_string(job.prompt) + "-s" + std::to_string(job.seed);
      RunRecord& rec = out[i];
      try {
        SampleResult res =
            variant.guided() ? dymo_sample(prompt, cfg, models, nullptr, id) : baseline_sample(prompt, cfg, models, id);
        score_run(res.record, res.image, models);
        if (!run_dir.empty() && opts.write_images) write_run(res, run_dir.string());
        rec = std::move(res.record);
        rec.image = std::move(res.image);
      } catch (const SamplingAborted& e) {
        rec = e.record();
      } catch (const std::exception& e) {
        rec = RunRecord{};
        rec.id = id;
        rec.mode = variant.guided() ? "dymo" : "baseline";
        rec.prompt = prompt;
        rec.seed = job.seed;
        rec.config = cfg.to_json();
        rec.error = e.what();
      }
      if (!run_dir.empty() && !(opts.write_images && rec.completed)) {
        std::ofstream f(run_dir / (rec.id + ".json"));
        f << rec.to_json().dump(2) << "\n";
      }
      const int d = ++done;
      if (opts.progress) {
        std::lock_guard<std::mutex> lock(progress_mu);
        opts.progress(d, static_cast<int>(jobs.size()));
      }
    }
  };
  int workers = opts.workers > 0 ? opts.workers : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::clamp(workers, 1, std::max<int>(1, static_cast<int>(jobs.size())));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  return out;
}

std::vector<RunRecord> load_records(const std::string& dir) {
  if (!fs::is_directory(dir)) throw InputError("no record directory " + dir);
  std::vector<RunRecord> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("steps") || !j.contains("mode")) continue;
    out.push_back(RunRecord::from_json(j));
  }
  std::sort(out.begin(), out.end(), [](const RunRecord& a, const RunRecord& b) { return a.id < b.id; });
  return out;
}

// --- reports ----------------------------------------------------------------------

namespace {

// Variant name of a record id produced by run_grid, given the known names.
// A non-empty id prefix must end in '-'.
std::string variant_of(const RunRecord& r, const std::vector<std::string>& names) {
  const std::string base = r.id.substr(0, r.id.rfind("-p"));
  for (const std::string& n : names) {
    const std::string s = slug(n);
    if (base == s) return n;
    if (base.size() > s.size() && base.compare(base.size() - s.size(), s.size(), s) == 0 &&
        base[base.size() - s.size() - 1] == '-') {
      return n;
    }
  }
  return "";
}

}  // namespace

EvalReport build_report(const std::string& kind, const std::vector<RunRecord>& records,
                        const std::vector<std::string>& variant_order,
                        const std::vector<std::tuple<std::string, std::string, std::string>>& comparisons,
                        double alpha) {
  EvalReport rep;
  rep.kind = kind;
  rep.alpha = alpha;
  // Longest names first so "no_LA" never captures an id of a longer name ending the same way.
  std::vector<std::string> by_length = variant_order;
  std::sort(by_length.begin(), by_length.end(),
            [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
  std::map<std::string, std::vector<const RunRecord*>> runs;
  for (const RunRecord& r : records) {
    const std::string v = variant_of(r, by_length);
    if (!v.empty()) runs[v].push_back(&r);
  }
  for (auto& [_, list] : runs) {
    std::sort(list.begin(), list.end(), [](const RunRecord* a, const RunRecord* b) { return a->id < b->id; });
  }

  for (const std::string& v : variant_order) {
    VariantSummary s;
    s.variant = v;
    std::map<std::string, std::vector<double>> values;
    for (const RunRecord* r : runs[v]) {
      s.run_ids.push_back(r->id);
      if (!r->completed) {
        s.failed_ids.push_back(r->id);
        rep.errors.push_back(r->id + ": " + (r->error.empty() ? "incomplete" : r->error));
        continue;
      }
      for (const std::string& m : known_metrics()) {
        if (auto x = metric_of(*r, m)) values[m].push_back(*x);
      }
    }
    if (s.run_ids.empty()) rep.errors.push_back(v + ": no runs");
    for (const auto& [m, xs] : values) s.metrics[m] = stats_of(xs);
    rep.variants.push_back(std::move(s));
  }

  for (const auto& [variant, reference, metric] : comparisons) {
    Comparison c;
    c.variant = variant;
    c.reference = reference;
    c.metric = metric;
    std::map<std::pair<std::string, uint64_t>, const RunRecord*> ref;
    for (const RunRecord* r : runs[reference]) ref[{r->prompt, r->seed}] = r;
    std::vector<double> a, b;
    for (const RunRecord* r : runs[variant]) {
      auto it = ref.find({r->prompt, r->seed});
      if (it == ref.end()) continue;
      const auto x = metric_of(*r, metric);
      const auto y = metric_of(*it->second, metric);
      if (!x || !y) continue;
      a.push_back(*x);
      b.push_back(*y);
      c.pairs.emplace_back(r->id, it->second->id);
    }
    c.test = sign_test(a, b, higher_is_better(metric));
    c.significant = !a.empty() && c.test.p_value < alpha;
    rep.comparisons.push_back(std::move(c));
  }
  return rep;
}

const VariantSummary& EvalReport::variant(const std::string& name) const {
  for (const VariantSummary& v : variants) {
    if (v.variant == name) return v;
  }
  throw IndexError("no variant '" + name + "' in report");
}

const Comparison* EvalReport::comparison(const std::string& v, const std::string& ref, const std::string& m) const {
  for (const Comparison& c : comparisons) {
    if (c.variant == v && c.reference == ref && c.metric == m) return &c;
  }
  return nullptr;
}

bool EvalReport::complete() const { return errors.empty(); }

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = kind;
  j["alpha"] = alpha;
  j["complete"] = complete();
  j["errors"] = errors;
  j["variants"] = nlohmann::ordered_json::array();
  for (const VariantSummary& v : variants) {
    nlohmann::ordered_json vj;
    vj["variant"] = v.variant;
    vj["metrics"] = nlohmann::ordered_json::object();
    for (const auto& [m, s] : v.metrics) vj["metrics"][m] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
    vj["runs"] = v.run_ids;
    vj["failed"] = v.failed_ids;
    j["variants"].push_back(vj);
  }
  j["comparisons"] = nlohmann::ordered_json::array();
  for (const Comparison& c : comparisons) {
    nlohmann::ordered_json cj;
    cj["variant"] = c.variant;
    cj["reference"] = c.reference;
    cj["metric"] = c.metric;
    cj["wins"] = c.test.wins;
    cj["losses"] = c.test.losses;
    cj["ties"] = c.test.ties;
    cj["mean_delta"] = c.test.mean_delta;
    cj["p_value"] = c.test.p_value;
    cj["significant"] = c.significant;
    cj["pairs"] = c.pairs;
    j["comparisons"].push_back(cj);
  }
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream s;
  s << "variant,metric,mean,std,n,failed\n";
  for (const VariantSummary& v : variants) {
    for (const auto& [m, st] : v.metrics) {
      s << v.variant << "," << m << "," << fmt(st.mean) << "," << fmt(st.std) << "," << st.n << ","
        << v.failed_ids.size() << "\n";
    }
  }
  return s.str();
}

std::string EvalReport::comparisons_csv() const {
  std::ostringstream s;
  s << "variant,reference,metric,wins,losses,ties,mean_delta,p_value,significant\n";
  for (const Comparison& c : comparisons) {
    s << c.variant << "," << c.reference << "," << c.metric << "," << c.test.wins << "," << c.test.losses << ","
      << c.test.ties << "," << fmt(c.test.mean_delta) << "," << fmt(c.test.p_value) << ","
      << (c.significant ? 1 : 0) << "\n";
  }
  return s.str();
}

std::string EvalReport::hash() const { return sha256_hex(to_json().dump()); }

void write_report(const EvalReport& report, const std::string& dir) {
  fs::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream out(fs::path(dir) / name);
    if (!out) throw InputError("cannot write " + (fs::path(dir) / name).string());
    out << body;
  };
  write("report.json", report.to_json().dump(2) + "\n");
  write("report.csv", report.to_csv());
  write("comparisons.csv", report.comparisons_csv());
}

// --- studies ------------------------------------------------------------------------

namespace {

std::vector<Variant> parse_all(const std::vector<std::string>& names) {
  std::vector<Variant> out;
  for (const std::string& n : names) out.push_back(Variant::parse(n));
  return out;
}

void finish(const EvalReport& rep, const EvalOptions& opts) {
  if (!opts.out_dir.empty()) write_report(rep, opts.out_dir);
}

}  // namespace

EvalReport run_ablation(const AblationSpec& spec, const SamplerConfig& base, const SamplerModels& models,
                        const EvalOptions& opts, std::vector<RunRecord>* records) {
  spec.validate();
  base.validate();
  std::vector<RunRecord> recs = run_grid(parse_all(spec.variants), spec.prompts, spec.seeds, base, models, opts);
  std::vector<std::tuple<std::string, std::string, std::string>> cmp;
  const bool has_full = std::count(spec.variants.begin(), spec.variants.end(), "full") > 0;
  for (const std::string& m : spec.metrics) {
    if (m == "nfe" || m == "wall_time_s") continue;
    if (!has_full) break;
    for (const std::string& v : spec.variants) {
      if (v == "full") continue;
      cmp.emplace_back("full", v, m);
    }
  }
  EvalReport rep = build_report("ablation", recs, spec.variants, cmp);
  finish(rep, opts);
  if (records) *records = std::move(recs);
  return rep;
}

EvalReport run_recurrence_study(const std::vector<int>& budgets, const AblationSpec& spec, const SamplerConfig& base,
                                const SamplerModels& models, const EvalOptions& opts, std::vector<RunRecord>* records) {
  std::vector<std::string> names;
  for (int b : budgets) {
    if (b < 0) throw ConfigError("recurrence budget must be >= 0");
    names.push_back("fixed_recurrence(" + std::to_string(b) + ")");
  }
  names.push_back("dynamic_recurrence");
  AblationSpec s = spec;
  s.variants = names;
  s.validate();
  base.validate();
  std::vector<RunRecord> recs = run_grid(parse_all(names), s.prompts, s.seeds, base, models, opts);
  std::vector<std::tuple<std::string, std::string, std::string>> cmp;
  for (const std::string& m : s.metrics) {
    for (int b : budgets) cmp.emplace_back("dynamic_recurrence", "fixed_recurrence(" + std::to_string(b) + ")", m);
  }
  EvalReport rep = build_report("recurrence", recs, names, cmp);
  finish(rep, opts);
  if (records) *records = std::move(recs);
  return rep;
}

nlohmann::ordered_json SensitivityReport::to_json() const {
  nlohmann::ordered_json j;
  j["param"] = param;
  j["cells"] = nlohmann::ordered_json::array();
  for (const SensitivityCell& c : cells) {
    nlohmann::ordered_json cj;
    cj["point"] = c.point;
    if (c.error) cj["error"] = *c.error;
    cj["metrics"] = nlohmann::ordered_json::object();
    for (const auto& [m, s] : c.metrics) cj["metrics"][m] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
    cj["runs"] = c.run_ids;
    j["cells"].push_back(cj);
  }
  j["relative_variation"] = nlohmann::ordered_json::object();
  for (const auto& [m, v] : relative_variation) j["relative_variation"][m] = v;
  return j;
}

SensitivityReport run_sensitivity(const std::string& param, const std::vector<std::vector<double>>& grid,
                                  const AblationSpec& spec, const SamplerConfig& base, const SamplerModels& models,
                                  const EvalOptions& opts) {
  if (param != "t1_t2" && param != "k") throw ConfigError("sensitivity parameter must be t1_t2 or k");
  if (grid.empty()) throw ConfigError("sensitivity grid is empty");
  AblationSpec s = spec;
  s.variants = {"full"};
  s.validate();
  SensitivityReport rep;
  rep.param = param;
  for (size_t i = 0; i < grid.size(); ++i) {
    SensitivityCell cell;
    cell.point = grid[i];
    SamplerConfig cfg = base;
    try {
      if (param == "t1_t2") {
        if (cell.point.size() != 2) throw ConfigError("t1_t2 grid points need two values");
        cfg.stage.t1_frac = cell.point[0];
        cfg.stage.t2_frac = cell.point[1];
      } else {
        if (cell.point.size() != 1) throw ConfigError("k grid points need one value");
        cfg.stage.k = cell.point[0];
      }
      cfg.validate();
    } catch (const ConfigError& e) {
      cell.error = e.what();
      rep.cells.push_back(std::move(cell));
      continue;
    }
    EvalOptions o = opts;
    o.id_prefix = opts.id_prefix + "cell" + std::to_string(i) + "-";
    const std::vector<RunRecord> recs = run_grid({Variant::parse("full")}, s.prompts, s.seeds, cfg, models, o);
    std::map<std::string, std::vector<double>> values;
    for (const RunRecord& r : recs) {
      cell.run_ids.push_back(r.id);
      if (!r.completed) {
        cell.error = r.id + ": " + r.error;
        continue;
      }
      for (const std::string& m : s.metrics) {
        if (auto x = metric_of(r, m)) values[m].push_back(*x);
      }
    }
    for (const auto& [m, xs] : values) cell.metrics[m] = stats_of(xs);
    rep.cells.push_back(std::move(cell));
  }
  for (const std::string& m : s.metrics) {
    std::vector<double> means;
    for (const SensitivityCell& c : rep.cells) {
      if (!c.error && c.metrics.count(m)) means.push_back(c.metrics.at(m).mean);
    }
    if (means.empty()) continue;
    const auto [lo, hi] = std::minmax_element(means.begin(), means.end());
    const double centre = std::abs(stats_of(means).mean);
    rep.relative_variation[m] = centre > 0.0 ? (*hi - *lo) / centre : *hi - *lo;
  }
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    std::ofstream(fs::path(opts.out_dir) / "sensitivity.json") << rep.to_json().dump(2) << "\n";
  }
  return rep;
}

// --- plots ----------------------------------------------------------------------------

std::vector<int> strip_steps(int T) {
  std::vector<int> out;
  for (int t = T; t >= 1; t -= 5) out.push_back(t);
  return out;
}

namespace {

struct Series {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;  // (t, value)
};

void panel(std::ostream& s, double ox, double oy, const std::string& title, int T, const std::vector<Series>& series) {
  const double w = 360, h = 180, pad = 36;
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (const Series& se : series) {
    for (const auto& [_, v] : se.points) {
      if (!std::isfinite(v)) continue;
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  // t runs from T on the left down to 1 on the right, as sampling proceeds.
  auto X = [&](double t) { return ox + pad + (T - t) / std::max(1, T - 1) * (w - 2 * pad); };
  auto Y = [&](double v) { return oy + h - pad + (lo - v) / (hi - lo) * (h - 2 * pad); };
  s << "<g font-family=\"monospace\" font-size=\"10\">\n";
  s << "<rect x=\"" << ox << "\" y=\"" << oy << "\" width=\"" << w << "\" height=\"" << h
    << "\" fill=\"white\" stroke=\"#ccc\"/>\n";
  s << "<text x=\"" << ox + pad << "\" y=\"" << oy + 14 << "\">" << title << "</text>\n";
  s << "<line x1=\"" << X(T) << "\" y1=\"" << Y(lo) << "\" x2=\"" << X(1) << "\" y2=\"" << Y(lo)
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << X(T) << "\" y1=\"" << Y(lo) << "\" x2=\"" << X(T) << "\" y2=\"" << Y(hi)
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << X(T) << "\" y=\"" << Y(lo) + 12 << "\">t=" << T << "</text>\n";
  s << "<text x=\"" << X(1) - 18 << "\" y=\"" << Y(lo) + 12 << "\">t=1</text>\n";
  s << "<text x=\"" << ox + 2 << "\" y=\"" << Y(hi) + 4 << "\">" << fmt(hi).substr(0, 7) << "</text>\n";
  s << "<text x=\"" << ox + 2 << "\" y=\"" << Y(lo) << "\">" << fmt(lo).substr(0, 7) << "</text>\n";
  double ly = oy + 14;
  for (const Series& se : series) {
    s << "<polyline fill=\"none\" stroke=\"" << se.color << "\" points=\"";
    for (const auto& [t, v] : se.points) {
      if (std::isfinite(v)) s << X(t) << "," << Y(v) << " ";
    }
    s << "\"/>\n";
    s << "<text x=\"" << ox + w - 90 << "\" y=\"" << ly << "\" fill=\"" << se.color << "\">" << se.label
      << "</text>\n";
    ly += 12;
  }
  s << "</g>\n";
}

}  // namespace

std::vector<std::string> plot_trajectories(const std::vector<RunRecord>& records, const std::string& out_dir) {
  std::vector<std::string> written;
  if (records.empty()) return written;
  fs::create_directories(out_dir);
  for (const RunRecord& r : records) {
    if (r.steps.empty()) continue;
    const int T = r.steps.front().t;
    Series wa{"w_a", "#1f77b4", {}}, wr{"w_r", "#d62728", {}}, g{"|g|", "#2ca02c", {}}, rt{"r_t", "#9467bd", {}};
    Series la{"L_A", "#1f77b4", {}}, lr{"L_R", "#d62728", {}};
    for (const StepEntry& st : r.steps) {
      if (st.cycles.empty()) continue;
      const CycleEntry& c = st.cycles.front();
      wa.points.emplace_back(st.t, c.w_a);
      wr.points.emplace_back(st.t, c.w_r);
      g.points.emplace_back(st.t, c.grad_norm);
      rt.points.emplace_back(st.t, st.r_t);
      la.points.emplace_back(st.t, c.l_a);
      lr.points.emplace_back(st.t, c.l_r);
    }
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"740\" height=\"400\">\n";
    panel(s, 5, 5, "weights", T, {wa, wr});
    panel(s, 375, 5, "guidance gradient norm", T, {g});
    panel(s, 5, 210, "recurrences", T, {rt});
    panel(s, 375, 210, "losses", T, {la, lr});
    s << "</svg>\n";
    const fs::path svg = fs::path(out_dir) / (r.id + "_curves.svg");
    std::ofstream(svg) << s.str();
    written.push_back(svg.string());

    if (!r.trajectory.empty()) {
      std::vector<std::pair<int, Tensor>> frames;
      for (int t : strip_steps(T)) {
        for (const auto& f : r.trajectory) {
          if (f.first == t) frames.push_back(f);
        }
      }
      if (!frames.empty()) {
        const fs::path png = fs::path(out_dir) / (r.id + "_strip.png");
        write_png(png.string(), strip_image(frames));
        written.push_back(png.string());
      }
    }
  }
  return written;
}

}  // namespace dymo
