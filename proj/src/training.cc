#include "dymo/training.h"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "dymo/errors.h"

namespace dymo {
namespace {

Tensor gaussian(const std::vector<int>& shape, std::mt19937_64& rng) {
  Tensor t(shape);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : t.data()) v = n(rng);
  return t;
}

Tensor flip_horizontal(const Tensor& img) {
  Tensor out = Tensor::like(img);
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (int k = 0; k < c; ++k) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.at(k, y, x) = img.at(k, y, w - 1 - x);
    }
  }
  return out;
}

double lr_scale(int step, int total, int warmup, double final_fraction) {
  if (step < warmup) return static_cast<double>(step + 1) / warmup;
  const double progress = total > warmup ? static_cast<double>(step - warmup) / (total - warmup) : 1.0;
  return final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace

double denoiser_eval_loss(const ToyDenoiser& model, const Dataset& dataset, const NoiseSchedule& schedule,
                          int samples, uint64_t seed) {
  std::mt19937_64 rng(seed);
  double total = 0.0;
  for (int i = 0; i < samples; ++i) {
    const ShapeScene& scene = dataset.scenes[rng() % dataset.scenes.size()];
    const int t = 1 + static_cast<int>(rng() % static_cast<uint64_t>(schedule.steps()));
    const Tensor eps = gaussian(scene.image.shape(), rng);
    ad::Tape tape;
    const ad::Var z = tape.constant(forward_diffuse(scene.image, t, eps, schedule));
    const BoundParams p(tape, model.params(), false);
    const Tensor pred = model.predict_noise(z, schedule.log_snr(t), model.encode(scene.caption), p).eps.value();
    const Tensor diff = pred - eps;
    total += dot(diff.data(), diff.data()) / static_cast<double>(diff.size());
  }
  return total / samples;
}

DenoiserTrainResult train_toy_denoiser(const Dataset& dataset, const DenoiserTrainConfig& cfg,
                                       const ProgressFn& progress) {
  if (dataset.scenes.empty()) throw InputError("train_toy_denoiser: empty dataset");
  if (cfg.steps < 0 || cfg.batch < 1) throw ConfigError("steps must be >= 0 and batch >= 1");
  const NoiseSchedule schedule = make_linear_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
  ToyDenoiser model(cfg.model, Vocabulary::from_grammar(Grammar::builtin()), cfg.seed);
  std::vector<TextEncoding> captions;
  for (const ShapeScene& s : dataset.scenes) captions.push_back(model.encode(s.caption));

  ParameterStore ema = model.params();
  Adam adam(AdamConfig{.lr = cfg.lr});
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  const uint64_t eval_seed = cfg.seed + 1;

  DenoiserTrainResult result{model, {}, 0.0, 0.0};
  result.initial_eval_loss = denoiser_eval_loss(model, dataset, schedule, cfg.eval_samples, eval_seed);
  result.curve.push_back({0, result.initial_eval_loss, result.initial_eval_loss});
  if (progress) progress(result.curve.back());

  double window = 0.0;
  int window_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    ad::Tape tape;
    const BoundParams p(tape, model.params(), true);
    ad::Var total;
    for (int b = 0; b < cfg.batch; ++b) {
      const size_t idx = rng() % dataset.scenes.size();
      const int t = 1 + static_cast<int>(rng() % static_cast<uint64_t>(schedule.steps()));
      const Tensor x0 = (rng() & 1) ? flip_horizontal(dataset.scenes[idx].image) : dataset.scenes[idx].image;
      const Tensor eps = gaussian(x0.shape(), rng);
      const ad::Var z = tape.constant(forward_diffuse(x0, t, eps, schedule));
      const ad::Var pred = model.predict_noise(z, schedule.log_snr(t), captions[idx], p).eps;
      const ad::Var diff = pred - tape.constant(eps);
      const ad::Var loss = ad::mean(diff * diff);
      total = total.valid() ? total + loss : loss;
    }
    total = ad::scale(total, 1.0 / cfg.batch);
    const double loss_value = total.value().item();
    if (!std::isfinite(loss_value)) {
      throw NumericalError("denoiser training diverged at step " + std::to_string(step) + " (loss " +
                           std::to_string(loss_value) + ")");
    }
    tape.backward(total);
    adam.step(model.params(), p.grads(), lr_scale(step, cfg.steps, cfg.warmup, cfg.lr_final_fraction));
    for (int i = 0; i < ema.count(); ++i) {
      Tensor& e = ema.value(i);
      const Tensor& w = model.params().value(i);
      for (size_t k = 0; k < e.size(); ++k) e[k] = cfg.ema_decay * e[k] + (1.0 - cfg.ema_decay) * w[k];
    }
    window += loss_value;
    ++window_n;
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
      result.curve.push_back({step + 1, window / window_n, -1.0});
      if (progress) progress(result.curve.back());
      window = 0.0;
      window_n = 0;
    }
  }
  // With few steps the EMA has not warmed up; fall back to the raw weights.
  if (cfg.steps > 0 && cfg.steps * (1.0 - cfg.ema_decay) < 2.0) ema = model.params();
  model.params() = ema;
  result.final_eval_loss = denoiser_eval_loss(model, dataset, schedule, cfg.eval_samples, eval_seed);
  if (!result.curve.empty() && cfg.steps > 0) result.curve.back().eval_loss = result.final_eval_loss;
  result.model = std::move(model);
  return result;
}

ScorerTrainResult train_preference_scorer(const std::vector<PreferencePair>& pairs, const Vocabulary& vocab,
                                          const ScorerTrainConfig& cfg, const ToyDenoiser* denoiser,
                                          const ProgressFn& progress) {
  if (pairs.empty()) throw InputError("train_preference_scorer: no pairs");
  if (cfg.steps < 0 || cfg.batch < 1) throw ConfigError("steps must be >= 0 and batch >= 1");
  const NoiseSchedule schedule = make_linear_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
  PreferenceScorer scorer(cfg.model, vocab, cfg.seed);
  Adam adam(AdamConfig{.lr = cfg.lr});
  std::mt19937_64 rng(cfg.seed ^ 0x51ed270b2735a4c9ull);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double tau = scorer.tau();

  // One-step clean prediction of a noised copy, shared noise for both members.
  auto one_step = [&](const Tensor& x, int t, const Tensor& eps, const TextEncoding& text) {
    ad::Tape tape;
    const ad::Var z = tape.constant(forward_diffuse(x, t, eps, schedule));
    const ScoreOutput out = denoise(z, t, text, *denoiser, schedule);
    return decode(predict_clean(z.value(), out.score.value(), t, schedule));
  };

  ScorerTrainResult result{scorer, {}};
  double window = 0.0;
  int window_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    ad::Tape tape;
    const BoundParams p(tape, scorer.params(), true);
    ad::Var total;
    for (int b = 0; b < cfg.batch; ++b) {
      const PreferencePair& pair = pairs[rng() % pairs.size()];
      const TextEncoding text = scorer.encode(pair.prompt);
      Tensor pref = pair.preferred, dis = pair.dispreferred;
      double level = kCleanLogSnr;
      if (denoiser && unit(rng) < cfg.noisy_fraction) {
        const int t = 1 + static_cast<int>(rng() % static_cast<uint64_t>(schedule.steps()));
        const Tensor eps = gaussian(pref.shape(), rng);
        const TextEncoding dtext = denoiser->encode(pair.prompt);
        pref = one_step(pref, t, eps, dtext);
        dis = one_step(dis, t, eps, dtext);
        level = schedule.log_snr(t);
      }
      const ad::Var ft = scorer.text(tape, text, p);
      const ad::Var cp = ad::dot(scorer.vision(tape.constant(pref), level, p), ft);
      const ad::Var cd = ad::dot(scorer.vision(tape.constant(dis), level, p), ft);
      // softplus(-tau * (cp - cd))
      const ad::Var loss = ad::log(ad::add_scalar(ad::exp(ad::scale(cp - cd, -tau)), 1.0));
      total = total.valid() ? total + loss : loss;
    }
    total = ad::scale(total, 1.0 / cfg.batch);
    const double loss_value = total.value().item();
    if (!std::isfinite(loss_value)) throw NumericalError("scorer training diverged at step " + std::to_string(step));
    tape.backward(total);
    adam.step(scorer.params(), p.grads(), lr_scale(step, cfg.steps, cfg.steps / 20, 0.05));
    window += loss_value;
    ++window_n;
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
      result.curve.push_back({step + 1, window / window_n, -1.0});
      if (progress) progress(result.curve.back());
      window = 0.0;
      window_n = 0;
    }
  }
  result.scorer = std::move(scorer);
  return result;
}

double ranking_accuracy(const PreferenceScorer& scorer, const std::vector<PreferencePair>& pairs, double log_snr) {
  if (pairs.empty()) return 0.0;
  int correct = 0;
  for (const PreferencePair& pair : pairs) {
    correct += preference_score(pair.preferred, pair.prompt, log_snr, scorer) >
               preference_score(pair.dispreferred, pair.prompt, log_snr, scorer);
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

void write_loss_csv(const std::vector<LossPoint>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << "step,train_loss,eval_loss\n";
  for (const LossPoint& p : curve) {
    out << p.step << ',' << p.train_loss << ',';
    if (p.eval_loss >= 0) out << p.eval_loss;
    out << '\n';
  }
}

}  // namespace dymo
