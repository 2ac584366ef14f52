#ifndef DYMO_TRAINING_H_
#define DYMO_TRAINING_H_

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dymo/dataset.h"
#include "dymo/models.h"

namespace dymo {

struct DenoiserTrainConfig {
  int steps = 20000;
  int batch = 8;
  double lr = 2e-3;
  double lr_final_fraction = 0.05;  // cosine decay target
  int warmup = 200;
  double ema_decay = 0.999;
  uint64_t seed = 0;
  // Noise levels are drawn uniformly over this schedule's steps.
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  int eval_samples = 256;
  int log_every = 200;
  DenoiserConfig model;
};

struct LossPoint {
  int step = 0;
  double train_loss = 0.0;  // mean over the logging window
  double eval_loss = -1.0;  // fixed evaluation batch; -1 when not measured
};

struct DenoiserTrainResult {
  ToyDenoiser model;
  std::vector<LossPoint> curve;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
};

using ProgressFn = std::function<void(const LossPoint&)>;

// Minimises E|eps_theta(z_t, t, c) - eps|^2 over (image, caption) pairs with
// Adam. Returns the EMA weights. Aborts with NumericalError on a NaN loss.
DenoiserTrainResult train_toy_denoiser(const Dataset& dataset, const DenoiserTrainConfig& config,
                                       const ProgressFn& progress = {});

// Mean noise-prediction error of `model` on a fixed batch drawn with `seed`.
double denoiser_eval_loss(const ToyDenoiser& model, const Dataset& dataset, const NoiseSchedule& schedule,
                          int samples, uint64_t seed);

struct ScorerTrainConfig {
  int steps = 6000;
  int batch = 16;
  double lr = 2e-3;
  uint64_t seed = 0;
  // Fraction of pairs shown as one-step clean predictions of a noised copy,
  // so the scorer learns to judge x'_0|t at every noise level.
  double noisy_fraction = 0.5;
  int schedule_steps = 50;
  double beta_start = 0.002;
  double beta_end = 0.4;
  int log_every = 200;
  ScorerConfig model;
};

struct ScorerTrainResult {
  PreferenceScorer scorer;
  std::vector<LossPoint> curve;
};

// Pairwise logistic ranking loss -log sigmoid(tau (cos_pref - cos_dispref)).
// `denoiser` (optional) supplies the one-step predictions for noisy pairs.
ScorerTrainResult train_preference_scorer(const std::vector<PreferencePair>& pairs, const Vocabulary& vocab,
                                          const ScorerTrainConfig& config, const ToyDenoiser* denoiser = nullptr,
                                          const ProgressFn& progress = {});

// Fraction of pairs whose preferred member scores strictly higher.
double ranking_accuracy(const PreferenceScorer& scorer, const std::vector<PreferencePair>& pairs,
                        double log_snr = kCleanLogSnr);

void write_loss_csv(const std::vector<LossPoint>& curve, const std::string& path);

}  // namespace dymo

#endif  // DYMO_TRAINING_H_
