#ifndef DYMO_DIFFUSION_H_
#define DYMO_DIFFUSION_H_

// Variance-preserving diffusion arithmetic.
//
// Time is 1-based: t = 1..T index noisy states, t = 0 is clean data. All
// schedule tables are double precision; products of (1 - beta) over a
// thousand steps underflow single precision.
//
// The sampler works in score form. A noise predictor eps(z_t, t) is turned
// into a score estimate at the model boundary via score = -eps / sigma_t.

#include <vector>

#include "dymo/autodiff.h"
#include "dymo/tensor.h"

namespace dymo {

class NoiseSchedule {
 public:
  int steps() const { return static_cast<int>(betas_.size()) - 1; }

  double beta(int t) const { return betas_[checked(t)]; }
  double alpha_bar(int t) const { return alpha_bars_[checked(t)]; }
  double sigma(int t) const { return sigmas_[checked(t)]; }
  // log(alpha_bar / sigma^2); the noise-level feature fed to the models.
  double log_snr(int t) const;
  // t / T, used for stage boundaries independent of the step count.
  double normalized_time(int t) const {
    return static_cast<double>(checked(t)) / static_cast<double>(steps());
  }

  const std::vector<double>& betas() const { return betas_; }

 private:
  friend NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);
  NoiseSchedule() = default;
  int checked(int t) const;

  // Index 0 holds the clean-data sentinel: beta 0, alpha_bar 1, sigma 0.
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  std::vector<double> sigmas_;
};

// Linear beta schedule from beta_start (t = 1) to beta_end (t = T).
// Throws ConfigError naming the offending parameter.
NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

// sqrt(alpha_bar_t) * z0 + sigma_t * eps.
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

// One-step clean prediction (z_t + (1 - alpha_bar_t) * score) / sqrt(alpha_bar_t).
Tensor predict_clean(const Tensor& z_t, const Tensor& score, int t,
                     const NoiseSchedule& schedule);
ad::Var predict_clean(const ad::Var& z_t, const ad::Var& score, int t,
                      const NoiseSchedule& schedule);

// -eps / sigma_t.
Tensor score_from_noise(const Tensor& eps, int t, const NoiseSchedule& schedule);
ad::Var score_from_noise(const ad::Var& eps, int t, const NoiseSchedule& schedule);

// Euler step of the reverse VP dynamics:
// (1 + beta_t / 2) z_t + beta_t * score + sqrt(beta_t) * noise.
// `noise` must be zero at t = 1.
Tensor reverse_step(const Tensor& z_t, const Tensor& score, int t, const NoiseSchedule& schedule,
                    const Tensor& noise);

struct GuidedUpdate {
  Tensor z;
  // |z - m|; zero when the update was skipped.
  double step_magnitude = 0.0;
  // True when |g| < kDegenerateGradient and the update was skipped.
  bool degenerate = false;
};

inline constexpr double kDegenerateGradient = 1e-12;

// Polyak-scaled guidance: m - eta * score_norm / |g|^2 * g. The update
// points along -g with magnitude eta * score_norm / |g|.
GuidedUpdate guided_update(const Tensor& m, const Tensor& g, double eta, double score_norm);

// Time-travel back to step t: sqrt(1 - beta_t) * z_prev + sqrt(beta_t) * eps,
// with eps a fresh standard-normal draw.
Tensor renoise(const Tensor& z_prev, int t, const NoiseSchedule& schedule, const Tensor& eps);

// Throws NumericalError naming `what` when z has NaN/Inf entries.
void require_finite(const Tensor& z, const char* what);

}  // namespace dymo

#endif  // DYMO_DIFFUSION_H_
