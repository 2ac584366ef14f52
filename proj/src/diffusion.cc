#include "dymo/diffusion.h"

#include <cmath>
#include <string>

#include "dymo/errors.h"

namespace dymo {
namespace {

constexpr double kAlphaBarFloor = 1e-12;

double clean_scale(int t, const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  if (ab < kAlphaBarFloor) {
    throw NumericalError("predict_clean: alpha_bar at t=" + std::to_string(t) + " is " +
                         std::to_string(ab) +
                         ", below 1e-12; raise the t-floor or shorten the schedule");
  }
  return 1.0 / std::sqrt(ab);
}

}  // namespace

int NoiseSchedule::checked(int t) const {
  if (t < 0 || t > steps()) {
    throw IndexError("diffusion step " + std::to_string(t) + " outside [0, " +
                     std::to_string(steps()) + "]");
  }
  return t;
}

double NoiseSchedule::log_snr(int t) const {
  const double ab = alpha_bar(t);
  return std::log(ab) - std::log1p(-ab);
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("steps must be >= 1, got " + std::to_string(steps));
  if (!(beta_start > 0.0 && beta_start < 1.0)) {
    throw ConfigError("beta_start must lie in (0, 1), got " + std::to_string(beta_start));
  }
  if (!(beta_end >= beta_start && beta_end < 1.0)) {
    throw ConfigError("beta_end must lie in [beta_start, 1), got " + std::to_string(beta_end));
  }
  NoiseSchedule s;
  s.betas_.assign(static_cast<size_t>(steps) + 1, 0.0);
  s.alpha_bars_.assign(static_cast<size_t>(steps) + 1, 1.0);
  s.sigmas_.assign(static_cast<size_t>(steps) + 1, 0.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    s.betas_[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha_bars_[t] = s.alpha_bars_[t - 1] * (1.0 - s.betas_[t]);
    s.sigmas_[t] = std::sqrt(1.0 - s.alpha_bars_[t]);
  }
  return s;
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  require_same_shape(z0, eps, "forward_diffuse");
  if (t < 1) throw IndexError("forward_diffuse: t must be >= 1");
  const double a = std::sqrt(schedule.alpha_bar(t));
  const double s = schedule.sigma(t);
  Tensor out = Tensor::like(z0);
  for (size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + s * eps[i];
  return out;
}

Tensor predict_clean(const Tensor& z_t, const Tensor& score, int t,
                     const NoiseSchedule& schedule) {
  require_same_shape(z_t, score, "predict_clean");
  if (t < 1) throw IndexError("predict_clean: t must be >= 1");
  const double inv = clean_scale(t, schedule);
  const double c = 1.0 - schedule.alpha_bar(t);
  Tensor out = Tensor::like(z_t);
  for (size_t i = 0; i < out.size(); ++i) out[i] = (z_t[i] + score[i] * c) * inv;
  return out;
}

ad::Var predict_clean(const ad::Var& z_t, const ad::Var& score, int t,
                      const NoiseSchedule& schedule) {
  if (t < 1) throw IndexError("predict_clean: t must be >= 1");
  const double inv = clean_scale(t, schedule);
  const double c = 1.0 - schedule.alpha_bar(t);
  return ad::scale(ad::add(z_t, ad::scale(score, c)), inv);
}

Tensor score_from_noise(const Tensor& eps, int t, const NoiseSchedule& schedule) {
  if (t < 1) throw IndexError("score_from_noise: t must be >= 1");
  return eps * (-1.0 / schedule.sigma(t));
}

ad::Var score_from_noise(const ad::Var& eps, int t, const NoiseSchedule& schedule) {
  if (t < 1) throw IndexError("score_from_noise: t must be >= 1");
  return ad::scale(eps, -1.0 / schedule.sigma(t));
}

Tensor reverse_step(const Tensor& z_t, const Tensor& score, int t, const NoiseSchedule& schedule,
                    const Tensor& noise) {
  require_same_shape(z_t, score, "reverse_step");
  require_same_shape(z_t, noise, "reverse_step");
  if (t < 1) throw IndexError("reverse_step: t must be >= 1");
  if (t == 1 && max_abs(noise.data()) != 0.0) {
    throw InputError("reverse_step: noise must be zero at t = 1");
  }
  const double beta = schedule.beta(t);
  const double drift = 1.0 + 0.5 * beta;
  const double root = std::sqrt(beta);
  Tensor out = Tensor::like(z_t);
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = drift * z_t[i] + beta * score[i] + root * noise[i];
  }
  return out;
}

GuidedUpdate guided_update(const Tensor& m, const Tensor& g, double eta, double score_norm) {
  require_same_shape(m, g, "guided_update");
  if (eta < 0.0) throw ConfigError("eta must be >= 0, got " + std::to_string(eta));
  const double gn = l2_norm(g.data());
  if (!(gn >= kDegenerateGradient)) return GuidedUpdate{m, 0.0, true};
  const double coeff = eta * score_norm / (gn * gn);
  Tensor z = m;
  for (size_t i = 0; i < z.size(); ++i) z[i] -= coeff * g[i];
  return GuidedUpdate{std::move(z), coeff * gn, false};
}

Tensor renoise(const Tensor& z_prev, int t, const NoiseSchedule& schedule, const Tensor& eps) {
  require_same_shape(z_prev, eps, "renoise");
  if (t < 1) throw IndexError("renoise: t must be >= 1");
  const double beta = schedule.beta(t);
  const double keep = std::sqrt(1.0 - beta);
  const double root = std::sqrt(beta);
  Tensor out = Tensor::like(z_prev);
  for (size_t i = 0; i < out.size(); ++i) out[i] = keep * z_prev[i] + root * eps[i];
  return out;
}

void require_finite(const Tensor& z, const char* what) {
  if (!all_finite(z.data())) {
    throw NumericalError(std::string(what) + ": non-finite entries in tensor " +
                         z.shape_string());
  }
}

}  // namespace dymo
