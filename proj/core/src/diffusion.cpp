#include "urcdm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "urcdm/error.hpp"

namespace urcdm::diffusion {

const char* to_string(ScheduleKind k) {
  return k == ScheduleKind::kCosine ? "cosine" : "linear";
}

const char* to_string(PredictionTarget t) {
  return t == PredictionTarget::kEpsilon ? "epsilon" : "v";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::kCosine;
  if (s == "linear") return ScheduleKind::kLinear;
  fail(ErrorKind::kConfig, "unknown schedule kind '" + s + "'");
}

PredictionTarget prediction_target_from_string(const std::string& s) {
  if (s == "epsilon") return PredictionTarget::kEpsilon;
  if (s == "v") return PredictionTarget::kV;
  fail(ErrorKind::kConfig, "unknown prediction target '" + s + "'");
}

NoiseSchedule::NoiseSchedule(int steps, ScheduleKind kind) : steps_(steps), kind_(kind) {
  if (steps < 2) fail(ErrorKind::kConfig, "noise schedule needs at least 2 steps");
  betas_.resize(static_cast<std::size_t>(steps));
  const double T = steps;
  if (kind == ScheduleKind::kCosine) {
    constexpr double s = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    for (int t = 1; t <= steps; ++t) {
      const double prev = f(t - 1.0) / f0;
      const double cur = f(static_cast<double>(t)) / f0;
      betas_[t - 1] = std::min(1.0 - cur / prev, 0.999);
    }
  } else {
    // Linear betas rescaled to the step count, as in the original DDPM.
    const double lo = 1e-4 * 1000.0 / T, hi = 0.02 * 1000.0 / T;
    for (int t = 1; t <= steps; ++t) {
      betas_[t - 1] = std::min(lo + (hi - lo) * (t - 1) / (T - 1.0), 0.999);
    }
  }
  alpha_bars_.resize(static_cast<std::size_t>(steps) + 1);
  alpha_bars_[0] = 1.0;
  for (int t = 1; t <= steps; ++t) alpha_bars_[t] = alpha_bars_[t - 1] * (1.0 - betas_[t - 1]);
}

void NoiseSchedule::check_step(int t, bool allow_zero) const {
  if (t < (allow_zero ? 0 : 1) || t > steps_) {
    fail(ErrorKind::kRange, "diffusion step " + std::to_string(t) + " outside [" +
                                (allow_zero ? "0" : "1") + "," + std::to_string(steps_) + "]");
  }
}

double NoiseSchedule::beta(int t) const {
  check_step(t, false);
  return betas_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
  check_step(t, true);
  return alpha_bars_[t];
}

double NoiseSchedule::sigma(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }

double NoiseSchedule::posterior_variance(int t) const {
  check_step(t, false);
  if (t == 1) return betas_[0];
  return betas_[t - 1] * (1.0 - alpha_bars_[t - 1]) / (1.0 - alpha_bars_[t]);
}

double NoiseSchedule::diffusion_coefficient(int t) const { return std::sqrt(beta(t)); }

std::vector<double> NoiseSchedule::noise_embedding(int t) const {
  check_step(t, true);
  constexpr std::size_t half = kNoiseEmbeddingDim / 2;
  const double pos = 1000.0 * static_cast<double>(t) / static_cast<double>(steps_);
  std::vector<double> e(kNoiseEmbeddingDim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    e[i] = std::sin(pos * freq);
    e[half + i] = std::cos(pos * freq);
  }
  return e;
}

Tensor forward_diffuse_at(double alpha_bar, const Tensor& x0, const Tensor& noise) {
  require_same_shape(x0, noise, "forward_diffuse");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

Tensor forward_diffuse(const NoiseSchedule& s, const Tensor& x0, int t, const Tensor& noise) {
  if (t < 1 || t > s.steps()) {
    fail(ErrorKind::kRange, "forward_diffuse: step " + std::to_string(t) + " outside [1," +
                                std::to_string(s.steps()) + "]");
  }
  return forward_diffuse_at(s.alpha_bar(t), x0, noise);
}

Tensor training_target_at(double alpha_bar, const Tensor& x0, const Tensor& noise,
                          PredictionTarget target) {
  require_same_shape(x0, noise, "training_target");
  if (target == PredictionTarget::kEpsilon) return noise;
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor v(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) v[i] = a * noise[i] - b * x0[i];
  return v;
}

Tensor training_target(const NoiseSchedule& s, const Tensor& x0, const Tensor& noise, int t,
                       PredictionTarget target) {
  if (t < 1 || t > s.steps()) fail(ErrorKind::kRange, "training_target: step out of range");
  return training_target_at(s.alpha_bar(t), x0, noise, target);
}

Tensor predict_x0_at(double alpha_bar, const Tensor& x_t, const Tensor& prediction,
                     PredictionTarget target) {
  require_same_shape(x_t, prediction, "predict_x0");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor x0(x_t.shape());
  if (target == PredictionTarget::kEpsilon) {
    if (alpha_bar < kMinAlphaBarForEpsilonInversion) {
      fail(ErrorKind::kNumeric, "predict_x0: alpha_bar below 1e-8 is ill-conditioned for epsilon");
    }
    for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = (x_t[i] - b * prediction[i]) / a;
  } else {
    for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = a * x_t[i] - b * prediction[i];
  }
  return x0;
}

Tensor predict_x0(const NoiseSchedule& s, const Tensor& x_t, const Tensor& prediction, int t,
                  PredictionTarget target) {
  if (t < 1 || t > s.steps()) fail(ErrorKind::kRange, "predict_x0: step out of range");
  return predict_x0_at(s.alpha_bar(t), x_t, prediction, target);
}

Tensor epsilon_from_prediction(double alpha_bar, const Tensor& x_t, const Tensor& prediction,
                               PredictionTarget target) {
  require_same_shape(x_t, prediction, "epsilon_from_prediction");
  if (target == PredictionTarget::kEpsilon) return prediction;
  // x_t = a x0 + b eps, v = a eps - b x0  =>  eps = a v + b x_t
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor eps(x_t.shape());
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = a * prediction[i] + b * x_t[i];
  return eps;
}

Tensor reverse_step(const NoiseSchedule& s, const Tensor& x_t, const Tensor& prediction, int t,
                    PredictionTarget target, NoiseStream& stream, std::optional<double> x0_bound) {
  const double beta = s.beta(t);
  const double ab = s.alpha_bar(t);
  const Tensor eps = epsilon_from_prediction(ab, x_t, prediction, target);
  Tensor out(x_t.shape());
  if (x0_bound) {
    // mean = c0 x0 + ct x_t, the Gaussian posterior q(x_{t-1} | x_t, x0).
    const double ab_prev = s.alpha_bar(t - 1);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double lim = *x0_bound;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x0 = std::clamp((x_t[i] - b * eps[i]) / a, -lim, lim);
      out[i] = c0 * x0 + ct * x_t[i];
    }
  } else {
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const double eps_coef = beta / std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = inv_sqrt_alpha * (x_t[i] - eps_coef * eps[i]);
    }
  }
  if (t > 1) {
    const double sd = std::sqrt(s.posterior_variance(t));
    for (auto& v : out.values()) v += sd * stream.normal();
  }
  return out;
}

Tensor analytic_gaussian_score(const NoiseSchedule& sched, const Tensor& x_t, int t, double mu,
                               double s) {
  const double ab = sched.alpha_bar(t);
  const double mean = std::sqrt(ab) * mu;
  const double var = ab * s * s + (1.0 - ab);
  Tensor score(x_t.shape());
  for (std::size_t i = 0; i < score.size(); ++i) score[i] = -(x_t[i] - mean) / var;
  return score;
}

Tensor analytic_gaussian_epsilon(const NoiseSchedule& sched, const Tensor& x_t, int t, double mu,
                                 double s) {
  Tensor eps = analytic_gaussian_score(sched, x_t, t, mu, s);
  eps *= -sched.sigma(t);
  return eps;
}

}  // namespace urcdm::diffusion
