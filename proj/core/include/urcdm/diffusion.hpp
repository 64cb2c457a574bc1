#pragma once

// Discrete variance-preserving diffusion: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
// The forward SDE dx = -1/2 beta x dt + sqrt(beta) dw is realised by the
// per-step betas below; reverse sampling is the ancestral chain.

#include <optional>
#include <string>
#include <vector>

#include "urcdm/rng.hpp"
#include "urcdm/tensor.hpp"

namespace urcdm::diffusion {

enum class ScheduleKind { kCosine, kLinear };
enum class PredictionTarget { kEpsilon, kV };

const char* to_string(ScheduleKind k);
const char* to_string(PredictionTarget t);
ScheduleKind schedule_kind_from_string(const std::string& s);
PredictionTarget prediction_target_from_string(const std::string& s);

inline constexpr std::size_t kNoiseEmbeddingDim = 32;

class NoiseSchedule {
 public:
  explicit NoiseSchedule(int steps = 250, ScheduleKind kind = ScheduleKind::kCosine);

  int steps() const { return steps_; }
  ScheduleKind kind() const { return kind_; }

  // Valid for t in [1,T]; alpha_bar(0) == 1 by definition.
  double beta(int t) const;
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const;
  double sigma(int t) const;  // sqrt(1 - alpha_bar)
  double posterior_variance(int t) const;

  // Drift and diffusion coefficients of the forward SDE at step t.
  double drift_coefficient(int t) const { return -0.5 * beta(t); }
  double diffusion_coefficient(int t) const;

  // Sinusoidal embedding of t/T, kNoiseEmbeddingDim values.
  std::vector<double> noise_embedding(int t) const;

 private:
  void check_step(int t, bool allow_zero) const;

  int steps_;
  ScheduleKind kind_;
  std::vector<double> betas_;       // index t-1
  std::vector<double> alpha_bars_;  // index t, alpha_bars_[0] = 1
};

// ---- forward process and targets -----------------------------------------

Tensor forward_diffuse(const NoiseSchedule& s, const Tensor& x0, int t, const Tensor& noise);
Tensor forward_diffuse_at(double alpha_bar, const Tensor& x0, const Tensor& noise);

Tensor training_target(const NoiseSchedule& s, const Tensor& x0, const Tensor& noise, int t,
                       PredictionTarget target);
Tensor training_target_at(double alpha_bar, const Tensor& x0, const Tensor& noise,
                          PredictionTarget target);

inline constexpr double kMinAlphaBarForEpsilonInversion = 1e-8;

Tensor predict_x0(const NoiseSchedule& s, const Tensor& x_t, const Tensor& prediction, int t,
                  PredictionTarget target);
Tensor predict_x0_at(double alpha_bar, const Tensor& x_t, const Tensor& prediction,
                     PredictionTarget target);

// Converts a network output under either target to the implied epsilon.
Tensor epsilon_from_prediction(double alpha_bar, const Tensor& x_t, const Tensor& prediction,
                               PredictionTarget target);

// One ancestral step t -> t-1. Draws fresh noise from `stream` only for t > 1.
// With `x0_bound` the posterior mean is formed from the x0 estimate clamped to
// [-bound, bound]; near t=T, where beta is large, an unclamped epsilon error is
// amplified by 1/sqrt(alpha_t).
Tensor reverse_step(const NoiseSchedule& s, const Tensor& x_t, const Tensor& prediction, int t,
                    PredictionTarget target, NoiseStream& stream,
                    std::optional<double> x0_bound = std::nullopt);

// ---- analytic oracle ------------------------------------------------------

// Exact score of the noised marginal N(sqrt(abar) mu, (abar s^2 + 1 - abar) I)
// when data ~ N(mu, s^2 I).
Tensor analytic_gaussian_score(const NoiseSchedule& sched, const Tensor& x_t, int t, double mu,
                               double s);

// The equivalent epsilon prediction, -sqrt(1-abar) * score.
Tensor analytic_gaussian_epsilon(const NoiseSchedule& sched, const Tensor& x_t, int t, double mu,
                                 double s);

}  // namespace urcdm::diffusion
