#include "urcdm/sampler.hpp"

#include <algorithm>

#include "urcdm/error.hpp"

namespace urcdm {

GaussianOracle::GaussianOracle(double mu, double s, std::size_t resolution,
                               diffusion::NoiseSchedule schedule, std::size_t channels,
                               std::size_t condition_images)
    : mu_(mu),
      s_(s),
      resolution_(resolution),
      channels_(channels),
      condition_images_(condition_images),
      schedule_(std::move(schedule)) {}

Tensor GaussianOracle::predict(const Tensor& x_t, int t, const ConditionInput*) const {
  return diffusion::analytic_gaussian_epsilon(schedule_, x_t, t, mu_, s_);
}

namespace {

void apply_known(Tensor& x, const KnownRegion& known, double alpha_bar, NoiseStream& stream) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const bool exact = alpha_bar == 1.0;
  Tensor target = known.values;
  if (!exact) {
    Tensor noise = stream.normal_like(known.values.shape());
    target = diffusion::forward_diffuse_at(alpha_bar, known.values, noise);
  }
  for (std::size_t b = 0; b < n; ++b) {
    const double* m = known.mask.data() + b * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* dst = x.data() + (b * c + ch) * hw;
      const double* src = target.data() + (b * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) {
        if (m[q] != 0.0) dst[q] = src[q];
      }
    }
  }
}

}  // namespace

Tensor sample_chain(const Denoiser& model, std::size_t batch, const ConditionInput* cond,
                    NoiseStream& stream, const KnownRegion* known) {
  const std::size_t r = model.resolution();
  const Shape shape{batch, model.channels(), r, r};
  if (known) {
    if (known->values.shape() != shape ||
        known->mask.shape() != Shape{batch, 1, r, r}) {
      fail(ErrorKind::kInvalidShape, "sample_chain: known region does not match model output");
    }
  }
  const auto& sched = model.schedule();
  Tensor x = stream.normal_like(shape);
  if (known) apply_known(x, *known, sched.alpha_bar(sched.steps()), stream);
  for (int t = sched.steps(); t >= 1; --t) {
    const Tensor pred = model.predict(x, t, cond);
    x = diffusion::reverse_step(sched, x, pred, t, model.target(), stream, model.x0_bound());
    if (!x.all_finite()) {
      fail(ErrorKind::kNumeric, "sample_chain: non-finite state at step " + std::to_string(t));
    }
    if (known) apply_known(x, *known, sched.alpha_bar(t - 1), stream);
  }
  return x;
}

Tensor to_model_space(const Tensor& img) {
  Tensor x(img.shape());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 2.0 * img[i] - 1.0;
  return x;
}

Tensor to_image_space(const Tensor& x) {
  Tensor img(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) img[i] = std::clamp(0.5 * (x[i] + 1.0), 0.0, 1.0);
  return img;
}

}  // namespace urcdm
