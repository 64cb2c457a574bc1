#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include "urcdm/diffusion.hpp"
#include "urcdm/rng.hpp"
#include "urcdm/tensor.hpp"

namespace urcdm {

// Conditioning fed alongside x_t. All images are [N,C,R,R] with values in
// [0,1] at the model's resolution; the mask is [N,1,R,R] and exactly binary.
struct ConditionInput {
  std::vector<Tensor> images;
  std::optional<Tensor> mask;
  std::optional<Tensor> known;
};

// Anything that can play the role of the learned network inside a reverse
// chain: the trained score network or an analytic oracle.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual std::size_t resolution() const = 0;
  virtual std::size_t channels() const { return 3; }
  virtual diffusion::PredictionTarget target() const = 0;
  virtual const diffusion::NoiseSchedule& schedule() const = 0;
  // Number of [0,1] conditioning images the model expects (0 = unconditional).
  virtual std::size_t condition_images() const { return 0; }
  virtual bool wants_inpaint_mask() const { return false; }
  // Bound on |x0| in model space used to clamp x0 estimates while sampling;
  // empty for unbounded data.
  virtual std::optional<double> x0_bound() const { return std::nullopt; }

  // x_t is [N,C,R,R] in model space ([-1,1] data scale).
  virtual Tensor predict(const Tensor& x_t, int t, const ConditionInput* cond) const = 0;
};

// Data ~ N(mu, s^2 I) in model space; predicts the exact epsilon.
class GaussianOracle final : public Denoiser {
 public:
  GaussianOracle(double mu, double s, std::size_t resolution,
                 diffusion::NoiseSchedule schedule = diffusion::NoiseSchedule(),
                 std::size_t channels = 3, std::size_t condition_images = 0);

  std::size_t resolution() const override { return resolution_; }
  std::size_t channels() const override { return channels_; }
  diffusion::PredictionTarget target() const override {
    return diffusion::PredictionTarget::kEpsilon;
  }
  const diffusion::NoiseSchedule& schedule() const override { return schedule_; }
  std::size_t condition_images() const override { return condition_images_; }
  Tensor predict(const Tensor& x_t, int t, const ConditionInput* cond) const override;

 private:
  double mu_, s_;
  std::size_t resolution_, channels_, condition_images_;
  diffusion::NoiseSchedule schedule_;
};

// Pixels under `mask` are held at `values` (model space) through the chain:
// after each step they are replaced by a fresh forward-diffusion of the
// values to the new noise level, and after the last step they are copied.
struct KnownRegion {
  Tensor mask;    // [N,1,R,R] binary
  Tensor values;  // [N,C,R,R], model space
};

// Runs the full ancestral chain from pure noise. Returns x0 in model space,
// [batch, C, R, R]. Every random draw comes from `stream`.
Tensor sample_chain(const Denoiser& model, std::size_t batch, const ConditionInput* cond,
                    NoiseStream& stream, const KnownRegion* known = nullptr);

// Image <-> model-space helpers: model = 2*img - 1.
Tensor to_model_space(const Tensor& img);
Tensor to_image_space(const Tensor& x);  // clamps to [0,1]

}  // namespace urcdm
