#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "urcdm/diffusion.hpp"
#include "urcdm/params.hpp"
#include "urcdm/sampler.hpp"

namespace urcdm::net {

enum class ConditioningMode { kNone, kLowResImage, kLowResImageInpaintMask };

const char* to_string(ConditioningMode m);
ConditioningMode conditioning_mode_from_string(const std::string& s);

struct ScoreNetConfig {
  std::size_t resolution = 8;  // square, a power of two times 8
  std::size_t channels = 3;
  std::size_t base_width = 8;
  std::size_t levels = 2;  // resolutions visited by the encoder
  std::size_t groups = 4;  // group-norm groups at every level
  std::size_t embed_width = 32;
  ConditioningMode conditioning = ConditioningMode::kNone;
  // 3-channel [0,1] images concatenated to x_t (low-res image, then any
  // context windows). Zero iff conditioning == kNone.
  std::size_t condition_images = 0;

  std::size_t input_channels() const;
  std::size_t width(std::size_t level) const { return base_width << level; }
  void validate() const;  // throws kConfig
};

// Activations kept between forward and backward. Opaque to callers.
struct Tape;

class TapeHandle {
 public:
  TapeHandle();
  ~TapeHandle();
  TapeHandle(TapeHandle&&) noexcept;
  TapeHandle& operator=(TapeHandle&&) noexcept;
  Tape* get() const { return tape_.get(); }
  bool recorded() const;

 private:
  std::unique_ptr<Tape> tape_;
};

// Miniature U-Net style denoiser. Stateless: parameters live in a ParamStore
// passed per call, so one ScoreNet can serve concurrent readers.
class ScoreNet {
 public:
  explicit ScoreNet(ScoreNetConfig config);

  const ScoreNetConfig& config() const { return config_; }

  // Fan-in scaled uniform weights, zero biases, unit norm gains, and a
  // zero output head so the fresh network predicts exactly 0.
  ParamStore init_params(std::uint64_t seed) const;

  // embedding: [N, kNoiseEmbeddingDim] noise-level features.
  Tensor predict(const ParamStore& params, const Tensor& x_t, const Tensor& embedding,
                 const ConditionInput* cond) const;

  Tensor forward(const ParamStore& params, const Tensor& x_t, const Tensor& embedding,
                 const ConditionInput* cond, TapeHandle& tape) const;

  // Accumulates dL/dθ into params' gradient slots. Throws kState when the
  // tape holds no forward pass.
  void backward(ParamStore& params, const TapeHandle& tape, const Tensor& d_out) const;

  // Assembles [x_t | conditioning channels] with all checks applied.
  Tensor assemble_input(const Tensor& x_t, const ConditionInput* cond) const;

 private:
  Tensor run(const ParamStore& params, const Tensor& x_t, const Tensor& embedding,
             const ConditionInput* cond, Tape* tape) const;

  ScoreNetConfig config_;
};

Tensor noise_embedding_batch(const diffusion::NoiseSchedule& sched, const std::vector<int>& steps);

// ---- a trained model: network + parameters + diffusion settings -----------

struct ModelSpec {
  ScoreNetConfig net;
  diffusion::PredictionTarget target = diffusion::PredictionTarget::kEpsilon;
  int schedule_steps = 250;
  diffusion::ScheduleKind schedule_kind = diffusion::ScheduleKind::kCosine;
};

class ScoreModel final : public Denoiser {
 public:
  ScoreModel(ModelSpec spec, ParamStore params);
  static ScoreModel initialize(const ModelSpec& spec, std::uint64_t seed);

  // Parameters plus "meta.*" entries that pin config, target and schedule.
  TensorMap to_checkpoint() const;
  static ScoreModel from_checkpoint(const TensorMap& entries);
  static ScoreModel load(const std::string& path);
  void save(const std::string& path) const;

  const ModelSpec& spec() const { return spec_; }
  const ScoreNet& net() const { return net_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  std::size_t resolution() const override { return spec_.net.resolution; }
  std::size_t channels() const override { return spec_.net.channels; }
  diffusion::PredictionTarget target() const override { return spec_.target; }
  const diffusion::NoiseSchedule& schedule() const override { return schedule_; }
  std::size_t condition_images() const override { return spec_.net.condition_images; }
  bool wants_inpaint_mask() const override {
    return spec_.net.conditioning == ConditioningMode::kLowResImageInpaintMask;
  }
  // Images are [0,1], so model-space data lies in [-1,1].
  std::optional<double> x0_bound() const override { return 1.0; }
  Tensor predict(const Tensor& x_t, int t, const ConditionInput* cond) const override;

 private:
  ModelSpec spec_;
  ScoreNet net_;
  ParamStore params_;
  diffusion::NoiseSchedule schedule_;
};

}  // namespace urcdm::net
