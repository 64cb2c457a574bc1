#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "urcdm/params.hpp"
#include "urcdm/rng.hpp"
#include "urcdm/scorenet.hpp"

namespace urcdm::train {

// One minibatch. Images are [N,C,R,R] in [0,1]; conditioning follows the
// ScoreNet contract (images in [0,1], optional mask/known).
struct Batch {
  Tensor images;
  ConditionInput cond;
};

using BatchSource = std::function<Batch(NoiseStream&)>;

// Bias-corrected exponential moving average.
class SmoothedLoss {
 public:
  explicit SmoothedLoss(double decay = 0.98);
  double update(double loss);
  double value() const;
  bool empty() const { return count_ == 0; }

 private:
  double decay_;
  double acc_ = 0.0;
  double weight_ = 0.0;
  std::size_t count_ = 0;
};

struct LossRecord {
  int step = 0;
  double loss = 0.0;
  double smoothed = 0.0;
  double grad_norm = 0.0;
};

std::string format_loss_line(const LossRecord& r);
LossRecord parse_loss_line(const std::string& line);  // throws kConfig

// Mean squared error against the training target; fills gradients when
// with_grad. Per-example steps t are drawn uniformly from [1,T].
double denoising_loss(net::ScoreModel& model, const Batch& batch, const std::vector<int>& steps,
                      const Tensor& noise, bool with_grad);

struct TrainConfig {
  int steps = 2000;
  double clip_norm = 1.0;
  AdamConfig adam{};
  std::uint64_t seed = 0;
  double smoothing = 0.98;
  int log_every = 10;
};

class Trainer {
 public:
  Trainer(net::ScoreModel& model, TrainConfig config);

  // One optimizer step. A non-finite loss throws kNumeric and leaves the
  // parameters untouched.
  LossRecord step(const Batch& batch);

  // Runs config.steps steps drawing batches from `source`; records every
  // log_every-th step (and the last one).
  std::vector<LossRecord> run(const BatchSource& source,
                              const std::function<void(const LossRecord&)>& on_log = {});

  const AdamState& optimizer() const { return adam_; }
  std::uint64_t steps_done() const { return adam_.step; }

 private:
  net::ScoreModel& model_;
  TrainConfig config_;
  AdamState adam_;
  NoiseStream stream_;
  SmoothedLoss smoothed_;
};

// One pass over fixed batches; returns the mean loss.
double train_epoch(net::ScoreModel& model, const std::vector<Batch>& batches, AdamState& adam,
                   NoiseStream& stream, double clip_norm = 1.0);

}  // namespace urcdm::train
