#include "urcdm/train.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "urcdm/error.hpp"

namespace urcdm::train {

SmoothedLoss::SmoothedLoss(double decay) : decay_(decay) {
  if (!(decay >= 0.0 && decay < 1.0)) fail(ErrorKind::kConfig, "smoothing decay must be in [0,1)");
}

double SmoothedLoss::update(double loss) {
  acc_ = decay_ * acc_ + (1.0 - decay_) * loss;
  weight_ = decay_ * weight_ + (1.0 - decay_);
  ++count_;
  return value();
}

double SmoothedLoss::value() const {
  if (count_ == 0) fail(ErrorKind::kState, "SmoothedLoss: no samples");
  return acc_ / weight_;
}

std::string format_loss_line(const LossRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "step=%d loss=%.17g smoothed=%.17g grad_norm=%.17g", r.step, r.loss,
                r.smoothed, r.grad_norm);
  return buf;
}

LossRecord parse_loss_line(const std::string& line) {
  LossRecord r;
  std::istringstream in(line);
  std::string field;
  int seen = 0;
  while (in >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) fail(ErrorKind::kConfig, "loss line: malformed field '" + field + "'");
    const std::string k = field.substr(0, eq), v = field.substr(eq + 1);
    try {
      std::size_t used = 0;
      if (k == "step") {
        r.step = std::stoi(v, &used);
      } else if (k == "loss") {
        r.loss = std::stod(v, &used);
      } else if (k == "smoothed") {
        r.smoothed = std::stod(v, &used);
      } else if (k == "grad_norm") {
        r.grad_norm = std::stod(v, &used);
      } else {
        fail(ErrorKind::kConfig, "loss line: unknown field '" + k + "'");
      }
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::logic_error&) {
      fail(ErrorKind::kConfig, "loss line: bad value for '" + k + "'");
    }
    ++seen;
  }
  if (seen != 4) fail(ErrorKind::kConfig, "loss line: expected 4 fields");
  return r;
}

double denoising_loss(net::ScoreModel& model, const Batch& batch, const std::vector<int>& steps,
                      const Tensor& noise, bool with_grad) {
  const auto& sched = model.schedule();
  const Tensor& img = batch.images;
  require_rank(img, 4, "training batch");
  const std::size_t n = img.dim(0), per = img.size() / n;
  if (steps.size() != n) fail(ErrorKind::kInvalidShape, "denoising_loss: one step per example");
  require_same_shape(img, noise, "denoising_loss noise");

  Tensor x_t(img.shape()), target(img.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const double ab = sched.alpha_bar(steps[b]);
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    for (std::size_t q = b * per; q < (b + 1) * per; ++q) {
      const double x0 = 2.0 * img[q] - 1.0;
      x_t[q] = a * x0 + s * noise[q];
      target[q] = model.target() == diffusion::PredictionTarget::kEpsilon ? noise[q]
                                                                          : a * noise[q] - s * x0;
    }
  }
  const Tensor emb = net::noise_embedding_batch(sched, steps);
  const bool has_cond = !batch.cond.images.empty() || batch.cond.mask.has_value();
  const ConditionInput* cond = has_cond ? &batch.cond : nullptr;

  net::TapeHandle tape;
  const Tensor pred = with_grad ? model.net().forward(model.params(), x_t, emb, cond, tape)
                                : model.net().predict(model.params(), x_t, emb, cond);
  double loss = 0.0;
  Tensor d_out(pred.shape());
  const double scale = 2.0 / static_cast<double>(pred.size());
  for (std::size_t q = 0; q < pred.size(); ++q) {
    const double r = pred[q] - target[q];
    loss += r * r;
    d_out[q] = scale * r;
  }
  loss /= static_cast<double>(pred.size());
  if (with_grad && std::isfinite(loss)) {
    model.params().zero_grad();
    model.net().backward(model.params(), tape, d_out);
  }
  return loss;
}

namespace {

struct StepResult {
  double loss;
  double grad_norm;
};

StepResult optimize_once(net::ScoreModel& model, const Batch& batch, AdamState& adam,
                         NoiseStream& stream, double clip_norm) {
  const int T = model.schedule().steps();
  const std::size_t n = batch.images.dim(0);
  std::vector<int> steps(n);
  for (auto& t : steps) t = 1 + static_cast<int>(stream.below(static_cast<std::uint64_t>(T)));
  const Tensor noise = stream.normal_like(batch.images.shape());
  const double loss = denoising_loss(model, batch, steps, noise, true);
  if (!std::isfinite(loss)) {
    fail(ErrorKind::kNumeric, "training: non-finite loss at step " + std::to_string(adam.step + 1));
  }
  const double norm = global_grad_norm(model.params());
  if (!std::isfinite(norm)) {
    fail(ErrorKind::kNumeric, "training: non-finite gradient at step " + std::to_string(adam.step + 1));
  }
  clip_global_norm(model.params(), clip_norm);
  adam_step(model.params(), adam);
  return {loss, norm};
}

}  // namespace

Trainer::Trainer(net::ScoreModel& model, TrainConfig config)
    : model_(model),
      config_(config),
      stream_(stable_hash(config.seed, {0x747261696eULL})),
      smoothed_(config.smoothing) {
  if (config.steps < 0) fail(ErrorKind::kConfig, "train: steps must be >= 0");
  if (config.log_every < 1) fail(ErrorKind::kConfig, "train: log_every must be >= 1");
  if (!(config.clip_norm > 0.0)) fail(ErrorKind::kConfig, "train: clip_norm must be positive");
  if (!(config.adam.lr > 0.0)) fail(ErrorKind::kConfig, "train: learning rate must be positive");
  adam_.config = config.adam;
}

LossRecord Trainer::step(const Batch& batch) {
  const auto r = optimize_once(model_, batch, adam_, stream_, config_.clip_norm);
  LossRecord rec;
  rec.step = static_cast<int>(adam_.step);
  rec.loss = r.loss;
  rec.smoothed = smoothed_.update(r.loss);
  rec.grad_norm = r.grad_norm;
  return rec;
}

std::vector<LossRecord> Trainer::run(const BatchSource& source,
                                     const std::function<void(const LossRecord&)>& on_log) {
  std::vector<LossRecord> log;
  NoiseStream data_stream(stable_hash(config_.seed, {0x64617461ULL}));
  for (int s = 1; s <= config_.steps; ++s) {
    const LossRecord rec = step(source(data_stream));
    if (rec.step % config_.log_every == 0 || s == config_.steps) {
      log.push_back(rec);
      if (on_log) on_log(rec);
    }
  }
  return log;
}

double train_epoch(net::ScoreModel& model, const std::vector<Batch>& batches, AdamState& adam,
                   NoiseStream& stream, double clip_norm) {
  if (batches.empty()) fail(ErrorKind::kInvalidArgument, "train_epoch: no batches");
  double total = 0.0;
  for (const auto& b : batches) total += optimize_once(model, b, adam, stream, clip_norm).loss;
  return total / static_cast<double>(batches.size());
}

}  // namespace urcdm::train
