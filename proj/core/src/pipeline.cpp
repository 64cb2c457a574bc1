#include "urcdm/pipeline.hpp"

#include <filesystem>

#include "urcdm/error.hpp"
#include "urcdm/image.hpp"
#include "urcdm/layers.hpp"

namespace urcdm::pipeline {

using synth::Slot;
using synth::Stage;

std::size_t slot_resolution(std::size_t patch, Slot slot) {
  switch (slot) {
    case Slot::kBase: return patch / 4;
    case Slot::kSR1: return patch / 2;
    case Slot::kSR2: return patch;
  }
  return patch;
}

net::ModelSpec model_spec(Stage stage, Slot slot, const ModelOptions& opts) {
  net::ModelSpec spec;
  auto& n = spec.net;
  n.resolution = slot_resolution(opts.patch, slot);
  n.base_width = opts.base_width;
  n.levels = opts.levels;
  n.groups = opts.groups;
  const bool contextual = stage != Stage::kLow;
  n.condition_images = (contextual ? 1 : 0) + (slot != Slot::kBase ? 1 : 0);
  if (n.condition_images == 0) {
    n.conditioning = net::ConditioningMode::kNone;
  } else if (contextual && opts.inpaint_mask) {
    n.conditioning = net::ConditioningMode::kLowResImageInpaintMask;
  } else {
    n.conditioning = net::ConditioningMode::kLowResImage;
  }
  n.validate();
  spec.target = opts.target.empty()
                    ? (slot == Slot::kBase ? diffusion::PredictionTarget::kEpsilon : diffusion::PredictionTarget::kV)
                    : diffusion::prediction_target_from_string(opts.target);
  spec.schedule_steps = opts.schedule_steps;
  return spec;
}

namespace {

Tensor stack(const std::vector<Tensor>& items) {
  Shape s{items.size()};
  s.insert(s.end(), items.front().shape().begin(), items.front().shape().end());
  Tensor out(s);
  const std::size_t per = items.front().size();
  for (std::size_t k = 0; k < items.size(); ++k) std::copy(items[k].data(), items[k].data() + per, out.data() + k * per);
  return out;
}

// Synthetic constraint shaped like a tile's known region: none, top strip,
// left strip or both, in proportions that mirror an interior-heavy grid.
Tensor draw_mask(std::size_t r, std::size_t strip, NoiseStream& s) {
  Tensor m({1, r, r});
  const double u = s.uniform();
  const bool both = u < 0.55;
  const bool top = both || (u >= 0.55 && u < 0.70);
  const bool left = both || (u >= 0.70 && u < 0.85);
  for (std::size_t y = 0; y < r; ++y) {
    for (std::size_t x = 0; x < r; ++x) m[y * r + x] = ((top && y < strip) || (left && x < strip)) ? 1.0 : 0.0;
  }
  return m;
}

}  // namespace

train::Batch make_batch(const synth::TrainingSet& set, const net::ModelSpec& spec, const BatchOptions& opts,
                        NoiseStream& stream) {
  if (opts.batch == 0) fail(ErrorKind::kConfig, "batch size must be positive");
  const auto& n = spec.net;
  const std::size_t r = n.resolution;
  const bool contextual = set.stage() != Stage::kLow;
  const bool is_sr = n.condition_images > (contextual ? 1u : 0u);
  const bool mask = n.conditioning == net::ConditioningMode::kLowResImageInpaintMask;
  if (n.condition_images != (contextual ? 1u : 0u) + (is_sr ? 1u : 0u)) {
    fail(ErrorKind::kConfig, "model conditioning does not match the training stage");
  }

  std::vector<Tensor> targets, lows, contexts, masks, knowns;
  for (std::size_t b = 0; b < opts.batch; ++b) {
    auto ex = set.example(stream.below(set.size()));
    const std::size_t P = ex.target.dim(1);
    if (P % r != 0) fail(ErrorKind::kConfig, "model resolution does not divide the patch size");
    if (opts.augment) {
      const int k = static_cast<int>(stream.below(8));
      ex.target = image::dihedral(ex.target, k);
      if (ex.context) ex.context = image::dihedral(*ex.context, k);
    }
    Tensor target = image::area_resize(ex.target, r, r);
    if (is_sr) lows.push_back(nn::resize_bilinear(image::area_resize(ex.target, r / 2, r / 2), r, r));
    if (contextual) contexts.push_back(image::area_resize(*ex.context, r, r));
    if (mask) {
      const auto strip = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(opts.overlap * r)));
      Tensor m = draw_mask(r, strip, stream);
      Tensor k = target;
      const std::size_t hw = r * r;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t q = 0; q < hw; ++q) k[ch * hw + q] *= m[q];
      }
      masks.push_back(std::move(m));
      knowns.push_back(std::move(k));
    }
    targets.push_back(std::move(target));
  }
  train::Batch batch;
  batch.images = stack(targets);
  if (is_sr) batch.cond.images.push_back(stack(lows));
  if (contextual) batch.cond.images.push_back(stack(contexts));
  if (mask) {
    batch.cond.mask = stack(masks);
    batch.cond.known = stack(knowns);
  }
  return batch;
}

std::string checkpoint_name(Stage stage, Slot slot) {
  return std::string(synth::to_string(stage)) + "_" + synth::to_string(slot) + ".ckpt";
}

std::array<cascade::CDM, 3> Cascade::cdms() const {
  std::array<cascade::CDM, 3> out;
  for (int s = 0; s < 3; ++s) {
    for (int k = 0; k < 3; ++k) {
      if (!models[s * 3 + k]) fail(ErrorKind::kState, "cascade: model not loaded");
    }
    out[s] = {models[s * 3].get(), models[s * 3 + 1].get(), models[s * 3 + 2].get()};
  }
  return out;
}

Cascade load_cascade(const std::string& dir) {
  Cascade c;
  for (int s = 0; s < 3; ++s) {
    for (int k = 0; k < 3; ++k) {
      const auto path = std::filesystem::path(dir) / checkpoint_name(static_cast<Stage>(s), static_cast<Slot>(k));
      if (!std::filesystem::exists(path)) fail(ErrorKind::kIo, "missing checkpoint " + path.string());
      c.models[s * 3 + k] = std::make_unique<net::ScoreModel>(net::ScoreModel::load(path.string()));
    }
  }
  return c;
}

}  // namespace urcdm::pipeline
