#pragma once

#include <array>
#include <memory>
#include <string>

#include "urcdm/cascade.hpp"
#include "urcdm/scorenet.hpp"
#include "urcdm/synthdata.hpp"
#include "urcdm/train.hpp"

// Glue shared by the command-line tools and the end-to-end tests.
namespace urcdm::pipeline {

struct ModelOptions {
  std::size_t patch = 32;  // r2; r1 = patch/2, r0 = patch/4
  std::size_t base_width = 8;
  std::size_t levels = 2;
  std::size_t groups = 4;
  int schedule_steps = 250;
  bool inpaint_mask = true;  // mask channels for mid/high models
  // Empty: epsilon for base models, v for super-resolution models.
  std::string target;
};

std::size_t slot_resolution(std::size_t patch, synth::Slot slot);
net::ModelSpec model_spec(synth::Stage stage, synth::Slot slot, const ModelOptions& opts);

struct BatchOptions {
  std::size_t batch = 8;
  double overlap = 0.125;  // strip width of synthetic inpainting masks
  bool augment = true;     // random dihedral transform
};

// Draws a training batch for `spec` from `set`.
train::Batch make_batch(const synth::TrainingSet& set, const net::ModelSpec& spec, const BatchOptions& opts,
                        NoiseStream& stream);

std::string checkpoint_name(synth::Stage stage, synth::Slot slot);  // e.g. "mid_sr1.ckpt"

// Nine loaded models and the CDM views over them.
struct Cascade {
  std::array<std::unique_ptr<net::ScoreModel>, 9> models;
  std::array<cascade::CDM, 3> cdms() const;
};

Cascade load_cascade(const std::string& dir);

}  // namespace urcdm::pipeline
