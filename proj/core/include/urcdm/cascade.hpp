#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "urcdm/sampler.hpp"
#include "urcdm/synthdata.hpp"
#include "urcdm/tiler.hpp"

namespace urcdm::cascade {

using tiling::center_context_crop;

// Three models base → SR1 → SR2. Non-owning.
struct CDM {
  const Denoiser* base = nullptr;
  const Denoiser* sr1 = nullptr;
  const Denoiser* sr2 = nullptr;

  std::array<std::size_t, 3> resolutions() const;
  // `contextual` marks mid/high stages, whose models also see the context.
  void validate(bool contextual) const;
};

struct Geometry {
  std::array<std::size_t, 3> sizes{32, 200, 1376};  // W1 < W2 < W3
  std::size_t patch = 32;                           // P = r2
  double overlap = 0.125;                           // ω
  // Require every context footprint to land on whole pixels.
  bool strict_mapping = false;
  // Optional final crop/pad of the last stage (0 = none).
  std::size_t final_size = 0;

  void validate() const;  // kGeometry
};

struct StagePlan {
  int stage = 0;  // 1-based
  std::size_t canvas = 0;
  std::size_t grid = 0;  // tiles per side (1 for stage 1)
  std::size_t stride = 0;
  std::size_t wavefronts = 0;
  std::size_t max_wavefront = 0;
  double footprint = 0.0;  // tile extent in previous-stage pixels
  bool integer_mapping = true;
};

std::vector<StagePlan> plan(const Geometry& g);
std::string format_plan(const Geometry& g, const std::vector<StagePlan>& stages);

// Known pixels of a tile at full patch resolution (image space).
struct TileConstraint {
  Tensor mask;    // [1,P,P]
  Tensor values;  // [3,P,P]
};

// Runs the three-model chain. `context` ([3,P,P], [0,1]) must be present iff
// the CDM is contextual; `known` constrains every level of the chain.
// Returns [3,r2,r2] in [0,1].
Tensor run_cdm(const CDM& cdm, const std::optional<Tensor>& context,
               const TileConstraint* known, NoiseStream& stream);

// Area-downsampled constraint at resolution r: a pixel is known only when its
// whole block is known.
TileConstraint downsample_constraint(const TileConstraint& c, std::size_t r);

struct TileJob {
  const tiling::TileSpec* tile = nullptr;
  const Tensor* prev = nullptr;  // previous stage image
  std::size_t canvas_size = 0;
  bool strict_mapping = false;
  tiling::WhiteRule white{};
};

// White footprints are substituted; others run the CDM with the context
// window and the inpainting constraint. Known pixels are copied exactly into
// the returned tile.
tiling::TileOutcome generate_tile(const CDM& cdm, const TileJob& job, const tiling::KnownPixels& known);

struct GenerateOptions {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  tiling::WhiteRule white{};
  std::function<void(int stage, const tiling::CanvasAssembly&)> on_failure;
  std::function<void(int stage, std::size_t done, std::size_t total)> on_progress;
};

struct GeneratedWSI {
  synth::Pyramid pyramid;
  std::array<std::vector<tiling::StageEvent>, 3> events;  // stage 1 has none
  std::array<std::vector<tiling::TileStatus>, 3> status;
};

GeneratedWSI generate_wsi(const std::array<CDM, 3>& cdms, const Geometry& g, const GenerateOptions& opts);

}  // namespace urcdm::cascade
