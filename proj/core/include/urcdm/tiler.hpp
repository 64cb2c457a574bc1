#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "urcdm/tensor.hpp"

namespace urcdm::tiling {

enum class TileStatus { kPending, kReady, kRunning, kDone, kSkippedWhite };
const char* to_string(TileStatus s);

struct TileSpec {
  std::size_t i = 0, j = 0;  // grid row, column
  std::size_t y = 0, x = 0;  // pixel origin on the canvas
  std::size_t size = 0;      // P
  std::uint64_t seed = 0;
};

struct TileGrid {
  std::size_t canvas = 0;  // W
  std::size_t patch = 0;   // P
  std::size_t stride = 0;  // S
  std::size_t n = 0;       // tiles per side
  std::vector<TileSpec> tiles;  // row-major

  std::size_t index(std::size_t i, std::size_t j) const { return i * n + j; }
  const TileSpec& at(std::size_t i, std::size_t j) const { return tiles[index(i, j)]; }
  std::size_t overlap() const { return patch - stride; }
};

// Stride as an exact integer; kGeometry when P·(1−ω) is not a positive integer.
std::size_t stride_for(std::size_t patch, double overlap_fraction);

// Throws kGeometry naming the offending remainder.
TileGrid plan_grid(std::size_t canvas, std::size_t patch, double overlap_fraction,
                   std::uint64_t global_seed = 0, std::uint64_t stage = 0);

// ---- wavefront DAG --------------------------------------------------------

std::vector<std::size_t> dependencies(const TileGrid& g, std::size_t tile);
std::vector<std::size_t> dependents(const TileGrid& g, std::size_t tile);
// Tiles grouped by anti-diagonal i+j.
std::vector<std::vector<std::size_t>> wavefronts(const TileGrid& g);
// Number of tiles on anti-diagonal L of an n×n grid.
std::size_t wavefront_width(std::size_t n, std::size_t level);

// ---- canvas ---------------------------------------------------------------

class CanvasAssembly {
 public:
  CanvasAssembly(std::size_t channels, std::size_t size);

  // Writes a [C,P,P] tile. Pixels already written must receive identical
  // values; differences are counted, not thrown, so tests can inspect them.
  void write(const TileSpec& tile, const Tensor& pixels);

  const Tensor& image() const { return canvas_; }
  std::size_t size() const { return size_; }
  std::uint8_t writers(std::size_t y, std::size_t x) const { return writers_[y * size_ + x]; }
  bool written(std::size_t y, std::size_t x) const { return writers(y, x) > 0; }
  bool complete() const;
  std::size_t seam_mismatches() const { return mismatches_; }
  // Throws kInternal unless complete and seam-exact.
  void verify() const;

 private:
  std::size_t channels_, size_;
  Tensor canvas_;
  std::vector<std::uint8_t> writers_;
  std::size_t mismatches_ = 0;
};

// Pixels of a tile already fixed by its top and left neighbours.
struct KnownPixels {
  Tensor mask;    // [1,P,P] binary
  Tensor values;  // [C,P,P], zero where mask is 0
  std::size_t count() const;
};

// Top strip (if i>0) ∪ left strip (if j>0), values copied from the canvas.
// Throws kScheduling unless every dependency is Done or Skipped-White.
KnownPixels known_region(const TileGrid& g, std::size_t tile, const CanvasAssembly& canvas,
                         const std::vector<TileStatus>& status);

// Pixels of the tile covered by any tile earlier in raster order.
Tensor raster_prefix_mask(const TileGrid& g, std::size_t tile);

// ---- white-patch rule -----------------------------------------------------

struct WhiteRule {
  double pixel_min = 0.85;   // per-pixel min over channels must exceed this
  double pixel_fraction = 0.95;
  double mean_min = 0.90;
};

// values: [C,H,W] in [0,1].
bool is_white_patch(const Tensor& values, const WhiteRule& rule = {});

// Real-valued footprint of a canvas rect in the previous stage (scale = prev/cur).
struct Footprint {
  double y0, x0, y1, x1;
  // Smallest integer rect containing the footprint, clipped to [0, prev).
  void covering(std::size_t prev, long& iy0, long& ix0, long& iy1, long& ix1) const;
};
Footprint footprint(const TileSpec& tile, double scale);

// Bilinear upscale of the previous stage under the tile, sampled in canvas
// coordinates so overlapping substituted tiles agree exactly.
Tensor substitute_white(const TileSpec& tile, const Tensor& prev, std::size_t canvas_size);

// Context window of `window` pixels in `prev` centred on the tile's
// footprint; white outside `prev`. With strict=true a footprint that does not
// land on whole pixels is a geometry error.
Tensor center_context_crop(const Tensor& prev, const TileSpec& tile, std::size_t canvas_size,
                           std::size_t window, bool strict = false);

// ---- stage execution ------------------------------------------------------

struct TileOutcome {
  Tensor pixels;  // [C,P,P]
  bool skipped_white = false;
};

using TileGenerator = std::function<TileOutcome(const TileSpec&, const KnownPixels&)>;

struct StageEvent {
  std::size_t sequence = 0;
  double elapsed_ms = 0.0;
  std::size_t i = 0, j = 0;
  TileStatus status = TileStatus::kPending;
  std::uint64_t seed = 0;
};

std::string format_event(const StageEvent& e);
StageEvent parse_event(const std::string& line);

struct StageOptions {
  std::size_t workers = 1;
  std::size_t channels = 3;
  // Receives the partial canvas when a tile fails, before the error propagates.
  std::function<void(const CanvasAssembly&)> on_failure;
};

struct StageResult {
  CanvasAssembly canvas;
  std::vector<TileStatus> status;
  std::vector<StageEvent> events;
  std::size_t max_concurrent = 0;
};

// Runs every tile respecting the DAG with at most `workers` in flight.
// A failing tile aborts the stage with kTile naming (i,j).
StageResult run_stage(const TileGrid& g, const TileGenerator& generate, const StageOptions& opts);

}  // namespace urcdm::tiling
