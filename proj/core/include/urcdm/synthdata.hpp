#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "urcdm/rng.hpp"
#include "urcdm/tensor.hpp"
#include "urcdm/tiler.hpp"

namespace urcdm::synth {

// Level 0 is the coarsest magnification.
struct Pyramid {
  std::string id;
  std::uint64_t seed = 0;
  std::array<Tensor, 3> levels;  // [3,W,W] each, values in [0,1]

  std::size_t size(int level) const { return levels[level].dim(1); }
};

struct GeneratorConfig {
  std::array<std::size_t, 3> sizes{32, 200, 1376};
  double background_min = 0.30;  // sampled uniformly in this band
  double background_max = 0.50;
  std::size_t blob_grid = 7;       // control points per side of the tissue field
  std::size_t texture_grid = 48;   // control points of the stroma texture
  double nuclei_per_kpx = 12.0;    // nuclei per 1000 tissue pixels at the finest level
  double nucleus_radius_min = 2.0;
  double nucleus_radius_max = 4.0;

  void validate() const;
};

Pyramid gen_pyramid(std::uint64_t seed, const GeneratorConfig& cfg = {});

// Fraction of finest-level pixels with min channel above the white threshold.
double background_fraction(const Tensor& img, double threshold = 0.85);

// ---- storage: tile_{level}_{row}_{col}.png plus a key=value manifest --------

constexpr std::size_t kTileSize = 256;

struct Manifest {
  std::string slide_id;
  std::array<std::size_t, 3> sizes{};
  std::size_t tile_size = kTileSize;
  std::size_t channels = 3;
  std::uint64_t seed = 0;
};

std::string format_manifest(const Manifest& m);
Manifest parse_manifest(const std::string& text);  // kDataset naming the bad field

void save_pyramid(const Pyramid& p, const std::string& dir);
// Levels not selected are left empty.
Pyramid load_pyramid(const std::string& dir, std::array<bool, 3> levels = {true, true, true});
std::vector<std::string> list_pyramids(const std::string& root);  // sorted subdirectories

// ---- training data ---------------------------------------------------------

enum class Stage { kLow = 0, kMid = 1, kHigh = 2 };
const char* to_string(Stage s);
Stage stage_from_string(const std::string& s);

enum class Slot { kBase = 0, kSR1 = 1, kSR2 = 2 };
const char* to_string(Slot s);
Slot slot_from_string(const std::string& s);

struct ExtractConfig {
  std::size_t patch = 32;       // P
  std::size_t crop_stride = 8;  // spacing of candidate crop origins
  tiling::WhiteRule white{};
};

// A crop of `patch` pixels at (y, x) on level `stage` of pyramid `pyramid`;
// level-0 examples cover the whole image.
struct CropRef {
  std::size_t pyramid = 0;
  long y = 0, x = 0;
};

struct TrainingExample {
  Tensor target;                 // [3,P,P]
  std::optional<Tensor> context; // [3,P,P] window from the coarser level
  int level = 0;
};

class TrainingSet {
 public:
  TrainingSet(const std::vector<Pyramid>* pyramids, Stage stage, ExtractConfig cfg,
              std::vector<CropRef> refs);
  std::size_t size() const { return refs_.size(); }
  Stage stage() const { return stage_; }
  const std::vector<CropRef>& refs() const { return refs_; }
  TrainingExample example(std::size_t k) const;

 private:
  const std::vector<Pyramid>* pyramids_;
  Stage stage_;
  ExtractConfig cfg_;
  std::vector<CropRef> refs_;
};

// Low: one example per pyramid. Mid/high: every non-white crop on the
// candidate lattice. Throws kDataset when nothing survives.
TrainingSet extract_training_set(const std::vector<Pyramid>& pyramids, Stage stage,
                                 const ExtractConfig& cfg = {});

}  // namespace urcdm::synth
