#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "urcdm/synthdata.hpp"
#include "urcdm/tensor.hpp"

namespace urcdm::metrics {

// Rows are samples.
using Features = Eigen::MatrixXd;

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::size_t dim() const = 0;
  virtual std::string id() const = 0;
  // patch: [3,H,W] in [0,1].
  virtual Eigen::VectorXd extract(const Tensor& patch) const = 0;

  Features extract_all(const std::vector<Tensor>& patches) const;
};

// Handcrafted deterministic embedding on a 32×32 resize:
//   per-channel 8-bin histograms (24)
//   16 seeded 5×5 filters per channel, ReLU, mean-pooled (48)
//   per-channel Haar detail energy at two levels (6)
class HandcraftedExtractor final : public FeatureExtractor {
 public:
  static constexpr std::size_t kInput = 32;
  static constexpr std::size_t kBins = 8;
  static constexpr std::size_t kFilters = 16;
  static constexpr std::size_t kFilterSize = 5;
  static constexpr std::size_t kDim = 3 * kBins + 3 * kFilters + 3 * 2;

  explicit HandcraftedExtractor(std::uint64_t seed = 0);
  std::size_t dim() const override { return kDim; }
  std::string id() const override;
  Eigen::VectorXd extract(const Tensor& patch) const override;

 private:
  std::uint64_t seed_;
  std::vector<double> filters_;  // [kFilters][5][5]
};

struct FeatureMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased
  std::size_t count = 0;

  static FeatureMoments fit(const Features& f);  // needs >= 2 samples
  bool full_rank_sample() const { return count >= static_cast<std::size_t>(mean.size()) + 1; }
};

double frechet_distance(const FeatureMoments& a, const FeatureMoments& b);

// k-th nearest-neighbour distance of every row, excluding the row itself.
Eigen::VectorXd knn_radii(const Features& f, std::size_t k);
double improved_precision(const Features& real, const Features& gen, std::size_t k = 3);
double improved_recall(const Features& real, const Features& gen, std::size_t k = 3);

// ---- patch sampling --------------------------------------------------------

struct CropSpec {
  double scale = 1.0;  // crop side = base / scale
  double u = 0.0, v = 0.0;  // position as a fraction of the free range
  std::size_t real = 0, gen = 0;  // pyramid indices
};

std::vector<CropSpec> draw_crop_specs(std::size_t count, const std::vector<double>& scales,
                                      std::size_t n_real, std::size_t n_gen, std::uint64_t seed);
Tensor take_crop(const Tensor& img, const CropSpec& spec, std::size_t base);

struct PfidConfig {
  std::size_t crops = 2000;
  std::vector<double> scales{1.0, 0.5, 0.25};
  std::size_t base = 32;  // crop side at scale 1
  int level = 2;
  std::uint64_t seed = 0;
};

double pfid(const std::vector<synth::Pyramid>& real, const std::vector<synth::Pyramid>& gen,
            const PfidConfig& cfg, const FeatureExtractor& fx);

// Uniform random patches of one level (white patches kept).
std::vector<Tensor> sample_patches(const std::vector<synth::Pyramid>& set, int level, std::size_t count,
                                   std::size_t size, std::uint64_t seed);

// ---- reports ---------------------------------------------------------------

struct MetricEntry {
  std::string name;
  double value = 0.0;
  std::size_t real_count = 0;
  std::size_t gen_count = 0;
};

struct Report {
  std::vector<MetricEntry> entries;
  std::uint64_t seed = 0;
  std::string extractor;
  std::size_t k = 3;

  const MetricEntry& get(const std::string& name) const;
};

std::string format_report_text(const Report& r);
std::string format_report_json(const Report& r);
Report parse_report_json(const std::string& text);  // kConfig on schema errors

struct EvalConfig {
  std::size_t patches_per_level = 2000;
  std::size_t k = 3;
  PfidConfig pfid{};
  std::uint64_t seed = 0;
};

// FID/IP/IR per magnification level plus pFID. Real and generated patches
// are drawn from streams with the same seed, so identical sets score exactly.
Report evaluate(const std::vector<synth::Pyramid>& real, const std::vector<synth::Pyramid>& gen,
                const EvalConfig& cfg, const FeatureExtractor& fx);

}  // namespace urcdm::metrics
