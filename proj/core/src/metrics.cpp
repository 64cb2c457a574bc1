#include "urcdm/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "urcdm/error.hpp"
#include "urcdm/image.hpp"
#include "urcdm/rng.hpp"

namespace urcdm::metrics {

Features FeatureExtractor::extract_all(const std::vector<Tensor>& patches) const {
  Features f(static_cast<Eigen::Index>(patches.size()), static_cast<Eigen::Index>(dim()));
  for (std::size_t k = 0; k < patches.size(); ++k) f.row(static_cast<Eigen::Index>(k)) = extract(patches[k]);
  return f;
}

HandcraftedExtractor::HandcraftedExtractor(std::uint64_t seed) : seed_(seed) {
  NoiseStream s(stable_hash(seed, {0x66656174ULL}));
  constexpr std::size_t taps = kFilterSize * kFilterSize;
  filters_.resize(kFilters * taps);
  for (std::size_t f = 0; f < kFilters; ++f) {
    double* w = filters_.data() + f * taps;
    double mean = 0.0;
    for (std::size_t t = 0; t < taps; ++t) mean += (w[t] = s.normal());
    mean /= taps;
    double norm = 0.0;
    for (std::size_t t = 0; t < taps; ++t) {
      w[t] -= mean;
      norm += w[t] * w[t];
    }
    norm = std::sqrt(norm);
    for (std::size_t t = 0; t < taps; ++t) w[t] /= norm;
  }
}

std::string HandcraftedExtractor::id() const {
  return "handcrafted-d" + std::to_string(kDim) + "-seed" + std::to_string(seed_);
}

Eigen::VectorXd HandcraftedExtractor::extract(const Tensor& patch) const {
  require_rank(patch, 3, "feature extractor");
  if (patch.dim(0) != 3) fail(ErrorKind::kInvalidShape, "feature extractor: expected 3 channels");
  const Tensor x = image::area_resize(patch, kInput, kInput);
  constexpr std::size_t n = kInput, hw = n * n;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(kDim);
  std::size_t o = 0;

  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t q = 0; q < hw; ++q) {
      const double v = std::clamp(x[c * hw + q], 0.0, 1.0);
      const auto bin = std::min(kBins - 1, static_cast<std::size_t>(v * kBins));
      out[static_cast<Eigen::Index>(o + bin)] += 1.0 / hw;
    }
    o += kBins;
  }

  constexpr std::size_t m = n - kFilterSize + 1;
  for (std::size_t c = 0; c < 3; ++c) {
    const double* p = x.data() + c * hw;
    for (std::size_t f = 0; f < kFilters; ++f) {
      const double* w = filters_.data() + f * kFilterSize * kFilterSize;
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          double r = 0.0;
          for (std::size_t a = 0; a < kFilterSize; ++a) {
            for (std::size_t b = 0; b < kFilterSize; ++b) r += w[a * kFilterSize + b] * p[(i + a) * n + j + b];
          }
          acc += std::max(r, 0.0);
        }
      }
      out[static_cast<Eigen::Index>(o++)] = acc / (m * m);
    }
  }

  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> ll(x.data() + c * hw, x.data() + (c + 1) * hw);
    std::size_t size = n;
    for (int level = 0; level < 2; ++level) {
      const std::size_t h = size / 2;
      std::vector<double> next(h * h);
      double energy = 0.0;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < h; ++j) {
          const double a = ll[(2 * i) * size + 2 * j], b = ll[(2 * i) * size + 2 * j + 1];
          const double cc = ll[(2 * i + 1) * size + 2 * j], d = ll[(2 * i + 1) * size + 2 * j + 1];
          next[i * h + j] = (a + b + cc + d) / 2.0;
          const double lh = (a - b + cc - d) / 2.0, hl = (a + b - cc - d) / 2.0, hh = (a - b - cc + d) / 2.0;
          energy += lh * lh + hl * hl + hh * hh;
        }
      }
      out[static_cast<Eigen::Index>(o++)] = energy / (h * h);
      ll = std::move(next);
      size = h;
    }
  }
  return out;
}

FeatureMoments FeatureMoments::fit(const Features& f) {
  if (f.rows() < 2) fail(ErrorKind::kInvalidArgument, "moments: need at least 2 samples");
  if (!f.allFinite()) fail(ErrorKind::kNumeric, "moments: non-finite features");
  FeatureMoments m;
  m.count = static_cast<std::size_t>(f.rows());
  m.mean = f.colwise().mean().transpose();
  const Features centered = f.rowwise() - m.mean.transpose();
  m.cov = (centered.transpose() * centered) / static_cast<double>(f.rows() - 1);
  return m;
}

namespace {

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) fail(ErrorKind::kNumeric, "eigendecomposition failed");
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureMoments& a, const FeatureMoments& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != a.mean.size() || b.cov.rows() != b.mean.size()) {
    fail(ErrorKind::kInvalidShape, "frechet_distance: dimension mismatch");
  }
  if (!a.mean.allFinite() || !b.mean.allFinite() || !a.cov.allFinite() || !b.cov.allFinite()) {
    fail(ErrorKind::kNumeric, "frechet_distance: non-finite moments");
  }
  const Eigen::MatrixXd sa = sqrt_psd(0.5 * (a.cov + a.cov.transpose()));
  Eigen::MatrixXd inner = sa * b.cov * sa;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) fail(ErrorKind::kNumeric, "eigendecomposition failed");
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  if (d < 0.0) {
    if (d < -1e-8) fail(ErrorKind::kNumeric, "frechet_distance: negative result " + std::to_string(d));
    return 0.0;
  }
  return d;
}

namespace {

double coverage(const Features& manifold, const Features& probes, std::size_t k) {
  const Eigen::VectorXd radii = knn_radii(manifold, k);
  // Exact per-pair distances so that duplicates compare as exactly 0.
  std::size_t inside = 0;
  for (Eigen::Index p = 0; p < probes.rows(); ++p) {
    for (Eigen::Index m = 0; m < manifold.rows(); ++m) {
      if ((probes.row(p) - manifold.row(m)).norm() <= radii[m]) {
        ++inside;
        break;
      }
    }
  }
  return static_cast<double>(inside) / static_cast<double>(probes.rows());
}

}  // namespace

Eigen::VectorXd knn_radii(const Features& f, std::size_t k) {
  const auto n = static_cast<std::size_t>(f.rows());
  if (k == 0 || n < k + 1) {
    fail(ErrorKind::kInvalidArgument, "knn: need at least k+1 = " + std::to_string(k + 1) + " points, got " +
                                          std::to_string(n));
  }
  Eigen::VectorXd radii(f.rows());
  std::vector<double> d(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t w = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) d[w++] = (f.row(static_cast<Eigen::Index>(i)) - f.row(static_cast<Eigen::Index>(j))).norm();
    }
    std::nth_element(d.begin(), d.begin() + static_cast<long>(k - 1), d.end());
    radii[static_cast<Eigen::Index>(i)] = d[k - 1];
  }
  return radii;
}

double improved_precision(const Features& real, const Features& gen, std::size_t k) {
  if (static_cast<std::size_t>(gen.rows()) < k + 1) fail(ErrorKind::kInvalidArgument, "precision: generated set too small");
  if (real.cols() != gen.cols()) fail(ErrorKind::kInvalidShape, "precision: dimension mismatch");
  return coverage(real, gen, k);
}

double improved_recall(const Features& real, const Features& gen, std::size_t k) {
  if (static_cast<std::size_t>(real.rows()) < k + 1) fail(ErrorKind::kInvalidArgument, "recall: real set too small");
  if (real.cols() != gen.cols()) fail(ErrorKind::kInvalidShape, "recall: dimension mismatch");
  return coverage(gen, real, k);
}

// ---------------------------------------------------------------------------

std::vector<CropSpec> draw_crop_specs(std::size_t count, const std::vector<double>& scales,
                                      std::size_t n_real, std::size_t n_gen, std::uint64_t seed) {
  if (scales.empty() || n_real == 0 || n_gen == 0) fail(ErrorKind::kInvalidArgument, "pfid: empty inputs");
  for (double s : scales) {
    if (s != 1.0 && s != 0.5 && s != 0.25 && s != 0.125) {
      fail(ErrorKind::kConfig, "pfid: scale " + std::to_string(s) + " not in {1, 1/2, 1/4, 1/8}");
    }
  }
  NoiseStream s(stable_hash(seed, {0x70666964ULL}));
  std::vector<CropSpec> out(count);
  for (auto& c : out) {
    c.scale = scales[s.below(scales.size())];
    c.u = s.uniform();
    c.v = s.uniform();
    // One draw picks both slides, so equal-sized identical sets pair exactly.
    const double w = s.uniform();
    c.real = std::min(n_real - 1, static_cast<std::size_t>(w * static_cast<double>(n_real)));
    c.gen = std::min(n_gen - 1, static_cast<std::size_t>(w * static_cast<double>(n_gen)));
  }
  return out;
}

Tensor take_crop(const Tensor& img, const CropSpec& spec, std::size_t base) {
  const auto side = static_cast<std::size_t>(std::lround(static_cast<double>(base) / spec.scale));
  const std::size_t W = img.dim(1);
  if (side > W || img.dim(2) != W) fail(ErrorKind::kInternal, "pfid: crop larger than canvas");
  const std::size_t room = W - side + 1;
  const auto y = std::min(room - 1, static_cast<std::size_t>(spec.u * static_cast<double>(room)));
  const auto x = std::min(room - 1, static_cast<std::size_t>(spec.v * static_cast<double>(room)));
  return image::crop(img, static_cast<long>(y), static_cast<long>(x), side, side);
}

double pfid(const std::vector<synth::Pyramid>& real, const std::vector<synth::Pyramid>& gen,
            const PfidConfig& cfg, const FeatureExtractor& fx) {
  if (real.empty() || gen.empty()) fail(ErrorKind::kInvalidArgument, "pfid: empty pyramid set");
  for (double scale : cfg.scales) {
    const auto side = static_cast<std::size_t>(std::lround(static_cast<double>(cfg.base) / scale));
    for (const auto* set : {&real, &gen}) {
      for (const auto& p : *set) {
        if (side > p.size(cfg.level)) {
          fail(ErrorKind::kInvalidArgument, "pfid: crop side " + std::to_string(side) + " at scale " +
                                                std::to_string(scale) + " exceeds level size " +
                                                std::to_string(p.size(cfg.level)));
        }
      }
    }
  }
  const auto specs = draw_crop_specs(cfg.crops, cfg.scales, real.size(), gen.size(), cfg.seed);
  std::vector<Tensor> rc, gc;
  rc.reserve(specs.size());
  gc.reserve(specs.size());
  for (const auto& s : specs) {
    rc.push_back(take_crop(real[s.real].levels[cfg.level], s, cfg.base));
    gc.push_back(take_crop(gen[s.gen].levels[cfg.level], s, cfg.base));
  }
  return frechet_distance(FeatureMoments::fit(fx.extract_all(rc)), FeatureMoments::fit(fx.extract_all(gc)));
}

std::vector<Tensor> sample_patches(const std::vector<synth::Pyramid>& set, int level, std::size_t count,
                                   std::size_t size, std::uint64_t seed) {
  if (set.empty()) fail(ErrorKind::kInvalidArgument, "sample_patches: empty set");
  NoiseStream s(stable_hash(seed, {0x70617463ULL, static_cast<std::uint64_t>(level)}));
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const Tensor& img = set[s.below(set.size())].levels[level];
    const std::size_t W = img.dim(1);
    if (size > W) fail(ErrorKind::kInvalidArgument, "sample_patches: patch larger than level");
    const auto y = static_cast<long>(s.below(W - size + 1)), x = static_cast<long>(s.below(W - size + 1));
    out.push_back(image::crop(img, y, x, size, size));
  }
  return out;
}

// ---------------------------------------------------------------------------

const MetricEntry& Report::get(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  fail(ErrorKind::kNotFound, "report has no metric '" + name + "'");
}

std::string format_report_text(const Report& r) {
  std::ostringstream o;
  o.precision(17);
  o << "seed=" << r.seed << "\nextractor=" << r.extractor << "\nk=" << r.k << "\n";
  for (const auto& e : r.entries) {
    o << e.name << "=" << e.value << " real_count=" << e.real_count << " gen_count=" << e.gen_count << "\n";
  }
  return o.str();
}

std::string format_report_json(const Report& r) {
  nlohmann::json j;
  j["seed"] = r.seed;
  j["extractor"] = r.extractor;
  j["k"] = r.k;
  j["metrics"] = nlohmann::json::array();
  for (const auto& e : r.entries) {
    j["metrics"].push_back({{"name", e.name}, {"value", e.value}, {"real_count", e.real_count}, {"gen_count", e.gen_count}});
  }
  return j.dump(2);
}

Report parse_report_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    Report r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.extractor = j.at("extractor").get<std::string>();
    r.k = j.at("k").get<std::size_t>();
    for (const auto& m : j.at("metrics")) {
      r.entries.push_back({m.at("name").get<std::string>(), m.at("value").get<double>(),
                           m.at("real_count").get<std::size_t>(), m.at("gen_count").get<std::size_t>()});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("metric report: ") + e.what());
  }
}

Report evaluate(const std::vector<synth::Pyramid>& real, const std::vector<synth::Pyramid>& gen,
                const EvalConfig& cfg, const FeatureExtractor& fx) {
  Report r;
  r.seed = cfg.seed;
  r.extractor = fx.id();
  r.k = cfg.k;
  for (int level = 0; level < 3; ++level) {
    const std::size_t W = std::min(real.front().size(level), gen.front().size(level));
    const std::size_t size = std::min<std::size_t>(32, W / 2);
    const std::uint64_t s = stable_hash(cfg.seed, {static_cast<std::uint64_t>(level)});
    const Features fr = fx.extract_all(sample_patches(real, level, cfg.patches_per_level, size, s));
    const Features fg = fx.extract_all(sample_patches(gen, level, cfg.patches_per_level, size, s));
    const std::string tag = "_mag" + std::to_string(level);
    const std::size_t nr = static_cast<std::size_t>(fr.rows()), ng = static_cast<std::size_t>(fg.rows());
    r.entries.push_back({"fid" + tag, frechet_distance(FeatureMoments::fit(fr), FeatureMoments::fit(fg)), nr, ng});
    r.entries.push_back({"ip" + tag, improved_precision(fr, fg, cfg.k), nr, ng});
    r.entries.push_back({"ir" + tag, improved_recall(fr, fg, cfg.k), nr, ng});
  }
  PfidConfig pc = cfg.pfid;
  pc.seed = stable_hash(cfg.seed, {0x70ULL});
  r.entries.push_back({"pfid", pfid(real, gen, pc, fx), pc.crops, pc.crops});
  return r;
}

}  // namespace urcdm::metrics
