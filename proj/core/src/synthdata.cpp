#include "urcdm/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "urcdm/error.hpp"
#include "urcdm/image.hpp"
#include "urcdm/layers.hpp"

namespace urcdm::synth {

namespace fs = std::filesystem;

void GeneratorConfig::validate() const {
  if (!(sizes[0] > 0 && sizes[0] < sizes[1] && sizes[1] < sizes[2])) {
    fail(ErrorKind::kConfig, "generator: level sizes must be strictly increasing");
  }
  if (!(background_min > 0.0 && background_min <= background_max && background_max < 1.0)) {
    fail(ErrorKind::kConfig, "generator: background band must satisfy 0 < min <= max < 1");
  }
  if (blob_grid < 2 || texture_grid < 2) fail(ErrorKind::kConfig, "generator: grids need >= 2 points");
  if (nuclei_per_kpx < 0.0 || nucleus_radius_min <= 0.0 || nucleus_radius_max < nucleus_radius_min) {
    fail(ErrorKind::kConfig, "generator: bad nucleus parameters");
  }
}

namespace {

// Smooth random field: Gaussian control points bilinearly upsampled.
Tensor value_noise(NoiseStream& s, std::size_t grid, std::size_t size) {
  Tensor ctl = s.normal_like({1, 1, grid, grid});
  return nn::resize_bilinear(ctl, size, size).reshaped({size, size});
}

double smoothstep(double e0, double e1, double v) {
  const double t = std::clamp((v - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

Pyramid gen_pyramid(std::uint64_t seed, const GeneratorConfig& cfg) {
  cfg.validate();
  NoiseStream s(stable_hash(seed, {0x70797261ULL}));
  const std::size_t W = cfg.sizes[2], hw = W * W;

  // Tissue mask from a thresholded low-frequency field: the threshold is the
  // field's quantile at the sampled background fraction.
  const Tensor field = value_noise(s, cfg.blob_grid, W);
  const double bg = cfg.background_min + (cfg.background_max - cfg.background_min) * s.uniform();
  std::vector<double> sorted(field.values().begin(), field.values().end());
  const auto kth = static_cast<std::size_t>(bg * static_cast<double>(hw - 1));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(kth), sorted.end());
  const double thr = sorted[kth];
  const double edge = 0.02;

  const Tensor texture = value_noise(s, cfg.texture_grid, W);
  const Tensor grain = value_noise(s, cfg.texture_grid * 4, W);
  const std::array<double, 3> background{0.96, 0.95, 0.96};
  const std::array<double, 3> stroma{0.89, 0.58, 0.74};
  const std::array<double, 3> stroma_dark{0.78, 0.42, 0.64};
  const std::array<double, 3> nucleus{0.36, 0.21, 0.55};

  Tensor img({3, W, W});
  std::vector<double> tissue(hw);
  std::size_t tissue_px = 0;
  for (std::size_t q = 0; q < hw; ++q) {
    const double a = smoothstep(thr, thr + edge, field[q]);
    tissue[q] = a;
    tissue_px += a > 0.5;
    const double m = smoothstep(-1.2, 1.2, texture[q] + 0.5 * grain[q]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double st = stroma[c] + m * (stroma_dark[c] - stroma[c]);
      img[c * hw + q] = background[c] + a * (st - background[c]);
    }
  }

  // Nuclei: soft disks at uniformly drawn tissue locations.
  const auto nuclei = static_cast<std::size_t>(cfg.nuclei_per_kpx * static_cast<double>(tissue_px) / 1000.0);
  for (std::size_t k = 0; k < nuclei; ++k) {
    const double cy = s.uniform() * W, cx = s.uniform() * W;
    const double r = cfg.nucleus_radius_min + (cfg.nucleus_radius_max - cfg.nucleus_radius_min) * s.uniform();
    const double shade = 0.85 + 0.3 * s.uniform();
    const auto at = static_cast<std::size_t>(cy) * W + static_cast<std::size_t>(cx);
    if (tissue[at] < 0.5) continue;
    const long y0 = std::max(0L, static_cast<long>(cy - r - 1)), y1 = std::min<long>(W, static_cast<long>(cy + r + 2));
    const long x0 = std::max(0L, static_cast<long>(cx - r - 1)), x1 = std::min<long>(W, static_cast<long>(cx + r + 2));
    for (long y = y0; y < y1; ++y) {
      for (long x = x0; x < x1; ++x) {
        const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
        const double a = 1.0 - smoothstep(r - 0.75, r + 0.75, d);
        if (a <= 0.0) continue;
        const std::size_t q = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
        for (std::size_t c = 0; c < 3; ++c) {
          const double target = std::clamp(nucleus[c] * shade, 0.0, 1.0);
          img[c * hw + q] += a * (target - img[c * hw + q]);
        }
      }
    }
  }

  Pyramid p;
  p.seed = seed;
  p.id = "slide_" + std::to_string(seed);
  p.levels[2] = image::quantize8(img);
  for (int l = 0; l < 2; ++l) {
    p.levels[l] = image::quantize8(image::area_resize(img, cfg.sizes[l], cfg.sizes[l]));
  }
  return p;
}

double background_fraction(const Tensor& img, double threshold) {
  require_rank(img, 3, "background_fraction");
  const std::size_t c = img.dim(0), hw = img.dim(1) * img.dim(2);
  std::size_t white = 0;
  for (std::size_t q = 0; q < hw; ++q) {
    double mn = img[q];
    for (std::size_t ch = 1; ch < c; ++ch) mn = std::min(mn, img[ch * hw + q]);
    white += mn > threshold;
  }
  return static_cast<double>(white) / static_cast<double>(hw);
}

// ---------------------------------------------------------------------------

std::string format_manifest(const Manifest& m) {
  std::ostringstream o;
  o << "slide_id=" << m.slide_id << "\n"
    << "level0=" << m.sizes[0] << "\n"
    << "level1=" << m.sizes[1] << "\n"
    << "level2=" << m.sizes[2] << "\n"
    << "tile_size=" << m.tile_size << "\n"
    << "channels=" << m.channels << "\n"
    << "seed=" << m.seed << "\n";
  return o.str();
}

Manifest parse_manifest(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::kDataset, "manifest: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    if (kv.count(key)) fail(ErrorKind::kDataset, "manifest: duplicate field '" + key + "'");
    kv[key] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) fail(ErrorKind::kDataset, "manifest: missing field '" + k + "'");
    return it->second;
  };
  auto number = [&](const std::string& k) -> std::uint64_t {
    const std::string& v = get(k);
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
      fail(ErrorKind::kDataset, "manifest: field '" + k + "' is not a non-negative integer");
    }
    try {
      return std::stoull(v);
    } catch (const std::out_of_range&) {
      fail(ErrorKind::kDataset, "manifest: field '" + k + "' out of range");
    }
  };
  Manifest m;
  m.slide_id = get("slide_id");
  if (m.slide_id.empty()) fail(ErrorKind::kDataset, "manifest: field 'slide_id' is empty");
  for (int l = 0; l < 3; ++l) m.sizes[l] = number("level" + std::to_string(l));
  m.tile_size = number("tile_size");
  m.channels = number("channels");
  m.seed = number("seed");
  for (const auto& [k, v] : kv) {
    static const char* known[] = {"slide_id", "level0", "level1", "level2", "tile_size", "channels", "seed"};
    if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) ==
        std::end(known)) {
      fail(ErrorKind::kDataset, "manifest: unknown field '" + k + "'");
    }
  }
  if (m.channels != 3) fail(ErrorKind::kDataset, "manifest: field 'channels' must be 3");
  if (m.tile_size == 0) fail(ErrorKind::kDataset, "manifest: field 'tile_size' must be positive");
  for (int l = 0; l < 3; ++l) {
    if (m.sizes[l] == 0) fail(ErrorKind::kDataset, "manifest: field 'level" + std::to_string(l) + "' must be positive");
  }
  return m;
}

namespace {

std::string tile_name(int level, std::size_t row, std::size_t col) {
  return "tile_" + std::to_string(level) + "_" + std::to_string(row) + "_" + std::to_string(col) + ".png";
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p);
  if (!f) fail(ErrorKind::kIo, "cannot open " + p.string());
  std::ostringstream o;
  o << f.rdbuf();
  return o.str();
}

}  // namespace

void save_pyramid(const Pyramid& p, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + dir + ": " + ec.message());
  Manifest m{p.id, {p.size(0), p.size(1), p.size(2)}, kTileSize, 3, p.seed};
  for (int l = 0; l < 3; ++l) {
    const std::size_t W = p.size(l), tiles = (W + kTileSize - 1) / kTileSize;
    for (std::size_t r = 0; r < tiles; ++r) {
      for (std::size_t c = 0; c < tiles; ++c) {
        const std::size_t h = std::min(kTileSize, W - r * kTileSize), w = std::min(kTileSize, W - c * kTileSize);
        const Tensor t = image::crop(p.levels[l], static_cast<long>(r * kTileSize),
                                     static_cast<long>(c * kTileSize), h, w);
        image::write_png((fs::path(dir) / tile_name(l, r, c)).string(), t);
      }
    }
  }
  std::ofstream f(fs::path(dir) / "manifest.txt");
  f << format_manifest(m);
  if (!f) fail(ErrorKind::kIo, "cannot write manifest in " + dir);
}

Pyramid load_pyramid(const std::string& dir, std::array<bool, 3> levels) {
  const Manifest m = parse_manifest(read_text(fs::path(dir) / "manifest.txt"));
  Pyramid p;
  p.id = m.slide_id;
  p.seed = m.seed;
  for (int l = 0; l < 3; ++l) {
    if (!levels[l]) continue;
    const std::size_t W = m.sizes[l], ts = m.tile_size, tiles = (W + ts - 1) / ts;
    Tensor img({3, W, W});
    for (std::size_t r = 0; r < tiles; ++r) {
      for (std::size_t c = 0; c < tiles; ++c) {
        const Tensor t = image::read_png((fs::path(dir) / tile_name(l, r, c)).string());
        const std::size_t h = std::min(ts, W - r * ts), w = std::min(ts, W - c * ts);
        if (t.dim(1) != h || t.dim(2) != w) {
          fail(ErrorKind::kDataset, dir + ": " + tile_name(l, r, c) + " has unexpected size");
        }
        image::paste(img, t, r * ts, c * ts);
      }
    }
    p.levels[l] = std::move(img);
  }
  return p;
}

std::vector<std::string> list_pyramids(const std::string& root) {
  std::vector<std::string> out;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(root, ec)) {
    if (e.is_directory() && fs::exists(e.path() / "manifest.txt")) out.push_back(e.path().string());
  }
  if (ec) fail(ErrorKind::kIo, "cannot list " + root + ": " + ec.message());
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------

const char* to_string(Stage s) {
  switch (s) {
    case Stage::kLow: return "low";
    case Stage::kMid: return "mid";
    case Stage::kHigh: return "high";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  if (s == "low") return Stage::kLow;
  if (s == "mid") return Stage::kMid;
  if (s == "high") return Stage::kHigh;
  fail(ErrorKind::kConfig, "unknown stage '" + s + "' (expected low|mid|high)");
}

const char* to_string(Slot s) {
  switch (s) {
    case Slot::kBase: return "base";
    case Slot::kSR1: return "sr1";
    case Slot::kSR2: return "sr2";
  }
  return "?";
}

Slot slot_from_string(const std::string& s) {
  if (s == "base") return Slot::kBase;
  if (s == "sr1") return Slot::kSR1;
  if (s == "sr2") return Slot::kSR2;
  fail(ErrorKind::kConfig, "unknown model slot '" + s + "' (expected base|sr1|sr2)");
}

TrainingSet::TrainingSet(const std::vector<Pyramid>* pyramids, Stage stage, ExtractConfig cfg,
                         std::vector<CropRef> refs)
    : pyramids_(pyramids), stage_(stage), cfg_(cfg), refs_(std::move(refs)) {}

TrainingExample TrainingSet::example(std::size_t k) const {
  const CropRef& ref = refs_.at(k);
  const Pyramid& p = pyramids_->at(ref.pyramid);
  const int level = static_cast<int>(stage_);
  TrainingExample ex;
  ex.level = level;
  if (stage_ == Stage::kLow) {
    ex.target = image::area_resize(p.levels[0], cfg_.patch, cfg_.patch);
    return ex;
  }
  const std::size_t P = cfg_.patch;
  ex.target = image::crop(p.levels[level], ref.y, ref.x, P, P);
  tiling::TileSpec rect;
  rect.y = static_cast<std::size_t>(ref.y);
  rect.x = static_cast<std::size_t>(ref.x);
  rect.size = P;
  ex.context = tiling::center_context_crop(p.levels[level - 1], rect, p.size(level), P);
  return ex;
}

TrainingSet extract_training_set(const std::vector<Pyramid>& pyramids, Stage stage,
                                 const ExtractConfig& cfg) {
  if (cfg.patch == 0 || cfg.crop_stride == 0) fail(ErrorKind::kConfig, "extract: patch and stride must be positive");
  std::vector<CropRef> refs;
  const int level = static_cast<int>(stage);
  for (std::size_t k = 0; k < pyramids.size(); ++k) {
    const Pyramid& p = pyramids[k];
    if (stage == Stage::kLow) {
      if (!tiling::is_white_patch(p.levels[0], cfg.white)) refs.push_back({k, 0, 0});
      continue;
    }
    const std::size_t W = p.size(level);
    if (W < cfg.patch) fail(ErrorKind::kDataset, "extract: level smaller than patch");
    for (std::size_t y = 0; y + cfg.patch <= W; y += cfg.crop_stride) {
      for (std::size_t x = 0; x + cfg.patch <= W; x += cfg.crop_stride) {
        const Tensor c = image::crop(p.levels[level], static_cast<long>(y), static_cast<long>(x), cfg.patch, cfg.patch);
        if (!tiling::is_white_patch(c, cfg.white)) refs.push_back({k, static_cast<long>(y), static_cast<long>(x)});
      }
    }
  }
  if (refs.empty()) {
    fail(ErrorKind::kDataset, std::string("extract: no non-white examples for stage ") + to_string(stage));
  }
  return TrainingSet(&pyramids, stage, cfg, std::move(refs));
}

}  // namespace urcdm::synth
