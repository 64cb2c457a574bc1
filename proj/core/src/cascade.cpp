#include "urcdm/cascade.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "urcdm/error.hpp"
#include "urcdm/image.hpp"
#include "urcdm/layers.hpp"

namespace urcdm::cascade {

std::array<std::size_t, 3> CDM::resolutions() const {
  if (!base || !sr1 || !sr2) fail(ErrorKind::kConfig, "CDM: all three models are required");
  return {base->resolution(), sr1->resolution(), sr2->resolution()};
}

void CDM::validate(bool contextual) const {
  const auto r = resolutions();
  if (!(r[0] < r[1] && r[1] < r[2]) || r[1] % r[0] != 0 || r[2] % r[1] != 0) {
    fail(ErrorKind::kConfig, "CDM: resolutions must grow by integer factors");
  }
  const std::size_t ctx = contextual ? 1 : 0;
  const Denoiser* m[3] = {base, sr1, sr2};
  for (int k = 0; k < 3; ++k) {
    const std::size_t want = ctx + (k > 0 ? 1 : 0);
    if (m[k]->condition_images() != want) {
      fail(ErrorKind::kConfig, "CDM: model " + std::to_string(k) + " takes " +
                                   std::to_string(m[k]->condition_images()) + " conditioning images, expected " +
                                   std::to_string(want));
    }
    if (m[k]->channels() != 3) fail(ErrorKind::kConfig, "CDM: models must produce 3 channels");
  }
}

void Geometry::validate() const {
  const auto& W = sizes;
  if (!(W[0] < W[1] && W[1] < W[2])) fail(ErrorKind::kGeometry, "stage sizes must satisfy W1 < W2 < W3");
  if (W[0] != patch) {
    fail(ErrorKind::kGeometry, "W1 (" + std::to_string(W[0]) + ") must equal the patch size " + std::to_string(patch));
  }
  const std::size_t s = tiling::stride_for(patch, overlap);
  for (int k = 1; k < 3; ++k) {
    if ((W[k] - patch) % s != 0) {
      fail(ErrorKind::kGeometry, "W" + std::to_string(k + 1) + " - P = " + std::to_string(W[k] - patch) +
                                     " leaves remainder " + std::to_string((W[k] - patch) % s) +
                                     " modulo stride " + std::to_string(s));
    }
    if (strict_mapping) {
      for (std::size_t v : {patch, s}) {
        if ((v * W[k - 1]) % W[k] != 0) {
          fail(ErrorKind::kGeometry, "context mapping " + std::to_string(v) + "*" + std::to_string(W[k - 1]) +
                                         "/" + std::to_string(W[k]) + " is not an integer");
        }
      }
    }
  }
}

std::vector<StagePlan> plan(const Geometry& g) {
  g.validate();
  std::vector<StagePlan> out;
  out.push_back({1, g.sizes[0], 1, 0, 1, 1, 0.0, true});
  for (int k = 1; k < 3; ++k) {
    const auto grid = tiling::plan_grid(g.sizes[k], g.patch, g.overlap);
    StagePlan p;
    p.stage = k + 1;
    p.canvas = g.sizes[k];
    p.grid = grid.n;
    p.stride = grid.stride;
    p.wavefronts = 2 * grid.n - 1;
    p.max_wavefront = grid.n;
    p.footprint = static_cast<double>(g.patch) * g.sizes[k - 1] / g.sizes[k];
    p.integer_mapping = (g.patch * g.sizes[k - 1]) % g.sizes[k] == 0 &&
                        (grid.stride * g.sizes[k - 1]) % g.sizes[k] == 0;
    out.push_back(p);
  }
  return out;
}

std::string format_plan(const Geometry& g, const std::vector<StagePlan>& stages) {
  std::ostringstream o;
  o << "patch=" << g.patch << " overlap=" << g.overlap << "\n";
  for (const auto& s : stages) {
    o << "stage" << s.stage << " canvas=" << s.canvas << " grid=" << s.grid << "x" << s.grid
      << " tiles=" << s.grid * s.grid << " stride=" << s.stride << " wavefronts=" << s.wavefronts
      << " max_wavefront=" << s.max_wavefront << " footprint=" << s.footprint
      << " integer_mapping=" << (s.integer_mapping ? "yes" : "no") << "\n";
  }
  if (g.final_size != 0) o << "final_size=" << g.final_size << "\n";
  return o.str();
}

TileConstraint downsample_constraint(const TileConstraint& c, std::size_t r) {
  const std::size_t P = c.mask.dim(1);
  if (r == 0 || P % r != 0) fail(ErrorKind::kGeometry, "constraint: patch not divisible by resolution");
  if (r == P) return c;
  const std::size_t f = P / r;
  TileConstraint out{Tensor({1, r, r}), image::area_resize(c.values, r, r)};
  for (std::size_t y = 0; y < r; ++y) {
    for (std::size_t x = 0; x < r; ++x) {
      bool all = true;
      for (std::size_t dy = 0; dy < f && all; ++dy) {
        for (std::size_t dx = 0; dx < f && all; ++dx) all = c.mask[(y * f + dy) * P + x * f + dx] != 0.0;
      }
      out.mask[y * r + x] = all ? 1.0 : 0.0;
    }
  }
  const std::size_t hw = r * r;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t q = 0; q < hw; ++q) out.values[ch * hw + q] *= out.mask[q];
  }
  return out;
}

namespace {

Tensor batched(const Tensor& img) {
  Shape s{1};
  s.insert(s.end(), img.shape().begin(), img.shape().end());
  return img.reshaped(s);
}

Tensor sample_level(const Denoiser& model, std::vector<Tensor> images, const TileConstraint* known,
                    NoiseStream& stream) {
  const std::size_t r = model.resolution();
  ConditionInput cond;
  for (auto& im : images) cond.images.push_back(batched(im));
  std::optional<TileConstraint> kc;
  if (known) kc = downsample_constraint(*known, r);
  if (model.wants_inpaint_mask()) {
    cond.mask = kc ? batched(kc->mask) : Tensor({1, 1, r, r});
    cond.known = kc ? batched(kc->values) : Tensor({1, 3, r, r});
  }
  std::optional<KnownRegion> region;
  if (kc) region = KnownRegion{batched(kc->mask), to_model_space(batched(kc->values))};
  const bool has_cond = !cond.images.empty() || cond.mask.has_value();
  const Tensor x = sample_chain(model, 1, has_cond ? &cond : nullptr, stream, region ? &*region : nullptr);
  return to_image_space(x).reshaped({3, r, r});
}

}  // namespace

Tensor run_cdm(const CDM& cdm, const std::optional<Tensor>& context, const TileConstraint* known,
               NoiseStream& stream) {
  const auto r = cdm.resolutions();
  const Denoiser* models[3] = {cdm.base, cdm.sr1, cdm.sr2};
  if (context && context->rank() != 3) fail(ErrorKind::kInvalidShape, "run_cdm: context must be [3,P,P]");
  if (known && known->mask.dim(1) != r[2]) fail(ErrorKind::kInvalidShape, "run_cdm: constraint size");
  if (context && context->dim(0) != 3) fail(ErrorKind::kInvalidShape, "run_cdm: context must have 3 channels");
  const std::size_t ctx = context ? 1 : 0;
  if (cdm.base->condition_images() != ctx) {
    fail(ErrorKind::kConfig, context ? "run_cdm: context given to an unconditional cascade"
                                     : "run_cdm: contextual cascade needs a context window");
  }
  Tensor img;
  for (int k = 0; k < 3; ++k) {
    std::vector<Tensor> images;
    if (k > 0) images.push_back(nn::resize_bilinear(img, r[k], r[k]));
    if (context) images.push_back(image::area_resize(*context, r[k], r[k]));
    img = sample_level(*models[k], std::move(images), known, stream);
  }
  return img;
}

namespace {

void overwrite_known(Tensor& pixels, const tiling::KnownPixels& known) {
  const std::size_t hw = known.mask.size();
  for (std::size_t q = 0; q < hw; ++q) {
    if (known.mask[q] == 0.0) continue;
    for (std::size_t ch = 0; ch < 3; ++ch) pixels[ch * hw + q] = known.values[ch * hw + q];
  }
}

}  // namespace

tiling::TileOutcome generate_tile(const CDM& cdm, const TileJob& job, const tiling::KnownPixels& known) {
  const auto& tile = *job.tile;
  const Tensor& prev = *job.prev;
  const double scale = static_cast<double>(prev.dim(1)) / static_cast<double>(job.canvas_size);
  long y0, x0, y1, x1;
  tiling::footprint(tile, scale).covering(prev.dim(1), y0, x0, y1, x1);
  const Tensor region = image::crop(prev, y0, x0, static_cast<std::size_t>(y1 - y0), static_cast<std::size_t>(x1 - x0));

  tiling::TileOutcome out;
  if (tiling::is_white_patch(region, job.white)) {
    out.pixels = image::quantize8(tiling::substitute_white(tile, prev, job.canvas_size));
    out.skipped_white = true;
  } else {
    const Tensor context = center_context_crop(prev, tile, job.canvas_size, tile.size, job.strict_mapping);
    NoiseStream stream(tile.seed);
    std::optional<TileConstraint> c;
    if (known.count() > 0) c = TileConstraint{known.mask, known.values};
    out.pixels = image::quantize8(run_cdm(cdm, context, c ? &*c : nullptr, stream));
  }
  overwrite_known(out.pixels, known);
  return out;
}

GeneratedWSI generate_wsi(const std::array<CDM, 3>& cdms, const Geometry& g, const GenerateOptions& opts) {
  g.validate();
  for (int k = 0; k < 3; ++k) {
    cdms[k].validate(k > 0);
    if (cdms[k].resolutions()[2] != g.patch) {
      fail(ErrorKind::kConfig, "stage " + std::to_string(k + 1) + " cascade output does not match patch size");
    }
  }
  GeneratedWSI out;
  out.pyramid.id = "generated_" + std::to_string(opts.seed);
  out.pyramid.seed = opts.seed;

  NoiseStream s1(stable_hash(opts.seed, {1, 0, 0}));
  out.pyramid.levels[0] = image::quantize8(run_cdm(cdms[0], std::nullopt, nullptr, s1));
  out.status[0] = {tiling::TileStatus::kDone};
  if (opts.on_progress) opts.on_progress(1, 1, 1);

  for (int k = 1; k < 3; ++k) {
    const auto grid = tiling::plan_grid(g.sizes[k], g.patch, g.overlap, opts.seed, static_cast<std::uint64_t>(k + 1));
    const Tensor& prev = out.pyramid.levels[k - 1];
    std::atomic<std::size_t> done{0};
    auto gen = [&](const tiling::TileSpec& tile, const tiling::KnownPixels& known) {
      TileJob job{&tile, &prev, g.sizes[k], g.strict_mapping, opts.white};
      auto r = generate_tile(cdms[k], job, known);
      if (opts.on_progress) opts.on_progress(k + 1, ++done, grid.tiles.size());
      return r;
    };
    tiling::StageOptions so;
    so.workers = opts.workers;
    if (opts.on_failure) so.on_failure = [&, k](const tiling::CanvasAssembly& c) { opts.on_failure(k + 1, c); };
    auto res = tiling::run_stage(grid, gen, so);
    out.pyramid.levels[k] = res.canvas.image();
    out.events[k] = std::move(res.events);
    out.status[k] = std::move(res.status);
  }
  if (g.final_size != 0) {
    out.pyramid.levels[2] = image::crop_or_pad(out.pyramid.levels[2], g.final_size, g.final_size);
  }
  return out;
}

}  // namespace urcdm::cascade
