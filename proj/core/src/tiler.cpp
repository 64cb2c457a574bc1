#include "urcdm/tiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "urcdm/error.hpp"
#include "urcdm/image.hpp"
#include "urcdm/rng.hpp"

namespace urcdm::tiling {

const char* to_string(TileStatus s) {
  switch (s) {
    case TileStatus::kPending: return "pending";
    case TileStatus::kReady: return "ready";
    case TileStatus::kRunning: return "running";
    case TileStatus::kDone: return "done";
    case TileStatus::kSkippedWhite: return "skipped-white";
  }
  return "?";
}

std::size_t stride_for(std::size_t patch, double overlap_fraction) {
  if (patch == 0) fail(ErrorKind::kGeometry, "patch size must be positive");
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0)) {
    fail(ErrorKind::kGeometry, "overlap fraction must be in [0,1)");
  }
  const double s = static_cast<double>(patch) * (1.0 - overlap_fraction);
  const double r = std::round(s);
  if (std::abs(s - r) > 1e-9 || r < 1.0) {
    fail(ErrorKind::kGeometry, "stride P*(1-omega) = " + std::to_string(s) + " is not a positive integer");
  }
  return static_cast<std::size_t>(r);
}

TileGrid plan_grid(std::size_t canvas, std::size_t patch, double overlap_fraction,
                   std::uint64_t global_seed, std::uint64_t stage) {
  const std::size_t s = stride_for(patch, overlap_fraction);
  if (canvas < patch) {
    fail(ErrorKind::kGeometry, "canvas " + std::to_string(canvas) + " smaller than patch " +
                                   std::to_string(patch));
  }
  if ((canvas - patch) % s != 0) {
    fail(ErrorKind::kGeometry, "(W - P) = " + std::to_string(canvas - patch) + " leaves remainder " +
                                   std::to_string((canvas - patch) % s) + " modulo stride " +
                                   std::to_string(s));
  }
  TileGrid g;
  g.canvas = canvas;
  g.patch = patch;
  g.stride = s;
  g.n = (canvas - patch) / s + 1;
  g.tiles.reserve(g.n * g.n);
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = 0; j < g.n; ++j) {
      g.tiles.push_back({i, j, i * s, j * s, patch, stable_hash(global_seed, {stage, i, j})});
    }
  }
  return g;
}

std::vector<std::size_t> dependencies(const TileGrid& g, std::size_t tile) {
  const auto& t = g.tiles.at(tile);
  std::vector<std::size_t> d;
  if (t.i > 0) d.push_back(g.index(t.i - 1, t.j));
  if (t.j > 0) d.push_back(g.index(t.i, t.j - 1));
  return d;
}

std::vector<std::size_t> dependents(const TileGrid& g, std::size_t tile) {
  const auto& t = g.tiles.at(tile);
  std::vector<std::size_t> d;
  if (t.i + 1 < g.n) d.push_back(g.index(t.i + 1, t.j));
  if (t.j + 1 < g.n) d.push_back(g.index(t.i, t.j + 1));
  return d;
}

std::vector<std::vector<std::size_t>> wavefronts(const TileGrid& g) {
  std::vector<std::vector<std::size_t>> w(2 * g.n - 1);
  for (std::size_t k = 0; k < g.tiles.size(); ++k) w[g.tiles[k].i + g.tiles[k].j].push_back(k);
  return w;
}

std::size_t wavefront_width(std::size_t n, std::size_t level) {
  if (level + 1 >= 2 * n) return 0;
  return std::min({level + 1, n, 2 * n - 1 - level});
}

// ---------------------------------------------------------------------------

CanvasAssembly::CanvasAssembly(std::size_t channels, std::size_t size)
    : channels_(channels), size_(size), canvas_({channels, size, size}), writers_(size * size, 0) {}

void CanvasAssembly::write(const TileSpec& tile, const Tensor& pixels) {
  const std::size_t p = tile.size;
  if (pixels.shape() != Shape{channels_, p, p}) {
    fail(ErrorKind::kInvalidShape, "canvas write: tile " + shape_str(pixels.shape()));
  }
  if (tile.y + p > size_ || tile.x + p > size_) fail(ErrorKind::kGeometry, "canvas write: tile outside canvas");
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c < p; ++c) {
      const std::size_t q = (tile.y + r) * size_ + tile.x + c;
      const bool seen = writers_[q] > 0;
      for (std::size_t ch = 0; ch < channels_; ++ch) {
        double& dst = canvas_[ch * size_ * size_ + q];
        const double v = pixels[(ch * p + r) * p + c];
        if (seen && dst != v) ++mismatches_;
        dst = v;
      }
      if (writers_[q] < 255) ++writers_[q];
    }
  }
}

bool CanvasAssembly::complete() const {
  return std::all_of(writers_.begin(), writers_.end(), [](std::uint8_t w) { return w > 0; });
}

void CanvasAssembly::verify() const {
  if (!complete()) fail(ErrorKind::kInternal, "canvas has unwritten pixels");
  if (mismatches_ != 0) {
    fail(ErrorKind::kInternal, "canvas has " + std::to_string(mismatches_) + " seam mismatches");
  }
}

std::size_t KnownPixels::count() const {
  std::size_t c = 0;
  for (double v : mask.values()) c += v != 0.0;
  return c;
}

KnownPixels known_region(const TileGrid& g, std::size_t tile, const CanvasAssembly& canvas,
                         const std::vector<TileStatus>& status) {
  for (std::size_t d : dependencies(g, tile)) {
    if (status.at(d) != TileStatus::kDone && status.at(d) != TileStatus::kSkippedWhite) {
      fail(ErrorKind::kScheduling, "known_region: dependency (" + std::to_string(g.tiles[d].i) + "," +
                                       std::to_string(g.tiles[d].j) + ") not complete");
    }
  }
  const auto& t = g.tiles[tile];
  const std::size_t p = g.patch, ov = g.overlap(), c = canvas.image().dim(0), W = canvas.size();
  KnownPixels k{Tensor({1, p, p}), Tensor({c, p, p})};
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t col = 0; col < p; ++col) {
      const bool known = (t.i > 0 && r < ov) || (t.j > 0 && col < ov);
      if (!known) continue;
      k.mask[r * p + col] = 1.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        k.values[(ch * p + r) * p + col] = canvas.image()[(ch * W + t.y + r) * W + t.x + col];
      }
    }
  }
  return k;
}

Tensor raster_prefix_mask(const TileGrid& g, std::size_t tile) {
  const auto& t = g.tiles.at(tile);
  const std::size_t p = g.patch;
  Tensor mask({1, p, p});
  for (std::size_t k = 0; k < tile; ++k) {
    const auto& o = g.tiles[k];
    for (std::size_t r = 0; r < p; ++r) {
      for (std::size_t c = 0; c < p; ++c) {
        const std::size_t y = t.y + r, x = t.x + c;
        if (y >= o.y && y < o.y + p && x >= o.x && x < o.x + p) mask[r * p + c] = 1.0;
      }
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------

bool is_white_patch(const Tensor& values, const WhiteRule& rule) {
  require_rank(values, 3, "is_white_patch");
  const std::size_t c = values.dim(0), hw = values.dim(1) * values.dim(2);
  std::size_t white = 0;
  double sum = 0.0;
  for (std::size_t q = 0; q < hw; ++q) {
    double mn = values[q];
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = values[ch * hw + q];
      mn = std::min(mn, v);
      sum += v;
    }
    white += mn > rule.pixel_min;
  }
  const double frac = static_cast<double>(white) / static_cast<double>(hw);
  const double mean = sum / static_cast<double>(values.size());
  return frac >= rule.pixel_fraction && mean > rule.mean_min;
}

Footprint footprint(const TileSpec& tile, double scale) {
  return {tile.y * scale, tile.x * scale, (tile.y + tile.size) * scale, (tile.x + tile.size) * scale};
}

void Footprint::covering(std::size_t prev, long& iy0, long& ix0, long& iy1, long& ix1) const {
  constexpr double eps = 1e-9;
  const long hi = static_cast<long>(prev);
  iy0 = std::clamp(static_cast<long>(std::floor(y0 + eps)), 0L, hi);
  ix0 = std::clamp(static_cast<long>(std::floor(x0 + eps)), 0L, hi);
  iy1 = std::clamp(static_cast<long>(std::ceil(y1 - eps)), 0L, hi);
  ix1 = std::clamp(static_cast<long>(std::ceil(x1 - eps)), 0L, hi);
}

Tensor substitute_white(const TileSpec& tile, const Tensor& prev, std::size_t canvas_size) {
  require_rank(prev, 3, "substitute_white");
  const std::size_t c = prev.dim(0), p = tile.size;
  const double scale = static_cast<double>(prev.dim(1)) / static_cast<double>(canvas_size);
  Tensor out({c, p, p});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < p; ++r) {
      const double yp = (static_cast<double>(tile.y + r) + 0.5) * scale - 0.5;
      for (std::size_t col = 0; col < p; ++col) {
        const double xp = (static_cast<double>(tile.x + col) + 0.5) * scale - 0.5;
        out[(ch * p + r) * p + col] = image::sample_bilinear(prev, ch, yp, xp);
      }
    }
  }
  return out;
}

Tensor center_context_crop(const Tensor& prev, const TileSpec& tile, std::size_t canvas_size,
                           std::size_t window, bool strict) {
  require_rank(prev, 3, "center_context_crop");
  const double scale = static_cast<double>(prev.dim(1)) / static_cast<double>(canvas_size);
  if (strict) {
    for (double v : {tile.y * scale, tile.x * scale, tile.size * scale}) {
      if (std::abs(v - std::round(v)) > 1e-9) {
        fail(ErrorKind::kGeometry, "context mapping: tile (" + std::to_string(tile.i) + "," +
                                       std::to_string(tile.j) + ") maps to fractional coordinate " +
                                       std::to_string(v));
      }
    }
  }
  const double half = static_cast<double>(window) / 2.0;
  const double cy = (tile.y + tile.size / 2.0) * scale, cx = (tile.x + tile.size / 2.0) * scale;
  const long oy = static_cast<long>(std::floor(cy - half + 0.5));
  const long ox = static_cast<long>(std::floor(cx - half + 0.5));
  return image::crop(prev, oy, ox, window, window, image::kWhite);
}

// ---------------------------------------------------------------------------

std::string format_event(const StageEvent& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu %.3f %zu %zu %s %llu", e.sequence, e.elapsed_ms, e.i, e.j,
                to_string(e.status), static_cast<unsigned long long>(e.seed));
  return buf;
}

StageEvent parse_event(const std::string& line) {
  std::istringstream in(line);
  StageEvent e;
  std::string status;
  unsigned long long seed = 0;
  if (!(in >> e.sequence >> e.elapsed_ms >> e.i >> e.j >> status >> seed)) {
    fail(ErrorKind::kConfig, "malformed stage event: " + line);
  }
  e.seed = seed;
  for (auto s : {TileStatus::kPending, TileStatus::kReady, TileStatus::kRunning, TileStatus::kDone,
                 TileStatus::kSkippedWhite}) {
    if (status == to_string(s)) {
      e.status = s;
      return e;
    }
  }
  fail(ErrorKind::kConfig, "unknown tile status '" + status + "'");
}

StageResult run_stage(const TileGrid& g, const TileGenerator& generate, const StageOptions& opts) {
  if (opts.workers == 0) fail(ErrorKind::kConfig, "run_stage: worker count must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  StageResult res{CanvasAssembly(opts.channels, g.canvas),
                  std::vector<TileStatus>(g.tiles.size(), TileStatus::kPending), {}, 0};

  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::size_t> ready;
  std::size_t finished = 0, running = 0;
  std::exception_ptr failure;
  std::string failure_tile;

  auto log = [&](std::size_t k, TileStatus s) {  // caller holds mu
    res.status[k] = s;
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    res.events.push_back({res.events.size(), ms, g.tiles[k].i, g.tiles[k].j, s, g.tiles[k].seed});
  };

  log(0, TileStatus::kReady);
  ready.push_back(0);

  auto worker = [&] {
    std::unique_lock lock(mu);
    for (;;) {
      cv.wait(lock, [&] { return failure || finished == g.tiles.size() || !ready.empty(); });
      if (failure || finished == g.tiles.size()) return;
      const std::size_t k = ready.front();
      ready.pop_front();
      log(k, TileStatus::kRunning);
      res.max_concurrent = std::max(res.max_concurrent, ++running);
      const KnownPixels known = known_region(g, k, res.canvas, res.status);
      lock.unlock();

      TileOutcome out;
      std::exception_ptr err;
      try {
        out = generate(g.tiles[k], known);
      } catch (...) {
        err = std::current_exception();
      }

      lock.lock();
      --running;
      if (err) {
        if (!failure) {
          failure = err;
          failure_tile = "(" + std::to_string(g.tiles[k].i) + "," + std::to_string(g.tiles[k].j) + ")";
        }
        cv.notify_all();
        return;
      }
      try {
        res.canvas.write(g.tiles[k], out.pixels);
      } catch (...) {
        if (!failure) {
          failure = std::current_exception();
          failure_tile = "(" + std::to_string(g.tiles[k].i) + "," + std::to_string(g.tiles[k].j) + ")";
        }
        cv.notify_all();
        return;
      }
      log(k, out.skipped_white ? TileStatus::kSkippedWhite : TileStatus::kDone);
      ++finished;
      for (std::size_t d : dependents(g, k)) {
        const auto deps = dependencies(g, d);
        const bool ok = std::all_of(deps.begin(), deps.end(), [&](std::size_t q) {
          return res.status[q] == TileStatus::kDone || res.status[q] == TileStatus::kSkippedWhite;
        });
        if (ok && res.status[d] == TileStatus::kPending) {
          log(d, TileStatus::kReady);
          ready.push_back(d);
        }
      }
      cv.notify_all();
    }
  };

  const std::size_t n_threads = std::min(opts.workers, g.n);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_threads; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  if (failure) {
    if (opts.on_failure) opts.on_failure(res.canvas);
    try {
      std::rethrow_exception(failure);
    } catch (const std::exception& e) {
      fail(ErrorKind::kTile, "tile " + failure_tile + " failed: " + e.what());
    }
  }
  res.canvas.verify();
  return res;
}

}  // namespace urcdm::tiling
