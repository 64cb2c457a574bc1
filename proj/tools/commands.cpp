#include "commands.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <random>

#include "urcdm/cascade.hpp"
#include "urcdm/error.hpp"
#include "urcdm/evalsvc.hpp"
#include "urcdm/image.hpp"
#include "urcdm/metrics.hpp"
#include "urcdm/pipeline.hpp"
#include "urcdm/synthdata.hpp"

namespace urcdm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- strict JSON binding ---------------------------------------------------

using Setter = std::function<void(const json&)>;
using Binding = std::map<std::string, Setter>;

[[noreturn]] void bad_type(const std::string& key, const char* want) {
  fail(ErrorKind::kConfig, "config key '" + key + "' must be " + want);
}

void read(const std::string& key, const json& v, std::string& out) {
  if (!v.is_string()) bad_type(key, "a string");
  out = v.get<std::string>();
}
void read(const std::string& key, const json& v, bool& out) {
  if (!v.is_boolean()) bad_type(key, "a boolean");
  out = v.get<bool>();
}
void read(const std::string& key, const json& v, double& out) {
  if (!v.is_number()) bad_type(key, "a number");
  out = v.get<double>();
}
void read(const std::string& key, const json& v, int& out) {
  if (!v.is_number_integer()) bad_type(key, "an integer");
  const auto x = v.get<long long>();
  if (x < INT32_MIN || x > INT32_MAX) bad_type(key, "a 32-bit integer");
  out = static_cast<int>(x);
}
void read(const std::string& key, const json& v, std::uint64_t& out) {
  if (!v.is_number_unsigned()) bad_type(key, "a non-negative integer");
  out = v.get<std::uint64_t>();
}
void read(const std::string& key, const json& v, std::array<std::size_t, 3>& out) {
  if (!v.is_array() || v.size() != 3) bad_type(key, "an array of 3 non-negative integers");
  for (std::size_t i = 0; i < 3; ++i) {
    std::uint64_t x = 0;
    read(key, v[i], x);
    out[i] = x;
  }
}
void read(const std::string& key, const json& v, std::vector<double>& out) {
  if (!v.is_array()) bad_type(key, "an array of numbers");
  out.clear();
  for (const auto& e : v) {
    double x = 0;
    read(key, e, x);
    out.push_back(x);
  }
}

template <class T>
void bind_key(Binding& b, const std::string& key, T& field) {
  b[key] = [key, &field](const json& v) {
    if constexpr (std::is_same_v<T, std::size_t> && !std::is_same_v<std::size_t, std::uint64_t>) {
      std::uint64_t x = 0;
      read(key, v, x);
      field = x;
    } else {
      read(key, v, field);
    }
  };
}

void apply_bindings(const Binding& b, const json& j) {
  if (!j.is_object()) fail(ErrorKind::kConfig, "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto it = b.find(key);
    if (it == b.end()) fail(ErrorKind::kConfig, "unknown config key '" + key + "'");
    it->second(value);
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorKind::kConfig, what);
}

void validate_geometry(const std::array<std::size_t, 3>& sizes, std::size_t patch, double overlap,
                       bool strict, std::size_t final_size) {
  cascade::Geometry g{sizes, patch, overlap, strict, final_size};
  g.validate();
}

cascade::Geometry geometry_of(const SampleCmdConfig& c) {
  return {c.sizes, c.patch, c.overlap, c.strict_mapping, c.final_size};
}

// ---- files ----------------------------------------------------------------

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) fail(ErrorKind::kIo, "cannot create " + p.parent_path().string() + ": " + ec.message());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  ensure_parent(p);
  std::ofstream f(p, std::ios::binary);
  if (!f) fail(ErrorKind::kIo, "cannot write " + p.string());
  f << text;
  if (!f) fail(ErrorKind::kIo, "write failed: " + p.string());
}

bool is_pyramid_dir(const fs::path& p) { return fs::exists(p / "manifest.txt"); }

std::vector<synth::Pyramid> load_set(const std::string& path) {
  if (!fs::exists(path)) fail(ErrorKind::kIo, "no such directory: " + path);
  std::vector<synth::Pyramid> out;
  if (is_pyramid_dir(path)) {
    out.push_back(synth::load_pyramid(path));
  } else {
    for (const auto& d : synth::list_pyramids(path)) out.push_back(synth::load_pyramid(d));
  }
  if (out.empty()) fail(ErrorKind::kDataset, "no pyramids under " + path);
  return out;
}

std::uint64_t digest_image(const Tensor& img) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto byte = static_cast<std::uint8_t>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
    h = (h ^ byte) * 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

synth::Pyramid noise_like(const synth::Pyramid& ref, std::uint64_t seed) {
  synth::Pyramid p;
  p.id = "noise";
  p.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int l = 0; l < 3; ++l) {
    Tensor t(ref.levels[l].shape());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    p.levels[l] = image::quantize8(t);
  }
  return p;
}

}  // namespace

// ---- validation -------------------------------------------------------------

void DatasetGenConfig::validate() const {
  require(count > 0, "count must be positive");
  require(!out.empty(), "out is required");
  synth::GeneratorConfig g;
  g.sizes = sizes;
  g.background_min = background_min;
  g.background_max = background_max;
  g.validate();
}

void TrainCmdConfig::validate() const {
  synth::stage_from_string(stage);
  synth::slot_from_string(slot);
  require(!data.empty(), "data is required");
  require(!out.empty(), "out is required");
  require(steps >= 0, "steps must be non-negative");
  require(batch > 0, "batch must be positive");
  require(std::isfinite(lr) && lr > 0, "lr must be positive");
  require(std::isfinite(clip_norm) && clip_norm > 0, "clip_norm must be positive");
  require(crop_stride > 0, "crop_stride must be positive");
  require(overlap > 0 && overlap < 0.5, "overlap must lie in (0, 0.5)");
  require(log_every > 0, "log_every must be positive");
  if (!target.empty()) diffusion::prediction_target_from_string(target);
  pipeline::ModelOptions o{patch, base_width, levels, groups, schedule_steps, inpaint_mask, target};
  pipeline::model_spec(synth::stage_from_string(stage), synth::slot_from_string(slot), o).net.validate();
}

void SampleCmdConfig::validate() const {
  require(!models.empty(), "models is required");
  require(dry_run || !out.empty(), "out is required");
  require(workers > 0, "workers must be positive");
  validate_geometry(sizes, patch, overlap, strict_mapping, final_size);
}

void MetricsCmdConfig::validate() const {
  require(!real.empty(), "real is required");
  require(!gen.empty(), "gen is required");
  require(!out.empty(), "out is required");
  require(patches_per_level > k + 1, "patches_per_level must exceed k + 1");
  require(k > 0, "k must be positive");
  require(pfid_crops > 1, "pfid_crops must be at least 2");
  require(!scales.empty(), "scales must not be empty");
  for (double s : scales) {
    require(s == 1.0 || s == 0.5 || s == 0.25 || s == 0.125, "scales must be drawn from {1, 0.5, 0.25, 0.125}");
  }
}

void ServeCmdConfig::validate() const {
  require(!host.empty(), "host is required");
  require(port >= 0 && port <= 65535, "port must lie in [0, 65535]");
  require(!pools.empty(), "pools is required");
  require(!log.empty(), "log is required");
  require(trials > 0, "trials must be positive");
}

void PlanCmdConfig::validate() const {
  validate_geometry(sizes, patch, overlap, strict_mapping, final_size);
}

// ---- JSON -------------------------------------------------------------------

json to_json(const DatasetGenConfig& c) {
  return {{"count", c.count}, {"seed", c.seed}, {"sizes", c.sizes},
          {"background_min", c.background_min}, {"background_max", c.background_max}, {"out", c.out}};
}

json to_json(const TrainCmdConfig& c) {
  return {{"stage", c.stage}, {"slot", c.slot}, {"data", c.data}, {"out", c.out},
          {"steps", c.steps}, {"batch", c.batch}, {"lr", c.lr}, {"clip_norm", c.clip_norm},
          {"seed", c.seed}, {"patch", c.patch}, {"base_width", c.base_width}, {"levels", c.levels},
          {"groups", c.groups}, {"schedule_steps", c.schedule_steps}, {"target", c.target},
          {"inpaint_mask", c.inpaint_mask}, {"max_pyramids", c.max_pyramids},
          {"crop_stride", c.crop_stride}, {"overlap", c.overlap}, {"log_every", c.log_every}};
}

json to_json(const SampleCmdConfig& c) {
  return {{"models", c.models}, {"out", c.out}, {"seed", c.seed}, {"workers", c.workers},
          {"sizes", c.sizes}, {"patch", c.patch}, {"overlap", c.overlap},
          {"strict_mapping", c.strict_mapping}, {"final_size", c.final_size}, {"dry_run", c.dry_run}};
}

json to_json(const MetricsCmdConfig& c) {
  return {{"real", c.real}, {"gen", c.gen}, {"out", c.out}, {"seed", c.seed},
          {"patches_per_level", c.patches_per_level}, {"k", c.k}, {"pfid_crops", c.pfid_crops},
          {"scales", c.scales}, {"extractor_seed", c.extractor_seed},
          {"noise_baseline", c.noise_baseline}};
}

json to_json(const ServeCmdConfig& c) {
  return {{"host", c.host}, {"port", c.port}, {"pools", c.pools}, {"log", c.log}, {"trials", c.trials}};
}

json to_json(const PlanCmdConfig& c) {
  return {{"sizes", c.sizes}, {"patch", c.patch}, {"overlap", c.overlap},
          {"strict_mapping", c.strict_mapping}, {"final_size", c.final_size}};
}

void apply_json(DatasetGenConfig& c, const json& j) {
  Binding b;
  bind_key(b, "count", c.count);
  bind_key(b, "seed", c.seed);
  bind_key(b, "sizes", c.sizes);
  bind_key(b, "background_min", c.background_min);
  bind_key(b, "background_max", c.background_max);
  bind_key(b, "out", c.out);
  apply_bindings(b, j);
}

void apply_json(TrainCmdConfig& c, const json& j) {
  Binding b;
  bind_key(b, "stage", c.stage);
  bind_key(b, "slot", c.slot);
  bind_key(b, "data", c.data);
  bind_key(b, "out", c.out);
  bind_key(b, "steps", c.steps);
  bind_key(b, "batch", c.batch);
  bind_key(b, "lr", c.lr);
  bind_key(b, "clip_norm", c.clip_norm);
  bind_key(b, "seed", c.seed);
  bind_key(b, "patch", c.patch);
  bind_key(b, "base_width", c.base_width);
  bind_key(b, "levels", c.levels);
  bind_key(b, "groups", c.groups);
  bind_key(b, "schedule_steps", c.schedule_steps);
  bind_key(b, "target", c.target);
  bind_key(b, "inpaint_mask", c.inpaint_mask);
  bind_key(b, "max_pyramids", c.max_pyramids);
  bind_key(b, "crop_stride", c.crop_stride);
  bind_key(b, "overlap", c.overlap);
  bind_key(b, "log_every", c.log_every);
  apply_bindings(b, j);
}

void apply_json(SampleCmdConfig& c, const json& j) {
  Binding b;
  bind_key(b, "models", c.models);
  bind_key(b, "out", c.out);
  bind_key(b, "seed", c.seed);
  bind_key(b, "workers", c.workers);
  bind_key(b, "sizes", c.sizes);
  bind_key(b, "patch", c.patch);
  bind_key(b, "overlap", c.overlap);
  bind_key(b, "strict_mapping", c.strict_mapping);
  bind_key(b, "final_size", c.final_size);
  bind_key(b, "dry_run", c.dry_run);
  apply_bindings(b, j);
}

void apply_json(MetricsCmdConfig& c, const json& j) {
  Binding b;
  bind_key(b, "real", c.real);
  bind_key(b, "gen", c.gen);
  bind_key(b, "out", c.out);
  bind_key(b, "seed", c.seed);
  bind_key(b, "patches_per_level", c.patches_per_level);
  bind_key(b, "k", c.k);
  bind_key(b, "pfid_crops", c.pfid_crops);
  bind_key(b, "scales", c.scales);
  bind_key(b, "extractor_seed", c.extractor_seed);
  bind_key(b, "noise_baseline", c.noise_baseline);
  apply_bindings(b, j);
}

void apply_json(ServeCmdConfig& c, const json& j) {
  Binding b;
  bind_key(b, "host", c.host);
  bind_key(b, "port", c.port);
  bind_key(b, "pools", c.pools);
  bind_key(b, "log", c.log);
  bind_key(b, "trials", c.trials);
  apply_bindings(b, j);
}

void apply_json(PlanCmdConfig& c, const json& j) {
  Binding b;
  bind_key(b, "sizes", c.sizes);
  bind_key(b, "patch", c.patch);
  bind_key(b, "overlap", c.overlap);
  bind_key(b, "strict_mapping", c.strict_mapping);
  bind_key(b, "final_size", c.final_size);
  apply_bindings(b, j);
}

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::kIo, "cannot read config " + path);
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kConfig, "malformed JSON in " + path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string resolve_output(const std::string& path) {
  const char* root = std::getenv("URCDM_OUTPUT_ROOT");
  if (!root || !*root || path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(root) / path).string();
}

// ---- commands ---------------------------------------------------------------

void run_dataset_gen(const DatasetGenConfig& c, std::ostream& log) {
  c.validate();
  synth::GeneratorConfig g;
  g.sizes = c.sizes;
  g.background_min = c.background_min;
  g.background_max = c.background_max;
  const fs::path out = c.out;
  write_json_file((out / "dataset-gen.config.json").string(), to_json(c));
  for (std::size_t k = 0; k < c.count; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "slide_%04zu", k);
    synth::Pyramid p = synth::gen_pyramid(c.seed + k, g);
    p.id = name;
    synth::save_pyramid(p, (out / name).string());
    log << name << " seed=" << p.seed << " background=" << synth::background_fraction(p.levels[2])
        << "\n" << std::flush;
  }
}

void run_train(const TrainCmdConfig& c, std::ostream& log) {
  c.validate();
  const auto stage = synth::stage_from_string(c.stage);
  const auto slot = synth::slot_from_string(c.slot);

  auto dirs = synth::list_pyramids(c.data);
  if (dirs.empty()) fail(ErrorKind::kDataset, "no pyramids under " + c.data);
  if (c.max_pyramids > 0 && dirs.size() > c.max_pyramids) dirs.resize(c.max_pyramids);
  std::array<bool, 3> levels{stage != synth::Stage::kHigh, stage != synth::Stage::kLow,
                             stage == synth::Stage::kHigh};
  std::vector<synth::Pyramid> pyramids;
  for (const auto& d : dirs) pyramids.push_back(synth::load_pyramid(d, levels));

  synth::ExtractConfig ex;
  ex.patch = c.patch;
  ex.crop_stride = c.crop_stride;
  const auto set = synth::extract_training_set(pyramids, stage, ex);

  pipeline::ModelOptions mo{c.patch, c.base_width, c.levels, c.groups, c.schedule_steps, c.inpaint_mask, c.target};
  const auto spec = pipeline::model_spec(stage, slot, mo);
  const std::uint64_t model_seed =
      stable_hash(c.seed, {static_cast<std::uint64_t>(stage), static_cast<std::uint64_t>(slot)});
  auto model = net::ScoreModel::initialize(spec, model_seed);

  const fs::path out = c.out;
  ensure_parent(out);
  write_json_file(out.string() + ".config.json", to_json(c));
  std::ofstream loss_log(out.string() + ".loss.log");
  if (!loss_log) fail(ErrorKind::kIo, "cannot write " + out.string() + ".loss.log");

  log << "train " << c.stage << "/" << c.slot << ": " << set.size() << " examples, "
      << model.params().num_values() << " parameters, resolution " << spec.net.resolution << "\n"
      << std::flush;

  train::TrainConfig tc;
  tc.steps = c.steps;
  tc.clip_norm = c.clip_norm;
  tc.adam.lr = c.lr;
  tc.seed = c.seed;
  tc.log_every = c.log_every;
  train::Trainer trainer(model, tc);

  pipeline::BatchOptions bo;
  bo.batch = c.batch;
  bo.overlap = c.overlap;
  const auto source = [&](NoiseStream& s) { return pipeline::make_batch(set, spec, bo, s); };
  const auto t0 = std::chrono::steady_clock::now();
  try {
    trainer.run(source, [&](const train::LossRecord& r) {
      loss_log << train::format_loss_line(r) << "\n" << std::flush;
      if (r.step % (c.log_every * 20) == 0 || r.step == c.steps) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << "  step " << r.step << " smoothed=" << r.smoothed << " (" << secs << " s)\n" << std::flush;
      }
    });
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kNumeric) {
      model.save(out.string());
      log << "numeric failure after " << trainer.steps_done()
          << " steps; last good checkpoint saved to " << out.string() << "\n";
    }
    throw;
  }
  model.save(out.string());
}

void run_sample(const SampleCmdConfig& c, std::ostream& log) {
  c.validate();
  const auto g = geometry_of(c);
  const auto stages = cascade::plan(g);
  if (c.dry_run) {
    log << cascade::format_plan(g, stages);
    return;
  }
  const auto models = pipeline::load_cascade(c.models);
  const auto cdms = models.cdms();
  cdms[0].validate(false);
  cdms[1].validate(true);
  cdms[2].validate(true);

  const fs::path out = c.out;
  write_json_file((out / "sample.config.json").string(), to_json(c));

  cascade::GenerateOptions go;
  go.seed = c.seed;
  go.workers = c.workers;
  go.on_failure = [&](int stage, const tiling::CanvasAssembly& canvas) {
    const auto p = out / ("partial_stage" + std::to_string(stage) + ".png");
    image::write_png(p.string(), canvas.image());
    log << "stage " << stage << " failed; partial canvas written to " << p.string() << "\n";
  };
  const auto t0 = std::chrono::steady_clock::now();
  go.on_progress = [&](int stage, std::size_t done, std::size_t total) {
    if (done == total || done % 100 == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << "stage " << stage << ": " << done << "/" << total << " tiles (" << secs << " s)\n" << std::flush;
    }
  };
  auto wsi = cascade::generate_wsi(cdms, g, go);
  wsi.pyramid.id = out.filename().string();
  wsi.pyramid.seed = c.seed;
  synth::save_pyramid(wsi.pyramid, out.string());

  for (int s = 1; s < 3; ++s) {
    std::string text;
    for (const auto& e : wsi.events[s]) text += tiling::format_event(e) + "\n";
    write_text(out / ("stage" + std::to_string(s + 1) + ".events.log"), text);
  }
  std::string hashes;
  for (int l = 0; l < 3; ++l) {
    hashes += "level" + std::to_string(l) + " " + hex64(digest_image(wsi.pyramid.levels[l])) + "\n";
  }
  write_text(out / "hashes.txt", hashes);
  log << hashes;
}

void run_metrics(const MetricsCmdConfig& c, std::ostream& log) {
  c.validate();
  const auto real = load_set(c.real);
  const auto gen = load_set(c.gen);
  metrics::HandcraftedExtractor fx(c.extractor_seed);
  metrics::EvalConfig ec;
  ec.patches_per_level = c.patches_per_level;
  ec.k = c.k;
  ec.seed = c.seed;
  ec.pfid.crops = c.pfid_crops;
  ec.pfid.scales = c.scales;
  ec.pfid.seed = c.seed;
  log << "metrics: " << real.size() << " real, " << gen.size() << " generated pyramids\n" << std::flush;
  auto report = metrics::evaluate(real, gen, ec, fx);
  if (c.noise_baseline) {
    std::vector<synth::Pyramid> noise;
    for (std::size_t i = 0; i < gen.size(); ++i) noise.push_back(noise_like(gen[i], stable_hash(c.seed, {0x6e6f697365, i})));
    report.entries.push_back({"pfid_noise", metrics::pfid(real, noise, ec.pfid, fx), ec.pfid.crops, ec.pfid.crops});
  }
  const fs::path out = c.out;
  write_text(out, metrics::format_report_json(report));
  auto txt = out;
  txt.replace_extension(".txt");
  write_text(txt, metrics::format_report_text(report));
  write_json_file(out.string() + ".config.json", to_json(c));
  log << metrics::format_report_text(report);
}

void run_plan(const PlanCmdConfig& c, std::ostream& out) {
  c.validate();
  const cascade::Geometry g{c.sizes, c.patch, c.overlap, c.strict_mapping, c.final_size};
  out << cascade::format_plan(g, cascade::plan(g));
}

namespace {
std::atomic<eval::Server*> g_server{nullptr};
extern "C" void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}
}  // namespace

void run_serve(const ServeCmdConfig& c, std::ostream& log) {
  c.validate();
  auto pools = eval::ImagePools::scan(c.pools);
  eval::Study study(std::move(pools), c.log, c.trials);
  eval::Server server(study);
  const int port = server.bind(c.host, c.port);
  log << "listening on http://" << c.host << ":" << port << "\n" << std::flush;
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.listen();
  g_server = nullptr;
}

std::array<std::uint64_t, 3> pyramid_digest(const std::string& pyramid_dir) {
  const auto p = synth::load_pyramid(pyramid_dir);
  return {digest_image(p.levels[0]), digest_image(p.levels[1]), digest_image(p.levels[2])};
}

}  // namespace urcdm::cli
