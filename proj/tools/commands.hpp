#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace urcdm::cli {

// Each config round-trips through JSON. Parsing rejects unknown keys and
// wrong types with a kConfig error naming the key; validate() checks values.

struct DatasetGenConfig {
  std::size_t count = 25;
  std::uint64_t seed = 0;  // pyramid k uses seed + k
  std::array<std::size_t, 3> sizes{32, 200, 1376};
  double background_min = 0.30;
  double background_max = 0.50;
  std::string out;
  void validate() const;
};

struct TrainCmdConfig {
  std::string stage = "low";
  std::string slot = "base";
  std::string data;
  std::string out;  // checkpoint path
  int steps = 2000;
  std::size_t batch = 8;
  double lr = 1e-3;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t patch = 32;
  std::size_t base_width = 8;
  std::size_t levels = 2;
  std::size_t groups = 4;
  int schedule_steps = 250;
  std::string target;  // "" = per-slot default
  bool inpaint_mask = true;
  std::size_t max_pyramids = 0;  // 0 = all
  std::size_t crop_stride = 8;
  double overlap = 0.125;
  int log_every = 10;
  void validate() const;
};

struct SampleCmdConfig {
  std::string models;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::array<std::size_t, 3> sizes{32, 200, 1376};
  std::size_t patch = 32;
  double overlap = 0.125;
  bool strict_mapping = false;
  std::size_t final_size = 0;
  bool dry_run = false;
  void validate() const;
};

struct MetricsCmdConfig {
  std::string real;
  std::string gen;
  std::string out;  // report path (.json); a .txt twin is written alongside
  std::uint64_t seed = 0;
  std::size_t patches_per_level = 2000;
  std::size_t k = 3;
  std::size_t pfid_crops = 2000;
  std::vector<double> scales{1.0, 0.5, 0.25};
  std::uint64_t extractor_seed = 0;
  bool noise_baseline = false;  // adds pfid_noise against uniform-noise pyramids
  void validate() const;
};

struct ServeCmdConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string pools;
  std::string log = "judgments.jsonl";
  std::size_t trials = 20;
  void validate() const;
};

struct PlanCmdConfig {
  std::array<std::size_t, 3> sizes{32, 200, 1376};
  std::size_t patch = 32;
  double overlap = 0.125;
  bool strict_mapping = false;
  std::size_t final_size = 0;
  void validate() const;
};

nlohmann::json to_json(const DatasetGenConfig& c);
nlohmann::json to_json(const TrainCmdConfig& c);
nlohmann::json to_json(const SampleCmdConfig& c);
nlohmann::json to_json(const MetricsCmdConfig& c);
nlohmann::json to_json(const ServeCmdConfig& c);
nlohmann::json to_json(const PlanCmdConfig& c);

// Overlays the keys of `j` onto `c`.
void apply_json(DatasetGenConfig& c, const nlohmann::json& j);
void apply_json(TrainCmdConfig& c, const nlohmann::json& j);
void apply_json(SampleCmdConfig& c, const nlohmann::json& j);
void apply_json(MetricsCmdConfig& c, const nlohmann::json& j);
void apply_json(ServeCmdConfig& c, const nlohmann::json& j);
void apply_json(PlanCmdConfig& c, const nlohmann::json& j);

nlohmann::json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& j);

// URCDM_OUTPUT_ROOT prefixes relative output paths when set.
std::string resolve_output(const std::string& path);

// Subcommands. Each validates fully before writing anything and throws
// urcdm::Error on failure; `log` receives progress lines.
void run_dataset_gen(const DatasetGenConfig& c, std::ostream& log);
void run_train(const TrainCmdConfig& c, std::ostream& log);
void run_sample(const SampleCmdConfig& c, std::ostream& log);
void run_metrics(const MetricsCmdConfig& c, std::ostream& log);
void run_plan(const PlanCmdConfig& c, std::ostream& out);
void run_serve(const ServeCmdConfig& c, std::ostream& log);

// 64-bit digest of a pyramid's 8-bit pixel values, per level.
std::array<std::uint64_t, 3> pyramid_digest(const std::string& pyramid_dir);

}  // namespace urcdm::cli
