#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "commands.hpp"
#include "urcdm/error.hpp"

using nlohmann::json;
using namespace urcdm;

namespace {

// Every config key becomes a --flag (underscores spelled as dashes). Flag
// values are converted using the type of the key's default and overlaid on
// the --config file, so flags win.
struct Overrides {
  json defaults;
  std::string config_path;
  std::map<std::string, std::string> given;
};

void add_overrides(CLI::App* cmd, Overrides& o, const json& defaults) {
  o.defaults = defaults;
  cmd->add_option("--config", o.config_path, "JSON config file; flags override its keys");
  for (const auto& [key, value] : defaults.items()) {
    std::string flag = "--" + key;
    for (auto& ch : flag) if (ch == '_') ch = '-';
    if (value.is_boolean()) {
      cmd->add_flag(flag + "{true}", o.given[key], key);
    } else {
      cmd->add_option(flag, o.given[key], key);
    }
  }
}

json convert(const std::string& key, const std::string& text, const json& like) {
  try {
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
    } else if (like.is_string()) {
      return text;
    } else if (like.is_number_unsigned()) {
      if (!text.empty() && text[0] != '-') return static_cast<std::uint64_t>(std::stoull(text));
    } else if (like.is_number_integer()) {
      return std::stoll(text);
    } else if (like.is_number()) {
      return std::stod(text);
    } else if (like.is_array()) {
      json arr = json::array();
      std::stringstream ss(text);
      std::string item;
      const json elem = like.empty() ? json(0.0) : like[0];
      while (std::getline(ss, item, ',')) arr.push_back(convert(key, item, elem));
      return arr;
    }
  } catch (const std::logic_error&) {
  }
  fail(ErrorKind::kConfig, "invalid value '" + text + "' for " + key);
}

json merged(const Overrides& o) {
  json j = o.config_path.empty() ? json::object() : cli::read_json_file(o.config_path);
  if (!j.is_object()) fail(ErrorKind::kConfig, "config must be a JSON object");
  for (const auto& [key, text] : o.given) {
    if (!text.empty()) j[key] = convert(key, text, o.defaults.at(key));
  }
  return j;
}

template <class Config>
Config build(const Overrides& o) {
  Config c;
  cli::apply_json(c, merged(o));
  return c;
}

struct NullBuffer : std::streambuf {
  int overflow(int c) override { return c; }
};

std::ostream& progress_stream() {
  static NullBuffer null_buf;
  static std::ostream null_stream(&null_buf);
  const char* level = std::getenv("URCDM_LOG_LEVEL");
  if (level) {
    const std::string l = level;
    if (l == "quiet" || l == "error" || l == "warn") return null_stream;
  }
  return std::cerr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ultra-resolution cascaded diffusion on synthetic slides"};
  app.require_subcommand(1);

  Overrides gen_o, train_o, sample_o, metrics_o, serve_o, plan_o;
  auto* gen = app.add_subcommand("dataset-gen", "Generate synthetic slide pyramids");
  add_overrides(gen, gen_o, cli::to_json(cli::DatasetGenConfig{}));
  auto* train = app.add_subcommand("train", "Train one model of the cascade");
  add_overrides(train, train_o, cli::to_json(cli::TrainCmdConfig{}));
  auto* sample = app.add_subcommand("sample", "Generate a slide pyramid with trained models");
  add_overrides(sample, sample_o, cli::to_json(cli::SampleCmdConfig{}));
  auto* metrics = app.add_subcommand("metrics", "FID, precision, recall and pFID of two slide sets");
  add_overrides(metrics, metrics_o, cli::to_json(cli::MetricsCmdConfig{}));
  auto* serve = app.add_subcommand("eval-serve", "Serve the two-alternative perception study");
  add_overrides(serve, serve_o, cli::to_json(cli::ServeCmdConfig{}));
  auto* plan = app.add_subcommand("plan", "Print tile grids and schedule for a geometry");
  add_overrides(plan, plan_o, cli::to_json(cli::PlanCmdConfig{}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::ostream& log = progress_stream();
  try {
    if (*gen) {
      auto c = build<cli::DatasetGenConfig>(gen_o);
      c.out = cli::resolve_output(c.out);
      cli::run_dataset_gen(c, log);
    } else if (*train) {
      auto c = build<cli::TrainCmdConfig>(train_o);
      c.out = cli::resolve_output(c.out);
      cli::run_train(c, log);
    } else if (*sample) {
      auto c = build<cli::SampleCmdConfig>(sample_o);
      c.out = cli::resolve_output(c.out);
      cli::run_sample(c, c.dry_run ? std::cout : log);
    } else if (*metrics) {
      auto c = build<cli::MetricsCmdConfig>(metrics_o);
      c.out = cli::resolve_output(c.out);
      cli::run_metrics(c, log);
    } else if (*serve) {
      auto c = build<cli::ServeCmdConfig>(serve_o);
      c.log = cli::resolve_output(c.log);
      cli::run_serve(c, log);
    } else if (*plan) {
      cli::run_plan(build<cli::PlanCmdConfig>(plan_o), std::cout);
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
