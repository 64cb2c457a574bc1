#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace urcdm::eval {

enum class Condition { kPatchLevel, kWsiCrop };
const char* to_string(Condition c);
Condition condition_from_string(const std::string& s);  // kInvalidArgument

enum class Side { kLeft, kRight };
const char* to_string(Side s);
Side side_from_string(const std::string& s);

// ---- statistics -----------------------------------------------------------

struct Tally {
  std::size_t tp = 0;  // real image identified
  std::size_t fp = 0;  // synthetic image chosen
  std::size_t n() const { return tp + fp; }
};

struct StatsRow {
  std::string rater;
  std::size_t tp = 0, fp = 0;
  std::optional<double> p;          // FP / (TP + FP)
  std::optional<double> deviation;  // |p − 0.5|
};

struct StatsTable {
  std::vector<StatsRow> rows;  // sorted by rater
  StatsRow total;              // summed counts and pooled p
  // Judgment-count-weighted mean of the per-rater deviations.
  std::optional<double> weighted_deviation;
};

StatsTable compute_stats(const std::map<std::string, Tally>& tallies);

// ---- image pools ----------------------------------------------------------

// <root>/<condition>/<real|synthetic>/mag<k>/*.png; refs are paths relative
// to the root.
struct ImagePool {
  std::array<std::vector<std::string>, 3> real, synthetic;
  bool empty() const;
};

struct ImagePools {
  std::string root;
  std::map<Condition, ImagePool> pools;

  static ImagePools scan(const std::string& root);
  bool contains(const std::string& ref) const;
  std::string path(const std::string& ref) const;
};

// ---- sessions --------------------------------------------------------------

struct Trial {
  std::string id;
  int magnification = 0;
  std::string real_ref, synthetic_ref;
  Side real_side = Side::kLeft;

  const std::string& left() const { return real_side == Side::kLeft ? real_ref : synthetic_ref; }
  const std::string& right() const { return real_side == Side::kLeft ? synthetic_ref : real_ref; }
};

// Seeded plan: magnification, images and real side drawn per trial.
std::vector<Trial> plan_trials(const ImagePool& pool, std::uint64_t seed, std::size_t count);

struct Judgment {
  std::string session, trial, rater;
  Condition condition = Condition::kPatchLevel;
  int magnification = 0;
  Side chosen = Side::kLeft;
  bool correct = false;
  std::int64_t timestamp_ms = 0;
};

std::string format_judgment(const Judgment& j);  // one JSON line
Judgment parse_judgment(const std::string& line);

struct SubmitResult {
  Judgment judgment;
  std::size_t completed = 0, total = 0;
  bool session_complete() const { return completed == total; }
};

struct NextTrial {
  std::optional<Trial> trial;  // empty when every trial is judged
  std::size_t completed = 0, total = 0;
};

// Thread-safe study state backed by an append-only judgment log.
class Study {
 public:
  // Existing log lines are replayed into the tallies.
  Study(ImagePools pools, std::string log_path, std::size_t trials_per_session = 20);

  std::string create_session(const std::string& rater, Condition condition, std::uint64_t seed);
  NextTrial next_trial(const std::string& session) const;
  SubmitResult submit(const std::string& session, const std::string& trial, Side chosen);
  StatsTable stats(Condition condition) const;
  // File behind the image shown on `side` of a trial. Clients only ever see
  // the opaque ref "<session>/<trial>/<side>".
  std::string image_path(const std::string& session, const std::string& trial, Side side) const;

  const ImagePools& pools() const { return pools_; }
  std::size_t judgment_count() const;

 private:
  struct Session {
    std::string id, rater;
    Condition condition;
    std::vector<Trial> trials;
    std::map<std::string, Side> judged;
  };

  void apply(const Judgment& j);  // caller holds mu_

  ImagePools pools_;
  std::string log_path_;
  std::size_t trials_per_session_;
  mutable std::mutex mu_;
  std::map<std::string, Session> sessions_;
  std::map<Condition, std::map<std::string, Tally>> tallies_;
  std::size_t judgments_ = 0;
  std::uint64_t counter_ = 0;
};

// Tallies per condition rebuilt from a log file.
std::map<Condition, std::map<std::string, Tally>> replay_log(const std::string& path);

// ---- HTTP -----------------------------------------------------------------

class Server {
 public:
  explicit Server(Study& study);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds host:port (port 0 picks a free one). Throws kSetup when taken.
  int bind(const std::string& host, int port);
  void listen();  // blocks until stop()
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace urcdm::eval
