#include "urcdm/evalsvc.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "urcdm/error.hpp"
#include "urcdm/rng.hpp"

namespace urcdm::eval {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Condition c) { return c == Condition::kPatchLevel ? "patch-level" : "wsi-crop"; }

Condition condition_from_string(const std::string& s) {
  if (s == "patch-level") return Condition::kPatchLevel;
  if (s == "wsi-crop") return Condition::kWsiCrop;
  fail(ErrorKind::kInvalidArgument, "unknown condition '" + s + "' (expected patch-level|wsi-crop)");
}

const char* to_string(Side s) { return s == Side::kLeft ? "left" : "right"; }

Side side_from_string(const std::string& s) {
  if (s == "left") return Side::kLeft;
  if (s == "right") return Side::kRight;
  fail(ErrorKind::kInvalidArgument, "chosen must be \"left\" or \"right\"");
}

StatsTable compute_stats(const std::map<std::string, Tally>& tallies) {
  StatsTable t;
  t.total.rater = "total";
  double dev_sum = 0.0;
  for (const auto& [rater, tally] : tallies) {
    StatsRow r{rater, tally.tp, tally.fp, std::nullopt, std::nullopt};
    if (tally.n() > 0) {
      r.p = static_cast<double>(tally.fp) / static_cast<double>(tally.n());
      r.deviation = std::abs(*r.p - 0.5);
      dev_sum += *r.deviation * static_cast<double>(tally.n());
    }
    t.total.tp += tally.tp;
    t.total.fp += tally.fp;
    t.rows.push_back(std::move(r));
  }
  const std::size_t n = t.total.tp + t.total.fp;
  if (n > 0) {
    t.total.p = static_cast<double>(t.total.fp) / static_cast<double>(n);
    t.total.deviation = std::abs(*t.total.p - 0.5);
    t.weighted_deviation = dev_sum / static_cast<double>(n);
  }
  return t;
}

// ---------------------------------------------------------------------------

bool ImagePool::empty() const {
  for (int m = 0; m < 3; ++m) {
    if (!real[m].empty() && !synthetic[m].empty()) return false;
  }
  return true;
}

ImagePools ImagePools::scan(const std::string& root) {
  if (!fs::is_directory(root)) fail(ErrorKind::kSetup, "image pool root " + root + " is not a directory");
  ImagePools p;
  p.root = root;
  for (Condition c : {Condition::kPatchLevel, Condition::kWsiCrop}) {
    ImagePool pool;
    for (int kind = 0; kind < 2; ++kind) {
      const char* sub = kind == 0 ? "real" : "synthetic";
      for (int m = 0; m < 3; ++m) {
        const fs::path rel = fs::path(to_string(c)) / sub / ("mag" + std::to_string(m));
        const fs::path dir = fs::path(root) / rel;
        if (!fs::is_directory(dir)) continue;
        auto& list = kind == 0 ? pool.real[m] : pool.synthetic[m];
        for (const auto& e : fs::directory_iterator(dir)) {
          if (e.is_regular_file() && e.path().extension() == ".png") {
            list.push_back((rel / e.path().filename()).generic_string());
          }
        }
        std::sort(list.begin(), list.end());
      }
    }
    p.pools[c] = std::move(pool);
  }
  return p;
}

bool ImagePools::contains(const std::string& ref) const {
  for (const auto& [c, pool] : pools) {
    for (int m = 0; m < 3; ++m) {
      if (std::binary_search(pool.real[m].begin(), pool.real[m].end(), ref)) return true;
      if (std::binary_search(pool.synthetic[m].begin(), pool.synthetic[m].end(), ref)) return true;
    }
  }
  return false;
}

std::string ImagePools::path(const std::string& ref) const { return (fs::path(root) / ref).string(); }

std::vector<Trial> plan_trials(const ImagePool& pool, std::uint64_t seed, std::size_t count) {
  std::vector<int> mags;
  for (int m = 0; m < 3; ++m) {
    if (!pool.real[m].empty() && !pool.synthetic[m].empty()) mags.push_back(m);
  }
  if (mags.empty()) fail(ErrorKind::kSetup, "image pool has no magnification with both real and synthetic images");
  NoiseStream s(stable_hash(seed, {0x747269616cULL}));
  std::vector<Trial> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    Trial& t = out[k];
    t.id = "t" + std::to_string(k);
    t.magnification = mags[s.below(mags.size())];
    t.real_ref = pool.real[t.magnification][s.below(pool.real[t.magnification].size())];
    t.synthetic_ref = pool.synthetic[t.magnification][s.below(pool.synthetic[t.magnification].size())];
    t.real_side = s.below(2) == 0 ? Side::kLeft : Side::kRight;
  }
  return out;
}

std::string format_judgment(const Judgment& j) {
  json o{{"session", j.session},     {"trial", j.trial},     {"rater", j.rater},
         {"condition", to_string(j.condition)}, {"magnification", j.magnification},
         {"chosen", to_string(j.chosen)}, {"correct", j.correct}, {"timestamp_ms", j.timestamp_ms}};
  return o.dump();
}

Judgment parse_judgment(const std::string& line) {
  try {
    const auto o = json::parse(line);
    Judgment j;
    j.session = o.at("session").get<std::string>();
    j.trial = o.at("trial").get<std::string>();
    j.rater = o.at("rater").get<std::string>();
    j.condition = condition_from_string(o.at("condition").get<std::string>());
    j.magnification = o.at("magnification").get<int>();
    j.chosen = side_from_string(o.at("chosen").get<std::string>());
    j.correct = o.at("correct").get<bool>();
    j.timestamp_ms = o.at("timestamp_ms").get<std::int64_t>();
    return j;
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("judgment log: ") + e.what());
  }
}

std::map<Condition, std::map<std::string, Tally>> replay_log(const std::string& path) {
  std::map<Condition, std::map<std::string, Tally>> t;
  std::ifstream f(path);
  if (!f) return t;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const Judgment j = parse_judgment(line);
    Tally& tally = t[j.condition][j.rater];
    (j.correct ? tally.tp : tally.fp) += 1;
  }
  return t;
}

// ---------------------------------------------------------------------------

Study::Study(ImagePools pools, std::string log_path, std::size_t trials_per_session)
    : pools_(std::move(pools)), log_path_(std::move(log_path)), trials_per_session_(trials_per_session) {
  if (trials_per_session_ == 0) fail(ErrorKind::kConfig, "trials per session must be positive");
  tallies_ = replay_log(log_path_);
  for (const auto& [c, m] : tallies_) {
    for (const auto& [r, t] : m) judgments_ += t.n();
  }
  std::ofstream touch(log_path_, std::ios::app);
  if (!touch) fail(ErrorKind::kIo, "cannot open judgment log " + log_path_);
}

std::string Study::create_session(const std::string& rater, Condition condition, std::uint64_t seed) {
  if (rater.empty()) fail(ErrorKind::kInvalidArgument, "rater id must be non-empty");
  auto it = pools_.pools.find(condition);
  if (it == pools_.pools.end() || it->second.empty()) {
    fail(ErrorKind::kSetup, std::string("no images for condition ") + to_string(condition));
  }
  Session s;
  s.rater = rater;
  s.condition = condition;
  s.trials = plan_trials(it->second, seed, trials_per_session_);
  std::lock_guard lock(mu_);
  const std::uint64_t n = ++counter_;
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%llu-%08llx", static_cast<unsigned long long>(n),
                static_cast<unsigned long long>(stable_hash(seed, {n}) & 0xffffffffULL));
  s.id = buf;
  sessions_[s.id] = std::move(s);
  return buf;
}

NextTrial Study::next_trial(const std::string& session) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(session);
  if (it == sessions_.end()) fail(ErrorKind::kNotFound, "unknown session " + session);
  const Session& s = it->second;
  NextTrial n;
  n.completed = s.judged.size();
  n.total = s.trials.size();
  for (const auto& t : s.trials) {
    if (!s.judged.count(t.id)) {
      n.trial = t;
      break;
    }
  }
  return n;
}

void Study::apply(const Judgment& j) {
  Tally& t = tallies_[j.condition][j.rater];
  (j.correct ? t.tp : t.fp) += 1;
  ++judgments_;
}

SubmitResult Study::submit(const std::string& session, const std::string& trial, Side chosen) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(session);
  if (it == sessions_.end()) fail(ErrorKind::kNotFound, "unknown session " + session);
  Session& s = it->second;
  auto t = std::find_if(s.trials.begin(), s.trials.end(), [&](const Trial& x) { return x.id == trial; });
  if (t == s.trials.end()) fail(ErrorKind::kNotFound, "unknown trial " + trial + " in session " + session);
  if (s.judged.count(trial)) fail(ErrorKind::kConflict, "trial " + trial + " already judged");

  Judgment j;
  j.session = session;
  j.trial = trial;
  j.rater = s.rater;
  j.condition = s.condition;
  j.magnification = t->magnification;
  j.chosen = chosen;
  j.correct = chosen == t->real_side;
  j.timestamp_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  {
    std::ofstream f(log_path_, std::ios::app);
    const std::string line = format_judgment(j) + "\n";
    f.write(line.data(), static_cast<std::streamsize>(line.size()));
    f.flush();
    if (!f) fail(ErrorKind::kIo, "cannot append to judgment log " + log_path_);
  }
  s.judged[trial] = chosen;
  apply(j);
  return {j, s.judged.size(), s.trials.size()};
}

StatsTable Study::stats(Condition condition) const {
  std::lock_guard lock(mu_);
  auto it = tallies_.find(condition);
  return compute_stats(it == tallies_.end() ? std::map<std::string, Tally>{} : it->second);
}

std::string Study::image_path(const std::string& session, const std::string& trial, Side side) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(session);
  if (it == sessions_.end()) fail(ErrorKind::kNotFound, "unknown session " + session);
  for (const auto& t : it->second.trials) {
    if (t.id == trial) return pools_.path(side == Side::kLeft ? t.left() : t.right());
  }
  fail(ErrorKind::kNotFound, "unknown trial " + trial + " in session " + session);
}

std::size_t Study::judgment_count() const {
  std::lock_guard lock(mu_);
  return judgments_;
}

// ---------------------------------------------------------------------------

namespace {

json row_json(const StatsRow& r) {
  json o{{"rater", r.rater}, {"tp", r.tp}, {"fp", r.fp}};
  o["p"] = r.p ? json(*r.p) : json(nullptr);
  o["deviation"] = r.deviation ? json(*r.deviation) : json(nullptr);
  return o;
}

int status_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::kNotFound: return 404;
    case ErrorKind::kConflict: return 409;
    case ErrorKind::kSetup: return 422;
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kConfig: return 400;
    default: return 500;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::string image_url(const std::string& session, const Trial& t, Side side) {
  return "/images/" + session + "/" + t.id + "/" + to_string(side);
}

}  // namespace

struct Server::Impl {
  Study& study;
  httplib::Server http;
  explicit Impl(Study& s) : study(s) {}

  template <class F>
  void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const Error& e) {
      send_json(res, status_for(e.kind()), {{"error", e.what()}});
    } catch (const json::exception& e) {
      send_json(res, 400, {{"error", std::string("bad request body: ") + e.what()}});
    }
  }

  void routes() {
    // Without SO_REUSEPORT a second server on a taken port fails to bind.
    http.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    http.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    http.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    http.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"status", "ok"}});
    });
    http.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = json::parse(req.body);
        const auto id = study.create_session(body.at("rater").get<std::string>(),
                                             condition_from_string(body.at("condition").get<std::string>()),
                                             body.value("seed", std::uint64_t{0}));
        send_json(res, 201, {{"session_id", id}});
      });
    });
    http.Get(R"(/sessions/([^/]+)/next)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto n = study.next_trial(req.matches[1]);
        json o{{"completed", n.completed}, {"total", n.total}};
        if (n.trial) {
          o["done"] = false;
          o["trial_id"] = n.trial->id;
          o["left_image_url"] = image_url(req.matches[1], *n.trial, Side::kLeft);
          o["right_image_url"] = image_url(req.matches[1], *n.trial, Side::kRight);
          o["magnification"] = n.trial->magnification;
        } else {
          o["done"] = true;
        }
        send_json(res, 200, o);
      });
    });
    http.Post(R"(/sessions/([^/]+)/judgments)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = json::parse(req.body);
        const auto r = study.submit(req.matches[1], body.at("trial_id").get<std::string>(),
                                    side_from_string(body.at("chosen").get<std::string>()));
        json o{{"recorded", true}, {"trial_id", r.judgment.trial}, {"completed", r.completed},
               {"total", r.total}, {"session_complete", r.session_complete()}};
        // Blinding: correctness is only revealed once the session is over.
        o["correct"] = r.session_complete() ? json(r.judgment.correct) : json(nullptr);
        send_json(res, 201, o);
      });
    });
    http.Get("/stats", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        if (!req.has_param("condition")) fail(ErrorKind::kInvalidArgument, "missing condition parameter");
        const Condition c = condition_from_string(req.get_param_value("condition"));
        const StatsTable t = study.stats(c);
        json rows = json::array();
        for (const auto& r : t.rows) rows.push_back(row_json(r));
        json total = row_json(t.total);
        total["weighted_deviation"] = t.weighted_deviation ? json(*t.weighted_deviation) : json(nullptr);
        send_json(res, 200, {{"condition", to_string(c)}, {"rows", rows}, {"total", total}});
      });
    });
    http.Get(R"(/images/([^/]+)/([^/]+)/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string path = study.image_path(req.matches[1], req.matches[2], side_from_string(req.matches[3]));
        std::ifstream f(path, std::ios::binary);
        if (!f) fail(ErrorKind::kNotFound, "unreadable image for trial " + std::string(req.matches[2]));
        std::ostringstream o;
        o << f.rdbuf();
        res.set_content(o.str(), "image/png");
      });
    });
  }
};

Server::Server(Study& study) : impl_(std::make_unique<Impl>(study)) { impl_->routes(); }
Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->http.bind_to_any_port(host);
    if (p < 0) fail(ErrorKind::kSetup, "cannot bind " + host);
    return p;
  }
  if (!impl_->http.bind_to_port(host, port)) {
    fail(ErrorKind::kSetup, "cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
  }
  return port;
}

void Server::listen() { impl_->http.listen_after_bind(); }

void Server::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

}  // namespace urcdm::eval
