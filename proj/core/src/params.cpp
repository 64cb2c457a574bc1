#include "urcdm/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "urcdm/error.hpp"

namespace urcdm {

void ParamStore::add(const std::string& name, Tensor value) {
  if (entries_.count(name)) fail(ErrorKind::kInvalidArgument, "duplicate parameter " + name);
  Tensor grad(value.shape());
  entries_.emplace(name, Entry{std::move(value), std::move(grad)});
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorKind::kNotFound, "unknown parameter " + name);
  return it->second;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorKind::kNotFound, "unknown parameter " + name);
  return it->second;
}

Tensor& ParamStore::value(const std::string& name) { return entry(name).value; }
const Tensor& ParamStore::value(const std::string& name) const { return entry(name).value; }
Tensor& ParamStore::grad(const std::string& name) { return entry(name).grad; }
const Tensor& ParamStore::grad(const std::string& name) const { return entry(name).grad; }

void ParamStore::accumulate_grad(const std::string& name, const Tensor& g) {
  entry(name).grad += g;
}

void ParamStore::zero_grad() {
  for (auto& [_, e] : entries_) e.grad.fill(0.0);
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

bool ParamStore::same_values(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || !bit_equal(a->second.value, b->second.value)) return false;
  }
  return true;
}

double global_grad_norm(const ParamStore& params) {
  double sq = 0.0;
  for (const auto& [_, e] : params) sq += e.grad.squared_norm();
  return std::sqrt(sq);
}

double clip_global_norm(ParamStore& params, double max_norm) {
  if (!(max_norm > 0.0)) fail(ErrorKind::kInvalidArgument, "clip_global_norm: max_norm must be > 0");
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double scale = max_norm / norm;
  for (auto& [_, e] : params) e.grad *= scale;
  return scale;
}

void adam_step(ParamStore& params, AdamState& state) {
  const auto& cfg = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, e] : params) {
    auto [mit, m_new] = state.m.try_emplace(name, e.value.shape());
    auto [vit, v_new] = state.v.try_emplace(name, e.value.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    require_same_shape(m, e.value, "adam_step moments");
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      e.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

FiniteDiffReport finite_diff_report(const LossWithGrad& loss, ParamStore& params,
                                    const FiniteDiffOptions& options) {
  if (!(options.step >= 1e-6 && options.step <= 1e-3)) {
    fail(ErrorKind::kInvalidArgument, "finite_diff_check: step must lie in [1e-6, 1e-3]");
  }
  const double base = loss(params, true);
  if (!std::isfinite(base)) fail(ErrorKind::kNumeric, "finite_diff_check: non-finite loss");

  std::map<std::string, Tensor> analytic;
  for (const auto& [name, e] : params) analytic.emplace(name, e.grad);

  FiniteDiffReport report;
  std::mt19937_64 rng(options.seed);
  const double h = options.step;
  for (auto& [name, e] : params) {
    const std::size_t n = e.value.size();
    std::vector<std::size_t> coords;
    if (n <= options.coords_per_param) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < options.coords_per_param; ++k) coords.push_back(rng() % n);
    }
    for (std::size_t idx : coords) {
      const double saved = e.value[idx];
      e.value[idx] = saved + h;
      const double lp = loss(params, false);
      e.value[idx] = saved - h;
      const double lm = loss(params, false);
      e.value[idx] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        fail(ErrorKind::kNumeric, "finite_diff_check: non-finite loss at " + name);
      }
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic.at(name)[idx];
      const double rel = std::abs(a - numeric) / (std::abs(a) + 1e-8);
      ++report.coords_checked;
      if (report.worst_param.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = name;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

double finite_diff_check(const LossWithGrad& loss, ParamStore& params,
                         const FiniteDiffOptions& options) {
  return finite_diff_report(loss, params, options).max_rel_error;
}

namespace {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::kIo, "checkpoint truncated");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TensorMap& entries) {
  std::vector<std::uint8_t> out = {'U', 'R', 'C', 'K'};
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (double v : t.values()) put_le<double>(out, v);
  }
  return out;
}

TensorMap decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.get_string(4) != "URCK") fail(ErrorKind::kIo, "checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kIo, "checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.get_string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint32_t>();
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = r.get<double>();
    out.insert_or_assign(name, Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) fail(ErrorKind::kIo, "checkpoint: trailing bytes");
  return out;
}

void save_checkpoint(const std::string& path, const TensorMap& entries) {
  const auto bytes = encode_checkpoint(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::kIo, "write failed: " + path);
}

TensorMap load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kIo, "cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

TensorMap to_tensor_map(const ParamStore& params) {
  TensorMap out;
  for (const auto& [name, e] : params) out.emplace(name, e.value);
  return out;
}

}  // namespace urcdm
