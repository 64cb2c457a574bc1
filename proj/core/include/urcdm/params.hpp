#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "urcdm/tensor.hpp"

namespace urcdm {

// Named parameters with one same-shaped gradient slot each. Iteration is in
// name order (std::map), which fixes the order of every reduction over it.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
  };

  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;

  void accumulate_grad(const std::string& name, const Tensor& g);
  void zero_grad();

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t num_values() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  // Values only; gradients are not part of equality.
  bool same_values(const ParamStore& other) const;

 private:
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::map<std::string, Entry> entries_;
};

// ---- optimisation ---------------------------------------------------------

// Scales every gradient by max_norm/g when the global L2 norm g exceeds
// max_norm. Returns the factor applied (1 when untouched).
double clip_global_norm(ParamStore& params, double max_norm);
double global_grad_norm(const ParamStore& params);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

void adam_step(ParamStore& params, AdamState& state);

// ---- gradient verification ------------------------------------------------

// Evaluates the scalar loss at the current parameter values. When
// `with_grad` is set it must also overwrite params' gradients with dL/dθ.
using LossWithGrad = std::function<double(ParamStore& params, bool with_grad)>;

struct FiniteDiffOptions {
  double step = 1e-5;
  std::size_t coords_per_param = 12;
  std::uint64_t seed = 7;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

// Max over a sampled coordinate subset of |analytic - central difference| /
// (|analytic| + 1e-8). Step must lie in [1e-6, 1e-3].
FiniteDiffReport finite_diff_report(const LossWithGrad& loss, ParamStore& params,
                                    const FiniteDiffOptions& options = {});

double finite_diff_check(const LossWithGrad& loss, ParamStore& params,
                         const FiniteDiffOptions& options = {});

// ---- checkpoints ----------------------------------------------------------

using TensorMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "URCK" | u32 version | u32 count | per entry: u32 name_len, name bytes,
// u32 rank, u32 extents..., f64 values... (all little-endian).
std::vector<std::uint8_t> encode_checkpoint(const TensorMap& entries);
TensorMap decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const TensorMap& entries);
TensorMap load_checkpoint(const std::string& path);

TensorMap to_tensor_map(const ParamStore& params);

}  // namespace urcdm
