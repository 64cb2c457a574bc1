#pragma once

// Differentiable building blocks of the score network. Each forward has a
// matching hand-written backward; stateless functions take whatever the
// backward needs explicitly, the Layer classes below cache it.

#include <cstddef>
#include <optional>

#include "urcdm/tensor.hpp"

namespace urcdm::nn {

// ---- conv2d ---------------------------------------------------------------

// Cross-correlation. input [N,C,H,W], kernel [K,C,kh,kw], bias [K].
// Output [N,K,H+2p-kh+1,W+2p-kw+1].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding);

struct Conv2dGrads {
  Tensor d_input;  // empty when not requested
  Tensor d_kernel;
  Tensor d_bias;
};

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& d_out,
                            int padding, bool want_input_grad = true);

// ---- dense ----------------------------------------------------------------

// input [N,F_in], weight [F_out,F_in], bias [F_out] -> [N,F_out]
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

struct DenseGrads {
  Tensor d_input;
  Tensor d_weight;
  Tensor d_bias;
};

DenseGrads dense_backward(const Tensor& input, const Tensor& weight, const Tensor& d_out);

// ---- SiLU -----------------------------------------------------------------

Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& d_out);

// ---- group norm -----------------------------------------------------------

struct GroupNormCache {
  Tensor normalized;         // x-hat, same shape as the input
  std::vector<double> rstd;  // [N*G]
  std::size_t groups = 0;
};

inline constexpr double kGroupNormEps = 1e-5;

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::size_t groups, GroupNormCache* cache = nullptr);

struct GroupNormGrads {
  Tensor d_input;
  Tensor d_gamma;
  Tensor d_beta;
};

GroupNormGrads group_norm_backward(const GroupNormCache& cache, const Tensor& gamma,
                                   const Tensor& d_out);

// ---- resampling -----------------------------------------------------------

Tensor upsample_nearest2x(const Tensor& x);
Tensor upsample_nearest2x_backward(const Tensor& d_out);

Tensor avg_pool2x(const Tensor& x);
Tensor avg_pool2x_backward(const Tensor& d_out);

// Half-pixel-centred bilinear resize with edge clamping over the last two
// axes of a rank-3 or rank-4 tensor.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor resize_bilinear_backward(const Tensor& d_out, const Shape& input_shape);

// ---- channel plumbing -----------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::size_t first);

// h[n,c,:,:] += e[n,c]
void add_channel_bias(Tensor& h, const Tensor& e);
Tensor channel_bias_backward(const Tensor& d_out);

// ---- stateful wrappers ----------------------------------------------------
// These own the activation cache between forward and backward and reject a
// backward call with no preceding forward.

class Conv2dLayer {
 public:
  Conv2dLayer(const Tensor& kernel, const Tensor& bias, int padding)
      : kernel_(&kernel), bias_(&bias), padding_(padding) {}
  Tensor forward(const Tensor& x);
  Conv2dGrads backward(const Tensor& d_out);

 private:
  const Tensor* kernel_;
  const Tensor* bias_;
  int padding_;
  std::optional<Tensor> input_;
};

class DenseLayer {
 public:
  DenseLayer(const Tensor& weight, const Tensor& bias) : weight_(&weight), bias_(&bias) {}
  Tensor forward(const Tensor& x);
  DenseGrads backward(const Tensor& d_out);

 private:
  const Tensor* weight_;
  const Tensor* bias_;
  std::optional<Tensor> input_;
};

class SiLULayer {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& d_out);

 private:
  std::optional<Tensor> input_;
};

class GroupNormLayer {
 public:
  GroupNormLayer(const Tensor& gamma, const Tensor& beta, std::size_t groups)
      : gamma_(&gamma), beta_(&beta), groups_(groups) {}
  Tensor forward(const Tensor& x);
  GroupNormGrads backward(const Tensor& d_out);

 private:
  const Tensor* gamma_;
  const Tensor* beta_;
  std::size_t groups_;
  std::optional<GroupNormCache> cache_;
};

}  // namespace urcdm::nn
