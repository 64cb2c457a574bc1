#include "urcdm/layers.hpp"

#include <algorithm>
#include <cmath>

#include "urcdm/error.hpp"

namespace urcdm::nn {

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, k, kh, kw, hp, wp, ho, wo;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, int padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (padding < 0) fail(ErrorKind::kInvalidShape, "conv2d: negative padding");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.k = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  if (kernel.dim(1) != g.c) {
    fail(ErrorKind::kInvalidShape, "conv2d: kernel " + shape_str(kernel.shape()) +
                                       " does not match input " + shape_str(input.shape()));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    fail(ErrorKind::kInvalidShape, "conv2d: kernel extents must be odd");
  }
  g.hp = g.h + 2 * static_cast<std::size_t>(padding);
  g.wp = g.w + 2 * static_cast<std::size_t>(padding);
  if (g.hp < g.kh || g.wp < g.kw) fail(ErrorKind::kInvalidShape, "conv2d: kernel larger than input");
  g.ho = g.hp - g.kh + 1;
  g.wo = g.wp - g.kw + 1;
  return g;
}

// Copies one [H,W] plane into a zero-bordered [Hp,Wp] buffer.
void pad_plane(const double* src, const ConvGeometry& g, int padding, double* dst) {
  std::fill(dst, dst + g.hp * g.wp, 0.0);
  const auto p = static_cast<std::size_t>(padding);
  for (std::size_t i = 0; i < g.h; ++i) {
    std::copy(src + i * g.w, src + (i + 1) * g.w, dst + (i + p) * g.wp + p);
  }
}

}  // namespace

// Output rows are computed with the padded row stride so every kernel tap is
// one contiguous axpy over the whole plane; the wrap-around columns j >= wo
// are scratch and never copied out.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding) {
  const auto g = conv_geometry(input, kernel, padding);
  if (bias.size() != g.k) fail(ErrorKind::kInvalidShape, "conv2d: bias size mismatch");

  Tensor out({g.n, g.k, g.ho, g.wo});
  std::vector<double> padded(g.c * g.hp * g.wp);
  std::vector<double> acc(g.ho * g.wp);
  const std::size_t span = (g.ho - 1) * g.wp + g.wo;

  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.c; ++c) {
      pad_plane(input.data() + (n * g.c + c) * g.h * g.w, g, padding,
                padded.data() + c * g.hp * g.wp);
    }
    for (std::size_t k = 0; k < g.k; ++k) {
      std::fill(acc.begin(), acc.end(), bias[k]);
      double* a = acc.data();
      for (std::size_t c = 0; c < g.c; ++c) {
        const double* plane = padded.data() + c * g.hp * g.wp;
        const double* kern = kernel.data() + (k * g.c + c) * g.kh * g.kw;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const double wv = kern[ky * g.kw + kx];
            const double* src = plane + ky * g.wp + kx;
            for (std::size_t q = 0; q < span; ++q) a[q] += wv * src[q];
          }
        }
      }
      double* dst = out.data() + (n * g.k + k) * g.ho * g.wo;
      for (std::size_t i = 0; i < g.ho; ++i) {
        std::copy(a + i * g.wp, a + i * g.wp + g.wo, dst + i * g.wo);
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& d_out,
                            int padding, bool want_input_grad) {
  const auto g = conv_geometry(input, kernel, padding);
  if (d_out.shape() != Shape{g.n, g.k, g.ho, g.wo}) {
    fail(ErrorKind::kInvalidShape, "conv2d_backward: gradient shape " + shape_str(d_out.shape()));
  }
  Conv2dGrads grads;
  grads.d_kernel = Tensor(kernel.shape());
  grads.d_bias = Tensor({g.k});
  if (want_input_grad) grads.d_input = Tensor(input.shape());

  const std::size_t plane_sz = g.hp * g.wp;
  const std::size_t span = (g.ho - 1) * g.wp + g.wo;
  std::vector<double> padded(g.c * plane_sz);
  std::vector<double> d_padded(want_input_grad ? g.c * plane_sz : 0);
  std::vector<double> dy(g.ho * g.wp);
  const auto p = static_cast<std::size_t>(padding);

  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.c; ++c) {
      pad_plane(input.data() + (n * g.c + c) * g.h * g.w, g, padding,
                padded.data() + c * plane_sz);
    }
    std::fill(d_padded.begin(), d_padded.end(), 0.0);
    for (std::size_t k = 0; k < g.k; ++k) {
      // Scatter d_out[n,k] into stride-wp layout; scratch columns stay zero.
      std::fill(dy.begin(), dy.end(), 0.0);
      const double* src = d_out.data() + (n * g.k + k) * g.ho * g.wo;
      double bsum = 0.0;
      for (std::size_t i = 0; i < g.ho; ++i) {
        for (std::size_t j = 0; j < g.wo; ++j) {
          dy[i * g.wp + j] = src[i * g.wo + j];
          bsum += src[i * g.wo + j];
        }
      }
      grads.d_bias[k] += bsum;
      for (std::size_t c = 0; c < g.c; ++c) {
        const double* plane = padded.data() + c * plane_sz;
        const double* kern = kernel.data() + (k * g.c + c) * g.kh * g.kw;
        double* dk = grads.d_kernel.data() + (k * g.c + c) * g.kh * g.kw;
        double* dplane = want_input_grad ? d_padded.data() + c * plane_sz : nullptr;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const std::size_t off = ky * g.wp + kx;
            const double* x = plane + off;
            double dot = 0.0;
            for (std::size_t q = 0; q < span; ++q) dot += dy[q] * x[q];
            dk[ky * g.kw + kx] += dot;
            if (dplane) {
              const double wv = kern[ky * g.kw + kx];
              double* dx = dplane + off;
              for (std::size_t q = 0; q < span; ++q) dx[q] += wv * dy[q];
            }
          }
        }
      }
    }
    if (want_input_grad) {
      for (std::size_t c = 0; c < g.c; ++c) {
        const double* dplane = d_padded.data() + c * plane_sz;
        double* dst = grads.d_input.data() + (n * g.c + c) * g.h * g.w;
        for (std::size_t i = 0; i < g.h; ++i) {
          std::copy(dplane + (i + p) * g.wp + p, dplane + (i + p) * g.wp + p + g.w, dst + i * g.w);
        }
      }
    }
  }
  return grads;
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  const std::size_t n = input.dim(0), fin = input.dim(1), fout = weight.dim(0);
  if (weight.dim(1) != fin || bias.size() != fout) {
    fail(ErrorKind::kInvalidShape, "dense: weight " + shape_str(weight.shape()) + " vs input " +
                                       shape_str(input.shape()));
  }
  Tensor out({n, fout});
  for (std::size_t b = 0; b < n; ++b) {
    const double* x = input.data() + b * fin;
    for (std::size_t o = 0; o < fout; ++o) {
      const double* w = weight.data() + o * fin;
      double s = bias[o];
      for (std::size_t i = 0; i < fin; ++i) s += w[i] * x[i];
      out[b * fout + o] = s;
    }
  }
  return out;
}

DenseGrads dense_backward(const Tensor& input, const Tensor& weight, const Tensor& d_out) {
  const std::size_t n = input.dim(0), fin = input.dim(1), fout = weight.dim(0);
  if (d_out.shape() != Shape{n, fout}) {
    fail(ErrorKind::kInvalidShape, "dense_backward: gradient shape " + shape_str(d_out.shape()));
  }
  DenseGrads g{Tensor(input.shape()), Tensor(weight.shape()), Tensor({fout})};
  for (std::size_t b = 0; b < n; ++b) {
    const double* x = input.data() + b * fin;
    double* dx = g.d_input.data() + b * fin;
    for (std::size_t o = 0; o < fout; ++o) {
      const double dy = d_out[b * fout + o];
      g.d_bias[o] += dy;
      const double* w = weight.data() + o * fin;
      double* dw = g.d_weight.data() + o * fin;
      for (std::size_t i = 0; i < fin; ++i) {
        dw[i] += dy * x[i];
        dx[i] += dy * w[i];
      }
    }
  }
  return g;
}

Tensor silu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / (1.0 + std::exp(-x[i]));
  return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& d_out) {
  require_same_shape(x, d_out, "silu_backward");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    dx[i] = d_out[i] * s * (1.0 + x[i] * (1.0 - s));
  }
  return dx;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                  GroupNormCache* cache) {
  require_rank(x, 4, "group_norm input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0) {
    fail(ErrorKind::kInvalidShape, "group_norm: " + std::to_string(c) +
                                       " channels not divisible into " + std::to_string(groups) +
                                       " groups");
  }
  if (gamma.size() != c || beta.size() != c) fail(ErrorKind::kInvalidShape, "group_norm: affine size");
  const std::size_t cpg = c / groups;
  const std::size_t m = cpg * hw;
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> rstd(n * groups);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (b * c + gi * cpg) * hw;
      double mean = 0.0;
      for (std::size_t q = 0; q < m; ++q) mean += x[base + q];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t q = 0; q < m; ++q) {
        const double d = x[base + q] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double r = 1.0 / std::sqrt(var + kGroupNormEps);
      rstd[b * groups + gi] = r;
      for (std::size_t q = 0; q < m; ++q) {
        const std::size_t ch = gi * cpg + q / hw;
        const double xh = (x[base + q] - mean) * r;
        xhat[base + q] = xh;
        y[base + q] = gamma[ch] * xh + beta[ch];
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->rstd = std::move(rstd);
    cache->groups = groups;
  }
  return y;
}

GroupNormGrads group_norm_backward(const GroupNormCache& cache, const Tensor& gamma,
                                   const Tensor& d_out) {
  const Tensor& xhat = cache.normalized;
  require_same_shape(xhat, d_out, "group_norm_backward");
  const std::size_t n = xhat.dim(0), c = xhat.dim(1), hw = xhat.dim(2) * xhat.dim(3);
  const std::size_t groups = cache.groups;
  const std::size_t cpg = c / groups;
  const std::size_t m = cpg * hw;
  GroupNormGrads g{Tensor(xhat.shape()), Tensor({c}), Tensor({c})};
  std::vector<double> dxhat(m);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (b * c + gi * cpg) * hw;
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t q = 0; q < m; ++q) {
        const std::size_t ch = gi * cpg + q / hw;
        const double dy = d_out[base + q];
        g.d_gamma[ch] += dy * xhat[base + q];
        g.d_beta[ch] += dy;
        dxhat[q] = dy * gamma[ch];
        sum_dxhat += dxhat[q];
        sum_dxhat_xhat += dxhat[q] * xhat[base + q];
      }
      const double r = cache.rstd[b * groups + gi];
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::size_t q = 0; q < m; ++q) {
        g.d_input[base + q] =
            r * (dxhat[q] - inv_m * sum_dxhat - xhat[base + q] * inv_m * sum_dxhat_xhat);
      }
    }
  }
  return g;
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({n, c, 2 * h, 2 * w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = y.data() + p * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i) {
      for (std::size_t j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
    }
  }
  return y;
}

Tensor upsample_nearest2x_backward(const Tensor& d_out) {
  require_rank(d_out, 4, "upsample_nearest2x_backward");
  const std::size_t n = d_out.dim(0), c = d_out.dim(1), h = d_out.dim(2) / 2, w = d_out.dim(3) / 2;
  Tensor dx({n, c, h, w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = d_out.data() + p * 4 * h * w;
    double* dst = dx.data() + p * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i) {
      for (std::size_t j = 0; j < 2 * w; ++j) dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
    }
  }
  return dx;
}

Tensor avg_pool2x(const Tensor& x) {
  require_rank(x, 4, "avg_pool2x");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) fail(ErrorKind::kInvalidShape, "avg_pool2x: odd spatial extent");
  Tensor y({n, c, h / 2, w / 2});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = y.data() + p * (h / 2) * (w / 2);
    for (std::size_t i = 0; i < h / 2; ++i) {
      for (std::size_t j = 0; j < w / 2; ++j) {
        dst[i * (w / 2) + j] = 0.25 * (src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1] +
                                       src[(2 * i + 1) * w + 2 * j] +
                                       src[(2 * i + 1) * w + 2 * j + 1]);
      }
    }
  }
  return y;
}

Tensor avg_pool2x_backward(const Tensor& d_out) {
  require_rank(d_out, 4, "avg_pool2x_backward");
  const std::size_t n = d_out.dim(0), c = d_out.dim(1), h = d_out.dim(2), w = d_out.dim(3);
  Tensor dx({n, c, 2 * h, 2 * w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = d_out.data() + p * h * w;
    double* dst = dx.data() + p * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i) {
      for (std::size_t j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = 0.25 * src[(i / 2) * w + j / 2];
    }
  }
  return dx;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double f;  // weight of i1
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

std::pair<std::size_t, std::size_t> spatial_dims(const Shape& s, std::size_t& planes) {
  if (s.size() != 3 && s.size() != 4) fail(ErrorKind::kInvalidShape, "resize: rank must be 3 or 4");
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  planes = shape_numel(s) / (h * w);
  return {h, w};
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  std::size_t planes = 0;
  const auto [h, w] = spatial_dims(x.shape(), planes);
  Shape os = x.shape();
  os[os.size() - 2] = out_h;
  os[os.size() - 1] = out_w;
  Tensor y(os);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = y.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const Tap& a = ty[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const Tap& b = tx[j];
        const double top = src[a.i0 * w + b.i0] * (1.0 - b.f) + src[a.i0 * w + b.i1] * b.f;
        const double bot = src[a.i1 * w + b.i0] * (1.0 - b.f) + src[a.i1 * w + b.i1] * b.f;
        dst[i * out_w + j] = top * (1.0 - a.f) + bot * a.f;
      }
    }
  }
  return y;
}

Tensor resize_bilinear_backward(const Tensor& d_out, const Shape& input_shape) {
  std::size_t planes = 0;
  const auto [h, w] = spatial_dims(input_shape, planes);
  std::size_t out_planes = 0;
  const auto [out_h, out_w] = spatial_dims(d_out.shape(), out_planes);
  if (out_planes != planes) fail(ErrorKind::kInvalidShape, "resize_bilinear_backward: plane count");
  Tensor dx(input_shape);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = d_out.data() + p * out_h * out_w;
    double* dst = dx.data() + p * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const Tap& a = ty[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const Tap& b = tx[j];
        const double g = src[i * out_w + j];
        dst[a.i0 * w + b.i0] += g * (1.0 - a.f) * (1.0 - b.f);
        dst[a.i0 * w + b.i1] += g * (1.0 - a.f) * b.f;
        dst[a.i1 * w + b.i0] += g * a.f * (1.0 - b.f);
        dst[a.i1 * w + b.i1] += g * a.f * b.f;
      }
    }
  }
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    fail(ErrorKind::kInvalidShape,
         "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor y({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * ca * hw, ca * hw, y.data() + i * (ca + cb) * hw);
    std::copy_n(b.data() + i * cb * hw, cb * hw, y.data() + (i * (ca + cb) + ca) * hw);
  }
  return y;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::size_t first) {
  require_rank(x, 4, "split_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (first == 0 || first >= c) fail(ErrorKind::kInvalidShape, "split_channels: bad split point");
  Tensor a({n, first, x.dim(2), x.dim(3)});
  Tensor b({n, c - first, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data() + i * c * hw, first * hw, a.data() + i * first * hw);
    std::copy_n(x.data() + (i * c + first) * hw, (c - first) * hw, b.data() + i * (c - first) * hw);
  }
  return {std::move(a), std::move(b)};
}

void add_channel_bias(Tensor& h, const Tensor& e) {
  require_rank(h, 4, "add_channel_bias");
  const std::size_t n = h.dim(0), c = h.dim(1), hw = h.dim(2) * h.dim(3);
  if (e.shape() != Shape{n, c}) {
    fail(ErrorKind::kInvalidShape, "add_channel_bias: " + shape_str(e.shape()) + " vs " +
                                       shape_str(h.shape()));
  }
  for (std::size_t p = 0; p < n * c; ++p) {
    double* dst = h.data() + p * hw;
    const double v = e[p];
    for (std::size_t q = 0; q < hw; ++q) dst[q] += v;
  }
}

Tensor channel_bias_backward(const Tensor& d_out) {
  require_rank(d_out, 4, "channel_bias_backward");
  const std::size_t n = d_out.dim(0), c = d_out.dim(1), hw = d_out.dim(2) * d_out.dim(3);
  Tensor de({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = d_out.data() + p * hw;
    double s = 0.0;
    for (std::size_t q = 0; q < hw; ++q) s += src[q];
    de[p] = s;
  }
  return de;
}

namespace {
[[noreturn]] void backward_before_forward(const char* layer) {
  fail(ErrorKind::kState, std::string(layer) + ": backward called before forward");
}
}  // namespace

Tensor Conv2dLayer::forward(const Tensor& x) {
  input_ = x;
  return conv2d(x, *kernel_, *bias_, padding_);
}

Conv2dGrads Conv2dLayer::backward(const Tensor& d_out) {
  if (!input_) backward_before_forward("Conv2dLayer");
  return conv2d_backward(*input_, *kernel_, d_out, padding_);
}

Tensor DenseLayer::forward(const Tensor& x) {
  input_ = x;
  return dense(x, *weight_, *bias_);
}

DenseGrads DenseLayer::backward(const Tensor& d_out) {
  if (!input_) backward_before_forward("DenseLayer");
  return dense_backward(*input_, *weight_, d_out);
}

Tensor SiLULayer::forward(const Tensor& x) {
  input_ = x;
  return silu(x);
}

Tensor SiLULayer::backward(const Tensor& d_out) {
  if (!input_) backward_before_forward("SiLULayer");
  return silu_backward(*input_, d_out);
}

Tensor GroupNormLayer::forward(const Tensor& x) {
  GroupNormCache cache;
  Tensor y = group_norm(x, *gamma_, *beta_, groups_, &cache);
  cache_ = std::move(cache);
  return y;
}

GroupNormGrads GroupNormLayer::backward(const Tensor& d_out) {
  if (!cache_) backward_before_forward("GroupNormLayer");
  return group_norm_backward(*cache_, *gamma_, d_out);
}

}  // namespace urcdm::nn
