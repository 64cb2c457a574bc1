#include "urcdm/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "urcdm/error.hpp"

namespace urcdm::image {

namespace {

struct Tap {
  std::size_t index;
  double weight;
};

// Box-filter taps mapping `in` samples onto `out` samples.
std::vector<std::vector<Tap>> area_taps(std::size_t in, std::size_t out) {
  std::vector<std::vector<Tap>> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double lo = o * scale, hi = (o + 1) * scale;
    auto first = static_cast<std::size_t>(std::floor(lo));
    auto last = std::min(in, static_cast<std::size_t>(std::ceil(hi)));
    for (std::size_t i = first; i < last; ++i) {
      const double w = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (w > 0.0) taps[o].push_back({i, w / scale});
    }
  }
  return taps;
}

void check_image(const Tensor& img, const char* what) {
  if (img.rank() != 3 && img.rank() != 4) {
    fail(ErrorKind::kInvalidShape, std::string(what) + ": expected [C,H,W] or [N,C,H,W], got " +
                                       shape_str(img.shape()));
  }
}

}  // namespace

Tensor area_resize(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  check_image(img, "area_resize");
  const std::size_t r = img.rank();
  const std::size_t h = img.dim(r - 2), w = img.dim(r - 1);
  if (out_h == 0 || out_w == 0) fail(ErrorKind::kInvalidShape, "area_resize: zero output size");
  if (h == out_h && w == out_w) return img;
  const std::size_t planes = img.size() / (h * w);
  const auto ty = area_taps(h, out_h), tx = area_taps(w, out_w);
  Shape shape = img.shape();
  shape[r - 2] = out_h;
  shape[r - 1] = out_w;
  Tensor out(shape);
  std::vector<double> rows(out_h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = img.data() + p * h * w;
    std::fill(rows.begin(), rows.end(), 0.0);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (const auto& t : ty[oy]) {
        const double* s = src + t.index * w;
        double* d = rows.data() + oy * w;
        for (std::size_t x = 0; x < w; ++x) d[x] += t.weight * s[x];
      }
    }
    double* dst = out.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        double acc = 0.0;
        for (const auto& t : tx[ox]) acc += t.weight * rows[oy * w + t.index];
        dst[oy * out_w + ox] = acc;
      }
    }
  }
  return out;
}

Tensor crop(const Tensor& img, long y, long x, std::size_t h, std::size_t w, double fill) {
  require_rank(img, 3, "crop");
  const std::size_t c = img.dim(0);
  const long H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  Tensor out({c, h, w}, fill);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h; ++i) {
      const long sy = y + static_cast<long>(i);
      if (sy < 0 || sy >= H) continue;
      const long x0 = std::max(0L, x), x1 = std::min(W, x + static_cast<long>(w));
      if (x0 >= x1) continue;
      const double* s = img.data() + (ch * H + sy) * W;
      std::copy(s + x0, s + x1, out.data() + (ch * h + i) * w + (x0 - x));
    }
  }
  return out;
}

Tensor crop_or_pad(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  require_rank(img, 3, "crop_or_pad");
  // Negative offsets pad; floor division keeps any odd remainder at the end.
  auto offset = [](std::size_t in, std::size_t out) {
    const long d = static_cast<long>(in) - static_cast<long>(out);
    return d >= 0 ? d / 2 : -((-d) / 2);
  };
  return crop(img, offset(img.dim(1), out_h), offset(img.dim(2), out_w), out_h, out_w, kWhite);
}

void paste(Tensor& dst, const Tensor& src, std::size_t y, std::size_t x) {
  require_rank(dst, 3, "paste dst");
  require_rank(src, 3, "paste src");
  const std::size_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  if (dst.dim(0) != c || y + h > dst.dim(1) || x + w > dst.dim(2)) {
    fail(ErrorKind::kInvalidShape, "paste: " + shape_str(src.shape()) + " at (" + std::to_string(y) +
                                       "," + std::to_string(x) + ") exceeds " + shape_str(dst.shape()));
  }
  const std::size_t H = dst.dim(1), W = dst.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h; ++i) {
      const double* s = src.data() + (ch * h + i) * w;
      std::copy(s, s + w, dst.data() + (ch * H + y + i) * W + x);
    }
  }
}

double sample_bilinear(const Tensor& img, std::size_t channel, double y, double x) {
  const std::size_t H = img.dim(1), W = img.dim(2);
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double fy = y - y0, fx = x - x0;
  const double* p = img.data() + channel * H * W;
  const double top = p[y0 * W + x0] + fx * (p[y0 * W + x1] - p[y0 * W + x0]);
  const double bot = p[y1 * W + x0] + fx * (p[y1 * W + x1] - p[y1 * W + x0]);
  return top + fy * (bot - top);
}

Tensor quantize8(const Tensor& img) {
  Tensor out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[i] = std::round(std::clamp(img[i], 0.0, 1.0) * 255.0) / 255.0;
  }
  return out;
}

Tensor dihedral(const Tensor& img, int k) {
  require_rank(img, 3, "dihedral");
  if (k < 0 || k > 7) fail(ErrorKind::kInvalidArgument, "dihedral: k must be in [0,8)");
  const std::size_t c = img.dim(0), n = img.dim(1);
  if (img.dim(2) != n) fail(ErrorKind::kInvalidShape, "dihedral: image must be square");
  Tensor out(img.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t y = i, x = (k & 4) ? n - 1 - j : j;
        for (int r = 0; r < (k & 3); ++r) {
          const std::size_t ny = x, nx = n - 1 - y;
          y = ny;
          x = nx;
        }
        out[(ch * n + y) * n + x] = img[(ch * n + i) * n + j];
      }
    }
  }
  return out;
}

namespace {

std::vector<std::uint8_t> to_interleaved(const Tensor& img) {
  require_rank(img, 3, "png");
  if (img.dim(0) != 3) fail(ErrorKind::kInvalidShape, "png: expected 3 channels");
  const std::size_t hw = img.dim(1) * img.dim(2);
  std::vector<std::uint8_t> px(hw * 3);
  for (std::size_t q = 0; q < hw; ++q) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = std::clamp(img[ch * hw + q], 0.0, 1.0);
      px[q * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return px;
}

Tensor from_interleaved(const std::vector<std::uint8_t>& px, std::size_t h, std::size_t w) {
  Tensor img({3, h, w});
  const std::size_t hw = h * w;
  for (std::size_t q = 0; q < hw; ++q) {
    for (std::size_t ch = 0; ch < 3; ++ch) img[ch * hw + q] = px[q * 3 + ch] / 255.0;
  }
  return img;
}

png_image make_png_image(std::size_t h, std::size_t w) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(w);
  im.height = static_cast<png_uint_32>(h);
  im.format = PNG_FORMAT_RGB;
  return im;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Tensor& img) {
  const auto px = to_interleaved(img);
  png_image im = make_png_image(img.dim(1), img.dim(2));
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&im, nullptr, &size, 0, px.data(), 0, nullptr)) {
    fail(ErrorKind::kIo, std::string("png encode: ") + im.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&im, out.data(), &size, 0, px.data(), 0, nullptr)) {
    fail(ErrorKind::kIo, std::string("png encode: ") + im.message);
  }
  out.resize(size);
  return out;
}

Tensor decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&im, bytes.data(), bytes.size())) {
    fail(ErrorKind::kIo, std::string("png decode: ") + im.message);
  }
  im.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&im);
    fail(ErrorKind::kIo, std::string("png decode: ") + im.message);
  }
  return from_interleaved(px, im.height, im.width);
}

void write_png(const std::string& path, const Tensor& img) {
  const auto bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::kIo, "write failed: " + path);
}

Tensor read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kIo, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

}  // namespace urcdm::image
