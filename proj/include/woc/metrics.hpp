#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "woc/autodiff.hpp"
#include "woc/errors.hpp"
#include "woc/tensor.hpp"

namespace woc {

struct MsSsimConfig {
  int scales = 5;
  std::vector<double> weights;
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;

  // Exponent weights of the five-scale construction, normalized to sum to 1;
  // fewer scales keep the leading weights and renormalize.
  static MsSsimConfig with_scales(int scales) {
    static constexpr std::array<double, 5> kBase{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    if (scales < 1 || scales > 5) throw ConfigError("MS-SSIM scales must be in [1, 5], got " + std::to_string(scales));
    MsSsimConfig c;
    c.scales = scales;
    c.weights.assign(kBase.begin(), kBase.begin() + scales);
    const double s = std::accumulate(c.weights.begin(), c.weights.end(), 0.0);
    for (auto& w : c.weights) w /= s;
    return c;
  }
  static MsSsimConfig evaluation() { return with_scales(5); }
  static MsSsimConfig training() { return with_scales(3); }

  std::size_t min_size() const { return window << (scales - 1); }

  void validate() const {
    if (scales < 1 || weights.size() != static_cast<std::size_t>(scales)) {
      throw ConfigError("MS-SSIM needs one weight per scale");
    }
    for (double w : weights) {
      if (!(w >= 0.0)) throw ConfigError("MS-SSIM weights must be non-negative");
    }
    if (std::abs(std::accumulate(weights.begin(), weights.end(), 0.0) - 1.0) > 1e-9) {
      throw ConfigError("MS-SSIM weights must sum to 1");
    }
    if (window == 0 || !(sigma > 0.0)) throw ConfigError("MS-SSIM window must be non-empty with positive sigma");
  }

  void check_size(std::size_t h, std::size_t w) const {
    if (h < min_size() || w < min_size()) {
      throw ShapeError("MS-SSIM with " + std::to_string(scales) + " scales and window " + std::to_string(window) +
                       " needs images of at least " + std::to_string(min_size()) + "x" + std::to_string(min_size()) +
                       ", got " + std::to_string(h) + "x" + std::to_string(w));
    }
  }
};

enum class ColorSpace { kRgb, kYCbCr };

// Per-channel weights for combining MS-SSIM values. For kYCbCr the inputs
// are RGB and are converted before comparison.
struct ColorWeights {
  ColorSpace space = ColorSpace::kRgb;
  std::array<double, 3> weights{1.0 / 3, 1.0 / 3, 1.0 / 3};

  static ColorWeights rgb() { return {}; }
  static ColorWeights ycbcr() { return {ColorSpace::kYCbCr, {6.0 / 8, 1.0 / 8, 1.0 / 8}}; }

  void validate() const {
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw ConfigError("color weights must be non-negative");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("color weights must sum to 1");
  }
};

inline double bpp(double total_bits, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw ConfigError("bpp: image has no pixels");
  return total_bits / (static_cast<double>(width) * static_cast<double>(height));
}

// ---------------------------------------------------------------------------
// Color conversion (BT.601 full range, chroma centered at 0.5)

namespace detail {

inline const Eigen::Matrix3d& ycbcr_matrix() {
  static const Eigen::Matrix3d m = (Eigen::Matrix3d() << 0.299, 0.587, 0.114,  //
                                    -0.168735891647856, -0.331264108352144, 0.5,  //
                                    0.5, -0.418687589158970, -0.081312410841030)
                                       .finished();
  return m;
}

inline const Eigen::Matrix3d& ycbcr_inverse() {
  static const Eigen::Matrix3d m = ycbcr_matrix().inverse();
  return m;
}

template <typename T>
Tensor<T> apply_color_matrix(const Tensor<T>& img, const Eigen::Matrix3d& m, const Eigen::Vector3d& pre,
                             const Eigen::Vector3d& post) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("color conversion needs 3 x H x W, got " + to_string(img.shape()));
  const std::size_t n = img.dim(1) * img.dim(2);
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Vector3d v(img[i], img[n + i], img[2 * n + i]);
    Eigen::Vector3d r = m * (v + pre) + post;
    for (int c = 0; c < 3; ++c) out[c * n + i] = static_cast<T>(r[c]);
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> rgb_to_ycbcr(const Tensor<T>& rgb) {
  return detail::apply_color_matrix(rgb, detail::ycbcr_matrix(), Eigen::Vector3d::Zero(), Eigen::Vector3d(0, 0.5, 0.5));
}

template <typename T>
Tensor<T> ycbcr_to_rgb(const Tensor<T>& ycc) {
  return detail::apply_color_matrix(ycc, detail::ycbcr_inverse(), Eigen::Vector3d(0, -0.5, -0.5),
                                    Eigen::Vector3d::Zero());
}

// Differentiable conversion as a fixed 1x1 convolution.
template <typename T>
Var<T> rgb_to_ycbcr(Var<T> rgb) {
  Tensor<T> k({3, 3, 1, 1});
  for (int o = 0; o < 3; ++o)
    for (int c = 0; c < 3; ++c) k[o * 3 + c] = static_cast<T>(detail::ycbcr_matrix()(o, c));
  auto y = conv2d(rgb, rgb.tape->constant(std::move(k)), 1, 0);
  return bias_add(y, rgb.tape->constant(Tensor<T>({3}, {T{0}, T{0.5}, T{0.5}})));
}

// ---------------------------------------------------------------------------
// Evaluation MS-SSIM

// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double mid = (static_cast<double>(size) - 1.0) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - mid;
    g[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

namespace detail {

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double at(std::size_t i, std::size_t j) const { return v[i * w + j]; }
};

// Separable filtering with VALID extent.
inline Plane blur_valid(const Plane& p, const std::vector<double>& taps) {
  const std::size_t k = taps.size();
  Plane tmp{p.h, p.w - k + 1, {}};
  tmp.v.assign(tmp.h * tmp.w, 0.0);
  for (std::size_t i = 0; i < tmp.h; ++i)
    for (std::size_t j = 0; j < tmp.w; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += taps[t] * p.v[i * p.w + j + t];
      tmp.v[i * tmp.w + j] = acc;
    }
  Plane out{p.h - k + 1, tmp.w, {}};
  out.v.assign(out.h * out.w, 0.0);
  for (std::size_t i = 0; i < out.h; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      const double c = taps[t];
      const double* row = &tmp.v[(i + t) * tmp.w];
      double* dst = &out.v[i * out.w];
      for (std::size_t j = 0; j < out.w; ++j) dst[j] += c * row[j];
    }
  return out;
}

// 2x2 mean pooling; an odd trailing row or column is first duplicated.
inline Plane downsample2(const Plane& p) {
  Plane out{(p.h + 1) / 2, (p.w + 1) / 2, {}};
  out.v.resize(out.h * out.w);
  for (std::size_t i = 0; i < out.h; ++i)
    for (std::size_t j = 0; j < out.w; ++j) {
      const std::size_t i0 = 2 * i, j0 = 2 * j;
      const std::size_t i1 = std::min(i0 + 1, p.h - 1), j1 = std::min(j0 + 1, p.w - 1);
      out.v[i * out.w + j] = 0.25 * (p.at(i0, j0) + p.at(i0, j1) + p.at(i1, j0) + p.at(i1, j1));
    }
  return out;
}

struct SsimStats {
  double ssim = 0.0;  // mean of luminance * contrast-structure
  double cs = 0.0;    // mean of contrast-structure
};

// Covariances are formed as E[xy] - E[x]E[y] per image so that identical
// inputs give luminance and contrast-structure terms of exactly 1.
inline SsimStats ssim_stats(const Plane& x, const Plane& y, const std::vector<double>& taps, double c1, double c2) {
  Plane xy = x, xx = x, yy = y;
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    xy.v[i] = x.v[i] * y.v[i];
    xx.v[i] = x.v[i] * x.v[i];
    yy.v[i] = y.v[i] * y.v[i];
  }
  const Plane mx = blur_valid(x, taps), my = blur_valid(y, taps);
  const Plane mxy = blur_valid(xy, taps), mxx = blur_valid(xx, taps), myy = blur_valid(yy, taps);
  SsimStats s;
  const std::size_t n = mx.v.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double ux = mx.v[i], uy = my.v[i];
    const double lum = (2.0 * (ux * uy) + c1) / (ux * ux + uy * uy + c1);
    const double cs = (2.0 * (mxy.v[i] - ux * uy) + c2) / ((mxx.v[i] - ux * ux) + (myy.v[i] - uy * uy) + c2);
    s.ssim += lum * cs;
    s.cs += cs;
  }
  s.ssim /= static_cast<double>(n);
  s.cs /= static_cast<double>(n);
  return s;
}

template <typename T>
Plane channel_plane(const Tensor<T>& img, std::size_t c) {
  Plane p{img.dim(1), img.dim(2), {}};
  const std::size_t n = p.h * p.w;
  p.v.assign(img.data() + c * n, img.data() + (c + 1) * n);
  return p;
}

inline double ms_ssim_plane(Plane x, Plane y, const MsSsimConfig& cfg) {
  const auto taps = gaussian_taps(cfg.window, cfg.sigma);
  const double c1 = cfg.k1 * cfg.k1, c2 = cfg.k2 * cfg.k2;
  double result = 1.0;
  for (int s = 0; s < cfg.scales; ++s) {
    if (s > 0) {
      x = downsample2(x);
      y = downsample2(y);
    }
    const SsimStats st = ssim_stats(x, y, taps, c1, c2);
    const double term = s + 1 == cfg.scales ? st.ssim : st.cs;
    result *= std::pow(std::max(term, 0.0), cfg.weights[static_cast<std::size_t>(s)]);
  }
  return result;
}

template <typename T>
void check_image_pair(const Tensor<T>& x, const Tensor<T>& y, const MsSsimConfig& cfg) {
  cfg.validate();
  require_same_shape(x, y, "ms_ssim");
  if (x.rank() != 3) throw ShapeError("ms_ssim: expected C x H x W, got " + to_string(x.shape()));
  cfg.check_size(x.dim(1), x.dim(2));
}

}  // namespace detail

// Per-channel MS-SSIM values of two C x H x W images.
template <typename T>
std::vector<double> ms_ssim_per_channel(const Tensor<T>& x, const Tensor<T>& y,
                                        const MsSsimConfig& cfg = MsSsimConfig::evaluation()) {
  detail::check_image_pair(x, y, cfg);
  std::vector<double> out(x.dim(0));
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    out[c] = detail::ms_ssim_plane(detail::channel_plane(x, c), detail::channel_plane(y, c), cfg);
  }
  return out;
}

// MS-SSIM of two RGB images combined across channels by `color`.
template <typename T>
double ms_ssim(const Tensor<T>& x, const Tensor<T>& y, const MsSsimConfig& cfg = MsSsimConfig::evaluation(),
               const ColorWeights& color = ColorWeights::rgb()) {
  color.validate();
  if (x.rank() != 3 || x.dim(0) != 3) throw ShapeError("ms_ssim: expected 3 x H x W, got " + to_string(x.shape()));
  std::vector<double> per;
  if (color.space == ColorSpace::kYCbCr) {
    per = ms_ssim_per_channel(rgb_to_ycbcr(x), rgb_to_ycbcr(y), cfg);
  } else {
    per = ms_ssim_per_channel(x, y, cfg);
  }
  double r = 0.0;
  for (std::size_t c = 0; c < 3; ++c) r += color.weights[c] * per[c];
  return r;
}

// ---------------------------------------------------------------------------
// Differentiable MS-SSIM

// Depthwise separable filtering of C x H x W with VALID extent.
template <typename T>
Var<T> gaussian_blur(Var<T> x, const std::vector<double>& taps) {
  const auto& xv = x.value();
  const std::size_t k = taps.size();
  if (xv.rank() != 3 || xv.dim(1) < k || xv.dim(2) < k) {
    throw ShapeError("gaussian_blur: input " + to_string(xv.shape()) + " smaller than window " + std::to_string(k));
  }
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Ho = H - k + 1, Wo = W - k + 1;
  Tensor<T> out({C, Ho, Wo});
  std::vector<double> tmp(H * Wo);
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = xv.data() + c * H * W;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t) acc += taps[t] * src[i * W + j + t];
        tmp[i * Wo + j] = acc;
      }
    T* dst = out.data() + c * Ho * Wo;
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t) acc += taps[t] * tmp[(i + t) * Wo + j];
        dst[i * Wo + j] = static_cast<T>(acc);
      }
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.adjoint(ix);
    std::vector<double> gtmp(H * Wo);
    for (std::size_t c = 0; c < C; ++c) {
      std::fill(gtmp.begin(), gtmp.end(), 0.0);
      const T* gsrc = g.data() + c * Ho * Wo;
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t t = 0; t < k; ++t)
          for (std::size_t j = 0; j < Wo; ++j) gtmp[(i + t) * Wo + j] += taps[t] * gsrc[i * Wo + j];
      T* gdst = gx.data() + c * H * W;
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          const double v = gtmp[i * Wo + j];
          for (std::size_t tt = 0; tt < k; ++tt) gdst[i * W + j + tt] += static_cast<T>(taps[tt] * v);
        }
    }
  });
}

// Same construction as ms_ssim on the tape. Spatial dims must stay even
// through every pooling step.
template <typename T>
Var<T> ms_ssim_loss_term(Var<T> x, Var<T> y, const MsSsimConfig& cfg = MsSsimConfig::training(),
                         const ColorWeights& color = ColorWeights::rgb()) {
  detail::check_image_pair(x.value(), y.value(), cfg);
  color.validate();
  const std::size_t C = x.value().dim(0);
  if (C != 3) throw ShapeError("ms_ssim: expected 3 x H x W, got " + to_string(x.shape()));
  for (int s = 0; s + 1 < cfg.scales; ++s) {
    if ((x.value().dim(1) >> s) % 2 || (x.value().dim(2) >> s) % 2) {
      throw ShapeError("differentiable ms_ssim needs dims divisible by 2^(scales-1), got " + to_string(x.shape()));
    }
  }
  if (color.space == ColorSpace::kYCbCr) {
    x = rgb_to_ycbcr(x);
    y = rgb_to_ycbcr(y);
  }
  const auto taps = gaussian_taps(cfg.window, cfg.sigma);
  const T c1 = static_cast<T>(cfg.k1 * cfg.k1), c2 = static_cast<T>(cfg.k2 * cfg.k2);
  std::vector<Var<T>> per(C);
  for (int s = 0; s < cfg.scales; ++s) {
    if (s > 0) {
      x = avg_pool2(x);
      y = avg_pool2(y);
    }
    auto mx = gaussian_blur(x, taps), my = gaussian_blur(y, taps);
    auto mxy = gaussian_blur(mul(x, y), taps);
    auto mxx = gaussian_blur(mul(x, x), taps), myy = gaussian_blur(mul(y, y), taps);
    auto uxy = mul(mx, my);
    auto uxx = mul(mx, mx), uyy = mul(my, my);
    auto cs = div(add_scalar(mul_scalar(sub(mxy, uxy), T{2}), c2), add_scalar(add(sub(mxx, uxx), sub(myy, uyy)), c2));
    Var<T> map = cs;
    if (s + 1 == cfg.scales) map = mul(div(add_scalar(mul_scalar(uxy, T{2}), c1), add_scalar(add(uxx, uyy), c1)), cs);
    const T w = static_cast<T>(cfg.weights[static_cast<std::size_t>(s)]);
    for (std::size_t c = 0; c < C; ++c) {
      auto term = pow_scalar(relu(mean(channel_slice(map, c, 1))), w);
      per[c] = s == 0 ? term : mul(per[c], term);
    }
  }
  Var<T> total = mul_scalar(per[0], static_cast<T>(color.weights[0]));
  for (std::size_t c = 1; c < C; ++c) total = add(total, mul_scalar(per[c], static_cast<T>(color.weights[c])));
  return total;
}

}  // namespace woc
