#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>

#include "woc/autodiff.hpp"
#include "woc/errors.hpp"

namespace woc {

// Difference offsets (x, y); the neighbor of (h, w) is (h - y, w - x):
// left, above, above-left, above-right.
inline constexpr std::array<std::pair<int, int>, 4> kAcrOffsets{{{0, 1}, {1, 0}, {1, 1}, {-1, 1}}};

inline double target_from_ratio(int bits, std::size_t c, std::size_t h, std::size_t w, double ratio = 4.0) {
  if (!(ratio > 0.0)) throw ConfigError("codelength ratio must be positive, got " + std::to_string(ratio));
  return static_cast<double>(bits) * static_cast<double>(c * h * w) / ratio;
}

struct AcrConfig {
  double target_bits = 768.0;
  double eta = 0.01;
  double momentum = 0.9;
  double epsilon = 1.0 / 64.0;
  // BCHW / target_bits; informational.
  double total_to_target_ratio = 4.0;

  static AcrConfig for_code(int bits, std::size_t c, std::size_t h, std::size_t w, double ratio = 4.0) {
    AcrConfig cfg;
    cfg.target_bits = target_from_ratio(bits, c, h, w, ratio);
    cfg.total_to_target_ratio = ratio;
    cfg.epsilon = std::ldexp(1.0, -bits);
    return cfg;
  }

  void validate() const {
    if (!(target_bits > 0.0)) throw ConfigError("target_bits must be positive");
    if (!(eta > 0.0)) throw ConfigError("alpha update rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("codelength momentum must be in [0, 1)");
    if (!(epsilon >= 0.0)) throw ConfigError("log epsilon must be non-negative");
  }
};

struct AcrState {
  double alpha = 1.0;
  double mean_bits = 0.0;
  std::uint64_t iteration = 0;
};

// (alpha / CHW) * sum of log2(|y| + eps) and log2(|y - y_neighbor| + eps) over
// in-bounds neighbors. Subgradient at zero magnitude or difference is zero.
template <typename T>
Var<T> acr_penalty(Var<T> y, double alpha, const AcrConfig& cfg) {
  const auto& yv = y.value();
  if (yv.rank() != 3) throw ShapeError("acr_penalty: expected C x H x W, got " + to_string(yv.shape()));
  const std::size_t C = yv.dim(0), H = yv.dim(1), W = yv.dim(2);
  const double eps = cfg.epsilon;
  const double scale = alpha / static_cast<double>(yv.size());
  auto for_each_pair = [=](auto&& f) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t i = (c * H + h) * W + w;
          for (auto [dx, dy] : kAcrOffsets) {
            const long nh = static_cast<long>(h) - dy, nw = static_cast<long>(w) - dx;
            if (nh < 0 || nw < 0 || nh >= static_cast<long>(H) || nw >= static_cast<long>(W)) continue;
            f(i, (c * H + static_cast<std::size_t>(nh)) * W + static_cast<std::size_t>(nw));
          }
        }
  };
  double total = 0.0;
  for (std::size_t i = 0; i < yv.size(); ++i) total += std::log2(std::abs(static_cast<double>(yv[i])) + eps);
  for_each_pair([&](std::size_t i, std::size_t j) {
    total += std::log2(std::abs(static_cast<double>(yv[i]) - yv[j]) + eps);
  });
  const std::size_t iy = y.id;
  return y.tape->record(Tensor<T>::scalar(static_cast<T>(scale * total)), {y},
                        [=](Tape<T>& t, const Tensor<T>& g) {
                          const auto& x = t.value(iy);
                          auto& gy = t.adjoint(iy);
                          const double k = static_cast<double>(g[0]) * scale / std::log(2.0);
                          auto dlog = [&](double v) {
                            if (v == 0.0) return 0.0;
                            return (v > 0.0 ? 1.0 : -1.0) / (std::abs(v) + eps);
                          };
                          for (std::size_t i = 0; i < x.size(); ++i) gy[i] += static_cast<T>(k * dlog(x[i]));
                          for_each_pair([&](std::size_t i, std::size_t j) {
                            const double d = k * dlog(static_cast<double>(x[i]) - x[j]);
                            gy[i] += static_cast<T>(d);
                            gy[j] -= static_cast<T>(d);
                          });
                        });
}

// The running mean starts at the first measurement.
inline AcrState update_alpha(const AcrState& s, double measured_bits, const AcrConfig& cfg) {
  AcrState next = s;
  next.mean_bits = s.iteration == 0 ? measured_bits : cfg.momentum * s.mean_bits + (1.0 - cfg.momentum) * measured_bits;
  next.alpha = s.alpha * std::exp(cfg.eta * (next.mean_bits / cfg.target_bits - 1.0));
  next.iteration = s.iteration + 1;
  return next;
}

}  // namespace woc
