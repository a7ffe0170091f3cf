#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "woc/autodiff.hpp"
#include "woc/tensor.hpp"

namespace woc {

inline void check_bits(int bits) {
  if (bits < 1 || bits > 8) throw ConfigError("quantizer bits must be in [1, 8], got " + std::to_string(bits));
}

// Integer levels k of a quantized C x H x W feature tensor. The real value of
// a level is k / 2^(B-1); admissible levels are [-2^(B-1) + 1, 2^(B-1)].
struct QuantizedTensor {
  Shape shape;
  std::vector<int> levels;
  int bits = 6;

  int scale() const { return 1 << (bits - 1); }
  int min_level() const { return -scale() + 1; }
  int max_level() const { return scale(); }

  template <typename T = float>
  Tensor<T> to_real() const {
    Tensor<T> t(shape);
    const T s = static_cast<T>(scale());
    for (std::size_t i = 0; i < levels.size(); ++i) t[i] = static_cast<T>(levels[i]) / s;
    return t;
  }

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

// B x C x H x W binary expansion; plane 0 holds the most significant bit.
struct BitplaneTensor {
  int bits = 6;
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> data;

  BitplaneTensor() = default;
  BitplaneTensor(int b, std::size_t c, std::size_t h, std::size_t w)
      : bits(b), channels(c), height(h), width(w), data(static_cast<std::size_t>(b) * c * h * w, 0) {}

  std::size_t plane_size() const { return channels * height * width; }
  std::size_t index(std::size_t plane, std::size_t c, std::size_t h, std::size_t w) const {
    return ((plane * channels + c) * height + h) * width + w;
  }
  std::uint8_t& at(std::size_t plane, std::size_t c, std::size_t h, std::size_t w) {
    return data[index(plane, c, h, w)];
  }
  std::uint8_t at(std::size_t plane, std::size_t c, std::size_t h, std::size_t w) const {
    return data[index(plane, c, h, w)];
  }

  friend bool operator==(const BitplaneTensor&, const BitplaneTensor&) = default;
};

// Level of a single value: ceil(2^(B-1) y) clamped to the admissible range,
// which is the same as clamping y to (-1, 1] first.
template <typename T>
int quantize_level(T y, int bits) {
  const int s = 1 << (bits - 1);
  const double scaled = std::ceil(static_cast<double>(y) * s);
  if (!(scaled > -s)) return -s + 1;  // also catches NaN
  if (scaled > s) return s;
  return static_cast<int>(scaled);
}

template <typename T>
QuantizedTensor quantize(const Tensor<T>& y, int bits) {
  check_bits(bits);
  QuantizedTensor q{y.shape(), std::vector<int>(y.size()), bits};
  for (std::size_t i = 0; i < y.size(); ++i) q.levels[i] = quantize_level(y[i], bits);
  return q;
}

// Quantizes on the tape. Backward is the straight-through estimator:
// identity where -1 < y <= 1, zero where the clamp is active.
template <typename T>
Var<T> quantize_ste(Var<T> y, int bits) {
  check_bits(bits);
  const auto& yv = y.value();
  Tensor<T> out(yv.shape());
  const T s = static_cast<T>(1 << (bits - 1));
  for (std::size_t i = 0; i < yv.size(); ++i) out[i] = static_cast<T>(quantize_level(yv[i], bits)) / s;
  const std::size_t iy = y.id;
  return y.tape->record(std::move(out), {y}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(iy);
    auto& gy = t.adjoint(iy);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > T{-1} && x[i] <= T{1}) gy[i] += g[i];
    }
  });
}

// Offset-binary expansion: u = k + 2^(B-1) - 1 in [0, 2^B - 1], written
// MSB first across the B planes.
inline BitplaneTensor bitplane_decompose(const QuantizedTensor& q) {
  check_bits(q.bits);
  if (q.shape.size() != 3) throw ShapeError("bitplane_decompose: expected C x H x W, got " + to_string(q.shape));
  BitplaneTensor b(q.bits, q.shape[0], q.shape[1], q.shape[2]);
  const int offset = q.scale() - 1;
  const std::size_t n = b.plane_size();
  for (std::size_t i = 0; i < n; ++i) {
    const int k = q.levels[i];
    if (k < q.min_level() || k > q.max_level()) {
      throw ShapeError("bitplane_decompose: level " + std::to_string(k) + " outside [" +
                       std::to_string(q.min_level()) + ", " + std::to_string(q.max_level()) + "]");
    }
    const unsigned u = static_cast<unsigned>(k + offset);
    for (int p = 0; p < q.bits; ++p) {
      b.data[static_cast<std::size_t>(p) * n + i] = static_cast<std::uint8_t>((u >> (q.bits - 1 - p)) & 1u);
    }
  }
  return b;
}

inline QuantizedTensor bitplane_compose(const BitplaneTensor& b) {
  check_bits(b.bits);
  QuantizedTensor q{{b.channels, b.height, b.width}, std::vector<int>(b.plane_size()), b.bits};
  const int offset = q.scale() - 1;
  const std::size_t n = b.plane_size();
  for (std::size_t i = 0; i < n; ++i) {
    unsigned u = 0;
    for (int p = 0; p < b.bits; ++p) u = (u << 1) | (b.data[static_cast<std::size_t>(p) * n + i] & 1u);
    q.levels[i] = static_cast<int>(u) - offset;
  }
  return q;
}

}  // namespace woc
