#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "woc/parameters.hpp"
#include "woc/tensor.hpp"

namespace woc {

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode tape. Operations append nodes in execution order; backward()
// walks them in reverse. One tape per thread; tapes share nothing.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    return push(std::move(value), false, nullptr, nullptr);
  }

  Var<T> variable(Tensor<T> value) {
    return push(std::move(value), true, nullptr, nullptr);
  }

  // Leaf bound to a parameter. Repeated binds return the same node so the
  // parameter's gradient is accumulated once per backward pass.
  Var<T> parameter(Parameter<T>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return Var<T>{this, it->second};
    Var<T> v = push(p.value, true, nullptr, &p);
    param_ids_[&p] = v.id;
    return v;
  }

  // Records an operation output. The backward function is dropped when no
  // input requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, nullptr);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor<T>& value(Var<T> v) const { return value(v.id); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Adjoint buffer for a node, allocated as zeros on first use.
  Tensor<T>& adjoint(std::size_t id) {
    if (!has_adjoint_[id]) {
      adjoints_[id] = Tensor<T>(nodes_[id].value.shape());
      has_adjoint_[id] = true;
    }
    return adjoints_[id];
  }

  // Computes d loss / d node for every node reachable from loss and adds
  // the parameter adjoints into the bound Parameter::grad tensors. May be
  // called more than once on the same tape; adjoints restart each call.
  void backward(Var<T> loss) {
    const auto& lv = value(loss.id);
    if (lv.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + to_string(lv.shape()));
    }
    adjoints_.assign(nodes_.size(), Tensor<T>());
    has_adjoint_.assign(nodes_.size(), false);
    visits_ = 0;
    if (!nodes_[loss.id].requires_grad) return;
    adjoint(loss.id).fill(T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (!has_adjoint_[i]) continue;
      auto& node = nodes_[i];
      if (node.backward) {
        ++visits_;
        node.backward(*this, adjoints_[i]);
      }
    }
    for (std::size_t i = 0; i <= loss.id; ++i) {
      auto* p = nodes_[i].param;
      if (p && has_adjoint_[i]) {
        auto& g = adjoints_[i];
        for (std::size_t j = 0; j < g.size(); ++j) p->grad[j] += g[j];
      }
    }
  }

  // Adjoint of a node after backward(); zeros when unreachable.
  Tensor<T> grad(Var<T> v) const {
    if (v.id < has_adjoint_.size() && has_adjoint_[v.id]) return adjoints_[v.id];
    return Tensor<T>(nodes_.at(v.id).value.shape());
  }

  // Number of operation backward functions run by the last backward().
  std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad;
    BackwardFn backward;
    Parameter<T>* param;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn, Parameter<T>* p) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(fn), p});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> adjoints_;
  std::vector<bool> has_adjoint_;
  std::unordered_map<Parameter<T>*, std::size_t> param_ids_;
  std::size_t visits_ = 0;
};

namespace detail {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ShapeError("operands recorded on different tapes");
}

// Applies an elementwise binary op with per-element partials.
template <typename T, typename Fwd, typename DA, typename DB>
Var<T> binary_elementwise(Var<T> a, Var<T> b, const char* name, Fwd fwd, DA da, DB db) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape(av, bv, name);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ia);
    const auto& y = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& ga = t.adjoint(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(x[i], y[i]);
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.adjoint(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(x[i], y[i]);
    }
  });
}

// Elementwise unary op; dfn receives (input, output).
template <typename T, typename Fwd, typename D>
Var<T> unary_elementwise(Var<T> a, Fwd fwd, D dfn) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id;
  const std::size_t io = a.tape->size();
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ia);
    const auto& y = t.value(io);
    auto& ga = t.adjoint(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfn(x[i], y[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary_elementwise(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary_elementwise(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary_elementwise(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return detail::binary_elementwise(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T{1} / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  return detail::unary_elementwise(
      a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T s) {
  return detail::unary_elementwise(
      a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> leaky_relu(Var<T> a, T slope) {
  if (!(slope >= T{0} && slope < T{1})) throw ConfigError("leaky_relu: slope must be in [0, 1)");
  return detail::unary_elementwise(
      a, [slope](T x) { return x > T{0} ? x : slope * x; },
      [slope](T x, T) { return x > T{0} ? T{1} : slope; });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return leaky_relu(a, T{0});
}

// Gradient passes where lo < x < hi.
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return detail::unary_elementwise(
      a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T{1} : T{0}; });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary_elementwise(
      a, [](T x) { return T{1} / (T{1} + std::exp(-x)); },
      [](T, T y) { return y * (T{1} - y); });
}

// x^p for x >= 0; non-positive inputs map to 0 with zero gradient.
template <typename T>
Var<T> pow_scalar(Var<T> a, T p) {
  return detail::unary_elementwise(
      a, [p](T x) { return x > T{0} ? std::pow(x, p) : T{0}; },
      [p](T x, T) { return x > T{0} ? p * std::pow(x, p - T{1}) : T{0}; });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  double acc = 0.0;
  for (T v : av) acc += static_cast<double>(v);
  const std::size_t ia = a.id;
  return a.tape->record(Tensor<T>::scalar(static_cast<T>(acc)), {a},
                        [=](Tape<T>& t, const Tensor<T>& g) {
                          auto& ga = t.adjoint(ia);
                          for (auto& v : ga) v += g[0];
                        });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const auto n = a.value().size();
  const auto& av = a.value();
  double acc = 0.0;
  for (T v : av) acc += static_cast<double>(v);
  const std::size_t ia = a.id;
  return a.tape->record(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), {a},
                        [=](Tape<T>& t, const Tensor<T>& g) {
                          auto& ga = t.adjoint(ia);
                          const T s = g[0] / static_cast<T>(n);
                          for (auto& v : ga) v += s;
                        });
}

// Copy of a value with no path back to its producers.
template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape->constant(a.value());
}

// Adds b[c] to every element of channel c of a C x H x W tensor.
template <typename T>
Var<T> bias_add(Var<T> x, Var<T> b) {
  detail::require_same_tape(x, b);
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (xv.rank() != 3 || bv.rank() != 1 || bv.dim(0) != xv.dim(0)) {
    throw ShapeError("bias_add: " + to_string(xv.shape()) + " + " + to_string(bv.shape()));
  }
  const std::size_t plane = xv.dim(1) * xv.dim(2);
  Tensor<T> out = xv;
  for (std::size_t c = 0; c < xv.dim(0); ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += bv[c];
  }
  const std::size_t ix = x.id, ib = b.id;
  return x.tape->record(std::move(out), {x, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ix)) {
      auto& gx = t.adjoint(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.adjoint(ib);
      for (std::size_t c = 0; c < gb.size(); ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += g[c * plane + i];
        gb[c] += static_cast<T>(acc);
      }
    }
  });
}

// Channel-wise concatenation of two C_i x H x W tensors.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
    throw ShapeError("concat_channels: " + to_string(av.shape()) + " + " + to_string(bv.shape()));
  }
  Tensor<T> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy(av.begin(), av.end(), out.begin());
  std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t ia = a.id, ib = b.id, na = av.size();
  return a.tape->record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) {
      auto& ga = t.adjoint(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.adjoint(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

// Channels [first, first + count) of a C x H x W tensor.
template <typename T>
Var<T> channel_slice(Var<T> x, std::size_t first, std::size_t count) {
  const auto& xv = x.value();
  if (xv.rank() != 3 || count == 0 || first + count > xv.dim(0)) {
    throw ShapeError("channel_slice out of range for " + to_string(xv.shape()));
  }
  const std::size_t plane = xv.dim(1) * xv.dim(2);
  Tensor<T> out({count, xv.dim(1), xv.dim(2)});
  std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(first * plane), count * plane, out.begin());
  const std::size_t ix = x.id, off = first * plane;
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.adjoint(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
  });
}

// 2x2 mean pooling with stride 2; a trailing odd row/column is dropped.
template <typename T>
Var<T> avg_pool2(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() != 3 || xv.dim(1) < 2 || xv.dim(2) < 2) {
    throw ShapeError("avg_pool2: input " + to_string(xv.shape()));
  }
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor<T> out({C, Ho, Wo});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        out.at(c, i, j) = (xv.at(c, 2 * i, 2 * j) + xv.at(c, 2 * i, 2 * j + 1) +
                           xv.at(c, 2 * i + 1, 2 * j) + xv.at(c, 2 * i + 1, 2 * j + 1)) *
                          T{0.25};
      }
    }
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.adjoint(ix);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < Ho; ++i) {
        for (std::size_t j = 0; j < Wo; ++j) {
          const T v = g.at(c, i, j) * T{0.25};
          gx.at(c, 2 * i, 2 * j) += v;
          gx.at(c, 2 * i, 2 * j + 1) += v;
          gx.at(c, 2 * i + 1, 2 * j) += v;
          gx.at(c, 2 * i + 1, 2 * j + 1) += v;
        }
      }
    }
  });
}

// Numerically stable binary cross-entropy on a scalar logit against a
// 0/1 label: softplus(z) - label * z.
template <typename T>
Var<T> bce_with_logits(Var<T> logit, T label) {
  const T z = logit.value().item();
  const T loss = std::max(z, T{0}) - z * label + std::log1p(std::exp(-std::abs(z)));
  const std::size_t iz = logit.id;
  return logit.tape->record(Tensor<T>::scalar(loss), {logit},
                            [=](Tape<T>& t, const Tensor<T>& g) {
                              const T p = T{1} / (T{1} + std::exp(-z));
                              t.adjoint(iz)[0] += g[0] * (p - label);
                            });
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

// Geometry of a forward cross-correlation from (cin, hin, win) to
// (cout, hout, wout).
struct ConvGeometry {
  std::size_t cin, hin, win, cout, k, stride, pad, hout, wout;

  std::size_t patch() const { return cin * k * k; }
  std::size_t pixels() const { return hout * wout; }
};

inline void check_kernel(std::size_t k, std::size_t stride, const char* op) {
  if (k < 1 || k > 4) {
    throw ConfigError(std::string(op) + ": kernel size must be 1 to 4, got " + std::to_string(k));
  }
  if (stride != 1 && stride != 2) {
    throw ConfigError(std::string(op) + ": stride must be 1 or 2, got " + std::to_string(stride));
  }
}

// cols is patch() x pixels(), row-major.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, double* cols) {
  const long hin = static_cast<long>(g.hin), win = static_cast<long>(g.win);
  const long s = static_cast<long>(g.stride), p = static_cast<long>(g.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* plane = in + c * g.hin * g.win;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
        double* dst = cols + row * g.pixels();
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long iy = static_cast<long>(oy) * s - p + static_cast<long>(ky);
          double* d = dst + oy * g.wout;
          if (iy < 0 || iy >= hin) {
            std::fill(d, d + g.wout, 0.0);
            continue;
          }
          const T* src = plane + iy * win;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long ix = static_cast<long>(ox) * s - p + static_cast<long>(kx);
            d[ox] = (ix >= 0 && ix < win) ? static_cast<double>(src[ix]) : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters cols back into an input-shaped buffer.
inline void col2im(const double* cols, const ConvGeometry& g, double* out) {
  const long hin = static_cast<long>(g.hin), win = static_cast<long>(g.win);
  const long s = static_cast<long>(g.stride), p = static_cast<long>(g.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* plane = out + c * g.hin * g.win;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
        const double* src = cols + row * g.pixels();
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long iy = static_cast<long>(oy) * s - p + static_cast<long>(ky);
          if (iy < 0 || iy >= hin) continue;
          const double* d = src + oy * g.wout;
          double* dst = plane + iy * win;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long ix = static_cast<long>(ox) * s - p + static_cast<long>(kx);
            if (ix >= 0 && ix < win) dst[ix] += d[ox];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<double> to_double(const Tensor<T>& t) {
  return std::vector<double>(t.begin(), t.end());
}

template <typename T>
void add_into(Tensor<T>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += static_cast<T>(src[i]);
}

}  // namespace detail

// Cross-correlation of a C_in x H x W input with C_out x C_in x k x k
// kernels. Output H' = floor((H + 2 pad - k) / stride) + 1.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernels, std::size_t stride, std::size_t pad) {
  detail::require_same_tape(input, kernels);
  const auto& x = input.value();
  const auto& w = kernels.value();
  if (x.rank() != 3 || w.rank() != 4) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + ", kernels " + to_string(w.shape()));
  }
  if (w.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(w.dim(1)) +
                     " input channels, input has " + std::to_string(x.dim(0)));
  }
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernels must be square");
  const std::size_t k = w.dim(2);
  detail::check_kernel(k, stride, "conv2d");
  if (x.dim(1) + 2 * pad < k || x.dim(2) + 2 * pad < k) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " smaller than kernel");
  }
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), k, stride, pad,
                         (x.dim(1) + 2 * pad - k) / stride + 1,
                         (x.dim(2) + 2 * pad - k) / stride + 1};
  std::vector<double> cols(g.patch() * g.pixels());
  detail::im2col(x.data(), g, cols.data());
  const auto wd = detail::to_double(w);
  detail::ConstRowMap W(wd.data(), static_cast<long>(g.cout), static_cast<long>(g.patch()));
  detail::ConstRowMap X(cols.data(), static_cast<long>(g.patch()), static_cast<long>(g.pixels()));
  detail::RowMatrix Y = W * X;
  Tensor<T> out({g.cout, g.hout, g.wout});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(Y.data()[i]);

  const std::size_t ix = input.id, iw = kernels.id;
  return input.tape->record(std::move(out), {input, kernels}, [=](Tape<T>& t, const Tensor<T>& gy) {
    const auto gyd = detail::to_double(gy);
    detail::ConstRowMap GY(gyd.data(), static_cast<long>(g.cout), static_cast<long>(g.pixels()));
    if (t.requires_grad(iw)) {
      std::vector<double> c(g.patch() * g.pixels());
      detail::im2col(t.value(ix).data(), g, c.data());
      detail::ConstRowMap Xc(c.data(), static_cast<long>(g.patch()), static_cast<long>(g.pixels()));
      detail::RowMatrix GW = GY * Xc.transpose();
      auto& gw = t.adjoint(iw);
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += static_cast<T>(GW.data()[i]);
    }
    if (t.requires_grad(ix)) {
      const auto wv = detail::to_double(t.value(iw));
      detail::ConstRowMap Wm(wv.data(), static_cast<long>(g.cout), static_cast<long>(g.patch()));
      detail::RowMatrix GC = Wm.transpose() * GY;
      std::vector<double> gx(g.cin * g.hin * g.win, 0.0);
      detail::col2im(GC.data(), g, gx.data());
      detail::add_into(t.adjoint(ix), gx);
    }
  });
}

// Adjoint of conv2d. Kernels are C_in x C_out x k x k (the same tensor a
// conv2d from C_out to C_in channels would use). Output spatial size is
// (H - 1) * stride - 2 pad + k.
template <typename T>
Var<T> transposed_conv2d(Var<T> input, Var<T> kernels, std::size_t stride, std::size_t pad) {
  detail::require_same_tape(input, kernels);
  const auto& x = input.value();
  const auto& w = kernels.value();
  if (x.rank() != 3 || w.rank() != 4) {
    throw ShapeError("transposed_conv2d: input " + to_string(x.shape()) + ", kernels " +
                     to_string(w.shape()));
  }
  if (w.dim(0) != x.dim(0)) {
    throw ShapeError("transposed_conv2d: kernel expects " + std::to_string(w.dim(0)) +
                     " input channels, input has " + std::to_string(x.dim(0)));
  }
  if (w.dim(2) != w.dim(3)) throw ShapeError("transposed_conv2d: kernels must be square");
  const std::size_t k = w.dim(2);
  detail::check_kernel(k, stride, "transposed_conv2d");
  const long hout = static_cast<long>((x.dim(1) - 1) * stride + k) - 2 * static_cast<long>(pad);
  const long wout = static_cast<long>((x.dim(2) - 1) * stride + k) - 2 * static_cast<long>(pad);
  if (hout < 1 || wout < 1) throw ShapeError("transposed_conv2d: empty output");
  // Geometry of the conv2d this operator is the adjoint of.
  detail::ConvGeometry g{w.dim(1), static_cast<std::size_t>(hout), static_cast<std::size_t>(wout),
                         w.dim(0), k, stride, pad, x.dim(1), x.dim(2)};
  const auto wd = detail::to_double(w);
  const auto xd = detail::to_double(x);
  detail::ConstRowMap Wc(wd.data(), static_cast<long>(g.cout), static_cast<long>(g.patch()));
  detail::ConstRowMap X(xd.data(), static_cast<long>(g.cout), static_cast<long>(g.pixels()));
  detail::RowMatrix cols = Wc.transpose() * X;
  std::vector<double> yd(g.cin * g.hin * g.win, 0.0);
  detail::col2im(cols.data(), g, yd.data());
  Tensor<T> out({g.cin, g.hin, g.win});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(yd[i]);

  const std::size_t ix = input.id, iw = kernels.id;
  return input.tape->record(std::move(out), {input, kernels}, [=](Tape<T>& t, const Tensor<T>& gy) {
    std::vector<double> gc(g.patch() * g.pixels());
    detail::im2col(gy.data(), g, gc.data());
    detail::ConstRowMap GC(gc.data(), static_cast<long>(g.patch()), static_cast<long>(g.pixels()));
    if (t.requires_grad(iw)) {
      const auto xv = detail::to_double(t.value(ix));
      detail::ConstRowMap Xm(xv.data(), static_cast<long>(g.cout), static_cast<long>(g.pixels()));
      detail::RowMatrix GW = Xm * GC.transpose();
      auto& gw = t.adjoint(iw);
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += static_cast<T>(GW.data()[i]);
    }
    if (t.requires_grad(ix)) {
      const auto wv = detail::to_double(t.value(iw));
      detail::ConstRowMap Wm(wv.data(), static_cast<long>(g.cout), static_cast<long>(g.patch()));
      detail::RowMatrix GX = Wm * GC;
      auto& gx = t.adjoint(ix);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += static_cast<T>(GX.data()[i]);
    }
  });
}

}  // namespace woc
