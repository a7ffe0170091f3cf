#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "woc/autodiff.hpp"
#include "woc/binary_io.hpp"
#include "woc/errors.hpp"
#include "woc/parameters.hpp"
#include "woc/quantize.hpp"
#include "woc/random.hpp"

namespace woc {

struct PyramidConfig {
  int scales = 3;
  std::vector<std::size_t> scale_channels{16, 16, 16};
  int extractor_layers = 2;
  std::size_t code_channels = 8;
  std::size_t reduction = 8;
  int joint_layers = 1;
  int bits = 6;
  double leaky_slope = 0.2;

  static PyramidConfig desk() { return {}; }

  static bool power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

  std::size_t downsample_factor() const { return std::size_t{1} << (scales - 1); }
  // Spatial dims of the input must be multiples of this.
  std::size_t pad_factor() const { return std::max(reduction, downsample_factor()); }
  int reduction_log2() const {
    int r = 0;
    while ((std::size_t{1} << r) < reduction) ++r;
    return r;
  }
  // Number of stride-2 steps g_m applies to scale m (0-based); negative means
  // upsampling steps.
  int align_steps(int m) const { return reduction_log2() - m; }

  void validate() const {
    if (scales < 1 || scales > 8) throw ConfigError("scales must be in [1, 8], got " + std::to_string(scales));
    if (scale_channels.size() != static_cast<std::size_t>(scales)) {
      throw ConfigError("need one channel count per scale: " + std::to_string(scale_channels.size()) + " for " +
                        std::to_string(scales) + " scales");
    }
    for (auto c : scale_channels) {
      if (c == 0) throw ConfigError("scale channel counts must be at least 1");
    }
    if (extractor_layers < 1) throw ConfigError("extractor_layers must be at least 1");
    if (code_channels == 0) throw ConfigError("code_channels must be at least 1");
    if (!power_of_two(reduction)) throw ConfigError("reduction must be a power of two, got " + std::to_string(reduction));
    if (joint_layers < 0) throw ConfigError("joint_layers must be non-negative");
    check_bits(bits);
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must be in [0, 1)");
  }

  friend bool operator==(const PyramidConfig&, const PyramidConfig&) = default;
};

// Spatial size after a convolution or transposed convolution.
namespace detail {
inline long conv_out(long n, long k, long s, long p) { return (n + 2 * p - k) / s + 1; }
inline long tconv_out(long n, long k, long s, long p) { return (n - 1) * s - 2 * p + k; }
}  // namespace detail

template <typename T>
class CodecModel {
 public:
  static constexpr double kEncoderGain = 2.449489742783178;  // sqrt(6)

  CodecModel() : CodecModel(PyramidConfig::desk(), 0) {}

  // Biases and decoder weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
  // encoder weights from U(-sqrt(6/fan_in), sqrt(6/fan_in)). The final
  // synthesis bias starts at 0.5.
  CodecModel(PyramidConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t C = cfg_.code_channels;
    for (int m = 0; m < cfg_.scales; ++m) {
      const std::string p = "s" + std::to_string(m) + ".";
      const std::size_t cm = cfg_.scale_channels[static_cast<std::size_t>(m)];
      for (int l = 0; l < cfg_.extractor_layers; ++l) conv(enc_, rng, p + "f" + std::to_string(l), l ? cm : 3, cm, 3, kEncoderGain);
      if (m + 1 < cfg_.scales) conv(enc_, rng, p + "down", 3, 3, 4, kEncoderGain);
      const int s = cfg_.align_steps(m);
      if (s == 0) {
        conv(enc_, rng, p + "align0", cm, C, 1, kEncoderGain);
      } else {
        for (int i = 0; i < std::abs(s); ++i) {
          const std::size_t cin = i ? C : cm;
          if (s > 0) conv(enc_, rng, p + "align" + std::to_string(i), cin, C, 4, kEncoderGain);
          else tconv(enc_, rng, p + "align" + std::to_string(i), cin, C, kEncoderGain);
        }
      }
    }
    for (int j = 0; j < cfg_.joint_layers; ++j) conv(enc_, rng, "joint" + std::to_string(j), C, C, 3, kEncoderGain);

    for (int j = 0; j < cfg_.joint_layers; ++j) conv(dec_, rng, "joint" + std::to_string(j), C, C, 3, 1.0);
    for (int m = 0; m < cfg_.scales; ++m) {
      const std::string p = "s" + std::to_string(m) + ".";
      const std::size_t cm = cfg_.scale_channels[static_cast<std::size_t>(m)];
      const int s = cfg_.align_steps(m);
      if (s == 0) {
        conv(dec_, rng, p + "align0", C, cm, 1, 1.0);
      } else {
        for (int i = 0; i < std::abs(s); ++i) {
          const std::size_t cout = i + 1 == std::abs(s) ? cm : C;
          if (s > 0) tconv(dec_, rng, p + "align" + std::to_string(i), C, cout, 1.0);
          else conv(dec_, rng, p + "align" + std::to_string(i), C, cout, 4, 1.0);
        }
      }
      for (int l = 0; l < cfg_.extractor_layers; ++l) {
        const bool last = l + 1 == cfg_.extractor_layers;
        conv(dec_, rng, p + "f" + std::to_string(l), cm, last ? 3 : cm, 3, 1.0);
      }
      if (m + 1 < cfg_.scales) tconv(dec_, rng, p + "up", 3, 3, 1.0);
    }
    dec_["s0.f" + std::to_string(cfg_.extractor_layers - 1) + ".b"].value.fill(T(0.5));
    check_alignment_shapes();
  }

  CodecModel(PyramidConfig cfg, ParameterSet<T> encoder, ParameterSet<T> decoder)
      : cfg_(std::move(cfg)), enc_(std::move(encoder)), dec_(std::move(decoder)) {
    cfg_.validate();
    const CodecModel reference(cfg_, 0);
    check_layout(enc_, reference.enc_, "encoder");
    check_layout(dec_, reference.dec_, "decoder");
  }

  const PyramidConfig& config() const { return cfg_; }
  ParameterSet<T>& encoder() { return enc_; }
  ParameterSet<T>& decoder() { return dec_; }
  const ParameterSet<T>& encoder() const { return enc_; }
  const ParameterSet<T>& decoder() const { return dec_; }

  // FNV-1a over the config fields and the float32 image of every parameter.
  std::uint64_t model_id() const {
    ByteWriter w;
    write_config(w);
    write_parameters(w, enc_);
    write_parameters(w, dec_);
    Fnv1a64 h;
    h.update(w.buffer());
    return h.digest();
  }

  void write_config(ByteWriter& w) const {
    w.u8(static_cast<std::uint8_t>(cfg_.scales));
    for (auto c : cfg_.scale_channels) w.u16(static_cast<std::uint16_t>(c));
    w.u8(static_cast<std::uint8_t>(cfg_.extractor_layers));
    w.u16(static_cast<std::uint16_t>(cfg_.code_channels));
    w.u16(static_cast<std::uint16_t>(cfg_.reduction));
    w.u8(static_cast<std::uint8_t>(cfg_.joint_layers));
    w.u8(static_cast<std::uint8_t>(cfg_.bits));
    w.u64(std::bit_cast<std::uint64_t>(cfg_.leaky_slope));
  }

 private:
  static void conv(ParameterSet<T>& ps, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout,
                   std::size_t k, double gain) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    Tensor<T> w({cout, cin, k, k}), b({cout});
    for (auto& v : w) v = static_cast<T>(uniform(rng, -gain * bound, gain * bound));
    for (auto& v : b) v = static_cast<T>(uniform(rng, -bound, bound));
    ps.add(name + ".w", std::move(w));
    ps.add(name + ".b", std::move(b));
  }

  static void tconv(ParameterSet<T>& ps, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout,
                    double gain) {
    const std::size_t k = 4;
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k / 4));
    Tensor<T> w({cin, cout, k, k}), b({cout});
    for (auto& v : w) v = static_cast<T>(uniform(rng, -gain * bound, gain * bound));
    for (auto& v : b) v = static_cast<T>(uniform(rng, -bound, bound));
    ps.add(name + ".w", std::move(w));
    ps.add(name + ".b", std::move(b));
  }

  static void check_layout(const ParameterSet<T>& got, const ParameterSet<T>& want, const char* which) {
    if (got.size() != want.size()) {
      throw ConfigError(std::string(which) + " has " + std::to_string(got.size()) + " parameters, config needs " +
                        std::to_string(want.size()));
    }
    for (const auto& p : want) {
      if (!got.contains(p.name)) throw ConfigError(std::string(which) + " is missing '" + p.name + "'");
      if (got[p.name].value.shape() != p.value.shape()) {
        throw ConfigError(std::string(which) + " parameter '" + p.name + "' has shape " +
                          to_string(got[p.name].value.shape()) + ", config needs " + to_string(p.value.shape()));
      }
    }
  }

  // Propagates a probe size through every g_m and requires C x H x W.
  void check_alignment_shapes() const {
    const long in = static_cast<long>(cfg_.pad_factor());
    const long target = in / static_cast<long>(cfg_.reduction);
    for (int m = 0; m < cfg_.scales; ++m) {
      long n = in >> m;
      const int s = cfg_.align_steps(m);
      for (int i = 0; i < std::abs(s); ++i) n = s > 0 ? detail::conv_out(n, 4, 2, 1) : detail::tconv_out(n, 4, 2, 1);
      if (n != target) {
        throw ConfigError("alignment of scale " + std::to_string(m) + " yields size " + std::to_string(n) +
                          ", expected " + std::to_string(target));
      }
    }
  }

  PyramidConfig cfg_;
  ParameterSet<T> enc_;
  ParameterSet<T> dec_;
};

// Binds model parameters onto a tape: trainable leaves when `train`, plain
// constants otherwise.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, ParameterSet<T>& params, bool train) : tape_(tape), params_(params), train_(train) {}

  Var<T> operator()(const std::string& name) {
    auto& p = params_[name];
    return train_ ? tape_.parameter(p) : tape_.constant(p.value);
  }

  Var<T> conv(Var<T> x, const std::string& name, std::size_t stride, std::size_t pad) {
    return bias_add(conv2d(x, (*this)(name + ".w"), stride, pad), (*this)(name + ".b"));
  }
  Var<T> tconv(Var<T> x, const std::string& name) {
    return bias_add(transposed_conv2d(x, (*this)(name + ".w"), 2, 1), (*this)(name + ".b"));
  }

 private:
  Tape<T>& tape_;
  ParameterSet<T>& params_;
  bool train_;
};

namespace detail {

template <typename T>
void check_image(const Shape& s, const PyramidConfig& cfg, std::size_t factor) {
  if (s.size() != 3 || s[0] != 3) throw ShapeError("expected a 3 x H x W image, got " + to_string(s));
  if (s[1] % factor || s[2] % factor) {
    throw ShapeError("image dims " + to_string(s) + " must be multiples of " + std::to_string(factor) +
                     " for a " + std::to_string(cfg.scales) + "-scale model; pad first");
  }
}

}  // namespace detail

// Per-scale coefficients c_m = f_m(x_m) with x_{m+1} = D_m(x_m).
template <typename T>
std::vector<Var<T>> pyramid_decompose(Var<T> x, CodecModel<T>& model, bool train = false) {
  const auto& cfg = model.config();
  detail::check_image<T>(x.shape(), cfg, cfg.downsample_factor());
  Binder<T> bind(*x.tape, model.encoder(), train);
  const T slope = static_cast<T>(cfg.leaky_slope);
  std::vector<Var<T>> coeffs;
  for (int m = 0; m < cfg.scales; ++m) {
    const std::string p = "s" + std::to_string(m) + ".";
    Var<T> c = x;
    for (int l = 0; l < cfg.extractor_layers; ++l) c = leaky_relu(bind.conv(c, p + "f" + std::to_string(l), 1, 1), slope);
    coeffs.push_back(c);
    if (m + 1 < cfg.scales) x = bind.conv(x, p + "down", 2, 1);
  }
  return coeffs;
}

// Sum of g_m(c_m) followed by the joint transform.
template <typename T>
Var<T> interscale_align(const std::vector<Var<T>>& coeffs, CodecModel<T>& model, bool train = false) {
  const auto& cfg = model.config();
  if (coeffs.size() != static_cast<std::size_t>(cfg.scales)) {
    throw ShapeError("interscale_align: " + std::to_string(coeffs.size()) + " coefficient maps for " +
                     std::to_string(cfg.scales) + " scales");
  }
  Binder<T> bind(*coeffs[0].tape, model.encoder(), train);
  const T slope = static_cast<T>(cfg.leaky_slope);
  Var<T> total{};
  for (int m = 0; m < cfg.scales; ++m) {
    const std::string p = "s" + std::to_string(m) + ".";
    Var<T> a = coeffs[static_cast<std::size_t>(m)];
    const int s = cfg.align_steps(m);
    if (s == 0) a = bind.conv(a, p + "align0", 1, 0);
    for (int i = 0; i < std::abs(s); ++i) {
      if (i) a = leaky_relu(a, slope);
      const std::string name = p + "align" + std::to_string(i);
      a = s > 0 ? bind.conv(a, name, 2, 1) : bind.tconv(a, name);
    }
    total = m == 0 ? a : add(total, a);
  }
  for (int j = 0; j < cfg.joint_layers; ++j) {
    if (j) total = leaky_relu(total, slope);
    total = bind.conv(total, "joint" + std::to_string(j), 1, 1);
  }
  return total;
}

// y = 2 sigmoid(g(...)) - 1, inside the quantizer's range (-1, 1).
template <typename T>
Var<T> encode_features(Var<T> x, CodecModel<T>& model, bool train = false) {
  auto z = interscale_align(pyramid_decompose(x, model, train), model, train);
  return mul_scalar(add_scalar(sigmoid(z), T(-0.5)), T{2});
}

// Mirror of the encoder: joint transform, per-scale inverse alignment and
// synthesis, then coarse-to-fine accumulation r_m = f'_m(d_m) + U_m(r_{m+1}).
template <typename T>
Var<T> synthesize(Var<T> y, CodecModel<T>& model, bool train = false) {
  const auto& cfg = model.config();
  const auto& ys = y.shape();
  if (ys.size() != 3 || ys[0] != cfg.code_channels) {
    throw ShapeError("synthesize: expected " + std::to_string(cfg.code_channels) + " x H x W features, got " +
                     to_string(ys));
  }
  const std::size_t fine = cfg.reduction;
  if ((ys[1] * fine) % cfg.pad_factor() || (ys[2] * fine) % cfg.pad_factor()) {
    throw ShapeError("synthesize: feature dims " + to_string(ys) + " do not map to a valid image size");
  }
  Binder<T> bind(*y.tape, model.decoder(), train);
  const T slope = static_cast<T>(cfg.leaky_slope);
  Var<T> z = y;
  for (int j = 0; j < cfg.joint_layers; ++j) {
    z = bind.conv(z, "joint" + std::to_string(j), 1, 1);
    z = leaky_relu(z, slope);
  }
  Var<T> r{};
  for (int m = cfg.scales - 1; m >= 0; --m) {
    const std::string p = "s" + std::to_string(m) + ".";
    Var<T> d = z;
    const int s = cfg.align_steps(m);
    if (s == 0) d = bind.conv(d, p + "align0", 1, 0);
    for (int i = 0; i < std::abs(s); ++i) {
      if (i) d = leaky_relu(d, slope);
      const std::string name = p + "align" + std::to_string(i);
      d = s > 0 ? bind.tconv(d, name) : bind.conv(d, name, 2, 1);
    }
    for (int l = 0; l < cfg.extractor_layers; ++l) d = bind.conv(leaky_relu(d, slope), p + "f" + std::to_string(l), 1, 1);
    r = m + 1 == cfg.scales ? d : add(d, bind.tconv(r, p + "up"));
  }
  return clamp(r, T{0}, T{1});
}

// ---------------------------------------------------------------------------
// Inference helpers on plain tensors

template <typename T>
Tensor<T> encode_features(const Tensor<T>& x, CodecModel<T>& model) {
  Tape<T> tape;
  return encode_features(tape.constant(x), model).value();
}

template <typename T>
Tensor<T> synthesize(const Tensor<T>& y, CodecModel<T>& model) {
  Tape<T> tape;
  return synthesize(tape.constant(y), model).value();
}

struct PaddedDims {
  std::size_t height = 0, width = 0;
  std::size_t pad_bottom = 0, pad_right = 0;
};

namespace detail {

// Mirror index without repeating the edge sample; repeats for short axes.
inline std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace detail

template <typename T>
std::pair<Tensor<T>, PaddedDims> pad_to_multiple(const Tensor<T>& img, std::size_t factor) {
  if (img.rank() != 3) throw ShapeError("pad: expected C x H x W, got " + to_string(img.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const std::size_t Hp = (H + factor - 1) / factor * factor, Wp = (W + factor - 1) / factor * factor;
  PaddedDims d{H, W, Hp - H, Wp - W};
  if (Hp == H && Wp == W) return {img, d};
  Tensor<T> out({C, Hp, Wp});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < Hp; ++i)
      for (std::size_t j = 0; j < Wp; ++j)
        out.at(c, i, j) = img.at(c, detail::reflect_index(i, H), detail::reflect_index(j, W));
  return {std::move(out), d};
}

template <typename T>
std::pair<Tensor<T>, PaddedDims> pad_to_valid(const Tensor<T>& img, const CodecModel<T>& model) {
  return pad_to_multiple(img, model.config().pad_factor());
}

template <typename T>
Tensor<T> crop(const Tensor<T>& img, std::size_t height, std::size_t width) {
  if (img.rank() != 3 || img.dim(1) < height || img.dim(2) < width) {
    throw ShapeError("crop: cannot take " + std::to_string(height) + "x" + std::to_string(width) + " from " +
                     to_string(img.shape()));
  }
  Tensor<T> out({img.dim(0), height, width});
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) out.at(c, i, j) = img.at(c, i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Model files
//   "WOCM" | u16 version | config preamble | u64 model_id |
//   encoder checkpoint | decoder checkpoint

inline constexpr std::uint16_t kModelFileVersion = 1;

template <typename T>
std::vector<std::uint8_t> serialize_model(const CodecModel<T>& model) {
  ByteWriter w;
  w.text("WOCM");
  w.u16(kModelFileVersion);
  model.write_config(w);
  w.u64(model.model_id());
  write_parameters(w, model.encoder());
  write_parameters(w, model.decoder());
  return w.take();
}

template <typename T>
CodecModel<T> deserialize_model(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.text(4) != "WOCM") throw FormatError("not a model file");
  if (const auto v = r.u16(); v != kModelFileVersion) throw FormatError("unsupported model file version " + std::to_string(v));
  PyramidConfig cfg;
  cfg.scales = r.u8();
  if (cfg.scales < 1 || cfg.scales > 8) throw FormatError("model file: bad scale count " + std::to_string(cfg.scales));
  cfg.scale_channels.resize(static_cast<std::size_t>(cfg.scales));
  for (auto& c : cfg.scale_channels) c = r.u16();
  cfg.extractor_layers = r.u8();
  cfg.code_channels = r.u16();
  cfg.reduction = r.u16();
  cfg.joint_layers = r.u8();
  cfg.bits = r.u8();
  cfg.leaky_slope = std::bit_cast<double>(r.u64());
  const std::uint64_t id = r.u64();
  auto enc = read_parameters<T>(r);
  auto dec = read_parameters<T>(r);
  if (r.remaining()) throw FormatError("model file: trailing bytes");
  try {
    CodecModel<T> model(cfg, std::move(enc), std::move(dec));
    if (model.model_id() != id) throw FormatError("model file: model_id does not match contents");
    return model;
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model file: ") + e.what());
  }
}

template <typename T>
void save_model(const std::string& path, const CodecModel<T>& model) {
  write_file(path, serialize_model(model));
}

template <typename T>
CodecModel<T> load_model(const std::string& path) {
  return deserialize_model<T>(read_file(path));
}

}  // namespace woc
