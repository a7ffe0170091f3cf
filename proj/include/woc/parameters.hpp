#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "woc/binary_io.hpp"
#include "woc/tensor.hpp"

namespace woc {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// Named learnable tensors. Entries live in a deque so addresses stay stable
// while a tape holds pointers to them.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    Shape s = value.shape();
    entries_.push_back(Parameter<T>{name, std::move(value), Tensor<T>(s)});
    index_[name] = entries_.size() - 1;
    return entries_.back();
  }

  Parameter<T>& operator[](const std::string& name) { return entries_.at(lookup(name)); }
  const Parameter<T>& operator[](const std::string& name) const {
    return entries_.at(lookup(name));
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  Parameter<T>& at(std::size_t i) { return entries_.at(i); }
  const Parameter<T>& at(std::size_t i) const { return entries_.at(i); }

  void zero_grad() {
    for (auto& p : entries_) p.grad.fill(T{0});
  }

  std::vector<Tensor<T>> gradients() const {
    std::vector<Tensor<T>> g;
    g.reserve(entries_.size());
    for (const auto& p : entries_) g.push_back(p.grad);
    return g;
  }

  void set_gradients(const std::vector<Tensor<T>>& g) {
    if (g.size() != entries_.size()) throw ShapeError("gradient set size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) {
      require_same_shape(g[i], entries_[i].value, "set_gradients");
      entries_[i].grad = g[i];
    }
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : entries_) n += p.value.size();
    return n;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name ||
          !(a.entries_[i].value == b.entries_[i].value)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::deque<Parameter<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment state is keyed by entry position and
// persists across step() calls; gradients are cleared after each step.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(ParameterSet<T>& params) { step(params, config_.lr); }

  void step(ParameterSet<T>& params, double lr) {
    if (m_.size() != params.size()) {
      m_.clear();
      v_.clear();
      for (const auto& p : params) {
        m_.emplace_back(p.value.size(), 0.0);
        v_.emplace_back(p.value.size(), 0.0);
      }
    }
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params.at(i);
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]);
        m[j] = b1 * m[j] + (1.0 - b1) * g;
        v[j] = b2 * v[j] + (1.0 - b2) * g * g;
        const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
        p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) - update);
      }
      p.grad.fill(T{0});
    }
  }

  std::uint64_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Checkpoint layout (little-endian):
//   "WOPS" | u16 version | u32 count |
//   per entry: u16 name_len | name | u8 rank | u32 dims[rank] | f32 values
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void write_parameters(ByteWriter& w, const ParameterSet<T>& params) {
  w.text("WOPS");
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.text(p.name);
    w.u8(static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : p.value) w.f32(static_cast<float>(v));
  }
}

template <typename T>
ParameterSet<T> read_parameters(ByteReader& r) {
  if (r.text(4) != "WOPS") throw FormatError("not a parameter checkpoint");
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  ParameterSet<T> params;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.text(r.u16());
    const std::size_t rank = r.u8();
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) throw FormatError("zero-sized dimension in '" + name + "'");
      n *= d;
      if (n * 4 > r.remaining()) throw FormatError("truncated payload for '" + name + "'");
    }
    std::vector<T> values(n);
    for (auto& v : values) v = static_cast<T>(r.f32());
    params.add(name, Tensor<T>(std::move(shape), std::move(values)));
  }
  return params;
}

template <typename T>
std::vector<std::uint8_t> serialize_parameters(const ParameterSet<T>& params) {
  ByteWriter w;
  write_parameters(w, params);
  return w.take();
}

template <typename T>
ParameterSet<T> deserialize_parameters(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  return read_parameters<T>(r);
}

}  // namespace woc
