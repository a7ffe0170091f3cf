#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "woc/autodiff.hpp"
#include "woc/errors.hpp"
#include "woc/parameters.hpp"
#include "woc/random.hpp"

namespace woc {

// Trunk of stride-2 4x4 convolutions on the channel-concatenated pair; a
// 1x1 branch after each trunk layer reduces to one scalar by spatial mean.
struct DiscriminatorConfig {
  std::vector<std::size_t> trunk_channels{16, 32, 32};
  double leaky_slope = 0.2;

  std::size_t branches() const { return trunk_channels.size(); }

  void validate() const {
    if (trunk_channels.size() < 2) throw ConfigError("discriminator needs at least 2 branches");
    for (auto c : trunk_channels) {
      if (c == 0) throw ConfigError("discriminator channel counts must be at least 1");
    }
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must be in [0, 1)");
  }
  // Smallest patch side that survives every stride-2 layer.
  std::size_t min_size() const { return std::size_t{1} << trunk_channels.size(); }
};

template <typename T>
class Discriminator {
 public:
  Discriminator() : Discriminator(DiscriminatorConfig{}, 0) {}

  Discriminator(DiscriminatorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    std::size_t cin = 6;
    for (std::size_t d = 0; d < cfg_.branches(); ++d) {
      const std::size_t c = cfg_.trunk_channels[d];
      add_conv(rng, "trunk" + std::to_string(d), cin, c, 4);
      add_conv(rng, "branch" + std::to_string(d), c, 1, 1);
      cin = c;
    }
  }

  const DiscriminatorConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

 private:
  void add_conv(Rng& rng, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    Tensor<T> w({cout, cin, k, k}), b({cout});
    for (auto& v : w) v = static_cast<T>(uniform(rng, -bound, bound));
    for (auto& v : b) v = static_cast<T>(uniform(rng, -bound, bound));
    params_.add(name + ".w", std::move(w));
    params_.add(name + ".b", std::move(b));
  }

  DiscriminatorConfig cfg_;
  ParameterSet<T> params_;
};

// Ordered pair fed to the discriminator. target_first is the ground truth.
template <typename T>
struct SwappedPair {
  Tensor<T> first, second;
  bool target_first = true;
};

template <typename T>
SwappedPair<T> random_swap(const Tensor<T>& target, const Tensor<T>& reconstruction, Rng& rng) {
  require_same_shape(target, reconstruction, "random_swap");
  if (coin_flip(rng)) return {reconstruction, target, false};
  return {target, reconstruction, true};
}

// Pre-sigmoid logit: mean of the branch scalars.
template <typename T>
Var<T> combine_branches(const std::vector<Var<T>>& branches) {
  if (branches.empty()) throw ConfigError("combine_branches: no branches");
  Var<T> total = branches[0];
  for (std::size_t i = 1; i < branches.size(); ++i) total = add(total, branches[i]);
  return mul_scalar(total, static_cast<T>(1.0 / static_cast<double>(branches.size())));
}

// Branch scalars for the pair (a, b). `train` binds parameters as leaves.
template <typename T>
std::vector<Var<T>> discriminator_branches(Var<T> a, Var<T> b, Discriminator<T>& disc, bool train) {
  const auto& cfg = disc.config();
  const auto& s = a.shape();
  if (s.size() != 3 || s[0] != 3 || s[1] < cfg.min_size() || s[2] < cfg.min_size()) {
    throw ShapeError("discriminator: expected 3 x H x W images with H, W >= " + std::to_string(cfg.min_size()) +
                     ", got " + to_string(s));
  }
  auto& tape = *a.tape;
  auto& ps = disc.parameters();
  auto bind = [&](const std::string& name) { return train ? tape.parameter(ps[name]) : tape.constant(ps[name].value); };
  const T slope = static_cast<T>(cfg.leaky_slope);
  Var<T> x = concat_channels(a, b);
  std::vector<Var<T>> out;
  for (std::size_t d = 0; d < cfg.branches(); ++d) {
    const std::string t = "trunk" + std::to_string(d), br = "branch" + std::to_string(d);
    x = leaky_relu(bias_add(conv2d(x, bind(t + ".w"), 2, 1), bind(t + ".b")), slope);
    out.push_back(mean(bias_add(conv2d(x, bind(br + ".w"), 1, 0), bind(br + ".b"))));
  }
  return out;
}

template <typename T>
Var<T> discriminator_logit(Var<T> a, Var<T> b, Discriminator<T>& disc, bool train = false) {
  return combine_branches(discriminator_branches(a, b, disc, train));
}

// Probability that slot 0 holds the target.
template <typename T>
Var<T> discriminator_score(Var<T> a, Var<T> b, Discriminator<T>& disc, bool train = false) {
  return sigmoid(discriminator_logit(a, b, disc, train));
}

template <typename T>
double discriminator_score(const SwappedPair<T>& pair, Discriminator<T>& disc) {
  Tape<T> tape;
  return static_cast<double>(
      discriminator_score(tape.constant(pair.first), tape.constant(pair.second), disc).value().item());
}

// ---------------------------------------------------------------------------
// Accuracy-gated schedule

enum class TrainMode { kDiscriminatorOnly, kAlternate, kGeneratorOnly };

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kDiscriminatorOnly: return "disc_only";
    case TrainMode::kAlternate: return "alternate";
    case TrainMode::kGeneratorOnly: return "gen_only";
  }
  return "?";
}

struct SchedulerConfig {
  double lower = 0.8;
  double upper = 0.95;
  double momentum = 0.8;

  void validate() const {
    if (!(lower >= 0.0 && lower < upper && upper <= 1.0)) {
      throw ConfigError("scheduler bounds need 0 <= L < U <= 1, got L=" + std::to_string(lower) +
                        " U=" + std::to_string(upper));
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("accuracy momentum must be in [0, 1)");
  }
};

struct SchedulerState {
  double accuracy = 0.5;
};

inline TrainMode scheduler_decide(double a, const SchedulerConfig& cfg) {
  if (a < cfg.lower) return TrainMode::kDiscriminatorOnly;
  if (a < cfg.upper) return TrainMode::kAlternate;
  return TrainMode::kGeneratorOnly;
}

inline SchedulerState update_accuracy(SchedulerState s, double batch_accuracy, double momentum) {
  s.accuracy = momentum * s.accuracy + (1.0 - momentum) * batch_accuracy;
  return s;
}

// Whether the discriminator / the confusion signal is trained this iteration.
// Alternate mode trains the discriminator on even iterations.
inline bool trains_discriminator(TrainMode m, std::uint64_t iteration) {
  return m == TrainMode::kDiscriminatorOnly || (m == TrainMode::kAlternate && iteration % 2 == 0);
}
inline bool propagates_confusion(TrainMode m, std::uint64_t iteration) {
  return m == TrainMode::kGeneratorOnly || (m == TrainMode::kAlternate && iteration % 2 == 1);
}

template <typename T>
double global_norm(const std::vector<Tensor<T>>& g) {
  double s = 0.0;
  for (const auto& t : g)
    for (T v : t) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

// rec + adv * (ratio * |rec| / |adv|); a zero adversarial gradient passes
// through unscaled.
template <typename T>
std::vector<Tensor<T>> balance_gradients(const std::vector<Tensor<T>>& rec, const std::vector<Tensor<T>>& adv,
                                         double ratio = 1.0) {
  if (rec.size() != adv.size()) throw ShapeError("balance_gradients: gradient sets cover different parameters");
  for (std::size_t i = 0; i < rec.size(); ++i) require_same_shape(rec[i], adv[i], "balance_gradients");
  const double na = global_norm(adv);
  const double scale = na > 0.0 ? ratio * global_norm(rec) / na : 1.0;
  std::vector<Tensor<T>> out = rec;
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < out[i].size(); ++j)
      out[i][j] = static_cast<T>(static_cast<double>(out[i][j]) + scale * static_cast<double>(adv[i][j]));
  return out;
}

}  // namespace woc
