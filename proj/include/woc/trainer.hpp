#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "woc/acr.hpp"
#include "woc/autodiff.hpp"
#include "woc/dataset.hpp"
#include "woc/discriminator.hpp"
#include "woc/entropy_coder.hpp"
#include "woc/metrics.hpp"
#include "woc/parameters.hpp"
#include "woc/pyramid.hpp"
#include "woc/quantize.hpp"

namespace woc {

struct TrainConfig {
  PyramidConfig model;
  DiscriminatorConfig disc;
  SchedulerConfig sched;
  std::size_t batch = 16;
  std::size_t patch = 64;
  std::size_t iterations = 3000;
  double lr = 3e-4;
  std::vector<double> lr_drop_at{0.6, 0.85};  // fractions of the run
  double lr_drop_factor = 5.0;
  // Adversarial gradient norm relative to the reconstruction gradient; 0
  // disables the discriminator entirely.
  double adversarial_ratio = 1.0;
  double target_ratio = 4.0;  // BCHW / target bits
  double initial_alpha = 1.0;
  bool freeze_alpha = false;
  ColorSpace color = ColorSpace::kRgb;
  int ms_ssim_scales = 3;
  std::uint64_t seed = 1;
  // Synthetic training pool.
  std::size_t pool_images = 64;
  std::size_t pool_image_size = 128;
  std::size_t checkpoint_every = 0;
  std::string checkpoint_dir;

  // Single-core runs of a few thousand iterations.
  static TrainConfig desk() {
    TrainConfig c;
    c.batch = 8;
    c.lr = 1e-3;
    c.initial_alpha = 0.05;
    return c;
  }

  double lr_at(std::size_t iteration) const {
    double lr_now = lr;
    for (double f : lr_drop_at) {
      if (static_cast<double>(iteration) >= f * static_cast<double>(iterations)) lr_now /= lr_drop_factor;
    }
    return lr_now;
  }

  ColorWeights color_weights() const { return color == ColorSpace::kYCbCr ? ColorWeights::ycbcr() : ColorWeights::rgb(); }
  MsSsimConfig ms_ssim_config() const { return MsSsimConfig::with_scales(ms_ssim_scales); }

  void validate() const {
    model.validate();
    disc.validate();
    sched.validate();
    if (batch == 0) throw ConfigError("batch must be at least 1");
    if (iterations == 0) throw ConfigError("iterations must be at least 1");
    if (patch % model.pad_factor()) {
      throw ConfigError("patch " + std::to_string(patch) + " must be a multiple of " + std::to_string(model.pad_factor()));
    }
    ms_ssim_config().check_size(patch, patch);
    if (adversarial_ratio > 0.0 && patch < disc.min_size()) throw ConfigError("patch too small for the discriminator");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(lr_drop_factor >= 1.0)) throw ConfigError("lr_drop_factor must be >= 1");
    if (!(adversarial_ratio >= 0.0)) throw ConfigError("adversarial_ratio must be non-negative");
    if (!(target_ratio > 0.0)) throw ConfigError("target_ratio must be positive");
    if (!(initial_alpha >= 0.0)) throw ConfigError("initial_alpha must be non-negative");
    if (pool_images == 0 || pool_image_size < patch) throw ConfigError("synthetic pool images must cover a patch");
  }
};

// ---------------------------------------------------------------------------
// JSON config. Every key is optional; absent keys keep the desk defaults.

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c = TrainConfig::desk();
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  try {
    if (j.contains("model")) {
      const auto& m = j.at("model");
      auto mget = [&](const char* key, auto& field) {
        if (m.contains(key)) m.at(key).get_to(field);
      };
      mget("scales", c.model.scales);
      mget("scale_channels", c.model.scale_channels);
      mget("extractor_layers", c.model.extractor_layers);
      mget("code_channels", c.model.code_channels);
      mget("reduction", c.model.reduction);
      mget("joint_layers", c.model.joint_layers);
      mget("bits", c.model.bits);
      mget("leaky_slope", c.model.leaky_slope);
      if (!m.contains("scale_channels") && m.contains("scales")) {
        c.model.scale_channels.assign(static_cast<std::size_t>(std::max(c.model.scales, 0)), 16);
      }
    }
    if (j.contains("discriminator")) j.at("discriminator").at("trunk_channels").get_to(c.disc.trunk_channels);
    if (j.contains("scheduler")) {
      const auto& s = j.at("scheduler");
      if (s.contains("lower")) s.at("lower").get_to(c.sched.lower);
      if (s.contains("upper")) s.at("upper").get_to(c.sched.upper);
      if (s.contains("momentum")) s.at("momentum").get_to(c.sched.momentum);
    }
    get("batch", c.batch);
    get("patch", c.patch);
    get("iterations", c.iterations);
    get("lr", c.lr);
    get("lr_drop_at", c.lr_drop_at);
    get("lr_drop_factor", c.lr_drop_factor);
    get("adversarial_ratio", c.adversarial_ratio);
    get("target_ratio", c.target_ratio);
    get("initial_alpha", c.initial_alpha);
    get("freeze_alpha", c.freeze_alpha);
    get("ms_ssim_scales", c.ms_ssim_scales);
    get("seed", c.seed);
    get("pool_images", c.pool_images);
    get("pool_image_size", c.pool_image_size);
    get("checkpoint_every", c.checkpoint_every);
    get("checkpoint_dir", c.checkpoint_dir);
    if (j.contains("colorspace")) {
      const auto s = j.at("colorspace").get<std::string>();
      if (s == "rgb") c.color = ColorSpace::kRgb;
      else if (s == "ycbcr") c.color = ColorSpace::kYCbCr;
      else throw ConfigError("colorspace must be rgb or ycbcr, got " + s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"model",
       {{"scales", c.model.scales},
        {"scale_channels", c.model.scale_channels},
        {"extractor_layers", c.model.extractor_layers},
        {"code_channels", c.model.code_channels},
        {"reduction", c.model.reduction},
        {"joint_layers", c.model.joint_layers},
        {"bits", c.model.bits},
        {"leaky_slope", c.model.leaky_slope}}},
      {"discriminator", {{"trunk_channels", c.disc.trunk_channels}}},
      {"scheduler", {{"lower", c.sched.lower}, {"upper", c.sched.upper}, {"momentum", c.sched.momentum}}},
      {"batch", c.batch},
      {"patch", c.patch},
      {"iterations", c.iterations},
      {"lr", c.lr},
      {"lr_drop_at", c.lr_drop_at},
      {"lr_drop_factor", c.lr_drop_factor},
      {"adversarial_ratio", c.adversarial_ratio},
      {"target_ratio", c.target_ratio},
      {"initial_alpha", c.initial_alpha},
      {"freeze_alpha", c.freeze_alpha},
      {"colorspace", c.color == ColorSpace::kYCbCr ? "ycbcr" : "rgb"},
      {"ms_ssim_scales", c.ms_ssim_scales},
      {"seed", c.seed},
      {"pool_images", c.pool_images},
      {"pool_image_size", c.pool_image_size},
      {"checkpoint_every", c.checkpoint_every},
      {"checkpoint_dir", c.checkpoint_dir},
  };
}

// ---------------------------------------------------------------------------
// Training log

struct TrainLogRow {
  std::uint64_t iteration = 0;
  double rec_loss = 0.0;  // mean 1 - MS-SSIM over the batch
  double ms_ssim = 0.0;
  double mean_bits = 0.0;  // running mean fed to the alpha update
  double target_bits = 0.0;
  double alpha = 0.0;      // alpha used by this iteration's penalty
  double disc_accuracy = 0.0;  // running accuracy that selected `mode`
  std::string mode;
};

inline constexpr const char* kTrainLogHeader = "iteration,rec_loss,ms_ssim,mean_bits,target_bits,alpha,disc_accuracy,mode";

inline std::string format_log_row(const TrainLogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%s",
                static_cast<unsigned long long>(r.iteration), r.rec_loss, r.ms_ssim, r.mean_bits, r.target_bits, r.alpha,
                r.disc_accuracy, r.mode.c_str());
  return buf;
}

// Codelength of one feature tensor under the adaptive context model.
template <typename T>
double feature_codelength(const Tensor<T>& y, int bits) {
  return estimate_codelength(bitplane_decompose(quantize(y, bits)));
}

struct HeldOutScore {
  double ms_ssim = 0.0;
  double mean_bits = 0.0;
};

// Quantized round trip of each image; mean MS-SSIM and estimated bits.
template <typename T>
HeldOutScore evaluate_images(CodecModel<T>& model, const std::vector<Tensor<T>>& images,
                             const MsSsimConfig& cfg = MsSsimConfig::evaluation(),
                             const ColorWeights& color = ColorWeights::rgb()) {
  HeldOutScore s;
  for (const auto& x : images) {
    const auto y = encode_features(x, model);
    const auto q = quantize(y, model.config().bits);
    s.ms_ssim += ms_ssim(x, synthesize(q.template to_real<T>(), model), cfg, color);
    s.mean_bits += estimate_codelength(bitplane_decompose(q));
  }
  s.ms_ssim /= static_cast<double>(images.size());
  s.mean_bits /= static_cast<double>(images.size());
  return s;
}

template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, CodecModel<T> model, Discriminator<T> disc)
      : cfg_(std::move(cfg)),
        model_(std::move(model)),
        disc_(std::move(disc)),
        enc_opt_(AdamConfig{cfg_.lr}),
        dec_opt_(AdamConfig{cfg_.lr}),
        disc_opt_(AdamConfig{cfg_.lr}),
        swap_rng_(cfg_.seed ^ 0x5DEECE66DULL) {
    cfg_.validate();
    if (!(model_.config() == cfg_.model)) throw ConfigError("trainer: model layout differs from the training config");
    acr_cfg_ = AcrConfig::for_code(cfg_.model.bits, cfg_.model.code_channels, cfg_.patch / cfg_.model.reduction,
                                   cfg_.patch / cfg_.model.reduction, cfg_.target_ratio);
    acr_.alpha = cfg_.initial_alpha;
  }

  explicit Trainer(TrainConfig cfg)
      : Trainer(cfg, CodecModel<T>(cfg.model, cfg.seed), Discriminator<T>(cfg.disc, cfg.seed + 1)) {}

  bool adversarial() const { return cfg_.adversarial_ratio > 0.0; }

  // One iteration on a batch of 3 x P x P targets.
  TrainLogRow step(const std::vector<Tensor<T>>& batch) {
    if (batch.empty()) throw ConfigError("empty batch");
    const std::uint64_t it = iteration_;
    const double lr = cfg_.lr_at(static_cast<std::size_t>(it));
    const TrainMode mode = scheduler_decide(sched_.accuracy, cfg_.sched);

    std::vector<bool> target_first(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) target_first[i] = !coin_flip(swap_rng_);

    TrainLogRow row;
    row.iteration = it;
    row.alpha = acr_.alpha;
    row.disc_accuracy = sched_.accuracy;
    row.mode = adversarial() ? to_string(mode) : "off";

    const bool confusion = adversarial() && propagates_confusion(mode, it);
    auto g = generator_phase(batch, target_first, confusion, lr);
    row.rec_loss = g.rec_loss;
    row.ms_ssim = 1.0 - g.rec_loss;

    if (adversarial()) {
      const double acc = batch_accuracy(batch, g.reconstructions, target_first);
      if (trains_discriminator(mode, it)) discriminator_phase(batch, g.reconstructions, target_first, lr);
      sched_ = update_accuracy(sched_, acc, cfg_.sched.momentum);
    }

    const AcrState next = update_alpha(acr_, g.mean_bits, acr_cfg_);
    if (cfg_.freeze_alpha) {
      acr_.mean_bits = next.mean_bits;
      acr_.iteration = next.iteration;
    } else {
      acr_ = next;
    }
    row.mean_bits = acr_.mean_bits;
    row.target_bits = acr_cfg_.target_bits;
    ++iteration_;
    return row;
  }

  struct GeneratorResult {
    double rec_loss = 0.0;
    double penalty = 0.0;
    double mean_bits = 0.0;
    std::vector<Tensor<T>> reconstructions;
  };

  // Reconstruction + codelength penalty, plus the balanced confusion signal
  // when `confusion` is set. Updates encoder and decoder only.
  GeneratorResult generator_phase(const std::vector<Tensor<T>>& batch, const std::vector<bool>& target_first,
                                  bool confusion, double lr) {
    const int bits = cfg_.model.bits;
    const auto ms_cfg = cfg_.ms_ssim_config();
    const auto color = cfg_.color_weights();
    const T inv_n = static_cast<T>(1.0 / static_cast<double>(batch.size()));
    Tape<T> tape;
    GeneratorResult r;
    Var<T> loss{}, adv{};
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto x = tape.constant(batch[i]);
      auto y = encode_features(x, model_, true);
      auto yq = quantize_ste(y, bits);
      r.mean_bits += feature_codelength(y.value(), bits);
      auto pen = acr_penalty(yq, acr_.alpha, acr_cfg_);
      auto xr = synthesize(yq, model_, true);
      auto term = add(sub(tape.constant(Tensor<T>::scalar(T{1})), ms_ssim_loss_term(x, xr, ms_cfg, color)), pen);
      r.rec_loss += static_cast<double>(term.value().item()) - static_cast<double>(pen.value().item());
      r.penalty += static_cast<double>(pen.value().item());
      loss = i == 0 ? term : add(loss, term);
      if (confusion) {
        auto logit = target_first[i] ? discriminator_logit(x, xr, disc_, false) : discriminator_logit(xr, x, disc_, false);
        auto c = bce_with_logits(logit, target_first[i] ? T{0} : T{1});
        adv = i == 0 ? c : add(adv, c);
      }
      r.reconstructions.push_back(xr.value());
    }
    const double n = static_cast<double>(batch.size());
    r.rec_loss /= n;
    r.penalty /= n;
    r.mean_bits /= n;
    loss = mul_scalar(loss, inv_n);
    if (!std::isfinite(static_cast<double>(loss.value().item())) || !std::isfinite(r.rec_loss)) {
      fail("non-finite generator loss", r);
    }

    auto& enc = model_.encoder();
    auto& dec = model_.decoder();
    enc.zero_grad();
    dec.zero_grad();
    tape.backward(loss);
    if (confusion) {
      auto rec_grad = concat(enc.gradients(), dec.gradients());
      enc.zero_grad();
      dec.zero_grad();
      tape.backward(mul_scalar(adv, inv_n));
      auto adv_grad = concat(enc.gradients(), dec.gradients());
      auto combined = balance_gradients(rec_grad, adv_grad, cfg_.adversarial_ratio);
      enc.set_gradients({combined.begin(), combined.begin() + static_cast<std::ptrdiff_t>(enc.size())});
      dec.set_gradients({combined.begin() + static_cast<std::ptrdiff_t>(enc.size()), combined.end()});
    }
    enc_opt_.step(enc, lr);
    dec_opt_.step(dec, lr);
    return r;
  }

  // Binary cross-entropy on swap labels. Updates discriminator parameters only.
  double discriminator_phase(const std::vector<Tensor<T>>& targets, const std::vector<Tensor<T>>& recons,
                             const std::vector<bool>& target_first, double lr) {
    Tape<T> tape;
    Var<T> loss{};
    for (std::size_t i = 0; i < targets.size(); ++i) {
      auto a = tape.constant(target_first[i] ? targets[i] : recons[i]);
      auto b = tape.constant(target_first[i] ? recons[i] : targets[i]);
      auto l = bce_with_logits(discriminator_logit(a, b, disc_, true), target_first[i] ? T{1} : T{0});
      loss = i == 0 ? l : add(loss, l);
    }
    loss = mul_scalar(loss, static_cast<T>(1.0 / static_cast<double>(targets.size())));
    const double v = static_cast<double>(loss.value().item());
    if (!std::isfinite(v)) throw TrainingError("non-finite discriminator loss at iteration " + std::to_string(iteration_));
    disc_.parameters().zero_grad();
    tape.backward(loss);
    disc_opt_.step(disc_.parameters(), lr);
    return v;
  }

  // Fraction of pairs whose slot-0 verdict is right; a score of exactly 0.5
  // counts as half.
  double batch_accuracy(const std::vector<Tensor<T>>& targets, const std::vector<Tensor<T>>& recons,
                        const std::vector<bool>& target_first) {
    double correct = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      SwappedPair<T> p{target_first[i] ? targets[i] : recons[i], target_first[i] ? recons[i] : targets[i],
                       target_first[i]};
      const double s = discriminator_score(p, disc_);
      if (s == 0.5) correct += 0.5;
      else if ((s > 0.5) == target_first[i]) correct += 1.0;
    }
    return correct / static_cast<double>(targets.size());
  }

  // Runs the configured number of iterations on `source`. `on_row` sees every
  // log row; checkpoints land in checkpoint_dir when configured.
  void run(const PatchSource<T>& source, const std::function<void(const TrainLogRow&)>& on_row = {}) {
    Rng data_rng(cfg_.seed);
    while (iteration_ < cfg_.iterations) {
      auto row = step(source.batch(cfg_.batch, data_rng));
      if (on_row) on_row(row);
      if (cfg_.checkpoint_every && !cfg_.checkpoint_dir.empty() && iteration_ % cfg_.checkpoint_every == 0) {
        save_checkpoint(cfg_.checkpoint_dir, "iter" + std::to_string(iteration_));
      }
    }
  }

  void save_checkpoint(const std::string& dir, const std::string& tag) const {
    std::filesystem::create_directories(dir);
    const auto base = std::filesystem::path(dir);
    save_model((base / ("model_" + tag + ".wocm")).string(), model_);
    write_file((base / ("disc_" + tag + ".wops")).string(), serialize_parameters(disc_.parameters()));
  }

  const TrainConfig& config() const { return cfg_; }
  const AcrConfig& acr_config() const { return acr_cfg_; }
  const AcrState& acr_state() const { return acr_; }
  SchedulerState& scheduler_state() { return sched_; }
  CodecModel<T>& model() { return model_; }
  Discriminator<T>& discriminator() { return disc_; }
  std::uint64_t iteration() const { return iteration_; }

 private:
  static std::vector<Tensor<T>> concat(std::vector<Tensor<T>> a, const std::vector<Tensor<T>>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  [[noreturn]] void fail(const std::string& what, const GeneratorResult& r) const {
    std::string msg = what + " at iteration " + std::to_string(iteration_) + ": rec_loss=" + std::to_string(r.rec_loss) +
                      " penalty=" + std::to_string(r.penalty) + " alpha=" + std::to_string(acr_.alpha) +
                      " mean_bits=" + std::to_string(acr_.mean_bits);
    if (!cfg_.checkpoint_dir.empty()) {
      try {
        save_checkpoint(cfg_.checkpoint_dir, "nonfinite");
        msg += "; snapshot in " + cfg_.checkpoint_dir;
      } catch (const std::exception& e) {
        msg += "; snapshot failed: " + std::string(e.what());
      }
    }
    throw TrainingError(msg);
  }

  TrainConfig cfg_;
  CodecModel<T> model_;
  Discriminator<T> disc_;
  Adam<T> enc_opt_, dec_opt_, disc_opt_;
  AcrConfig acr_cfg_;
  AcrState acr_;
  SchedulerState sched_;
  Rng swap_rng_;
  std::uint64_t iteration_ = 0;
};

}  // namespace woc
