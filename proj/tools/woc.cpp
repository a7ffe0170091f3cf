// woc: train, run and evaluate the pyramidal codec.
//
//   woc train --config cfg.json --out model.wocm [--log train.csv]
//   woc encode --model m.wocm --in img.png --out img.woc
//   woc decode --model m.wocm --in img.woc --out img.png
//   woc eval --model m.wocm --dataset manifest.csv --colorspace rgb|ycbcr
//   woc rd-curve --codecs jpeg,woc=m.wocm --dataset manifest.csv --grid 0.1:2:0.1 --out rd.csv
//   woc recompress-study --codec jpeg --dataset manifest.csv --out study.csv
//   woc prepare-dataset --src raw/ --out prepared/
//
// Every subcommand takes --seed.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <unistd.h>

#include "woc/container.hpp"
#include "woc/dataset.hpp"
#include "woc/eval.hpp"
#include "woc/trainer.hpp"

namespace fs = std::filesystem;
using namespace woc;

namespace {

struct Options {
  std::uint64_t seed = 1;
  std::string config, out, model, in, dataset, codecs, codec, grid, src, log;
  std::string colorspace = "rgb";
  std::string quality_grid = "0.80:0.99:0.01";
  std::string first_pass = "30,50,70,90";
  std::string workdir;
  std::size_t log_every = 100;
  bool seed_given = false;
};

ColorWeights parse_color(const std::string& s) {
  if (s == "rgb") return ColorWeights::rgb();
  if (s == "ycbcr") return ColorWeights::ycbcr();
  throw ConfigError("colorspace must be rgb or ycbcr, got " + s);
}

std::string sibling_tool(const std::string& name) {
  std::error_code ec;
  const auto self = fs::canonical("/proc/self/exe", ec);
  if (!ec && fs::exists(self.parent_path() / name)) return (self.parent_path() / name).string();
  return name;
}

std::string scratch_dir(const Options& o, const std::string& tag) {
  if (!o.workdir.empty()) return (fs::path(o.workdir) / tag).string();
  return (fs::temp_directory_path() / ("woc_" + tag + "_" + std::to_string(::getpid()))).string();
}

std::vector<std::pair<std::string, Rgb8Image>> load_dataset(const std::string& manifest) {
  const auto m = read_manifest(manifest);
  std::vector<std::pair<std::string, Rgb8Image>> out;
  for (const auto& e : m.entries) out.emplace_back(e.path, read_image(m.resolve(e)));
  if (out.empty()) throw ConfigError(manifest + " lists no images");
  return out;
}

// "jpeg", a JSON adapter file, or a JSON object literal.
CodecAdapter parse_adapter(const std::string& spec) {
  if (spec == "jpeg") return jpeg_adapter(sibling_tool("woc-jpeg"));
  nlohmann::json j;
  try {
    if (!spec.empty() && spec.front() == '{') {
      j = nlohmann::json::parse(spec);
    } else {
      std::ifstream f(spec);
      if (!f) throw ConfigError("codec '" + spec + "' is neither 'jpeg' nor a readable adapter file");
      j = nlohmann::json::parse(f);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("codec " + spec + ": " + e.what());
  }
  return adapter_from_json(j);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  return f;
}

int cmd_train(const Options& o) {
  std::ifstream f(o.config);
  if (!f) throw ConfigError("cannot open config " + o.config);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(o.config + ": " + e.what());
  }
  TrainConfig cfg = train_config_from_json(j);
  if (o.seed_given) cfg.seed = o.seed;
  std::optional<PatchSource<float>> source;
  if (j.contains("dataset")) {
    auto path = fs::path(j.at("dataset").get<std::string>());
    if (path.is_relative()) path = fs::path(o.config).parent_path() / path;
    std::vector<Tensor<float>> images;
    for (const auto& [name, img] : load_dataset(path.string())) images.push_back(to_tensor<float>(img));
    source.emplace(std::move(images), cfg.patch);
  } else {
    source.emplace(PatchSource<float>::synthetic(cfg.seed, cfg.pool_images, cfg.pool_image_size, cfg.patch));
  }
  Trainer<float> trainer(cfg);
  std::ofstream log;
  if (!o.log.empty()) {
    log = open_out(o.log);
    log << kTrainLogHeader << "\n";
  }
  std::cout << kTrainLogHeader << "\n";
  trainer.run(*source, [&](const TrainLogRow& r) {
    const auto line = format_log_row(r);
    if (log.is_open()) log << line << "\n";
    if (o.log_every && (r.iteration % o.log_every == 0 || r.iteration + 1 == cfg.iterations)) std::cout << line << std::endl;
  });
  save_model(o.out, trainer.model());
  std::cerr << "wrote " << o.out << "\n";
  return 0;
}

int cmd_encode(const Options& o) {
  auto model = load_model<float>(o.model);
  const auto img = read_image(o.in);
  const auto file = encode_image(to_tensor<float>(img), model);
  write_file(o.out, file);
  std::cerr << o.out << ": " << file.size() << " bytes, "
            << bpp(8.0 * static_cast<double>(file.size()), img.width, img.height) << " bpp\n";
  return 0;
}

int cmd_decode(const Options& o) {
  auto model = load_model<float>(o.model);
  write_image(o.out, to_rgb8(decode_image(read_file(o.in), model)));
  return 0;
}

int cmd_eval(const Options& o) {
  auto model = load_model<float>(o.model);
  const auto color = parse_color(o.colorspace);
  std::cout << "image,bpp,ms_ssim,encode_ms,decode_ms\n";
  double sb = 0.0, sq = 0.0;
  const auto data = load_dataset(o.dataset);
  for (const auto& [name, img] : data) {
    const auto p = run_woc(model, img, MsSsimConfig::evaluation(), color);
    std::printf("%s,%.6f,%.6f,%.2f,%.2f\n", name.c_str(), p.bpp, p.quality, p.encode_ms, p.decode_ms);
    sb += p.bpp;
    sq += p.quality;
  }
  const double n = static_cast<double>(data.size());
  std::printf("mean,%.6f,%.6f,,\n", sb / n, sq / n);
  return 0;
}

// Comma-separated codec entries: "jpeg", "woc=<model>" (repeatable, each
// model contributes one point per image), or an adapter JSON file.
int cmd_rd_curve(const Options& o) {
  const auto data = load_dataset(o.dataset);
  const auto grid = parse_grid(o.grid);
  std::vector<CodecAdapter> adapters;
  std::vector<std::string> woc_models;
  std::stringstream ss(o.codecs);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.rfind("woc=", 0) == 0) woc_models.push_back(item.substr(4));
    else adapters.push_back(parse_adapter(item));
  }
  if (adapters.empty() && woc_models.empty()) throw ConfigError("--codecs lists no codecs");

  std::map<std::string, std::vector<RdCurve>> by_codec;
  const auto dir = scratch_dir(o, "rd");
  // Timing runs serially; see the README.
  for (const auto& a : adapters) {
    auto qualities = a.qualities.empty() ? std::vector<int>{50} : a.qualities;
    for (const auto& [name, img] : data) {
      RdCurve c{name, a.name, {}};
      for (int q : qualities) {
        auto r = run_codec(a, img, q, dir);
        if (r.point) c.points.push_back(*r.point);
        else std::cerr << "rd-curve: " << name << ": " << r.error << "\n";
      }
      if (c.points.empty()) continue;
      cleanup_curve(c, &std::cerr);
      by_codec[a.name].push_back(std::move(c));
    }
  }
  if (!woc_models.empty()) {
    std::vector<CodecModel<float>> models;
    for (const auto& m : woc_models) models.push_back(load_model<float>(m));
    for (const auto& [name, img] : data) {
      RdCurve c{name, "woc", {}};
      for (std::size_t i = 0; i < models.size(); ++i) {
        auto p = run_woc(models[i], img);
        p.param = fs::path(woc_models[i]).filename().string();
        c.points.push_back(p);
      }
      cleanup_curve(c, &std::cerr);
      by_codec["woc"].push_back(std::move(c));
    }
  }
  fs::remove_all(dir);

  std::vector<RdCurve> all;
  for (const auto& [codec, curves] : by_codec) all.insert(all.end(), curves.begin(), curves.end());
  auto out = open_out(o.out);
  write_rd_csv(out, all);

  const auto summary_path = o.out + ".summary.csv";
  auto summary = open_out(summary_path);
  summary << "codec,bpp,ms_ssim\n";
  for (const auto& [codec, curves] : by_codec) {
    if (curves.size() != data.size()) {
      std::cerr << "rd-curve: " << codec << " has curves for " << curves.size() << " of " << data.size() << " images\n";
    }
    try {
      for (const auto& p : sweep_average_quality(curves, grid)) summary << codec << "," << p.x << "," << p.y << "\n";
    } catch (const ConfigError& e) {
      std::cerr << "rd-curve: " << e.what() << "\n";
    }
  }

  if (by_codec.count("woc") && by_codec.size() > 1) {
    const auto rel_path = o.out + ".relative.csv";
    auto rel = open_out(rel_path);
    rel << "codec,ms_ssim,percent,images,excluded\n";
    const auto qgrid = parse_grid(o.quality_grid);
    for (const auto& [codec, curves] : by_codec) {
      if (codec == "woc") continue;
      for (const auto& r : relative_size_at_quality(by_codec["woc"], curves, qgrid)) {
        rel << codec << "," << r.quality << "," << r.percent << "," << r.images << "," << r.excluded << "\n";
      }
    }
  }
  return 0;
}

int cmd_recompress(const Options& o) {
  const auto a = parse_adapter(o.codec);
  std::vector<Rgb8Image> images;
  for (auto& [name, img] : load_dataset(o.dataset)) images.push_back(std::move(img));
  std::vector<int> first;
  for (double v : parse_grid(o.first_pass)) first.push_back(static_cast<int>(std::lround(v)));
  const auto dir = scratch_dir(o, "recompress");
  const auto study = recompression_study(a, images, first, o.grid.empty() ? std::vector<double>{} : parse_grid(o.grid), dir);
  fs::remove_all(dir);
  auto out = open_out(o.out);
  write_recompression_csv(out, study);
  for (std::size_t i = 1; i < study.size(); ++i) {
    std::cerr << "first pass " << study[i].first_pass << ": at or above raw at "
              << 100.0 * fraction_at_or_above(study[i], study[0]) << "% of grid points\n";
  }
  return 0;
}

int cmd_prepare(const Options& o) {
  const auto m = prepare_dataset(o.src, o.out);
  std::cerr << "prepared " << m.entries.size() << " images into " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pyramidal learned image codec"};
  app.require_subcommand(1);
  Options o;
  auto seed = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "random seed")->each([&](const std::string&) { o.seed_given = true; });
    return sub;
  };

  auto* train = seed(app.add_subcommand("train", "train a codec"));
  train->add_option("--config", o.config, "training config (JSON)")->required();
  train->add_option("--out", o.out, "model checkpoint to write")->required();
  train->add_option("--log", o.log, "per-iteration CSV log");
  train->add_option("--log-every", o.log_every, "print every N iterations (0: quiet)");

  auto* enc = seed(app.add_subcommand("encode", "compress an image"));
  enc->add_option("--model", o.model)->required();
  enc->add_option("--in", o.in)->required();
  enc->add_option("--out", o.out)->required();

  auto* dec = seed(app.add_subcommand("decode", "decompress a .woc file"));
  dec->add_option("--model", o.model)->required();
  dec->add_option("--in", o.in)->required();
  dec->add_option("--out", o.out)->required();

  auto* ev = seed(app.add_subcommand("eval", "bpp and MS-SSIM on a dataset"));
  ev->add_option("--model", o.model)->required();
  ev->add_option("--dataset", o.dataset, "manifest.csv")->required();
  ev->add_option("--colorspace", o.colorspace)->check(CLI::IsMember({"rgb", "ycbcr"}));

  auto* rd = seed(app.add_subcommand("rd-curve", "per-image RD curves and averaged summaries"));
  rd->add_option("--codecs", o.codecs, "comma list: jpeg, woc=<model>, adapter.json")->required();
  rd->add_option("--dataset", o.dataset)->required();
  rd->add_option("--grid", o.grid, "bpp grid, lo:hi:step or a comma list")->required();
  rd->add_option("--quality-grid", o.quality_grid, "MS-SSIM grid for relative sizes");
  rd->add_option("--out", o.out)->required();
  rd->add_option("--workdir", o.workdir);

  auto* rc = seed(app.add_subcommand("recompress-study", "RD curves of recompressing JPEG output"));
  rc->add_option("--codec", o.codec, "jpeg or adapter.json")->required();
  rc->add_option("--dataset", o.dataset)->required();
  rc->add_option("--out", o.out)->required();
  rc->add_option("--first-pass", o.first_pass, "first-pass qualities");
  rc->add_option("--grid", o.grid, "bpp grid (default: 16 rates over the raw curves' common range)");
  rc->add_option("--workdir", o.workdir);

  auto* prep = seed(app.add_subcommand("prepare-dataset", "resize a directory of images to 512x768"));
  prep->add_option("--src", o.src)->required();
  prep->add_option("--out", o.out)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(o);
    if (*enc) return cmd_encode(o);
    if (*dec) return cmd_decode(o);
    if (*ev) return cmd_eval(o);
    if (*rd) return cmd_rd_curve(o);
    if (*rc) return cmd_recompress(o);
    return cmd_prepare(o);
  } catch (const std::exception& e) {
    std::cerr << "woc: " << e.what() << "\n";
    return 1;
  }
}
