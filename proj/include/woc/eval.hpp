#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "woc/container.hpp"
#include "woc/dataset.hpp"
#include "woc/errors.hpp"
#include "woc/image_io.hpp"
#include "woc/metrics.hpp"
#include "woc/pyramid.hpp"

namespace woc {

struct RdPoint {
  double bpp = 0.0;
  double quality = 0.0;  // MS-SSIM
  double encode_ms = 0.0;
  double decode_ms = 0.0;
  std::string param;  // codec setting that produced the point
};

struct RdCurve {
  std::string image;
  std::string codec;
  std::vector<RdPoint> points;
};

// Sorts by bpp, keeps the best quality among equal rates, then replaces each
// quality by the running maximum so quality is non-decreasing in bpp.
// Returns the number of points the envelope changed.
inline std::size_t cleanup_curve(RdCurve& c, std::ostream* log = nullptr) {
  auto& p = c.points;
  std::stable_sort(p.begin(), p.end(), [](const RdPoint& a, const RdPoint& b) { return a.bpp < b.bpp; });
  std::vector<RdPoint> out;
  for (const auto& pt : p) {
    if (!out.empty() && out.back().bpp == pt.bpp) {
      if (pt.quality > out.back().quality) out.back() = pt;
    } else {
      out.push_back(pt);
    }
  }
  std::size_t changed = 0;
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].quality < out[i - 1].quality) {
      if (log) {
        *log << "rd: " << c.codec << "/" << c.image << ": quality " << out[i].quality << " at " << out[i].bpp
             << " bpp is below " << out[i - 1].quality << " at " << out[i - 1].bpp << " bpp; using envelope\n";
      }
      out[i].quality = out[i - 1].quality;
      ++changed;
    }
  }
  p = std::move(out);
  return changed;
}

inline bool spans_bpp(const RdCurve& c, double bpp) {
  return !c.points.empty() && c.points.front().bpp <= bpp && bpp <= c.points.back().bpp;
}
inline bool spans_quality(const RdCurve& c, double q) {
  return !c.points.empty() && c.points.front().quality <= q && q <= c.points.back().quality;
}

// Piecewise-linear quality at `bpp` on a cleaned curve.
inline double interpolate_quality(const RdCurve& c, double bpp) {
  if (!spans_bpp(c, bpp)) throw ConfigError("rd: " + std::to_string(bpp) + " bpp is outside the curve of " + c.image);
  const auto& p = c.points;
  auto it = std::lower_bound(p.begin(), p.end(), bpp, [](const RdPoint& a, double v) { return a.bpp < v; });
  if (it->bpp == bpp) return it->quality;
  const auto& hi = *it;
  const auto& lo = *(it - 1);
  const double t = (bpp - lo.bpp) / (hi.bpp - lo.bpp);
  return lo.quality + t * (hi.quality - lo.quality);
}

// Smallest bpp reaching quality `q` on a cleaned (non-decreasing) curve.
inline double interpolate_bpp(const RdCurve& c, double q) {
  if (!spans_quality(c, q)) throw ConfigError("rd: quality " + std::to_string(q) + " is outside the curve of " + c.image);
  const auto& p = c.points;
  auto it = std::lower_bound(p.begin(), p.end(), q, [](const RdPoint& a, double v) { return a.quality < v; });
  if (it->quality == q || it == p.begin()) return it->bpp;
  const auto& hi = *it;
  const auto& lo = *(it - 1);
  const double t = (q - lo.quality) / (hi.quality - lo.quality);
  return lo.bpp + t * (hi.bpp - lo.bpp);
}

struct AveragedPoint {
  double x = 0.0;  // grid value
  double y = 0.0;  // mean across images
};

// Interpolate each image's curve at each grid bpp, then average. Grid points
// outside the common bpp range are dropped with a warning.
inline std::vector<AveragedPoint> sweep_average_quality(const std::vector<RdCurve>& curves, const std::vector<double>& grid,
                                                        std::ostream* log = &std::cerr) {
  if (curves.empty()) throw ConfigError("sweep_average_quality: no curves");
  double lo = -INFINITY, hi = INFINITY;
  for (const auto& c : curves) {
    if (c.points.empty()) throw ConfigError("sweep_average_quality: empty curve for " + c.image);
    lo = std::max(lo, c.points.front().bpp);
    hi = std::min(hi, c.points.back().bpp);
  }
  if (lo > hi) {
    std::string msg = "sweep_average_quality: curves share no bpp range;";
    for (const auto& c : curves) {
      msg += " " + c.codec + "/" + c.image + " [" + std::to_string(c.points.front().bpp) + ", " +
             std::to_string(c.points.back().bpp) + "]";
    }
    throw ConfigError(msg);
  }
  std::vector<AveragedPoint> out;
  std::size_t clipped = 0;
  for (double g : grid) {
    if (g < lo || g > hi) {
      ++clipped;
      continue;
    }
    double s = 0.0;
    for (const auto& c : curves) s += interpolate_quality(c, g);
    out.push_back({g, s / static_cast<double>(curves.size())});
  }
  if (clipped && log) {
    *log << "sweep_average_quality: dropped " << clipped << " grid points outside the common range [" << lo << ", " << hi
         << "] bpp\n";
  }
  return out;
}

struct RelativeSize {
  double quality = 0.0;
  double percent = 0.0;  // mean of theirs_bpp / ours_bpp, times 100
  std::size_t images = 0;
  std::size_t excluded = 0;
};

// Curves are paired by image identifier. Grid points no image covers are
// reported with images = 0 and percent = NaN.
inline std::vector<RelativeSize> relative_size_at_quality(const std::vector<RdCurve>& ours,
                                                          const std::vector<RdCurve>& theirs,
                                                          const std::vector<double>& quality_grid) {
  std::map<std::string, const RdCurve*> by_image;
  for (const auto& c : theirs) by_image[c.image] = &c;
  std::vector<RelativeSize> out;
  for (double q : quality_grid) {
    RelativeSize r{q, 0.0, 0, 0};
    double sum = 0.0;
    for (const auto& o : ours) {
      auto it = by_image.find(o.image);
      if (it == by_image.end() || !spans_quality(o, q) || !spans_quality(*it->second, q)) {
        ++r.excluded;
        continue;
      }
      sum += interpolate_bpp(*it->second, q) / interpolate_bpp(o, q);
      ++r.images;
    }
    r.percent = r.images ? 100.0 * sum / static_cast<double>(r.images) : std::nan("");
    out.push_back(r);
  }
  return out;
}

// "65.3 (304%)" style cell: their mean bpp-equivalent value and the ratio.
inline std::string format_relative(double value, double percent) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f (%.0f%%)", value, percent);
  return buf;
}

// ---------------------------------------------------------------------------
// Grids: "a:b:step" (inclusive) or "v1,v2,...".

inline std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> g;
  try {
    if (spec.find(':') != std::string::npos) {
      std::stringstream ss(spec);
      std::string a, b, s;
      std::getline(ss, a, ':');
      std::getline(ss, b, ':');
      std::getline(ss, s, ':');
      const double lo = std::stod(a), hi = std::stod(b), step = std::stod(s);
      if (!(step > 0.0) || hi < lo) throw ConfigError("grid '" + spec + "': need lo <= hi and step > 0");
      const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
      for (std::size_t i = 0; i <= n; ++i) g.push_back(lo + static_cast<double>(i) * step);
    } else {
      std::stringstream ss(spec);
      std::string v;
      while (std::getline(ss, v, ',')) g.push_back(std::stod(v));
    }
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError("grid '" + spec + "' is not 'lo:hi:step' or a comma list");
  }
  if (g.empty()) throw ConfigError("grid '" + spec + "' is empty");
  return g;
}

// ---------------------------------------------------------------------------
// External codecs

struct CodecAdapter {
  std::string name;
  // Shell templates; {in}, {out} and {q} are substituted with quoted paths
  // and the quality setting.
  std::string encode_cmd;
  std::string decode_cmd;
  std::string encoded_ext = "bin";
  std::size_t header_bytes = 0;
  std::vector<int> qualities;

  void validate() const {
    if (name.empty()) throw ConfigError("codec adapter needs a name");
    if (encode_cmd.find("{in}") == std::string::npos || encode_cmd.find("{out}") == std::string::npos ||
        decode_cmd.find("{in}") == std::string::npos || decode_cmd.find("{out}") == std::string::npos) {
      throw ConfigError("codec adapter " + name + ": commands need {in} and {out}");
    }
  }
};

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

inline std::string expand_command(std::string tmpl, const std::string& in, const std::string& out, int q) {
  auto replace = [&](const std::string& key, const std::string& value) {
    for (std::size_t pos = tmpl.find(key); pos != std::string::npos; pos = tmpl.find(key, pos + value.size())) {
      tmpl.replace(pos, key.size(), value);
    }
  };
  replace("{in}", shell_quote(in));
  replace("{out}", shell_quote(out));
  replace("{q}", std::to_string(q));
  return tmpl;
}

inline CodecAdapter adapter_from_json(const nlohmann::json& j) {
  CodecAdapter a;
  try {
    a.name = j.at("name").get<std::string>();
    a.encode_cmd = j.at("encode").get<std::string>();
    a.decode_cmd = j.at("decode").get<std::string>();
    if (j.contains("ext")) a.encoded_ext = j.at("ext").get<std::string>();
    if (j.contains("header_bytes")) a.header_bytes = j.at("header_bytes").get<std::size_t>();
    if (j.contains("qualities")) a.qualities = j.at("qualities").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("codec adapter: ") + e.what());
  }
  a.validate();
  return a;
}

// libjpeg baseline through the bundled woc-jpeg tool. Headers with standard
// tables (SOI, JFIF APP0, 2 DQT, SOF0, 4 DHT, SOS) are 623 bytes.
inline constexpr std::size_t kJpegHeaderBytes = 623;

inline CodecAdapter jpeg_adapter(const std::string& tool) {
  CodecAdapter a;
  a.name = "jpeg";
  a.encode_cmd = shell_quote(tool) + " encode -q {q} {in} {out}";
  a.decode_cmd = shell_quote(tool) + " decode {in} {out}";
  a.encoded_ext = "jpg";
  a.header_bytes = kJpegHeaderBytes;
  a.qualities = {5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 90, 95};
  return a;
}

inline CodecAdapter identity_adapter(std::size_t ppm_header_bytes) {
  CodecAdapter a;
  a.name = "identity";
  a.encode_cmd = "cp {in} {out}";
  a.decode_cmd = "cp {in} {out}";
  a.encoded_ext = "ppm";
  a.header_bytes = ppm_header_bytes;
  a.qualities = {0};
  return a;
}

struct CodecRun {
  std::optional<RdPoint> point;
  std::string error;
  Rgb8Image decoded;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline int run_shell(const std::string& cmd) {
  const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
  return rc;
}

}  // namespace detail

// Encode then decode `image` with the adapter inside `workdir`. Failures are
// reported in CodecRun::error rather than thrown.
inline CodecRun run_codec(const CodecAdapter& a, const Rgb8Image& image, int quality, const std::string& workdir,
                          const MsSsimConfig& ms_cfg = MsSsimConfig::evaluation(),
                          const ColorWeights& color = ColorWeights::rgb()) {
  namespace fs = std::filesystem;
  CodecRun run;
  fs::create_directories(workdir);
  const auto base = fs::path(workdir) / (a.name + "_q" + std::to_string(quality));
  const std::string in = base.string() + "_in.ppm", enc = base.string() + "." + a.encoded_ext,
                    dec = base.string() + "_out.ppm";
  write_file(in, encode_ppm(image));
  std::error_code ec;
  fs::remove(enc, ec);
  fs::remove(dec, ec);
  auto t0 = std::chrono::steady_clock::now();
  if (detail::run_shell(expand_command(a.encode_cmd, in, enc, quality)) != 0 || !fs::exists(enc)) {
    run.error = a.name + " encode failed at q=" + std::to_string(quality);
    return run;
  }
  RdPoint p;
  p.encode_ms = detail::elapsed_ms(t0);
  t0 = std::chrono::steady_clock::now();
  if (detail::run_shell(expand_command(a.decode_cmd, enc, dec, quality)) != 0 || !fs::exists(dec)) {
    run.error = a.name + " decode failed at q=" + std::to_string(quality);
    return run;
  }
  p.decode_ms = detail::elapsed_ms(t0);
  try {
    run.decoded = decode_image(read_file(dec));
  } catch (const std::exception& e) {
    run.error = a.name + " produced an undecodable image: " + e.what();
    return run;
  }
  if (run.decoded.width != image.width || run.decoded.height != image.height) {
    run.error = a.name + " changed the image size";
    return run;
  }
  const auto bytes = static_cast<std::size_t>(fs::file_size(enc));
  if (bytes < a.header_bytes) {
    run.error = a.name + " output is shorter than its header correction";
    return run;
  }
  p.bpp = bpp(8.0 * static_cast<double>(bytes - a.header_bytes), image.width, image.height);
  try {
    p.quality = ms_ssim(to_tensor<double>(image), to_tensor<double>(run.decoded), ms_cfg, color);
  } catch (const std::exception& e) {
    run.error = a.name + ": " + e.what();
    return run;
  }
  p.param = std::to_string(quality);
  run.point = p;
  return run;
}

// Full container file, header included, counts toward bpp.
template <typename T>
RdPoint run_woc(CodecModel<T>& model, const Rgb8Image& image, const MsSsimConfig& ms_cfg = MsSsimConfig::evaluation(),
                const ColorWeights& color = ColorWeights::rgb(), Rgb8Image* decoded = nullptr) {
  RdPoint p;
  auto t0 = std::chrono::steady_clock::now();
  const auto file = encode_image(to_tensor<T>(image), model);
  p.encode_ms = detail::elapsed_ms(t0);
  t0 = std::chrono::steady_clock::now();
  const auto out = to_rgb8(decode_image(file, model));
  p.decode_ms = detail::elapsed_ms(t0);
  p.bpp = bpp(8.0 * static_cast<double>(file.size()), image.width, image.height);
  p.quality = ms_ssim(to_tensor<double>(image), to_tensor<double>(out), ms_cfg, color);
  if (decoded) *decoded = out;
  return p;
}

// ---------------------------------------------------------------------------
// CSV output

inline constexpr const char* kRdHeader = "codec,image,param,bpp,ms_ssim,encode_ms,decode_ms";

inline void write_rd_csv(std::ostream& out, const std::vector<RdCurve>& curves) {
  out << kRdHeader << "\n";
  char buf[160];
  for (const auto& c : curves)
    for (const auto& p : c.points) {
      std::snprintf(buf, sizeof buf, "%.10g,%.10g,%.4f,%.4f", p.bpp, p.quality, p.encode_ms, p.decode_ms);
      out << c.codec << "," << c.image << "," << p.param << "," << buf << "\n";
    }
}

// ---------------------------------------------------------------------------
// Recompression study

struct RecompressionCurve {
  std::string first_pass;  // "raw" or the first-pass quality
  std::vector<AveragedPoint> curve;  // bpp -> mean MS-SSIM
  std::vector<RdCurve> per_image;
};

// `points` evenly spaced rates over the bpp range every curve covers.
inline std::vector<double> common_bpp_grid(const std::vector<RdCurve>& curves, std::size_t points) {
  if (curves.empty() || points < 2) throw ConfigError("common_bpp_grid: need curves and at least 2 points");
  double lo = -INFINITY, hi = INFINITY;
  for (const auto& c : curves) {
    if (c.points.empty()) throw ConfigError("common_bpp_grid: empty curve for " + c.image);
    lo = std::max(lo, c.points.front().bpp);
    hi = std::min(hi, c.points.back().bpp);
  }
  if (!(lo < hi)) throw ConfigError("common_bpp_grid: curves share no bpp range");
  std::vector<double> g;
  for (std::size_t i = 0; i < points; ++i) g.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1));
  return g;
}

// For each first-pass setting, compress every image once, then sweep the
// adapter's qualities on the first-pass output and measure MS-SSIM against
// that output. The "raw" family uses the images themselves. An empty grid
// is replaced by 16 rates spanning the raw family's common range.
inline std::vector<RecompressionCurve> recompression_study(const CodecAdapter& a, const std::vector<Rgb8Image>& images,
                                                           const std::vector<int>& first_pass,
                                                           std::vector<double> bpp_grid,
                                                           const std::string& workdir,
                                                           std::ostream* log = &std::cerr) {
  std::vector<RecompressionCurve> out;
  std::vector<std::optional<int>> families{std::nullopt};
  for (int q : first_pass) families.emplace_back(q);
  for (const auto& fam : families) {
    RecompressionCurve rc;
    rc.first_pass = fam ? std::to_string(*fam) : "raw";
    for (std::size_t i = 0; i < images.size(); ++i) {
      Rgb8Image input = images[i];
      if (fam) {
        auto first = run_codec(a, images[i], *fam, workdir);
        if (!first.point) {
          if (log) *log << "recompress: image " << i << ": " << first.error << "\n";
          continue;
        }
        input = first.decoded;
      }
      RdCurve c{"img" + std::to_string(i), a.name, {}};
      for (int q : a.qualities) {
        auto r = run_codec(a, input, q, workdir);
        if (r.point) c.points.push_back(*r.point);
        else if (log) *log << "recompress: image " << i << ": " << r.error << "\n";
      }
      if (c.points.empty()) continue;
      cleanup_curve(c, log);
      rc.per_image.push_back(std::move(c));
    }
    if (bpp_grid.empty() && !rc.per_image.empty()) bpp_grid = common_bpp_grid(rc.per_image, 16);
    if (!rc.per_image.empty()) rc.curve = sweep_average_quality(rc.per_image, bpp_grid, log);
    out.push_back(std::move(rc));
  }
  return out;
}

inline constexpr const char* kRecompressionHeader = "first_pass_q,bpp,ms_ssim";

inline void write_recompression_csv(std::ostream& out, const std::vector<RecompressionCurve>& curves) {
  out << kRecompressionHeader << "\n";
  char buf[96];
  for (const auto& c : curves)
    for (const auto& p : c.curve) {
      std::snprintf(buf, sizeof buf, "%.10g,%.10g", p.x, p.y);
      out << c.first_pass << "," << buf << "\n";
    }
}

// Fraction of the raw family's grid points where `other` is at or above it.
inline double fraction_at_or_above(const RecompressionCurve& other, const RecompressionCurve& raw) {
  std::size_t n = 0, hits = 0;
  for (const auto& p : raw.curve) {
    auto it = std::find_if(other.curve.begin(), other.curve.end(), [&](const AveragedPoint& o) { return o.x == p.x; });
    if (it == other.curve.end()) continue;
    ++n;
    if (it->y >= p.y) ++hits;
  }
  return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
}

}  // namespace woc
