#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "woc/errors.hpp"
#include "woc/image_io.hpp"
#include "woc/random.hpp"
#include "woc/tensor.hpp"

namespace woc {

// ---------------------------------------------------------------------------
// Synthetic images: smooth color field, soft-edged shapes, fractal texture.

namespace detail {

inline std::uint32_t hash32(std::uint32_t x) {
  x ^= x >> 16;
  x *= 0x7feb352dU;
  x ^= x >> 15;
  x *= 0x846ca68bU;
  x ^= x >> 16;
  return x;
}

inline double lattice(std::uint32_t seed, int ix, int iy) {
  const std::uint32_t h = hash32(seed ^ hash32(static_cast<std::uint32_t>(ix) * 0x9E3779B1U ^
                                               hash32(static_cast<std::uint32_t>(iy) + 0x85EBCA77U)));
  return static_cast<double>(h) / 4294967295.0;
}

// Smoothstep-interpolated value noise in [0, 1].
inline double value_noise(std::uint32_t seed, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
  double tx = x - fx, ty = y - fy;
  tx = tx * tx * (3 - 2 * tx);
  ty = ty * ty * (3 - 2 * ty);
  const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

}  // namespace detail

template <typename T = float>
Tensor<T> synthetic_image(std::uint64_t seed, std::size_t height, std::size_t width) {
  Rng rng(seed);
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  const double scale = std::max(H, W);
  std::array<std::array<double, 3>, 4> corners{};
  for (auto& c : corners)
    for (auto& v : c) v = uniform(rng, 0.15, 0.85);
  const auto field_seed = static_cast<std::uint32_t>(rng());
  const double field_freq = uniform(rng, 1.5, 4.0) / scale;

  struct Shape {
    bool circle;
    double cx, cy, rx, ry, soft;
    std::array<double, 3> color;
    double opacity;
  };
  std::vector<Shape> shapes(4 + uniform_index(rng, 9));
  for (auto& s : shapes) {
    s.circle = coin_flip(rng);
    s.cx = uniform(rng, 0, W);
    s.cy = uniform(rng, 0, H);
    s.rx = uniform(rng, 0.04, 0.25) * scale;
    s.ry = s.circle ? s.rx : uniform(rng, 0.04, 0.25) * scale;
    s.soft = uniform(rng, 0.5, 3.0);
    for (auto& v : s.color) v = uniform(rng, 0.0, 1.0);
    s.opacity = uniform(rng, 0.5, 1.0);
  }
  const auto tex_seed = static_cast<std::uint32_t>(rng());
  const double tex_amp = uniform(rng, 0.02, 0.12);
  const double tex_freq = uniform(rng, 0.08, 0.3);

  Tensor<T> img({3, height, width});
  for (std::size_t yi = 0; yi < height; ++yi) {
    for (std::size_t xi = 0; xi < width; ++xi) {
      const double x = static_cast<double>(xi) + 0.5, y = static_cast<double>(yi) + 0.5;
      const double u = x / W, v = y / H;
      const double warp = detail::value_noise(field_seed, x * field_freq, y * field_freq) - 0.5;
      std::array<double, 3> px{};
      for (int c = 0; c < 3; ++c) {
        const double top = corners[0][c] * (1 - u) + corners[1][c] * u;
        const double bot = corners[2][c] * (1 - u) + corners[3][c] * u;
        px[c] = top * (1 - v) + bot * v + 0.3 * warp;
      }
      for (const auto& s : shapes) {
        double dist;
        if (s.circle) {
          dist = std::hypot(x - s.cx, y - s.cy) - s.rx;
        } else {
          dist = std::max(std::abs(x - s.cx) - s.rx, std::abs(y - s.cy) - s.ry);
        }
        const double cover = s.opacity / (1.0 + std::exp(dist / s.soft));
        for (int c = 0; c < 3; ++c) px[c] = px[c] * (1 - cover) + s.color[c] * cover;
      }
      double tex = 0.0, amp = 1.0, f = tex_freq, norm = 0.0;
      for (int o = 0; o < 4; ++o) {
        tex += amp * (detail::value_noise(tex_seed + static_cast<std::uint32_t>(o), x * f, y * f) - 0.5);
        norm += amp;
        amp *= 0.5;
        f *= 2.0;
      }
      tex *= tex_amp / norm * 2.0;
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, yi, xi) = static_cast<T>(std::clamp(px[c] + tex, 0.0, 1.0));
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Bicubic resampling (Keys, a = -0.5), kernel widened when downscaling.

namespace detail {

inline double keys_cubic(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2) * x - (a + 3)) * x * x + 1;
  if (x < 2.0) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
  return 0.0;
}

struct ResampleTaps {
  std::vector<std::size_t> first;
  std::vector<std::vector<double>> weights;
};

inline ResampleTaps resample_taps(std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double support = 2.0 * std::max(1.0, scale);
  const double stretch = std::max(1.0, scale);
  ResampleTaps t;
  for (std::size_t o = 0; o < out; ++o) {
    const double center = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const long lo = static_cast<long>(std::floor(center - support)) + 1;
    const long hi = static_cast<long>(std::floor(center + support));
    std::vector<double> w;
    double total = 0.0;
    for (long i = lo; i <= hi; ++i) {
      const double k = keys_cubic((static_cast<double>(i) - center) / stretch);
      w.push_back(k);
      total += k;
    }
    for (auto& v : w) v /= total;
    t.first.push_back(static_cast<std::size_t>(lo + static_cast<long>(in) * 4));
    t.weights.push_back(std::move(w));
  }
  return t;
}

inline std::size_t clamp_index(std::size_t biased, std::size_t n) {
  const long i = static_cast<long>(biased) - static_cast<long>(n) * 4;
  return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(n) - 1));
}

}  // namespace detail

// Separable bicubic resize of a C x H x W tensor; edges clamp.
template <typename T>
Tensor<T> resize_bicubic(const Tensor<T>& img, std::size_t height, std::size_t width) {
  if (img.rank() != 3) throw ShapeError("resize_bicubic: expected C x H x W, got " + to_string(img.shape()));
  if (height == 0 || width == 0) throw ConfigError("resize_bicubic: target dims must be positive");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const auto tx = detail::resample_taps(W, width), ty = detail::resample_taps(H, height);
  std::vector<double> tmp(C * H * width);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < tx.weights[x].size(); ++k) {
          acc += tx.weights[x][k] * static_cast<double>(img.at(c, y, detail::clamp_index(tx.first[x] + k, W)));
        }
        tmp[(c * H + y) * width + x] = acc;
      }
  Tensor<T> out({C, height, width});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < ty.weights[y].size(); ++k) {
          acc += ty.weights[y][k] * tmp[(c * H + detail::clamp_index(ty.first[y] + k, H)) * width + x];
        }
        out.at(c, y, x) = static_cast<T>(std::clamp(acc, 0.0, 1.0));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Training patches

// Random P x P crops (with random horizontal flips) from a fixed image pool.
template <typename T = float>
class PatchSource {
 public:
  PatchSource(std::vector<Tensor<T>> images, std::size_t patch) : images_(std::move(images)), patch_(patch) {
    if (images_.empty()) throw ConfigError("patch source has no images");
    for (const auto& im : images_) {
      if (im.rank() != 3 || im.dim(0) != 3 || im.dim(1) < patch || im.dim(2) < patch) {
        throw ShapeError("patch source image " + to_string(im.shape()) + " is smaller than the " +
                         std::to_string(patch) + " px patch");
      }
    }
  }

  // Pool of `count` synthetic images of side `image_size`, seeded from `seed`.
  static PatchSource synthetic(std::uint64_t seed, std::size_t count, std::size_t image_size, std::size_t patch) {
    std::vector<Tensor<T>> pool;
    for (std::size_t i = 0; i < count; ++i) pool.push_back(synthetic_image<T>(seed * 1000003ULL + i, image_size, image_size));
    return PatchSource(std::move(pool), patch);
  }

  Tensor<T> sample(Rng& rng) const {
    const auto& im = images_[uniform_index(rng, images_.size())];
    const std::size_t y0 = uniform_index(rng, im.dim(1) - patch_ + 1);
    const std::size_t x0 = uniform_index(rng, im.dim(2) - patch_ + 1);
    const bool flip = coin_flip(rng);
    Tensor<T> out({3, patch_, patch_});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < patch_; ++y)
        for (std::size_t x = 0; x < patch_; ++x) out.at(c, y, x) = im.at(c, y0 + y, x0 + (flip ? patch_ - 1 - x : x));
    return out;
  }

  std::vector<Tensor<T>> batch(std::size_t n, Rng& rng) const {
    std::vector<Tensor<T>> b;
    b.reserve(n);
    for (std::size_t i = 0; i < n; ++i) b.push_back(sample(rng));
    return b;
  }

  std::size_t patch_size() const { return patch_; }
  std::size_t image_count() const { return images_.size(); }

 private:
  std::vector<Tensor<T>> images_;
  std::size_t patch_;
};

// ---------------------------------------------------------------------------
// Dataset manifest: CSV with a fixed header; paths relative to the manifest.

struct ManifestEntry {
  std::string path;
  std::size_t original_width = 0, original_height = 0;
  std::size_t width = 0, height = 0;
};

struct DatasetManifest {
  std::string rule;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base;

  std::string resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.path);
    return (p.is_absolute() ? p : base / p).string();
  }
};

inline constexpr const char* kManifestHeader = "path,original_width,original_height,width,height";

inline void write_manifest(const std::string& file, const DatasetManifest& m) {
  std::ofstream out(file);
  if (!out) throw FormatError("cannot write " + file);
  out << "# rule: " << m.rule << "\n" << kManifestHeader << "\n";
  for (const auto& e : m.entries) {
    out << e.path << "," << e.original_width << "," << e.original_height << "," << e.width << "," << e.height << "\n";
  }
}

inline DatasetManifest read_manifest(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open manifest " + file);
  DatasetManifest m;
  m.base = std::filesystem::path(file).parent_path();
  std::string line;
  bool header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("# rule: ", 0) == 0) {
      m.rule = line.substr(8);
      continue;
    }
    if (line[0] == '#') continue;
    if (!header) {
      if (line != kManifestHeader) throw FormatError(file + ": expected header '" + kManifestHeader + "'");
      header = true;
      continue;
    }
    std::stringstream ss(line);
    std::string f[5];
    for (auto& s : f) {
      if (!std::getline(ss, s, ',')) throw FormatError(file + ":" + std::to_string(lineno) + ": expected 5 fields");
    }
    try {
      m.entries.push_back({f[0], std::stoul(f[1]), std::stoul(f[2]), std::stoul(f[3]), std::stoul(f[4])});
    } catch (const std::logic_error&) {
      throw FormatError(file + ":" + std::to_string(lineno) + ": malformed dimensions");
    }
  }
  if (!header) throw FormatError(file + ": missing header");
  return m;
}

// Landscape and square sources go to short x long; portrait sources to
// long x short. Returns (height, width).
inline std::pair<std::size_t, std::size_t> prepared_dims(std::size_t src_height, std::size_t src_width,
                                                         std::size_t short_side = 512, std::size_t long_side = 768) {
  if (src_height > src_width) return {long_side, short_side};
  return {short_side, long_side};
}

// Resizes every decodable image in `src_dir` (sorted by name) into `out_dir`
// as PNG and writes out_dir/manifest.csv. Unreadable files are reported to
// `log` and skipped.
inline DatasetManifest prepare_dataset(const std::string& src_dir, const std::string& out_dir,
                                       std::size_t short_side = 512, std::size_t long_side = 768,
                                       std::ostream& log = std::cerr) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(src_dir)) throw ConfigError("source directory " + src_dir + " does not exist");
  fs::create_directories(out_dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(src_dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  DatasetManifest m;
  m.rule = "bicubic resize to " + std::to_string(short_side) + "x" + std::to_string(long_side) +
           " (HxW; transposed for portrait sources; square treated as landscape)";
  m.base = out_dir;
  for (const auto& f : files) {
    Rgb8Image img;
    try {
      img = read_image(f.string());
    } catch (const std::exception& e) {
      log << "prepare-dataset: skipping " << f.string() << ": " << e.what() << "\n";
      continue;
    }
    if (img.width == img.height) log << "prepare-dataset: " << f.filename().string() << " is square, using landscape\n";
    const auto [h, w] = prepared_dims(img.height, img.width, short_side, long_side);
    const auto resized = resize_bicubic(to_tensor<float>(img), h, w);
    const std::string name = f.stem().string() + ".png";
    write_image((fs::path(out_dir) / name).string(), to_rgb8(resized));
    m.entries.push_back({name, img.width, img.height, w, h});
  }
  write_manifest((fs::path(out_dir) / "manifest.csv").string(), m);
  return m;
}

}  // namespace woc
