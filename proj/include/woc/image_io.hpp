#pragma once

#include <png.h>

#include <cmath>
#include <cctype>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "woc/binary_io.hpp"
#include "woc/errors.hpp"
#include "woc/tensor.hpp"

namespace woc {

// Interleaved 8-bit RGB raster.
struct Rgb8Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const Rgb8Image&, const Rgb8Image&) = default;
};

inline std::uint8_t to_byte(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

template <typename T = float>
Tensor<T> to_tensor(const Rgb8Image& img) {
  Tensor<T> t({3, img.height, img.width});
  const std::size_t n = img.width * img.height;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) t[c * n + i] = static_cast<T>(img.pixels[3 * i + c]) / T(255);
  return t;
}

template <typename T>
Rgb8Image to_rgb8(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("to_rgb8: expected 3 x H x W, got " + to_string(t.shape()));
  Rgb8Image img{t.dim(2), t.dim(1), {}};
  const std::size_t n = img.width * img.height;
  img.pixels.resize(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) img.pixels[3 * i + c] = to_byte(static_cast<double>(t[c * n + i]));
  return img;
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255)

inline std::string ppm_header(std::size_t width, std::size_t height) {
  return "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
}

inline std::vector<std::uint8_t> encode_ppm(const Rgb8Image& img) {
  const std::string h = ppm_header(img.width, img.height);
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline Rgb8Image decode_ppm(const std::vector<std::uint8_t>& data) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(data[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < data.size() && std::isdigit(data[pos]) && digits < 9) {
      v = v * 10 + (data[pos++] - '0');
      ++digits;
    }
    if (digits == 0) throw FormatError("PPM: expected a number at byte " + std::to_string(pos));
    return v;
  };
  if (data.size() < 2 || data[0] != 'P' || data[1] != '6') throw FormatError("PPM: not a binary P6 file");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (maxval != 255) throw FormatError("PPM: only maxval 255 is supported, got " + std::to_string(maxval));
  if (w == 0 || h == 0) throw FormatError("PPM: empty image");
  if (pos >= data.size() || !std::isspace(data[pos])) throw FormatError("PPM: malformed header");
  ++pos;
  if (data.size() - pos < 3 * w * h) throw FormatError("PPM: truncated pixel data");
  Rgb8Image img{w, h, {}};
  img.pixels.assign(data.begin() + static_cast<std::ptrdiff_t>(pos),
                    data.begin() + static_cast<std::ptrdiff_t>(pos + 3 * w * h));
  return img;
}

// ---------------------------------------------------------------------------
// PNG (libpng simplified API)

inline std::vector<std::uint8_t> encode_png(const Rgb8Image& img) {
  png_image p{};
  p.version = PNG_IMAGE_VERSION;
  p.width = static_cast<png_uint_32>(img.width);
  p.height = static_cast<png_uint_32>(img.height);
  p.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&p, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encode: ") + p.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&p, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encode: ") + p.message);
  }
  out.resize(size);
  return out;
}

inline Rgb8Image decode_png(const std::vector<std::uint8_t>& data) {
  png_image p{};
  p.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&p, data.data(), data.size())) {
    throw FormatError(std::string("PNG decode: ") + p.message);
  }
  p.format = PNG_FORMAT_RGB;
  Rgb8Image img{p.width, p.height, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(p))};
  if (!png_image_finish_read(&p, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&p);
    throw FormatError(std::string("PNG decode: ") + p.message);
  }
  return img;
}

// ---------------------------------------------------------------------------
// JPEG (libjpeg)

namespace detail {

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace detail

// Baseline JPEG with 4:2:0 chroma subsampling (libjpeg defaults).
inline std::vector<std::uint8_t> encode_jpeg(const Rgb8Image& img, int quality) {
  if (quality < 1 || quality > 100) throw ConfigError("JPEG quality must be in [1, 100], got " + std::to_string(quality));
  jpeg_compress_struct cinfo{};
  detail::JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_error_exit;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw FormatError(std::string("JPEG encode: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPLE*>(img.pixels.data() + static_cast<std::size_t>(cinfo.next_scanline) * 3 * img.width);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> out(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return out;
}

inline Rgb8Image decode_jpeg(const std::vector<std::uint8_t>& data) {
  jpeg_decompress_struct cinfo{};
  detail::JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_error_exit;
  Rgb8Image img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError(std::string("JPEG decode: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data.data(), static_cast<unsigned long>(data.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.pixels.resize(img.width * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPLE* row = img.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * 3 * img.width;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

// ---------------------------------------------------------------------------
// Format dispatch by content (reading) or extension (writing)

inline Rgb8Image decode_image(const std::vector<std::uint8_t>& data) {
  if (data.size() >= 2 && data[0] == 'P' && data[1] == '6') return decode_ppm(data);
  if (data.size() >= 8 && data[0] == 0x89 && data[1] == 'P' && data[2] == 'N' && data[3] == 'G') return decode_png(data);
  if (data.size() >= 3 && data[0] == 0xFF && data[1] == 0xD8 && data[2] == 0xFF) return decode_jpeg(data);
  throw FormatError("unrecognized image format (expected PPM, PNG or JPEG)");
}

inline std::string lower_extension(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return {};
  std::string ext = path.substr(dot + 1);
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext;
}

inline Rgb8Image read_image(const std::string& path) {
  try {
    return decode_image(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_image(const std::string& path, const Rgb8Image& img, int jpeg_quality = 95) {
  const std::string ext = lower_extension(path);
  if (ext == "png") write_file(path, encode_png(img));
  else if (ext == "jpg" || ext == "jpeg") write_file(path, encode_jpeg(img, jpeg_quality));
  else if (ext == "ppm") write_file(path, encode_ppm(img));
  else throw ConfigError("cannot infer image format from '" + path + "' (use .ppm, .png or .jpg)");
}

}  // namespace woc
