#pragma once

#include <zlib.h>

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "woc/binary_io.hpp"
#include "woc/entropy_coder.hpp"
#include "woc/errors.hpp"
#include "woc/pyramid.hpp"
#include "woc/quantize.hpp"

namespace woc {

// Compressed image file, little-endian:
//   "WOC1" | u8 version | u8 bits | u16 C | u16 H | u16 W |
//   u16 image width | u16 image height | u8 pad right | u8 pad bottom |
//   u64 model_id | u32 payload bits | u32 CRC32(payload) | payload
inline constexpr std::uint8_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 34;

struct ContainerHeader {
  std::uint8_t version = kContainerVersion;
  std::uint8_t bits = 6;
  std::uint16_t channels = 0, height = 0, width = 0;
  std::uint16_t image_width = 0, image_height = 0;
  std::uint8_t pad_right = 0, pad_bottom = 0;
  std::uint64_t model_id = 0;
  std::uint32_t payload_bits = 0;
  std::uint32_t crc = 0;

  friend bool operator==(const ContainerHeader&, const ContainerHeader&) = default;
};

struct Container {
  ContainerHeader header;
  std::vector<std::uint8_t> payload;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < data.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(data.size() - off, std::numeric_limits<uInt>::max()));
    crc = crc32(crc, data.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<std::uint8_t> serialize_container(const Container& c) {
  const auto& h = c.header;
  ByteWriter w;
  w.text("WOC1");
  w.u8(h.version);
  w.u8(h.bits);
  w.u16(h.channels);
  w.u16(h.height);
  w.u16(h.width);
  w.u16(h.image_width);
  w.u16(h.image_height);
  w.u8(h.pad_right);
  w.u8(h.pad_bottom);
  w.u64(h.model_id);
  w.u32(h.payload_bits);
  w.u32(h.crc);
  w.bytes(c.payload);
  return w.take();
}

// Structural parse plus CRC check. Model compatibility is checked by
// decode_image.
inline Container parse_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kContainerHeaderBytes) {
    throw FormatError("container: " + std::to_string(bytes.size()) + " bytes is shorter than the header");
  }
  ByteReader r(bytes);
  if (r.text(4) != "WOC1") throw FormatError("container: bad magic");
  Container c;
  auto& h = c.header;
  h.version = r.u8();
  if (h.version != kContainerVersion) throw FormatError("container: unsupported version " + std::to_string(h.version));
  h.bits = r.u8();
  h.channels = r.u16();
  h.height = r.u16();
  h.width = r.u16();
  h.image_width = r.u16();
  h.image_height = r.u16();
  h.pad_right = r.u8();
  h.pad_bottom = r.u8();
  h.model_id = r.u64();
  h.payload_bits = r.u32();
  h.crc = r.u32();
  const std::size_t expected = (static_cast<std::size_t>(h.payload_bits) + 7) / 8;
  if (r.remaining() != expected) {
    throw FormatError("container: header announces " + std::to_string(h.payload_bits) + " payload bits but " +
                      std::to_string(r.remaining()) + " bytes follow");
  }
  auto p = r.bytes(expected);
  c.payload.assign(p.begin(), p.end());
  if (crc32_of(c.payload) != h.crc) throw FormatError("container: payload CRC mismatch");
  if (h.bits < 1 || h.bits > 16 || h.channels == 0 || h.height == 0 || h.width == 0 || h.image_width == 0 ||
      h.image_height == 0) {
    throw FormatError("container: invalid dimensions in header");
  }
  return c;
}

template <typename T>
std::vector<std::uint8_t> encode_image(const Tensor<T>& image, CodecModel<T>& model) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("encode_image: expected 3 x H x W, got " + to_string(image.shape()));
  if (image.dim(1) > 0xFFFF || image.dim(2) > 0xFFFF) throw ShapeError("encode_image: image dims exceed 65535");
  const auto [padded, pd] = pad_to_valid(image, model);
  const auto q = quantize(encode_features(padded, model), model.config().bits);
  const auto coded = aac_encode(bitplane_decompose(q));
  if (coded.length_bits > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("encode_image: payload too large");
  Container c;
  auto& h = c.header;
  h.bits = static_cast<std::uint8_t>(model.config().bits);
  h.channels = static_cast<std::uint16_t>(q.shape[0]);
  h.height = static_cast<std::uint16_t>(q.shape[1]);
  h.width = static_cast<std::uint16_t>(q.shape[2]);
  h.image_width = static_cast<std::uint16_t>(pd.width);
  h.image_height = static_cast<std::uint16_t>(pd.height);
  h.pad_right = static_cast<std::uint8_t>(pd.pad_right);
  h.pad_bottom = static_cast<std::uint8_t>(pd.pad_bottom);
  h.model_id = model.model_id();
  h.payload_bits = static_cast<std::uint32_t>(coded.length_bits);
  c.payload = coded.payload;
  h.crc = crc32_of(c.payload);
  return serialize_container(c);
}

template <typename T>
Tensor<T> decode_image(std::span<const std::uint8_t> bytes, CodecModel<T>& model) {
  const Container c = parse_container(bytes);
  const auto& h = c.header;
  const auto& cfg = model.config();
  if (h.model_id != model.model_id()) throw FormatError("container: encoded with a different model");
  if (h.bits != cfg.bits || h.channels != cfg.code_channels) throw FormatError("container: code layout differs from the model");
  const std::size_t ph = std::size_t{h.image_height} + h.pad_bottom, pw = std::size_t{h.image_width} + h.pad_right;
  if (ph != std::size_t{h.height} * cfg.reduction || pw != std::size_t{h.width} * cfg.reduction ||
      ph % cfg.pad_factor() || pw % cfg.pad_factor()) {
    throw FormatError("container: image, padding and feature dims are inconsistent");
  }
  const BitplaneDims dims{h.bits, h.channels, h.height, h.width};
  BitplaneTensor b;
  try {
    b = aac_decode(CodedBitstream{c.payload, h.payload_bits, dims}, dims);
  } catch (const DecodeError& e) {
    throw FormatError(std::string("container: ") + e.what());
  }
  const auto y = bitplane_compose(b).template to_real<T>();
  return crop(synthesize(y, model), h.image_height, h.image_width);
}

}  // namespace woc
