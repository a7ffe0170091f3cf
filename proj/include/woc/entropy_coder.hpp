#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "woc/errors.hpp"
#include "woc/quantize.hpp"

namespace woc {

// Bit-plane tensor dimensions needed to decode a payload.
struct BitplaneDims {
  int bits = 6;
  std::size_t channels = 0, height = 0, width = 0;

  std::size_t bit_count() const { return static_cast<std::size_t>(bits) * channels * height * width; }
  friend bool operator==(const BitplaneDims&, const BitplaneDims&) = default;
};

inline BitplaneDims dims_of(const BitplaneTensor& b) { return {b.bits, b.channels, b.height, b.width}; }

struct CodedBitstream {
  std::vector<std::uint8_t> payload;
  std::uint64_t length_bits = 0;
  BitplaneDims dims;
};

struct BitPosition {
  std::size_t plane = 0, channel = 0, row = 0, col = 0;
};

inline constexpr std::uint8_t kOutOfBounds = 2;

// Causal template of one bit: left, above, above-left, above-right neighbors
// in the same plane and channel, plus the bits of all more significant planes
// at the same location, packed MSB first.
struct ContextId {
  int plane = 0;
  std::array<std::uint8_t, 4> neighbors{};
  std::uint32_t ancestors = 0;

  std::uint32_t neighbor_code() const {
    return neighbors[0] + 3u * neighbors[1] + 9u * neighbors[2] + 27u * neighbors[3];
  }
  // Plane p owns 81 * 2^p consecutive slots starting at 81 * (2^p - 1).
  std::uint32_t index() const { return 81u * ((1u << plane) - 1u) + ancestors * 81u + neighbor_code(); }

  friend bool operator==(const ContextId&, const ContextId&) = default;
};

inline std::size_t context_count(int bits) { return 81u * ((std::size_t{1} << bits) - 1u); }

// `decoded` (optional) flags bits already known to the decoder; referencing
// any other in-bounds bit throws std::logic_error.
inline ContextId context_of(const BitplaneTensor& b, BitPosition pos, const std::vector<bool>* decoded = nullptr) {
  auto bit = [&](std::size_t p, std::size_t h, std::size_t w) {
    const std::size_t i = b.index(p, pos.channel, h, w);
    if (decoded && !(*decoded)[i]) {
      throw std::logic_error("context_of: causality violation at plane " + std::to_string(p) + " row " +
                             std::to_string(h) + " col " + std::to_string(w));
    }
    return b.data[i];
  };
  const std::size_t p = pos.plane, h = pos.row, w = pos.col;
  ContextId id;
  id.plane = static_cast<int>(p);
  id.neighbors[0] = w > 0 ? bit(p, h, w - 1) : kOutOfBounds;
  id.neighbors[1] = h > 0 ? bit(p, h - 1, w) : kOutOfBounds;
  id.neighbors[2] = h > 0 && w > 0 ? bit(p, h - 1, w - 1) : kOutOfBounds;
  id.neighbors[3] = h > 0 && w + 1 < b.width ? bit(p, h - 1, w + 1) : kOutOfBounds;
  for (std::size_t q = 0; q < p; ++q) id.ancestors = (id.ancestors << 1) | bit(q, h, w);
  return id;
}

// Krichevsky-Trofimov counter; p(1) = (n1 + 1/2) / (n0 + n1 + 1) in 16-bit
// fixed point, clamped to [1, 65535].
struct BitCounter {
  std::uint32_t n0 = 0, n1 = 0;

  std::uint32_t p1_16() const {
    const std::uint64_t num = (2ull * n1 + 1) << 16;
    const std::uint64_t den = 2ull * (static_cast<std::uint64_t>(n0) + n1 + 1);
    const std::uint64_t p = num / den;
    return static_cast<std::uint32_t>(p < 1 ? 1 : (p > 65535 ? 65535 : p));
  }
  void update(unsigned bit) {
    if (bit) ++n1;
    else ++n0;
  }
};

namespace detail {

inline void check_dims(const BitplaneDims& d) {
  check_bits(d.bits);
  if (d.channels == 0 || d.height == 0 || d.width == 0) {
    throw ShapeError("bitplane dims must be positive, got C=" + std::to_string(d.channels) +
                     " H=" + std::to_string(d.height) + " W=" + std::to_string(d.width));
  }
}

inline void check_bitplane(const BitplaneTensor& b) {
  check_dims(dims_of(b));
  if (b.data.size() != dims_of(b).bit_count()) throw ShapeError("bitplane data size does not match its dims");
}

// Visits every bit in coding order: plane, channel, then raster.
template <typename F>
void for_each_position(const BitplaneDims& d, F&& f) {
  for (std::size_t p = 0; p < static_cast<std::size_t>(d.bits); ++p)
    for (std::size_t c = 0; c < d.channels; ++c)
      for (std::size_t h = 0; h < d.height; ++h)
        for (std::size_t w = 0; w < d.width; ++w) f(BitPosition{p, c, h, w});
}

constexpr std::uint32_t kTop = 1u << 24;

class RangeEncoder {
 public:
  void encode(unsigned bit, std::uint32_t p1_16) {
    const auto bound = static_cast<std::uint32_t>((static_cast<std::uint64_t>(range_) * (65536u - p1_16)) >> 16);
    if (!bit) {
      range_ = bound;
    } else {
      low_ += bound;
      range_ -= bound;
    }
    while (range_ < kTop) {
      shift();
      range_ <<= 8;
    }
  }

  // Emits the value in [low, low + range) with the most trailing zero bits,
  // then drops trailing zero bytes; the decoder reads them back as zeros.
  std::vector<std::uint8_t> finish() {
    const std::uint64_t hi = low_ + range_ - 1;
    for (int k = 32; k >= 0; --k) {
      const std::uint64_t mask = (std::uint64_t{1} << k) - 1;
      const std::uint64_t v = (low_ + mask) & ~mask;
      if (v <= hi) {
        low_ = v;
        break;
      }
    }
    for (int i = 0; i < 4; ++i) shift();
    while (!out_.empty() && out_.back() == 0) out_.pop_back();
    return std::move(out_);
  }

 private:
  void shift() {
    if (std::uint64_t carry = low_ >> 32) {
      for (std::size_t i = out_.size(); carry && i-- > 0;) {
        const std::uint64_t sum = out_[i] + carry;
        out_[i] = static_cast<std::uint8_t>(sum);
        carry = sum >> 8;
      }
      low_ &= 0xFFFFFFFFull;
    }
    out_.push_back(static_cast<std::uint8_t>(low_ >> 24));
    low_ = (low_ << 8) & 0xFFFFFFFFull;
  }

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(const std::vector<std::uint8_t>& data) : data_(data) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next();
    if (code_ >= range_) throw DecodeError("range decoder: invalid initial code", 0);
  }

  unsigned decode(std::uint32_t p1_16) {
    const auto bound = static_cast<std::uint32_t>((static_cast<std::uint64_t>(range_) * (65536u - p1_16)) >> 16);
    unsigned bit;
    if (code_ < bound) {
      range_ = bound;
      bit = 0;
    } else {
      code_ -= bound;
      range_ -= bound;
      bit = 1;
    }
    while (range_ < kTop) {
      code_ = (code_ << 8) | next();
      range_ <<= 8;
    }
    return bit;
  }

  std::size_t consumed() const { return pos_; }

 private:
  std::uint32_t next() { return pos_ < data_.size() ? data_[pos_++] : (++pos_, 0u); }

  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
};

}  // namespace detail

// Effective length: whole bytes minus the trailing zero bits of the last one.
inline std::uint64_t payload_length_bits(const std::vector<std::uint8_t>& payload) {
  if (payload.empty()) return 0;
  const unsigned last = payload.back();
  unsigned tz = 0;
  while (tz < 8 && !((last >> tz) & 1u)) ++tz;
  return 8ull * payload.size() - tz;
}

// `trace`, when given, receives the context index of every coded bit.
inline CodedBitstream aac_encode(const BitplaneTensor& b, std::vector<std::uint32_t>* trace = nullptr) {
  detail::check_bitplane(b);
  const BitplaneDims d = dims_of(b);
  std::vector<BitCounter> counters(context_count(d.bits));
  detail::RangeEncoder enc;
  detail::for_each_position(d, [&](BitPosition pos) {
    const std::uint32_t ctx = context_of(b, pos).index();
    if (trace) trace->push_back(ctx);
    const unsigned bit = b.at(pos.plane, pos.channel, pos.row, pos.col) & 1u;
    enc.encode(bit, counters[ctx].p1_16());
    counters[ctx].update(bit);
  });
  CodedBitstream s;
  s.payload = enc.finish();
  s.length_bits = payload_length_bits(s.payload);
  s.dims = d;
  return s;
}

// Throws DecodeError when the payload is inconsistent with its recorded
// length or is not fully consumed by `dims.bit_count()` decoded bits.
inline BitplaneTensor aac_decode(const CodedBitstream& s, const BitplaneDims& dims,
                                 std::vector<std::uint32_t>* trace = nullptr) {
  detail::check_dims(dims);
  if (s.length_bits != payload_length_bits(s.payload)) {
    throw DecodeError("aac_decode: payload of " + std::to_string(s.payload.size()) +
                          " bytes does not match recorded length " + std::to_string(s.length_bits) + " bits",
                      s.payload.size());
  }
  BitplaneTensor b(dims.bits, dims.channels, dims.height, dims.width);
  std::vector<BitCounter> counters(context_count(dims.bits));
  detail::RangeDecoder dec(s.payload);
  detail::for_each_position(dims, [&](BitPosition pos) {
    const std::uint32_t ctx = context_of(b, pos).index();
    if (trace) trace->push_back(ctx);
    const unsigned bit = dec.decode(counters[ctx].p1_16());
    b.at(pos.plane, pos.channel, pos.row, pos.col) = static_cast<std::uint8_t>(bit);
    counters[ctx].update(bit);
  });
  if (dec.consumed() < s.payload.size()) {
    throw DecodeError("aac_decode: " + std::to_string(s.payload.size() - dec.consumed()) +
                          " payload bytes left after the last bit",
                      dims.bit_count());
  }
  return b;
}

inline BitplaneTensor aac_decode(const CodedBitstream& s) { return aac_decode(s, s.dims); }

// Ideal code length of the same scan and model evolution as aac_encode.
inline double estimate_codelength(const BitplaneTensor& b) {
  detail::check_bitplane(b);
  const BitplaneDims d = dims_of(b);
  std::vector<BitCounter> counters(context_count(d.bits));
  double bits = 0.0;
  detail::for_each_position(d, [&](BitPosition pos) {
    const std::uint32_t ctx = context_of(b, pos).index();
    const unsigned bit = b.at(pos.plane, pos.channel, pos.row, pos.col) & 1u;
    const std::uint32_t p1 = counters[ctx].p1_16();
    bits -= std::log2((bit ? p1 : 65536u - p1) / 65536.0);
    counters[ctx].update(bit);
  });
  return bits;
}

}  // namespace woc
