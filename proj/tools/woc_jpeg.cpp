// Baseline JPEG codec for the RD harness (libjpeg, 4:2:0, standard tables).
//
//   woc-jpeg encode -q <1..100> <in image> <out.jpg>
//   woc-jpeg decode <in.jpg> <out image>
//   woc-jpeg header-bytes <in.jpg>     bytes before the entropy-coded data

#include <CLI11.hpp>

#include <iostream>

#include "woc/image_io.hpp"

namespace {

// Offset of the first byte after the first SOS segment.
std::size_t jpeg_header_bytes(const std::vector<std::uint8_t>& d) {
  std::size_t pos = 2;
  while (pos + 4 <= d.size()) {
    if (d[pos] != 0xFF) throw woc::FormatError("JPEG: marker expected at byte " + std::to_string(pos));
    const std::uint8_t marker = d[pos + 1];
    const std::size_t len = (std::size_t{d[pos + 2]} << 8) | d[pos + 3];
    pos += 2 + len;
    if (marker == 0xDA) return pos;
  }
  throw woc::FormatError("JPEG: no SOS marker");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"JPEG baseline codec"};
  app.require_subcommand(1);
  int quality = 75;
  std::string in, out;
  auto* enc = app.add_subcommand("encode", "compress an image to JPEG");
  enc->add_option("-q,--quality", quality, "quality factor")->check(CLI::Range(1, 100));
  enc->add_option("in", in)->required();
  enc->add_option("out", out)->required();
  auto* dec = app.add_subcommand("decode", "decompress a JPEG to PPM/PNG");
  dec->add_option("in", in)->required();
  dec->add_option("out", out)->required();
  auto* hdr = app.add_subcommand("header-bytes", "print the header length of a JPEG file");
  hdr->add_option("in", in)->required();
  CLI11_PARSE(app, argc, argv);

  try {
    if (*enc) {
      woc::write_file(out, woc::encode_jpeg(woc::read_image(in), quality));
    } else if (*dec) {
      woc::write_image(out, woc::decode_jpeg(woc::read_file(in)));
    } else {
      std::cout << jpeg_header_bytes(woc::read_file(in)) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "woc-jpeg: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
