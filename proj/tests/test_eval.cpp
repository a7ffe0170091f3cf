#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "woc/container.hpp"
#include "woc/eval.hpp"

namespace woc {
namespace {

namespace fs = std::filesystem;

RdCurve line(const std::string& image, double slope, double offset = 0.0, std::vector<double> rates = {0.25, 0.5, 1.0, 1.5, 2.0}) {
  RdCurve c{image, "lin", {}};
  for (double b : rates) c.points.push_back({b, offset + slope * b, 0.0, 0.0, ""});
  return c;
}

Rgb8Image test_image(std::uint64_t seed, std::size_t w = 192, std::size_t h = 176) {
  return to_rgb8(synthetic_image<double>(seed, h, w));
}

std::string scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("woc_test_eval_" + name);
  fs::remove_all(d);
  return d.string();
}

TEST(RdCurve, CleanupSortsDedupsAndEnvelopes) {
  RdCurve c{"a", "x", {{2.0, 0.9, 0, 0, ""}, {1.0, 0.8, 0, 0, ""}, {1.0, 0.85, 0, 0, ""}, {1.5, 0.7, 0, 0, ""}}};
  std::ostringstream log;
  EXPECT_EQ(cleanup_curve(c, &log), 1u);
  ASSERT_EQ(c.points.size(), 3u);
  EXPECT_EQ(c.points[0].bpp, 1.0);
  EXPECT_EQ(c.points[0].quality, 0.85);
  EXPECT_EQ(c.points[1].quality, 0.85);
  EXPECT_EQ(c.points[2].quality, 0.9);
  EXPECT_NE(log.str().find("envelope"), std::string::npos);
}

TEST(RdCurve, InterpolationIsExactAtKnotsAndLinearBetween) {
  auto c = line("a", 0.3, 0.1);
  for (const auto& p : c.points) EXPECT_EQ(interpolate_quality(c, p.bpp), p.quality);
  for (double b = 0.25; b <= 2.0; b += 0.0625) EXPECT_NEAR(interpolate_quality(c, b), 0.1 + 0.3 * b, 1e-12);
  for (double q = 0.175; q <= 0.7; q += 0.01) EXPECT_NEAR(interpolate_bpp(c, q), (q - 0.1) / 0.3, 1e-12);
  EXPECT_THROW(interpolate_quality(c, 2.5), ConfigError);
  EXPECT_THROW(interpolate_bpp(c, 0.05), ConfigError);
}

TEST(RdCurve, InverseTakesSmallestRateOnPlateaus) {
  RdCurve c{"a", "x", {{0.5, 0.6, 0, 0, ""}, {1.0, 0.8, 0, 0, ""}, {2.0, 0.8, 0, 0, ""}, {3.0, 0.9, 0, 0, ""}}};
  EXPECT_EQ(interpolate_bpp(c, 0.8), 1.0);
}

TEST(SweepAverage, LinearCurvesHandComputed) {
  std::vector<RdCurve> curves{line("a", 0.5), line("b", 0.7)};
  auto avg = sweep_average_quality(curves, {1.0});
  ASSERT_EQ(avg.size(), 1u);
  EXPECT_NEAR(avg[0].y, 0.6, 1e-9);

  auto one = sweep_average_quality({line("a", 0.5)}, {0.3, 0.8, 1.7});
  for (const auto& p : one) EXPECT_NEAR(p.y, 0.5 * p.x, 1e-9);
}

TEST(SweepAverage, GridIsClippedToCommonRange) {
  std::vector<RdCurve> curves{line("a", 0.2, 0.1, {0.5, 1.0, 2.0}), line("b", 0.4, 0.0, {1.0, 3.0})};
  std::ostringstream log;
  auto avg = sweep_average_quality(curves, {0.5, 1.0, 1.5, 2.0, 2.5}, &log);
  ASSERT_EQ(avg.size(), 3u);
  EXPECT_NEAR(avg[1].y, 0.5 * ((0.1 + 0.3) + 0.6), 1e-9);
  EXPECT_NE(log.str().find("dropped 2"), std::string::npos);

  std::vector<RdCurve> disjoint{line("a", 0.2, 0.0, {0.1, 0.2}), line("b", 0.2, 0.0, {1.0, 2.0})};
  try {
    sweep_average_quality(disjoint, {0.5});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lin/a"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("lin/b"), std::string::npos);
  }
}

TEST(RelativeSize, SelfRatioIsOneHundredPercent) {
  std::vector<RdCurve> ours{line("a", 0.3, 0.1), line("b", 0.25, 0.2)};
  for (const auto& r : relative_size_at_quality(ours, ours, {0.3, 0.4, 0.5, 0.6})) {
    EXPECT_EQ(r.percent, 100.0) << r.quality;
    EXPECT_EQ(r.images, 2u);
  }
}

TEST(RelativeSize, DoubleRateIsTwoHundredPercent) {
  std::vector<RdCurve> ours{line("a", 0.4)}, theirs{line("a", 0.2, 0.0, {0.5, 1.0, 2.0, 3.0, 4.0})};
  auto r = relative_size_at_quality(ours, theirs, {0.2, 0.35, 0.6});
  for (const auto& p : r) EXPECT_NEAR(p.percent, 200.0, 1e-9);
  EXPECT_EQ(format_relative(65.3, 304.0), "65.3 (304%)");
}

TEST(RelativeSize, HandComputedMixedRatiosAndExclusions) {
  // q = 0.5 b and q = 0.25 b + 0.25; theirs q = 0.25 b for both.
  std::vector<RdCurve> ours{line("a", 0.5), line("b", 0.25, 0.25)};
  std::vector<RdCurve> theirs{line("a", 0.25, 0.0, {0.5, 1, 2, 3, 4}), line("b", 0.25, 0.0, {0.5, 1, 2, 3, 4})};
  auto r = relative_size_at_quality(ours, theirs, {0.5, 1.05});
  // q = 0.5: a 2/1, b 2/1 -> 200%.
  EXPECT_NEAR(r[0].percent, 200.0, 1e-9);
  EXPECT_EQ(r[0].images, 2u);
  // q = 1.05 lies above both of our curves.
  EXPECT_EQ(r[1].images, 0u);
  EXPECT_EQ(r[1].excluded, 2u);
  EXPECT_TRUE(std::isnan(r[1].percent));
  // q = 0.35: a 1.4/0.7 = 2, b 1.4/0.4 = 3.5 -> 275%.
  EXPECT_NEAR(relative_size_at_quality(ours, theirs, {0.35})[0].percent, 275.0, 1e-9);
}

TEST(Grid, ParsesRangesAndLists) {
  auto g = parse_grid("0.25:1:0.25");
  ASSERT_EQ(g.size(), 4u);
  EXPECT_DOUBLE_EQ(g.back(), 1.0);
  EXPECT_EQ(parse_grid("0.1,0.5,2"), (std::vector<double>{0.1, 0.5, 2.0}));
  EXPECT_THROW(parse_grid("1:0:0.1"), ConfigError);
  EXPECT_THROW(parse_grid("a,b"), ConfigError);
  EXPECT_THROW(parse_grid(""), ConfigError);
}

TEST(CodecAdapter, TemplatesQuoteAndValidate) {
  EXPECT_EQ(expand_command("tool -q {q} {in} {out}", "a b.ppm", "it's", 40), "tool -q 40 'a b.ppm' 'it'\\''s'");
  auto a = adapter_from_json(nlohmann::json{{"name", "c"}, {"encode", "x {in} {out}"}, {"decode", "y {in} {out}"},
                                            {"header_bytes", 12}, {"qualities", {1, 2}}});
  EXPECT_EQ(a.header_bytes, 12u);
  EXPECT_EQ(a.qualities, (std::vector<int>{1, 2}));
  EXPECT_THROW(adapter_from_json(nlohmann::json{{"name", "c"}, {"encode", "x"}, {"decode", "y {in} {out}"}}), ConfigError);
}

TEST(RunCodec, IdentityCopyIsLosslessAt24Bpp) {
  auto img = test_image(1);
  auto r = run_codec(identity_adapter(ppm_header(192, 176).size()), img, 0, scratch("identity"));
  ASSERT_TRUE(r.point) << r.error;
  EXPECT_EQ(r.point->bpp, 24.0);
  EXPECT_EQ(r.point->quality, 1.0);
  EXPECT_GE(r.point->encode_ms, 0.0);
  EXPECT_GE(r.point->decode_ms, 0.0);
  EXPECT_EQ(r.decoded, img);
}

TEST(RunCodec, HeaderCorrectionShiftsBppExactly) {
  auto img = test_image(2);
  auto plain = identity_adapter(0), corrected = identity_adapter(0);
  corrected.header_bytes = 100;
  auto a = run_codec(plain, img, 0, scratch("hdr_a")), b = run_codec(corrected, img, 0, scratch("hdr_b"));
  ASSERT_TRUE(a.point && b.point);
  EXPECT_NEAR(a.point->bpp - b.point->bpp, 8.0 * 100 / (192.0 * 176.0), 1e-12);
}

TEST(RunCodec, JpegRateIncreasesWithQuality) {
  auto img = test_image(3);
  auto a = jpeg_adapter(WOC_JPEG_TOOL);
  const auto dir = scratch("jpeg");
  auto lo = run_codec(a, img, 20, dir), hi = run_codec(a, img, 80, dir);
  ASSERT_TRUE(lo.point && hi.point) << lo.error << hi.error;
  EXPECT_LT(lo.point->bpp, hi.point->bpp);
  EXPECT_LT(lo.point->quality, hi.point->quality);
  EXPECT_GT(lo.point->bpp, 0.0);
}

TEST(RunCodec, JpegHeaderConstantMatchesTool) {
  const auto dir = scratch("jpeg_hdr");
  fs::create_directories(dir);
  const auto in = dir + "/in.ppm", out = dir + "/out.jpg", num = dir + "/n.txt";
  write_file(in, encode_ppm(test_image(4)));
  for (int q : {10, 90}) {
    ASSERT_EQ(std::system((std::string(WOC_JPEG_TOOL) + " encode -q " + std::to_string(q) + " " + in + " " + out).c_str()), 0);
    ASSERT_EQ(std::system((std::string(WOC_JPEG_TOOL) + " header-bytes " + out + " > " + num).c_str()), 0);
    const auto text = read_file(num);
    EXPECT_EQ(std::stoul(std::string(text.begin(), text.end())), kJpegHeaderBytes);
  }
}

TEST(RunCodec, FailuresAreRecordedNotThrown) {
  CodecAdapter broken{"broken", "false {in} {out}", "cp {in} {out}", "bin", 0, {1}};
  auto r = run_codec(broken, test_image(5), 1, scratch("broken"));
  EXPECT_FALSE(r.point);
  EXPECT_NE(r.error.find("encode failed"), std::string::npos);
  CodecAdapter garbage{"garbage", "cp {in} {out}", "echo junk > {out}", "bin", 0, {1}};
  r = run_codec(garbage, test_image(5), 1, scratch("garbage"));
  EXPECT_FALSE(r.point);
  EXPECT_NE(r.error.find("undecodable"), std::string::npos);
  r = run_codec(identity_adapter(0), test_image(5, 32, 32), 0, scratch("tiny"));
  EXPECT_FALSE(r.point);
  EXPECT_NE(r.error.find("176"), std::string::npos);
}

TEST(RunWoc, CountsTheWholeContainer) {
  PyramidConfig cfg;
  cfg.scales = 2;
  cfg.scale_channels = {4, 4};
  cfg.extractor_layers = 1;
  cfg.code_channels = 4;
  cfg.reduction = 4;
  CodecModel<float> model(cfg, 3);
  auto img = test_image(6, 180, 178);
  Rgb8Image decoded;
  auto p = run_woc(model, img, MsSsimConfig::evaluation(), ColorWeights::rgb(), &decoded);
  const auto file = encode_image(to_tensor<float>(img), model);
  EXPECT_EQ(p.bpp, 8.0 * static_cast<double>(file.size()) / (180.0 * 178.0));
  EXPECT_EQ(decoded.width, 180u);
  EXPECT_GE(p.quality, 0.0);
  EXPECT_LE(p.quality, 1.0);
}

TEST(RdCsv, FixedHeaderAndRows) {
  std::vector<RdCurve> curves{line("img0", 0.5, 0.0, {1.0})};
  curves[0].points[0].param = "q7";
  std::ostringstream out;
  write_rd_csv(out, curves);
  EXPECT_EQ(out.str(), std::string(kRdHeader) + "\nlin,img0,q7,1,0.5,0.0000,0.0000\n");
}

TEST(Recompression, LosslessFirstPassEqualsPlainCurve) {
  std::vector<Rgb8Image> images{test_image(7), test_image(8)};
  auto a = jpeg_adapter(WOC_JPEG_TOOL);
  a.qualities = {20, 50, 80};
  auto study = recompression_study(a, images, {100}, parse_grid("0.5:3:0.25"), scratch("recompress"));
  ASSERT_EQ(study.size(), 2u);
  EXPECT_EQ(study[0].first_pass, "raw");
  EXPECT_EQ(study[1].first_pass, "100");
  ASSERT_FALSE(study[0].curve.empty());

  std::vector<RdCurve> plain;
  for (std::size_t i = 0; i < images.size(); ++i) {
    RdCurve c{"img" + std::to_string(i), "jpeg", {}};
    for (int q : a.qualities) c.points.push_back(*run_codec(a, images[i], q, scratch("plain")).point);
    cleanup_curve(c);
    plain.push_back(c);
  }
  auto ref = sweep_average_quality(plain, parse_grid("0.5:3:0.25"));
  ASSERT_EQ(ref.size(), study[0].curve.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_EQ(ref[i].x, study[0].curve[i].x);
    EXPECT_EQ(ref[i].y, study[0].curve[i].y);
  }

  std::ostringstream csv;
  write_recompression_csv(csv, study);
  EXPECT_EQ(csv.str().rfind(std::string(kRecompressionHeader) + "\nraw,", 0), 0u);
}

TEST(Recompression, FractionAtOrAboveCountsMatchedGridPoints) {
  RecompressionCurve raw{"raw", {{1, 0.5}, {2, 0.6}, {3, 0.7}}, {}};
  RecompressionCurve other{"50", {{1, 0.55}, {2, 0.6}, {3, 0.65}, {4, 0.9}}, {}};
  EXPECT_DOUBLE_EQ(fraction_at_or_above(other, raw), 2.0 / 3.0);
}

}  // namespace
}  // namespace woc
