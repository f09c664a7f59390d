// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "picr/evaluation.hpp"
#include "picr/image_io.hpp"
#include "test_support.hpp"

using namespace picr;
using picr::testing::random_tensor;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> v(3 * h * w);
  for (double& x : v) x = u(rng);
  return Tensor({3, h, w}, v);
}

Tensor random_binary_mask(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> v(h * w);
  for (double& x : v) x = static_cast<double>(rng() % 2);
  return Tensor({1, h, w}, v);
}

}  // namespace

TEST_CASE("weighted PSNR hand example") {
  // wmse = (0.8·0.01 + 0.2·0.25) / (0.8 + 0.2) = 0.058.
  const Tensor x({1, 1, 2}, {0.5, 0.5});
  const Tensor xh({1, 1, 2}, {0.6, 1.0});
  const double db = weighted_psnr(x, xh, {0.8, 0.2, Tensor({1, 1, 2}, {1.0, 0.0})});
  CHECK(std::fabs(db - 12.366) <= 1e-3);
}

TEST_CASE("weighted PSNR caps and ROI-only weighting") {
  const Tensor x = random_image(4, 4, 1);
  const Tensor roi = random_binary_mask(4, 4, 2);
  CHECK(weighted_psnr(x, x, {0.5, 0.5, roi}) == kPsnrCap);
  // Errors only outside the ROI with β = 0.
  std::vector<double> v(x.values().begin(), x.values().end());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 16; ++p)
      if (roi[p] == 0.0) v[c * 16 + p] += 0.3;
  CHECK(weighted_psnr(x, Tensor(x.shape(), v), {1.0, 0.0, roi}) == kPsnrCap);
  CHECK(weighted_psnr(x, Tensor(x.shape(), v), {0.0, 1.0, roi}) < 20.0);
}

TEST_CASE("equal weights reduce to plain PSNR for any mask") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor x = random_image(5, 7, 10 + s), xh = random_image(5, 7, 100 + s);
    double sse = 0;
    for (std::size_t i = 0; i < x.size(); ++i) sse += (x[i] - xh[i]) * (x[i] - xh[i]);
    const double plain = -10.0 * std::log10(sse / static_cast<double>(x.size()));
    const double a = 0.1 + 0.3 * static_cast<double>(s);
    CHECK(std::fabs(weighted_psnr(x, xh, {a, a, random_binary_mask(5, 7, s)}) - plain) <= 1e-12);
    CHECK(std::fabs(psnr(x, xh) - plain) <= 1e-12);
  }
}

TEST_CASE("soft masks are binarized at 0.5 for the metric") {
  const Tensor x({1, 1, 3}, {0.0, 0.0, 0.0});
  const Tensor xh({1, 1, 3}, {0.1, 0.2, 0.4});
  const double soft = weighted_psnr(x, xh, {1.0, 0.0, Tensor({1, 1, 3}, {0.5, 0.49, 0.9})});
  // ROI = pixels 0 and 2.
  CHECK(soft == doctest::Approx(-10.0 * std::log10((0.01 + 0.16) / 2.0)).epsilon(1e-12));
}

TEST_CASE("weighted PSNR errors") {
  const Tensor x = random_image(2, 2, 1);
  CHECK_THROWS_AS(weighted_psnr(x, x, {0.0, 0.0, Tensor({1, 2, 2}, 1.0)}), std::invalid_argument);
  CHECK_THROWS_AS(weighted_psnr(x, x, {-1.0, 2.0, Tensor({1, 2, 2}, 1.0)}), std::invalid_argument);
  CHECK_THROWS_AS(weighted_psnr(x, random_image(2, 3, 1), {1.0, 0.0, Tensor({1, 2, 2}, 1.0)}), ShapeError);
  CHECK_THROWS_AS(weighted_psnr(x, x, {1.0, 0.0, Tensor({1, 3, 2}, 1.0)}), ShapeError);
}

TEST_CASE("RD sweep encodes real bitstreams and writes reports") {
  const Codec codec(CodecConfig::toy(), 3);
  Tensor roi({1, 64, 64}, 0.0);
  for (std::size_t y = 16; y < 48; ++y)
    for (std::size_t x = 8; x < 40; ++x) roi.mutable_values()[y * 64 + x] = 1.0;
  std::vector<EvalImage> images{{"b", random_image(64, 64, 7), roi}, {"a", random_image(70, 50, 8), std::nullopt}};
  SweepOptions opt;
  opt.m_values = {0.8, 0.2};
  opt.roi_m = 0.6;
  const auto points = rd_sweep(codec, images, opt);
  REQUIRE(points.size() == 2 + 2 + 4);
  CHECK(points[0].image == "a");
  CHECK(points[0].m_lambda == 0.2);
  CHECK(points[1].m_lambda == 0.8);
  CHECK(points[2].image == "b");
  CHECK_FALSE(points[2].roi_value.has_value());
  for (std::size_t i = 4; i < 8; ++i) {
    REQUIRE(points[i].roi_value.has_value());
    CHECK(*points[i].roi_value == opt.roi_values[i - 4]);
    CHECK(points[i].m_lambda == 0.6);
  }
  for (const auto& p : points) {
    CHECK(p.bpp > 0);
    CHECK(p.bytes > kHeaderBytes);
    const double pixels = p.image == "a" ? 70.0 * 50.0 : 64.0 * 64.0;
    CHECK(p.bpp == doctest::Approx(static_cast<double>(p.bytes) * 8.0 / pixels).epsilon(1e-12));
    const double est_bytes = p.estimated_bpp * pixels / 8.0;
    CHECK(std::fabs(static_cast<double>(p.bytes) - est_bytes) <= 0.02 * est_bytes + 64.0);
    CHECK(std::isfinite(p.wpsnr_db));
    CHECK(p.ms_encode >= 0);
  }

  const auto dir = std::filesystem::temp_directory_path() / "picr_eval_report";
  std::filesystem::remove_all(dir);
  write_rd_report(points, dir);
  std::ifstream csv(dir / "rd.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "image,m_lambda,bpp,wpsnr_db,bytes,ms_encode,ms_decode");
  std::size_t rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows == 4);
  std::ifstream js(dir / "rd.json");
  CHECK(nlohmann::json::parse(js).size() == 8);
  CHECK(std::filesystem::exists(dir / "roi_sweep.csv"));
  CHECK(std::filesystem::file_size(dir / "rd.svg") > 100);
  std::filesystem::remove_all(dir);
}

TEST_CASE("conv MAC hand example: 216 per pixel") {
  CHECK(conv_macs(16, 16, 3, 8, 3) == 55296);
  CHECK(conv_macs(16, 16, 3, 8, 3) / 256 == 216);
  MacTally tally;
  {
    MacRecorder rec(tally);
    ops::conv2d(Tensor({3, 16, 16}), Tensor({8, 3, 3, 3}), Tensor({8}), 1, 1);
  }
  CHECK(tally.by_kind["conv"] == conv_macs(16, 16, 3, 8, 3));
}

TEST_CASE("single-layer closed forms agree with the instrumented kernels") {
  std::mt19937_64 rng(1);
  MacTally t;
  {
    MacRecorder rec(t);
    ops::conv2d(Tensor({4, 9, 7}), Tensor({5, 4, 3, 3}), Tensor(), 2, 1);
    ops::conv_transpose2d(Tensor({4, 5, 3}), Tensor({4, 6, 3, 3}), Tensor(), 2, 1, 1);
    ops::linear(Tensor({11, 6}), Tensor({6, 9}), Tensor());
    prompted_window_attention(random_tensor({3, 16, 8}, rng), random_tensor({3, 4, 8}, rng),
                              AttentionWeights::init(8, 2, 4, true, rng), 4);
  }
  CHECK(t.by_kind["conv"] == conv_macs(5, 4, 4, 5, 3));
  CHECK(t.by_kind["conv_transpose"] == conv_transpose_macs(5, 3, 4, 6, 3));
  CHECK(t.by_kind["attention"] == 3 * attention_macs(16, 4, 8));
  // Linear tally also holds the three attention projections.
  CHECK(t.by_kind["linear"] == 11 * 6 * 9 + 3 * (16 + 20 + 20) * 64);
}

TEST_CASE("closed-form profile matches the instrumented model on every layer type") {
  CodecConfig unshared = CodecConfig::toy();
  unshared.share_prompts = false;
  CodecConfig small_window = CodecConfig::toy();
  small_window.window = 4;
  small_window.swin_layers = 3;
  struct Case {
    CodecConfig cfg;
    std::size_t h, w;
  };
  for (const Case& c : {Case{CodecConfig::toy(), 64, 64}, Case{CodecConfig::toy(), 128, 64},
                        Case{unshared, 64, 128}, Case{small_window, 100, 70}}) {
    const Codec codec(c.cfg, 1);
    const ComplexityProfile prof = profile_complexity(c.cfg, c.h, c.w);
    const MacTally tally = measure_macs(codec, c.h, c.w);
    CHECK(prof.by_kind == tally.by_kind);
    CHECK(prof.total_macs == tally.total());
    for (const char* kind : {"conv", "conv_transpose", "linear", "attention"}) CHECK(prof.by_kind.count(kind) == 1);
    CHECK(prof.kmacs_per_pixel ==
          doctest::Approx(static_cast<double>(prof.total_macs) / static_cast<double>(c.h * c.w) / 1000.0));
  }
}

TEST_CASE("MACs per pixel do not depend on resolution for large inputs") {
  const auto a = profile_complexity(CodecConfig::toy(), 512, 512);
  const auto b = profile_complexity(CodecConfig::toy(), 1024, 1024);
  CHECK(a.kmacs_per_pixel == doctest::Approx(b.kmacs_per_pixel).epsilon(1e-12));
  CHECK(b.total_macs == 4 * a.total_macs);
}

TEST_CASE("attention layer parameter count: 288 at d = 8") {
  CHECK(attention_projection_params(8) == 4 * (64 + 8));
  CHECK(attention_projection_params(8) == 288);
  Rng rng(1);
  const SwinLayer layer(SwinLayerConfig{8, 2, 4, 2, false}, rng);
  ParameterList ps;
  layer.collect(ps, "l");
  std::size_t n = 0;
  for (const auto& p : ps) {
    const bool proj = p.name.find(".attn.w_") != std::string::npos || p.name.find(".attn.b_") != std::string::npos ||
                      p.name.rfind("l.proj.", 0) == 0;
    if (proj) n += p.tensor.size();
  }
  CHECK(n == 288);
}

TEST_CASE("prompt attention map: uniform scores give S_P/(S_I+S_P)") {
  CodecConfig cfg = CodecConfig::toy();
  cfg.window = 4;
  const Codec codec(cfg, 2);
  for (auto& p : codec.parameters()) {
    if (p.name.rfind("g_a.stage0.layer0.attn.", 0) != 0) continue;
    Tensor t = p.tensor;
    for (double& v : t.mutable_values()) v = 0.0;
  }
  const auto cond = ConditioningInput::make(random_image(64, 64, 3), Tensor({1, 64, 64}, 1.0), 0.5);
  const auto maps = prompt_attention_map(codec, cond, 0);
  REQUIRE(maps.size() == cfg.swin_layers);
  CHECK(maps[0].shape() == Shape{1, 32, 32});
  for (double v : maps[0].values()) REQUIRE(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("prompt attention maps are bounded on both sides of the codec") {
  const Codec codec(CodecConfig::toy(), 4);
  const auto cond = ConditioningInput::make(random_image(64, 128, 5), Tensor({1, 64, 128}, 1.0), 0.3);
  for (std::size_t s = 0; s < 4; ++s) {
    for (auto side : {CodecSide::Encoder, CodecSide::Decoder}) {
      const auto maps = prompt_attention_map(codec, cond, s, side);
      const std::size_t gh = side == CodecSide::Encoder ? 64 >> (s + 1) : 4 << (s + 1);
      for (const auto& m : maps) {
        REQUIRE(m.shape() == Shape{1, gh, 2 * gh});
        for (double v : m.values()) REQUIRE((v > 0.0 && v < 1.0));
      }
    }
  }
  CHECK_THROWS_AS(prompt_attention_map(codec, cond, 4), std::out_of_range);

  const auto path = std::filesystem::temp_directory_path() / "picr_heat.png";
  write_heat_map(path, prompt_attention_map(codec, cond, 1)[0]);
  const Tensor back = read_image(path, 1);
  CHECK(back.shape() == Shape{1, 16, 32});
  std::filesystem::remove(path);
}

TEST_CASE("prompt mass map refuses attention without prompt columns") {
  std::mt19937_64 rng(1);
  AttentionProbe probe;
  prompted_window_attention(random_tensor({1, 16, 8}, rng), Tensor(), AttentionWeights::init(8, 2, 4, false, rng), 4,
                            nullptr, &probe);
  probe.layout = {4, 4, 4, 0};
  CHECK_THROWS_AS(prompt_mass_map(probe, 4, 4), std::logic_error);
}
