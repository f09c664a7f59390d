// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "picr/codec.hpp"
#include "picr/conditioning.hpp"
#include "test_support.hpp"

using namespace picr;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(3 * h * w);
  for (double& x : v) x = u(rng);
  return Tensor({3, h, w}, std::move(v));
}

Tensor random_plane(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(h * w);
  for (double& x : v) x = u(rng);
  return Tensor({1, h, w}, std::move(v));
}

const Codec& toy_codec() {
  static const Codec codec(CodecConfig::toy(), 7);
  return codec;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

// Input-pixel interval seen by output index q of a stack of k3/pad1 convs
// with the given strides (first entry applied first).
std::pair<long, long> footprint(long q, const std::vector<long>& strides) {
  long lo = q, hi = q;
  for (auto it = strides.rbegin(); it != strides.rend(); ++it) {
    lo = lo * *it - 1;
    hi = hi * *it + 1;
  }
  return {lo, hi};
}

}  // namespace

TEST_CASE("toy configuration stays under a million parameters") {
  CHECK(toy_codec().parameter_count() <= 1000000);
  CHECK_NOTHROW(CodecConfig{}.validate());
  CodecConfig bad = CodecConfig::toy();
  bad.heads[1] = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = CodecConfig::toy();
  bad.window = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("configuration JSON round trip") {
  CodecConfig c = CodecConfig::toy();
  c.share_prompts = false;
  c.window = 4;
  CHECK(CodecConfig::from_json(c.to_json()) == c);
  CHECK(CodecConfig::from_json(R"({"preset": "toy"})") == CodecConfig::toy());
  CHECK(CodecConfig::from_json("{}") == CodecConfig{});
  CHECK_THROWS_AS(CodecConfig::from_json(R"({"window": "big"})"), std::invalid_argument);
}

TEST_CASE("encoder prompt pyramid follows the stage resolutions") {
  const auto& codec = toy_codec();
  auto cond = ConditioningInput::make(random_image(64, 64, 1), Tensor({1, 64, 64}, 1.0), 1.0);
  const auto p = codec.encoder_prompts(cond);
  const auto& pc = codec.config().prompt_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(p[i].shape() == Shape{pc[i], 64u >> i, 64u >> i});
  }
  const auto again = codec.encoder_prompts(cond);
  for (std::size_t i = 0; i < 4; ++i) CHECK(same(p[i], again[i]));
}

TEST_CASE("encoder prompts change only inside the receptive footprint of an edit") {
  const auto& codec = toy_codec();
  Tensor img = random_image(64, 64, 2);
  Tensor edited = img.detach();
  // Region R: rows 20..27, cols 36..43 of every channel.
  const long r0 = 20, r1 = 27, c0 = 36, c1 = 43;
  auto ev = edited.mutable_values();
  for (std::size_t c = 0; c < 3; ++c)
    for (long y = r0; y <= r1; ++y)
      for (long x = c0; x <= c1; ++x) ev[c * 4096 + y * 64 + x] = 1.0 - ev[c * 4096 + y * 64 + x];
  const Tensor mask = random_plane(64, 64, 3);
  const auto pa = codec.encoder_prompts(ConditioningInput::make(img, mask, 0.3));
  const auto pb = codec.encoder_prompts(ConditioningInput::make(edited, mask, 0.3));

  std::vector<long> strides{1};
  for (std::size_t level = 0; level < 4; ++level) {
    if (level > 0) strides.push_back(2);
    const std::size_t c = pa[level].dim(0), n = pa[level].dim(1);
    std::size_t changed_inside = 0, changed_outside = 0;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const auto [ylo, yhi] = footprint(static_cast<long>(y), strides);
        const auto [xlo, xhi] = footprint(static_cast<long>(x), strides);
        const bool inside = yhi >= r0 && ylo <= r1 && xhi >= c0 && xlo <= c1;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t i = (ch * n + y) * n + x;
          if (pa[level][i] != pb[level][i]) ++(inside ? changed_inside : changed_outside);
        }
      }
    CHECK(changed_outside == 0);
    CHECK(changed_inside > 0);
  }
}

TEST_CASE("decoder prompts on constant input repeat with the upsampling stride") {
  // A stride-2 transposed convolution feeds even and odd outputs different
  // taps, so a constant input yields a 2^level periodic map away from borders;
  // the first (stride-1) level is exactly constant.
  const auto& codec = toy_codec();
  const std::size_t g = 16;
  const Tensor y_hat({codec.config().latent_channels, g, g}, 0.0);
  const auto p = codec.decoder_prompts(y_hat, Tensor({1, g, g}, 0.6));
  std::size_t margin = 1;
  for (std::size_t level = 0; level < 4; ++level) {
    const std::size_t c = p[level].dim(0), n = p[level].dim(1);
    const std::size_t period = std::size_t{1} << level;
    REQUIRE(n == g << level);
    const std::size_t base = (n / 2 / period) * period;  // interior cell aligned to the period
    double worst = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = margin; y < n - margin; ++y)
        for (std::size_t x = margin; x < n - margin; ++x) {
          const std::size_t ry = base + y % period, rx = base + x % period;
          worst = std::max(worst, std::fabs(p[level][(ch * n + y) * n + x] - p[level][(ch * n + ry) * n + rx]));
        }
    CHECK(worst < 1e-12);
    margin = 2 * margin + 2;
  }
}

TEST_CASE("decoder prompts respond to the rate parameter") {
  const auto& codec = toy_codec();
  Rng rng(4);
  const Tensor y_hat = picr::testing::random_tensor({codec.config().latent_channels, 4, 4}, rng, 2.0);
  const auto a = codec.decoder_prompts(y_hat, Tensor({1, 4, 4}, 0.2));
  const auto b = codec.decoder_prompts(y_hat, Tensor({1, 4, 4}, 0.9));
  const auto a2 = codec.decoder_prompts(y_hat, Tensor({1, 4, 4}, 0.2));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK_FALSE(same(a[i], b[i]));
    CHECK(same(a[i], a2[i]));
  }
  CHECK_THROWS_AS(codec.decoder_prompts(y_hat, Tensor({1, 2, 2}, 0.2)), ShapeError);
}

TEST_CASE("analysis grid shapes") {
  const auto& codec = toy_codec();
  const auto& c = codec.config();
  auto cond = ConditioningInput::make(random_image(256, 256, 5), Tensor({1, 256, 256}, 1.0), 0.5);
  const auto b = codec.analyze(cond, Mode::Eval);
  CHECK(b.y.shape() == Shape{c.latent_channels, 16, 16});
  CHECK(b.z.shape() == Shape{c.hyper_channels, 4, 4});
  CHECK(b.mu.shape() == b.y.shape());
  CHECK(b.sigma.shape() == b.y.shape());

  auto unpadded = ConditioningInput::make(random_image(48, 64, 5), Tensor({1, 48, 64}, 1.0), 0.5);
  CHECK_THROWS_AS(codec.analyze(unpadded, Mode::Eval), ShapeError);
  CHECK_THROWS_AS(ConditioningInput::make(random_image(64, 64, 5), Tensor({1, 32, 64}, 1.0), 0.5), ShapeError);
}

TEST_CASE("quantized latents in both modes") {
  const auto& codec = toy_codec();
  auto cond = ConditioningInput::make(random_image(64, 128, 6), random_plane(64, 128, 7), 0.4);
  const auto e = codec.analyze(cond, Mode::Eval);
  for (std::size_t i = 0; i < e.y_hat.size(); ++i) {
    const double r = e.y_hat[i] - e.mu[i];
    CHECK(std::fabs(r - std::round(r)) < 1e-9);
    CHECK(e.sigma[i] >= codec.config().sigma_min);
  }
  for (double v : e.z_hat.values()) CHECK(v == std::round(v));

  Rng rng(8);
  const auto t = codec.analyze(cond, Mode::Train, &rng);
  for (std::size_t i = 0; i < t.y.size(); ++i) CHECK(std::fabs(t.y_hat[i] - t.y[i]) <= 0.5);
  for (std::size_t i = 0; i < t.z.size(); ++i) CHECK(std::fabs(t.z_hat[i] - t.z[i]) <= 0.5);
}

TEST_CASE("synthesis is deterministic and clamped at evaluation") {
  const auto& codec = toy_codec();
  Rng rng(9);
  const Tensor y_hat = picr::testing::random_tensor({codec.config().latent_channels, 4, 4}, rng, 3.0);
  const Tensor small({1, 4, 4}, 0.5);
  const Tensor a = codec.synthesize(y_hat, small, Mode::Eval);
  const Tensor b = codec.synthesize(y_hat, small, Mode::Eval);
  CHECK(a.shape() == Shape{3, 64, 64});
  CHECK(same(a, b));
  for (double v : a.values()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("forward pass is finite over rate and mask extremes") {
  const auto& codec = toy_codec();
  const Tensor img = random_image(64, 64, 10);
  const std::array<Tensor, 3> masks{Tensor({1, 64, 64}, 0.0), random_plane(64, 64, 11), Tensor({1, 64, 64}, 1.0)};
  Rng rng(12);
  for (double m : {0.0, 0.5, 1.0})
    for (const auto& mask : masks)
      for (Mode mode : {Mode::Train, Mode::Eval}) {
        const auto r = codec.forward(ConditioningInput::make(img, mask, m), mode, &rng);
        CHECK(std::isfinite(r.bpp.item()));
        CHECK(r.bpp.item() > 0.0);
        bool finite = true;
        for (double v : r.reconstruction.values()) finite = finite && std::isfinite(v);
        CHECK(finite);
      }
}

TEST_CASE("gradients reach every sub-network") {
  Codec codec(CodecConfig::toy(), 13);
  auto cond = ConditioningInput::make(random_image(64, 64, 14), random_plane(64, 64, 15), 0.7);
  Rng rng(16);
  const auto r = codec.forward(cond, Mode::Train, &rng);
  const Tensor loss = ops::add(r.bpp, ops::mean(ops::mul_broadcast(ops::square(ops::sub(r.reconstruction, cond.image)),
                                                                    cond.roi_mask)));
  backward(loss);
  std::map<std::string, double> norm;
  for (const auto& p : codec.parameters()) {
    const std::string group = p.name.substr(0, p.name.find('.'));
    double s = 0.0;
    for (double g : p.tensor.grad()) s += g * g;
    norm[group] += s;
  }
  for (const char* group : {"g_a", "g_s", "h_a", "h_s", "p_a", "p_s", "prior"}) {
    INFO(group);
    CHECK(norm[group] > 0.0);
  }
}

TEST_CASE("prompt-free path leaves prompt networks without gradient") {
  Codec codec(CodecConfig::toy(), 17);
  auto cond = ConditioningInput::make(random_image(64, 64, 18), Tensor({1, 64, 64}, 1.0), 1.0);
  Rng rng(19);
  const auto r = codec.forward(cond, Mode::Train, &rng, false);
  backward(ops::add(r.bpp, ops::mean(ops::square(ops::sub(r.reconstruction, cond.image)))));
  for (const auto& p : codec.parameters()) {
    if (p.name.rfind("p_a.", 0) == 0 || p.name.rfind("p_s.", 0) == 0) CHECK_FALSE(p.tensor.has_grad());
  }
}

TEST_CASE("every prompted block sees one prompt token per four image tokens") {
  const auto& codec = toy_codec();
  auto cond = ConditioningInput::make(random_image(128, 64, 20), Tensor({1, 128, 64}, 1.0), 0.5);
  StageProbes enc, dec;
  const auto b = codec.analyze(cond, Mode::Eval, nullptr, true, &enc);
  codec.synthesize(b.y_hat, Tensor({1, 8, 4}, 0.5), Mode::Eval, true, &dec);
  for (const auto* probes : {&enc, &dec}) {
    for (const auto& stage : *probes) {
      REQUIRE(stage.size() == codec.config().swin_layers);
      for (const auto& p : stage) {
        CHECK(p.image_tokens > 0);
        CHECK(p.total_tokens - p.image_tokens == p.image_tokens / 4);
        CHECK(p.image_tokens % 4 == 0);
      }
    }
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "picr_codec_test";
  std::filesystem::create_directories(dir);
  CodecConfig cfg = CodecConfig::toy();
  cfg.share_prompts = false;
  Codec a(cfg, 21);
  a.save(dir / "a.ckpt");
  const Codec b = Codec::load(dir / "a.ckpt");
  CHECK(b.config() == cfg);
  const auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(same(pa[i].tensor, pb[i].tensor));
  }
  auto cond = ConditioningInput::make(random_image(64, 64, 22), Tensor({1, 64, 64}, 1.0), 0.5);
  CHECK(same(a.forward(cond, Mode::Eval).reconstruction, b.forward(cond, Mode::Eval).reconstruction));

  // Truncated and foreign files are rejected.
  std::filesystem::resize_file(dir / "a.ckpt", std::filesystem::file_size(dir / "a.ckpt") - 9);
  CHECK_THROWS(Codec::load(dir / "a.ckpt"));
  { std::ofstream(dir / "junk.ckpt") << "hello"; }
  CHECK_THROWS(Codec::load(dir / "junk.ckpt"));
  CHECK_THROWS(Codec::load(dir / "missing.ckpt"));
  std::filesystem::remove_all(dir);
}
