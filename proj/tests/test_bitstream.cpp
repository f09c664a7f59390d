// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "picr/bitstream.hpp"
#include "picr/image_io.hpp"

using namespace picr;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(3 * h * w);
  for (double& x : v) x = u(rng);
  return Tensor({3, h, w}, v);
}

struct Fixture {
  Codec codec{CodecConfig::toy(), 5};
  CodingTables tables{codec};
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

}  // namespace

TEST_CASE("header layout") {
  BitstreamHeader h{64, 300, quantize_rate(0.5)};
  CHECK(h.m_q == 128);
  const auto bytes = h.serialize();
  REQUIRE(bytes.size() == 10);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PICR");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 64);
  CHECK(bytes[7] == 1);
  CHECK(bytes[8] == 44);
  const auto back = BitstreamHeader::parse(bytes);
  CHECK(back.height == 64);
  CHECK(back.width == 300);
  CHECK(back.m_lambda() == 128.0 / 255.0);

  CHECK(quantize_rate(0.0) == 0);
  CHECK(quantize_rate(1.0) == 255);
  CHECK_THROWS(quantize_rate(1.5));

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(BitstreamHeader::parse(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(BitstreamHeader::parse(bad), FormatError);
  CHECK_THROWS_AS(BitstreamHeader::parse(std::span(bytes).first(7)), TruncatedStreamError);
}

TEST_CASE("padding mirrors and cropping restores") {
  std::vector<double> v(2 * 3 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const Tensor t({2, 3, 5}, v);
  const Tensor p = pad_to_multiple(t, 4);
  REQUIRE(p.shape() == Shape{2, 4, 8});
  // Row 3 mirrors row 1; column 5 mirrors column 3.
  CHECK(p[0 * 32 + 3 * 8 + 0] == t[0 * 15 + 1 * 5 + 0]);
  CHECK(p[1 * 32 + 0 * 8 + 5] == t[1 * 15 + 0 * 5 + 3]);
  CHECK(same(crop_chw(p, 3, 5), t));
  CHECK(same(pad_to_multiple(Tensor({1, 64, 64}, 0.5)), Tensor({1, 64, 64}, 0.5)));
}

TEST_CASE("encode and decode agree on the latent") {
  const auto& f = fixture();
  Rng rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{64, 64}, {70, 50}, {128, 64}}) {
    const Tensor img = random_image(h, w, h * 1000 + w);
    const Tensor mask = generate_mask(MaskSpec::random(h + w), h, w);
    const double m = u(rng);
    const auto enc = encode_image(f.codec, f.tables, img, mask, m);
    const auto dec = decode_image(f.codec, f.tables, enc.bytes);
    CHECK(same(enc.y_hat, dec.y_hat));
    CHECK(dec.header.height == h);
    CHECK(dec.header.width == w);
    CHECK(dec.image.shape() == Shape{3, h, w});
    // Every byte is header or chunk framing or range-coder payload: no mask data.
    CHECK(enc.bytes.size() == kHeaderBytes + 2 * 6 + enc.z_payload + enc.y_payload);
    const double est_bytes = enc.estimated_bpp * static_cast<double>(h * w) / 8.0;
    CHECK(static_cast<double>(enc.bytes.size()) <= est_bytes * 1.02 + 64.0);
    CHECK(static_cast<double>(enc.bytes.size()) >= est_bytes * 0.98 - 64.0);
  }
}

TEST_CASE("encoding is deterministic and the mask reaches the latent") {
  const auto& f = fixture();
  const Tensor img = random_image(64, 64, 1);
  const Tensor ones({1, 64, 64}, 1.0);
  const auto a = encode_image(f.codec, f.tables, img, ones, 0.3);
  const auto b = encode_image(f.codec, f.tables, img, ones, 0.3);
  CHECK(a.bytes == b.bytes);
  // The mask reaches the continuous latent (the rounded one may absorb it at random init).
  const Tensor y1 = f.codec.encode_latent(ConditioningInput::make(img, ones, 0.3));
  const Tensor y0 = f.codec.encode_latent(ConditioningInput::make(img, Tensor({1, 64, 64}, 0.0), 0.3));
  CHECK_FALSE(same(y1, y0));
  // Rates that quantize to the same m_q produce the same stream.
  const auto d = encode_image(f.codec, f.tables, img, ones, 0.3 + 0.001);
  CHECK(a.bytes == d.bytes);
}

TEST_CASE("damaged streams raise explicit errors") {
  const auto& f = fixture();
  const auto enc = encode_image(f.codec, f.tables, random_image(64, 64, 2), Tensor({1, 64, 64}, 1.0), 0.8);

  auto tampered = enc.bytes;
  tampered.back() ^= 0xFF;  // y-chunk sentinel
  CHECK_THROWS_AS(decode_image(f.codec, f.tables, tampered), CorruptStreamError);

  const std::vector<std::uint8_t> header_only(enc.bytes.begin(), enc.bytes.begin() + kHeaderBytes);
  CHECK_THROWS_AS(decode_image(f.codec, f.tables, header_only), TruncatedStreamError);

  auto cut = enc.bytes;
  cut.resize(cut.size() - 1);
  CHECK_THROWS_AS(decode_image(f.codec, f.tables, cut), BitstreamError);

  auto extra = enc.bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_image(f.codec, f.tables, extra), CorruptStreamError);

  // A lying chunk length inside an otherwise valid frame.
  auto lengths = enc.bytes;
  lengths[kHeaderBytes + 3] ^= 0x01;
  CHECK_THROWS_AS(decode_image(f.codec, f.tables, lengths), BitstreamError);
}

TEST_CASE("file round trip through a checkpoint") {
  const auto dir = std::filesystem::temp_directory_path() / "picr_bitstream_test";
  std::filesystem::create_directories(dir);
  const auto& f = fixture();
  f.codec.save(dir / "toy.ckpt");
  write_image(dir / "in.png", random_image(40, 72, 3));
  MaskSpec spec;
  spec.kind = MaskKind::Rectangles;
  spec.seed = 4;
  const auto enc = encode_file(dir / "in.png", {std::nullopt, spec}, 0.5, dir / "toy.ckpt", dir / "out.picr");
  CHECK(std::filesystem::file_size(dir / "out.picr") == enc.bytes.size());
  const auto dec = decode_file(dir / "out.picr", dir / "toy.ckpt", dir / "out.png");
  CHECK(same(enc.y_hat, dec.y_hat));
  const Tensor out = read_image(dir / "out.png", 3);
  CHECK(out.shape() == Shape{3, 40, 72});

  // Truncated input: error and no output image.
  auto bytes = read_bytes(dir / "out.picr");
  bytes.resize(kHeaderBytes);
  write_bytes(dir / "short.picr", bytes);
  CHECK_THROWS_AS(decode_file(dir / "short.picr", dir / "toy.ckpt", dir / "short.png"), TruncatedStreamError);
  CHECK_FALSE(std::filesystem::exists(dir / "short.png"));
  CHECK_THROWS(encode_file(dir / "in.png", {}, 0.5, dir / "missing.ckpt", dir / "x.picr"));
  std::filesystem::remove_all(dir);
}
