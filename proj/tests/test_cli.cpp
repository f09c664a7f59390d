// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "cli.hpp"
#include "picr/bitstream.hpp"
#include "picr/evaluation.hpp"
#include "picr/image_io.hpp"

using namespace picr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = picr::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

Tensor test_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  std::vector<double> v(3 * h * w);
  for (double& x : v) x = u(rng) / 255.0;  // exactly representable in 8 bits
  return Tensor({3, h, w}, v);
}

}  // namespace

TEST_CASE("usage errors exit with code 2 and print usage") {
  Run r = invoke({"profile", "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"frobnicate"}).code == 2);
  CHECK(invoke({"encode", "--image", "x.png"}).code == 2);  // missing required options
  CHECK(invoke({"--help"}).code == 0);
}

TEST_CASE("profile passes the closed-form counts through") {
  const Run r = invoke({"profile", "--size", "128x192"});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  const auto prof = profile_complexity(CodecConfig::toy(), 128, 192);
  CHECK(j["kmacs_per_pixel"].get<double>() == prof.kmacs_per_pixel);
  CHECK(j["total_macs"].get<std::uint64_t>() == prof.total_macs);
  CHECK(j["params"].get<std::size_t>() == Codec(CodecConfig::toy()).parameter_count());
  CHECK(invoke({"profile", "--size", "abc"}).code == 2);
}

TEST_CASE("encode then decode on a seeded checkpoint round-trips the latent") {
  TempDir dir("picr_cli_roundtrip");
  REQUIRE(invoke({"init", "--seed", "11", "--out", dir / "toy.ckpt"}).code == 0);
  const Tensor img = test_image(70, 90, 3);
  write_image(dir / "in.png", img);
  const Run enc = invoke({"encode", "--image", dir / "in.png", "--m", "0.4", "--ckpt", dir / "toy.ckpt", "--out", dir / "a.picr"});
  REQUIRE(enc.code == 0);
  const json ej = json::parse(enc.out);
  CHECK(ej["bytes"].get<std::size_t>() == fs::file_size(dir / "a.picr"));

  const Run dec = invoke({"decode", "--in", dir / "a.picr", "--ckpt", dir / "toy.ckpt", "--out", dir / "out.png"});
  REQUIRE(dec.code == 0);
  CHECK(json::parse(dec.out)["height"] == 70);
  CHECK(read_image(dir / "out.png", 3).shape() == Shape{3, 70, 90});

  // Encoder-side latent from the library equals the one recovered from the CLI's file.
  const Codec codec = Codec::load(dir / "toy.ckpt");
  const CodingTables tables(codec);
  const EncodeResult lib = encode_image(codec, tables, img, Tensor({1, 70, 90}, 1.0), 0.4);
  const auto bytes = read_bytes(dir / "a.picr");
  CHECK(bytes == lib.bytes);
  const DecodeResult back = decode_image(codec, tables, bytes);
  CHECK(std::equal(back.y_hat.values().begin(), back.y_hat.values().end(), lib.y_hat.values().begin()));
}

TEST_CASE("structured errors") {
  TempDir dir("picr_cli_errors");
  REQUIRE(invoke({"init", "--out", dir / "toy.ckpt"}).code == 0);
  write_image(dir / "in.png", test_image(64, 64, 1));

  Run r = invoke({"encode", "--image", dir / "in.png", "--m", "0.5", "--ckpt", dir / "missing.ckpt", "--out", dir / "a.picr"});
  CHECK(r.code != 0);
  CHECK(json::parse(r.err)["error"].contains("message"));

  r = invoke({"encode", "--image", dir / "in.png", "--m", "1.5", "--ckpt", dir / "toy.ckpt", "--out", dir / "a.picr"});
  CHECK(r.code == 2);

  write_image(dir / "small_mask.png", Tensor({1, 32, 32}, 1.0));
  r = invoke({"encode", "--image", dir / "in.png", "--mask", dir / "small_mask.png", "--m", "0.5", "--ckpt",
           dir / "toy.ckpt", "--out", dir / "a.picr"});
  CHECK(r.code != 0);
  CHECK(json::parse(r.err)["error"]["kind"] == "shape");

  REQUIRE(invoke({"encode", "--image", dir / "in.png", "--m", "0.5", "--ckpt", dir / "toy.ckpt", "--out", dir / "a.picr"})
              .code == 0);
  auto bytes = read_bytes(dir / "a.picr");
  bytes.resize(kHeaderBytes);
  write_bytes(dir / "t.picr", bytes);
  r = invoke({"decode", "--in", dir / "t.picr", "--ckpt", dir / "toy.ckpt", "--out", dir / "t.png"});
  CHECK(r.code == 4);
  CHECK(json::parse(r.err)["error"]["kind"] == "truncated_stream");
  CHECK_FALSE(fs::exists(dir / "t.png"));

  bytes = read_bytes(dir / "a.picr");
  bytes[0] = 'X';
  write_bytes(dir / "m.picr", bytes);
  CHECK(invoke({"decode", "--in", dir / "m.picr", "--ckpt", dir / "toy.ckpt", "--out", dir / "m.png"}).code == 4);
}

TEST_CASE("eval with alpha=1, beta=0 reports ROI-only PSNR") {
  TempDir dir("picr_cli_eval");
  REQUIRE(invoke({"init", "--seed", "2", "--out", dir / "toy.ckpt"}).code == 0);
  fs::create_directories(dir.path / "images");
  fs::create_directories(dir.path / "masks");
  const Tensor img = test_image(64, 64, 9);
  write_image(dir / "images/pic.png", img);
  Tensor mask({1, 64, 64}, 0.0);
  for (std::size_t i = 0; i < 64 * 32; ++i) mask.mutable_values()[i] = 1.0;
  write_image(dir / "masks/pic.png", mask);

  const Run r = invoke({"eval", "--images", dir / "images", "--masks", dir / "masks", "--ckpt", dir / "toy.ckpt",
                     "--m-grid", "0.3", "--alpha", "1", "--beta", "0", "--report", dir / "report"});
  REQUIRE(r.code == 0);
  std::ifstream js(dir / "report/rd.json");
  const json points = json::parse(js);
  REQUIRE(points.size() == 5);  // one grid point + four ROI values

  const Codec codec = Codec::load(dir / "toy.ckpt");
  const CodingTables tables(codec);
  const EncodeResult enc = encode_image(codec, tables, img, mask, 0.3);
  const DecodeResult dec = decode_image(codec, tables, enc.bytes);
  const double roi_only = weighted_psnr(img, dec.image, {1.0, 0.0, mask});
  CHECK(points[0]["wpsnr_db"].get<double>() == doctest::Approx(roi_only).epsilon(1e-12));
  CHECK(points[0]["bytes"].get<std::size_t>() == enc.bytes.size());

  CHECK(invoke({"eval", "--images", dir / "images", "--ckpt", dir / "toy.ckpt", "--m-grid", "0.3,x", "--report",
             dir / "r2"})
            .code == 2);
}

TEST_CASE("train runs a config end to end") {
  TempDir dir("picr_cli_train");
  {
    std::ofstream cfg(dir / "cfg.json");
    cfg << json{{"codec", {{"preset", "toy"}}},
                {"output_dir", dir / "run"},
                {"dataset", {{"synthetic", {{"count", 2}, {"size", 64}}}}},
                {"stages", json::array({{{"stage", 1}, {"steps", 1}, {"crop", 64}},
                                        {{"stage", 2}, {"steps", 1}, {"crop", 64}}})}}
               .dump();
  }
  const Run r = invoke({"train", "--config", dir / "cfg.json"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(json::parse(r.out)["checkpoint"].get<std::string>()));
  CHECK(invoke({"train", "--config", dir / "nope.json"}).code == 2);
}
