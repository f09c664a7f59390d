// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "picr/bitstream.hpp"
#include "picr/evaluation.hpp"
#include "picr/image_io.hpp"
#include "picr/training.hpp"

namespace picr::cli {

namespace {

using nlohmann::json;

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ImageIoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw std::invalid_argument("bad m-grid entry '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty m-grid");
  return out;
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) {
      const auto n = std::stoul(text);
      return {n, n};
    }
    return {std::stoul(text.substr(0, x)), std::stoul(text.substr(x + 1))};
  } catch (const std::exception&) {
    throw std::invalid_argument("size must be N or HxW, got '" + text + "'");
  }
}

bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

std::optional<std::filesystem::path> find_mask(const std::filesystem::path& dir, const std::string& stem) {
  for (const char* ext : {".png", ".pgm", ".json"}) {
    const auto p = dir / (stem + ext);
    if (std::filesystem::exists(p)) return p;
  }
  return std::nullopt;
}

MaskSource mask_source(const std::string& arg) {
  MaskSource m;
  if (!arg.empty()) m.path = arg;
  return m;
}

int fail(std::ostream& err, int code, const std::string& kind, const std::string& message) {
  err << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prompt-conditioned learned image codec", "picr"};
  app.require_subcommand(1);

  std::string config_path, image, mask, ckpt, in_path, out_path, images_dir, masks_dir, report, grid, size,
      preset = "toy";
  double m = 0.5, alpha = 1.0, beta = 0.0, roi_m = 0.5;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "Run the staged training described by a JSON config");
  train->add_option("--config", config_path, "training config (JSON)")->required()->check(CLI::ExistingFile);

  auto* init = app.add_subcommand("init", "Write a randomly initialized checkpoint");
  init->add_option("--preset", preset, "codec preset (toy|default) or a codec JSON file");
  init->add_option("--seed", seed, "initialization seed");
  init->add_option("--out", out_path, "checkpoint path")->required();

  auto* encode = app.add_subcommand("encode", "Compress an image");
  encode->add_option("--image", image, "input PNG/PPM")->required();
  encode->add_option("--mask", mask, "ROI mask: 8-bit grayscale image or JSON mask spec (default: all ones)");
  encode->add_option("--m", m, "rate parameter in [0,1]")->required();
  encode->add_option("--ckpt", ckpt, "checkpoint")->required();
  encode->add_option("--out", out_path, "output bitstream")->required();

  auto* decode = app.add_subcommand("decode", "Decompress a bitstream");
  decode->add_option("--in", in_path, "input bitstream")->required();
  decode->add_option("--ckpt", ckpt, "checkpoint")->required();
  decode->add_option("--out", out_path, "output image (PNG/PPM)")->required();

  auto* eval = app.add_subcommand("eval", "Rate-distortion sweep over a folder of images");
  eval->add_option("--images", images_dir, "folder of images")->required();
  eval->add_option("--masks", masks_dir, "folder of masks named after the images");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--m-grid", grid, "comma-separated rate parameters")->default_val("0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9");
  eval->add_option("--alpha", alpha, "ROI weight")->default_val(1.0);
  eval->add_option("--beta", beta, "non-ROI weight")->default_val(0.0);
  eval->add_option("--roi-m", roi_m, "rate parameter of the ROI-value sub-sweep")->default_val(0.5);
  eval->add_option("--report", report, "output folder")->required();

  auto* profile = app.add_subcommand("profile", "Count MACs per pixel and parameters");
  profile->add_option("--ckpt", ckpt, "checkpoint (its config is profiled)");
  profile->add_option("--preset", preset, "codec preset when no checkpoint is given");
  profile->add_option("--size", size, "image size N or HxW")->default_val("256");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    if (*train) {
      const TrainConfig cfg = TrainConfig::from_json(read_text(config_path));
      const auto last = run_training(cfg, &err);
      out << json{{"checkpoint", last.string()}, {"metrics", (cfg.output_dir / "metrics.ndjson").string()}}.dump()
          << '\n';
    } else if (*init) {
      CodecConfig cfg;
      if (preset == "toy") {
        cfg = CodecConfig::toy();
      } else if (preset != "default") {
        cfg = CodecConfig::from_json(read_text(preset));
      }
      const Codec codec(cfg, seed);
      codec.save(out_path);
      out << json{{"checkpoint", out_path}, {"params", codec.parameter_count()}}.dump() << '\n';
    } else if (*encode) {
      const EncodeResult r = encode_file(image, mask_source(mask), m, ckpt, out_path);
      out << json{{"bytes", r.bytes.size()}, {"estimated_bpp", r.estimated_bpp}, {"actual_bpp", r.actual_bpp}}.dump()
          << '\n';
    } else if (*decode) {
      const DecodeResult r = decode_file(in_path, ckpt, out_path);
      out << json{{"height", r.header.height}, {"width", r.header.width}, {"m_lambda", r.header.m_lambda()}}.dump()
          << '\n';
    } else if (*eval) {
      SweepOptions opt;
      opt.m_values = parse_grid(grid);
      opt.alpha = alpha;
      opt.beta = beta;
      opt.roi_m = roi_m;
      if (!std::filesystem::is_directory(images_dir)) throw ImageIoError("not a directory: " + images_dir);
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::directory_iterator(images_dir))
        if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      if (files.empty()) throw ImageIoError("no images in " + images_dir);
      std::vector<EvalImage> images;
      for (const auto& f : files) {
        EvalImage ei{f.stem().string(), read_image(f, 3), std::nullopt};
        if (!masks_dir.empty()) {
          if (auto mp = find_mask(masks_dir, ei.name)) ei.roi = load_mask(*mp, ei.image.dim(1), ei.image.dim(2));
        }
        images.push_back(std::move(ei));
      }
      const auto points = rd_sweep(Codec::load(ckpt), images, opt);
      write_rd_report(points, report);
      out << json{{"points", points.size()}, {"report", report}}.dump() << '\n';
    } else if (*profile) {
      std::optional<Codec> codec;
      CodecConfig cfg = CodecConfig::toy();
      if (!ckpt.empty()) {
        codec.emplace(Codec::load(ckpt));
        cfg = codec->config();
      } else if (preset == "default") {
        cfg = CodecConfig{};
      } else if (preset != "toy") {
        cfg = CodecConfig::from_json(read_text(preset));
      }
      if (!codec) codec.emplace(cfg, 0);
      const auto [h, w] = parse_size(size);
      const ComplexityProfile prof = profile_complexity(cfg, h, w);
      json by_kind = json::object();
      for (const auto& [k, v] : prof.by_kind) by_kind[k] = v;
      out << json{{"height", h},
                  {"width", w},
                  {"kmacs_per_pixel", prof.kmacs_per_pixel},
                  {"total_macs", prof.total_macs},
                  {"macs_by_kind", by_kind},
                  {"params", codec->parameter_count()}}
                 .dump()
          << '\n';
    }
  } catch (const TruncatedStreamError& e) {
    return fail(err, kStreamError, "truncated_stream", e.what());
  } catch (const CorruptStreamError& e) {
    return fail(err, kStreamError, "corrupt_stream", e.what());
  } catch (const BitstreamError& e) {
    return fail(err, kStreamError, "bad_stream", e.what());
  } catch (const ImageIoError& e) {
    return fail(err, kIoError, "io", e.what());
  } catch (const ShapeError& e) {
    return fail(err, kFailure, "shape", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(err, kUsage, "invalid_argument", e.what());
  } catch (const std::out_of_range& e) {
    return fail(err, kUsage, "out_of_range", e.what());
  } catch (const std::exception& e) {
    return fail(err, kFailure, "error", e.what());
  }
  return kOk;
}

}  // namespace picr::cli
