// SPDX-License-Identifier: Apache-2.0
#include "picr/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "picr/image_io.hpp"

namespace picr {

double lambda_of(double m, const RateMapping& mapping) {
  if (!(m >= 0.0 && m <= 1.0)) {
    throw std::out_of_range("rate parameter must lie in [0,1], got " + std::to_string(m));
  }
  if (!(mapping.lambda_min > 0.0 && mapping.lambda_min < mapping.lambda_max)) {
    throw std::invalid_argument("rate mapping needs 0 < lambda_min < lambda_max");
  }
  const double lo = std::log(mapping.lambda_min), hi = std::log(mapping.lambda_max);
  return std::exp((hi - lo) * m + lo);
}

LambdaMaps make_lambda_maps(double m, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0) {
    throw std::invalid_argument("lambda maps need H and W divisible by 16, got " + std::to_string(height) +
                                "x" + std::to_string(width));
  }
  Tensor full({1, height, width}, m);
  return {full, downscale_nearest(full, 16)};
}

Tensor downscale_nearest(const Tensor& plane, std::size_t factor) {
  if (plane.rank() != 3 || plane.dim(0) != 1) throw ShapeError("downscale expects a 1xHxW plane");
  const std::size_t h = plane.dim(1), w = plane.dim(2);
  if (factor == 0 || h % factor || w % factor) throw ShapeError("downscale factor does not divide the plane");
  const std::size_t oh = h / factor, ow = w / factor;
  std::vector<double> out(oh * ow);
  // Sample the top-left pixel of each cell.
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) out[y * ow + x] = plane[(y * factor) * w + x * factor];
  return Tensor({1, oh, ow}, std::move(out));
}

std::uint64_t CounterRng::at(std::uint64_t seed, std::uint64_t counter) {
  std::uint64_t z = seed + (counter + 1) * 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::Uniform: return "uniform";
    case MaskKind::Gradient: return "gradient";
    case MaskKind::Rectangles: return "rectangles";
    case MaskKind::Blobs: return "blobs";
  }
  return "uniform";
}

MaskKind mask_kind_from_string(const std::string& name) {
  if (name == "uniform") return MaskKind::Uniform;
  if (name == "gradient") return MaskKind::Gradient;
  if (name == "rectangles") return MaskKind::Rectangles;
  if (name == "blobs") return MaskKind::Blobs;
  throw std::invalid_argument("unknown mask kind '" + name + "'");
}

MaskSpec MaskSpec::random(std::uint64_t seed) {
  MaskSpec spec;
  spec.seed = seed;
  spec.kind = static_cast<MaskKind>(CounterRng::at(seed ^ 0x6D61736B6B696E64ull, 0) % 4);
  return spec;
}

MaskSpec MaskSpec::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("mask spec is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("kind")) throw std::invalid_argument("mask spec needs a \"kind\" field");
  MaskSpec spec;
  try {
    spec.kind = mask_kind_from_string(j.at("kind").get<std::string>());
    spec.seed = j.value("seed", std::uint64_t{0});
    auto opt = [&](const char* key, std::optional<double>& field) {
      if (j.contains(key)) field = j.at(key).get<double>();
    };
    opt("value", spec.value);
    opt("angle", spec.angle);
    opt("start", spec.start);
    opt("end", spec.end);
    opt("background", spec.background);
    opt("sigma", spec.sigma);
    opt("threshold", spec.threshold);
    if (j.contains("rects")) {
      for (const auto& r : j.at("rects")) {
        spec.rects.push_back({r.at("y0").get<std::size_t>(), r.at("x0").get<std::size_t>(),
                              r.at("y1").get<std::size_t>(), r.at("x1").get<std::size_t>(),
                              r.value("value", 1.0)});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad mask spec field: ") + e.what());
  }
  return spec;
}

std::string MaskSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = to_string(kind);
  j["seed"] = seed;
  auto put = [&](const char* key, const std::optional<double>& field) {
    if (field) j[key] = *field;
  };
  put("value", value);
  put("angle", angle);
  put("start", start);
  put("end", end);
  put("background", background);
  put("sigma", sigma);
  put("threshold", threshold);
  if (!rects.empty()) {
    j["rects"] = nlohmann::json::array();
    for (const auto& r : rects) {
      j["rects"].push_back({{"y0", r.y0}, {"x0", r.x0}, {"y1", r.y1}, {"x1", r.x1}, {"value", r.value}});
    }
  }
  return j.dump();
}

namespace {

// One-dimensional Gaussian blur with edge clamping, applied along rows or columns.
void blur_axis(std::vector<double>& img, std::size_t h, std::size_t w, double sigma, bool along_x) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kernel[i + radius];
  }
  for (double& k : kernel) k /= norm;
  std::vector<double> out(img.size());
  const long lh = static_cast<long>(h), lw = static_cast<long>(w);
  for (long y = 0; y < lh; ++y)
    for (long x = 0; x < lw; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const long yy = along_x ? y : std::clamp(y + i, 0L, lh - 1);
        const long xx = along_x ? std::clamp(x + i, 0L, lw - 1) : x;
        acc += kernel[i + radius] * img[yy * lw + xx];
      }
      out[y * lw + x] = acc;
    }
  img.swap(out);
}

}  // namespace

Tensor generate_mask(const MaskSpec& spec, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw std::invalid_argument("mask dimensions must be positive");
  const std::size_t n = height * width;
  std::vector<double> m(n, 0.0);
  CounterRng rng(spec.seed);
  const double hd = static_cast<double>(height), wd = static_cast<double>(width);

  switch (spec.kind) {
    case MaskKind::Uniform: {
      const double draw = rng.uniform();
      std::fill(m.begin(), m.end(), spec.value.value_or(draw));
      break;
    }
    case MaskKind::Gradient: {
      const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double s0 = rng.uniform(), s1 = rng.uniform();
      const double angle = spec.angle.value_or(a);
      const double v0 = spec.start.value_or(s0), v1 = spec.end.value_or(s1);
      const double c = std::cos(angle), s = std::sin(angle);
      const double extent = std::fabs(c) + std::fabs(s);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double u = (static_cast<double>(x) + 0.5) / wd - 0.5;
          const double v = (static_cast<double>(y) + 0.5) / hd - 0.5;
          const double t = std::clamp((u * c + v * s) / extent + 0.5, 0.0, 1.0);
          m[y * width + x] = v0 + (v1 - v0) * t;
        }
      break;
    }
    case MaskKind::Rectangles: {
      const double bg = rng.uniform();
      std::vector<MaskRect> rects = spec.rects;
      const std::size_t count = 1 + rng.next() % 3;
      for (std::size_t i = 0; i < count; ++i) {
        const double fh = rng.uniform(0.15, 0.6), fw = rng.uniform(0.15, 0.6);
        const double py = rng.uniform(), px = rng.uniform(), val = rng.uniform();
        if (!spec.rects.empty()) continue;
        const auto rh = std::max<std::size_t>(1, static_cast<std::size_t>(fh * hd));
        const auto rw = std::max<std::size_t>(1, static_cast<std::size_t>(fw * wd));
        const auto y0 = static_cast<std::size_t>(py * static_cast<double>(height - rh + 1));
        const auto x0 = static_cast<std::size_t>(px * static_cast<double>(width - rw + 1));
        rects.push_back({y0, x0, y0 + rh, x0 + rw, val});
      }
      std::fill(m.begin(), m.end(), spec.background.value_or(bg));
      for (const auto& r : rects) {
        for (std::size_t y = r.y0; y < std::min(r.y1, height); ++y)
          for (std::size_t x = r.x0; x < std::min(r.x1, width); ++x) m[y * width + x] = r.value;
      }
      break;
    }
    case MaskKind::Blobs: {
      const double longest = std::max(hd, wd);
      const double sig = spec.sigma.value_or(std::max(1.0, rng.uniform(0.04, 0.12) * longest));
      const double thr = spec.threshold.value_or(rng.uniform(0.4, 0.6));
      CounterRng noise(spec.seed ^ 0x626C6F62736E6F69ull);
      for (double& v : m) v = noise.uniform();
      blur_axis(m, height, width, sig, true);
      blur_axis(m, height, width, sig, false);
      double mean = 0.0, var = 0.0;
      for (double v : m) mean += v;
      mean /= static_cast<double>(n);
      for (double v : m) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / static_cast<double>(n));
      // The threshold is the fraction of the area that falls below the cut.
      std::vector<double> sorted = m;
      const auto k = std::min(n - 1, static_cast<std::size_t>(thr * static_cast<double>(n)));
      std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(k), sorted.end());
      const double cut = sorted[k];
      for (double& v : m) v = sd > 0 ? std::clamp(0.5 + (v - cut) / (0.5 * sd), 0.0, 1.0) : 0.5;
      break;
    }
  }
  for (double& v : m) v = std::clamp(v, 0.0, 1.0);
  return Tensor({1, height, width}, std::move(m));
}

Tensor load_mask(const std::filesystem::path& path, std::size_t height, std::size_t width) {
  if (path.extension() == ".json") {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open mask spec " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return generate_mask(MaskSpec::from_json(ss.str()), height, width);
  }
  Tensor mask = read_image(path, 1);
  if (mask.dim(1) != height || mask.dim(2) != width) {
    throw ShapeError("mask " + path.string() + " is " + std::to_string(mask.dim(2)) + "x" +
                     std::to_string(mask.dim(1)) + ", image is " + std::to_string(width) + "x" +
                     std::to_string(height));
  }
  return mask;
}

}  // namespace picr
