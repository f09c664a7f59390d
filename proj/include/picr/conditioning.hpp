// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "picr/tensor.hpp"

namespace picr {

/// Exponential interpolation between the extreme Lagrange multipliers.
struct RateMapping {
  double lambda_min = 0.0018;
  double lambda_max = 0.0932;
};

/// λ = exp((log λ_max − log λ_min)·m + log λ_min). Throws for m outside [0,1].
double lambda_of(double m, const RateMapping& mapping = {});

struct LambdaMaps {
  Tensor full;   // 1×H×W
  Tensor small;  // 1×H/16×W/16
};

/// Constant maps holding m. H and W must be multiples of 16.
LambdaMaps make_lambda_maps(double m, std::size_t height, std::size_t width);

/// Nearest-value downscale of a 1×H×W plane by `factor`.
Tensor downscale_nearest(const Tensor& plane, std::size_t factor);

/// SplitMix64 evaluated at (seed, counter): stateless, so any draw can be
/// recomputed from its index.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}
  static std::uint64_t at(std::uint64_t seed, std::uint64_t counter);
  std::uint64_t next() { return at(seed_, counter_++); }
  /// Uniform on [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

enum class MaskKind { Uniform, Gradient, Rectangles, Blobs };

std::string to_string(MaskKind kind);
MaskKind mask_kind_from_string(const std::string& name);

/// Rectangle in pixel coordinates, half-open [y0,y1)×[x0,x1).
struct MaskRect {
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  double value = 1.0;
};

/// Random ROI mask description. Unset optional fields are drawn from `seed`.
struct MaskSpec {
  MaskKind kind = MaskKind::Uniform;
  std::uint64_t seed = 0;
  std::optional<double> value;        // uniform
  std::optional<double> angle;        // gradient direction, radians
  std::optional<double> start, end;   // gradient endpoint values
  std::optional<double> background;   // rectangles
  std::vector<MaskRect> rects;        // rectangles; empty means random 1-3
  std::optional<double> sigma;        // blobs: blur radius in pixels
  std::optional<double> threshold;    // blobs: area fraction below the cut

  static MaskSpec random(std::uint64_t seed);  // kind drawn uniformly
  static MaskSpec from_json(const std::string& text);
  std::string to_json() const;
};

/// 1×H×W mask in [0,1], a pure function of (spec, H, W).
Tensor generate_mask(const MaskSpec& spec, std::size_t height, std::size_t width);

/// Loads an 8-bit grayscale image (colour is averaged) as values/255, or a
/// JSON MaskSpec when the extension is .json.
Tensor load_mask(const std::filesystem::path& path, std::size_t height, std::size_t width);

}  // namespace picr
