// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "picr/bitstream.hpp"
#include "picr/codec.hpp"
#include "picr/mac_counter.hpp"

namespace picr {

inline constexpr double kPsnrCap = 100.0;

/// ROI/non-ROI weighting for the quality metric. The mask is binarized at 0.5.
struct WeightedPsnrSpec {
  double alpha = 1.0;
  double beta = 0.0;
  Tensor roi_mask;  // 1×H×W
};

/// −10·log10 of (α·SSE_ROI + β·SSE_NROI)/(α·N_ROI + β·N_NROI) over all
/// channels, MAX = 1. Zero error (or nothing weighted) gives the 100 dB cap.
double weighted_psnr(const Tensor& x, const Tensor& x_hat, const WeightedPsnrSpec& spec);
double psnr(const Tensor& x, const Tensor& x_hat);

/// Mask with values ≥ 0.5 set to 1 and the rest to 0.
Tensor binarize_mask(const Tensor& mask);

struct RdPoint {
  std::string image;
  double m_lambda = 0;
  std::optional<double> roi_value;  // set for the ROI-value sub-sweep
  double bpp = 0;                   // from the file size
  double estimated_bpp = 0;
  double wpsnr_db = 0;
  std::size_t bytes = 0;
  double ms_encode = 0;
  double ms_decode = 0;
};

struct EvalImage {
  std::string name;
  Tensor image;                 // 3×H×W
  std::optional<Tensor> roi;    // 1×H×W; absent means all ones
};

struct SweepOptions {
  std::vector<double> m_values{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  double alpha = 1.0;
  double beta = 0.0;
  /// ROI-value sub-sweep at `roi_m`, run for images that carry a mask.
  std::vector<double> roi_values{0.25, 0.5, 0.75, 1.0};
  double roi_m = 0.5;
};

class DecodeMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Encodes each (image, m) and (image, ROI value) pair to a real bitstream,
/// decodes it and scores it. Points are sorted by image, then ROI value
/// (plain sweep first), then m.
std::vector<RdPoint> rd_sweep(const Codec& codec, const std::vector<EvalImage>& images,
                              const SweepOptions& options);

/// Writes rd.csv, rd.json, rd.svg and, when present, roi_sweep.csv.
void write_rd_report(const std::vector<RdPoint>& points, const std::filesystem::path& dir);

/// MAC count of one layer in the closed-form walk.
struct LayerMacs {
  std::string name;
  std::string kind;  // conv, conv_transpose, linear, attention
  std::uint64_t macs = 0;
};

struct ComplexityProfile {
  std::vector<LayerMacs> layers;
  std::map<std::string, std::uint64_t> by_kind;
  std::uint64_t total_macs = 0;
  double kmacs_per_pixel = 0;
  std::size_t height = 0, width = 0;  // as requested; the walk uses the padded size
};

std::uint64_t conv_macs(std::size_t h_out, std::size_t w_out, std::size_t c_in, std::size_t c_out, std::size_t k);
std::uint64_t conv_transpose_macs(std::size_t h_in, std::size_t w_in, std::size_t c_in, std::size_t c_out,
                                  std::size_t k);
/// Per window: S_I·(S_I+S_P)·d·2.
std::uint64_t attention_macs(std::size_t s_i, std::size_t s_p, std::size_t d);
/// Q, K, V and output projections with biases: 4·(d² + d).
std::size_t attention_projection_params(std::size_t d);

/// Closed-form count for one full encode + decode pass (all six networks) on
/// an H×W image padded to multiples of 64; per-pixel figures use H·W.
ComplexityProfile profile_complexity(const CodecConfig& config, std::size_t height, std::size_t width);

/// The same quantity observed by running the model under a MacRecorder.
MacTally measure_macs(const Codec& codec, std::size_t height, std::size_t width);

/// Per-token prompt mass of one captured attention call, placed back on an
/// gh×gw grid (shift undone, padding dropped). Throws if S_P = 0.
Tensor prompt_mass_map(const AttentionProbe& probe, std::size_t gh, std::size_t gw);

enum class CodecSide { Encoder, Decoder };

/// Summed softmax weight on prompt columns for every image token, averaged
/// over heads, on the stage's token grid. One 1×H_s×W_s map per Swin layer of
/// the P-STB.
std::vector<Tensor> prompt_attention_map(const Codec& codec, const ConditioningInput& cond, std::size_t stage,
                                         CodecSide side = CodecSide::Encoder);

/// Heat map as 8-bit grayscale (value·255).
void write_heat_map(const std::filesystem::path& path, const Tensor& map);

}  // namespace picr
