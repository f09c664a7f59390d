// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "picr/attention.hpp"
#include "picr/entropy.hpp"
#include "picr/layers.hpp"

namespace picr {

struct CodecConfig {
  std::array<std::size_t, 4> stage_channels{96, 128, 160, 192};
  std::size_t latent_channels = 192;
  std::size_t hyper_channels = 128;
  std::size_t swin_layers = 2;
  std::size_t window = 8;
  std::array<std::size_t, 4> heads{3, 4, 5, 6};
  std::array<std::size_t, 4> prompt_channels{48, 64, 80, 96};
  std::size_t hyper_heads = 4;
  std::size_t mlp_ratio = 2;
  bool share_prompts = true;
  double sigma_min = GaussianConditional::kSigmaMin;

  /// Small configuration for desk-scale training and tests.
  static CodecConfig toy();
  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  std::string to_json() const;
  static CodecConfig from_json(const std::string& text);

  bool operator==(const CodecConfig&) const = default;
};

/// Image, ROI mask and lambda map, all sharing H×W.
struct ConditioningInput {
  Tensor image;       // 3×H×W in [0,1]
  Tensor roi_mask;    // 1×H×W in [0,1]
  Tensor lambda_map;  // 1×H×W, constant m_λ

  static ConditioningInput make(const Tensor& image, const Tensor& roi_mask, double m_lambda);
  void validate() const;
  double m_lambda() const { return lambda_map[0]; }
};

/// One feature map per stage, at that stage's input resolution.
using PromptPyramid = std::array<Tensor, 4>;

struct LatentBundle {
  Tensor y, y_hat;  // C_y×H/16×W/16
  Tensor z, z_hat;  // C_z×H/64×W/64
  Tensor mu, sigma;
  Tensor likelihood_y, likelihood_z;
};

/// Attention probabilities captured per P-STB, per Swin layer.
using StageProbes = std::array<std::vector<AttentionProbe>, 4>;

struct ForwardResult {
  LatentBundle latents;
  Tensor reconstruction;  // 3×H×W
  Tensor bpp;             // scalar
};

/// The six sub-networks plus the factorized prior for the hyper-latent.
///
/// Parameter names start with g_a., g_s., h_a., h_s., p_a., p_s. or prior.
class Codec {
 public:
  explicit Codec(const CodecConfig& config, std::uint64_t seed = 0);

  const CodecConfig& config() const { return config_; }

  PromptPyramid encoder_prompts(const ConditioningInput& cond) const;
  PromptPyramid decoder_prompts(const Tensor& y_hat, const Tensor& lambda_small) const;

  /// g_a, h_a, quantization and h_s. With `use_prompts` false the P-STBs run
  /// as plain STBs and p_a is skipped.
  LatentBundle analyze(const ConditioningInput& cond, Mode mode, Rng* rng = nullptr,
                       bool use_prompts = true, StageProbes* probes = nullptr) const;
  /// g_s; the result is clamped to [0,1] in evaluation mode.
  Tensor synthesize(const Tensor& y_hat, const Tensor& lambda_small, Mode mode,
                    bool use_prompts = true, StageProbes* probes = nullptr) const;
  /// (μ, σ) from the quantized hyper-latent.
  std::pair<Tensor, Tensor> hyper_synthesis(const Tensor& z_hat) const;
  /// g_a alone (for shape and locality checks).
  Tensor encode_latent(const ConditioningInput& cond, bool use_prompts = true,
                       StageProbes* probes = nullptr) const;

  ForwardResult forward(const ConditioningInput& cond, Mode mode, Rng* rng = nullptr,
                        bool use_prompts = true) const;

  ParameterList parameters() const;
  std::size_t parameter_count() const;

  const FactorizedPrior& prior() const { return prior_; }
  const std::array<StbBlock, 4>& encoder_blocks() const { return g_a_; }
  const std::array<StbBlock, 4>& decoder_blocks() const { return g_s_; }
  const std::array<StbBlock, 2>& hyper_encoder_blocks() const { return h_a_; }
  const std::array<StbBlock, 2>& hyper_decoder_blocks() const { return h_s_; }

  /// Binary archive: magic, JSON config, named float64 arrays.
  void save(const std::filesystem::path& path) const;
  static Codec load(const std::filesystem::path& path);

 private:
  CodecConfig config_;
  // p_a
  Conv2d pa_in_;
  std::array<Conv2d, 3> pa_down_;
  // p_s
  Conv2d ps_in_;
  std::array<ConvTranspose2d, 3> ps_up_;
  // g_a / g_s
  std::array<StbBlock, 4> g_a_;
  Conv2d ga_out_;
  std::array<StbBlock, 4> g_s_;
  Conv2d gs_out_;
  // h_a / h_s
  Conv2d ha_in_;
  std::array<StbBlock, 2> h_a_;
  std::array<StbBlock, 2> h_s_;
  Conv2d hs_out_;
  FactorizedPrior prior_;
};

/// Decoder-side output channels of each g_s stage.
std::array<std::size_t, 4> decoder_stage_channels(const CodecConfig& config);

}  // namespace picr
