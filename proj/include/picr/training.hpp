// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "picr/codec.hpp"
#include "picr/conditioning.hpp"

namespace picr {

/// Distortion is measured on [0,1] pixels and scaled as if on [0,255].
inline constexpr double kDistortionScale = 255.0 * 255.0;

struct LossBreakdown {
  double masked_mse = 0;
  double bpp = 0;
  double lambda = 0;
  double total = 0;
};

struct RdLoss {
  Tensor total;  // scalar with graph
  LossBreakdown values;
};

/// total = λ·D_SCALE·Σ M_R·(x−x′)²/N + bpp, with N = C·H·W and the mask
/// broadcast over channels.
RdLoss rd_loss(const Tensor& x, const Tensor& x_hat, const Tensor& roi_mask, double m_lambda, const Tensor& bpp,
               const RateMapping& mapping = {});

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LambdaRule { Fixed, Uniform };
enum class MaskRule { Ones, Random };

struct StagePlan {
  int stage = 1;
  std::size_t steps = 50000;
  double learning_rate = 1e-4;
  LambdaRule lambda_rule = LambdaRule::Fixed;
  double fixed_m = 1.0;
  MaskRule mask_rule = MaskRule::Ones;
  bool use_prompts = false;  // also decides whether p_a/p_s are optimized
  std::size_t batch_size = 1;
  double grad_clip = 1.0;
  std::size_t crop = 256;

  /// Canonical plan for stage 1, 2 or 3.
  static StagePlan preset(int stage);
};

/// Draws the per-sample rate parameter and ROI mask of a stage.
class StageSampler {
 public:
  StageSampler(const StagePlan& plan, std::uint64_t seed);
  double next_m();
  Tensor next_mask(std::size_t height, std::size_t width);

 private:
  StagePlan plan_;
  CounterRng rng_;
  std::uint64_t mask_seed_;
  std::uint64_t mask_count_ = 0;
};

/// First-order adaptive-moment optimizer.
class Adam {
 public:
  explicit Adam(ParameterList params, double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  /// Applies one update from the parameters' accumulated gradients.
  void step();
  void zero_grad();
  void set_learning_rate(double lr) { lr_ = lr; }
  const ParameterList& parameters() const { return params_; }

 private:
  ParameterList params_;
  std::vector<Buffer> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
double clip_grad_norm(const ParameterList& params, double max_norm);

/// Parameters optimized in a stage.
ParameterList trainable_parameters(const Codec& codec, const StagePlan& plan);

/// In-memory image set (3×H×W tensors in [0,1]).
struct Dataset {
  std::vector<Tensor> images;

  static Dataset from_folder(const std::filesystem::path& dir);
  /// Procedural images: smooth colour fields, shapes, stripes and noise.
  static Dataset synthetic(std::size_t count, std::size_t size, std::uint64_t seed);
  /// Random crop (reflect-padded when the image is smaller than `crop`).
  Tensor sample(Rng& rng, std::size_t crop) const;
};

struct StepRecord {
  std::size_t step = 0;
  int stage = 0;
  double m_lambda = 0;
  LossBreakdown loss;
};

std::string to_ndjson(const StepRecord& r);

struct TrainOptions {
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;  // NDJSON records
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;  // written every `checkpoint_every` steps and at the end
  std::function<void(const StepRecord&)> on_step;
};

struct StageReport {
  std::vector<StepRecord> records;
};

/// Trains `codec` in place for one stage. Throws TrainingDiverged if the loss
/// becomes non-finite.
StageReport train_stage(const StagePlan& plan, Codec& codec, const Dataset& data, const TrainOptions& options);

/// Full run description read from JSON.
struct TrainConfig {
  CodecConfig codec;
  std::vector<StagePlan> stages;
  std::optional<std::filesystem::path> dataset_dir;
  std::size_t synthetic_count = 200;
  std::size_t synthetic_size = 64;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "run";
  std::size_t checkpoint_every = 0;

  static TrainConfig from_json(const std::string& text);
};

/// Runs every stage in order. Each stage writes stage<N>.ckpt and the next
/// stage starts from that file. Returns the final checkpoint path.
std::filesystem::path run_training(const TrainConfig& config, std::ostream* progress = nullptr);

}  // namespace picr
