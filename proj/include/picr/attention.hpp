// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "picr/layers.hpp"
#include "picr/ops.hpp"
#include "picr/tensor.hpp"

namespace picr {

/// Geometry of a window partition over an H×W grid.
struct WindowLayout {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t window = 0;
  std::size_t shift = 0;  // cyclic roll applied before partitioning

  std::size_t windows_y() const { return height / window; }
  std::size_t windows_x() const { return width / window; }
  std::size_t window_count() const { return windows_y() * windows_x(); }
  std::size_t tokens_per_window() const { return window * window; }

  /// Throws ShapeError unless the grid tiles exactly and shift < window.
  void validate() const;
  /// Layout of the prompt grid paired with this image layout: half the
  /// resolution, half the window, half the shift.
  WindowLayout prompt_layout() const;
};

/// For output element (win, token, c) of the partition of an H×W×C map,
/// the flat source offset in the input.
ops::Index window_partition_index(const WindowLayout& layout, std::size_t channels);
/// Inverse of `window_partition_index`.
ops::Index window_merge_index(const WindowLayout& layout, std::size_t channels);

/// H×W×C -> [windows, w·w, C], rolling by -shift first.
Tensor partition_windows(const Tensor& hwc, const WindowLayout& layout);
/// [windows, w·w, C] -> H×W×C, undoing the roll.
Tensor merge_windows(const Tensor& windows, const WindowLayout& layout);

/// Reflect-pads an H×W×C map at the bottom/right to (height, width).
Tensor reflect_pad(const Tensor& hwc, std::size_t height, std::size_t width);
/// Keeps the top-left (height, width) region of an H×W×C map.
Tensor crop(const Tensor& hwc, std::size_t height, std::size_t width);

/// Learned projections and position-bias tables of one attention layer.
///
/// `bias_table` has (2w-1)² rows (one per relative offset) and one column per
/// head. `prompt_bias_table` has (w/2)² rows indexed by the prompt token's
/// position in its window; it may be undefined for layers without prompts.
struct AttentionWeights {
  Tensor w_q, w_k, w_v;
  Tensor b_q, b_k, b_v;  // optional
  Tensor bias_table;
  Tensor prompt_bias_table;
  std::size_t heads = 1;
  std::size_t window = 0;

  std::size_t dim() const { return w_q.dim(0); }
  static AttentionWeights init(std::size_t dim, std::size_t heads, std::size_t window,
                               bool with_prompts, Rng& rng);
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// Image and prompt tokens of one window.
struct TokenSet {
  Tensor image_tokens;   // S_I × d
  Tensor prompt_tokens;  // S_P × d, undefined or 0 rows when absent
};

/// Softmax probabilities captured from an attention call, laid out as
/// [windows][heads][S_I][S_I + S_P].
struct AttentionProbe {
  std::vector<double> probs;
  std::size_t windows = 0, heads = 0, image_tokens = 0, total_tokens = 0;
  WindowLayout layout;  // image-grid layout of the captured call

  double prob(std::size_t win, std::size_t head, std::size_t i, std::size_t j) const {
    return probs[((win * heads + head) * image_tokens + i) * total_tokens + j];
  }
};

/// Additive attention mask [windows][S_I][S_I+S_P] (0 or a large negative).
using AttentionMask = std::shared_ptr<const Buffer>;

/// Relative position index for a w×w window against a table sized for
/// `table_window`: entry (i, j) is (Δy + tw - 1)(2tw - 1) + (Δx + tw - 1).
std::vector<std::int64_t> relative_position_index(std::size_t window, std::size_t table_window);

/// Position bias [heads, S_I, S_I + S_P] for a runtime window `window`
/// (at most the tables' window). Columns S_I.. come from the prompt table.
Tensor build_relative_bias(const AttentionWeights& weights, std::size_t window,
                           std::size_t prompt_tokens);

/// Softmax(Q Kᵀ/√d_h + bias + mask) V per window and head.
///
/// q: [nW, S_I, d]; k, v: [nW, S, d]; bias: [heads, S_I, S]. The mask is
/// optional and constant. Output [nW, S_I, d].
Tensor attention_kernel(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias,
                        const AttentionMask& mask, std::size_t heads,
                        AttentionProbe* probe = nullptr);

/// Prompt-augmented attention over batched windows: queries from image
/// tokens only, keys and values from [image; prompt] tokens.
///
/// image: [nW, S_I, d]; prompts: [nW, S_P, d] or undefined.
Tensor prompted_window_attention(const Tensor& image, const Tensor& prompts,
                                 const AttentionWeights& weights, std::size_t window,
                                 const AttentionMask& mask = nullptr,
                                 AttentionProbe* probe = nullptr);

/// Plain windowed self-attention on image tokens; no prompt path at all.
Tensor window_self_attention(const Tensor& image, const AttentionWeights& weights,
                             std::size_t window, const AttentionMask& mask = nullptr);

/// Single-window form over a TokenSet. Output S_I × d.
Tensor prompted_attention(const TokenSet& tokens, const AttentionWeights& weights,
                          std::size_t window);

/// Mask separating regions that a cyclic shift brought together. Prompt
/// columns take the region label of the image position they cover.
AttentionMask shifted_window_mask(const WindowLayout& layout, bool with_prompts);

/// Window size actually used on an h×w grid for a layer built for
/// `table_window`.
std::size_t runtime_window(std::size_t table_window, std::size_t height, std::size_t width,
                           bool with_prompts);

struct SwinLayerConfig {
  std::size_t channels = 0;
  std::size_t heads = 1;
  std::size_t window = 8;
  std::size_t mlp_ratio = 2;
  bool prompts = false;
};

/// Pre-norm Swin layer: x + proj(attn(LN(x))), then x + MLP(LN(x)).
class SwinLayer {
 public:
  SwinLayer() = default;
  SwinLayer(const SwinLayerConfig& config, Rng& rng);

  /// hwc: H×W×C. prompts: (H/2)×(W/2)×C or undefined.
  Tensor forward(const Tensor& hwc, const Tensor& prompts, bool shifted,
                 AttentionProbe* probe = nullptr) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  /// Zeroes the attention output projection and the MLP's second layer so
  /// the layer is an identity map.
  void zero_residual_branches();

  const AttentionWeights& attention() const { return attn_; }
  AttentionWeights& attention() { return attn_; }
  const SwinLayerConfig& config() const { return config_; }

 private:
  SwinLayerConfig config_;
  LayerNorm norm1_, norm2_;
  AttentionWeights attn_;
  Linear proj_;
  Mlp mlp_;
};

enum class Resample { Down, Up, Keep };

struct StbConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Resample resample = Resample::Down;
  std::size_t layers = 2;
  std::size_t window = 8;
  std::size_t heads = 1;
  std::size_t mlp_ratio = 2;
  std::size_t prompt_channels = 0;  // 0: plain STB
  int prompt_stride = 1;            // prompt feature grid / prompt token grid
  bool share_prompts = true;        // one prompt projection for all layers
};

/// Resampling convolution followed by Swin layers alternating shift 0, w/2.
///
/// With prompt channels configured (P-STB), a strided convolution maps the
/// prompt feature map to prompt tokens on a grid half the image-token grid.
class StbBlock {
 public:
  StbBlock() = default;
  StbBlock(const StbConfig& config, Rng& rng);

  Tensor forward(const Tensor& chw, const Tensor& prompt_features = {},
                 std::vector<AttentionProbe>* probes = nullptr) const;
  /// The resampling convolution alone.
  Tensor conv_path(const Tensor& chw) const;
  /// Prompt tokens (H'/2)×(W'/2)×C' for the given layer.
  Tensor prompt_tokens(const Tensor& prompt_features, std::size_t layer) const;

  void collect(ParameterList& out, const std::string& prefix) const;

  const StbConfig& config() const { return config_; }
  bool prompted() const { return config_.prompt_channels > 0; }
  std::vector<SwinLayer>& layers() { return layers_; }
  const std::vector<SwinLayer>& layers() const { return layers_; }
  const Conv2d& down() const { return down_; }
  const ConvTranspose2d& up() const { return up_; }
  const std::vector<Conv2d>& prompt_projections() const { return prompt_proj_; }

 private:
  StbConfig config_;
  Conv2d down_;
  ConvTranspose2d up_;
  std::vector<Conv2d> prompt_proj_;
  std::vector<SwinLayer> layers_;
};

/// C×H×W <-> H×W×C.
Tensor chw_to_hwc(const Tensor& chw);
Tensor hwc_to_chw(const Tensor& hwc);

}  // namespace picr
