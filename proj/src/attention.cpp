// SPDX-License-Identifier: Apache-2.0
#include "picr/attention.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "picr/mac_counter.hpp"

namespace picr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;
using HeadView = Eigen::Map<RowMat, 0, Strided>;
using CHeadView = Eigen::Map<const RowMat, 0, Strided>;

constexpr double kMaskValue = -100.0;

std::size_t mirror(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long>(n) ? m : period - m);
}

// Region labels of the rolled grid used by the shifted-window mask.
std::vector<int> shift_regions(const WindowLayout& l) {
  auto band = [&](std::size_t pos, std::size_t extent) {
    if (pos < extent - l.window) return 0;
    if (pos < extent - l.shift) return 1;
    return 2;
  };
  std::vector<int> label(l.height * l.width);
  for (std::size_t y = 0; y < l.height; ++y) {
    for (std::size_t x = 0; x < l.width; ++x) {
      label[y * l.width + x] = band(y, l.height) * 3 + band(x, l.width);
    }
  }
  return label;
}

}  // namespace

void WindowLayout::validate() const {
  if (window == 0) throw ShapeError("window size must be positive");
  if (height % window != 0 || width % window != 0) {
    throw ShapeError("grid " + std::to_string(height) + "x" + std::to_string(width) +
                     " not divisible by window " + std::to_string(window));
  }
  if (shift >= window) throw ShapeError("shift must be smaller than the window");
}

WindowLayout WindowLayout::prompt_layout() const {
  if (height % 2 || width % 2 || window % 2 || shift % 2) {
    throw ShapeError("prompt layout needs even grid, window and shift");
  }
  return {height / 2, width / 2, window / 2, shift / 2};
}

ops::Index window_partition_index(const WindowLayout& l, std::size_t channels) {
  l.validate();
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(l.height * l.width * channels);
  for (std::size_t wy = 0; wy < l.windows_y(); ++wy) {
    for (std::size_t wx = 0; wx < l.windows_x(); ++wx) {
      for (std::size_t ty = 0; ty < l.window; ++ty) {
        for (std::size_t tx = 0; tx < l.window; ++tx) {
          const std::size_t y = (wy * l.window + ty + l.shift) % l.height;
          const std::size_t x = (wx * l.window + tx + l.shift) % l.width;
          for (std::size_t c = 0; c < channels; ++c) {
            idx->push_back(static_cast<std::int64_t>((y * l.width + x) * channels + c));
          }
        }
      }
    }
  }
  return idx;
}

ops::Index window_merge_index(const WindowLayout& l, std::size_t channels) {
  const auto forward = window_partition_index(l, channels);
  auto idx = std::make_shared<std::vector<std::int64_t>>(forward->size());
  for (std::size_t i = 0; i < forward->size(); ++i) {
    (*idx)[static_cast<std::size_t>((*forward)[i])] = static_cast<std::int64_t>(i);
  }
  return idx;
}

Tensor partition_windows(const Tensor& hwc, const WindowLayout& l) {
  if (hwc.rank() != 3 || hwc.dim(0) != l.height || hwc.dim(1) != l.width) {
    throw ShapeError("partition_windows: map " + shape_string(hwc.shape()) +
                     " does not match layout");
  }
  const std::size_t c = hwc.dim(2);
  return ops::gather(hwc, window_partition_index(l, c), {l.window_count(), l.tokens_per_window(), c});
}

Tensor merge_windows(const Tensor& windows, const WindowLayout& l) {
  l.validate();
  if (windows.rank() != 3 || windows.dim(0) != l.window_count() ||
      windows.dim(1) != l.tokens_per_window()) {
    throw ShapeError("merge_windows: windows " + shape_string(windows.shape()) +
                     " do not match layout");
  }
  const std::size_t c = windows.dim(2);
  return ops::gather(windows, window_merge_index(l, c), {l.height, l.width, c});
}

Tensor reflect_pad(const Tensor& hwc, std::size_t height, std::size_t width) {
  const std::size_t h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
  if (height == h && width == w) return hwc;
  if (height < h || width < w) throw ShapeError("reflect_pad: target smaller than input");
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(height * width * c);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = mirror(static_cast<long>(y), h);
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = mirror(static_cast<long>(x), w);
      for (std::size_t k = 0; k < c; ++k) {
        idx->push_back(static_cast<std::int64_t>((sy * w + sx) * c + k));
      }
    }
  }
  return ops::gather(hwc, std::move(idx), {height, width, c});
}

Tensor crop(const Tensor& hwc, std::size_t height, std::size_t width) {
  const std::size_t h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
  if (height == h && width == w) return hwc;
  if (height > h || width > w) throw ShapeError("crop: target larger than input");
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(height * width * c);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t k = 0; k < c; ++k) {
        idx->push_back(static_cast<std::int64_t>((y * w + x) * c + k));
      }
    }
  }
  return ops::gather(hwc, std::move(idx), {height, width, c});
}

Tensor chw_to_hwc(const Tensor& chw) { return ops::permute(chw, {1, 2, 0}); }
Tensor hwc_to_chw(const Tensor& hwc) { return ops::permute(hwc, {2, 0, 1}); }

AttentionWeights AttentionWeights::init(std::size_t dim, std::size_t heads, std::size_t window,
                                        bool with_prompts, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("attention: dim " + std::to_string(dim) + " not divisible by heads " +
                     std::to_string(heads));
  }
  AttentionWeights w;
  w.heads = heads;
  w.window = window;
  const double std_qkv = 1.0 / std::sqrt(static_cast<double>(dim));
  w.w_q = normal_parameter({dim, dim}, std_qkv, rng);
  w.w_k = normal_parameter({dim, dim}, std_qkv, rng);
  w.w_v = normal_parameter({dim, dim}, std_qkv, rng);
  w.b_q = constant_parameter({dim}, 0.0);
  w.b_k = constant_parameter({dim}, 0.0);
  w.b_v = constant_parameter({dim}, 0.0);
  const std::size_t span = 2 * window - 1;
  w.bias_table = normal_parameter({span * span, heads}, 0.02, rng);
  if (with_prompts) {
    w.prompt_bias_table = constant_parameter({(window / 2) * (window / 2), heads}, 0.0);
  }
  return w;
}

void AttentionWeights::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".w_q", w_q});
  out.push_back({prefix + ".b_q", b_q});
  out.push_back({prefix + ".w_k", w_k});
  out.push_back({prefix + ".b_k", b_k});
  out.push_back({prefix + ".w_v", w_v});
  out.push_back({prefix + ".b_v", b_v});
  out.push_back({prefix + ".bias_table", bias_table});
  if (prompt_bias_table.defined()) out.push_back({prefix + ".prompt_bias_table", prompt_bias_table});
}

std::vector<std::int64_t> relative_position_index(std::size_t window, std::size_t table_window) {
  if (window > table_window) throw ShapeError("runtime window exceeds bias table window");
  const long tw = static_cast<long>(table_window);
  const std::size_t s = window * window;
  std::vector<std::int64_t> idx(s * s);
  for (std::size_t i = 0; i < s; ++i) {
    const long iy = static_cast<long>(i / window), ix = static_cast<long>(i % window);
    for (std::size_t j = 0; j < s; ++j) {
      const long jy = static_cast<long>(j / window), jx = static_cast<long>(j % window);
      idx[i * s + j] = (iy - jy + tw - 1) * (2 * tw - 1) + (ix - jx + tw - 1);
    }
  }
  return idx;
}

Tensor build_relative_bias(const AttentionWeights& weights, std::size_t window,
                           std::size_t prompt_tokens) {
  const std::size_t heads = weights.heads;
  const std::size_t s_i = window * window;
  const auto rel = relative_position_index(window, weights.window);
  auto idx = std::make_shared<std::vector<std::int64_t>>(heads * s_i * s_i);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t k = 0; k < s_i * s_i; ++k) {
      (*idx)[h * s_i * s_i + k] = rel[k] * static_cast<std::int64_t>(heads) + static_cast<std::int64_t>(h);
    }
  }
  Tensor image_part = ops::gather(weights.bias_table, std::move(idx), {heads, s_i, s_i});
  if (prompt_tokens == 0) return image_part;

  const std::size_t pw = window / 2;
  if (pw * pw != prompt_tokens) {
    throw ShapeError("prompt token count " + std::to_string(prompt_tokens) +
                     " does not fill a half-size window of " + std::to_string(window));
  }
  if (!weights.prompt_bias_table.defined()) throw ShapeError("layer has no prompt bias table");
  const std::size_t table_pw = weights.window / 2;
  auto pidx = std::make_shared<std::vector<std::int64_t>>(heads * s_i * prompt_tokens);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < s_i; ++i) {
      for (std::size_t p = 0; p < prompt_tokens; ++p) {
        const std::size_t row = (p / pw) * table_pw + p % pw;
        (*pidx)[(h * s_i + i) * prompt_tokens + p] = static_cast<std::int64_t>(row * heads + h);
      }
    }
  }
  Tensor prompt_part =
      ops::gather(weights.prompt_bias_table, std::move(pidx), {heads, s_i, prompt_tokens});
  return ops::concat({image_part, prompt_part}, 2);
}

Tensor attention_kernel(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias,
                        const AttentionMask& mask, std::size_t heads, AttentionProbe* probe) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw ShapeError("attention: rank-3 inputs");
  const std::size_t nw = q.dim(0), s_i = q.dim(1), d = q.dim(2), s = k.dim(1);
  if (k.dim(0) != nw || v.dim(0) != nw || k.dim(2) != d || v.dim(2) != d || v.dim(1) != s) {
    throw ShapeError("attention: q/k/v shape mismatch " + shape_string(q.shape()) + " " +
                     shape_string(k.shape()) + " " + shape_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: heads must divide d");
  if (bias.shape() != Shape{heads, s_i, s}) {
    throw ShapeError("attention: bias " + shape_string(bias.shape()) + " expected " +
                     shape_string({heads, s_i, s}));
  }
  if (mask && mask->size() != nw * s_i * s) throw ShapeError("attention: mask size mismatch");

  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const long li = static_cast<long>(s_i), ls = static_cast<long>(s), ldh = static_cast<long>(dh);
  auto probs = std::make_shared<Buffer>(nw * heads * s_i * s);
  Buffer out(nw * s_i * d);
  const double* qd = q.values().data();
  const double* kd = k.values().data();
  const double* vd = v.values().data();
  const double* bd = bias.values().data();

  for (std::size_t w = 0; w < nw; ++w) {
    for (std::size_t h = 0; h < heads; ++h) {
      CHeadView qh(qd + w * s_i * d + h * dh, li, ldh, Strided(static_cast<long>(d)));
      CHeadView kh(kd + w * s * d + h * dh, ls, ldh, Strided(static_cast<long>(d)));
      CHeadView vh(vd + w * s * d + h * dh, ls, ldh, Strided(static_cast<long>(d)));
      Eigen::Map<RowMat> p(probs->data() + (w * heads + h) * s_i * s, li, ls);
      p.noalias() = (qh * kh.transpose()) * scale;
      p += Eigen::Map<const RowMat>(bd + h * s_i * s, li, ls);
      if (mask) p += Eigen::Map<const RowMat>(mask->data() + w * s_i * s, li, ls);
      for (long r = 0; r < li; ++r) {
        auto row = p.row(r);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      HeadView oh(out.data() + w * s_i * d + h * dh, li, ldh, Strided(static_cast<long>(d)));
      oh.noalias() = p * vh;
    }
  }
  record_macs("attention", static_cast<std::uint64_t>(nw * s_i * s * d * 2));

  if (probe) {
    probe->probs.assign(probs->begin(), probs->end());
    probe->windows = nw;
    probe->heads = heads;
    probe->image_tokens = s_i;
    probe->total_tokens = s;
  }

  return make_result(
      Shape{nw, s_i, d}, std::move(out), {q, k, v, bias},
      [nw, s_i, s, d, dh, heads, scale, probs](TensorNode& self) {
        auto& qn = *self.inputs[0];
        auto& kn = *self.inputs[1];
        auto& vn = *self.inputs[2];
        auto& bn = *self.inputs[3];
        const long li = static_cast<long>(s_i), ls = static_cast<long>(s), ldh = static_cast<long>(dh);
        const Strided stride(static_cast<long>(d));
        double* dq = qn.requires_grad ? qn.ensure_grad().data() : nullptr;
        double* dk = kn.requires_grad ? kn.ensure_grad().data() : nullptr;
        double* dv = vn.requires_grad ? vn.ensure_grad().data() : nullptr;
        double* db = bn.requires_grad ? bn.ensure_grad().data() : nullptr;
        RowMat dp(li, ls);
        for (std::size_t w = 0; w < nw; ++w) {
          for (std::size_t h = 0; h < heads; ++h) {
            Eigen::Map<const RowMat> p(probs->data() + (w * heads + h) * s_i * s, li, ls);
            CHeadView doh(self.grad.data() + w * s_i * d + h * dh, li, ldh, stride);
            CHeadView vh(vn.value.data() + w * s * d + h * dh, ls, ldh, stride);
            if (dv) HeadView(dv + w * s * d + h * dh, ls, ldh, stride).noalias() += p.transpose() * doh;
            dp.noalias() = doh * vh.transpose();
            for (long r = 0; r < li; ++r) {
              const double dot = p.row(r).dot(dp.row(r));
              dp.row(r).array() = p.row(r).array() * (dp.row(r).array() - dot);
            }
            // dp now holds the gradient of the pre-softmax scores.
            if (db) Eigen::Map<RowMat>(db + h * s_i * s, li, ls) += dp;
            if (dq) {
              CHeadView kh(kn.value.data() + w * s * d + h * dh, ls, ldh, stride);
              HeadView(dq + w * s_i * d + h * dh, li, ldh, stride).noalias() += scale * (dp * kh);
            }
            if (dk) {
              CHeadView qh(qn.value.data() + w * s_i * d + h * dh, li, ldh, stride);
              HeadView(dk + w * s * d + h * dh, ls, ldh, stride).noalias() +=
                  scale * (dp.transpose() * qh);
            }
          }
        }
      });
}

namespace {

Tensor project(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::linear(x, w, b); }

Tensor as_windows(const Tensor& t) {
  if (t.rank() == 2) return t.reshape({1, t.dim(0), t.dim(1)});
  return t;
}

}  // namespace

Tensor prompted_window_attention(const Tensor& image, const Tensor& prompts,
                                 const AttentionWeights& weights, std::size_t window,
                                 const AttentionMask& mask, AttentionProbe* probe) {
  const Tensor img = as_windows(image);
  const bool has_prompts = prompts.defined() && prompts.size() > 0;
  Tensor kv_tokens = img;
  std::size_t s_p = 0;
  if (has_prompts) {
    const Tensor prm = as_windows(prompts);
    if (prm.dim(2) != img.dim(2)) {
      throw ShapeError("prompted attention: prompt dim " + std::to_string(prm.dim(2)) +
                       " != image dim " + std::to_string(img.dim(2)));
    }
    if (prm.dim(0) != img.dim(0)) throw ShapeError("prompted attention: window count mismatch");
    s_p = prm.dim(1);
    kv_tokens = ops::concat({img, prm}, 1);
  }
  if (img.dim(1) != window * window) throw ShapeError("prompted attention: S_I != w²");
  const Tensor q = project(img, weights.w_q, weights.b_q);
  const Tensor k = project(kv_tokens, weights.w_k, weights.b_k);
  const Tensor v = project(kv_tokens, weights.w_v, weights.b_v);
  const Tensor bias = build_relative_bias(weights, window, s_p);
  return attention_kernel(q, k, v, bias, mask, weights.heads, probe);
}

Tensor window_self_attention(const Tensor& image, const AttentionWeights& weights,
                             std::size_t window, const AttentionMask& mask) {
  const Tensor img = as_windows(image);
  if (img.dim(1) != window * window) throw ShapeError("window attention: S_I != w²");
  const Tensor q = project(img, weights.w_q, weights.b_q);
  const Tensor k = project(img, weights.w_k, weights.b_k);
  const Tensor v = project(img, weights.w_v, weights.b_v);
  return attention_kernel(q, k, v, build_relative_bias(weights, window, 0), mask, weights.heads);
}

Tensor prompted_attention(const TokenSet& tokens, const AttentionWeights& weights,
                          std::size_t window) {
  const Tensor out = prompted_window_attention(tokens.image_tokens, tokens.prompt_tokens, weights,
                                               window);
  return out.reshape({out.dim(1), out.dim(2)});
}

AttentionMask shifted_window_mask(const WindowLayout& l, bool with_prompts) {
  l.validate();
  const auto labels = shift_regions(l);
  const std::size_t s_i = l.tokens_per_window();
  std::size_t s_p = 0;
  WindowLayout pl;
  if (with_prompts) {
    pl = l.prompt_layout();
    s_p = pl.tokens_per_window();
  }
  const std::size_t s = s_i + s_p;
  auto mask = std::make_shared<Buffer>(l.window_count() * s_i * s, 0.0);
  if (l.shift == 0) return mask;

  std::vector<int> win_labels(s);
  for (std::size_t wy = 0; wy < l.windows_y(); ++wy) {
    for (std::size_t wx = 0; wx < l.windows_x(); ++wx) {
      for (std::size_t t = 0; t < s_i; ++t) {
        const std::size_t y = wy * l.window + t / l.window;
        const std::size_t x = wx * l.window + t % l.window;
        win_labels[t] = labels[y * l.width + x];
      }
      for (std::size_t t = 0; t < s_p; ++t) {
        // Prompt token at rolled prompt position covers rolled image position ×2.
        const std::size_t y = 2 * (wy * pl.window + t / pl.window);
        const std::size_t x = 2 * (wx * pl.window + t % pl.window);
        win_labels[s_i + t] = labels[y * l.width + x];
      }
      double* m = mask->data() + (wy * l.windows_x() + wx) * s_i * s;
      for (std::size_t i = 0; i < s_i; ++i) {
        for (std::size_t j = 0; j < s; ++j) {
          if (win_labels[i] != win_labels[j]) m[i * s + j] = kMaskValue;
        }
      }
    }
  }
  return mask;
}

std::size_t runtime_window(std::size_t table_window, std::size_t height, std::size_t width,
                           bool with_prompts) {
  std::size_t w = std::min({table_window, height, width});
  if (with_prompts && w % 2) --w;
  if (w == 0) throw ShapeError("grid too small for a prompted window");
  return w;
}

SwinLayer::SwinLayer(const SwinLayerConfig& config, Rng& rng)
    : config_(config),
      norm1_(config.channels),
      norm2_(config.channels),
      attn_(AttentionWeights::init(config.channels, config.heads, config.window, config.prompts,
                                   rng)),
      proj_(config.channels, config.channels, rng),
      mlp_(config.channels, config.channels * config.mlp_ratio, rng) {}

Tensor SwinLayer::forward(const Tensor& hwc, const Tensor& prompts, bool shifted,
                          AttentionProbe* probe) const {
  if (hwc.rank() != 3 || hwc.dim(2) != config_.channels) {
    throw ShapeError("swin layer: expected H×W×" + std::to_string(config_.channels) + ", got " +
                     shape_string(hwc.shape()));
  }
  const std::size_t h = hwc.dim(0), w = hwc.dim(1);
  const bool with_prompts = prompts.defined();
  if (with_prompts && !config_.prompts) throw ShapeError("swin layer built without prompt support");
  if (with_prompts) {
    if (h % 2 || w % 2 || prompts.rank() != 3 || prompts.dim(0) != h / 2 ||
        prompts.dim(1) != w / 2 || prompts.dim(2) != config_.channels) {
      throw ShapeError("swin layer: prompt map " + shape_string(prompts.shape()) +
                       " is not half of image map " + shape_string(hwc.shape()));
    }
  }

  const std::size_t win = runtime_window(config_.window, h, w, with_prompts);
  const std::size_t hp = (h + win - 1) / win * win;
  const std::size_t wp = (w + win - 1) / win * win;
  std::size_t shift = 0;
  if (shifted && hp > win && wp > win) {
    shift = win / 2;
    if (with_prompts && shift % 2) shift = 0;
  }
  const WindowLayout layout{hp, wp, win, shift};

  Tensor x = reflect_pad(norm1_.forward(hwc), hp, wp);
  Tensor img_windows = partition_windows(x, layout);
  Tensor prm_windows;
  if (with_prompts) {
    const WindowLayout pl = layout.prompt_layout();
    Tensor p = reflect_pad(norm1_.forward(prompts), pl.height, pl.width);
    prm_windows = partition_windows(p, pl);
  }
  AttentionMask mask = shift ? shifted_window_mask(layout, with_prompts) : nullptr;
  Tensor attended = prompted_window_attention(img_windows, prm_windows, attn_, win, mask, probe);
  if (probe) probe->layout = layout;
  Tensor merged = crop(merge_windows(proj_.forward(attended), layout), h, w);

  Tensor y = ops::add(hwc, merged);
  return ops::add(y, mlp_.forward(norm2_.forward(y)));
}

void SwinLayer::collect(ParameterList& out, const std::string& prefix) const {
  norm1_.collect(out, prefix + ".norm1");
  attn_.collect(out, prefix + ".attn");
  proj_.collect(out, prefix + ".proj");
  norm2_.collect(out, prefix + ".norm2");
  mlp_.collect(out, prefix + ".mlp");
}

void SwinLayer::zero_residual_branches() {
  ParameterList params;
  proj_.collect(params, "proj");
  mlp_.fc2().collect(params, "fc2");
  for (auto& p : params) {
    auto v = p.tensor.mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  }
}

StbBlock::StbBlock(const StbConfig& config, Rng& rng) : config_(config) {
  switch (config.resample) {
    case Resample::Down:
      down_ = Conv2d(config.in_channels, config.out_channels, 3, 2, 1, rng);
      break;
    case Resample::Up:
      up_ = ConvTranspose2d(config.in_channels, config.out_channels, 3, 2, 1, 1, rng);
      break;
    case Resample::Keep:
      down_ = Conv2d(config.in_channels, config.out_channels, 3, 1, 1, rng);
      break;
  }
  if (config.prompt_channels > 0) {
    const std::size_t count = config.share_prompts ? 1 : config.layers;
    const int s = config.prompt_stride;
    for (std::size_t i = 0; i < count; ++i) {
      if (s == 1) {
        prompt_proj_.emplace_back(config.prompt_channels, config.out_channels, 3, 1, 1, rng);
      } else {
        prompt_proj_.emplace_back(config.prompt_channels, config.out_channels, s, s, 0, rng);
      }
    }
  }
  SwinLayerConfig lc{config.out_channels, config.heads, config.window, config.mlp_ratio,
                     config.prompt_channels > 0};
  for (std::size_t i = 0; i < config.layers; ++i) layers_.emplace_back(lc, rng);
}

Tensor StbBlock::conv_path(const Tensor& chw) const {
  return config_.resample == Resample::Up ? up_.forward(chw) : down_.forward(chw);
}

Tensor StbBlock::prompt_tokens(const Tensor& prompt_features, std::size_t layer) const {
  const Conv2d& proj = prompt_proj_.at(config_.share_prompts ? 0 : layer);
  return chw_to_hwc(proj.forward(prompt_features));
}

Tensor StbBlock::forward(const Tensor& chw, const Tensor& prompt_features,
                         std::vector<AttentionProbe>* probes) const {
  const bool with_prompts = prompt_features.defined();
  if (with_prompts && !prompted()) throw ShapeError("plain STB received prompt features");
  Tensor x = chw_to_hwc(conv_path(chw));
  std::vector<Tensor> tokens(with_prompts ? prompt_proj_.size() : 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    tokens[i] = prompt_tokens(prompt_features, i);
    if (tokens[i].dim(0) * 2 != x.dim(0) || tokens[i].dim(1) * 2 != x.dim(1)) {
      throw ShapeError("P-STB: prompt tokens " + shape_string(tokens[i].shape()) +
                       " are not at half the image-token grid " + shape_string(x.shape()));
    }
  }
  if (probes) probes->assign(layers_.size(), {});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Tensor p = with_prompts ? tokens[config_.share_prompts ? 0 : l] : Tensor();
    x = layers_[l].forward(x, p, l % 2 == 1, probes ? &(*probes)[l] : nullptr);
  }
  return hwc_to_chw(x);
}

void StbBlock::collect(ParameterList& out, const std::string& prefix) const {
  if (config_.resample == Resample::Up) {
    up_.collect(out, prefix + ".up");
  } else {
    down_.collect(out, prefix + ".conv");
  }
  for (std::size_t i = 0; i < prompt_proj_.size(); ++i) {
    prompt_proj_[i].collect(out, prefix + ".prompt_proj" + std::to_string(i));
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].collect(out, prefix + ".layer" + std::to_string(i));
  }
}

}  // namespace picr
