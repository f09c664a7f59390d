// SPDX-License-Identifier: Apache-2.0
#include "picr/layers.hpp"

#include <cmath>

#include "picr/ops.hpp"

namespace picr {

Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Buffer v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor normal_parameter(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Buffer v(numel(shape));
  // Truncated at two standard deviations.
  for (double& x : v) {
    do {
      x = dist(rng);
    } while (std::fabs(x) > 2.0 * stddev);
  }
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor constant_parameter(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return Tensor::parameter(std::move(shape), Buffer(n, value));
}

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, int kernel, int stride, int pad,
               Rng& rng)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad) {
  const double fan_in = static_cast<double>(in_channels) * kernel * kernel;
  const double bound = 1.0 / std::sqrt(fan_in);
  const auto k = static_cast<std::size_t>(kernel);
  weight_ = uniform_parameter({out_channels, in_channels, k, k}, bound * std::sqrt(3.0), rng);
  bias_ = uniform_parameter({out_channels}, bound, rng);
}

Tensor Conv2d::forward(const Tensor& x) const {
  return ops::conv2d(x, weight_, bias_, stride_, pad_);
}

void Conv2d::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight_});
  out.push_back({prefix + ".bias", bias_});
}

ConvTranspose2d::ConvTranspose2d(std::size_t in_channels, std::size_t out_channels, int kernel,
                                 int stride, int pad, int output_pad, Rng& rng)
    : in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      output_pad_(output_pad) {
  // Each output pixel receives about in·k²/stride² contributions.
  const double fan_in =
      static_cast<double>(in_channels) * kernel * kernel / static_cast<double>(stride * stride);
  const double bound = 1.0 / std::sqrt(fan_in);
  const auto k = static_cast<std::size_t>(kernel);
  weight_ = uniform_parameter({in_channels, out_channels, k, k}, bound * std::sqrt(3.0), rng);
  bias_ = uniform_parameter({out_channels}, bound, rng);
}

Tensor ConvTranspose2d::forward(const Tensor& x) const {
  return ops::conv_transpose2d(x, weight_, bias_, stride_, pad_, output_pad_);
}

void ConvTranspose2d::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight_});
  out.push_back({prefix + ".bias", bias_});
}

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
    : in_(in_features), out_(out_features) {
  weight_ = normal_parameter({in_features, out_features}, 0.02, rng);
  bias_ = constant_parameter({out_features}, 0.0);
}

Tensor Linear::forward(const Tensor& x) const { return ops::linear(x, weight_, bias_); }

void Linear::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight_});
  out.push_back({prefix + ".bias", bias_});
}

LayerNorm::LayerNorm(std::size_t channels)
    : gamma_(constant_parameter({channels}, 1.0)), beta_(constant_parameter({channels}, 0.0)) {}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma_, beta_); }

void LayerNorm::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma_});
  out.push_back({prefix + ".beta", beta_});
}

Mlp::Mlp(std::size_t channels, std::size_t hidden, Rng& rng)
    : fc1_(channels, hidden, rng), fc2_(hidden, channels, rng) {}

Tensor Mlp::forward(const Tensor& x) const { return fc2_.forward(ops::gelu(fc1_.forward(x))); }

void Mlp::collect(ParameterList& out, const std::string& prefix) const {
  fc1_.collect(out, prefix + ".fc1");
  fc2_.collect(out, prefix + ".fc2");
}

}  // namespace picr
