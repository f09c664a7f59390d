// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "picr/tensor.hpp"

namespace picr {

using Rng = std::mt19937_64;

struct NamedParameter {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedParameter>;

Tensor uniform_parameter(Shape shape, double bound, Rng& rng);
Tensor normal_parameter(Shape shape, double stddev, Rng& rng);
Tensor constant_parameter(Shape shape, double value);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, int kernel, int stride, int pad,
         Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }
  int pad() const { return pad_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  int kernel_ = 0, stride_ = 1, pad_ = 0;
  Tensor weight_, bias_;
};

/// Transposed convolution that upsamples by `stride` exactly.
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t in_channels, std::size_t out_channels, int kernel, int stride,
                  int pad, int output_pad, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  int kernel_ = 0, stride_ = 1, pad_ = 0, output_pad_ = 0;
  Tensor weight_, bias_;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor weight_, bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t channels);

  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;

 private:
  Tensor gamma_, beta_;
};

/// Two-layer GELU perceptron on the channel axis.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t channels, std::size_t hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  Linear& fc1() { return fc1_; }
  Linear& fc2() { return fc2_; }
  const Linear& fc1() const { return fc1_; }
  const Linear& fc2() const { return fc2_; }

 private:
  Linear fc1_, fc2_;
};

}  // namespace picr
