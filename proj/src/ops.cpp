// SPDX-License-Identifier: Apache-2.0
#include "picr/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "picr/mac_counter.hpp"

namespace picr::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// Elementwise unary op; `deriv(x, y)` gives dy/dx.
template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D deriv) {
  const auto x = a.values();
  Buffer y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(a.shape(), std::move(y), {a}, [deriv](TensorNode& self) {
    auto& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
    }
  });
}

// Strides of `b` laid over `a`'s shape (0 on broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) throw ShapeError("broadcast: operand rank too large");
  std::vector<std::size_t> strides(a.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < b.size(); ++k) {
    const std::size_t bi = b.size() - 1 - k;
    const std::size_t ai = a.size() - 1 - k;
    if (b[bi] == a[ai]) {
      strides[ai] = stride;
    } else if (b[bi] != 1) {
      throw ShapeError("broadcast: " + shape_string(b) + " does not broadcast to " +
                       shape_string(a));
    }
    stride *= b[bi];
  }
  return strides;
}

std::vector<std::int64_t> broadcast_index(const Shape& a, const Shape& b) {
  const auto strides = broadcast_strides(a, b);
  const std::size_t n = numel(a);
  std::vector<std::int64_t> idx(n);
  std::vector<std::size_t> counter(a.size(), 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = static_cast<std::int64_t>(offset);
    for (std::size_t ax = a.size(); ax-- > 0;) {
      if (++counter[ax] < a[ax]) {
        offset += strides[ax];
        break;
      }
      offset -= strides[ax] * (a[ax] - 1);
      counter[ax] = 0;
    }
  }
  return idx;
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel;
  int stride, pad;
  std::size_t out_h, out_w;
};

ConvGeometry conv_geometry(std::size_t c, std::size_t h, std::size_t w, std::size_t k, int stride,
                           int pad) {
  const long oh = (static_cast<long>(h) + 2 * pad - static_cast<long>(k)) / stride + 1;
  const long ow = (static_cast<long>(w) + 2 * pad - static_cast<long>(k)) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv: input smaller than kernel");
  return {c, h, w, k, stride, pad, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)};
}

// col: (C·k·k) × (out_h·out_w)
void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t n = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * n;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* x) {
  const std::size_t n = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * n;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* dst = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
            if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void check_conv_args(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t in_axis,
                     std::size_t out_axis, const char* op) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": input must be C×H×W");
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw ShapeError(std::string(op) + ": weight must be 4-d with square kernel");
  }
  if (weight.dim(in_axis) != x.dim(0)) {
    throw ShapeError(std::string(op) + ": input has " + std::to_string(x.dim(0)) +
                     " channels, weight expects " + std::to_string(weight.dim(in_axis)));
  }
  if (bias.defined() && bias.size() != weight.dim(out_axis)) {
    throw ShapeError(std::string(op) + ": bias size mismatch");
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.values();
  const auto y = b.values();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.values();
  const auto y = b.values();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.values();
  const auto y = b.values();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    auto& l = *self.inputs[0];
    auto& r = *self.inputs[1];
    if (l.requires_grad) {
      auto& g = l.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * r.value[i];
    }
    if (r.requires_grad) {
      auto& g = r.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * l.value[i];
    }
  });
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  auto idx = std::make_shared<std::vector<std::int64_t>>(broadcast_index(a.shape(), b.shape()));
  const auto x = a.values();
  const auto y = b.values();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[(*idx)[i]];
  return make_result(a.shape(), std::move(out), {a, b}, [idx](TensorNode& self) {
    auto& l = *self.inputs[0];
    auto& r = *self.inputs[1];
    if (l.requires_grad) {
      auto& g = l.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (r.requires_grad) {
      auto& g = r.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*idx)[i]] += self.grad[i];
    }
  });
}

Tensor mul_broadcast(const Tensor& a, const Tensor& b) {
  auto idx = std::make_shared<std::vector<std::int64_t>>(broadcast_index(a.shape(), b.shape()));
  const auto x = a.values();
  const auto y = b.values();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[(*idx)[i]];
  return make_result(a.shape(), std::move(out), {a, b}, [idx](TensorNode& self) {
    auto& l = *self.inputs[0];
    auto& r = *self.inputs[1];
    if (l.requires_grad) {
      auto& g = l.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * r.value[(*idx)[i]];
    }
    if (r.requires_grad) {
      auto& g = r.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[(*idx)[i]] += self.grad[i] * l.value[i];
      }
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_result(Shape{}, Buffer{total}, {a}, [](TensorNode& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor abs(const Tensor& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor lower_bound(const Tensor& a, double bound) {
  const auto x = a.values();
  Buffer y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::max(x[i], bound);
  return make_result(a.shape(), std::move(y), {a}, [bound](TensorNode& self) {
    auto& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.value[i] >= bound || self.grad[i] < 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor gather(const Tensor& a, Index index, Shape out_shape) {
  if (index->size() != numel(out_shape)) throw ShapeError("gather: index/shape size mismatch");
  const auto x = a.values();
  Buffer out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto j = (*index)[i];
    if (j >= static_cast<std::int64_t>(x.size())) throw ShapeError("gather: index out of range");
    out[i] = j < 0 ? 0.0 : x[static_cast<std::size_t>(j)];
  }
  return make_result(std::move(out_shape), std::move(out), {a}, [index](TensorNode& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const auto j = (*index)[i];
      if (j >= 0) g[static_cast<std::size_t>(j)] += self.grad[i];
    }
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  if (axes.size() != in.size()) throw ShapeError("permute: axis count mismatch");
  std::vector<std::size_t> in_strides(in.size(), 1);
  for (std::size_t i = in.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(in.size());
  Shape strides(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    out[i] = in.at(axes[i]);
    strides[i] = in_strides[axes[i]];
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(numel(out));
  std::vector<std::size_t> counter(out.size(), 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < idx->size(); ++i) {
    (*idx)[i] = static_cast<std::int64_t>(offset);
    for (std::size_t ax = out.size(); ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        offset += strides[ax];
        break;
      }
      offset -= strides[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  return gather(a, std::move(idx), std::move(out));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat: shape mismatch " + shape_string(s) + " vs " +
                         shape_string(first));
      }
    }
    out[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  Buffer value(numel(out));
  const std::size_t out_row = out[axis] * inner;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t row = p.dim(axis) * inner;
    const auto src = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * row, row, value.data() + o * out_row + offset);
    }
    offset += row;
  }
  return make_result(std::move(out), std::move(value), parts,
                     [outer, out_row, offsets](TensorNode& self) {
                       for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                         auto& in = *self.inputs[k];
                         if (!in.requires_grad || in.value.empty()) continue;
                         auto& g = in.ensure_grad();
                         const std::size_t row = g.size() / outer;
                         for (std::size_t o = 0; o < outer; ++o) {
                           const double* src = self.grad.data() + o * out_row + offsets[k];
                           double* dst = g.data() + o * row;
                           for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& in = a.shape();
  if (axis >= in.size() || begin > end || end > in[axis]) {
    throw ShapeError("slice: bad range on " + shape_string(in));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  Shape out = in;
  out[axis] = end - begin;
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(numel(out));
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = begin; j < end; ++j) {
      for (std::size_t i = 0; i < inner; ++i) {
        idx->push_back(static_cast<std::int64_t>((o * in[axis] + j) * inner + i));
      }
    }
  }
  return gather(a, std::move(idx), std::move(out));
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  check_conv_args(x, weight, bias, 1, 0, "conv2d");
  const std::size_t co = weight.dim(0);
  const std::size_t k = weight.dim(2);
  const auto geom = conv_geometry(x.dim(0), x.dim(1), x.dim(2), k, stride, pad);
  const std::size_t n = geom.out_h * geom.out_w;
  const std::size_t kk = geom.channels * k * k;

  auto col = std::make_shared<Buffer>(kk * n);
  im2col(geom, x.values().data(), col->data());
  Buffer out(co * n);
  MapMat y(out.data(), static_cast<long>(co), static_cast<long>(n));
  y.noalias() = CMapMat(weight.values().data(), static_cast<long>(co), static_cast<long>(kk)) *
                CMapMat(col->data(), static_cast<long>(kk), static_cast<long>(n));
  if (bias.defined()) {
    for (std::size_t c = 0; c < co; ++c) y.row(static_cast<long>(c)).array() += bias[c];
  }
  record_macs("conv", static_cast<std::uint64_t>(co * kk * n));

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(Shape{co, geom.out_h, geom.out_w}, std::move(out), inputs,
                     [geom, col, co, kk, n](TensorNode& self) {
                       CMapMat dy(self.grad.data(), static_cast<long>(co), static_cast<long>(n));
                       auto& xin = *self.inputs[0];
                       auto& win = *self.inputs[1];
                       if (win.requires_grad) {
                         MapMat dw(win.ensure_grad().data(), static_cast<long>(co),
                                   static_cast<long>(kk));
                         dw.noalias() +=
                             dy * CMapMat(col->data(), static_cast<long>(kk), static_cast<long>(n))
                                      .transpose();
                       }
                       if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                         auto& db = self.inputs[2]->ensure_grad();
                         for (std::size_t c = 0; c < co; ++c) db[c] += dy.row(static_cast<long>(c)).sum();
                       }
                       if (xin.requires_grad) {
                         RowMat dcol = CMapMat(win.value.data(), static_cast<long>(co),
                                               static_cast<long>(kk))
                                           .transpose() *
                                       dy;
                         col2im_add(geom, dcol.data(), xin.ensure_grad().data());
                       }
                     });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
                        int pad, int output_pad) {
  check_conv_args(x, weight, bias, 0, 1, "conv_transpose2d");
  if (output_pad < 0 || output_pad >= stride) {
    throw ShapeError("conv_transpose2d: output_pad must be in [0, stride)");
  }
  const std::size_t ci = x.dim(0);
  const std::size_t co = weight.dim(1);
  const std::size_t k = weight.dim(2);
  const long oh = (static_cast<long>(x.dim(1)) - 1) * stride - 2 * pad + static_cast<long>(k) + output_pad;
  const long ow = (static_cast<long>(x.dim(2)) - 1) * stride - 2 * pad + static_cast<long>(k) + output_pad;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: empty output");
  // The output is the "input" side of the adjoint convolution.
  ConvGeometry geom{co, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), k, stride, pad,
                    x.dim(1), x.dim(2)};
  const std::size_t n = x.dim(1) * x.dim(2);
  const std::size_t kk = co * k * k;

  RowMat col = CMapMat(weight.values().data(), static_cast<long>(ci), static_cast<long>(kk))
                   .transpose() *
               CMapMat(x.values().data(), static_cast<long>(ci), static_cast<long>(n));
  Buffer out(co * geom.height * geom.width, 0.0);
  col2im_add(geom, col.data(), out.data());
  if (bias.defined()) {
    const std::size_t plane = geom.height * geom.width;
    for (std::size_t c = 0; c < co; ++c) {
      for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += bias[c];
    }
  }
  record_macs("conv_transpose", static_cast<std::uint64_t>(ci * kk * n));

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(Shape{co, geom.height, geom.width}, std::move(out), inputs,
                     [geom, ci, co, kk, n](TensorNode& self) {
                       Buffer dcol(kk * n);
                       im2col(geom, self.grad.data(), dcol.data());
                       CMapMat dc(dcol.data(), static_cast<long>(kk), static_cast<long>(n));
                       auto& xin = *self.inputs[0];
                       auto& win = *self.inputs[1];
                       if (xin.requires_grad) {
                         MapMat dx(xin.ensure_grad().data(), static_cast<long>(ci),
                                   static_cast<long>(n));
                         dx.noalias() += CMapMat(win.value.data(), static_cast<long>(ci),
                                                 static_cast<long>(kk)) *
                                         dc;
                       }
                       if (win.requires_grad) {
                         MapMat dw(win.ensure_grad().data(), static_cast<long>(ci),
                                   static_cast<long>(kk));
                         dw.noalias() += CMapMat(xin.value.data(), static_cast<long>(ci),
                                                 static_cast<long>(n)) *
                                         dc.transpose();
                       }
                       if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                         auto& db = self.inputs[2]->ensure_grad();
                         const std::size_t plane = geom.height * geom.width;
                         for (std::size_t c = 0; c < co; ++c) {
                           double s = 0.0;
                           for (std::size_t i = 0; i < plane; ++i) s += self.grad[c * plane + i];
                           db[c] += s;
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(0)) {
    throw ShapeError("linear: " + shape_string(x.shape()) + " × " + shape_string(weight.shape()));
  }
  const std::size_t cin = weight.dim(0);
  const std::size_t cout = weight.dim(1);
  if (bias.defined() && bias.size() != cout) throw ShapeError("linear: bias size mismatch");
  const std::size_t rows = x.size() / cin;
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Buffer out(rows * cout);
  MapMat y(out.data(), static_cast<long>(rows), static_cast<long>(cout));
  y.noalias() = CMapMat(x.values().data(), static_cast<long>(rows), static_cast<long>(cin)) *
                CMapMat(weight.values().data(), static_cast<long>(cin), static_cast<long>(cout));
  if (bias.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), static_cast<long>(cout));
  }
  record_macs("linear", static_cast<std::uint64_t>(rows * cin * cout));

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(out_shape), std::move(out), inputs,
                     [rows, cin, cout](TensorNode& self) {
                       CMapMat dy(self.grad.data(), static_cast<long>(rows), static_cast<long>(cout));
                       auto& xin = *self.inputs[0];
                       auto& win = *self.inputs[1];
                       if (xin.requires_grad) {
                         MapMat dx(xin.ensure_grad().data(), static_cast<long>(rows),
                                   static_cast<long>(cin));
                         dx.noalias() += dy * CMapMat(win.value.data(), static_cast<long>(cin),
                                                      static_cast<long>(cout))
                                                  .transpose();
                       }
                       if (win.requires_grad) {
                         MapMat dw(win.ensure_grad().data(), static_cast<long>(cin),
                                   static_cast<long>(cout));
                         dw.noalias() += CMapMat(xin.value.data(), static_cast<long>(rows),
                                                 static_cast<long>(cin))
                                             .transpose() *
                                         dy;
                       }
                       if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                         Eigen::Map<Eigen::RowVectorXd> db(self.inputs[2]->ensure_grad().data(),
                                                           static_cast<long>(cout));
                         db += dy.colwise().sum();
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = x.shape().empty() ? 0 : x.shape().back();
  if (c == 0 || gamma.size() != c || beta.size() != c) {
    throw ShapeError("layer_norm: parameter size mismatch for " + shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / c;
  const auto in = x.values();
  const auto gm = gamma.values();
  const auto bt = beta.values();
  auto xhat = std::make_shared<Buffer>(x.size());
  auto inv_std = std::make_shared<Buffer>(rows);
  Buffer out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * c;
    double mu = 0.0;
    for (std::size_t i = 0; i < c; ++i) mu += row[i];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      const double h = (row[i] - mu) * is;
      (*xhat)[r * c + i] = h;
      out[r * c + i] = h * gm[i] + bt[i];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, c, xhat, inv_std](TensorNode& self) {
                       auto& xin = *self.inputs[0];
                       auto& gin = *self.inputs[1];
                       auto& bin = *self.inputs[2];
                       if (gin.requires_grad || bin.requires_grad) {
                         auto& dg = gin.ensure_grad();
                         auto& db = bin.ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t i = 0; i < c; ++i) {
                             dg[i] += self.grad[r * c + i] * (*xhat)[r * c + i];
                             db[i] += self.grad[r * c + i];
                           }
                         }
                       }
                       if (!xin.requires_grad) return;
                       auto& dx = xin.ensure_grad();
                       const double inv_c = 1.0 / static_cast<double>(c);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double m1 = 0.0;
                         double m2 = 0.0;
                         for (std::size_t i = 0; i < c; ++i) {
                           const double dh = self.grad[r * c + i] * gin.value[i];
                           m1 += dh;
                           m2 += dh * (*xhat)[r * c + i];
                         }
                         m1 *= inv_c;
                         m2 *= inv_c;
                         for (std::size_t i = 0; i < c; ++i) {
                           const double dh = self.grad[r * c + i] * gin.value[i];
                           dx[r * c + i] +=
                               (*inv_std)[r] * (dh - m1 - (*xhat)[r * c + i] * m2);
                         }
                       }
                     });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: " + shape_string(a.shape()) + " × " + shape_string(b.shape()));
  }
  const long batch = static_cast<long>(a.dim(0));
  const long m = static_cast<long>(a.dim(1));
  const long k = static_cast<long>(a.dim(2));
  const long n = static_cast<long>(b.dim(2));
  Buffer out(static_cast<std::size_t>(batch * m * n));
  for (long i = 0; i < batch; ++i) {
    MapMat(out.data() + i * m * n, m, n).noalias() =
        CMapMat(a.values().data() + i * m * k, m, k) * CMapMat(b.values().data() + i * k * n, k, n);
  }
  return make_result(Shape{a.dim(0), a.dim(1), b.dim(2)}, std::move(out), {a, b},
                     [batch, m, k, n](TensorNode& self) {
                       auto& ain = *self.inputs[0];
                       auto& bin = *self.inputs[1];
                       for (long i = 0; i < batch; ++i) {
                         CMapMat dy(self.grad.data() + i * m * n, m, n);
                         if (ain.requires_grad) {
                           MapMat(ain.ensure_grad().data() + i * m * k, m, k).noalias() +=
                               dy * CMapMat(bin.value.data() + i * k * n, k, n).transpose();
                         }
                         if (bin.requires_grad) {
                           MapMat(bin.ensure_grad().data() + i * k * n, k, n).noalias() +=
                               CMapMat(ain.value.data() + i * m * k, m, k).transpose() * dy;
                         }
                       }
                     });
}

}  // namespace picr::ops
