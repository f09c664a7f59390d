// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "picr/ops.hpp"
#include "picr/tensor.hpp"

namespace picr::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0,
                            bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return requires_grad ? Tensor::parameter(std::move(shape), std::move(v))
                       : Tensor(std::move(shape), std::move(v));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

/// Worst relative disagreement between analytic and central-difference
/// gradients of `loss()` with respect to each tensor in `wrt`.
///
/// `loss` must rebuild the graph from the current tensor values on every call.
inline double gradient_check(const std::function<Tensor()>& loss, std::vector<Tensor> wrt,
                             double step = 1e-4, double abs_floor = 1e-7) {
  for (auto& t : wrt) t.zero_grad();
  Tensor l = loss();
  backward(l);
  double worst = 0.0;
  for (auto& t : wrt) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(t.size(), 0.0);
    auto vals = t.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + step;
      double up;
      double down;
      {
        NoGradGuard guard;
        up = loss().item();
        vals[i] = saved - step;
        down = loss().item();
      }
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double scale = std::max({std::fabs(numeric), std::fabs(analytic[i]), abs_floor});
      worst = std::max(worst, std::fabs(numeric - analytic[i]) / scale);
    }
  }
  return worst;
}

/// Weighted sum with fixed random weights, to project an output onto a scalar.
inline Tensor random_projection(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(out.size());
  for (double& x : w) x = dist(rng);
  return ops::sum(ops::mul(out, Tensor(out.shape(), std::move(w))));
}

/// Explicit-loop prompted attention for one window.
///
/// xi: S_I×d, xp: S_P×d, weights d×d row-major (x·W), bias [heads][S_I][S].
inline std::vector<double> loop_prompted_attention(
    const std::vector<double>& xi, const std::vector<double>& xp, std::size_t s_i,
    std::size_t s_p, std::size_t d, const std::vector<double>& wq, const std::vector<double>& wk,
    const std::vector<double>& wv, const std::vector<double>& bq, const std::vector<double>& bk,
    const std::vector<double>& bv, const std::vector<double>& bias, std::size_t heads) {
  const std::size_t s = s_i + s_p;
  auto token = [&](std::size_t t, std::size_t c) {
    return t < s_i ? xi[t * d + c] : xp[(t - s_i) * d + c];
  };
  std::vector<double> q(s_i * d, 0.0), k(s * d, 0.0), v(s * d, 0.0);
  for (std::size_t t = 0; t < s; ++t) {
    for (std::size_t o = 0; o < d; ++o) {
      double acc_k = bk.empty() ? 0.0 : bk[o];
      double acc_v = bv.empty() ? 0.0 : bv[o];
      double acc_q = bq.empty() ? 0.0 : bq[o];
      for (std::size_t c = 0; c < d; ++c) {
        acc_k += token(t, c) * wk[c * d + o];
        acc_v += token(t, c) * wv[c * d + o];
        if (t < s_i) acc_q += token(t, c) * wq[c * d + o];
      }
      k[t * d + o] = acc_k;
      v[t * d + o] = acc_v;
      if (t < s_i) q[t * d + o] = acc_q;
    }
  }
  const std::size_t dh = d / heads;
  std::vector<double> out(s_i * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < s_i; ++i) {
      std::vector<double> score(s);
      double mx = -1e300;
      for (std::size_t j = 0; j < s; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        score[j] = dot / std::sqrt(static_cast<double>(dh)) + bias[(h * s_i + i) * s + j];
        mx = std::max(mx, score[j]);
      }
      double z = 0.0;
      for (double& x : score) {
        x = std::exp(x - mx);
        z += x;
      }
      for (std::size_t j = 0; j < s; ++j) {
        for (std::size_t c = 0; c < dh; ++c) {
          out[i * d + h * dh + c] += score[j] / z * v[j * d + h * dh + c];
        }
      }
    }
  }
  return out;
}

inline std::vector<double> to_vector(const Tensor& t) {
  return {t.values().begin(), t.values().end()};
}

}  // namespace picr::testing
