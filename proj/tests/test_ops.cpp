// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "picr/mac_counter.hpp"
#include "picr/ops.hpp"
#include "test_support.hpp"

using namespace picr;
using picr::testing::gradient_check;
using picr::testing::random_projection;
using picr::testing::random_tensor;
using picr::testing::to_vector;

namespace {

// Direct-summation convolution used as a reference.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const long ci = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)),
             wd = static_cast<long>(x.dim(2));
  const long co = static_cast<long>(w.dim(0)), k = static_cast<long>(w.dim(2));
  const long oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(co * oh * ow));
  for (long o = 0; o < co; ++o)
    for (long y = 0; y < oh; ++y)
      for (long xx = 0; xx < ow; ++xx) {
        double acc = b[static_cast<std::size_t>(o)];
        for (long c = 0; c < ci; ++c)
          for (long ky = 0; ky < k; ++ky)
            for (long kx = 0; kx < k; ++kx) {
              const long iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += x[static_cast<std::size_t>((c * h + iy) * wd + ix)] *
                     w[static_cast<std::size_t>(((o * ci + c) * k + ky) * k + kx)];
            }
        out[static_cast<std::size_t>((o * oh + y) * ow + xx)] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches direct summation") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 7, 6}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  for (int stride : {1, 2}) {
    Tensor y = ops::conv2d(x, w, b, stride, 1);
    CHECK(picr::testing::max_abs_diff(y.values(), naive_conv(x, w, b, stride, 1)) < 1e-12);
  }
}

TEST_CASE("conv2d gradients") {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({2, 6, 6}, rng, 1.0, true);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5, true);
  Tensor b = random_tensor({3}, rng, 0.5, true);
  auto loss = [&] { return random_projection(ops::conv2d(x, w, b, 2, 1), 1); };
  CHECK(gradient_check(loss, {x, w, b}) < 1e-6);
}

TEST_CASE("transposed convolution is the adjoint of convolution") {
  std::mt19937_64 rng(3);
  // <conv(u), v> == <u, convT(v)> with shared weights and no bias.
  Tensor u = random_tensor({2, 8, 8}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor v = random_tensor({3, 4, 4}, rng);
  Tensor cu = ops::conv2d(u, w, Tensor(), 2, 1);
  Tensor tv = ops::conv_transpose2d(v, w, Tensor(), 2, 1, 1);
  REQUIRE(tv.shape() == Shape{2, 8, 8});
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cu.size(); ++i) lhs += cu[i] * v[i];
  for (std::size_t i = 0; i < u.size(); ++i) rhs += u[i] * tv[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("transposed convolution gradients") {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({3, 3, 4}, rng, 1.0, true);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5, true);
  Tensor b = random_tensor({2}, rng, 0.5, true);
  auto loss = [&] { return random_projection(ops::conv_transpose2d(x, w, b, 2, 1, 1), 2); };
  CHECK(gradient_check(loss, {x, w, b}) < 1e-6);
}

TEST_CASE("linear, layer norm and elementwise gradients") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 3, 5}, rng, 1.0, true);
  Tensor w = random_tensor({5, 4}, rng, 0.5, true);
  Tensor b = random_tensor({4}, rng, 0.5, true);
  Tensor g = random_tensor({4}, rng, 0.5, true);
  Tensor beta = random_tensor({4}, rng, 0.5, true);
  auto loss = [&] {
    Tensor h = ops::layer_norm(ops::linear(x, w, b), g, beta);
    h = ops::add(ops::gelu(h), ops::mul(ops::tanh(h), ops::sigmoid(h)));
    h = ops::add(h, ops::softplus(h));
    return random_projection(h, 3);
  };
  CHECK(gradient_check(loss, {x, w, b, g, beta}) < 1e-5);
}

TEST_CASE("broadcast, gather, concat and bmm gradients") {
  std::mt19937_64 rng(6);
  Tensor a = random_tensor({3, 2, 4}, rng, 1.0, true);
  Tensor c = random_tensor({3, 2, 1}, rng, 1.0, true);
  Tensor m = random_tensor({3, 4, 2}, rng, 1.0, true);
  auto loss = [&] {
    Tensor h = ops::mul_broadcast(ops::add_broadcast(a, c), c);
    Tensor p = ops::permute(h, {0, 2, 1});  // 3x4x2
    Tensor cat = ops::concat({p, m}, 2);    // 3x4x4
    Tensor s = ops::slice(cat, 2, 1, 3);    // 3x4x2
    Tensor prod = ops::bmm(a, s);           // 3x2x2
    return ops::add(random_projection(prod, 4), ops::mean(ops::square(ops::exp(ops::scale(s, 0.3)))));
  };
  CHECK(gradient_check(loss, {a, c, m}) < 1e-6);
}

TEST_CASE("lower bound passes gradient only where it can move the value up") {
  Tensor x = Tensor::parameter({3}, {-1.0, 0.5, 2.0});
  Tensor y = ops::lower_bound(x, 0.0);
  CHECK(to_vector(y) == std::vector<double>{0.0, 0.5, 2.0});
  backward(ops::sum(y));  // gradient +1 pushes values down: blocked below the bound
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
  x.zero_grad();
  backward(ops::scale(ops::sum(y), -1.0));
  CHECK(x.grad()[0] == -1.0);
}

TEST_CASE("no-grad mode records no graph") {
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  NoGradGuard guard;
  Tensor y = ops::square(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(ops::add(Tensor({2}), Tensor({3})), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), Tensor(), 1, 1), ShapeError);
  CHECK_THROWS_AS(ops::add_broadcast(Tensor({2, 3}), Tensor({2})), ShapeError);
}

TEST_CASE("kernels report multiply-accumulates") {
  MacTally tally;
  {
    MacRecorder rec(tally);
    ops::conv2d(Tensor({3, 16, 16}), Tensor({8, 3, 3, 3}), Tensor({8}), 1, 1);
    ops::linear(Tensor({10, 4}), Tensor({4, 5}), Tensor());
  }
  CHECK(tally.by_kind["conv"] == 55296);
  CHECK(tally.by_kind["linear"] == 200);
}
