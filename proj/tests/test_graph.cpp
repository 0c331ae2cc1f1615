#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "attni2i/graph.hpp"
#include "attni2i/rng.hpp"
#include "attni2i/tensor.hpp"
#include "gradcheck.hpp"

using namespace attni2i;
using attni2i::testing::gradcheck_max_rel_err;

namespace {

// Direct convolution, the oracle for the im2col/GEMM path.
Tensor<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w,
                            const Tensor<double>& b, int64_t stride, int64_t pad) {
  const int64_t B = x.size(0), Cin = x.size(1), H = x.size(2), W = x.size(3);
  const int64_t Cout = w.size(0), kh = w.size(2), kw = w.size(3);
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> y({B, Cout, Ho, Wo});
  for (int64_t bi = 0; bi < B; ++bi)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = b.defined() ? b[co] : 0.0;
          for (int64_t ci = 0; ci < Cin; ++ci)
            for (int64_t i = 0; i < kh; ++i)
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t ih = oh * stride - pad + i;
                const int64_t iw = ow * stride - pad + j;
                if (ih >= 0 && ih < H && iw >= 0 && iw < W)
                  acc += x.at(bi, ci, ih, iw) * w.at(co, ci, i, j);
              }
          y.at(bi, co, oh, ow) = acc;
        }
  return y;
}

// Direct transposed convolution (scatter form).
Tensor<double> naive_conv_transpose2d(const Tensor<double>& x,
                                      const Tensor<double>& w,
                                      const Tensor<double>& b, int64_t stride,
                                      int64_t pad, int64_t out_pad) {
  const int64_t B = x.size(0), Cin = x.size(1), H = x.size(2), W = x.size(3);
  const int64_t Cout = w.size(1), kh = w.size(2), kw = w.size(3);
  const int64_t Ho = (H - 1) * stride - 2 * pad + kh + out_pad;
  const int64_t Wo = (W - 1) * stride - 2 * pad + kw + out_pad;
  Tensor<double> y({B, Cout, Ho, Wo});
  for (int64_t bi = 0; bi < B; ++bi) {
    for (int64_t ci = 0; ci < Cin; ++ci)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t ww = 0; ww < W; ++ww)
          for (int64_t co = 0; co < Cout; ++co)
            for (int64_t i = 0; i < kh; ++i)
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t oh = h * stride - pad + i;
                const int64_t ow = ww * stride - pad + j;
                if (oh >= 0 && oh < Ho && ow >= 0 && ow < Wo)
                  y.at(bi, co, oh, ow) +=
                      x.at(bi, ci, h, ww) * w.at(ci, co, i, j);
              }
    if (b.defined())
      for (int64_t co = 0; co < Cout; ++co)
        for (int64_t oh = 0; oh < Ho; ++oh)
          for (int64_t ow = 0; ow < Wo; ++ow) y.at(bi, co, oh, ow) += b[co];
  }
  return y;
}

Tensor<double> randu(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  return Tensor<double>::rand_uniform(std::move(shape), rng, lo, hi);
}

}  // namespace

TEST_CASE("conv2d matches direct convolution") {
  Rng rng(11);
  for (const auto& [stride, pad] : std::vector<std::pair<int64_t, int64_t>>{
           {1, 0}, {1, 1}, {2, 1}}) {
    auto x = randu({2, 3, 7, 6}, rng);
    auto w = randu({4, 3, 3, 3}, rng);
    auto b = randu({4}, rng);
    Graph<double> g;
    auto y = g.conv2d(g.input(x), g.input(w), g.input(b), stride, pad);
    auto ref = naive_conv2d(x, w, b, stride, pad);
    REQUIRE(g.value(y).shape() == ref.shape());
    REQUIRE(max_abs_diff(g.value(y), ref) < 1e-12);
  }
}

TEST_CASE("conv_transpose2d matches direct scatter") {
  Rng rng(12);
  auto x = randu({2, 3, 5, 4}, rng);
  auto w = randu({3, 2, 3, 3}, rng);
  auto b = randu({2}, rng);
  Graph<double> g;
  auto y = g.conv_transpose2d(g.input(x), g.input(w), g.input(b), 2, 1, 1);
  auto ref = naive_conv_transpose2d(x, w, b, 2, 1, 1);
  REQUIRE(g.value(y).shape() == ref.shape());
  REQUIRE(max_abs_diff(g.value(y), ref) < 1e-12);
  // stride-2, pad-1, out-pad-1 exactly doubles the spatial size
  REQUIRE(g.value(y).size(2) == 10);
  REQUIRE(g.value(y).size(3) == 8);
}

TEST_CASE("conv gradients match finite differences") {
  Rng rng(13);
  auto x = randu({2, 2, 5, 5}, rng);
  auto w = randu({3, 2, 3, 3}, rng, -0.5, 0.5);
  auto b = randu({3}, rng, -0.1, 0.1);
  auto proj = randu({2, 3, 3, 3}, rng);
  const double err = gradcheck_max_rel_err(
      {x, w, b}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
        return g.inner_const(g.conv2d(v[0], v[1], v[2], 2, 1), proj);
      });
  REQUIRE(err < 1e-6);
}

TEST_CASE("conv_transpose gradients match finite differences") {
  Rng rng(14);
  auto x = randu({2, 3, 4, 4}, rng);
  auto w = randu({3, 2, 3, 3}, rng, -0.5, 0.5);
  auto b = randu({2}, rng, -0.1, 0.1);
  auto proj = randu({2, 2, 8, 8}, rng);
  const double err = gradcheck_max_rel_err(
      {x, w, b}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
        return g.inner_const(g.conv_transpose2d(v[0], v[1], v[2], 2, 1, 1), proj);
      });
  REQUIRE(err < 1e-6);
}

TEST_CASE("instance_norm normalizes and backpropagates correctly") {
  Rng rng(15);
  auto x = randu({2, 3, 4, 5}, rng, -2.0, 2.0);
  Graph<double> g;
  auto y = g.instance_norm(g.input(x));
  // per-(b,c) mean 0, variance 1
  const auto& ys = g.value(y);
  for (int64_t bc = 0; bc < 6; ++bc) {
    double m = 0, v = 0;
    for (int64_t i = 0; i < 20; ++i) m += ys[bc * 20 + i];
    m /= 20;
    for (int64_t i = 0; i < 20; ++i) {
      const double d = ys[bc * 20 + i] - m;
      v += d * d;
    }
    v /= 20;
    REQUIRE(std::abs(m) < 1e-10);
    REQUIRE(std::abs(v - 1.0) < 1e-4);
  }
  auto proj = randu({2, 3, 4, 5}, rng);
  const double err = gradcheck_max_rel_err(
      {x}, [&](Graph<double>& gg, std::vector<Var<double>>& v) {
        return gg.inner_const(gg.instance_norm(v[0]), proj);
      });
  REQUIRE(err < 1e-5);
}

TEST_CASE("activation gradients") {
  Rng rng(16);
  // keep relu/leaky inputs away from the kink at 0
  auto x = randu({2, 3, 4, 4}, rng, 0.1, 1.5);
  auto xn = randu({2, 3, 4, 4}, rng, -1.5, -0.1);
  auto proj = randu({2, 3, 4, 4}, rng);
  auto check = [&](auto op, const Tensor<double>& in) {
    return gradcheck_max_rel_err(
        {in}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
          return g.inner_const(op(g, v[0]), proj);
        });
  };
  REQUIRE(check([](auto& g, auto v) { return g.relu(v); }, x) < 1e-7);
  REQUIRE(check([](auto& g, auto v) { return g.relu(v); }, xn) < 1e-7);
  REQUIRE(check([](auto& g, auto v) { return g.leaky_relu(v, 0.2); }, xn) < 1e-7);
  REQUIRE(check([](auto& g, auto v) { return g.tanh_(v); }, x) < 1e-6);
  REQUIRE(check([](auto& g, auto v) { return g.sigmoid(v); }, xn) < 1e-6);
}

TEST_CASE("softmax_channels properties and gradient") {
  Rng rng(17);
  auto x = randu({2, 5, 3, 3}, rng, -3.0, 3.0);
  Graph<double> g;
  auto y = g.softmax_channels(g.input(x));
  const auto& ys = g.value(y);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t p = 0; p < 9; ++p) {
      double sum = 0;
      for (int64_t c = 0; c < 5; ++c) sum += ys[(b * 5 + c) * 9 + p];
      REQUIRE(std::abs(sum - 1.0) < 1e-12);
    }
  auto proj = randu({2, 5, 3, 3}, rng);
  const double err = gradcheck_max_rel_err(
      {x}, [&](Graph<double>& gg, std::vector<Var<double>>& v) {
        return gg.inner_const(gg.softmax_channels(v[0]), proj);
      });
  REQUIRE(err < 1e-6);
}

TEST_CASE("reflection_pad mirrors without edge repetition") {
  Tensor<double> x = Tensor<double>::from_vector(
      {1, 1, 2, 3}, {1, 2, 3,
                     4, 5, 6});
  Graph<double> g;
  auto y = g.reflection_pad(g.input(x), 1);
  const auto& v = g.value(y);
  REQUIRE(v.shape() == std::vector<int64_t>({1, 1, 4, 5}));
  // row -1 mirrors row 1, column -1 mirrors column 1
  REQUIRE(v.at(0, 0, 0, 0) == 5.0);
  REQUIRE(v.at(0, 0, 1, 0) == 2.0);
  REQUIRE(v.at(0, 0, 1, 1) == 1.0);
  REQUIRE(v.at(0, 0, 3, 4) == 2.0);

  Rng rng(18);
  auto xr = randu({2, 2, 4, 4}, rng);
  auto proj = randu({2, 2, 8, 8}, rng);
  const double err = gradcheck_max_rel_err(
      {xr}, [&](Graph<double>& gg, std::vector<Var<double>>& v2) {
        return gg.inner_const(gg.reflection_pad(v2[0], 2), proj);
      });
  REQUIRE(err < 1e-7);
}

TEST_CASE("structural ops gradients") {
  Rng rng(19);
  auto a = randu({2, 3, 4, 4}, rng);
  auto b = randu({2, 2, 4, 4}, rng);
  auto m = randu({2, 1, 4, 4}, rng, 0.1, 0.9);
  auto proj5 = randu({2, 5, 4, 4}, rng);
  auto proj3 = randu({2, 3, 4, 4}, rng);
  auto proj1 = randu({2, 1, 4, 4}, rng);

  REQUIRE(gradcheck_max_rel_err(
              {a, b}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                return g.inner_const(g.concat_channels(v[0], v[1]), proj5);
              }) < 1e-7);
  REQUIRE(gradcheck_max_rel_err(
              {a}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                return g.inner_const(g.slice_channels(v[0], 1, 2), proj1);
              }) < 1e-7);
  REQUIRE(gradcheck_max_rel_err(
              {a, m}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                return g.inner_const(g.mul_mask(v[0], v[1]), proj3);
              }) < 1e-7);
  REQUIRE(gradcheck_max_rel_err(
              {a}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                return g.inner_const(g.view(v[0], {2, 12, 2, 2}),
                                     proj3.reshaped({2, 12, 2, 2}));
              }) < 1e-7);
}

TEST_CASE("loss-style reduction gradients") {
  Rng rng(20);
  auto a = randu({2, 3, 4, 4}, rng, 0.3, 1.0);
  auto b = randu({2, 3, 4, 4}, rng, -1.0, -0.3);  // keep |a-b| away from 0
  auto m = randu({2, 1, 4, 4}, rng, 0.1, 0.9);

  REQUIRE(gradcheck_max_rel_err(
              {a, b}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                return g.l1_mean(v[0], v[1]);
              }) < 1e-6);
  REQUIRE(gradcheck_max_rel_err(
              {a}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                return g.mse_to_const(v[0], 1.0);
              }) < 1e-6);
  REQUIRE(gradcheck_max_rel_err(
              {m}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                return g.tv_sum(v[0]);
              }) < 1e-6);
  REQUIRE(gradcheck_max_rel_err(
              {a}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                return g.mean_all(v[0]);
              }) < 1e-7);
  REQUIRE(gradcheck_max_rel_err(
              {a, b}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                return g.weighted_sum({g.mean_all(v[0]), g.l1_mean(v[0], v[1])},
                                      {0.5, 10.0});
              }) < 1e-6);
}

TEST_CASE("parameter reuse accumulates gradients across call sites") {
  // f(p) = mean(p) + mean(p*p): the same leaf feeds two branches.
  Rng rng(21);
  auto p = randu({2, 2, 2, 2}, rng, 0.2, 1.0);
  REQUIRE(gradcheck_max_rel_err(
              {p}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
                auto twice = g.mul(v[0], v[0]);
                return g.weighted_sum(
                    {g.mean_all(v[0]), g.mean_all(twice)}, {1.0, 1.0});
              }) < 1e-6);

  // param() dedupes by buffer: registering twice yields one node
  Graph<double> g;
  auto v1 = g.param(p);
  auto v2 = g.param(p);
  REQUIRE(v1.id == v2.id);
}

TEST_CASE("frozen parameters receive no gradient work") {
  Rng rng(22);
  auto x = randu({1, 2, 4, 4}, rng);
  auto w = randu({2, 2, 3, 3}, rng);
  Graph<double> g;
  auto vx = g.param(x, true);
  auto vw = g.param(w, false);
  auto loss = g.mean_all(g.conv2d(vx, vw, Var<double>{}, 1, 1));
  g.backward(loss);
  auto gw = g.grad_for(w);
  for (int64_t i = 0; i < gw.numel(); ++i) REQUIRE(gw[i] == 0.0);
  auto gx = g.grad_for(x);
  double nz = 0;
  for (int64_t i = 0; i < gx.numel(); ++i) nz += std::abs(gx[i]);
  REQUIRE(nz > 0.0);
}

TEST_CASE("forward is deterministic given identical inputs") {
  Rng rng(23);
  auto x = randu({2, 3, 8, 8}, rng);
  auto w = randu({4, 3, 3, 3}, rng);
  auto run = [&]() {
    Graph<double> g;
    auto y = g.instance_norm(g.conv2d(g.input(x), g.input(w), Var<double>{}, 2, 1));
    return g.value(g.relu(y)).clone();
  };
  REQUIRE(bitwise_equal(run(), run()));
}

TEST_CASE("checked() surfaces non-finite activations with context") {
  Tensor<double> x = Tensor<double>::from_vector({1, 1, 1, 2}, {1.0, INFINITY});
  Graph<double> g;
  auto v = g.input(x);
  REQUIRE_THROWS_AS(checked(v, "encoder.conv1"), NumericError);
  REQUIRE_THROWS_WITH(checked(v, "encoder.conv1"),
                      Catch::Matchers::ContainsSubstring("encoder.conv1"));
}
