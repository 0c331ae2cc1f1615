#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "attni2i/masks.hpp"
#include "attni2i/rng.hpp"
#include "gradcheck.hpp"

using namespace attni2i;
using attni2i::testing::gradcheck_max_rel_err;

namespace {

template <typename T>
AttentionMaskSet<T> mask_set(Tensor<T> t, Scheme s) {
  return AttentionMaskSet<T>(std::move(t), s);
}

// Attention tensor whose rows are valid softmax outputs, away from 0/1.
Tensor<double> random_valid_attention(int64_t B, int64_t n, int64_t H, int64_t W,
                                      Rng& rng) {
  auto logits = Tensor<double>::rand_uniform({B, n, H, W}, rng, -1.0, 1.0);
  return channel_softmax(logits).data;
}

}  // namespace

TEST_CASE("channel_softmax: equal logits split evenly") {
  auto logits = Tensor<double>::full({1, 10, 2, 2}, 1.7);
  auto masks = channel_softmax(logits);
  REQUIRE(masks.scheme == Scheme::MultiMask);
  REQUIRE(masks.n_masks == 10);
  for (const double v : masks.data) REQUIRE(v == Catch::Approx(0.1).margin(1e-12));
}

TEST_CASE("channel_softmax: two-logit pixel evaluates to exp-normalize") {
  auto logits = Tensor<double>::from_vector({1, 2, 1, 1}, {0.0, std::log(2.0)});
  auto masks = channel_softmax(logits);
  // oracle: exp(0)/(exp(0)+exp(ln 2)) = 1/3, exp(ln 2)/(1+2) = 2/3
  REQUIRE(masks.data[0] == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  REQUIRE(masks.data[1] == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("channel_softmax: shift invariance and order preservation") {
  Rng rng(5);
  auto logits = Tensor<double>::rand_uniform({2, 6, 3, 3}, rng, -2.0, 2.0);
  auto shifted = logits.clone();
  for (auto& v : shifted) v += 11.25;
  auto a = channel_softmax(logits);
  auto b = channel_softmax(shifted);
  REQUIRE(max_abs_diff(a.data, b.data) < 1e-12);

  const int64_t HW = 9;
  for (int64_t bi = 0; bi < 2; ++bi)
    for (int64_t p = 0; p < HW; ++p)
      for (int64_t c = 1; c < 6; ++c) {
        const double l0 = logits[(bi * 6 + c - 1) * HW + p];
        const double l1 = logits[(bi * 6 + c) * HW + p];
        const double m0 = a.data[(bi * 6 + c - 1) * HW + p];
        const double m1 = a.data[(bi * 6 + c) * HW + p];
        REQUIRE((l0 < l1) == (m0 < m1));
      }
}

TEST_CASE("channel_softmax: sums to one per pixel over 1000 random trials") {
  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    auto logits = Tensor<float>::rand_uniform({1, 4, 1, 1}, rng, -8.0f, 8.0f);
    auto masks = channel_softmax(logits);
    float sum = 0;
    for (const float v : masks.data) sum += v;
    REQUIRE(std::abs(sum - 1.0f) < 1e-5f);
  }
}

TEST_CASE("channel_softmax: rejects non-finite logits and single channel") {
  auto bad = Tensor<double>::full({1, 2, 1, 1}, 0.0);
  bad[0] = std::nan("");
  REQUIRE_THROWS_AS(channel_softmax(bad), InvalidInput);
  auto single = Tensor<double>::full({1, 1, 2, 2}, 0.0);
  REQUIRE_THROWS_AS(channel_softmax(single), InvalidInput);
}

TEST_CASE("fuse_single: saturated masks select content or input") {
  Rng rng(7);
  auto x = ImageBatch<double>(Tensor<double>::rand_uniform({2, 3, 4, 4}, rng, -1, 1));
  auto c = ContentMaskSet<double>(
      Tensor<double>::rand_uniform({2, 1, 3, 4, 4}, rng, -1, 1));

  auto ones = mask_set(Tensor<double>::full({2, 1, 4, 4}, 1.0), Scheme::SingleMask);
  auto out1 = fuse_single(x, c, ones);
  REQUIRE(max_abs_diff(out1.data, c.flat()) == 0.0);

  auto zeros = mask_set(Tensor<double>::full({2, 1, 4, 4}, 0.0), Scheme::SingleMask);
  auto out0 = fuse_single(x, c, zeros);
  REQUIRE(max_abs_diff(out0.data, x.data) == 0.0);
}

TEST_CASE("fuse_single: scalar pixel arithmetic") {
  // oracle: 0.8 * 0.5 + 0.2 * (1 - 0.5) = 0.5
  auto x = ImageBatch<double>(Tensor<double>::full({1, 3, 1, 1}, 0.2));
  auto c = ContentMaskSet<double>(Tensor<double>::full({1, 1, 3, 1, 1}, 0.8));
  auto a = mask_set(Tensor<double>::full({1, 1, 1, 1}, 0.5), Scheme::SingleMask);
  auto out = fuse_single(x, c, a);
  for (const double v : out.data) REQUIRE(v == Catch::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("fuse_single: shape and scheme violations raise invalid-input") {
  Rng rng(8);
  auto x = ImageBatch<double>(Tensor<double>::rand_uniform({1, 3, 4, 4}, rng, -1, 1));
  auto c = ContentMaskSet<double>(
      Tensor<double>::rand_uniform({1, 1, 3, 4, 4}, rng, -1, 1));
  auto wrong_hw = mask_set(Tensor<double>::full({1, 1, 2, 2}, 0.5), Scheme::SingleMask);
  REQUIRE_THROWS_AS(fuse_single(x, c, wrong_hw), InvalidInput);
  auto multi = mask_set(Tensor<double>::full({1, 2, 4, 4}, 0.5), Scheme::MultiMask);
  REQUIRE_THROWS_AS(fuse_single(x, c, multi), InvalidInput);
  auto out_of_range =
      mask_set(Tensor<double>::full({1, 1, 4, 4}, 1.5), Scheme::SingleMask);
  REQUIRE_THROWS_AS(fuse_single(x, c, out_of_range), InvalidInput);
}

TEST_CASE("fuse_multi: background-only and foreground-only masks") {
  Rng rng(9);
  auto x = ImageBatch<double>(Tensor<double>::rand_uniform({2, 3, 4, 4}, rng, -1, 1));
  auto c = ContentMaskSet<double>(
      Tensor<double>::rand_uniform({2, 1, 3, 4, 4}, rng, -1, 1));

  // n=2: [foreground, background]
  Tensor<double> afg({2, 2, 4, 4});
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t p = 0; p < 16; ++p) {
      afg[(b * 2 + 0) * 16 + p] = 1.0;
      afg[(b * 2 + 1) * 16 + p] = 0.0;
    }
  auto outc = fuse_multi(x, c, mask_set(afg, Scheme::MultiMask));
  REQUIRE(max_abs_diff(outc.data, c.flat()) == 0.0);

  Tensor<double> abg({2, 2, 4, 4});
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t p = 0; p < 16; ++p) {
      abg[(b * 2 + 0) * 16 + p] = 0.0;
      abg[(b * 2 + 1) * 16 + p] = 1.0;
    }
  auto outx = fuse_multi(x, c, mask_set(abg, Scheme::MultiMask));
  REQUIRE(max_abs_diff(outx.data, x.data) == 0.0);
}

TEST_CASE("fuse_multi: three-mask pixel arithmetic") {
  // oracle: 0.2*1.0 + 0.3*0.0 + 0.5*0.4 = 0.4
  auto x = ImageBatch<double>(Tensor<double>::full({1, 3, 1, 1}, 0.4));
  Tensor<double> craw({1, 2, 3, 1, 1});
  for (int64_t ch = 0; ch < 3; ++ch) {
    craw[0 * 3 + ch] = 1.0;  // C^1
    craw[1 * 3 + ch] = 0.0;  // C^2
  }
  auto c = ContentMaskSet<double>(craw);
  auto a = mask_set(Tensor<double>::from_vector({1, 3, 1, 1}, {0.2, 0.3, 0.5}),
                    Scheme::MultiMask);
  auto out = fuse_multi(x, c, a);
  for (const double v : out.data) REQUIRE(v == Catch::Approx(0.4).epsilon(1e-15));
}

TEST_CASE("fuse_multi: content/mask count and normalization violations") {
  Rng rng(10);
  auto x = ImageBatch<double>(Tensor<double>::rand_uniform({1, 3, 4, 4}, rng, -1, 1));
  auto c2 = ContentMaskSet<double>(
      Tensor<double>::rand_uniform({1, 2, 3, 4, 4}, rng, -1, 1));
  // n_masks = 2 but two content images: must reject
  auto a2 = mask_set(Tensor<double>::full({1, 2, 4, 4}, 0.5), Scheme::MultiMask);
  REQUIRE_THROWS_AS(fuse_multi(x, c2, a2), InvalidInput);
  // unnormalized rows: must reject
  auto c1 = ContentMaskSet<double>(
      Tensor<double>::rand_uniform({1, 1, 3, 4, 4}, rng, -1, 1));
  auto bad = mask_set(Tensor<double>::full({1, 2, 4, 4}, 0.4), Scheme::MultiMask);
  REQUIRE_THROWS_AS(fuse_multi(x, c1, bad), InvalidInput);
}

TEST_CASE("cycle fusions equal their forward kernels") {
  Rng rng(24);
  auto gx = ImageBatch<double>(Tensor<double>::rand_uniform({2, 3, 5, 5}, rng, -1, 1));
  auto c1 = ContentMaskSet<double>(
      Tensor<double>::rand_uniform({2, 1, 3, 5, 5}, rng, -1, 1));
  auto a1 = mask_set(Tensor<double>::rand_uniform({2, 1, 5, 5}, rng, 0.0, 1.0),
                     Scheme::SingleMask);
  REQUIRE(bitwise_equal(fuse_single_cycle(gx, c1, a1).data,
                        fuse_single(gx, c1, a1).data));

  auto c3 = ContentMaskSet<double>(
      Tensor<double>::rand_uniform({2, 3, 3, 5, 5}, rng, -1, 1));
  auto a4 = mask_set(random_valid_attention(2, 4, 5, 5, rng), Scheme::MultiMask);
  REQUIRE(bitwise_equal(fuse_multi_cycle(gx, c3, a4).data,
                        fuse_multi(gx, c3, a4).data));

  // saturated cases on the cycle entry points
  auto ones = mask_set(Tensor<double>::full({2, 1, 5, 5}, 1.0), Scheme::SingleMask);
  REQUIRE(max_abs_diff(fuse_single_cycle(gx, c1, ones).data, c1.flat()) == 0.0);
  auto zeros = mask_set(Tensor<double>::full({2, 1, 5, 5}, 0.0), Scheme::SingleMask);
  REQUIRE(max_abs_diff(fuse_single_cycle(gx, c1, zeros).data, gx.data) == 0.0);
}

TEST_CASE("fuse_multi output is a convex combination of inputs") {
  Rng rng(25);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t n = 2 + int64_t(rng.uniform_index(6));
    auto x = ImageBatch<double>(
        Tensor<double>::rand_uniform({1, 3, 4, 4}, rng, -1, 1));
    auto c = ContentMaskSet<double>(
        Tensor<double>::rand_uniform({1, n - 1, 3, 4, 4}, rng, -1, 1));
    auto a = mask_set(random_valid_attention(1, n, 4, 4, rng), Scheme::MultiMask);
    auto out = fuse_multi(x, c, a);
    for (int64_t ch = 0; ch < 3; ++ch)
      for (int64_t p = 0; p < 16; ++p) {
        double lo = x.data[ch * 16 + p], hi = lo;
        for (int64_t f = 0; f < n - 1; ++f) {
          const double v = c.data[(f * 3 + ch) * 16 + p];
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        const double y = out.data[ch * 16 + p];
        REQUIRE(y >= lo - 1e-12);
        REQUIRE(y <= hi + 1e-12);
        REQUIRE(y >= -1.0 - 1e-12);
        REQUIRE(y <= 1.0 + 1e-12);
      }
  }
}

TEST_CASE("fusion gradients match central finite differences") {
  Rng rng(26);
  for (int seed = 0; seed < 5; ++seed) {
    auto x = Tensor<double>::rand_uniform({2, 3, 4, 4}, rng, -0.9, 0.9);
    auto proj = Tensor<double>::rand_uniform({2, 3, 4, 4}, rng, -1, 1);

    auto c1 = Tensor<double>::rand_uniform({2, 3, 4, 4}, rng, -0.9, 0.9);
    auto a1 = Tensor<double>::rand_uniform({2, 1, 4, 4}, rng, 0.02, 0.98);
    const double err1 = gradcheck_max_rel_err(
        {x, c1, a1}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
          return g.inner_const(g.fuse_single(v[0], v[1], v[2]), proj);
        });
    REQUIRE(err1 < 1e-4);

    auto c2 = Tensor<double>::rand_uniform({2, 9, 4, 4}, rng, -0.9, 0.9);
    auto a2 = Tensor<double>::rand_uniform({2, 4, 4, 4}, rng, 0.02, 0.98);
    const double err2 = gradcheck_max_rel_err(
        {x, c2, a2}, [&](Graph<double>& g, std::vector<Var<double>>& v) {
          return g.inner_const(g.fuse_multi(v[0], v[1], v[2]), proj);
        });
    REQUIRE(err2 < 1e-4);
  }
}

TEST_CASE("graph fusion and plain fusion are bit-identical") {
  Rng rng(27);
  auto xt = Tensor<float>::rand_uniform({2, 3, 6, 6}, rng, -1, 1);
  auto ct = Tensor<float>::rand_uniform({2, 27, 6, 6}, rng, -1, 1);
  auto logits = Tensor<float>::rand_uniform({2, 10, 6, 6}, rng, -2, 2);

  Graph<float> g;
  auto att = g.softmax_channels(g.input(logits));
  auto fused = g.fuse_multi(g.input(xt), g.input(ct), att);

  auto masks = channel_softmax(logits);
  auto out = fuse_multi(ImageBatch<float>(xt), ContentMaskSet<float>::from_flat(ct, 9),
                        masks);
  REQUIRE(bitwise_equal(g.value(att), masks.data));
  REQUIRE(bitwise_equal(g.value(fused), out.data));
}
