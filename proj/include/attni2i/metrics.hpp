#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "attni2i/masks.hpp"
#include "attni2i/rng.hpp"
#include "attni2i/tensor.hpp"

namespace attni2i {

// Serialized stand-in for an infinite PSNR (identical images).
constexpr double kPsnrInfSentinel = 1e9;

// 10*log10(peak^2 / MSE); +inf when the images are identical.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak) {
  require(a.same_shape(b), "psnr: shape mismatch");
  require(peak > 0, "psnr: peak must be positive");
  double mse = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    mse += d * d;
  }
  mse /= double(a.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

template <typename T>
double psnr(const ImageBatch<T>& a, const ImageBatch<T>& b, double peak) {
  return psnr(a.data, b.data, peak);
}

// PSNR restricted to pixels where gt_mask is zero. The mask is (H, W) in
// {0,1}; differences inside the foreground are ignored entirely.
template <typename T>
double background_psnr(const ImageBatch<T>& x, const ImageBatch<T>& gx,
                       const Tensor<T>& gt_mask, double peak) {
  require(x.data.same_shape(gx.data), "background_psnr: shape mismatch");
  require(gt_mask.ndim() == 2 && gt_mask.size(0) == x.height() &&
              gt_mask.size(1) == x.width(),
          "background_psnr: mask must be (H,W)");
  const int64_t B = x.batch(), HW = x.height() * x.width();
  double mse = 0.0;
  int64_t count = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t p = 0; p < HW; ++p) {
        if (gt_mask[p] != T(0)) continue;
        const double d = double(x.data[(b * 3 + c) * HW + p]) -
                         double(gx.data[(b * 3 + c) * HW + p]);
        mse += d * d;
        ++count;
      }
  if (count == 0 || mse == 0.0) return std::numeric_limits<double>::infinity();
  mse /= double(count);
  return 10.0 * std::log10(peak * peak / mse);
}

// Fraction of total foreground attention (1 - A_bg) that falls inside the
// ground-truth foreground; 0 when the generator attends to nothing.
template <typename T>
double attention_localization(const AttentionMaskSet<T>& attn,
                              const Tensor<T>& gt_mask) {
  require(attn.scheme == Scheme::MultiMask,
          "attention_localization: multi-mask attention expected");
  require(attn.data.size(0) == 1, "attention_localization: one image at a time");
  const int64_t H = attn.data.size(2), W = attn.data.size(3);
  require(gt_mask.ndim() == 2 && gt_mask.size(0) == H && gt_mask.size(1) == W,
          "attention_localization: mask must be (H,W)");
  const int64_t HW = H * W;
  const int64_t bg = attn.background_index();
  double inside = 0.0, total = 0.0;
  for (int64_t p = 0; p < HW; ++p) {
    const double fg = 1.0 - double(attn.data[bg * HW + p]);
    total += fg;
    if (gt_mask[p] != T(0)) inside += fg;
  }
  return total == 0.0 ? 0.0 : inside / total;
}

// Real feature vectors from some extractor, one row per sample.
struct FeatureSet {
  Tensor<double> features;  // (num_samples, dim)
  std::string extractor_id;

  int64_t count() const { return features.size(0); }
  int64_t dim() const { return features.size(1); }

  void validate() const {
    require(features.ndim() == 2, "feature set: (N, dim) expected");
    if (!features.all_finite())
      throw InvalidInput("feature set: non-finite features");
  }
};

using FeatureExtractor =
    std::function<FeatureSet(const std::vector<Tensor<float>>&)>;

// Deterministic default extractor: per-channel 64-bin histograms over
// [-1, 1], normalized per channel. A learned embedding can be plugged in
// through the FeatureExtractor interface without touching the estimator.
inline FeatureSet histogram_features(const std::vector<Tensor<float>>& images) {
  constexpr int64_t kBins = 64;
  FeatureSet out;
  out.extractor_id = "histogram64x3";
  out.features = Tensor<double>({int64_t(images.size()), kBins * 3});
  for (size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    require(img.ndim() == 3 && img.size(0) == 3,
            "histogram_features: (3,H,W) images expected");
    const int64_t HW = img.size(1) * img.size(2);
    for (int64_t c = 0; c < 3; ++c) {
      double* hist = out.features.data() + int64_t(i) * kBins * 3 + c * kBins;
      for (int64_t p = 0; p < HW; ++p) {
        const double v = std::clamp(double(img[c * HW + p]), -1.0, 1.0);
        const int64_t bin =
            std::min<int64_t>(kBins - 1, int64_t((v + 1.0) * 0.5 * kBins));
        hist[bin] += 1.0;
      }
      for (int64_t k = 0; k < kBins; ++k) hist[k] /= double(HW);
    }
  }
  return out;
}

namespace detail {

// Lexicographic row order makes the estimator a function of the multiset of
// samples, so permuting the input leaves the result unchanged.
inline std::vector<int64_t> canonical_row_order(const Tensor<double>& m) {
  std::vector<int64_t> idx(size_t(m.size(0)));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = int64_t(i);
  const int64_t dim = m.size(1);
  std::sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    const double* ra = m.data() + a * dim;
    const double* rb = m.data() + b * dim;
    return std::lexicographical_compare(ra, ra + dim, rb, rb + dim);
  });
  return idx;
}

inline double poly3_kernel(const double* u, const double* v, int64_t dim) {
  double dot = 0.0;
  for (int64_t i = 0; i < dim; ++i) dot += u[i] * v[i];
  const double k = dot / double(dim) + 1.0;
  return k * k * k;
}

}  // namespace detail

// Unbiased squared MMD with the cubic polynomial kernel
// k(u, v) = (u.v / dim + 1)^3, averaged over seeded subsets of equal size.
// Returns {mean, population std across subsets}.
inline std::pair<double, double> kid(const FeatureSet& fa, const FeatureSet& fb,
                                     int64_t subset_size, int64_t n_subsets,
                                     uint64_t seed) {
  fa.validate();
  fb.validate();
  require(fa.dim() == fb.dim(), "kid: feature dimensions differ");
  require(fa.count() >= 2 && fb.count() >= 2, "kid: need at least 2 samples");
  require(subset_size >= 2, "kid: subset_size must be >= 2");
  require(n_subsets >= 1, "kid: n_subsets must be >= 1");
  if (subset_size > fa.count() || subset_size > fb.count())
    throw ConfigError("kid: subset_size " + std::to_string(subset_size) +
                      " exceeds available samples (" +
                      std::to_string(fa.count()) + ", " +
                      std::to_string(fb.count()) + ")");
  const int64_t dim = fa.dim();
  const auto order_a = detail::canonical_row_order(fa.features);
  const auto order_b = detail::canonical_row_order(fb.features);

  Rng rng(seed);
  // Subsets come back in canonical (sorted) order: when both sets hold the
  // same samples, position i of each subset refers to the same row, and the
  // diagonal-excluded terms cancel exactly.
  auto draw_subset = [&rng](const std::vector<int64_t>& order, int64_t m) {
    std::vector<int64_t> pool = order;
    for (int64_t i = 0; i < m; ++i) {
      const int64_t j =
          i + int64_t(rng.uniform_index(uint64_t(pool.size() - size_t(i))));
      std::swap(pool[size_t(i)], pool[size_t(j)]);
    }
    pool.resize(size_t(m));
    std::sort(pool.begin(), pool.end());
    return pool;
  };

  std::vector<double> values;
  values.reserve(size_t(n_subsets));
  const int64_t m = subset_size;
  for (int64_t s = 0; s < n_subsets; ++s) {
    const auto ia = draw_subset(order_a, m);
    const auto ib = draw_subset(order_b, m);
    // U-statistic with every diagonal excluded, including the cross term:
    // coincident sample sets cancel exactly.
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < m; ++j) {
        if (i == j) continue;
        const double* xi = fa.features.data() + ia[size_t(i)] * dim;
        const double* xj = fa.features.data() + ia[size_t(j)] * dim;
        const double* yi = fb.features.data() + ib[size_t(i)] * dim;
        const double* yj = fb.features.data() + ib[size_t(j)] * dim;
        kxx += detail::poly3_kernel(xi, xj, dim);
        kyy += detail::poly3_kernel(yi, yj, dim);
        kxy += detail::poly3_kernel(xi, yj, dim);
      }
    const double denom = double(m) * double(m - 1);
    values.push_back((kxx + kyy - 2.0 * kxy) / denom);
  }
  double mean = 0.0;
  for (const double v : values) mean += v;
  mean /= double(values.size());
  double var = 0.0;
  for (const double v : values) var += (v - mean) * (v - mean);
  var /= double(values.size());
  return {mean, std::sqrt(var)};
}

}  // namespace attni2i
