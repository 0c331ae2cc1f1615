#pragma once

#include <cstdint>
#include <string>

#include "attni2i/graph.hpp"
#include "attni2i/tensor.hpp"

namespace attni2i {

// Translation scheme. SingleMask emits one attention mask and one content
// image; MultiMask emits n softmax-normalized masks (background last) and
// n-1 content images.
enum class Scheme { SingleMask = 1, MultiMask = 2 };

inline const char* scheme_name(Scheme s) {
  return s == Scheme::SingleMask ? "single-mask" : "multi-mask";
}

// Batch of real-valued images, channels-first, values in [-1, 1].
template <typename T>
struct ImageBatch {
  Tensor<T> data;  // (B, 3, H, W)

  ImageBatch() = default;
  explicit ImageBatch(Tensor<T> t) : data(std::move(t)) {}

  int64_t batch() const { return data.size(0); }
  int64_t height() const { return data.size(2); }
  int64_t width() const { return data.size(3); }

  // Ingestion-boundary check: finite and inside [-1, 1].
  static ImageBatch validated(Tensor<T> t) {
    require(t.ndim() == 4 && t.size(1) == 3,
            "image batch: expected (B,3,H,W), got " + t.shape_str());
    if (!t.all_finite()) throw InvalidInput("image batch: non-finite values");
    require(t.min_value() >= T(-1) - T(1e-5) && t.max_value() <= T(1) + T(1e-5),
            "image batch: values outside [-1, 1]");
    return ImageBatch(std::move(t));
  }
};

// Per-pixel normalized attention masks. Multi-mask sets hold n channels that
// sum to 1 at every pixel; the last channel is the background mask.
template <typename T>
struct AttentionMaskSet {
  Tensor<T> data;  // (B, n_masks, H, W)
  Scheme scheme = Scheme::SingleMask;
  int64_t n_masks = 1;

  AttentionMaskSet() = default;
  AttentionMaskSet(Tensor<T> t, Scheme s)
      : data(std::move(t)), scheme(s), n_masks(data.size(1)) {
    require(data.ndim() == 4, "attention masks: expected 4-d tensor");
    require(s == Scheme::SingleMask ? n_masks == 1 : n_masks >= 2,
            "attention masks: mask count does not match scheme");
  }

  int64_t background_index() const { return n_masks - 1; }

  void validate(T row_sum_tol = T(1e-5)) const {
    const T lo = T(0) - T(1e-5), hi = T(1) + T(1e-5);
    for (const T v : data)
      if (!(v >= lo && v <= hi))
        throw InvalidInput("attention masks: value outside [0, 1]");
    if (scheme == Scheme::MultiMask) {
      const int64_t B = data.size(0), n = n_masks;
      const int64_t HW = data.size(2) * data.size(3);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < HW; ++p) {
          T sum = T(0);
          for (int64_t c = 0; c < n; ++c) sum += data[(b * n + c) * HW + p];
          if (std::abs(double(sum) - 1.0) > double(row_sum_tol))
            throw InvalidInput("attention masks: unnormalized (pixel sum != 1)");
        }
    }
  }
};

// Candidate content images, tanh-bounded. Stored (B, n_content, 3, H, W);
// the flat (B, 3*n_content, H, W) layout of a conv head is bit-compatible.
template <typename T>
struct ContentMaskSet {
  Tensor<T> data;  // (B, n_content, 3, H, W)
  int64_t n_content = 1;

  ContentMaskSet() = default;
  explicit ContentMaskSet(Tensor<T> t) : data(std::move(t)), n_content(data.size(1)) {
    require(data.ndim() == 5 && data.size(2) == 3,
            "content masks: expected (B,n,3,H,W), got " + data.shape_str());
  }

  // View as (B, 3*n_content, H, W) without copying.
  Tensor<T> flat() const {
    return data.reshaped({data.size(0), n_content * 3, data.size(3), data.size(4)});
  }

  static ContentMaskSet from_flat(const Tensor<T>& t, int64_t n_content) {
    require(t.ndim() == 4 && t.size(1) == 3 * n_content,
            "content masks: flat channel count mismatch");
    return ContentMaskSet(
        t.reshaped({t.size(0), n_content, int64_t(3), t.size(2), t.size(3)}));
  }
};

// One generator forward pass: translated image plus the masks that built it.
// `image` always equals re-running the fusion on `attention` and `content`
// with the generator input, bit for bit.
template <typename T>
struct GeneratorOutput {
  ImageBatch<T> image;
  AttentionMaskSet<T> attention;
  ContentMaskSet<T> content;
};

namespace detail {

template <typename T>
void check_fusion_shapes(const ImageBatch<T>& x, const ContentMaskSet<T>& c,
                         const AttentionMaskSet<T>& a) {
  require(x.data.ndim() == 4 && x.data.size(1) == 3,
          "fusion: input must be (B,3,H,W)");
  require(c.data.size(0) == x.batch() && c.data.size(3) == x.height() &&
              c.data.size(4) == x.width(),
          "fusion: content shape mismatch");
  require(a.data.size(0) == x.batch() && a.data.size(2) == x.height() &&
              a.data.size(3) == x.width(),
          "fusion: attention shape mismatch");
}

}  // namespace detail

// Normalizes logits across the mask axis; n >= 2. Larger logit, larger mask.
template <typename T>
AttentionMaskSet<T> channel_softmax(const Tensor<T>& logits) {
  require(logits.ndim() == 4 && logits.size(1) >= 2,
          "channel_softmax: expected (B,n>=2,H,W), got " + logits.shape_str());
  if (!logits.all_finite())
    throw InvalidInput("channel_softmax: non-finite logits");
  Tensor<T> out(logits.shape());
  detail::softmax_channels_kernel(logits.data(), out.data(), logits.size(0),
                                  logits.size(1), logits.size(2) * logits.size(3));
  return AttentionMaskSet<T>(std::move(out), Scheme::MultiMask);
}

// Single-mask blend: content * A + x * (1 - A), the mask broadcast across
// the three image channels. Masks are clamped to [0,1] after a tolerance
// check so softmax/sigmoid rounding cannot trip the range invariant.
template <typename T>
ImageBatch<T> fuse_single(const ImageBatch<T>& x, const ContentMaskSet<T>& content,
                          const AttentionMaskSet<T>& attention) {
  detail::check_fusion_shapes(x, content, attention);
  require(attention.scheme == Scheme::SingleMask && attention.n_masks == 1,
          "fuse_single: needs a single-mask attention set");
  require(content.n_content == 1, "fuse_single: needs exactly one content image");
  attention.validate();
  Tensor<T> out(x.data.shape());
  detail::fuse_single_kernel(x.data.data(), content.data.data(),
                             attention.data.data(), out.data(), x.batch(),
                             int64_t(3), x.height() * x.width());
  return ImageBatch<T>(std::move(out));
}

// Multi-mask blend: sum_f content_f * A_f + x * A_bg (background mask last).
// Valid masks are convex weights, so the output stays within [-1, 1].
template <typename T>
ImageBatch<T> fuse_multi(const ImageBatch<T>& x, const ContentMaskSet<T>& content,
                         const AttentionMaskSet<T>& attention) {
  detail::check_fusion_shapes(x, content, attention);
  require(attention.scheme == Scheme::MultiMask,
          "fuse_multi: needs a multi-mask attention set");
  require(content.n_content == attention.n_masks - 1,
          "fuse_multi: content count must equal mask count - 1");
  attention.validate();
  Tensor<T> out(x.data.shape());
  detail::fuse_multi_kernel(x.data.data(), content.flat().data(),
                            attention.data.data(), out.data(), x.batch(),
                            int64_t(3), x.height() * x.width(), attention.n_masks);
  return ImageBatch<T>(std::move(out));
}

// Cycle-side blends: the same kernels applied to an already-translated image.
template <typename T>
ImageBatch<T> fuse_single_cycle(const ImageBatch<T>& gx, const ContentMaskSet<T>& c,
                                const AttentionMaskSet<T>& a) {
  return fuse_single(gx, c, a);
}

template <typename T>
ImageBatch<T> fuse_multi_cycle(const ImageBatch<T>& gx, const ContentMaskSet<T>& c,
                               const AttentionMaskSet<T>& a) {
  return fuse_multi(gx, c, a);
}

// Dispatch on the attention set's scheme.
template <typename T>
ImageBatch<T> fuse(const ImageBatch<T>& x, const ContentMaskSet<T>& content,
                   const AttentionMaskSet<T>& attention) {
  return attention.scheme == Scheme::SingleMask ? fuse_single(x, content, attention)
                                                : fuse_multi(x, content, attention);
}

}  // namespace attni2i
