#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "attni2i/tensor.hpp"

namespace attni2i {

// Reverse-mode tape over Tensor<T>. A Graph is built per optimization step:
// leaves are inputs or parameters, every op appends a node holding its value
// and a closure that scatters incoming gradient to its parents. Creation
// order is a valid topological order, so backward() is a reverse sweep.
//
// Thread model: a Graph is single-owner. Parameter tensors may be shared by
// concurrent forward-only graphs; updates require exclusive access.

template <typename T>
class Graph;

template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;
  bool valid() const { return graph != nullptr && id >= 0; }
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapC = Eigen::Map<const MatRM<T>>;

// Patch extraction for conv as GEMM: src (C,H,W) -> cols (C*kh*kw, Ho*Wo).
template <typename T>
void im2col(const T* src, int64_t C, int64_t H, int64_t W, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t Ho, int64_t Wo,
            T* cols) {
  const int64_t plane = H * W;
  const int64_t patches = Ho * Wo;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        T* row = cols + ((c * kh + i) * kw + j) * patches;
        const T* plane_src = src + c * plane;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * stride - pad + i;
          if (ih < 0 || ih >= H) {
            for (int64_t ow = 0; ow < Wo; ++ow) row[oh * Wo + ow] = T(0);
            continue;
          }
          const T* src_row = plane_src + ih * W;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const int64_t iw = ow * stride - pad + j;
            row[oh * Wo + ow] = (iw >= 0 && iw < W) ? src_row[iw] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates cols back into dst (caller zeroes dst).
template <typename T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t Ho, int64_t Wo,
            T* dst) {
  const int64_t plane = H * W;
  const int64_t patches = Ho * Wo;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        const T* row = cols + ((c * kh + i) * kw + j) * patches;
        T* plane_dst = dst + c * plane;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * stride - pad + i;
          if (ih < 0 || ih >= H) continue;
          T* dst_row = plane_dst + ih * W;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const int64_t iw = ow * stride - pad + j;
            if (iw >= 0 && iw < W) dst_row[iw] += row[oh * Wo + ow];
          }
        }
      }
    }
  }
}

inline int64_t conv_out_size(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Mirror index without edge repetition; requires pad < size.
inline int64_t reflect_index(int64_t i, int64_t size) {
  if (i < 0) return -i;
  if (i >= size) return 2 * size - 2 - i;
  return i;
}

template <typename T>
T clamp01(T v) {
  return v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
}

// Shared fusion kernels. The tape op and the plain-tensor mask API both call
// these, which keeps recomposition bit-identical across the two paths.
// Single-mask blend: y = c * a + x * (1 - a), mask broadcast over channels.
template <typename T>
void fuse_single_kernel(const T* x, const T* c, const T* a, T* y, int64_t B,
                        int64_t C, int64_t HW) {
  for (int64_t b = 0; b < B; ++b) {
    const T* ab = a + b * HW;
    for (int64_t ch = 0; ch < C; ++ch) {
      const T* xb = x + (b * C + ch) * HW;
      const T* cb = c + (b * C + ch) * HW;
      T* yb = y + (b * C + ch) * HW;
      for (int64_t p = 0; p < HW; ++p) {
        const T av = clamp01(ab[p]);
        yb[p] = cb[p] * av + xb[p] * (T(1) - av);
      }
    }
  }
}

// Multi-mask blend: y = sum_f c_f * a_f + x * a_bg, background mask last.
// content is laid out (B, (n-1)*C, H, W) with channel f*C+ch.
template <typename T>
void fuse_multi_kernel(const T* x, const T* content, const T* a, T* y,
                       int64_t B, int64_t C, int64_t HW, int64_t n) {
  const int64_t fg = n - 1;
  for (int64_t b = 0; b < B; ++b) {
    const T* ab = a + b * n * HW;
    for (int64_t ch = 0; ch < C; ++ch) {
      const T* xb = x + (b * C + ch) * HW;
      T* yb = y + (b * C + ch) * HW;
      for (int64_t p = 0; p < HW; ++p) {
        T acc = content[((b * fg + 0) * C + ch) * HW + p] * clamp01(ab[p]);
        for (int64_t f = 1; f < fg; ++f)
          acc += content[((b * fg + f) * C + ch) * HW + p] *
                 clamp01(ab[f * HW + p]);
        acc += xb[p] * clamp01(ab[fg * HW + p]);
        yb[p] = acc;
      }
    }
  }
}

template <typename T>
void softmax_channels_kernel(const T* x, T* y, int64_t B, int64_t n,
                             int64_t HW) {
  for (int64_t b = 0; b < B; ++b) {
    const T* xb = x + b * n * HW;
    T* yb = y + b * n * HW;
    for (int64_t p = 0; p < HW; ++p) {
      T mx = xb[p];
      for (int64_t c = 1; c < n; ++c) mx = std::max(mx, xb[c * HW + p]);
      T sum = T(0);
      for (int64_t c = 0; c < n; ++c) {
        const T e = std::exp(xb[c * HW + p] - mx);
        yb[c * HW + p] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int64_t c = 0; c < n; ++c) yb[c * HW + p] *= inv;
    }
  }
}

}  // namespace detail

template <typename T>
class Graph {
 public:
  using Fn = std::function<void(Graph&)>;

  // ----- leaves -----

  Var<T> input(Tensor<T> value) { return make(std::move(value), false, nullptr); }

  // Registers a parameter once per graph; repeated calls with the same buffer
  // return the same node so gradients from every use accumulate together.
  Var<T> param(Tensor<T>& p, bool trainable = true) {
    auto it = param_ids_.find(p.buffer_id());
    if (it != param_ids_.end()) {
      nodes_[size_t(it->second)].needs_grad |= trainable;
      return Var<T>{this, it->second};
    }
    Var<T> v = make(p, trainable, nullptr);
    param_ids_.emplace(p.buffer_id(), v.id);
    return v;
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[size_t(v.id)].value; }

  const Tensor<T>& grad(Var<T> v) {
    return grad_buf(v.id, nodes_[size_t(v.id)].value.shape());
  }

  bool has_grad(Var<T> v) const { return nodes_[size_t(v.id)].grad.defined(); }

  // Gradient of a registered parameter, zeros if it never received one.
  Tensor<T> grad_for(const Tensor<T>& p) const {
    auto it = param_ids_.find(p.buffer_id());
    if (it != param_ids_.end()) {
      const auto& g = nodes_[size_t(it->second)].grad;
      if (g.defined()) return g;
    }
    return Tensor<T>::zeros(p.shape());
  }

  // ----- elementwise / structural ops -----

  Var<T> add(Var<T> a, Var<T> b) {
    check_same(a, b, "add");
    Tensor<T> out(value(a).shape());
    const T* pa = value(a).data();
    const T* pb = value(b).data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = pa[i] + pb[i];
    return binary_passthrough(a, b, std::move(out), T(1), T(1));
  }

  Var<T> sub(Var<T> a, Var<T> b) {
    check_same(a, b, "sub");
    Tensor<T> out(value(a).shape());
    const T* pa = value(a).data();
    const T* pb = value(b).data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = pa[i] - pb[i];
    return binary_passthrough(a, b, std::move(out), T(1), T(-1));
  }

  Var<T> mul(Var<T> a, Var<T> b) {
    check_same(a, b, "mul");
    Tensor<T> out(value(a).shape());
    const T* pa = value(a).data();
    const T* pb = value(b).data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = pa[i] * pb[i];
    const int ia = a.id, ib = b.id;
    return make_op(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& va = g.nodes_[size_t(ia)].value;
      const Tensor<T>& vb = g.nodes_[size_t(ib)].value;
      if (g.wants(ia)) {
        Tensor<T>& da = g.grad_buf(ia, va.shape());
        for (int64_t i = 0; i < go.numel(); ++i) da[i] += go[i] * vb[i];
      }
      if (g.wants(ib)) {
        Tensor<T>& db = g.grad_buf(ib, vb.shape());
        for (int64_t i = 0; i < go.numel(); ++i) db[i] += go[i] * va[i];
      }
    });
  }

  Var<T> scale(Var<T> a, T s) {
    Tensor<T> out(value(a).shape());
    const T* pa = value(a).data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = pa[i] * s;
    const int ia = a.id;
    return make_op(std::move(out), {a}, [ia, s](Graph& g, int self) {
      if (!g.wants(ia)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      Tensor<T>& da = g.grad_buf(ia, g.nodes_[size_t(ia)].value.shape());
      for (int64_t i = 0; i < go.numel(); ++i) da[i] += go[i] * s;
    });
  }

  Var<T> view(Var<T> a, std::vector<int64_t> shape) {
    Tensor<T> out = value(a).reshaped(std::move(shape));
    const int ia = a.id;
    return make_op(std::move(out), {a}, [ia](Graph& g, int self) {
      if (!g.wants(ia)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      Tensor<T>& da = g.grad_buf(ia, g.nodes_[size_t(ia)].value.shape());
      for (int64_t i = 0; i < go.numel(); ++i) da[i] += go[i];
    });
  }

  // x (B,C,H,W) * m (B,1,H,W), mask broadcast across channels.
  Var<T> mul_mask(Var<T> x, Var<T> m) {
    const auto& xs = value(x).shape();
    const auto& ms = value(m).shape();
    require(xs.size() == 4 && ms.size() == 4 && ms[1] == 1 && xs[0] == ms[0] &&
                xs[2] == ms[2] && xs[3] == ms[3],
            "mul_mask: incompatible shapes " + value(x).shape_str() + " vs " +
                value(m).shape_str());
    const int64_t B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    Tensor<T> out(xs);
    const T* px = value(x).data();
    const T* pm = value(m).data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t p = 0; p < HW; ++p)
          out[(b * C + c) * HW + p] = px[(b * C + c) * HW + p] * pm[b * HW + p];
    const int ix = x.id, im = m.id;
    return make_op(std::move(out), {x, m}, [ix, im, B, C, HW](Graph& g, int self) {
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& vx = g.nodes_[size_t(ix)].value;
      const Tensor<T>& vm = g.nodes_[size_t(im)].value;
      if (g.wants(ix)) {
        Tensor<T>& dx = g.grad_buf(ix, vx.shape());
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t p = 0; p < HW; ++p)
              dx[(b * C + c) * HW + p] += go[(b * C + c) * HW + p] * vm[b * HW + p];
      }
      if (g.wants(im)) {
        Tensor<T>& dm = g.grad_buf(im, vm.shape());
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t p = 0; p < HW; ++p)
              dm[b * HW + p] += go[(b * C + c) * HW + p] * vx[(b * C + c) * HW + p];
      }
    });
  }

  Var<T> concat_channels(Var<T> a, Var<T> b) {
    const auto& as = value(a).shape();
    const auto& bs = value(b).shape();
    require(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] &&
                as[2] == bs[2] && as[3] == bs[3],
            "concat_channels: incompatible shapes");
    const int64_t B = as[0], Ca = as[1], Cb = bs[1], HW = as[2] * as[3];
    Tensor<T> out({B, Ca + Cb, as[2], as[3]});
    const T* pa = value(a).data();
    const T* pb = value(b).data();
    for (int64_t bi = 0; bi < B; ++bi) {
      std::copy(pa + bi * Ca * HW, pa + (bi + 1) * Ca * HW,
                out.data() + bi * (Ca + Cb) * HW);
      std::copy(pb + bi * Cb * HW, pb + (bi + 1) * Cb * HW,
                out.data() + (bi * (Ca + Cb) + Ca) * HW);
    }
    const int ia = a.id, ib = b.id;
    return make_op(std::move(out), {a, b}, [ia, ib, B, Ca, Cb, HW](Graph& g, int self) {
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      if (g.wants(ia)) {
        Tensor<T>& da = g.grad_buf(ia, g.nodes_[size_t(ia)].value.shape());
        for (int64_t bi = 0; bi < B; ++bi)
          for (int64_t i = 0; i < Ca * HW; ++i)
            da[bi * Ca * HW + i] += go[bi * (Ca + Cb) * HW + i];
      }
      if (g.wants(ib)) {
        Tensor<T>& db = g.grad_buf(ib, g.nodes_[size_t(ib)].value.shape());
        for (int64_t bi = 0; bi < B; ++bi)
          for (int64_t i = 0; i < Cb * HW; ++i)
            db[bi * Cb * HW + i] += go[(bi * (Ca + Cb) + Ca) * HW + i];
      }
    });
  }

  Var<T> slice_channels(Var<T> x, int64_t c0, int64_t c1) {
    const auto& xs = value(x).shape();
    require(xs.size() == 4 && c0 >= 0 && c1 > c0 && c1 <= xs[1],
            "slice_channels: bad range");
    const int64_t B = xs[0], C = xs[1], Cs = c1 - c0, HW = xs[2] * xs[3];
    Tensor<T> out({B, Cs, xs[2], xs[3]});
    const T* px = value(x).data();
    for (int64_t b = 0; b < B; ++b)
      std::copy(px + (b * C + c0) * HW, px + (b * C + c1) * HW,
                out.data() + b * Cs * HW);
    const int ix = x.id;
    return make_op(std::move(out), {x}, [ix, B, C, c0, Cs, HW](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      Tensor<T>& dx = g.grad_buf(ix, g.nodes_[size_t(ix)].value.shape());
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < Cs * HW; ++i)
          dx[(b * C + c0) * HW + i] += go[b * Cs * HW + i];
    });
  }

  // ----- activations -----

  Var<T> relu(Var<T> x) {
    Tensor<T> out(value(x).shape());
    const T* px = value(x).data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = px[i] > T(0) ? px[i] : T(0);
    const int ix = x.id;
    return make_op(std::move(out), {x}, [ix](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& vx = g.nodes_[size_t(ix)].value;
      Tensor<T>& dx = g.grad_buf(ix, vx.shape());
      for (int64_t i = 0; i < go.numel(); ++i)
        if (vx[i] > T(0)) dx[i] += go[i];
    });
  }

  Var<T> leaky_relu(Var<T> x, T slope) {
    Tensor<T> out(value(x).shape());
    const T* px = value(x).data();
    for (int64_t i = 0; i < out.numel(); ++i)
      out[i] = px[i] > T(0) ? px[i] : px[i] * slope;
    const int ix = x.id;
    return make_op(std::move(out), {x}, [ix, slope](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& vx = g.nodes_[size_t(ix)].value;
      Tensor<T>& dx = g.grad_buf(ix, vx.shape());
      for (int64_t i = 0; i < go.numel(); ++i)
        dx[i] += vx[i] > T(0) ? go[i] : go[i] * slope;
    });
  }

  Var<T> tanh_(Var<T> x) {
    Tensor<T> out(value(x).shape());
    const T* px = value(x).data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(px[i]);
    const int ix = x.id;
    const int self_hint = int(nodes_.size());
    (void)self_hint;
    return make_op(std::move(out), {x}, [ix](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& y = g.nodes_[size_t(self)].value;
      Tensor<T>& dx = g.grad_buf(ix, g.nodes_[size_t(ix)].value.shape());
      for (int64_t i = 0; i < go.numel(); ++i)
        dx[i] += go[i] * (T(1) - y[i] * y[i]);
    });
  }

  Var<T> sigmoid(Var<T> x) {
    Tensor<T> out(value(x).shape());
    const T* px = value(x).data();
    for (int64_t i = 0; i < out.numel(); ++i) {
      const T v = px[i];
      out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                         : std::exp(v) / (T(1) + std::exp(v));
    }
    const int ix = x.id;
    return make_op(std::move(out), {x}, [ix](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& y = g.nodes_[size_t(self)].value;
      Tensor<T>& dx = g.grad_buf(ix, g.nodes_[size_t(ix)].value.shape());
      for (int64_t i = 0; i < go.numel(); ++i)
        dx[i] += go[i] * y[i] * (T(1) - y[i]);
    });
  }

  // Normalizes across the channel axis at every pixel; n >= 2.
  Var<T> softmax_channels(Var<T> x) {
    const auto& xs = value(x).shape();
    require(xs.size() == 4 && xs[1] >= 2, "softmax_channels: need (B,n>=2,H,W)");
    if (!value(x).all_finite())
      throw InvalidInput("softmax_channels: non-finite logits");
    const int64_t B = xs[0], n = xs[1], HW = xs[2] * xs[3];
    Tensor<T> out(xs);
    detail::softmax_channels_kernel(value(x).data(), out.data(), B, n, HW);
    const int ix = x.id;
    return make_op(std::move(out), {x}, [ix, B, n, HW](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& y = g.nodes_[size_t(self)].value;
      Tensor<T>& dx = g.grad_buf(ix, g.nodes_[size_t(ix)].value.shape());
      for (int64_t b = 0; b < B; ++b) {
        const int64_t base = b * n * HW;
        for (int64_t p = 0; p < HW; ++p) {
          T dot = T(0);
          for (int64_t c = 0; c < n; ++c)
            dot += go[base + c * HW + p] * y[base + c * HW + p];
          for (int64_t c = 0; c < n; ++c)
            dx[base + c * HW + p] +=
                y[base + c * HW + p] * (go[base + c * HW + p] - dot);
        }
      }
    });
  }

  // ----- padding -----

  Var<T> reflection_pad(Var<T> x, int64_t p) {
    const auto& xs = value(x).shape();
    require(xs.size() == 4 && p >= 0 && p < xs[2] && p < xs[3],
            "reflection_pad: pad must be smaller than spatial size");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int64_t Ho = H + 2 * p, Wo = W + 2 * p;
    Tensor<T> out({B, C, Ho, Wo});
    const T* px = value(x).data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const T* src = px + bc * H * W;
      T* dst = out.data() + bc * Ho * Wo;
      for (int64_t oh = 0; oh < Ho; ++oh) {
        const int64_t ih = detail::reflect_index(oh - p, H);
        for (int64_t ow = 0; ow < Wo; ++ow)
          dst[oh * Wo + ow] = src[ih * W + detail::reflect_index(ow - p, W)];
      }
    }
    const int ix = x.id;
    return make_op(std::move(out), {x}, [ix, B, C, H, W, p](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      Tensor<T>& dx = g.grad_buf(ix, g.nodes_[size_t(ix)].value.shape());
      const int64_t Ho = H + 2 * p, Wo = W + 2 * p;
      for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* gsrc = go.data() + bc * Ho * Wo;
        T* dst = dx.data() + bc * H * W;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = detail::reflect_index(oh - p, H);
          for (int64_t ow = 0; ow < Wo; ++ow)
            dst[ih * W + detail::reflect_index(ow - p, W)] += gsrc[oh * Wo + ow];
        }
      }
    });
  }

  // ----- convolutions -----

  // x (B,Cin,H,W), w (Cout,Cin,kh,kw), optional bias (Cout); zero padding.
  Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int64_t stride, int64_t pad) {
    const auto& xs = value(x).shape();
    const auto& ws = value(w).shape();
    require(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1],
            "conv2d: shape mismatch");
    const int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int64_t Cout = ws[0], kh = ws[2], kw = ws[3];
    const int64_t Ho = detail::conv_out_size(H, kh, stride, pad);
    const int64_t Wo = detail::conv_out_size(W, kw, stride, pad);
    require(Ho >= 1 && Wo >= 1, "conv2d: input too small for kernel");
    const int64_t ckk = Cin * kh * kw, patches = Ho * Wo;

    Tensor<T> out({B, Cout, Ho, Wo});
    detail::AlignedStorage<T> cols(ckk * patches, /*zero=*/false);
    detail::MapC<T> wm(value(w).data(), Cout, ckk);
    const bool has_bias = bias.valid();
    for (int64_t b = 0; b < B; ++b) {
      detail::im2col(value(x).data() + b * Cin * H * W, Cin, H, W, kh, kw,
                     stride, pad, Ho, Wo, cols.data);
      detail::MapC<T> cm(cols.data, ckk, patches);
      detail::MapM<T> om(out.data() + b * Cout * patches, Cout, patches);
      om.noalias() = wm * cm;
      if (has_bias) {
        const T* pb = value(bias).data();
        for (int64_t c = 0; c < Cout; ++c)
          om.row(c).array() += pb[c];
      }
    }

    const int ix = x.id, iw = w.id, ib = has_bias ? bias.id : -1;
    std::vector<Var<T>> parents = {x, w};
    if (has_bias) parents.push_back(bias);
    return make_op(std::move(out), parents,
                   [ix, iw, ib, B, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo,
                    ckk, patches](Graph& g, int self) {
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& vx = g.nodes_[size_t(ix)].value;
      const Tensor<T>& vw = g.nodes_[size_t(iw)].value;
      const bool want_x = g.wants(ix);
      const bool want_w = g.wants(iw);
      const bool want_b = ib >= 0 && g.wants(ib);
      detail::AlignedStorage<T> cols(ckk * patches, /*zero=*/false);
      detail::MapC<T> wm(vw.data(), Cout, ckk);
      for (int64_t b = 0; b < B; ++b) {
        detail::MapC<T> gm(go.data() + b * Cout * patches, Cout, patches);
        if (want_w) {
          detail::im2col(vx.data() + b * Cin * H * W, Cin, H, W, kh, kw, stride,
                         pad, Ho, Wo, cols.data);
          detail::MapC<T> cm(cols.data, ckk, patches);
          Tensor<T>& dw = g.grad_buf(iw, vw.shape());
          detail::MapM<T> dwm(dw.data(), Cout, ckk);
          dwm.noalias() += gm * cm.transpose();
        }
        if (want_x) {
          detail::MapM<T> cm(cols.data, ckk, patches);
          cm.noalias() = wm.transpose() * gm;
          Tensor<T>& dx = g.grad_buf(ix, vx.shape());
          detail::col2im(cols.data, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                         dx.data() + b * Cin * H * W);
        }
        if (want_b) {
          Tensor<T>& db = g.grad_buf(ib, g.nodes_[size_t(ib)].value.shape());
          for (int64_t c = 0; c < Cout; ++c) db[c] += gm.row(c).sum();
        }
      }
    });
  }

  // x (B,Cin,H,W), w (Cin,Cout,kh,kw); adjoint-of-conv upsampling.
  Var<T> conv_transpose2d(Var<T> x, Var<T> w, Var<T> bias, int64_t stride,
                          int64_t pad, int64_t out_pad) {
    const auto& xs = value(x).shape();
    const auto& ws = value(w).shape();
    require(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[0],
            "conv_transpose2d: shape mismatch");
    require(out_pad < stride, "conv_transpose2d: out_pad must be < stride");
    const int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int64_t Cout = ws[1], kh = ws[2], kw = ws[3];
    const int64_t Ho = (H - 1) * stride - 2 * pad + kh + out_pad;
    const int64_t Wo = (W - 1) * stride - 2 * pad + kw + out_pad;
    const int64_t ckk = Cout * kh * kw, patches = H * W;

    Tensor<T> out({B, Cout, Ho, Wo});
    detail::AlignedStorage<T> cols(ckk * patches, /*zero=*/false);
    detail::MapC<T> wm(value(w).data(), Cin, ckk);
    const bool has_bias = bias.valid();
    for (int64_t b = 0; b < B; ++b) {
      detail::MapC<T> xm(value(x).data() + b * Cin * patches, Cin, patches);
      detail::MapM<T> cm(cols.data, ckk, patches);
      cm.noalias() = wm.transpose() * xm;
      T* dst = out.data() + b * Cout * Ho * Wo;
      detail::col2im(cols.data, Cout, Ho, Wo, kh, kw, stride, pad, H, W, dst);
      if (has_bias) {
        const T* pb = value(bias).data();
        for (int64_t c = 0; c < Cout; ++c) {
          T* plane = dst + c * Ho * Wo;
          for (int64_t i = 0; i < Ho * Wo; ++i) plane[i] += pb[c];
        }
      }
    }

    const int ix = x.id, iw = w.id, ib = has_bias ? bias.id : -1;
    std::vector<Var<T>> parents = {x, w};
    if (has_bias) parents.push_back(bias);
    return make_op(std::move(out), parents,
                   [ix, iw, ib, B, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo,
                    ckk, patches](Graph& g, int self) {
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& vx = g.nodes_[size_t(ix)].value;
      const Tensor<T>& vw = g.nodes_[size_t(iw)].value;
      const bool want_x = g.wants(ix);
      const bool want_w = g.wants(iw);
      const bool want_b = ib >= 0 && g.wants(ib);
      detail::AlignedStorage<T> cols(ckk * patches, /*zero=*/false);
      detail::MapC<T> wm(vw.data(), Cin, ckk);
      for (int64_t b = 0; b < B; ++b) {
        detail::im2col(go.data() + b * Cout * Ho * Wo, Cout, Ho, Wo, kh, kw,
                       stride, pad, H, W, cols.data);
        detail::MapC<T> cm(cols.data, ckk, patches);
        if (want_x) {
          Tensor<T>& dx = g.grad_buf(ix, vx.shape());
          detail::MapM<T> dxm(dx.data() + b * Cin * patches, Cin, patches);
          dxm.noalias() += wm * cm;
        }
        if (want_w) {
          detail::MapC<T> xm(vx.data() + b * Cin * patches, Cin, patches);
          Tensor<T>& dw = g.grad_buf(iw, vw.shape());
          detail::MapM<T> dwm(dw.data(), Cin, ckk);
          dwm.noalias() += xm * cm.transpose();
        }
        if (want_b) {
          Tensor<T>& db = g.grad_buf(ib, g.nodes_[size_t(ib)].value.shape());
          const T* gp = go.data() + b * Cout * Ho * Wo;
          for (int64_t c = 0; c < Cout; ++c) {
            T acc = T(0);
            for (int64_t i = 0; i < Ho * Wo; ++i) acc += gp[c * Ho * Wo + i];
            db[c] += acc;
          }
        }
      }
    });
  }

  // ----- normalization -----

  // Per-(sample, channel) normalization over spatial positions, no affine.
  Var<T> instance_norm(Var<T> x, T eps = T(1e-5)) {
    const auto& xs = value(x).shape();
    require(xs.size() == 4, "instance_norm: need 4-d input");
    const int64_t BC = xs[0] * xs[1], HW = xs[2] * xs[3];
    Tensor<T> out(xs);
    auto inv_std = std::make_shared<std::vector<T>>(size_t(BC));
    auto mean = std::make_shared<std::vector<T>>(size_t(BC));
    const T* px = value(x).data();
    for (int64_t bc = 0; bc < BC; ++bc) {
      const T* src = px + bc * HW;
      double m = 0.0;
      for (int64_t i = 0; i < HW; ++i) m += double(src[i]);
      m /= double(HW);
      double var = 0.0;
      for (int64_t i = 0; i < HW; ++i) {
        const double d = double(src[i]) - m;
        var += d * d;
      }
      var /= double(HW);
      const T inv = T(1.0 / std::sqrt(var + double(eps)));
      (*mean)[size_t(bc)] = T(m);
      (*inv_std)[size_t(bc)] = inv;
      T* dst = out.data() + bc * HW;
      for (int64_t i = 0; i < HW; ++i) dst[i] = (src[i] - T(m)) * inv;
    }
    const int ix = x.id;
    return make_op(std::move(out), {x},
                   [ix, BC, HW, mean, inv_std](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& y = g.nodes_[size_t(self)].value;
      Tensor<T>& dx = g.grad_buf(ix, g.nodes_[size_t(ix)].value.shape());
      for (int64_t bc = 0; bc < BC; ++bc) {
        const T* gp = go.data() + bc * HW;
        const T* yp = y.data() + bc * HW;
        T* dp = dx.data() + bc * HW;
        double gsum = 0.0, gysum = 0.0;
        for (int64_t i = 0; i < HW; ++i) {
          gsum += double(gp[i]);
          gysum += double(gp[i]) * double(yp[i]);
        }
        const T gm = T(gsum / double(HW));
        const T gym = T(gysum / double(HW));
        const T inv = (*inv_std)[size_t(bc)];
        for (int64_t i = 0; i < HW; ++i)
          dp[i] += inv * (gp[i] - gm - yp[i] * gym);
      }
    });
  }

  // ----- mask fusion -----

  // y = content * a + x * (1 - a); a (B,1,H,W) is clamped to [0,1] first.
  Var<T> fuse_single(Var<T> x, Var<T> content, Var<T> attention) {
    const auto& xs = value(x).shape();
    const auto& cs = value(content).shape();
    const auto& as = value(attention).shape();
    require(xs.size() == 4 && cs == xs && as.size() == 4 && as[1] == 1 &&
                as[0] == xs[0] && as[2] == xs[2] && as[3] == xs[3],
            "fuse_single: incompatible shapes");
    const int64_t B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    Tensor<T> out(xs);
    detail::fuse_single_kernel(value(x).data(), value(content).data(),
                               value(attention).data(), out.data(), B, C, HW);
    const int ix = x.id, ic = content.id, ia = attention.id;
    return make_op(std::move(out), {x, content, attention},
                   [ix, ic, ia, B, C, HW](Graph& g, int self) {
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& vx = g.nodes_[size_t(ix)].value;
      const Tensor<T>& vc = g.nodes_[size_t(ic)].value;
      const Tensor<T>& va = g.nodes_[size_t(ia)].value;
      const bool wx = g.wants(ix), wc = g.wants(ic), wa = g.wants(ia);
      Tensor<T>* dx = wx ? &g.grad_buf(ix, vx.shape()) : nullptr;
      Tensor<T>* dc = wc ? &g.grad_buf(ic, vc.shape()) : nullptr;
      Tensor<T>* da = wa ? &g.grad_buf(ia, va.shape()) : nullptr;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t ch = 0; ch < C; ++ch)
          for (int64_t p = 0; p < HW; ++p) {
            const int64_t xi = (b * C + ch) * HW + p;
            const int64_t mi = b * HW + p;
            const T av = detail::clamp01(va[mi]);
            const T gv = go[xi];
            if (wx) (*dx)[xi] += gv * (T(1) - av);
            if (wc) (*dc)[xi] += gv * av;
            if (wa) (*da)[mi] += gv * (vc[xi] - vx[xi]);
          }
    });
  }

  // y = sum_f content_f * a_f + x * a_bg with a (B,n,H,W), background last,
  // content channels grouped (B,(n-1)*C,H,W).
  Var<T> fuse_multi(Var<T> x, Var<T> content, Var<T> attention) {
    const auto& xs = value(x).shape();
    const auto& cs = value(content).shape();
    const auto& as = value(attention).shape();
    require(xs.size() == 4 && as.size() == 4 && cs.size() == 4, "fuse_multi: 4-d");
    const int64_t B = xs[0], C = xs[1], HW = xs[2] * xs[3], n = as[1];
    require(n >= 2 && as[0] == B && as[2] == xs[2] && as[3] == xs[3],
            "fuse_multi: attention shape");
    require(cs[0] == B && cs[1] == (n - 1) * C && cs[2] == xs[2] && cs[3] == xs[3],
            "fuse_multi: content count must be n_masks - 1");
    Tensor<T> out(xs);
    detail::fuse_multi_kernel(value(x).data(), value(content).data(),
                              value(attention).data(), out.data(), B, C, HW, n);
    const int ix = x.id, ic = content.id, ia = attention.id;
    return make_op(std::move(out), {x, content, attention},
                   [ix, ic, ia, B, C, HW, n](Graph& g, int self) {
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      const Tensor<T>& vx = g.nodes_[size_t(ix)].value;
      const Tensor<T>& vc = g.nodes_[size_t(ic)].value;
      const Tensor<T>& va = g.nodes_[size_t(ia)].value;
      const bool wx = g.wants(ix), wc = g.wants(ic), wa = g.wants(ia);
      Tensor<T>* dx = wx ? &g.grad_buf(ix, vx.shape()) : nullptr;
      Tensor<T>* dc = wc ? &g.grad_buf(ic, vc.shape()) : nullptr;
      Tensor<T>* da = wa ? &g.grad_buf(ia, va.shape()) : nullptr;
      const int64_t fg = n - 1;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t ch = 0; ch < C; ++ch)
          for (int64_t p = 0; p < HW; ++p) {
            const int64_t xi = (b * C + ch) * HW + p;
            const T gv = go[xi];
            const int64_t abase = b * n * HW + p;
            if (wx) (*dx)[xi] += gv * detail::clamp01(va[abase + fg * HW]);
            for (int64_t f = 0; f < fg; ++f) {
              const int64_t ci = ((b * fg + f) * C + ch) * HW + p;
              if (wc) (*dc)[ci] += gv * detail::clamp01(va[abase + f * HW]);
              if (wa) (*da)[b * n * HW + f * HW + p] += gv * vc[ci];
            }
            if (wa) (*da)[b * n * HW + fg * HW + p] += gv * vx[xi];
          }
    });
  }

  // ----- reductions / losses -----

  Var<T> mean_all(Var<T> x) {
    const int64_t N = value(x).numel();
    double acc = 0.0;
    const T* px = value(x).data();
    for (int64_t i = 0; i < N; ++i) acc += double(px[i]);
    Tensor<T> out({1});
    out[0] = T(acc / double(N));
    const int ix = x.id;
    return make_op(std::move(out), {x}, [ix, N](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const T gv = g.nodes_[size_t(self)].grad[0] / T(N);
      Tensor<T>& dx = g.grad_buf(ix, g.nodes_[size_t(ix)].value.shape());
      for (int64_t i = 0; i < N; ++i) dx[i] += gv;
    });
  }

  // mean |a - b| over every element.
  Var<T> l1_mean(Var<T> a, Var<T> b) {
    check_same(a, b, "l1_mean");
    const int64_t N = value(a).numel();
    const T* pa = value(a).data();
    const T* pb = value(b).data();
    double acc = 0.0;
    for (int64_t i = 0; i < N; ++i) acc += std::abs(double(pa[i]) - double(pb[i]));
    Tensor<T> out({1});
    out[0] = T(acc / double(N));
    const int ia = a.id, ib = b.id;
    return make_op(std::move(out), {a, b}, [ia, ib, N](Graph& g, int self) {
      const T gv = g.nodes_[size_t(self)].grad[0] / T(N);
      const Tensor<T>& va = g.nodes_[size_t(ia)].value;
      const Tensor<T>& vb = g.nodes_[size_t(ib)].value;
      const bool wa = g.wants(ia), wb = g.wants(ib);
      Tensor<T>* da = wa ? &g.grad_buf(ia, va.shape()) : nullptr;
      Tensor<T>* db = wb ? &g.grad_buf(ib, vb.shape()) : nullptr;
      for (int64_t i = 0; i < N; ++i) {
        const T d = va[i] - vb[i];
        const T s = d > T(0) ? gv : (d < T(0) ? -gv : T(0));
        if (wa) (*da)[i] += s;
        if (wb) (*db)[i] -= s;
      }
    });
  }

  // mean (x - target)^2 against a constant target.
  Var<T> mse_to_const(Var<T> x, T target) {
    const int64_t N = value(x).numel();
    const T* px = value(x).data();
    double acc = 0.0;
    for (int64_t i = 0; i < N; ++i) {
      const double d = double(px[i]) - double(target);
      acc += d * d;
    }
    Tensor<T> out({1});
    out[0] = T(acc / double(N));
    const int ix = x.id;
    return make_op(std::move(out), {x}, [ix, N, target](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const T gv = g.nodes_[size_t(self)].grad[0];
      const Tensor<T>& vx = g.nodes_[size_t(ix)].value;
      Tensor<T>& dx = g.grad_buf(ix, vx.shape());
      const T k = T(2) * gv / T(N);
      for (int64_t i = 0; i < N; ++i) dx[i] += k * (vx[i] - target);
    });
  }

  // Total variation of a single-channel mask: sum over forward differences
  // (no wrap-around), summed over pixels, averaged over batch.
  Var<T> tv_sum(Var<T> m) {
    const auto& ms = value(m).shape();
    require(ms.size() == 4 && ms[1] == 1, "tv_sum: need (B,1,H,W) mask");
    const int64_t B = ms[0], H = ms[2], W = ms[3];
    const T* pm = value(m).data();
    double acc = 0.0;
    for (int64_t b = 0; b < B; ++b) {
      const T* src = pm + b * H * W;
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w + 1 < W; ++w)
          acc += std::abs(double(src[h * W + w + 1]) - double(src[h * W + w]));
      for (int64_t h = 0; h + 1 < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          acc += std::abs(double(src[(h + 1) * W + w]) - double(src[h * W + w]));
    }
    Tensor<T> out({1});
    out[0] = T(acc / double(B));
    const int im = m.id;
    return make_op(std::move(out), {m}, [im, B, H, W](Graph& g, int self) {
      if (!g.wants(im)) return;
      const T gv = g.nodes_[size_t(self)].grad[0] / T(B);
      const Tensor<T>& vm = g.nodes_[size_t(im)].value;
      Tensor<T>& dm = g.grad_buf(im, vm.shape());
      for (int64_t b = 0; b < B; ++b) {
        const T* src = vm.data() + b * H * W;
        T* dst = dm.data() + b * H * W;
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w + 1 < W; ++w) {
            const T d = src[h * W + w + 1] - src[h * W + w];
            const T s = d > T(0) ? gv : (d < T(0) ? -gv : T(0));
            dst[h * W + w + 1] += s;
            dst[h * W + w] -= s;
          }
        for (int64_t h = 0; h + 1 < H; ++h)
          for (int64_t w = 0; w < W; ++w) {
            const T d = src[(h + 1) * W + w] - src[h * W + w];
            const T s = d > T(0) ? gv : (d < T(0) ? -gv : T(0));
            dst[(h + 1) * W + w] += s;
            dst[h * W + w] -= s;
          }
      }
    });
  }

  // Inner product with a fixed tensor: sum_i r_i * x_i (r is not a node).
  Var<T> inner_const(Var<T> x, Tensor<T> r) {
    require(value(x).same_shape(r), "inner_const: shape mismatch");
    const int64_t N = r.numel();
    const T* px = value(x).data();
    double acc = 0.0;
    for (int64_t i = 0; i < N; ++i) acc += double(px[i]) * double(r[i]);
    Tensor<T> out({1});
    out[0] = T(acc);
    const int ix = x.id;
    return make_op(std::move(out), {x}, [ix, r](Graph& g, int self) {
      if (!g.wants(ix)) return;
      const T gv = g.nodes_[size_t(self)].grad[0];
      Tensor<T>& dx = g.grad_buf(ix, g.nodes_[size_t(ix)].value.shape());
      for (int64_t i = 0; i < r.numel(); ++i) dx[i] += gv * r[i];
    });
  }

  // Weighted sum of scalar nodes: sum_i w_i * v_i.
  Var<T> weighted_sum(const std::vector<Var<T>>& terms,
                      const std::vector<T>& weights) {
    require(terms.size() == weights.size() && !terms.empty(),
            "weighted_sum: size mismatch");
    double acc = 0.0;
    std::vector<int> ids;
    ids.reserve(terms.size());
    for (size_t i = 0; i < terms.size(); ++i) {
      require(value(terms[i]).numel() == 1, "weighted_sum: scalar terms only");
      acc += double(weights[i]) * double(value(terms[i])[0]);
      ids.push_back(terms[i].id);
    }
    Tensor<T> out({1});
    out[0] = T(acc);
    const std::vector<T> w = weights;
    return make_op(std::move(out), terms, [ids, w](Graph& g, int self) {
      const T gv = g.nodes_[size_t(self)].grad[0];
      for (size_t i = 0; i < ids.size(); ++i) {
        if (!g.wants(ids[i])) continue;
        Tensor<T>& d = g.grad_buf(ids[i], g.nodes_[size_t(ids[i])].value.shape());
        d[0] += gv * w[i];
      }
    });
  }

  // ----- engine -----

  void backward(Var<T> root) {
    require(value(root).numel() == 1, "backward: root must be scalar");
    Tensor<T>& g = grad_buf(root.id, value(root).shape());
    g[0] += T(1);
    for (int id = root.id; id >= 0; --id) {
      Node& node = nodes_[size_t(id)];
      if (node.backprop && node.needs_grad && node.grad.defined())
        node.backprop(*this);
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

  // internal, public for closures
  bool wants(int id) const { return nodes_[size_t(id)].needs_grad; }

  Tensor<T>& grad_buf(int id, const std::vector<int64_t>& shape) {
    Node& node = nodes_[size_t(id)];
    if (!node.grad.defined()) node.grad = Tensor<T>::zeros(shape);
    return node.grad;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    Fn backprop;
  };

  Var<T> make(Tensor<T> value, bool needs_grad, Fn fn) {
    Node node;
    node.value = std::move(value);
    node.needs_grad = needs_grad;
    node.backprop = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var<T>{this, int(nodes_.size()) - 1};
  }

  template <typename F>
  Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& parents, F&& fn) {
    bool needs = false;
    for (const auto& p : parents) {
      require(p.graph == this, "op: vars belong to different graphs");
      needs |= nodes_[size_t(p.id)].needs_grad;
    }
    const int self = int(nodes_.size());
    Fn wrapped = [self, fn = std::forward<F>(fn)](Graph& g) { fn(g, self); };
    return make(std::move(value), needs, needs ? std::move(wrapped) : Fn());
  }

  Var<T> binary_passthrough(Var<T> a, Var<T> b, Tensor<T> out, T ka, T kb) {
    const int ia = a.id, ib = b.id;
    return make_op(std::move(out), {a, b}, [ia, ib, ka, kb](Graph& g, int self) {
      const Tensor<T>& go = g.nodes_[size_t(self)].grad;
      if (g.wants(ia)) {
        Tensor<T>& da = g.grad_buf(ia, g.nodes_[size_t(ia)].value.shape());
        for (int64_t i = 0; i < go.numel(); ++i) da[i] += go[i] * ka;
      }
      if (g.wants(ib)) {
        Tensor<T>& db = g.grad_buf(ib, g.nodes_[size_t(ib)].value.shape());
        for (int64_t i = 0; i < go.numel(); ++i) db[i] += go[i] * kb;
      }
    });
  }

  void check_same(Var<T> a, Var<T> b, const char* op) {
    require(value(a).same_shape(value(b)),
            std::string(op) + ": shape mismatch " + value(a).shape_str() +
                " vs " + value(b).shape_str());
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> param_ids_;
};

// Throws NumericError naming `context` if the value holds a non-finite entry.
template <typename T>
Var<T> checked(Var<T> v, const std::string& context) {
  if (!v.graph->value(v).all_finite())
    throw NumericError("non-finite activations in " + context);
  return v;
}

}  // namespace attni2i
