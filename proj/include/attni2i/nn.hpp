#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attni2i/graph.hpp"
#include "attni2i/rng.hpp"
#include "attni2i/tensor.hpp"

namespace attni2i::nn {

// Named views of every trainable tensor in a module tree. Names key the
// optimizer state and the checkpoint blobs, so collection order and naming
// must stay stable across versions.
template <typename T>
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor<T>*>> entries;

  void add(std::string name, Tensor<T>& t) {
    entries.emplace_back(std::move(name), &t);
  }
  size_t size() const { return entries.size(); }
};

template <typename T>
int64_t count_parameters(const ParamRegistry<T>& reg) {
  int64_t n = 0;
  for (const auto& [name, t] : reg.entries) n += t->numel();
  return n;
}

// Counts any module exposing collect(registry, prefix).
template <typename T, typename Net>
int64_t count_parameters(const Net& net) {
  ParamRegistry<T> reg;
  const_cast<Net&>(net).collect(reg, "");
  return count_parameters(reg);
}

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // (Cout, Cin, k, k)
  Tensor<T> bias;    // (Cout) when has_bias
  int64_t stride = 1;
  int64_t pad = 0;
  bool has_bias = true;

  static Conv2d make(int64_t cin, int64_t cout, int64_t k, int64_t stride,
                     int64_t pad, Rng& rng, bool has_bias = true) {
    Conv2d c;
    c.weight = Tensor<T>::randn({cout, cin, k, k}, rng, T(0), T(0.02));
    if (has_bias) c.bias = Tensor<T>::zeros({cout});
    c.stride = stride;
    c.pad = pad;
    c.has_bias = has_bias;
    return c;
  }

  Var<T> operator()(Graph<T>& g, Var<T> x, bool trainable) {
    Var<T> b = has_bias ? g.param(bias, trainable) : Var<T>{};
    return g.conv2d(x, g.param(weight, trainable), b, stride, pad);
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".weight", weight);
    if (has_bias) reg.add(prefix + ".bias", bias);
  }

  int64_t param_count() const {
    return weight.numel() + (has_bias ? bias.numel() : 0);
  }
};

template <typename T>
struct ConvTranspose2d {
  Tensor<T> weight;  // (Cin, Cout, k, k)
  Tensor<T> bias;
  int64_t stride = 2;
  int64_t pad = 1;
  int64_t out_pad = 1;

  static ConvTranspose2d make(int64_t cin, int64_t cout, int64_t k,
                              int64_t stride, int64_t pad, int64_t out_pad,
                              Rng& rng) {
    ConvTranspose2d c;
    c.weight = Tensor<T>::randn({cin, cout, k, k}, rng, T(0), T(0.02));
    c.bias = Tensor<T>::zeros({cout});
    c.stride = stride;
    c.pad = pad;
    c.out_pad = out_pad;
    return c;
  }

  Var<T> operator()(Graph<T>& g, Var<T> x, bool trainable) {
    return g.conv_transpose2d(x, g.param(weight, trainable),
                              g.param(bias, trainable), stride, pad, out_pad);
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".weight", weight);
    reg.add(prefix + ".bias", bias);
  }
};

// reflection-pad 1 + conv3 + IN + ReLU + reflection-pad 1 + conv3 + IN,
// added back onto the input.
template <typename T>
struct ResnetBlock {
  Conv2d<T> conv1, conv2;

  static ResnetBlock make(int64_t dim, Rng& rng) {
    ResnetBlock b;
    b.conv1 = Conv2d<T>::make(dim, dim, 3, 1, 0, rng);
    b.conv2 = Conv2d<T>::make(dim, dim, 3, 1, 0, rng);
    return b;
  }

  Var<T> operator()(Graph<T>& g, Var<T> x, bool trainable) {
    auto h = checked(conv1(g, g.reflection_pad(x, 1), trainable), "resblock.conv1");
    h = g.relu(g.instance_norm(h));
    h = g.instance_norm(checked(conv2(g, g.reflection_pad(h, 1), trainable),
                                "resblock.conv2"));
    return g.add(x, h);
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    conv1.collect(reg, prefix + ".conv1");
    conv2.collect(reg, prefix + ".conv2");
  }
};

// Downsampling stack shared by both decoders: 7x7 stem plus two stride-2
// convolutions, instance-normalized ReLU throughout.
template <typename T>
struct Encoder {
  Conv2d<T> stem, down1, down2;

  static Encoder make(int64_t in_ch, int64_t ngf, Rng& rng) {
    Encoder e;
    e.stem = Conv2d<T>::make(in_ch, ngf, 7, 1, 0, rng);
    e.down1 = Conv2d<T>::make(ngf, ngf * 2, 3, 2, 1, rng);
    e.down2 = Conv2d<T>::make(ngf * 2, ngf * 4, 3, 2, 1, rng);
    return e;
  }

  Var<T> operator()(Graph<T>& g, Var<T> x, bool trainable) {
    auto h = checked(stem(g, g.reflection_pad(x, 3), trainable), "encoder.stem");
    h = g.relu(g.instance_norm(h));
    h = g.relu(g.instance_norm(checked(down1(g, h, trainable), "encoder.down1")));
    return g.relu(
        g.instance_norm(checked(down2(g, h, trainable), "encoder.down2")));
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    stem.collect(reg, prefix + ".stem");
    down1.collect(reg, prefix + ".down1");
    down2.collect(reg, prefix + ".down2");
  }
};

// Residual blocks followed by two stride-2 upsamplings and a 7x7 head that
// emits `out_ch` raw channels (activation applied by the caller).
template <typename T>
struct Decoder {
  std::vector<ResnetBlock<T>> blocks;
  ConvTranspose2d<T> up1, up2;
  Conv2d<T> head;

  static Decoder make(int64_t ngf, int64_t n_blocks, int64_t out_ch, Rng& rng) {
    Decoder d;
    d.blocks.reserve(size_t(n_blocks));
    for (int64_t i = 0; i < n_blocks; ++i)
      d.blocks.push_back(ResnetBlock<T>::make(ngf * 4, rng));
    d.up1 = ConvTranspose2d<T>::make(ngf * 4, ngf * 2, 3, 2, 1, 1, rng);
    d.up2 = ConvTranspose2d<T>::make(ngf * 2, ngf, 3, 2, 1, 1, rng);
    d.head = Conv2d<T>::make(ngf, out_ch, 7, 1, 0, rng);
    return d;
  }

  Var<T> operator()(Graph<T>& g, Var<T> x, bool trainable) {
    auto h = x;
    for (auto& b : blocks) h = b(g, h, trainable);
    h = g.relu(g.instance_norm(checked(up1(g, h, trainable), "decoder.up1")));
    h = g.relu(g.instance_norm(checked(up2(g, h, trainable), "decoder.up2")));
    return checked(head(g, g.reflection_pad(h, 3), trainable), "decoder.head");
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(reg, prefix + ".block" + std::to_string(i));
    up1.collect(reg, prefix + ".up1");
    up2.collect(reg, prefix + ".up2");
    head.collect(reg, prefix + ".head");
  }
};

}  // namespace attni2i::nn
