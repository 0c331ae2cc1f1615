#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "attni2i/masks.hpp"
#include "attni2i/nn.hpp"

namespace attni2i {

// In-graph result of one generator pass. `content` uses the flat
// (B, 3*n_content, H, W) layout; image comes from the scheme's fuse kernel.
template <typename T>
struct GeneratorVars {
  Var<T> image;
  Var<T> attention;
  Var<T> content;
};

// Single-mask generator: one encoder/residual/upsampling backbone with a
// sigmoid attention head and a tanh content head on the shared features.
template <typename T>
struct GeneratorSingle {
  nn::Encoder<T> encoder;
  std::vector<nn::ResnetBlock<T>> blocks;
  nn::ConvTranspose2d<T> up1, up2;
  nn::Conv2d<T> attention_head, content_head;

  GeneratorVars<T> forward(Graph<T>& g, Var<T> x, bool trainable = true) {
    auto h = encoder(g, x, trainable);
    for (auto& b : blocks) h = b(g, h, trainable);
    h = g.relu(g.instance_norm(checked(up1(g, h, trainable), "generator.up1")));
    h = g.relu(g.instance_norm(checked(up2(g, h, trainable), "generator.up2")));
    auto padded = g.reflection_pad(h, 3);
    auto attention = g.sigmoid(
        checked(attention_head(g, padded, trainable), "generator.attention_head"));
    auto content = g.tanh_(
        checked(content_head(g, padded, trainable), "generator.content_head"));
    auto image = g.fuse_single(x, content, attention);
    return {image, attention, content};
  }

  void collect(nn::ParamRegistry<T>& reg, const std::string& prefix) {
    encoder.collect(reg, prefix + ".encoder");
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(reg, prefix + ".block" + std::to_string(i));
    up1.collect(reg, prefix + ".up1");
    up2.collect(reg, prefix + ".up2");
    attention_head.collect(reg, prefix + ".attention_head");
    content_head.collect(reg, prefix + ".content_head");
  }
};

// Multi-mask generator: a parameter-sharing downsampling encoder feeding two
// independent decoder paths, one emitting n softmax attention masks and one
// emitting n-1 tanh content images.
template <typename T>
struct GeneratorMulti {
  int64_t n = 10;
  nn::Encoder<T> encoder;
  nn::Decoder<T> attention_decoder;  // head emits n channels
  nn::Decoder<T> content_decoder;    // head emits 3*(n-1) channels

  GeneratorVars<T> forward(Graph<T>& g, Var<T> x, bool trainable = true) {
    auto features = encoder(g, x, trainable);
    auto attention =
        g.softmax_channels(attention_decoder(g, features, trainable));
    auto content = g.tanh_(content_decoder(g, features, trainable));
    auto image = g.fuse_multi(x, content, attention);
    return {image, attention, content};
  }

  void collect(nn::ParamRegistry<T>& reg, const std::string& prefix) {
    encoder.collect(reg, prefix + ".encoder");
    attention_decoder.collect(reg, prefix + ".attention_decoder");
    content_decoder.collect(reg, prefix + ".content_decoder");
  }
};

// Either generator behind one forward/collect surface.
template <typename T>
struct Generator {
  Scheme scheme = Scheme::MultiMask;
  int64_t n_masks = 10;
  std::variant<GeneratorSingle<T>, GeneratorMulti<T>> net;

  GeneratorVars<T> forward(Graph<T>& g, Var<T> x, bool trainable = true) {
    return std::visit([&](auto& n) { return n.forward(g, x, trainable); }, net);
  }

  void collect(nn::ParamRegistry<T>& reg, const std::string& prefix) {
    std::visit([&](auto& n) { n.collect(reg, prefix); }, net);
  }
};

// 70x70-patch classifier: three stride-2 convolutions then two stride-1
// layers, LeakyReLU(0.2), instance norm except on the first layer. At input
// size S the logit map is (S/8 - 2) square: each stride-1 4x4 layer with
// pad 1 trims one row/column (e.g. 64 -> 32 -> 16 -> 8 -> 7 -> 6).
template <typename T>
struct PatchDiscriminator {
  int64_t in_channels = 3;
  nn::Conv2d<T> c1, c2, c3, c4, out;

  Var<T> forward(Graph<T>& g, Var<T> x, bool trainable = true) {
    auto h = g.leaky_relu(checked(c1(g, x, trainable), "discriminator.c1"), T(0.2));
    h = g.leaky_relu(
        g.instance_norm(checked(c2(g, h, trainable), "discriminator.c2")), T(0.2));
    h = g.leaky_relu(
        g.instance_norm(checked(c3(g, h, trainable), "discriminator.c3")), T(0.2));
    h = g.leaky_relu(
        g.instance_norm(checked(c4(g, h, trainable), "discriminator.c4")), T(0.2));
    return checked(out(g, h, trainable), "discriminator.out");
  }

  void collect(nn::ParamRegistry<T>& reg, const std::string& prefix) {
    c1.collect(reg, prefix + ".c1");
    c2.collect(reg, prefix + ".c2");
    c3.collect(reg, prefix + ".c3");
    c4.collect(reg, prefix + ".c4");
    out.collect(reg, prefix + ".out");
  }
};

inline int64_t scaled_width(int64_t base, double width_multiplier) {
  const int64_t w = int64_t(std::lround(double(base) * width_multiplier));
  return w < 1 ? 1 : w;
}

inline void check_image_size(int64_t image_size) {
  if (image_size != 64 && image_size != 128 && image_size != 256)
    throw ConfigError("unsupported image size " + std::to_string(image_size) +
                      " (expected 64, 128 or 256)");
}

inline int64_t residual_blocks_for(int64_t image_size) {
  return image_size >= 256 ? 9 : 6;
}

// Builds a generator with normal(0, 0.02) conv weights, deterministically
// from `seed`. n is ignored for the single-mask scheme.
template <typename T>
Generator<T> build_generator(Scheme scheme, int64_t n, int64_t image_size,
                             double width_multiplier, uint64_t seed) {
  check_image_size(image_size);
  const int64_t ngf = scaled_width(64, width_multiplier);
  const int64_t nb = residual_blocks_for(image_size);
  Rng rng(seed);
  Generator<T> gen;
  gen.scheme = scheme;
  if (scheme == Scheme::SingleMask) {
    gen.n_masks = 1;
    GeneratorSingle<T> net;
    net.encoder = nn::Encoder<T>::make(3, ngf, rng);
    net.blocks.reserve(size_t(nb));
    for (int64_t i = 0; i < nb; ++i)
      net.blocks.push_back(nn::ResnetBlock<T>::make(ngf * 4, rng));
    net.up1 = nn::ConvTranspose2d<T>::make(ngf * 4, ngf * 2, 3, 2, 1, 1, rng);
    net.up2 = nn::ConvTranspose2d<T>::make(ngf * 2, ngf, 3, 2, 1, 1, rng);
    net.attention_head = nn::Conv2d<T>::make(ngf, 1, 7, 1, 0, rng);
    net.content_head = nn::Conv2d<T>::make(ngf, 3, 7, 1, 0, rng);
    gen.net = std::move(net);
  } else {
    if (n < 2) throw ConfigError("multi-mask scheme needs n >= 2");
    gen.n_masks = n;
    GeneratorMulti<T> net;
    net.n = n;
    net.encoder = nn::Encoder<T>::make(3, ngf, rng);
    net.attention_decoder = nn::Decoder<T>::make(ngf, nb, n, rng);
    net.content_decoder = nn::Decoder<T>::make(ngf, nb, 3 * (n - 1), rng);
    gen.net = std::move(net);
  }
  return gen;
}

// PatchGAN discriminator; in_channels 3 (image) or 4 (mask + image).
template <typename T>
PatchDiscriminator<T> build_discriminator(int64_t in_channels, int64_t image_size,
                                          double width_multiplier, uint64_t seed) {
  if (in_channels != 3 && in_channels != 4)
    throw ConfigError("discriminator expects 3 or 4 input channels, got " +
                      std::to_string(in_channels));
  check_image_size(image_size);
  const int64_t ndf = scaled_width(64, width_multiplier);
  Rng rng(seed);
  PatchDiscriminator<T> d;
  d.in_channels = in_channels;
  d.c1 = nn::Conv2d<T>::make(in_channels, ndf, 4, 2, 1, rng);
  d.c2 = nn::Conv2d<T>::make(ndf, ndf * 2, 4, 2, 1, rng);
  d.c3 = nn::Conv2d<T>::make(ndf * 2, ndf * 4, 4, 2, 1, rng);
  d.c4 = nn::Conv2d<T>::make(ndf * 4, ndf * 8, 4, 1, 1, rng);
  d.out = nn::Conv2d<T>::make(ndf * 8, 1, 4, 1, 1, rng);
  return d;
}

// [mask, image] channel concatenation, mask first. The attention-guided
// discriminator pairs a single-channel mask with a 3-channel image.
template <typename T>
Tensor<T> concat_pair(const AttentionMaskSet<T>& mask, const ImageBatch<T>& image) {
  require(mask.scheme == Scheme::SingleMask && mask.n_masks == 1,
          "concat_pair: attention-guided pairs take a single-mask set");
  require(mask.data.size(0) == image.batch() && mask.data.size(2) == image.height() &&
              mask.data.size(3) == image.width(),
          "concat_pair: shape mismatch");
  const int64_t B = image.batch(), HW = image.height() * image.width();
  Tensor<T> out({B, 4, image.height(), image.width()});
  for (int64_t b = 0; b < B; ++b) {
    std::copy(mask.data.data() + b * HW, mask.data.data() + (b + 1) * HW,
              out.data() + b * 4 * HW);
    std::copy(image.data.data() + b * 3 * HW, image.data.data() + (b + 1) * 3 * HW,
              out.data() + (b * 4 + 1) * HW);
  }
  return out;
}

// Full forward pass on plain tensors; the returned bundle's image is exactly
// re-runnable through the matching fuse kernel.
template <typename T>
GeneratorOutput<T> generator_forward(Generator<T>& gen, const ImageBatch<T>& x) {
  Graph<T> g;
  auto vars = gen.forward(g, g.input(x.data), /*trainable=*/false);
  GeneratorOutput<T> out;
  out.image = ImageBatch<T>(g.value(vars.image));
  out.attention = AttentionMaskSet<T>(g.value(vars.attention), gen.scheme);
  const int64_t n_content = gen.scheme == Scheme::SingleMask ? 1 : gen.n_masks - 1;
  out.content = ContentMaskSet<T>::from_flat(g.value(vars.content), n_content);
  return out;
}

template <typename T, typename Net>
int64_t count_parameters(const Net& net) {
  return nn::count_parameters<T, Net>(net);
}

}  // namespace attni2i
