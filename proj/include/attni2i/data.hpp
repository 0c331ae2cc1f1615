#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "attni2i/image_io.hpp"
#include "attni2i/masks.hpp"
#include "attni2i/rng.hpp"
#include "attni2i/tensor.hpp"

namespace attni2i {

namespace fs = std::filesystem;

inline bool is_image_file(const fs::path& p) {
  const std::string ext = p.extension().string();
  return detail::has_suffix(ext, ".png") || detail::has_suffix(ext, ".jpg") ||
         detail::has_suffix(ext, ".jpeg");
}

// Sorted image list of one domain folder.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir))
    throw ConfigError("dataset: missing folder '" + dir.string() + "'");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

// Horizontal flip of a (C, H, W) tensor; applying it twice restores the input.
template <typename T>
Tensor<T> hflip(const Tensor<T>& src) {
  require(src.ndim() == 3, "hflip: (C,H,W) expected");
  const int64_t C = src.size(0), H = src.size(1), W = src.size(2);
  Tensor<T> dst(src.shape());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        dst[(c * H + y) * W + x] = src[(c * H + y) * W + (W - 1 - x)];
  return dst;
}

// Pre-crop margin: 30 px at a 256 crop, scaled proportionally.
inline int64_t augment_margin(int64_t crop_size) {
  return int64_t(std::llround(30.0 * double(crop_size) / 256.0));
}

// Resize to crop_size + margin, take a uniform random crop, flip with
// probability 1/2. Three rng draws per call in a fixed order.
template <typename T>
Tensor<T> augment(const Tensor<T>& image, int64_t crop_size, Rng& rng) {
  require(image.ndim() == 3, "augment: (C,H,W) expected");
  const int64_t load_size = crop_size + augment_margin(crop_size);
  Tensor<T> resized = resize_bilinear(image, load_size, load_size);
  const int64_t max_off = load_size - crop_size;
  const int64_t oy = int64_t(rng.uniform_index(uint64_t(max_off + 1)));
  const int64_t ox = int64_t(rng.uniform_index(uint64_t(max_off + 1)));
  Tensor<T> crop({image.size(0), crop_size, crop_size});
  for (int64_t c = 0; c < image.size(0); ++c)
    for (int64_t y = 0; y < crop_size; ++y)
      for (int64_t x = 0; x < crop_size; ++x)
        crop[(c * crop_size + y) * crop_size + x] =
            resized[(c * load_size + (y + oy)) * load_size + (x + ox)];
  return rng.bernoulli(0.5) ? hflip(crop) : crop;
}

// Two independent image collections with no pairing between them. Iteration
// order is deterministic under the construction seed; an epoch covers the
// larger domain once while the smaller one wraps.
template <typename T>
class UnpairedDataset {
 public:
  UnpairedDataset(fs::path root, const std::string& split, uint64_t seed)
      : root_(std::move(root)),
        split_(split),
        files_A_(list_images(root_ / (split + "A"))),
        files_B_(list_images(root_ / (split + "B"))),
        rng_(seed) {
    if (files_A_.empty())
      throw ConfigError("dataset: no images in '" +
                        (root_ / (split + "A")).string() + "'");
    if (files_B_.empty())
      throw ConfigError("dataset: no images in '" +
                        (root_ / (split + "B")).string() + "'");
  }

  int64_t size_A() const { return int64_t(files_A_.size()); }
  int64_t size_B() const { return int64_t(files_B_.size()); }
  int64_t epoch_length() const { return std::max(size_A(), size_B()); }

  const fs::path& path_A(int64_t i) const { return files_A_[size_t(i)]; }
  const fs::path& path_B(int64_t i) const { return files_B_[size_t(i)]; }

  // Decoded, resized to `size`, normalized to [-1, 1]; shape (3, size, size).
  Tensor<T> image_A(int64_t i, int64_t size) const {
    return load_resized(files_A_[size_t(i)], size);
  }
  Tensor<T> image_B(int64_t i, int64_t size) const {
    return load_resized(files_B_[size_t(i)], size);
  }

  // Decoded at native resolution, normalized; shape (3, H, W).
  Tensor<T> raw_A(int64_t i) const {
    return to_tensor<T>(read_image(files_A_[size_t(i)].string()));
  }
  Tensor<T> raw_B(int64_t i) const {
    return to_tensor<T>(read_image(files_B_[size_t(i)].string()));
  }

  // Independent next sample from each domain, reshuffled per domain pass.
  std::pair<Tensor<T>, Tensor<T>> next_pair(int64_t size) {
    const int64_t ia = next_index(idx_A_, pos_A_, size_A());
    const int64_t ib = next_index(idx_B_, pos_B_, size_B());
    return {image_A(ia, size), image_B(ib, size)};
  }

  static Tensor<T> load_resized(const fs::path& p, int64_t size) {
    Tensor<T> t = to_tensor<T>(read_image(p.string()));
    return resize_bilinear(t, size, size);
  }

 private:
  int64_t next_index(std::vector<uint32_t>& order, size_t& pos, int64_t n) {
    if (pos >= order.size()) {
      order.resize(size_t(n));
      for (int64_t i = 0; i < n; ++i) order[size_t(i)] = uint32_t(i);
      for (int64_t i = n - 1; i > 0; --i)
        std::swap(order[size_t(i)],
                  order[size_t(rng_.uniform_index(uint64_t(i + 1)))]);
      pos = 0;
    }
    return int64_t(order[pos++]);
  }

  fs::path root_;
  std::string split_;
  std::vector<fs::path> files_A_, files_B_;
  Rng rng_;
  std::vector<uint32_t> idx_A_, idx_B_;
  size_t pos_A_ = 0, pos_B_ = 0;
};

template <typename T>
UnpairedDataset<T> load_unpaired(const std::string& root, const std::string& split,
                                 uint64_t seed) {
  return UnpairedDataset<T>(fs::path(root), split, seed);
}

// ----- synthetic two-domain data -----

// Disc-on-gradient toy task: domain A fills the disc with a solid color,
// domain B with vertical stripes. Per-index geometry and background are
// shared across domains so background statistics match by construction, and
// every image carries an exact foreground mask.
struct SynthSpec {
  int64_t canvas_size = 64;
  int64_t train_count = 16;
  int64_t test_count = 8;
  uint64_t seed = 0;
};

namespace detail {

struct SynthGeometry {
  double bg0[3], bg1[3];  // gradient endpoint colors in [0,1]
  double dir_x, dir_y;    // gradient direction
  double cx, cy, radius;  // disc placement
};

inline SynthGeometry synth_geometry(int64_t canvas, Rng& rng) {
  SynthGeometry g;
  for (int c = 0; c < 3; ++c) {
    g.bg0[c] = rng.uniform(0.25, 0.75);
    g.bg1[c] = rng.uniform(0.25, 0.75);
  }
  const double angle = rng.uniform(0.0, 6.283185307179586);
  g.dir_x = std::cos(angle);
  g.dir_y = std::sin(angle);
  // radius keeps the disc fully inside and its area within [5%, 40%]
  g.radius = rng.uniform(0.14, 0.34) * double(canvas);
  g.cx = rng.uniform(g.radius, double(canvas) - g.radius);
  g.cy = rng.uniform(g.radius, double(canvas) - g.radius);
  return g;
}

inline double synth_gradient_t(const SynthGeometry& g, int64_t canvas, double x,
                               double y) {
  // projection onto the gradient direction, normalized to [0, 1]
  const double half = double(canvas) / 2.0;
  const double proj = (x - half) * g.dir_x + (y - half) * g.dir_y;
  const double span = double(canvas) * 0.70710678118654752;
  return std::clamp(0.5 + proj / (2.0 * span), 0.0, 1.0);
}

}  // namespace detail

// Writes root/{trainA,trainB,testA,testB} plus root/masksA, root/masksB.
// Mask stems match their image stems; stems are unique across splits.
inline void synth_generate(const SynthSpec& spec, const std::string& root) {
  const fs::path base(root);
  std::error_code ec;
  for (const char* d :
       {"trainA", "trainB", "testA", "testB", "masksA", "masksB"}) {
    fs::create_directories(base / d, ec);
    if (ec)
      throw IoError("synth: cannot create '" + (base / d).string() +
                    "': " + ec.message());
  }
  const int64_t S = spec.canvas_size;
  for (const auto& [split, count] :
       {std::pair<std::string, int64_t>{"train", spec.train_count},
        {"test", spec.test_count}}) {
    Rng geo_rng(Rng::derive_seed(spec.seed, "synth_geometry:" + split));
    Rng tex_a(Rng::derive_seed(spec.seed, "synth_texture_a:" + split));
    Rng tex_b(Rng::derive_seed(spec.seed, "synth_texture_b:" + split));
    for (int64_t i = 0; i < count; ++i) {
      const auto g = detail::synth_geometry(S, geo_rng);
      // domain A: solid warm fill
      double solid[3] = {tex_a.uniform(0.55, 0.85), tex_a.uniform(0.2, 0.4),
                         tex_a.uniform(0.05, 0.25)};
      // domain B: vertical stripes with a random phase
      const double phase = tex_b.uniform(0.0, 6.0);
      const double dark = tex_b.uniform(0.02, 0.15);
      const double light = tex_b.uniform(0.85, 0.98);

      ImageU8 a, b, mask;
      a.width = a.height = b.width = b.height = mask.width = mask.height = S;
      a.channels = b.channels = 3;
      mask.channels = 1;
      a.pixels.resize(size_t(S * S * 3));
      b.pixels.resize(size_t(S * S * 3));
      mask.pixels.resize(size_t(S * S));

      for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
          const double px = double(x) + 0.5, py = double(y) + 0.5;
          const double dx = px - g.cx, dy = py - g.cy;
          const bool inside = dx * dx + dy * dy <= g.radius * g.radius;
          const double t = detail::synth_gradient_t(g, S, px, py);
          for (int64_t c = 0; c < 3; ++c) {
            const double bg = g.bg0[c] + (g.bg1[c] - g.bg0[c]) * t;
            double va = bg, vb = bg;
            if (inside) {
              va = solid[c];
              const double stripe =
                  std::fmod(px + phase, 6.0) < 3.0 ? dark : light;
              vb = stripe;
            }
            a.at(y, x, c) = uint8_t(std::lround(std::clamp(va, 0.0, 1.0) * 255));
            b.at(y, x, c) = uint8_t(std::lround(std::clamp(vb, 0.0, 1.0) * 255));
          }
          mask.pixels[size_t(y * S + x)] = inside ? 255 : 0;
        }

      char stem[32];
      std::snprintf(stem, sizeof(stem), "%s_%04lld", split.c_str(),
                    static_cast<long long>(i));
      write_png((base / (split + "A") / (std::string(stem) + ".png")).string(), a);
      write_png((base / (split + "B") / (std::string(stem) + ".png")).string(), b);
      write_png((base / "masksA" / (std::string(stem) + ".png")).string(), mask);
      write_png((base / "masksB" / (std::string(stem) + ".png")).string(), mask);
    }
  }
}

// Single-channel 8-bit mask as a float tensor in {0, 1}, shape (H, W).
template <typename T>
Tensor<T> read_mask(const std::string& path) {
  ImageU8 img = read_image(path);
  Tensor<T> t({img.height, img.width});
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x)
      t[y * img.width + x] = img.at(y, x, 0) >= 128 ? T(1) : T(0);
  return t;
}

}  // namespace attni2i
