#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attni2i/buffer.hpp"
#include "attni2i/config.hpp"
#include "attni2i/losses.hpp"
#include "attni2i/networks.hpp"
#include "attni2i/optim.hpp"

namespace attni2i {

// Deterministic reshuffling index stream over [0, n).
struct ShuffleCursor {
  std::vector<uint32_t> order;
  size_t pos = 0;

  int64_t next(int64_t n, Rng& rng) {
    if (pos >= order.size() || int64_t(order.size()) != n) {
      order.resize(size_t(n));
      for (int64_t i = 0; i < n; ++i) order[size_t(i)] = uint32_t(i);
      for (int64_t i = n - 1; i > 0; --i)
        std::swap(order[size_t(i)],
                  order[size_t(rng.uniform_index(uint64_t(i + 1)))]);
      pos = 0;
    }
    return int64_t(order[pos++]);
  }
};

// The single mutable object of the training loop: both generators, the
// discriminators, optimizer moments, replay buffers, and every rng stream
// the loop consumes. Checkpoints capture all of it bit-exactly.
template <typename T>
struct TrainState {
  Generator<T> gen_G;  // domain A -> B
  Generator<T> gen_F;  // domain B -> A
  PatchDiscriminator<T> disc_X, disc_Y;
  std::optional<PatchDiscriminator<T>> disc_XA, disc_YA;  // single-mask only
  Adam<T> opt_gen, opt_disc;
  ImageBuffer<T> buffer_X, buffer_Y;
  Rng data_rng;  // shuffling
  Rng aug_rng;   // crop/flip draws
  ShuffleCursor cursor_A, cursor_B;
  uint64_t step = 0;

  nn::ParamRegistry<T> generator_params() {
    nn::ParamRegistry<T> reg;
    gen_G.collect(reg, "G");
    gen_F.collect(reg, "F");
    return reg;
  }

  nn::ParamRegistry<T> discriminator_params() {
    nn::ParamRegistry<T> reg;
    disc_X.collect(reg, "DX");
    disc_Y.collect(reg, "DY");
    if (disc_XA) disc_XA->collect(reg, "DXA");
    if (disc_YA) disc_YA->collect(reg, "DYA");
    return reg;
  }
};

template <typename T>
TrainState<T> init_train_state(const TrainingConfig& cfg) {
  cfg.validate();
  TrainState<T> st;
  st.gen_G = build_generator<T>(cfg.scheme, cfg.n, cfg.image_size, cfg.width,
                                Rng::derive_seed(cfg.seed, "gen_G"));
  st.gen_F = build_generator<T>(cfg.scheme, cfg.n, cfg.image_size, cfg.width,
                                Rng::derive_seed(cfg.seed, "gen_F"));
  st.disc_X = build_discriminator<T>(3, cfg.image_size, cfg.width,
                                     Rng::derive_seed(cfg.seed, "disc_X"));
  st.disc_Y = build_discriminator<T>(3, cfg.image_size, cfg.width,
                                     Rng::derive_seed(cfg.seed, "disc_Y"));
  if (cfg.scheme == Scheme::SingleMask) {
    st.disc_XA = build_discriminator<T>(4, cfg.image_size, cfg.width,
                                        Rng::derive_seed(cfg.seed, "disc_XA"));
    st.disc_YA = build_discriminator<T>(4, cfg.image_size, cfg.width,
                                        Rng::derive_seed(cfg.seed, "disc_YA"));
  }
  st.opt_gen = Adam<T>(T(cfg.beta1), T(cfg.beta2));
  st.opt_disc = Adam<T>(T(cfg.beta1), T(cfg.beta2));
  st.buffer_X = ImageBuffer<T>(cfg.buffer_capacity,
                               Rng::derive_seed(cfg.seed, "buffer_X"));
  st.buffer_Y = ImageBuffer<T>(cfg.buffer_capacity,
                               Rng::derive_seed(cfg.seed, "buffer_Y"));
  st.data_rng.reseed(Rng::derive_seed(cfg.seed, "data_shuffle"));
  st.aug_rng.reseed(Rng::derive_seed(cfg.seed, "augment"));
  return st;
}

// Constant learning rate for the first half of the run, then linear decay
// to zero at total_steps.
inline double lr_at(uint64_t step, const TrainingConfig& cfg) {
  if (cfg.total_steps <= 0) return cfg.lr;
  const double total = double(cfg.total_steps);
  const double half = total / 2.0;
  if (double(step) <= half) return cfg.lr;
  const double remaining = (total - double(step)) / (total - half);
  return cfg.lr * std::max(0.0, remaining);
}

namespace detail {

template <typename T>
void check_training_batch(const Tensor<T>& b, const char* name) {
  require(b.ndim() == 4 && b.size(1) == 3,
          std::string("train_step: ") + name + " must be (B,3,H,W)");
  if (!b.all_finite())
    throw InvalidInput(std::string("train_step: non-finite values in ") + name);
  require(b.min_value() >= T(-1) - T(1e-4) && b.max_value() <= T(1) + T(1e-4),
          std::string("train_step: ") + name + " not normalized to [-1,1]");
}

inline void check_report_finite(const LossReport& report, uint64_t step) {
  const std::string bad = report.first_non_finite();
  if (!bad.empty())
    throw NumericError("train_step: non-finite loss term '" + bad +
                       "' at step " + std::to_string(step));
}

}  // namespace detail

// Detached generator outputs handed from the generator phase to the
// discriminator phase.
template <typename T>
struct PhaseHandoff {
  Tensor<T> fake_gx, fake_fy;  // G(x), F(y)
  Tensor<T> mask_y, mask_x;    // their attention masks (single-mask scheme)
};

// Generator update on the scheme's composite objective. Discriminator
// parameters participate frozen.
template <typename T>
LossReport generator_phase(TrainState<T>& st, const Tensor<T>& batch_x,
                           const Tensor<T>& batch_y, const TrainingConfig& cfg,
                           PhaseHandoff<T>& handoff) {
  const LossWeights<T> w = cfg.weights<T>();
  const T lr = T(lr_at(st.step, cfg));
  const bool single = cfg.scheme == Scheme::SingleMask;

  LossReport report;
  Tensor<T>& fake_gx = handoff.fake_gx;
  Tensor<T>& fake_fy = handoff.fake_fy;
  Tensor<T>& mask_y = handoff.mask_y;
  Tensor<T>& mask_x = handoff.mask_x;

  {
    Graph<T> g;
    auto vx = g.input(batch_x);
    auto vy = g.input(batch_y);
    auto out_gx = st.gen_G.forward(g, vx, true);
    auto out_fy = st.gen_F.forward(g, vy, true);
    auto rec_x = st.gen_F.forward(g, out_gx.image, true);
    auto rec_y = st.gen_G.forward(g, out_fy.image, true);

    auto adv = g.weighted_sum(
        {losses::lsgan_g(g, st.disc_Y.forward(g, out_gx.image, false)),
         losses::lsgan_g(g, st.disc_X.forward(g, out_fy.image, false))},
        {T(1), T(1)});
    auto cyc = losses::cycle(g, vx, rec_x.image, vy, rec_y.image);

    Var<T> total;
    if (single) {
      auto pix = losses::pixel(g, out_gx.image, vx, out_fy.image, vy);
      auto tv = g.weighted_sum(
          {losses::tv(g, out_gx.attention), losses::tv(g, out_fy.attention)},
          {T(1), T(1)});
      auto agan = g.weighted_sum(
          {losses::lsgan_g(
               g, st.disc_YA->forward(
                      g, g.concat_channels(out_gx.attention, out_gx.image), false)),
           losses::lsgan_g(
               g, st.disc_XA->forward(
                      g, g.concat_channels(out_fy.attention, out_fy.image), false))},
          {T(1), T(1)});
      total = g.weighted_sum({cyc, pix, adv, agan, tv},
                             {w.lambda_cycle, w.lambda_pixel, w.lambda_gan,
                              w.lambda_gan, w.lambda_tv});
      report.pixel = double(g.value(pix)[0]);
      report.tv = double(g.value(tv)[0]);
      report.agan = double(g.value(agan)[0]);
    } else {
      auto idt = losses::identity(g, st.gen_G.forward(g, vy, true).image, vy,
                                  st.gen_F.forward(g, vx, true).image, vx);
      total = g.weighted_sum({adv, cyc, idt},
                             {T(1), w.lambda_cycle, w.lambda_id});
      report.identity = double(g.value(idt)[0]);
    }
    report.g_adv = double(g.value(adv)[0]);
    report.cycle = double(g.value(cyc)[0]);
    // report the composite in double precision over the reported parts
    report.total = total_objective(report, cfg.weights<double>());

    g.backward(total);
    auto gen_params = st.generator_params();
    st.opt_gen.step(gen_params, g, lr);

    fake_gx = g.value(out_gx.image);
    fake_fy = g.value(out_fy.image);
    if (single) {
      mask_y = g.value(out_gx.attention);
      mask_x = g.value(out_fy.attention);
    }
  }
  return report;
}

// Discriminator update on refreshed fakes, generators frozen via detached
// values. Buffered fakes feed only the vanilla discriminator losses;
// attention-guided pairs use the current batch so mask and image stay
// aligned. Returns the summed discriminator loss.
template <typename T>
double discriminator_phase(TrainState<T>& st, const Tensor<T>& batch_x,
                           const Tensor<T>& batch_y, const TrainingConfig& cfg,
                           const PhaseHandoff<T>& handoff) {
  const T lr = T(lr_at(st.step, cfg));
  const bool single = cfg.scheme == Scheme::SingleMask;
  const Tensor<T>& fake_gx = handoff.fake_gx;
  const Tensor<T>& fake_fy = handoff.fake_fy;

  double d_adv = 0;
  {
    Tensor<T> pool_x = st.buffer_X.query(fake_fy);
    Tensor<T> pool_y = st.buffer_Y.query(fake_gx);
    Graph<T> g;
    auto vx = g.input(batch_x);
    auto vy = g.input(batch_y);
    std::vector<Var<T>> terms = {
        losses::lsgan_d(g, st.disc_Y.forward(g, vy, true),
                        st.disc_Y.forward(g, g.input(pool_y), true)),
        losses::lsgan_d(g, st.disc_X.forward(g, vx, true),
                        st.disc_X.forward(g, g.input(pool_x), true))};
    if (single) {
      auto vmask_y = g.input(handoff.mask_y);
      auto vmask_x = g.input(handoff.mask_x);
      terms.push_back(losses::lsgan_d(
          g,
          st.disc_YA->forward(g, g.concat_channels(vmask_y, vy), true),
          st.disc_YA->forward(g, g.concat_channels(vmask_y, g.input(fake_gx)),
                              true)));
      terms.push_back(losses::lsgan_d(
          g,
          st.disc_XA->forward(g, g.concat_channels(vmask_x, vx), true),
          st.disc_XA->forward(g, g.concat_channels(vmask_x, g.input(fake_fy)),
                              true)));
    }
    auto d_total = g.weighted_sum(terms, std::vector<T>(terms.size(), T(1)));
    d_adv = double(g.value(d_total)[0]);
    g.backward(d_total);
    auto disc_params = st.discriminator_params();
    st.opt_disc.step(disc_params, g, lr);
  }
  return d_adv;
}

// One optimization step: a generator update, then a discriminator update.
template <typename T>
LossReport train_step(TrainState<T>& st, const Tensor<T>& batch_x,
                      const Tensor<T>& batch_y, const TrainingConfig& cfg) {
  detail::check_training_batch(batch_x, "batch_x");
  detail::check_training_batch(batch_y, "batch_y");
  PhaseHandoff<T> handoff;
  LossReport report = generator_phase(st, batch_x, batch_y, cfg, handoff);
  report.d_adv = discriminator_phase(st, batch_x, batch_y, cfg, handoff);
  detail::check_report_finite(report, st.step);
  st.step += 1;
  return report;
}

// ----- checkpointing -----

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'A', 'T', 'T', 'N', 'G', 'A', 'N', '1'};
constexpr char kCheckpointFooter[4] = {'G', 'N', 'T', 'A'};
constexpr uint32_t kCheckpointVersion = 1;

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
  is.read(reinterpret_cast<char*>(p), std::streamsize(n));
  if (!is || size_t(is.gcount()) != n)
    throw CheckpointError("checkpoint: truncated file");
}

template <typename V>
void write_pod(std::ostream& os, V v) {
  write_bytes(os, &v, sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v;
  read_bytes(is, &v, sizeof(V));
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<uint64_t>(os, s.size());
  write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
  const uint64_t n = read_pod<uint64_t>(is);
  if (n > (1ull << 32)) throw CheckpointError("checkpoint: corrupt string size");
  std::string s(size_t(n), '\0');
  read_bytes(is, s.data(), size_t(n));
  return s;
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_pod<uint32_t>(os, uint32_t(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) write_pod<int64_t>(os, t.size(i));
  write_bytes(os, t.data(), size_t(t.numel()) * sizeof(T));
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  const uint32_t nd = read_pod<uint32_t>(is);
  if (nd > 8) throw CheckpointError("checkpoint: corrupt tensor rank");
  std::vector<int64_t> shape(nd);
  for (auto& d : shape) {
    d = read_pod<int64_t>(is);
    if (d < 0 || d > (1 << 24)) throw CheckpointError("checkpoint: corrupt dims");
  }
  Tensor<T> t(shape);
  read_bytes(is, t.data(), size_t(t.numel()) * sizeof(T));
  return t;
}

}  // namespace detail

template <typename T>
void save_checkpoint(TrainState<T>& st, const TrainingConfig& cfg,
                     const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("checkpoint: cannot open '" + path + "' for write");
  using namespace detail;
  write_bytes(os, kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod<uint32_t>(os, kCheckpointVersion);
  write_pod<uint32_t>(os, uint32_t(sizeof(T)));
  write_string(os, cfg.serialize());
  write_pod<uint64_t>(os, st.step);
  write_pod<int64_t>(os, st.opt_gen.step_count());
  write_pod<int64_t>(os, st.opt_disc.step_count());
  st.data_rng.save(os);
  st.aug_rng.save(os);

  auto write_cursor = [&os](const ShuffleCursor& c) {
    write_pod<uint64_t>(os, c.order.size());
    write_bytes(os, c.order.data(), c.order.size() * sizeof(uint32_t));
    write_pod<uint64_t>(os, c.pos);
  };
  write_cursor(st.cursor_A);
  write_cursor(st.cursor_B);

  auto write_buffer = [&os](ImageBuffer<T>& b) {
    b.rng().save(os);
    write_pod<int64_t>(os, b.capacity());
    write_pod<uint32_t>(os, uint32_t(b.storage().size()));
    const uint64_t per = b.storage().empty() ? 0 : b.storage()[0].size();
    write_pod<uint64_t>(os, per);
    for (const auto& img : b.storage())
      write_bytes(os, img.data(), img.size() * sizeof(T));
  };
  write_buffer(st.buffer_X);
  write_buffer(st.buffer_Y);

  auto gen_params = st.generator_params();
  auto disc_params = st.discriminator_params();
  std::vector<std::pair<std::string, Tensor<T>*>> entries;
  for (auto& e : gen_params.entries) entries.push_back(e);
  for (auto& e : disc_params.entries) entries.push_back(e);

  // parameters, then optimizer moments under reserved prefixes
  uint32_t count = uint32_t(entries.size());
  count += 2 * uint32_t(st.opt_gen.moments().size());
  count += 2 * uint32_t(st.opt_disc.moments().size());
  write_pod<uint32_t>(os, count);
  for (auto& [name, t] : entries) {
    write_string(os, name);
    write_tensor(os, *t);
  }
  auto write_moments = [&os](Adam<T>& opt, const std::string& prefix) {
    std::vector<std::string> names;
    for (auto& [name, mom] : opt.moments()) names.push_back(name);
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
      auto& mom = opt.moments()[name];
      write_string(os, prefix + name + ":m");
      write_tensor(os, mom.m);
      write_string(os, prefix + name + ":v");
      write_tensor(os, mom.v);
    }
  };
  write_moments(st.opt_gen, "optg:");
  write_moments(st.opt_disc, "optd:");

  write_bytes(os, kCheckpointFooter, sizeof(kCheckpointFooter));
  os.flush();
  if (!os) throw CheckpointError("checkpoint: write to '" + path + "' failed");
}

// Everything needed to resume or run inference.
template <typename T>
struct Checkpoint {
  TrainingConfig config;
  TrainState<T> state;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  using namespace detail;
  char magic[8];
  read_bytes(is, magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError("checkpoint: bad magic header in '" + path + "'");
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " +
                          std::to_string(version));
  const uint32_t scalar = read_pod<uint32_t>(is);
  if (scalar != sizeof(T))
    throw CheckpointError("checkpoint: scalar width mismatch");

  Checkpoint<T> ck;
  ck.config = TrainingConfig::deserialize(read_string(is));
  ck.state = init_train_state<T>(ck.config);
  TrainState<T>& st = ck.state;
  st.step = read_pod<uint64_t>(is);
  st.opt_gen.set_step_count(read_pod<int64_t>(is));
  st.opt_disc.set_step_count(read_pod<int64_t>(is));
  st.data_rng.load(is);
  st.aug_rng.load(is);

  auto read_cursor = [&is](ShuffleCursor& c) {
    const uint64_t n = read_pod<uint64_t>(is);
    if (n > (1 << 28)) throw CheckpointError("checkpoint: corrupt cursor");
    c.order.resize(size_t(n));
    read_bytes(is, c.order.data(), c.order.size() * sizeof(uint32_t));
    c.pos = size_t(read_pod<uint64_t>(is));
  };
  read_cursor(st.cursor_A);
  read_cursor(st.cursor_B);

  auto read_buffer = [&is](ImageBuffer<T>& b) {
    Rng rng;
    rng.load(is);
    const int64_t cap = read_pod<int64_t>(is);
    if (cap < 0 || cap > (1 << 20))
      throw CheckpointError("checkpoint: corrupt buffer capacity");
    b = ImageBuffer<T>(cap, 0);
    b.rng() = rng;
    const uint32_t cnt = read_pod<uint32_t>(is);
    const uint64_t per = read_pod<uint64_t>(is);
    if (cnt > uint32_t(cap) || per > (1ull << 30))
      throw CheckpointError("checkpoint: corrupt buffer");
    b.storage().resize(cnt);
    for (auto& img : b.storage()) {
      img.resize(size_t(per));
      read_bytes(is, img.data(), img.size() * sizeof(T));
    }
  };
  read_buffer(st.buffer_X);
  read_buffer(st.buffer_Y);

  auto gen_params = st.generator_params();
  auto disc_params = st.discriminator_params();
  std::unordered_map<std::string, Tensor<T>*> by_name;
  for (auto& [name, t] : gen_params.entries) by_name[name] = t;
  for (auto& [name, t] : disc_params.entries) by_name[name] = t;

  const uint32_t count = read_pod<uint32_t>(is);
  size_t params_seen = 0;
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = read_string(is);
    Tensor<T> t = read_tensor<T>(is);
    if (name.rfind("optg:", 0) == 0 || name.rfind("optd:", 0) == 0) {
      const bool gen = name.rfind("optg:", 0) == 0;
      const std::string rest = name.substr(5);
      const size_t sep = rest.rfind(':');
      if (sep == std::string::npos)
        throw CheckpointError("checkpoint: malformed moment name '" + name + "'");
      const std::string pname = rest.substr(0, sep);
      auto& mom = (gen ? st.opt_gen : st.opt_disc).moments()[pname];
      (rest.substr(sep + 1) == "m" ? mom.m : mom.v) = std::move(t);
    } else {
      auto it = by_name.find(name);
      if (it == by_name.end())
        throw CheckpointError("checkpoint: unknown parameter '" + name + "'");
      if (it->second->shape() != t.shape())
        throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
      *it->second = std::move(t);
      ++params_seen;
    }
  }
  if (params_seen != by_name.size())
    throw CheckpointError("checkpoint: missing parameters (expected " +
                          std::to_string(by_name.size()) + ", found " +
                          std::to_string(params_seen) + ")");

  char footer[4];
  read_bytes(is, footer, sizeof(footer));
  if (std::memcmp(footer, kCheckpointFooter, sizeof(footer)) != 0)
    throw CheckpointError("checkpoint: bad footer (file corrupt)");
  return ck;
}

}  // namespace attni2i
