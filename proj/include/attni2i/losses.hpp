#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attni2i/masks.hpp"
#include "attni2i/networks.hpp"

namespace attni2i {

// Objective weights. The multi-mask objective uses {cycle, id} with a unit
// adversarial coefficient; the single-mask objective uses
// {cycle, pixel, gan, tv}. Unused weights are ignored.
template <typename T>
struct LossWeights {
  Scheme scheme = Scheme::MultiMask;
  T lambda_cycle = T(10);
  T lambda_id = T(0.5);
  T lambda_gan = T(0.5);
  T lambda_pixel = T(1);
  T lambda_tv = T(1e-6);

  static LossWeights defaults(Scheme scheme) {
    LossWeights w;
    w.scheme = scheme;
    return w;
  }

  void validate() const {
    if (!(lambda_cycle >= T(0) && lambda_id >= T(0) && lambda_gan >= T(0) &&
          lambda_pixel >= T(0) && lambda_tv >= T(0)))
      throw InvalidInput("loss weights must be nonnegative");
  }
};

// Scalar summary of one optimization step. `total` is the generator
// objective; `d_adv` is the sum of every discriminator's own loss and is
// optimized separately.
struct LossReport {
  double g_adv = 0;
  double d_adv = 0;
  double agan = 0;
  double cycle = 0;
  double identity = 0;
  double pixel = 0;
  double tv = 0;
  double total = 0;

  std::vector<std::pair<std::string, double>> entries() const {
    return {{"g_adv", g_adv}, {"d_adv", d_adv}, {"agan", agan},
            {"cycle", cycle}, {"identity", identity}, {"pixel", pixel},
            {"tv", tv},       {"total", total}};
  }

  bool all_finite() const {
    for (const auto& [k, v] : entries())
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Name of the first non-finite term, empty when clean.
  std::string first_non_finite() const {
    for (const auto& [k, v] : entries())
      if (!std::isfinite(v)) return k;
    return {};
  }
};

namespace losses {

// Least-squares discriminator loss: 0.5*mean((real-1)^2) + 0.5*mean(fake^2).
template <typename T>
Var<T> lsgan_d(Graph<T>& g, Var<T> real_logits, Var<T> fake_logits) {
  return g.weighted_sum(
      {g.mse_to_const(real_logits, T(1)), g.mse_to_const(fake_logits, T(0))},
      {T(0.5), T(0.5)});
}

// Least-squares generator loss: mean((fake-1)^2).
template <typename T>
Var<T> lsgan_g(Graph<T>& g, Var<T> fake_logits) {
  return g.mse_to_const(fake_logits, T(1));
}

// Both cycle directions: mean-L1(x_rec, x) + mean-L1(y_rec, y).
template <typename T>
Var<T> cycle(Graph<T>& g, Var<T> x, Var<T> x_rec, Var<T> y, Var<T> y_rec) {
  return g.weighted_sum({g.l1_mean(x_rec, x), g.l1_mean(y_rec, y)},
                        {T(1), T(1)});
}

// Identity preservation: mean-L1(G(y), y) + mean-L1(F(x), x).
template <typename T>
Var<T> identity(Graph<T>& g, Var<T> g_of_y, Var<T> y, Var<T> f_of_x, Var<T> x) {
  return g.weighted_sum({g.l1_mean(g_of_y, y), g.l1_mean(f_of_x, x)},
                        {T(1), T(1)});
}

// Translation restraint: mean-L1(G(x), x) + mean-L1(F(y), y).
template <typename T>
Var<T> pixel(Graph<T>& g, Var<T> g_of_x, Var<T> x, Var<T> f_of_y, Var<T> y) {
  return g.weighted_sum({g.l1_mean(g_of_x, x), g.l1_mean(f_of_y, y)},
                        {T(1), T(1)});
}

// Total variation of a single-channel attention mask: absolute forward
// differences summed over pixels, averaged over the batch.
template <typename T>
Var<T> tv(Graph<T>& g, Var<T> mask) {
  return g.tv_sum(mask);
}

}  // namespace losses

// ----- plain-tensor entry points (thin wrappers over the tape builders, so
// both routes share one formula) -----

template <typename T>
T lsgan_d_loss(const Tensor<T>& real_logits, const Tensor<T>& fake_logits) {
  if (!real_logits.all_finite() || !fake_logits.all_finite())
    throw InvalidInput("lsgan_d_loss: non-finite logits");
  Graph<T> g;
  return g.value(losses::lsgan_d(g, g.input(real_logits), g.input(fake_logits)))[0];
}

template <typename T>
T lsgan_g_loss(const Tensor<T>& fake_logits) {
  if (!fake_logits.all_finite())
    throw InvalidInput("lsgan_g_loss: non-finite logits");
  Graph<T> g;
  return g.value(losses::lsgan_g(g, g.input(fake_logits)))[0];
}

template <typename T>
T cycle_loss(const Tensor<T>& x, const Tensor<T>& x_rec, const Tensor<T>& y,
             const Tensor<T>& y_rec) {
  Graph<T> g;
  return g.value(losses::cycle(g, g.input(x), g.input(x_rec), g.input(y),
                               g.input(y_rec)))[0];
}

template <typename T>
T identity_loss(const Tensor<T>& g_of_y, const Tensor<T>& y,
                const Tensor<T>& f_of_x, const Tensor<T>& x) {
  Graph<T> g;
  return g.value(losses::identity(g, g.input(g_of_y), g.input(y),
                                  g.input(f_of_x), g.input(x)))[0];
}

template <typename T>
T pixel_loss(const Tensor<T>& g_of_x, const Tensor<T>& x, const Tensor<T>& f_of_y,
             const Tensor<T>& y) {
  Graph<T> g;
  return g.value(losses::pixel(g, g.input(g_of_x), g.input(x), g.input(f_of_y),
                               g.input(y)))[0];
}

// Scheme gate: total variation is a single-mask regularizer.
template <typename T>
T tv_loss(const AttentionMaskSet<T>& mask) {
  if (mask.scheme != Scheme::SingleMask)
    throw InvalidInput("tv_loss: defined for single-mask attention only");
  Graph<T> g;
  return g.value(losses::tv(g, g.input(mask.data)))[0];
}

// Attention-guided adversarial pair. Both pairs share the current batch's
// mask; gradients may flow into the mask through the fake pair.
template <typename T>
std::pair<T, T> agan_losses(PatchDiscriminator<T>& d_attn,
                            const AttentionMaskSet<T>& mask,
                            const ImageBatch<T>& real_y,
                            const ImageBatch<T>& fake_gx) {
  require(d_attn.in_channels == 4,
          "agan_losses: needs the 4-channel attention-guided discriminator");
  Tensor<T> real_pair = concat_pair(mask, real_y);
  Tensor<T> fake_pair = concat_pair(mask, fake_gx);
  Graph<T> g;
  auto real_logits = d_attn.forward(g, g.input(real_pair), false);
  auto fake_logits = d_attn.forward(g, g.input(fake_pair), false);
  const T d_term = g.value(losses::lsgan_d(g, real_logits, fake_logits))[0];
  const T g_term = g.value(losses::lsgan_g(g, fake_logits))[0];
  return {g_term, d_term};
}

// Multi-mask objective: g_adv + lambda_cycle * cycle + lambda_id * identity.
template <typename T>
double total_objective_multi(const LossReport& parts, const LossWeights<T>& w) {
  return parts.g_adv + double(w.lambda_cycle) * parts.cycle +
         double(w.lambda_id) * parts.identity;
}

// Single-mask objective: lambda_cycle * cycle + lambda_pixel * pixel +
// lambda_gan * (g_adv + agan) + lambda_tv * tv.
template <typename T>
double total_objective_single(const LossReport& parts, const LossWeights<T>& w) {
  return double(w.lambda_cycle) * parts.cycle +
         double(w.lambda_pixel) * parts.pixel +
         double(w.lambda_gan) * (parts.g_adv + parts.agan) +
         double(w.lambda_tv) * parts.tv;
}

template <typename T>
double total_objective(const LossReport& parts, const LossWeights<T>& w) {
  return w.scheme == Scheme::SingleMask ? total_objective_single(parts, w)
                                        : total_objective_multi(parts, w);
}

}  // namespace attni2i
