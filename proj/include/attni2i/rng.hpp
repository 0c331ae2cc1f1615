#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

namespace attni2i {

// Self-contained xoshiro256** generator. We avoid std:: distributions on
// purpose: their output is implementation-defined, and checkpoints must
// replay bit-exactly on any standard library.
class Rng {
 public:
  Rng() : Rng(0) {}

  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    // SplitMix64 expansion of the seed into the full state.
    uint64_t z = seed;
    for (auto& s : state_) {
      z += 0x9e3779b97f4a7c15ULL;
      uint64_t w = z;
      w = (w ^ (w >> 30)) * 0xbf58476d1ce4e5b9ULL;
      w = (w ^ (w >> 27)) * 0x94d049bb133111ebULL;
      s = w ^ (w >> 31);
    }
    have_gauss_ = false;
    gauss_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_index(uint64_t n) {
    // Rejection sampling keeps the result exactly uniform.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller, cached in pairs.
  double normal() {
    if (have_gauss_) {
      have_gauss_ = false;
      return gauss_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    gauss_ = r * std::sin(a);
    have_gauss_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derive an independent stream for a named purpose. FNV-1a over the tag
  // keeps the mapping stable across platforms.
  static uint64_t derive_seed(uint64_t master, std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : tag) {
      h ^= uint64_t(uint8_t(c));
      h *= 0x100000001b3ULL;
    }
    return master ^ h;
  }

  void save(std::ostream& os) const {
    os.write(reinterpret_cast<const char*>(state_.data()), sizeof(state_));
    const uint8_t hg = have_gauss_ ? 1 : 0;
    os.write(reinterpret_cast<const char*>(&hg), 1);
    os.write(reinterpret_cast<const char*>(&gauss_), sizeof(gauss_));
  }

  void load(std::istream& is) {
    is.read(reinterpret_cast<char*>(state_.data()), sizeof(state_));
    uint8_t hg = 0;
    is.read(reinterpret_cast<char*>(&hg), 1);
    is.read(reinterpret_cast<char*>(&gauss_), sizeof(gauss_));
    have_gauss_ = hg != 0;
  }

  bool operator==(const Rng& other) const {
    return state_ == other.state_ && have_gauss_ == other.have_gauss_ &&
           (!have_gauss_ || gauss_ == other.gauss_);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
  bool have_gauss_ = false;
  double gauss_ = 0.0;
};

}  // namespace attni2i
