#pragma once

#include <cstdint>
#include <vector>

#include "attni2i/rng.hpp"
#include "attni2i/tensor.hpp"

namespace attni2i {

// History of generated images used to refresh discriminator batches. Until
// full, every query stores a copy and returns its input; once full, each
// image swaps with a uniformly random stored one with probability 1/2.
template <typename T>
class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int64_t capacity, uint64_t seed) : capacity_(capacity), rng_(seed) {}

  // fresh: (B, C, H, W). Returns a batch of the same shape.
  Tensor<T> query(const Tensor<T>& fresh) {
    require(fresh.ndim() == 4, "image buffer: expected a 4-d batch");
    if (capacity_ <= 0) return fresh;
    const int64_t B = fresh.size(0);
    const int64_t per = fresh.numel() / B;
    Tensor<T> out(fresh.shape());
    for (int64_t b = 0; b < B; ++b) {
      const T* src = fresh.data() + b * per;
      T* dst = out.data() + b * per;
      if (int64_t(storage_.size()) < capacity_) {
        storage_.emplace_back(src, src + per);
        std::copy(src, src + per, dst);
      } else if (rng_.bernoulli(0.5)) {
        auto& slot = storage_[size_t(rng_.uniform_index(uint64_t(capacity_)))];
        require(int64_t(slot.size()) == per,
                "image buffer: image size changed between queries");
        std::copy(slot.begin(), slot.end(), dst);
        slot.assign(src, src + per);
      } else {
        std::copy(src, src + per, dst);
      }
    }
    return out;
  }

  int64_t size() const { return int64_t(storage_.size()); }
  int64_t capacity() const { return capacity_; }
  Rng& rng() { return rng_; }
  std::vector<std::vector<T>>& storage() { return storage_; }
  const std::vector<std::vector<T>>& storage() const { return storage_; }

 private:
  int64_t capacity_ = 50;
  std::vector<std::vector<T>> storage_;
  Rng rng_;
};

}  // namespace attni2i
