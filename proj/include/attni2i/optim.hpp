#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>

#include "attni2i/graph.hpp"
#include "attni2i/nn.hpp"

namespace attni2i {

// Adam with bias correction. Moments are keyed by parameter name so the
// optimizer state survives checkpoint round-trips byte-exactly.
template <typename T>
class Adam {
 public:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };

  Adam() = default;
  Adam(T beta1, T beta2, T eps = T(1e-8))
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // One update over every parameter in the registry using gradients
  // recorded on `g`. Parameters without gradients step with zero gradient.
  void step(const nn::ParamRegistry<T>& params, Graph<T>& g, T lr) {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, T(t_));
    const T bc2 = T(1) - std::pow(beta2_, T(t_));
    for (const auto& [name, p] : params.entries) {
      Moments& mom = moments_[name];
      if (!mom.m.defined()) {
        mom.m = Tensor<T>::zeros(p->shape());
        mom.v = Tensor<T>::zeros(p->shape());
      }
      const Tensor<T> grad = g.grad_for(*p);
      for (int64_t i = 0; i < p->numel(); ++i) {
        const T gi = grad[i];
        mom.m[i] = beta1_ * mom.m[i] + (T(1) - beta1_) * gi;
        mom.v[i] = beta2_ * mom.v[i] + (T(1) - beta2_) * gi * gi;
        const T mhat = mom.m[i] / bc1;
        const T vhat = mom.v[i] / bc2;
        (*p)[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  T beta1() const { return beta1_; }
  T beta2() const { return beta2_; }

  std::unordered_map<std::string, Moments>& moments() { return moments_; }
  const std::unordered_map<std::string, Moments>& moments() const {
    return moments_;
  }

 private:
  T beta1_ = T(0.5);
  T beta2_ = T(0.999);
  T eps_ = T(1e-8);
  int64_t t_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

}  // namespace attni2i
