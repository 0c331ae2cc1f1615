#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "attni2i/graph.hpp"
#include "attni2i/tensor.hpp"

namespace attni2i::testing {

// Central-difference gradient check in double precision. `build` must
// construct a scalar loss from the given vars; it is re-invoked for every
// probe, so it has to be a pure function of the input tensors.
//
// Returns the maximum relative error  |analytic - numeric| /
// max(|analytic| + |numeric|, 1e-4)  over every element of every input.
template <typename F>
double gradcheck_max_rel_err(std::vector<Tensor<double>> inputs, F build,
                             double h = 1e-4) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (auto& t : inputs) vars.push_back(g.param(t));
  Var<double> loss = build(g, vars);
  g.backward(loss);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(g.grad_for(t).clone());

  auto eval = [&]() {
    Graph<double> fg;
    std::vector<Var<double>> vs;
    vs.reserve(inputs.size());
    for (auto& t : inputs) vs.push_back(fg.input(t));
    return fg.value(build(fg, vs))[0];
  };

  double max_err = 0.0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (int64_t i = 0; i < inputs[k].numel(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double fp = eval();
      inputs[k][i] = orig - h;
      const double fm = eval();
      inputs[k][i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double err =
          std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-4);
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace attni2i::testing
