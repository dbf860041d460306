#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "gattn/tensor.hpp"

namespace gattn {

/// Compares reverse-mode gradients against central finite differences for
/// every element of every probe tensor. `f` must rebuild its graph on each
/// call and return a scalar; probes are the leaves it closes over. Returns
/// the worst relative error (denominator floored at 1e-8). Reports only,
/// never asserts. Run in double.
template <typename F>
double grad_check(F&& f, std::vector<Tensor<double>> probes, double eps = 1e-5) {
  for (auto& p : probes) {
    p.set_requires_grad(true);
    p.grad();
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = f();
    tape.backward(loss);
  }
  for (auto& p : probes) analytic.push_back(p.grad());

  double worst = 0.0;
  for (std::size_t pi = 0; pi < probes.size(); ++pi) {
    auto& p = probes[pi];
    for (std::size_t i = 0; i < p.data().size(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + eps;
      const double fp = f().item();
      p.data()[i] = orig - eps;
      const double fm = f().item();
      p.data()[i] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double ad = analytic[pi][i];
      const double denom = std::max({std::abs(ad), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(ad - fd) / denom);
    }
  }
  for (auto& p : probes) p.zero_grad();
  return worst;
}

template <typename F>
double grad_check(F&& f, Tensor<double> probe, double eps = 1e-5) {
  return grad_check(std::forward<F>(f), std::vector<Tensor<double>>{std::move(probe)}, eps);
}

}  // namespace gattn
