#pragma once

// Central finite-difference check of tape gradients.

#include "epio/autodiff.hpp"

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace epio {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int worst_input = -1;
};

/// f maps leaf variables to any-shaped output; the checked scalar is
/// sum(f(x) .* P) for a fixed random P. Relative error per input is
/// ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, floor).
template <typename F>
GradCheckResult grad_check(F&& f, const std::vector<Matrix<double>>& inputs, std::uint64_t seed,
                           double h = 1e-5, double floor = 1e-8) {
  Matrix<double> probe;
  auto eval = [&](const std::vector<Matrix<double>>& xs, std::vector<Matrix<double>>* grads) {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.variable(x));
    ad::Var<double> out = f(tape, vars);
    if (probe.size() == 0) {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      probe.resize(out.rows(), out.cols());
      for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = normal(rng);
    }
    ad::Var<double> loss = ad::sum(ad::mul(out, tape.constant(probe)));
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (std::size_t i = 0; i < vars.size(); ++i) {
        const auto& g = tape.grad(vars[i].id());
        grads->push_back(g.size() == 0 ? Matrix<double>::Zero(xs[i].rows(), xs[i].cols()) : g);
      }
    }
    return loss.value()(0, 0);
  };

  std::vector<Matrix<double>> analytic;
  eval(inputs, &analytic);
  GradCheckResult result;
  std::vector<Matrix<double>> xs = inputs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Matrix<double> numeric(xs[i].rows(), xs[i].cols());
    for (Eigen::Index k = 0; k < xs[i].size(); ++k) {
      const double saved = xs[i].data()[k];
      xs[i].data()[k] = saved + h;
      const double fp = eval(xs, nullptr);
      xs[i].data()[k] = saved - h;
      const double fm = eval(xs, nullptr);
      xs[i].data()[k] = saved;
      numeric.data()[k] = (fp - fm) / (2.0 * h);
    }
    const double denom = std::max({analytic[i].norm(), numeric.norm(), floor});
    const double err = (analytic[i] - numeric).norm() / denom;
    if (result.worst_input < 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_input = static_cast<int>(i);
    }
  }
  return result;
}

}  // namespace epio
