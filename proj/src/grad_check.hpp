#pragma once

#include <functional>
#include <span>

#include "tensor.hpp"

namespace stark {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Builds a scalar loss on the graph from the given parameter Vars.
using ParametricLoss = std::function<Var(Graph&, std::span<const Var>)>;

// Compares reverse-mode gradients of f against central differences
// (f(x+eps) - f(x-eps)) / 2eps, coordinate by coordinate. Relative error is
// |a - n| / max(|a|, |n|, 1e-8). Throws a parameter error for eps <= 0 and an
// unreliable-check error when two evaluations at the same point disagree.
GradCheckResult grad_check(const ParametricLoss& f, std::span<const Tensor> params, double eps);

inline constexpr double kGradCheckFloor = 1e-8;

}  // namespace stark
