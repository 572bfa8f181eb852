#include "grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "error.hpp"

namespace stark {

namespace {

double evaluate(const ParametricLoss& f, const std::vector<Tensor>& params) {
  Graph g(false);
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(g.constant(p));
  return f(g, vars).value().item();
}

}  // namespace

GradCheckResult grad_check(const ParametricLoss& f, std::span<const Tensor> params, double eps) {
  if (!(eps > 0.0)) fail(ErrorCode::parameter, "grad_check: eps must be positive");
  std::vector<Tensor> point(params.begin(), params.end());

  const double base = evaluate(f, point);
  if (evaluate(f, point) != base) {
    fail(ErrorCode::unreliable_check, "grad_check: loss is not deterministic");
  }

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& p : point) vars.push_back(g.variable(p));
    Var loss = f(g, vars);
    if (loss.value().item() != base) {
      fail(ErrorCode::unreliable_check, "grad_check: recorded and unrecorded evaluations differ");
    }
    g.backward(loss);
    for (Var v : vars) analytic.push_back(g.grad(v));
  }

  GradCheckResult result;
  for (std::size_t t = 0; t < point.size(); ++t) {
    for (std::size_t i = 0; i < point[t].size(); ++i) {
      const double orig = point[t][i];
      point[t][i] = orig + eps;
      const double up = evaluate(f, point);
      point[t][i] = orig - eps;
      const double down = evaluate(f, point);
      point[t][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = rel;
        result.worst_tensor = t;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace stark
