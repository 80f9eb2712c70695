#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>

#include "misfitlab/core/graph.hpp"

namespace misfitlab::testing {

using core::Graph;
using core::Parameter;
using core::Var;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps gradients that
// are numerically zero from turning round-off into a large ratio.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() against central differences for every element of
/// every parameter. `build` must be a pure function of the parameter values.
inline GradCheckResult check_gradients(const std::function<Var<double>(Graph<double>&)>& build,
                                       std::span<Parameter<double>* const> params, double h = 1e-4,
                                       double floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    auto loss = build(g);
    g.backward(loss);
  }
  auto eval = [&] {
    Graph<double> g;
    return build(g).value()(0, 0);
  };
  GradCheckResult r;
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + h;
      const double up = eval();
      x = saved - h;
      const double down = eval();
      x = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = relative_error(p->grad.data()[i], numeric, floor);
      ++r.checked;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = p->name + "[" + std::to_string(i) + "] analytic=" + std::to_string(p->grad.data()[i]) +
                  " numeric=" + std::to_string(numeric);
      }
    }
  }
  return r;
}

}  // namespace misfitlab::testing
