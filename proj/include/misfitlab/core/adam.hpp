#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "misfitlab/core/graph.hpp"

namespace misfitlab::core {

/// Step decay: `initial` until `step_epochs`, then multiplied by `factor`
/// once per further `step_epochs` epochs.
struct StepDecay {
  double initial = 1e-4;
  double factor = 0.1;
  int step_epochs = 10;

  double operator()(int epoch) const {
    if (epoch < 0) throw ContractError("lr_schedule: epoch must be non-negative");
    return initial * std::pow(factor, epoch / step_epochs);
  }
};

inline double lr_schedule(int epoch) { return StepDecay{}(epoch); }

template <typename Scalar>
struct AdamState {
  std::vector<Matrix<Scalar>> m;
  std::vector<Matrix<Scalar>> v;
  long step_count = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::span<Parameter<Scalar>* const> params, double learning_rate = 1e-4)
      : lr(learning_rate) {
    if (!(lr > 0)) throw ContractError("AdamState: lr must be positive");
    for (const auto* p : params) {
      m.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      v.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
  }
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Gradients are left in place; callers zero them between steps.
template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>* const> params, AdamState<Scalar>& state) {
  if (params.size() != state.m.size()) throw ContractError("adam_step: state was built for a different parameter list");
  if (!(state.lr > 0)) throw ContractError("adam_step: lr must be positive");
  ++state.step_count;
  const auto b1 = static_cast<Scalar>(state.beta1);
  const auto b2 = static_cast<Scalar>(state.beta2);
  const Scalar c1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(state.step_count));
  const Scalar c2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(state.step_count));
  const auto lr = static_cast<Scalar>(state.lr);
  const auto eps = static_cast<Scalar>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      throw DimensionError("adam_step: moment shape differs for " + p.name);
    m = b1 * m + (Scalar(1) - b1) * p.grad;
    v = b2 * v + (Scalar(1) - b2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

}  // namespace misfitlab::core
