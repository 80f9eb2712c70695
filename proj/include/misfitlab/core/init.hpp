#pragma once

#include <cmath>
#include <random>

#include "misfitlab/core/graph.hpp"

namespace misfitlab::core {

/// Glorot/Xavier uniform for a fan_in x fan_out weight.
template <typename Scalar, typename Rng>
Matrix<Scalar> xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix<Scalar> m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

template <typename Scalar, typename Rng>
Matrix<Scalar> normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

}  // namespace misfitlab::core
