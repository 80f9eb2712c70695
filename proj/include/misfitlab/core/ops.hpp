#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "misfitlab/core/graph.hpp"

// Differentiable operations over Graph<Scalar>. Each op computes its forward
// value eagerly and records a closure that maps the output gradient onto the
// inputs that require one.

namespace misfitlab::core {

namespace detail {

template <typename Scalar>
Graph<Scalar>& graph_of(Var<Scalar> a) {
  if (a.graph == nullptr) throw ContractError("operation on a detached Var");
  return *a.graph;
}

template <typename Scalar>
void same_graph(Var<Scalar> a, Var<Scalar> b) {
  if (a.graph != b.graph) throw ContractError("operands live on different graphs");
}

template <typename Scalar>
void require_same_shape(const char* op, Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_of(a.value()) + " vs " + shape_of(b.value()));
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::same_graph(a, b);
  auto& g = detail::graph_of(a);
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ " + shape_of(a.value()) + " x " + shape_of(b.value()));
  Matrix<Scalar> out;
  out.noalias() = a.value() * b.value();
  return g.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<Scalar>& g, std::size_t self) {
    const auto& d = g.grad(self);
    if (g.wants_grad(a)) g.grad_ref(a).noalias() += d * g.value(b).transpose();
    if (g.wants_grad(b)) g.grad_ref(b).noalias() += g.value(a).transpose() * d;
  });
}

/// x·W + b with b broadcast over rows.
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
  detail::same_graph(x, w);
  detail::same_graph(x, b);
  auto& g = detail::graph_of(x);
  if (x.cols() != w.rows())
    throw DimensionError("linear: " + shape_of(x.value()) + " x " + shape_of(w.value()));
  if (b.rows() != 1 || b.cols() != w.cols())
    throw DimensionError("linear: bias " + shape_of(b.value()) + " for weight " + shape_of(w.value()));
  Matrix<Scalar> out;
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return g.record(std::move(out), {x.id, w.id, b.id},
                  [x = x.id, w = w.id, b = b.id](Graph<Scalar>& g, std::size_t self) {
                    const auto& d = g.grad(self);
                    if (g.wants_grad(x)) g.grad_ref(x).noalias() += d * g.value(w).transpose();
                    if (g.wants_grad(w)) g.grad_ref(w).noalias() += g.value(x).transpose() * d;
                    if (g.wants_grad(b)) g.grad_ref(b) += d.colwise().sum();
                  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::same_graph(a, b);
  detail::require_same_shape("add", a, b);
  auto& g = detail::graph_of(a);
  return g.record(a.value() + b.value(), {a.id, b.id}, [a = a.id, b = b.id](Graph<Scalar>& g, std::size_t self) {
    if (g.wants_grad(a)) g.grad_ref(a) += g.grad(self);
    if (g.wants_grad(b)) g.grad_ref(b) += g.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::same_graph(a, b);
  detail::require_same_shape("sub", a, b);
  auto& g = detail::graph_of(a);
  return g.record(a.value() - b.value(), {a.id, b.id}, [a = a.id, b = b.id](Graph<Scalar>& g, std::size_t self) {
    if (g.wants_grad(a)) g.grad_ref(a) += g.grad(self);
    if (g.wants_grad(b)) g.grad_ref(b) -= g.grad(self);
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::same_graph(a, b);
  detail::require_same_shape("mul", a, b);
  auto& g = detail::graph_of(a);
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return g.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Graph<Scalar>& g, std::size_t self) {
    const auto& d = g.grad(self);
    if (g.wants_grad(a)) g.grad_ref(a) += d.cwiseProduct(g.value(b));
    if (g.wants_grad(b)) g.grad_ref(b) += d.cwiseProduct(g.value(a));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  auto& g = detail::graph_of(a);
  return g.record(a.value() * s, {a.id}, [a = a.id, s](Graph<Scalar>& g, std::size_t self) {
    g.grad_ref(a) += g.grad(self) * s;
  });
}

/// Multiplies every element of `x` by the 1x1 tensor `s`.
template <typename Scalar>
Var<Scalar> scalar_mul(Var<Scalar> x, Var<Scalar> s) {
  detail::same_graph(x, s);
  if (s.rows() != 1 || s.cols() != 1) throw DimensionError("scalar_mul: factor must be 1x1, got " + shape_of(s.value()));
  auto& g = detail::graph_of(x);
  return g.record(x.value() * s.value()(0, 0), {x.id, s.id}, [x = x.id, s = s.id](Graph<Scalar>& g, std::size_t self) {
    const auto& d = g.grad(self);
    if (g.wants_grad(x)) g.grad_ref(x) += d * g.value(s)(0, 0);
    if (g.wants_grad(s)) g.grad_ref(s)(0, 0) += d.cwiseProduct(g.value(x)).sum();
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  auto& g = detail::graph_of(a);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record(std::move(out), {a.id}, [a = a.id](Graph<Scalar>& g, std::size_t self) {
    g.grad_ref(a).array() += g.grad(self)(0, 0);
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  auto& g = detail::graph_of(a);
  const auto n = static_cast<Scalar>(a.value().size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return g.record(std::move(out), {a.id}, [a = a.id, n](Graph<Scalar>& g, std::size_t self) {
    g.grad_ref(a).array() += g.grad(self)(0, 0) / n;
  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  auto& g = detail::graph_of(a);
  Matrix<Scalar> out = a.value().transpose();
  return g.record(std::move(out), {a.id}, [a = a.id](Graph<Scalar>& g, std::size_t self) {
    g.grad_ref(a) += g.grad(self).transpose();
  });
}

template <typename Scalar>
Var<Scalar> exp(Var<Scalar> a) {
  auto& g = detail::graph_of(a);
  Matrix<Scalar> out = a.value().array().exp().matrix();
  return g.record(std::move(out), {a.id}, [a = a.id](Graph<Scalar>& g, std::size_t self) {
    g.grad_ref(a) += g.grad(self).cwiseProduct(g.value(self));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  auto& g = detail::graph_of(a);
  Matrix<Scalar> out = a.value().unaryExpr([](Scalar v) {
    // Branch keeps exp() from overflowing for large |v|.
    if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
  return g.record(std::move(out), {a.id}, [a = a.id](Graph<Scalar>& g, std::size_t self) {
    const auto& y = g.value(self);
    g.grad_ref(a).array() += g.grad(self).array() * y.array() * (Scalar(1) - y.array());
  });
}

// GELU, tanh form: 0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³))).
inline constexpr double kGeluCubic = 0.044715;
inline constexpr double kSqrtTwoOverPi = 0.7978845608028654;

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  auto& g = detail::graph_of(a);
  const auto c = static_cast<Scalar>(kSqrtTwoOverPi);
  const auto k = static_cast<Scalar>(kGeluCubic);
  Matrix<Scalar> out = a.value().unaryExpr([c, k](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + k * x * x * x)));
  });
  return g.record(std::move(out), {a.id}, [a = a.id, c, k](Graph<Scalar>& g, std::size_t self) {
    const auto& x = g.value(a);
    auto& ga = g.grad_ref(a);
    const auto& d = g.grad(self);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const Scalar v = x.data()[i];
      const Scalar t = std::tanh(c * (v + k * v * v * v));
      const Scalar dt = (Scalar(1) - t * t) * c * (Scalar(1) + Scalar(3) * k * v * v);
      ga.data()[i] += d.data()[i] * (Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * v * dt);
    }
  });
}

/// Row-wise layer normalization with affine gamma/beta (both 1 x d).
template <typename Scalar>
Var<Scalar> layernorm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps = Scalar(1e-5)) {
  detail::same_graph(x, gamma);
  detail::same_graph(x, beta);
  auto& g = detail::graph_of(x);
  const auto d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d)
    throw DimensionError("layernorm: input " + shape_of(x.value()) + " with gamma " + shape_of(gamma.value()) +
                         " and beta " + shape_of(beta.value()));
  if (!(eps > Scalar(0))) throw ContractError("layernorm: eps must be positive");

  const auto& xv = x.value();
  Matrix<Scalar> xhat(xv.rows(), d);
  std::vector<Scalar> inv_std(static_cast<std::size_t>(xv.rows()));
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (xv.row(r).array() - mu) * is;
  }
  Matrix<Scalar> out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return g.record(std::move(out), {x.id, gamma.id, beta.id},
                  [x = x.id, gm = gamma.id, bt = beta.id, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph<Scalar>& g, std::size_t self) {
                    const auto& dy = g.grad(self);
                    if (g.wants_grad(gm)) g.grad_ref(gm) += dy.cwiseProduct(xhat).colwise().sum();
                    if (g.wants_grad(bt)) g.grad_ref(bt) += dy.colwise().sum();
                    if (!g.wants_grad(x)) return;
                    auto& dx = g.grad_ref(x);
                    const auto gam = g.value(gm).row(0).array();
                    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                      const RowVector<Scalar> dxh = (dy.row(r).array() * gam).matrix();
                      const Scalar m1 = dxh.mean();
                      const Scalar m2 = dxh.cwiseProduct(xhat.row(r)).mean();
                      dx.row(r).array() +=
                          inv_std[static_cast<std::size_t>(r)] * (dxh.array() - m1 - xhat.row(r).array() * m2);
                    }
                  });
}

template <typename Scalar>
Matrix<Scalar> softmax_rows_value(const Matrix<Scalar>& x) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mx = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> x) {
  auto& g = detail::graph_of(x);
  return g.record(softmax_rows_value(x.value()), {x.id}, [x = x.id](Graph<Scalar>& g, std::size_t self) {
    const auto& y = g.value(self);
    const auto& d = g.grad(self);
    auto& dx = g.grad_ref(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const Scalar dot = d.row(r).dot(y.row(r));
      dx.row(r).array() += y.row(r).array() * (d.row(r).array() - dot);
    }
  });
}

/// Inverted dropout. Identity (the same Var) in eval mode or at rate 0.
template <typename Scalar, typename Rng>
Var<Scalar> dropout(Var<Scalar> x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  auto& g = detail::graph_of(x);
  std::bernoulli_distribution keep(1.0 - rate);
  const auto s = static_cast<Scalar>(1.0 / (1.0 - rate));
  Matrix<Scalar> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : Scalar(0);
  Matrix<Scalar> out = x.value().cwiseProduct(mask);
  return g.record(std::move(out), {x.id}, [x = x.id, mask = std::move(mask)](Graph<Scalar>& g, std::size_t self) {
    g.grad_ref(x) += g.grad(self).cwiseProduct(mask);
  });
}

/// Scales each row to unit Euclidean norm.
template <typename Scalar>
Var<Scalar> l2_normalize_rows(Var<Scalar> x, Scalar eps = Scalar(1e-12)) {
  auto& g = detail::graph_of(x);
  const auto& xv = x.value();
  std::vector<Scalar> norms(static_cast<std::size_t>(xv.rows()));
  Matrix<Scalar> out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Scalar n = std::max(xv.row(r).norm(), eps);
    norms[static_cast<std::size_t>(r)] = n;
    out.row(r) = xv.row(r) / n;
  }
  return g.record(std::move(out), {x.id}, [x = x.id, norms = std::move(norms)](Graph<Scalar>& g, std::size_t self) {
    const auto& y = g.value(self);
    const auto& d = g.grad(self);
    auto& dx = g.grad_ref(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const Scalar dot = d.row(r).dot(y.row(r));
      dx.row(r) += (d.row(r) - y.row(r) * dot) / norms[static_cast<std::size_t>(r)];
    }
  });
}

/// Mean over rows of -log softmax(row)[row index]: cross entropy with the
/// diagonal as target. Requires a square input.
template <typename Scalar>
Var<Scalar> cross_entropy_diagonal(Var<Scalar> logits) {
  auto& g = detail::graph_of(logits);
  const auto& z = logits.value();
  if (z.rows() != z.cols()) throw DimensionError("cross_entropy_diagonal: expects square logits, got " + shape_of(z));
  Matrix<Scalar> p = softmax_rows_value(z);
  Scalar loss = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const Scalar mx = z.row(r).maxCoeff();
    const Scalar lse = mx + std::log((z.row(r).array() - mx).exp().sum());
    loss += lse - z(r, r);
  }
  const auto n = static_cast<Scalar>(z.rows());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = loss / n;
  return g.record(std::move(out), {logits.id}, [l = logits.id, p = std::move(p), n](Graph<Scalar>& g, std::size_t self) {
    const Scalar d = g.grad(self)(0, 0) / n;
    auto& dz = g.grad_ref(l);
    dz += p * d;
    dz.diagonal().array() -= d;
  });
}

/// Stacks a over b.
template <typename Scalar>
Var<Scalar> concat_rows(Var<Scalar> a, Var<Scalar> b) {
  detail::same_graph(a, b);
  if (a.cols() != b.cols())
    throw DimensionError("concat_rows: " + shape_of(a.value()) + " and " + shape_of(b.value()));
  auto& g = detail::graph_of(a);
  Matrix<Scalar> out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.value();
  out.bottomRows(b.rows()) = b.value();
  const auto ra = a.rows();
  return g.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id, ra](Graph<Scalar>& g, std::size_t self) {
    const auto& d = g.grad(self);
    if (g.wants_grad(a)) g.grad_ref(a) += d.topRows(ra);
    if (g.wants_grad(b)) g.grad_ref(b) += d.bottomRows(d.rows() - ra);
  });
}

/// Places a beside b.
template <typename Scalar>
Var<Scalar> concat_cols(Var<Scalar> a, Var<Scalar> b) {
  detail::same_graph(a, b);
  if (a.rows() != b.rows())
    throw DimensionError("concat_cols: " + shape_of(a.value()) + " and " + shape_of(b.value()));
  auto& g = detail::graph_of(a);
  Matrix<Scalar> out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.value();
  out.rightCols(b.cols()) = b.value();
  const auto ca = a.cols();
  return g.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id, ca](Graph<Scalar>& g, std::size_t self) {
    const auto& d = g.grad(self);
    if (g.wants_grad(a)) g.grad_ref(a) += d.leftCols(ca);
    if (g.wants_grad(b)) g.grad_ref(b) += d.rightCols(d.cols() - ca);
  });
}

/// out.row(i) = x.row(index[i]); indices may repeat.
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> x, std::vector<Eigen::Index> index) {
  auto& g = detail::graph_of(x);
  Matrix<Scalar> out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(index[i]);
  }
  return g.record(std::move(out), {x.id}, [x = x.id, index = std::move(index)](Graph<Scalar>& g, std::size_t self) {
    const auto& d = g.grad(self);
    auto& dx = g.grad_ref(x);
    for (std::size_t i = 0; i < index.size(); ++i) dx.row(index[i]) += d.row(static_cast<Eigen::Index>(i));
  });
}

/// Contiguous run of rows [start, start + length) belonging to one set.
struct Segment {
  Eigen::Index start = 0;
  Eigen::Index length = 0;
};

/// Multi-head scaled dot-product self-attention restricted to segments.
/// `qkv` holds [Q | K | V] column blocks of width d each; rows outside every
/// segment never attend or get attended to. Output is rows x d.
template <typename Scalar>
Var<Scalar> segment_self_attention(Var<Scalar> qkv, std::vector<Segment> segments, int heads) {
  auto& g = detail::graph_of(qkv);
  const auto& m = qkv.value();
  if (heads <= 0 || m.cols() % (3 * heads) != 0)
    throw DimensionError("segment_self_attention: width " + std::to_string(m.cols()) + " not divisible by 3*" +
                         std::to_string(heads));
  const Eigen::Index d = m.cols() / 3;
  const Eigen::Index hd = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  const Eigen::Index stride = m.cols();

  std::size_t prob_size = 0;
  for (const auto& s : segments) {
    if (s.start < 0 || s.length <= 0 || s.start + s.length > m.rows())
      throw DimensionError("segment_self_attention: segment out of range");
    prob_size += static_cast<std::size_t>(s.length * s.length * heads);
  }
  std::vector<Scalar> probs(prob_size);
  Matrix<Scalar> out = Matrix<Scalar>::Zero(m.rows(), d);
  const Scalar* src = m.data();

  std::size_t off = 0;
  for (const auto& s : segments) {
    const Eigen::Index n = s.length;
    for (int h = 0; h < heads; ++h) {
      Scalar* p = probs.data() + off;
      const Eigen::Index qc = h * hd, kc = d + h * hd, vc = 2 * d + h * hd;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar* q = src + (s.start + i) * stride + qc;
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
          const Scalar* k = src + (s.start + j) * stride + kc;
          Scalar acc = 0;
          for (Eigen::Index t = 0; t < hd; ++t) acc += q[t] * k[t];
          p[i * n + j] = acc * inv_sqrt;
          mx = std::max(mx, p[i * n + j]);
        }
        Scalar z = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
          p[i * n + j] = std::exp(p[i * n + j] - mx);
          z += p[i * n + j];
        }
        Scalar* o = out.data() + (s.start + i) * d + h * hd;
        for (Eigen::Index j = 0; j < n; ++j) {
          p[i * n + j] /= z;
          const Scalar* v = src + (s.start + j) * stride + vc;
          for (Eigen::Index t = 0; t < hd; ++t) o[t] += p[i * n + j] * v[t];
        }
      }
      off += static_cast<std::size_t>(n * n);
    }
  }

  return g.record(std::move(out), {qkv.id},
                  [x = qkv.id, segments = std::move(segments), probs = std::move(probs), heads, d, hd, inv_sqrt,
                   stride](Graph<Scalar>& g, std::size_t self) {
                    const auto& dout = g.grad(self);
                    const Scalar* src = g.value(x).data();
                    Scalar* dsrc = g.grad_ref(x).data();
                    std::vector<Scalar> dp;
                    std::size_t off = 0;
                    for (const auto& s : segments) {
                      const Eigen::Index n = s.length;
                      dp.resize(static_cast<std::size_t>(n * n));
                      for (int h = 0; h < heads; ++h) {
                        const Scalar* p = probs.data() + off;
                        const Eigen::Index qc = h * hd, kc = d + h * hd, vc = 2 * d + h * hd;
                        // dP = dO·Vᵀ ; dV = Pᵀ·dO
                        for (Eigen::Index i = 0; i < n; ++i) {
                          const Scalar* go = dout.data() + (s.start + i) * d + h * hd;
                          for (Eigen::Index j = 0; j < n; ++j) {
                            const Scalar* v = src + (s.start + j) * stride + vc;
                            Scalar* dv = dsrc + (s.start + j) * stride + vc;
                            Scalar acc = 0;
                            for (Eigen::Index t = 0; t < hd; ++t) {
                              acc += go[t] * v[t];
                              dv[t] += p[i * n + j] * go[t];
                            }
                            dp[static_cast<std::size_t>(i * n + j)] = acc;
                          }
                        }
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then through the scaled QKᵀ.
                        for (Eigen::Index i = 0; i < n; ++i) {
                          Scalar dot = 0;
                          for (Eigen::Index j = 0; j < n; ++j) dot += dp[i * n + j] * p[i * n + j];
                          const Scalar* q = src + (s.start + i) * stride + qc;
                          Scalar* dq = dsrc + (s.start + i) * stride + qc;
                          for (Eigen::Index j = 0; j < n; ++j) {
                            const Scalar ds = p[i * n + j] * (dp[i * n + j] - dot) * inv_sqrt;
                            const Scalar* k = src + (s.start + j) * stride + kc;
                            Scalar* dk = dsrc + (s.start + j) * stride + kc;
                            for (Eigen::Index t = 0; t < hd; ++t) {
                              dq[t] += ds * k[t];
                              dk[t] += ds * q[t];
                            }
                          }
                        }
                        off += static_cast<std::size_t>(n * n);
                      }
                    }
                  });
}

/// Channel-major image batch geometry: a row holds C·H·W values laid out as
/// (c, y, x).
struct ImageGeometry {
  Eigen::Index channels = 0;
  Eigen::Index height = 0;
  Eigen::Index width = 0;
  Eigen::Index size() const { return channels * height * width; }
};

namespace detail {

template <typename Scalar>
void im2col(const Scalar* img, const ImageGeometry& geo, int k, Matrix<Scalar>& cols) {
  const int pad = k / 2;
  cols.setZero(geo.height * geo.width, geo.channels * k * k);
  for (Eigen::Index y = 0; y < geo.height; ++y)
    for (Eigen::Index x = 0; x < geo.width; ++x) {
      Scalar* row = cols.data() + (y * geo.width + x) * cols.cols();
      Eigen::Index col = 0;
      for (Eigen::Index c = 0; c < geo.channels; ++c)
        for (int dy = -pad; dy <= pad; ++dy)
          for (int dx = -pad; dx <= pad; ++dx, ++col) {
            const auto yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < geo.height && xx >= 0 && xx < geo.width)
              row[col] = img[(c * geo.height + yy) * geo.width + xx];
          }
    }
}

template <typename Scalar>
void col2im_add(const Matrix<Scalar>& dcols, const ImageGeometry& geo, int k, Scalar* dimg) {
  const int pad = k / 2;
  for (Eigen::Index y = 0; y < geo.height; ++y)
    for (Eigen::Index x = 0; x < geo.width; ++x) {
      const Scalar* row = dcols.data() + (y * geo.width + x) * dcols.cols();
      Eigen::Index col = 0;
      for (Eigen::Index c = 0; c < geo.channels; ++c)
        for (int dy = -pad; dy <= pad; ++dy)
          for (int dx = -pad; dx <= pad; ++dx, ++col) {
            const auto yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < geo.height && xx >= 0 && xx < geo.width)
              dimg[(c * geo.height + yy) * geo.width + xx] += row[col];
          }
    }
}

}  // namespace detail

/// Same-padded stride-1 convolution with an odd square kernel.
/// weight: out_channels x (in_channels·k·k); bias: 1 x out_channels.
/// Output rows have geometry (out_channels, height, width).
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, ImageGeometry geo, int kernel) {
  detail::same_graph(x, weight);
  detail::same_graph(x, bias);
  auto& g = detail::graph_of(x);
  if (kernel % 2 == 0) throw ContractError("conv2d: kernel must be odd");
  if (x.cols() != geo.size())
    throw DimensionError("conv2d: input " + shape_of(x.value()) + " does not match geometry");
  if (weight.cols() != geo.channels * kernel * kernel || bias.rows() != 1 || bias.cols() != weight.rows())
    throw DimensionError("conv2d: weight " + shape_of(weight.value()) + " / bias " + shape_of(bias.value()));
  const Eigen::Index cout = weight.rows();
  const Eigen::Index hw = geo.height * geo.width;
  const Eigen::Index batch = x.rows();

  std::vector<Matrix<Scalar>> cols(static_cast<std::size_t>(batch));
  Matrix<Scalar> out(batch, cout * hw);
  Matrix<Scalar> y;
  for (Eigen::Index b = 0; b < batch; ++b) {
    auto& c = cols[static_cast<std::size_t>(b)];
    detail::im2col(x.value().data() + b * geo.size(), geo, kernel, c);
    y.noalias() = weight.value() * c.transpose();  // cout x hw
    y.colwise() += bias.value().row(0).transpose();
    out.row(b) = Eigen::Map<const RowVector<Scalar>>(y.data(), cout * hw);
  }
  return g.record(std::move(out), {x.id, weight.id, bias.id},
                  [x = x.id, w = weight.id, bs = bias.id, cols = std::move(cols), geo, kernel, cout, hw](
                      Graph<Scalar>& g, std::size_t self) {
                    const auto& d = g.grad(self);
                    Matrix<Scalar> dcols;
                    for (Eigen::Index b = 0; b < d.rows(); ++b) {
                      Eigen::Map<const Matrix<Scalar>> dy(d.data() + b * cout * hw, cout, hw);
                      const auto& c = cols[static_cast<std::size_t>(b)];
                      if (g.wants_grad(w)) g.grad_ref(w).noalias() += dy * c;
                      if (g.wants_grad(bs)) g.grad_ref(bs) += dy.rowwise().sum().transpose();
                      if (g.wants_grad(x)) {
                        dcols.noalias() = dy.transpose() * g.value(w);
                        detail::col2im_add(dcols, geo, kernel, g.grad_ref(x).data() + b * geo.size());
                      }
                    }
                  });
}

/// 2x2 average pooling, stride 2. Height and width must be even.
template <typename Scalar>
Var<Scalar> avg_pool2(Var<Scalar> x, ImageGeometry geo) {
  auto& g = detail::graph_of(x);
  if (x.cols() != geo.size() || geo.height % 2 != 0 || geo.width % 2 != 0)
    throw DimensionError("avg_pool2: input " + shape_of(x.value()) + " does not match geometry");
  const ImageGeometry og{geo.channels, geo.height / 2, geo.width / 2};
  Matrix<Scalar> out(x.rows(), og.size());
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    const Scalar* in = x.value().data() + b * geo.size();
    Scalar* o = out.data() + b * og.size();
    for (Eigen::Index c = 0; c < og.channels; ++c)
      for (Eigen::Index yy = 0; yy < og.height; ++yy)
        for (Eigen::Index xx = 0; xx < og.width; ++xx) {
          const Scalar* base = in + (c * geo.height + 2 * yy) * geo.width + 2 * xx;
          o[(c * og.height + yy) * og.width + xx] = Scalar(0.25) * (base[0] + base[1] + base[geo.width] + base[geo.width + 1]);
        }
  }
  return g.record(std::move(out), {x.id}, [x = x.id, geo, og](Graph<Scalar>& g, std::size_t self) {
    const auto& d = g.grad(self);
    auto& dx = g.grad_ref(x);
    for (Eigen::Index b = 0; b < d.rows(); ++b) {
      const Scalar* go = d.data() + b * og.size();
      Scalar* gi = dx.data() + b * geo.size();
      for (Eigen::Index c = 0; c < og.channels; ++c)
        for (Eigen::Index yy = 0; yy < og.height; ++yy)
          for (Eigen::Index xx = 0; xx < og.width; ++xx) {
            const Scalar v = Scalar(0.25) * go[(c * og.height + yy) * og.width + xx];
            Scalar* base = gi + (c * geo.height + 2 * yy) * geo.width + 2 * xx;
            base[0] += v;
            base[1] += v;
            base[geo.width] += v;
            base[geo.width + 1] += v;
          }
    }
  });
}

/// Mean of embedding-table rows per bag of token ids.
template <typename Scalar>
Var<Scalar> embedding_mean(Var<Scalar> table, std::vector<std::vector<int>> bags) {
  auto& g = detail::graph_of(table);
  Matrix<Scalar> out = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(bags.size()), table.cols());
  for (std::size_t b = 0; b < bags.size(); ++b) {
    if (bags[b].empty()) throw ContractError("embedding_mean: empty token bag");
    for (int t : bags[b]) {
      if (t < 0 || t >= table.rows()) throw DimensionError("embedding_mean: token id " + std::to_string(t) + " out of vocabulary");
      out.row(static_cast<Eigen::Index>(b)) += table.value().row(t);
    }
    out.row(static_cast<Eigen::Index>(b)) /= static_cast<Scalar>(bags[b].size());
  }
  return g.record(std::move(out), {table.id}, [tb = table.id, bags = std::move(bags)](Graph<Scalar>& g, std::size_t self) {
    const auto& d = g.grad(self);
    auto& dt = g.grad_ref(tb);
    for (std::size_t b = 0; b < bags.size(); ++b) {
      const Scalar w = Scalar(1) / static_cast<Scalar>(bags[b].size());
      for (int t : bags[b]) dt.row(t) += d.row(static_cast<Eigen::Index>(b)) * w;
    }
  });
}

/// Mean squared error against a constant target of the same shape.
template <typename Scalar>
Var<Scalar> mse_loss(Var<Scalar> pred, const Matrix<Scalar>& target) {
  auto& g = detail::graph_of(pred);
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw DimensionError("mse_loss: prediction " + shape_of(pred.value()) + " vs target " + shape_of(target));
  const auto n = static_cast<Scalar>(target.size());
  Matrix<Scalar> diff = pred.value() - target;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return g.record(std::move(out), {pred.id}, [p = pred.id, diff = std::move(diff), n](Graph<Scalar>& g, std::size_t self) {
    g.grad_ref(p) += diff * (Scalar(2) * g.grad(self)(0, 0) / n);
  });
}

/// Mean binary cross entropy of probabilities against targets in [0,1].
/// Probabilities are clamped to [clamp, 1 - clamp]; the clamp has zero slope.
template <typename Scalar>
Var<Scalar> bce_loss(Var<Scalar> prob, const Matrix<Scalar>& target, Scalar clamp = Scalar(1e-7)) {
  auto& g = detail::graph_of(prob);
  if (prob.rows() != target.rows() || prob.cols() != target.cols())
    throw DimensionError("bce_loss: prediction " + shape_of(prob.value()) + " vs target " + shape_of(target));
  const auto n = static_cast<Scalar>(target.size());
  const auto& pv = prob.value();
  Matrix<Scalar> dldp(pv.rows(), pv.cols());
  Scalar total = 0;
  for (Eigen::Index i = 0; i < pv.size(); ++i) {
    const Scalar raw = pv.data()[i];
    const Scalar p = std::clamp(raw, clamp, Scalar(1) - clamp);
    const Scalar t = target.data()[i];
    total -= t * std::log(p) + (Scalar(1) - t) * std::log(Scalar(1) - p);
    const bool inside = raw > clamp && raw < Scalar(1) - clamp;
    dldp.data()[i] = inside ? (-t / p + (Scalar(1) - t) / (Scalar(1) - p)) : Scalar(0);
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / n;
  return g.record(std::move(out), {prob.id}, [p = prob.id, dldp = std::move(dldp), n](Graph<Scalar>& g, std::size_t self) {
    g.grad_ref(p) += dldp * (g.grad(self)(0, 0) / n);
  });
}

}  // namespace misfitlab::core
