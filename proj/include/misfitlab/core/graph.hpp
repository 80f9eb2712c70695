#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "misfitlab/errors.hpp"

namespace misfitlab::core {

// Dense row-major storage. Every tensor on the tape is rank 2; operations that
// need more geometry (images, token bags, outfit segments) carry it explicitly.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  std::ostringstream os;
  os << '[' << rows << 'x' << cols << ']';
  return os.str();
}

template <typename Derived>
std::string shape_of(const Eigen::EigenBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// A trainable tensor that outlives any single tape. Gradients from every
/// backward pass that reaches it are accumulated into `grad`.
template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, Matrix<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix<Scalar>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

template <typename Scalar>
class Graph;

/// Handle to a node on a Graph. Cheap to copy; valid for the graph's lifetime.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  std::size_t id = 0;

  const Matrix<Scalar>& value() const { return graph->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const { return graph->requires_grad(*this); }
};

/// Append-only reverse-mode tape. Nodes are topologically ordered by
/// construction; backward() walks them in reverse append order once.
template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  // Called with (graph, id of the node whose grad is being propagated).
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(Mat value) { return push(std::move(value), {}, false, nullptr, {}); }

  Var<Scalar> parameter(Parameter<Scalar>& p) { return push(p.value, {}, true, &p, {}); }

  /// A leaf that takes gradients but is not backed by a Parameter.
  Var<Scalar> leaf(Mat value) { return push(std::move(value), {}, true, nullptr, {}); }

  /// Records an operation result. The backward function is stored only when
  /// some input requires a gradient.
  Var<Scalar> record(Mat value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
    if (!needs) return push(std::move(value), {}, false, nullptr, {});
    return push(std::move(value), std::move(inputs), true, nullptr, std::move(backward));
  }

  const Mat& value(Var<Scalar> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<Scalar> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() w.r.t. node v; empty if v was not reached.
  const Mat& grad(Var<Scalar> v) const { return nodes_.at(v.id).grad; }

  // Used by backward functions.
  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  const Mat& grad(std::size_t id) const { return nodes_[id].grad; }
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad && nodes_[id].reached; }
  Mat& grad_ref(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Populates gradients for every requires-grad node reachable from `loss`
  /// and adds leaf gradients into their Parameters.
  void backward(Var<Scalar> loss) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
    const auto& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1)
      throw ContractError("backward: loss must be scalar, got " + shape_of(lv));
    if (!nodes_[loss.id].requires_grad) return;

    for (auto& n : nodes_) {
      n.reached = false;
      n.grad.resize(0, 0);
    }
    nodes_[loss.id].reached = true;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (!nodes_[i].reached) continue;
      for (auto in : nodes_[i].inputs)
        if (nodes_[in].requires_grad) nodes_[in].reached = true;
    }

    grad_ref(loss.id).setConstant(Scalar(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.reached || !n.requires_grad) continue;
      if (n.grad.size() == 0) continue;  // reached but nothing flowed in
      if (n.backward) n.backward(*this, i);
      if (n.parameter != nullptr) n.parameter->grad += n.grad;
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<Scalar>* parameter = nullptr;
    bool requires_grad = false;
    bool reached = false;
  };

  Var<Scalar> push(Mat value, std::vector<std::size_t> inputs, bool requires_grad, Parameter<Scalar>* p,
                   BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    n.parameter = p;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<Scalar>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace misfitlab::core
