#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "dpec/tensor.hpp"

namespace dpec {

template <typename Scalar>
class Graph;

/// Handle to a value recorded in a Graph. Cheap to copy; the value is shared.
template <typename Scalar>
class Var {
 public:
  Var() = default;

  Graph<Scalar>& graph() const { return *graph_; }
  Index id() const { return id_; }
  const Tensor<Scalar>& value() const { return *value_; }
  const std::shared_ptr<const Tensor<Scalar>>& value_ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  Index size() const { return value_->size(); }
  Index dim(Index axis) const { return value_->dim(axis); }
  bool requires_grad() const;

 private:
  friend class Graph<Scalar>;
  Var(Graph<Scalar>* g, Index id, std::shared_ptr<const Tensor<Scalar>> v)
      : graph_(g), id_(id), value_(std::move(v)) {}

  Graph<Scalar>* graph_ = nullptr;
  Index id_ = -1;
  std::shared_ptr<const Tensor<Scalar>> value_;
};

/// Recorded computation trace for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always a valid
/// topological order. Values live in the Var handles (and in whatever an op's
/// backward closure captures); the graph itself keeps shapes, adjoints and
/// closures. Nodes that do not depend on a gradient-requiring leaf record no
/// closure, which keeps inference graphs cheap.
template <typename Scalar>
class Graph {
 public:
  using T = Tensor<Scalar>;
  using Backward = std::function<void(const T& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> leaf(T value, bool requires_grad) {
    nodes_.push_back(Node{value.shape(), requires_grad, std::nullopt, nullptr});
    return Var<Scalar>(this, size() - 1, std::make_shared<const T>(std::move(value)));
  }
  Var<Scalar> constant(T value) { return leaf(std::move(value), false); }
  Var<Scalar> parameter(T value) { return leaf(std::move(value), true); }

  static bool any_requires_grad(std::span<const Var<Scalar>> inputs) {
    for (const auto& v : inputs) {
      if (v.requires_grad()) return true;
    }
    return false;
  }

  /// Records the result of an op. `backward` receives d(root)/d(result) and
  /// pushes contributions to inputs through accumulate().
  Var<Scalar> record(std::shared_ptr<const T> value, std::span<const Var<Scalar>> inputs,
                     Backward backward) {
    for (const auto& v : inputs) {
      if (v.graph_ != this) {
        throw Error(ErrorCode::ShapeMismatch, "operands recorded on different graphs");
      }
    }
    const bool rg = any_requires_grad(inputs);
    nodes_.push_back(Node{value->shape(), rg, std::nullopt, rg ? std::move(backward) : nullptr});
    return Var<Scalar>(this, size() - 1, std::move(value));
  }
  Var<Scalar> record(T value, std::span<const Var<Scalar>> inputs, Backward backward) {
    return record(std::make_shared<const T>(std::move(value)), inputs, std::move(backward));
  }
  Var<Scalar> record(std::shared_ptr<const T> value, std::initializer_list<Var<Scalar>> inputs,
                     Backward backward) {
    return record(std::move(value), std::span<const Var<Scalar>>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }
  Var<Scalar> record(T value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
    return record(std::make_shared<const T>(std::move(value)),
                  std::span<const Var<Scalar>>(inputs.begin(), inputs.size()), std::move(backward));
  }

  bool requires_grad(Index id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(const Var<Scalar>& v) const { return requires_grad(v.id()); }

  /// Adjoint buffer of a node, zero-initialised on first use.
  T& grad_buffer(Index id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.grad) node.grad.emplace(node.shape);
    return *node.grad;
  }

  void accumulate(const Var<Scalar>& v, T g) {
    if (!requires_grad(v.id())) return;
    auto& node = nodes_[static_cast<std::size_t>(v.id())];
    if (g.shape() != node.shape) {
      throw Error(ErrorCode::ShapeMismatch,
                  "adjoint " + shape_str(g.shape()) + " for node " + shape_str(node.shape));
    }
    if (!node.grad) {
      node.grad.emplace(std::move(g));
    } else {
      node.grad->array() += g.array();
    }
  }

  void backward(const Var<Scalar>& root) {
    if (root.size() != 1) {
      throw Error(ErrorCode::NonScalarRoot, "backward from " + shape_str(root.shape()));
    }
    auto& r = nodes_[static_cast<std::size_t>(root.id())];
    if (!r.grad) r.grad.emplace(r.shape);
    r.grad->array() += Scalar(1);
    for (Index i = root.id(); i >= 0; --i) {
      auto& node = nodes_[static_cast<std::size_t>(i)];
      if (!node.requires_grad || !node.grad || !node.backward) continue;
      // Closures only push into earlier nodes and never append, so the
      // reference stays valid.
      node.backward(*node.grad);
    }
  }

  /// Adjoint of a node after backward(); zeros when the node was never reached.
  T grad(const Var<Scalar>& v) const {
    const auto& node = nodes_[static_cast<std::size_t>(v.id())];
    return node.grad ? *node.grad : T(node.shape);
  }

  Index size() const { return static_cast<Index>(nodes_.size()); }

 private:
  struct Node {
    Shape shape;
    bool requires_grad;
    std::optional<T> grad;
    Backward backward;
  };

  std::vector<Node> nodes_;
};

template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return graph_ != nullptr && graph_->requires_grad(id_);
}

}  // namespace dpec
