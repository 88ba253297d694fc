#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ecgrobust/tensor.hpp"

namespace ecgrobust {

class Node;
using NodePtr = std::shared_ptr<Node>;

// One dependency of a node: the parent plus the rule mapping the node's
// incoming gradient to the parent's gradient contribution. Rules are written
// in terms of graph ops, so gradients stay differentiable when the backward
// pass runs with graph recording enabled.
struct Edge {
  NodePtr parent;
  std::function<NodePtr(const NodePtr&)> vjp;
};

// Vertex of the computation graph. Holds the forward value; after backward()
// also the accumulated gradient. Values are immutable once wrapped.
class Node {
 public:
  static NodePtr leaf(Tensor value, bool requires_grad = false);
  static NodePtr with_edges(Tensor value, std::vector<Edge> edges);

  const Tensor& value() const { return value_; }
  bool requires_grad() const { return requires_grad_; }
  std::span<const Edge> edges() const { return edges_; }

  const NodePtr& grad() const { return grad_; }
  void accumulate_grad(const NodePtr& g);
  void clear_grad() { grad_.reset(); }

 private:
  Node() = default;
  Tensor value_;
  NodePtr grad_;
  std::vector<Edge> edges_;
  bool requires_grad_ = false;
};

// Whether ops record edges as they run. Turned off inside plain backward
// passes so first-order gradients come out as constant nodes.
bool grad_mode();

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool saved_;
};

NodePtr constant(Tensor value);
NodePtr variable(Tensor value);
// Leaf sharing the same value but cut off from the graph.
NodePtr detach(const NodePtr& n);

// Accumulates d(root)/d(node) onto every reachable requires_grad node.
// With create_graph the accumulated gradients are themselves graph nodes
// that can be differentiated again.
void backward(const NodePtr& root, bool create_graph = false);

// Gradients of root w.r.t. selected inputs only; grad fields are untouched.
// Inputs that root does not depend on get zero gradients.
std::vector<NodePtr> grad(const NodePtr& root, std::span<const NodePtr> inputs,
                          bool create_graph = false);

}  // namespace ecgrobust
