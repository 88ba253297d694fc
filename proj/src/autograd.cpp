#include "ecgrobust/autograd.hpp"

#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "ecgrobust/errors.hpp"
#include "ecgrobust/ops.hpp"

namespace ecgrobust {

namespace {
thread_local bool g_grad_mode = true;
}  // namespace

bool grad_mode() { return g_grad_mode; }

GradModeGuard::GradModeGuard(bool enabled) : saved_(g_grad_mode) { g_grad_mode = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_mode = saved_; }

NodePtr Node::leaf(Tensor value, bool requires_grad) {
  NodePtr n(new Node());
  n->value_ = std::move(value);
  n->requires_grad_ = requires_grad;
  return n;
}

NodePtr Node::with_edges(Tensor value, std::vector<Edge> edges) {
  NodePtr n(new Node());
  n->value_ = std::move(value);
  n->edges_ = std::move(edges);
  n->requires_grad_ = !n->edges_.empty();
  return n;
}

void Node::accumulate_grad(const NodePtr& g) {
  grad_ = grad_ ? add(grad_, g) : g;
}

NodePtr constant(Tensor value) { return Node::leaf(std::move(value), false); }
NodePtr variable(Tensor value) { return Node::leaf(std::move(value), true); }

NodePtr detach(const NodePtr& n) { return Node::leaf(n->value(), false); }

namespace {

// Post-order from root along recorded edges; every node lands after all of
// its parents, so the reversed vector is a valid backprop order.
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->edges().size()) {
      Node* parent = node->edges()[next].parent.get();
      ++next;
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

std::unordered_map<Node*, NodePtr> run_backward(const NodePtr& root, bool create_graph) {
  if (root->value().numel() != 1) {
    throw ParameterError("backward: root must be a scalar, shape is " +
                         shape_string(root->value().shape()));
  }
  std::unordered_map<Node*, NodePtr> grads;
  if (!root->requires_grad()) return grads;

  std::vector<Node*> order = topo_order(root.get());
  GradModeGuard guard(create_graph);
  grads[root.get()] = Node::leaf(Tensor::full(root->value().shape(), 1.0), false);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto git = grads.find(node);
    if (git == grads.end()) continue;
    NodePtr g = git->second;
    for (const Edge& e : node->edges()) {
      NodePtr contribution = e.vjp(g);
      auto [pit, fresh] = grads.try_emplace(e.parent.get(), contribution);
      if (!fresh) pit->second = add(pit->second, contribution);
    }
  }
  return grads;
}

}  // namespace

void backward(const NodePtr& root, bool create_graph) {
  auto grads = run_backward(root, create_graph);
  GradModeGuard guard(create_graph);
  for (auto& [node, g] : grads) node->accumulate_grad(g);
}

std::vector<NodePtr> grad(const NodePtr& root, std::span<const NodePtr> inputs,
                          bool create_graph) {
  for (const NodePtr& in : inputs) {
    if (!in->requires_grad()) {
      throw ParameterError("grad: requested input does not require gradients");
    }
  }
  auto grads = run_backward(root, create_graph);
  std::vector<NodePtr> out;
  out.reserve(inputs.size());
  for (const NodePtr& in : inputs) {
    auto it = grads.find(in.get());
    if (it != grads.end()) {
      out.push_back(it->second);
    } else {
      out.push_back(constant(Tensor(in->value().shape())));
    }
  }
  return out;
}

}  // namespace ecgrobust
