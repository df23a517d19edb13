#include "drm/graph.hpp"

#include <algorithm>
#include <unordered_set>

namespace drm {

Tensor& Node::ensure_grad() {
  if (!has_grad) {
    grad = Tensor::zeros(value.shape());
    has_grad = true;
  }
  return grad;
}

void Node::add_grad(const Tensor& g) {
  if (!g.same_shape(value)) {
    throw GraphError(std::string("gradient shape ") + g.shape_str() + " does not match value shape " +
                     value.shape_str() + " in op " + op);
  }
  Tensor& dst = ensure_grad();
  const double* src = g.data();
  double* d = dst.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += src[i];
}

void check_finite(const Tensor& t, const char* op_name) {
  if (!t.all_finite()) {
    throw NonFiniteError(std::string("non-finite value produced by op '") + op_name + "'");
  }
}

Node* Graph::make(Tensor value, std::vector<Node*> parents, std::function<void()> backward_fn,
                  const char* op_name) {
  check_finite(value, op_name);
  bool needs = false;
  for (Node* p : parents) {
    if (p->requires_grad) {
      needs = true;
      break;
    }
  }
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.backward_fn = needs ? std::move(backward_fn) : std::function<void()>();
  n.requires_grad = needs;
  n.graph = this;
  n.id = static_cast<std::int64_t>(nodes_.size()) - 1;
  n.op = op_name;
  return &n;
}

Node* Graph::constant(Tensor value) { return make(std::move(value), {}, {}, "constant"); }

Node* Graph::leaf(Tensor value) {
  Node* n = make(std::move(value), {}, {}, "leaf");
  n->requires_grad = true;
  return n;
}

void Graph::backward(Node* root, double seed) {
  if (root == nullptr || root->graph != this) {
    throw GraphError("backward: root does not belong to this graph");
  }
  if (!root->value.is_scalar()) {
    throw GraphError("backward: root must be a scalar (shape []), got shape " +
                     root->value.shape_str());
  }
  root->add_grad(Tensor::scalar(seed));
  if (!root->requires_grad) return;

  // Reachable subgraph, visited in reverse creation order (a topological
  // order, since parents always precede children).
  std::vector<Node*> reachable;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    reachable.push_back(n);
    for (Node* p : n->parents) {
      if (p->requires_grad && seen.insert(p).second) stack.push_back(p);
    }
  }
  std::sort(reachable.begin(), reachable.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });
  for (Node* n : reachable) {
    if (n->backward_fn && n->has_grad) n->backward_fn();
  }
}

void Graph::zero_grad() {
  for (Node& n : nodes_) {
    n.grad = Tensor();
    n.has_grad = false;
  }
}

}  // namespace drm
