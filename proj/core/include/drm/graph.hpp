#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "drm/tensor.hpp"

namespace drm {

struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when an op produces NaN/Inf; non-finite values are an error state.
struct NonFiniteError : GraphError {
  using GraphError::GraphError;
};

class Graph;

// One value in a dynamic reverse-mode graph. Parents are created strictly
// before children, so creation order is a topological order.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first contribution
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<Node*> parents;
  std::function<void()> backward_fn;  // adds this node's contributions to parents
  Graph* graph = nullptr;
  std::int64_t id = -1;
  const char* op = "";

  const Shape& shape() const { return value.shape(); }
  // Zero-initialized gradient buffer, created on demand.
  Tensor& ensure_grad();
  void add_grad(const Tensor& g);
};

// Owns every node created through it. Graphs are rebuilt per optimization
// step; independent graphs may be used concurrently from different threads,
// but a single graph is not thread-safe.
class Graph {
 public:
  Node* make(Tensor value, std::vector<Node*> parents, std::function<void()> backward_fn,
             const char* op_name);
  Node* constant(Tensor value);
  // Differentiation root inputs (parameters, probed features).
  Node* leaf(Tensor value);

  // Reverse pass from a scalar root; seeds d(root)/d(root) = seed. Repeated
  // calls accumulate into existing gradients; zero_grad() resets them.
  void backward(Node* root, double seed = 1.0);
  void zero_grad();

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;  // deque: stable addresses under growth
};

// ---------------------------------------------------------------------------
// Ops. All throw GraphError with both shapes named on mismatch, and
// NonFiniteError if the result contains NaN/Inf.
// ---------------------------------------------------------------------------

// Elementwise with scalar broadcast: operands must have equal shapes, or one
// of them must be a scalar (shape []).
Node* add(Node* a, Node* b);
Node* sub(Node* a, Node* b);
Node* mul(Node* a, Node* b);
Node* div(Node* a, Node* b);

// [R,C] plus per-column vector [C] (bias addition).
Node* add_rows(Node* m, Node* v);

Node* scale(Node* a, double c);       // a * c
Node* add_const(Node* a, double c);   // a + c
inline Node* neg(Node* a) { return scale(a, -1.0); }

Node* matmul(Node* a, Node* b);       // [m,k] x [k,n]
Node* transpose(Node* a);             // 2-D

Node* relu(Node* a);
Node* tanh(Node* a);
Node* sigmoid(Node* a);
Node* exp(Node* a);
Node* log(Node* a);
Node* abs(Node* a);
Node* sign(Node* a);                  // zero gradient everywhere
Node* pow_abs(Node* a, double gamma); // |a|^gamma
Node* clamp(Node* a, double lo, double hi);  // gradient zero where clipped

Node* sum(Node* a);                   // -> scalar
Node* mean(Node* a);                  // -> scalar
Node* dot(Node* a, Node* b);          // 1-D vectors -> scalar

// Normalize along the last axis to unit L2 norm; zero-norm rows are an error.
Node* l2_normalize(Node* a);

Node* reshape(Node* a, Shape shape);
Node* concat(const std::vector<Node*>& parts, int axis);
Node* stack(const std::vector<Node*>& parts);  // n same-shape -> [n, ...]
Node* index_scalar(Node* a, std::size_t flat_index);

// Fused stable softmax + cross-entropy, mean-reduced over the batch.
// logits [B,K], labels in [0,K).
Node* softmax_cross_entropy(Node* logits, const std::vector<int>& labels);

// x [B,C,H,W], w [F,C,kh,kw], optional bias [F]. Lowered to matmul via im2col.
Node* conv2d(Node* x, Node* w, Node* bias, int stride, int pad);
Node* maxpool2d(Node* x, int k, int stride);

// Shared validation helper for op implementations.
void check_finite(const Tensor& t, const char* op_name);

}  // namespace drm
