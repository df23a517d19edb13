#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "drm/graph.hpp"

namespace drm {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

Graph& graph_of(Node* a) { return *a->graph; }

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw GraphError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

enum class Bcast { Same, ScalarLeft, ScalarRight };

Bcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return Bcast::Same;
  if (a.is_scalar()) return Bcast::ScalarLeft;
  if (b.is_scalar()) return Bcast::ScalarRight;
  shape_error(op, a, b);
}

// Reduce an elementwise gradient back onto a scalar operand.
Tensor reduce_to_scalar(const Tensor& g) {
  double s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += g[i];
  return Tensor::scalar(s);
}

template <class FwdFn, class LhsGrad, class RhsGrad>
Node* binary_elementwise(const char* name, Node* a, Node* b, FwdFn fwd, LhsGrad dl, RhsGrad dr) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  const Bcast kind = broadcast_kind(name, av, bv);
  const Tensor& big = (kind == Bcast::ScalarLeft) ? bv : av;
  Tensor out(big.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = (kind == Bcast::ScalarLeft) ? av[0] : av[i];
    const double y = (kind == Bcast::ScalarRight) ? bv[0] : bv[i];
    out[i] = fwd(x, y);
  }
  Node* r = graph_of(a).make(std::move(out), {a, b}, {}, name);
  r->backward_fn = [=]() {
    const Tensor& g = r->grad;
    const Tensor& avv = a->value;
    const Tensor& bvv = b->value;
    if (a->requires_grad) {
      Tensor ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = (kind == Bcast::ScalarLeft) ? avv[0] : avv[i];
        const double y = (kind == Bcast::ScalarRight) ? bvv[0] : bvv[i];
        ga[i] = g[i] * dl(x, y);
      }
      if (kind == Bcast::ScalarLeft) {
        a->add_grad(reduce_to_scalar(ga));
      } else {
        a->add_grad(ga);
      }
    }
    if (b->requires_grad) {
      Tensor gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = (kind == Bcast::ScalarLeft) ? avv[0] : avv[i];
        const double y = (kind == Bcast::ScalarRight) ? bvv[0] : bvv[i];
        gb[i] = g[i] * dr(x, y);
      }
      if (kind == Bcast::ScalarRight) {
        b->add_grad(reduce_to_scalar(gb));
      } else {
        b->add_grad(gb);
      }
    }
  };
  return r;
}

template <class FwdFn, class GradFn>
Node* unary_elementwise(const char* name, Node* a, FwdFn fwd, GradFn dfdx) {
  const Tensor& av = a->value;
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Node* r = graph_of(a).make(std::move(out), {a}, {}, name);
  r->backward_fn = [=]() {
    if (!a->requires_grad) return;
    const Tensor& g = r->grad;
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] * dfdx(a->value[i], r->value[i]);
    }
    a->add_grad(ga);
  };
  return r;
}

}  // namespace

Node* add(Node* a, Node* b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Node* sub(Node* a, Node* b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Node* mul(Node* a, Node* b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Node* div(Node* a, Node* b) {
  return binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Node* add_rows(Node* m, Node* v) {
  const Tensor& mv = m->value;
  const Tensor& vv = v->value;
  if (mv.rank() != 2 || vv.rank() != 1 || mv.dim(1) != vv.dim(0)) {
    shape_error("add_rows", mv, vv);
  }
  const std::int64_t rows = mv.dim(0), cols = mv.dim(1);
  Tensor out(mv.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) out.at(r, c) = mv.at(r, c) + vv[static_cast<std::size_t>(c)];
  }
  Node* r = graph_of(m).make(std::move(out), {m, v}, {}, "add_rows");
  r->backward_fn = [=]() {
    const Tensor& g = r->grad;
    if (m->requires_grad) m->add_grad(g);
    if (v->requires_grad) {
      Tensor gv(vv.shape());
      for (std::int64_t rr = 0; rr < rows; ++rr) {
        for (std::int64_t c = 0; c < cols; ++c) gv[static_cast<std::size_t>(c)] += g.at(rr, c);
      }
      v->add_grad(gv);
    }
  };
  return r;
}

Node* scale(Node* a, double c) {
  return unary_elementwise(
      "scale", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Node* add_const(Node* a, double c) {
  return unary_elementwise(
      "add_const", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Node* matmul(Node* a, Node* b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    shape_error("matmul", av, bv);
  }
  const std::int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  {
    CMap A(av.data(), m, k), B(bv.data(), k, n);
    MMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  Node* r = graph_of(a).make(std::move(out), {a, b}, {}, "matmul");
  r->backward_fn = [=]() {
    CMap G(r->grad.data(), m, n);
    if (a->requires_grad) {
      Tensor ga({m, k});
      CMap B(b->value.data(), k, n);
      MMap GA(ga.data(), m, k);
      GA.noalias() = G * B.transpose();
      a->add_grad(ga);
    }
    if (b->requires_grad) {
      Tensor gb({k, n});
      CMap A(a->value.data(), m, k);
      MMap GB(gb.data(), k, n);
      GB.noalias() = A.transpose() * G;
      b->add_grad(gb);
    }
  };
  return r;
}

Node* transpose(Node* a) {
  const Tensor& av = a->value;
  if (av.rank() != 2) {
    throw GraphError("transpose: expected rank-2 tensor, got shape " + av.shape_str());
  }
  const std::int64_t m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  }
  Node* r = graph_of(a).make(std::move(out), {a}, {}, "transpose");
  r->backward_fn = [=]() {
    if (!a->requires_grad) return;
    Tensor ga({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) ga.at(i, j) = r->grad.at(j, i);
    }
    a->add_grad(ga);
  };
  return r;
}

Node* relu(Node* a) {
  return unary_elementwise(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Node* tanh(Node* a) {
  return unary_elementwise(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Node* sigmoid(Node* a) {
  return unary_elementwise(
      "sigmoid", a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Node* exp(Node* a) {
  return unary_elementwise(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Node* log(Node* a) {
  return unary_elementwise(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Node* abs(Node* a) {
  return unary_elementwise(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Node* sign(Node* a) {
  // Subgradient 0 everywhere, including at the discontinuity.
  return unary_elementwise(
      "sign", a, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); },
      [](double, double) { return 0.0; });
}

Node* pow_abs(Node* a, double gamma) {
  return unary_elementwise(
      "pow_abs", a, [gamma](double x) { return std::pow(std::abs(x), gamma); },
      [gamma](double x, double) {
        if (x == 0.0) return 0.0;
        const double s = x > 0.0 ? 1.0 : -1.0;
        return gamma * std::pow(std::abs(x), gamma - 1.0) * s;
      });
}

Node* clamp(Node* a, double lo, double hi) {
  return unary_elementwise(
      "clamp", a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Node* sum(Node* a) {
  const Tensor& av = a->value;
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  Node* r = graph_of(a).make(Tensor::scalar(s), {a}, {}, "sum");
  r->backward_fn = [=]() {
    if (!a->requires_grad) return;
    a->add_grad(Tensor::full(a->value.shape(), r->grad[0]));
  };
  return r;
}

Node* mean(Node* a) {
  const Tensor& av = a->value;
  if (av.size() == 0) throw GraphError("mean: empty tensor");
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  Node* r = graph_of(a).make(Tensor::scalar(s / n), {a}, {}, "mean");
  r->backward_fn = [=]() {
    if (!a->requires_grad) return;
    a->add_grad(Tensor::full(a->value.shape(), r->grad[0] / n));
  };
  return r;
}

Node* dot(Node* a, Node* b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.rank() != 1 || bv.rank() != 1 || av.dim(0) != bv.dim(0)) {
    shape_error("dot", av, bv);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  Node* r = graph_of(a).make(Tensor::scalar(s), {a, b}, {}, "dot");
  r->backward_fn = [=]() {
    const double g = r->grad[0];
    if (a->requires_grad) {
      Tensor ga(a->value.shape());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g * b->value[i];
      a->add_grad(ga);
    }
    if (b->requires_grad) {
      Tensor gb(b->value.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g * a->value[i];
      b->add_grad(gb);
    }
  };
  return r;
}

Node* l2_normalize(Node* a) {
  const Tensor& av = a->value;
  if (av.rank() < 1) {
    throw GraphError("l2_normalize: expected rank >= 1, got shape " + av.shape_str());
  }
  const std::int64_t d = av.dim(av.rank() - 1);
  const std::int64_t rows = static_cast<std::int64_t>(av.size()) / d;
  Tensor out(av.shape());
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double s = 0.0;
    for (std::int64_t i = 0; i < d; ++i) s += x[i] * x[i];
    const double nrm = std::sqrt(s);
    if (nrm < 1e-12) {
      throw GraphError("l2_normalize: zero-norm row " + std::to_string(r));
    }
    norms[static_cast<std::size_t>(r)] = nrm;
    double* y = out.data() + r * d;
    for (std::int64_t i = 0; i < d; ++i) y[i] = x[i] / nrm;
  }
  Node* res = graph_of(a).make(std::move(out), {a}, {}, "l2_normalize");
  res->backward_fn = [=]() {
    if (!a->requires_grad) return;
    Tensor ga(a->value.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* x = a->value.data() + r * d;
      const double* g = res->grad.data() + r * d;
      const double nrm = norms[static_cast<std::size_t>(r)];
      double xg = 0.0;
      for (std::int64_t i = 0; i < d; ++i) xg += x[i] * g[i];
      const double inv = 1.0 / nrm;
      const double inv3 = inv * inv * inv;
      double* o = ga.data() + r * d;
      for (std::int64_t i = 0; i < d; ++i) o[i] = g[i] * inv - x[i] * xg * inv3;
    }
    a->add_grad(ga);
  };
  return res;
}

Node* reshape(Node* a, Shape shape) {
  if (shape_numel(shape) != a->value.size()) {
    throw GraphError("reshape: cannot view " + a->value.shape_str() + " as " + drm::shape_str(shape));
  }
  Tensor out(shape, a->value.vec());
  Node* r = graph_of(a).make(std::move(out), {a}, {}, "reshape");
  r->backward_fn = [=]() {
    if (!a->requires_grad) return;
    a->add_grad(Tensor(a->value.shape(), r->grad.vec()));
  };
  return r;
}

Node* concat(const std::vector<Node*>& parts, int axis) {
  if (parts.empty()) throw GraphError("concat: empty input list");
  const int rank = parts[0]->value.rank();
  if (axis < 0 || axis >= std::max(rank, 1)) {
    throw GraphError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                     parts[0]->value.shape_str());
  }
  Shape out_shape = parts[0]->value.shape();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    Shape s = parts[i]->value.shape();
    if (static_cast<int>(s.size()) != rank) shape_error("concat", parts[0]->value, parts[i]->value);
    for (int dmn = 0; dmn < rank; ++dmn) {
      if (dmn != axis && s[static_cast<std::size_t>(dmn)] != out_shape[static_cast<std::size_t>(dmn)]) {
        shape_error("concat", parts[0]->value, parts[i]->value);
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  // Row-major layout: treat as [outer, axis_dim, inner] blocks.
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  Tensor out(out_shape);
  std::vector<std::int64_t> axis_dims;
  axis_dims.reserve(parts.size());
  for (Node* p : parts) axis_dims.push_back(p->value.dim(axis));
  const std::int64_t total_axis = out_shape[static_cast<std::size_t>(axis)];
  {
    std::int64_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const Tensor& v = parts[pi]->value;
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = v.data() + o * axis_dims[pi] * inner;
        double* dst = out.data() + (o * total_axis + offset) * inner;
        std::memcpy(dst, src, static_cast<std::size_t>(axis_dims[pi] * inner) * sizeof(double));
      }
      offset += axis_dims[pi];
    }
  }
  std::vector<Node*> parent_list = parts;
  Node* r = graph_of(parts[0]).make(std::move(out), parent_list, {}, "concat");
  r->backward_fn = [=]() {
    std::int64_t offset = 0;
    for (std::size_t pi = 0; pi < parent_list.size(); ++pi) {
      Node* p = parent_list[pi];
      const std::int64_t ad = axis_dims[pi];
      if (p->requires_grad) {
        Tensor gp(p->value.shape());
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* src = r->grad.data() + (o * total_axis + offset) * inner;
          double* dst = gp.data() + o * ad * inner;
          std::memcpy(dst, src, static_cast<std::size_t>(ad * inner) * sizeof(double));
        }
        p->add_grad(gp);
      }
      offset += ad;
    }
  };
  return r;
}

Node* stack(const std::vector<Node*>& parts) {
  if (parts.empty()) throw GraphError("stack: empty input list");
  const Shape& s0 = parts[0]->value.shape();
  for (Node* p : parts) {
    if (p->value.shape() != s0) shape_error("stack", parts[0]->value, p->value);
  }
  Shape out_shape;
  out_shape.push_back(static_cast<std::int64_t>(parts.size()));
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  const std::size_t block = parts[0]->value.size();
  Tensor out(out_shape);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    std::memcpy(out.data() + i * block, parts[i]->value.data(), block * sizeof(double));
  }
  std::vector<Node*> parent_list = parts;
  Node* r = graph_of(parts[0]).make(std::move(out), parent_list, {}, "stack");
  r->backward_fn = [=]() {
    for (std::size_t i = 0; i < parent_list.size(); ++i) {
      Node* p = parent_list[i];
      if (!p->requires_grad) continue;
      Tensor gp(p->value.shape());
      std::memcpy(gp.data(), r->grad.data() + i * block, block * sizeof(double));
      p->add_grad(gp);
    }
  };
  return r;
}

Node* index_scalar(Node* a, std::size_t flat_index) {
  if (flat_index >= a->value.size()) {
    throw GraphError("index_scalar: index " + std::to_string(flat_index) + " out of range for shape " +
                     a->value.shape_str());
  }
  Node* r = graph_of(a).make(Tensor::scalar(a->value[flat_index]), {a}, {}, "index_scalar");
  r->backward_fn = [=]() {
    if (!a->requires_grad) return;
    Tensor ga(a->value.shape());
    ga[flat_index] = r->grad[0];
    a->add_grad(ga);
  };
  return r;
}

Node* softmax_cross_entropy(Node* logits, const std::vector<int>& labels) {
  const Tensor& lv = logits->value;
  if (lv.rank() != 2) {
    throw GraphError("softmax_cross_entropy: logits must be [B,K], got " + lv.shape_str());
  }
  const std::int64_t B = lv.dim(0), K = lv.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw GraphError("softmax_cross_entropy: batch " + std::to_string(B) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  auto probs = std::make_shared<Tensor>(Shape{B, K});
  double loss = 0.0;
  for (std::int64_t r = 0; r < B; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= K) {
      throw GraphError("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(K) + ")");
    }
    const double* row = lv.data() + r * K;
    double mx = row[0];
    for (std::int64_t c = 1; c < K; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < K; ++c) z += std::exp(row[c] - mx);
    const double log_z = std::log(z) + mx;
    for (std::int64_t c = 0; c < K; ++c) probs->at(r, c) = std::exp(row[c] - log_z);
    loss += log_z - row[y];
  }
  loss /= static_cast<double>(B);
  Node* r = logits->graph->make(Tensor::scalar(loss), {logits}, {}, "softmax_cross_entropy");
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  r->backward_fn = [=]() {
    if (!logits->requires_grad) return;
    const double g = r->grad[0] / static_cast<double>(B);
    Tensor gl({B, K});
    for (std::int64_t rr = 0; rr < B; ++rr) {
      const int y = (*labels_copy)[static_cast<std::size_t>(rr)];
      for (std::int64_t c = 0; c < K; ++c) {
        gl.at(rr, c) = g * (probs->at(rr, c) - (c == y ? 1.0 : 0.0));
      }
    }
    logits->add_grad(gl);
  };
  return r;
}

}  // namespace drm
