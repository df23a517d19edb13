#include "drm/grad_check.hpp"

#include <cmath>

namespace drm {

namespace {

double eval_scalar(const NodeBuilder& build, const std::vector<Tensor>& params) {
  Graph g;
  std::vector<Node*> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(g.leaf(p));
  Node* root = build(g, leaves);
  if (!root->value.is_scalar()) {
    throw GraphError("grad_check: builder must return a scalar, got shape " +
                     root->value.shape_str());
  }
  const double v = root->value.item();
  if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite objective value");
  return v;
}

}  // namespace

double grad_check(const NodeBuilder& build, std::vector<Tensor> params, double eps) {
  // Analytic pass.
  Graph g;
  std::vector<Node*> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(g.leaf(p));
  Node* root = build(g, leaves);
  if (!root->value.is_scalar()) {
    throw GraphError("grad_check: builder must return a scalar, got shape " +
                     root->value.shape_str());
  }
  g.backward(root);

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor& analytic = leaves[pi]->has_grad ? leaves[pi]->grad
                                                  : Tensor::zeros(params[pi].shape());
    for (std::size_t i = 0; i < params[pi].size(); ++i) {
      const double orig = params[pi][i];
      params[pi][i] = orig + eps;
      const double fp = eval_scalar(build, params);
      params[pi][i] = orig - eps;
      const double fm = eval_scalar(build, params);
      params[pi][i] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[i];
      if (!std::isfinite(fd) || !std::isfinite(an)) {
        throw NonFiniteError("grad_check: non-finite gradient entry");
      }
      const double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(an - fd) / denom);
    }
  }
  return worst;
}

}  // namespace drm
