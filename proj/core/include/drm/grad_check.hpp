#pragma once

#include <functional>
#include <vector>

#include "drm/graph.hpp"
#include "drm/tensor.hpp"

namespace drm {

// Builds a scalar root from leaf nodes (one per parameter tensor, in order).
using NodeBuilder = std::function<Node*(Graph&, const std::vector<Node*>&)>;

// Compares the analytic gradient of `build` against central finite
// differences with step `eps`. Returns the maximum over all parameter entries
// of |analytic - fd| / max(|analytic|, |fd|, 1e-8). The builder must be
// deterministic given the parameter values.
double grad_check(const NodeBuilder& build, std::vector<Tensor> params, double eps);

}  // namespace drm
