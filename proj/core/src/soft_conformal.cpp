#include "drm/soft_conformal.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace drm {

namespace {

double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

const std::vector<int>* label_ptr(const std::optional<std::vector<int>>& labels) {
  return labels.has_value() ? &*labels : nullptr;
}

}  // namespace

void SoftConfig::validate() const {
  if (!(sigma_min > 0.0)) throw std::invalid_argument("sigma_min must be positive");
  if (!(sigma_rank > 0.0)) throw std::invalid_argument("sigma_rank must be positive");
  if (!(gamma >= 1.0)) throw std::invalid_argument("gamma must be >= 1");
}

Node* pairwise_sharpened_cosine(Node* features, double gamma) {
  if (features->value.rank() != 2) {
    throw GraphError("pairwise distance: expected [T, n_d] features, got " +
                     features->value.shape_str());
  }
  Node* unit = l2_normalize(features);
  Node* gram = matmul(unit, transpose(unit));
  if (gamma == 1.0) {
    return add_const(neg(gram), 1.0);  // 1 - cos
  }
  Node* inner = mul(sign(gram), pow_abs(gram, gamma));
  return add_const(neg(inner), 1.0);
}

// ---------------------------------------------------------------------------
// prefix_soft_scores
//
// For every prefix length t and point i <= t the softmax-weighted average of
// the eligible distances (j <= t, j != i, same label in concept mode):
//
//   a_i(t) = c + sum_j (d_ij - c) w_ij / sum_j w_ij,  w_ij = exp(-(d_ij-c)/s)
//
// where c is the running eligible minimum of row i. The offset form keeps
// every weight in (0,1] regardless of how small sigma is, and makes the
// all-equal case exact. Running sums are rescaled whenever a new minimum
// arrives, which reproduces the full per-prefix recomputation exactly.
// ---------------------------------------------------------------------------
Node* prefix_soft_scores(Node* dist, const std::optional<std::vector<int>>& labels,
                         double sigma_min) {
  const Tensor& D = dist->value;
  if (D.rank() != 2 || D.dim(0) != D.dim(1)) {
    throw GraphError("prefix_soft_scores: expected square distance matrix, got " + D.shape_str());
  }
  if (!(sigma_min > 0.0)) throw std::invalid_argument("sigma_min must be positive");
  const std::int64_t T = D.dim(0);
  const auto* y = label_ptr(labels);
  if (y && static_cast<std::int64_t>(y->size()) != T) {
    throw GraphError("prefix_soft_scores: " + std::to_string(y->size()) + " labels for " +
                     std::to_string(T) + " points");
  }

  auto run_min = std::make_shared<Tensor>(Shape{T, T});   // running eligible min per (i, prefix)
  auto run_den = std::make_shared<Tensor>(Shape{T, T});   // scaled denominator; 0 marks undefined
  Tensor A({T, T});
  const double inf = std::numeric_limits<double>::infinity();

  for (std::int64_t i = 0; i < T; ++i) {
    double c = inf, W = 0.0, Nrel = 0.0;  // Nrel = sum (d - c) w at scale c
    const double* drow = D.data() + i * T;
    double* arow = A.data() + i * T;
    double* crow = run_min->data() + i * T;
    double* wrow = run_den->data() + i * T;
    for (std::int64_t k = 0; k < T; ++k) {
      if (k != i && (!y || (*y)[static_cast<std::size_t>(k)] == (*y)[static_cast<std::size_t>(i)])) {
        const double d = drow[k];
        if (W == 0.0) {
          c = d;
          W = 1.0;
          Nrel = 0.0;
        } else if (d < c) {
          const double f = std::exp((d - c) / sigma_min);
          Nrel = f * (Nrel + (c - d) * W);
          W = f * W + 1.0;
          c = d;
        } else {
          const double w = std::exp(-(d - c) / sigma_min);
          W += w;
          Nrel += (d - c) * w;
        }
      }
      if (i <= k && W > 0.0) {
        arow[k] = c + Nrel / W;
        crow[k] = c;
        wrow[k] = W;
      } else {
        arow[k] = 0.0;
        crow[k] = inf;
        wrow[k] = 0.0;
      }
    }
  }

  auto labels_copy = std::make_shared<std::optional<std::vector<int>>>(labels);
  Node* node = dist->graph->make(std::move(A), {dist}, {}, "prefix_soft_scores");
  node->backward_fn = [=]() {
    if (!dist->requires_grad) return;
    const Tensor& gA = node->grad;
    const Tensor& Dv = dist->value;
    const auto* yb = label_ptr(*labels_copy);
    Tensor gD({T, T});
    for (std::int64_t i = 0; i < T; ++i) {
      const double* drow = Dv.data() + i * T;
      const double* arow = node->value.data() + i * T;
      const double* crow = run_min->data() + i * T;
      const double* wrow = run_den->data() + i * T;
      const double* grow = gA.data() + i * T;
      double* out = gD.data() + i * T;
      // Suffix sums over prefixes k' >= k of g * dA/dterm, kept at the scale
      // of the current prefix minimum so nothing overflows.
      double SU = 0.0, SV = 0.0, ref = 0.0;
      bool have_ref = false;
      for (std::int64_t k = T - 1; k >= i; --k) {
        if (wrow[k] > 0.0) {
          if (!have_ref) {
            ref = crow[k];
            have_ref = true;
          } else if (crow[k] != ref) {
            const double f = std::exp((ref - crow[k]) / sigma_min);
            SU *= f;
            SV *= f;
            ref = crow[k];
          }
          const double g = grow[k];
          if (g != 0.0) {
            SU += g * (1.0 + arow[k] / sigma_min) / wrow[k];
            SV += g / wrow[k];
          }
        }
        if (k > i && have_ref &&
            (!yb || (*yb)[static_cast<std::size_t>(k)] == (*yb)[static_cast<std::size_t>(i)])) {
          const double d = drow[k];
          const double w = std::exp(-(d - ref) / sigma_min);
          out[k] += w * (SU - (d / sigma_min) * SV);
        }
      }
      if (have_ref) {
        for (std::int64_t j = 0; j < i; ++j) {
          if (yb && (*yb)[static_cast<std::size_t>(j)] != (*yb)[static_cast<std::size_t>(i)]) continue;
          const double d = drow[j];
          const double w = std::exp(-(d - ref) / sigma_min);
          out[j] += w * (SU - (d / sigma_min) * SV);
        }
      }
    }
    dist->add_grad(gD);
  };
  return node;
}

// ---------------------------------------------------------------------------
// prefix_soft_pvalues
//
//   p_t = (1/n_t) sum_{eligible i <= t} sigmoid((a_t(t) - a_i(t)) / s)
//
// The self term is sigmoid(0) = 0.5, the expectation of the hard detector's
// tie-breaking draw. A point whose eligible set is just itself (prefix 1, or
// first of its class) gets exactly 0.5 with no gradient.
// ---------------------------------------------------------------------------
Node* prefix_soft_pvalues(Node* scores, const std::optional<std::vector<int>>& labels,
                          double sigma_rank) {
  const Tensor& A = scores->value;
  if (A.rank() != 2 || A.dim(0) != A.dim(1)) {
    throw GraphError("prefix_soft_pvalues: expected square score matrix, got " + A.shape_str());
  }
  if (!(sigma_rank > 0.0)) throw std::invalid_argument("sigma_rank must be positive");
  const std::int64_t T = A.dim(0);
  const auto* y = label_ptr(labels);
  if (y && static_cast<std::int64_t>(y->size()) != T) {
    throw GraphError("prefix_soft_pvalues: " + std::to_string(y->size()) + " labels for " +
                     std::to_string(T) + " points");
  }

  Tensor p({T});
  if (T > 0) p[0] = 0.5;
  for (std::int64_t k = 1; k < T; ++k) {
    std::int64_t n = 0;
    for (std::int64_t i = 0; i <= k; ++i) {
      if (!y || (*y)[static_cast<std::size_t>(i)] == (*y)[static_cast<std::size_t>(k)]) ++n;
    }
    if (n <= 1) {
      p[static_cast<std::size_t>(k)] = 0.5;
      continue;
    }
    const double akk = A.at(k, k);
    double s = 0.0;
    for (std::int64_t i = 0; i <= k; ++i) {
      if (y && (*y)[static_cast<std::size_t>(i)] != (*y)[static_cast<std::size_t>(k)]) continue;
      s += stable_sigmoid((akk - A.at(i, k)) / sigma_rank);
    }
    p[static_cast<std::size_t>(k)] = s / static_cast<double>(n);
  }

  auto labels_copy = std::make_shared<std::optional<std::vector<int>>>(labels);
  Node* node = scores->graph->make(std::move(p), {scores}, {}, "prefix_soft_pvalues");
  node->backward_fn = [=]() {
    if (!scores->requires_grad) return;
    const Tensor& gp = node->grad;
    const Tensor& Av = scores->value;
    const auto* yb = label_ptr(*labels_copy);
    Tensor gA({T, T});
    for (std::int64_t k = 1; k < T; ++k) {
      const double g = gp[static_cast<std::size_t>(k)];
      if (g == 0.0) continue;
      std::int64_t n = 0;
      for (std::int64_t i = 0; i <= k; ++i) {
        if (!yb || (*yb)[static_cast<std::size_t>(i)] == (*yb)[static_cast<std::size_t>(k)]) ++n;
      }
      if (n <= 1) continue;
      const double akk = Av.at(k, k);
      const double coef = g / (sigma_rank * static_cast<double>(n));
      for (std::int64_t i = 0; i < k; ++i) {
        if (yb && (*yb)[static_cast<std::size_t>(i)] != (*yb)[static_cast<std::size_t>(k)]) continue;
        const double s = stable_sigmoid((akk - Av.at(i, k)) / sigma_rank);
        const double d = coef * s * (1.0 - s);
        gA.at(i, k) -= d;
        gA.at(k, k) += d;
      }
    }
    scores->add_grad(gA);
  };
  return node;
}

SoftMartingaleResult soft_betting_martingale(Node* pvalues) {
  if (pvalues->value.rank() != 1) {
    throw GraphError("soft_betting_martingale: expected rank-1 p-value vector, got " +
                     pvalues->value.shape_str());
  }
  Graph& g = *pvalues->graph;
  const std::int64_t T = pvalues->value.dim(0);
  const auto& e = BettorState::kSlopes;
  Node* slopes = g.constant(Tensor({5}, {e[0], e[1], e[2], e[3], e[4]}));
  Node* five = g.constant(Tensor::scalar(5.0));
  Node* per_slope = g.constant(Tensor::full({5}, 1.0 / 5.0));
  Node* capital = g.constant(Tensor::scalar(1.0));

  SoftMartingaleResult res;
  res.soft_values.reserve(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) {
    Node* avg = div(capital, five);
    Node* delta = sub(avg, per_slope);
    per_slope = add(per_slope, scale(delta, BettorState::kMixRate));
    Node* pt = index_scalar(pvalues, static_cast<std::size_t>(t));
    Node* factor = add_const(mul(slopes, add_const(pt, -0.5)), 1.0);
    per_slope = mul(per_slope, factor);
    capital = sum(per_slope);
    res.soft_values.push_back(clamp(capital, 1e-12, 1e12));
  }
  res.mean_penalty = mean(stack(res.soft_values));
  return res;
}

SoftMartingaleResult soft_martingale_matrix(Node* features,
                                            const std::optional<std::vector<int>>& labels,
                                            const SoftConfig& cfg) {
  cfg.validate();
  if (features->value.rank() != 2) {
    throw GraphError("soft_martingale: expected [T, n_d] features, got " +
                     features->value.shape_str());
  }
  const std::int64_t T = features->value.dim(0);
  if (T < 2) throw std::invalid_argument("soft_martingale: sequence length must be >= 2");
  const bool concept_mode = cfg.mode == DetectMode::Concept;
  if (concept_mode && !labels.has_value()) {
    throw std::invalid_argument("soft_martingale: concept mode requires labels");
  }
  const auto& masked = concept_mode ? labels : std::optional<std::vector<int>>();
  Node* dist = pairwise_sharpened_cosine(features, cfg.gamma);
  Node* scores = prefix_soft_scores(dist, masked, cfg.sigma_min);
  Node* pvals = prefix_soft_pvalues(scores, masked, cfg.sigma_rank);
  return soft_betting_martingale(pvals);
}

SoftMartingaleResult soft_martingale(const std::vector<Node*>& features,
                                     const std::optional<std::vector<int>>& labels,
                                     const SoftConfig& cfg) {
  if (features.size() < 2) {
    throw std::invalid_argument("soft_martingale: sequence length must be >= 2");
  }
  return soft_martingale_matrix(stack(features), labels, cfg);
}

Node* soft_min(const std::vector<Node*>& distances, double sigma_min) {
  if (distances.empty()) throw std::invalid_argument("soft_min: empty input list");
  if (!(sigma_min > 0.0)) throw std::invalid_argument("sigma_min must be positive");
  for (Node* d : distances) {
    if (!d->value.is_scalar()) {
      throw GraphError("soft_min: expected scalar inputs, got shape " + d->value.shape_str());
    }
  }
  Node* v = stack(distances);
  // Offset by the current minimum. The shift cancels exactly in the weighted
  // average, so treating it as a constant changes neither value nor gradient,
  // while keeping every exponent in [-inf, 0].
  double c = v->value[0];
  for (std::size_t i = 1; i < v->value.size(); ++i) c = std::min(c, v->value[i]);
  Node* shifted = add_const(v, -c);
  Node* w = drm::exp(scale(shifted, -1.0 / sigma_min));
  return add_const(div(dot(shifted, w), sum(w)), c);
}

std::vector<Node*> soft_conformity_scores(const std::vector<Node*>& features,
                                          const std::optional<std::vector<int>>& labels,
                                          const SoftConfig& cfg, std::size_t t) {
  cfg.validate();
  if (t < 2) throw std::invalid_argument("soft conformity scores need a prefix of length >= 2");
  if (t > features.size()) {
    throw std::invalid_argument("prefix length " + std::to_string(t) + " exceeds sequence length " +
                                std::to_string(features.size()));
  }
  const bool concept_mode = cfg.mode == DetectMode::Concept;
  if (concept_mode && (!labels.has_value() || labels->size() < t)) {
    throw std::invalid_argument("concept mode requires labels for the full prefix");
  }
  std::vector<Node*> prefix(features.begin(), features.begin() + static_cast<std::ptrdiff_t>(t));
  Node* mat = stack(prefix);
  std::optional<std::vector<int>> prefix_labels;
  if (concept_mode) {
    prefix_labels.emplace(labels->begin(), labels->begin() + static_cast<std::ptrdiff_t>(t));
  }
  Node* dist = pairwise_sharpened_cosine(mat, cfg.gamma);
  Node* scores = prefix_soft_scores(dist, prefix_labels, cfg.sigma_min);

  Graph& g = *mat->graph;
  std::vector<Node*> out;
  out.reserve(t);
  for (std::size_t i = 0; i < t; ++i) {
    bool defined = true;
    if (concept_mode) {
      std::size_t same = 0;
      for (std::size_t j = 0; j < t; ++j) {
        if (j != i && (*prefix_labels)[j] == (*prefix_labels)[i]) ++same;
      }
      defined = same > 0;
    }
    if (defined) {
      out.push_back(index_scalar(scores, i * t + (t - 1)));
    } else {
      out.push_back(g.constant(Tensor::scalar(kSoftInfScore)));
    }
  }
  return out;
}

Node* soft_pvalue(const std::vector<Node*>& scores,
                  const std::optional<std::vector<int>>& labels, const SoftConfig& cfg) {
  cfg.validate();
  const std::size_t t = scores.size();
  if (t < 1) throw std::invalid_argument("soft_pvalue: need at least one score");
  const bool concept_mode = cfg.mode == DetectMode::Concept;
  if (concept_mode && (!labels.has_value() || labels->size() < t)) {
    throw std::invalid_argument("concept mode requires labels for the full prefix");
  }
  Node* last = scores[t - 1];
  std::vector<Node*> terms;
  for (std::size_t i = 0; i < t; ++i) {
    if (concept_mode && (*labels)[i] != (*labels)[t - 1]) continue;
    terms.push_back(sigmoid(scale(sub(last, scores[i]), 1.0 / cfg.sigma_rank)));
  }
  Graph& g = *last->graph;
  Node* denom = g.constant(Tensor::scalar(static_cast<double>(terms.size())));
  return div(sum(stack(terms)), denom);
}

}  // namespace drm
