#pragma once

#include <optional>
#include <vector>

#include "drm/conformal.hpp"
#include "drm/graph.hpp"

namespace drm {

// Dispersions for the smoothed detector. One dispersion sigma usually drives
// both knobs; they stay independently overridable.
struct SoftConfig {
  double sigma_min = 0.001;   // soft-min temperature
  double sigma_rank = 0.001;  // soft-rank (pairwise sigmoid) temperature
  double gamma = 1.0;         // distance sharpening exponent
  DetectMode mode = DetectMode::Covariate;

  static SoftConfig from_sigma(double sigma, double gamma, DetectMode mode) {
    return SoftConfig{sigma, sigma, gamma, mode};
  }
  void validate() const;
};

struct SoftMartingaleResult {
  std::vector<Node*> soft_values;  // clipped soft martingale values, one per step
  Node* mean_penalty = nullptr;    // mean over steps
};

// Finite stand-in for the hard +inf sentinel (first point of its class).
// It exceeds the distance range [0,2], so smoothed comparisons treat it as
// larger than every real score, and it carries no gradient.
inline constexpr double kSoftInfScore = 3.0;

// Softmax-weighted average of the inputs: exact for equal inputs and bounded
// by their min/max. Approaches the hard min as sigma_min -> 0.
Node* soft_min(const std::vector<Node*>& distances, double sigma_min);

// Differentiable nearest-neighbor scores for the prefix of length t (t >= 2)
// of `features`; the index sets match the hard conformity scores.
std::vector<Node*> soft_conformity_scores(const std::vector<Node*>& features,
                                          const std::optional<std::vector<int>>& labels,
                                          const SoftConfig& cfg, std::size_t t);

// Smoothed randomized rank of the last score among the eligible prefix
// scores; self-comparison contributes sigmoid(0) = 0.5, the expectation of
// the hard tie-breaking draw.
Node* soft_pvalue(const std::vector<Node*>& scores,
                  const std::optional<std::vector<int>>& labels, const SoftConfig& cfg);

// Full differentiable detector: soft scores over every prefix, soft p-values,
// betting-martingale arithmetic, values clipped to [1e-12, 1e12] (zero
// gradient where clipped). `features` is a [T, n_d] node (rows are points).
SoftMartingaleResult soft_martingale_matrix(Node* features,
                                            const std::optional<std::vector<int>>& labels,
                                            const SoftConfig& cfg);

// Same, from per-point feature vector nodes.
SoftMartingaleResult soft_martingale(const std::vector<Node*>& features,
                                     const std::optional<std::vector<int>>& labels,
                                     const SoftConfig& cfg);

// Pairwise sharpened-cosine distance matrix [T,T] from row features [T,n_d]
// (rows are re-normalized; the distance is scale-free).
Node* pairwise_sharpened_cosine(Node* features, double gamma);

// Fused graph ops, exposed for tests. scores[i,k] is the soft score of point
// i at prefix k+1 (valid for i <= k, prefix >= 2, eligible set nonempty;
// other entries are zero). Incremental prefix reuse is exact: the running
// sums it maintains equal the per-prefix recomputation term for term.
Node* prefix_soft_scores(Node* dist, const std::optional<std::vector<int>>& labels,
                         double sigma_min);
Node* prefix_soft_pvalues(Node* scores, const std::optional<std::vector<int>>& labels,
                          double sigma_rank);

// Betting-martingale arithmetic on a p-value vector node, in graph ops.
SoftMartingaleResult soft_betting_martingale(Node* pvalues);

}  // namespace drm
