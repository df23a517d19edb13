#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "drm/rng.hpp"

namespace drm {

enum class DetectMode { Covariate, Concept };

// Encoded data point used for detection. Entries must be finite; encoders
// emit unit-norm vectors, but the cosine distance itself is scale-free, so
// raw (non-normalized) inputs are accepted too.
struct FeatureVector {
  std::vector<double> v;
};

// Ordered sequence of encoded points; order carries the temporal structure
// and must never be shuffled. Labels are required in Concept mode.
struct DetectionSequence {
  std::vector<FeatureVector> features;
  std::optional<std::vector<int>> labels;

  std::size_t size() const { return features.size(); }
};

struct PValueSequence {
  std::vector<double> values;  // each in [0,1]
  std::uint64_t xi_seed = 0;   // seed of the tie-breaking stream (0 if injected)
};

struct MartingaleTrace {
  std::vector<double> values;  // S_1..S_T, nonnegative, S_1 == 1
  double threshold = 0.0;      // 1/alpha
  std::optional<std::size_t> triggered_at;  // first 0-based t with S_t >= threshold

  bool triggered() const { return triggered_at.has_value(); }
};

// Capital process of a mixture bettor over slopes E = {-1,-0.5,0,0.5,1} with
// mixing rate mu = 0.005. After every step() the total capital equals the sum
// of the per-slope capitals.
struct BettorState {
  static constexpr std::array<double, 5> kSlopes{-1.0, -0.5, 0.0, 0.5, 1.0};
  static constexpr double kMixRate = 0.005;
  static constexpr double kCap = 1e12;

  double capital = 1.0;
  std::array<double, 5> per_slope{0.2, 0.2, 0.2, 0.2, 0.2};

  // One betting round on p in [0,1]: mix toward the average, apply the bet
  // factors 1 + e(p - 0.5), re-total, saturate at kCap (per-slope capitals
  // rescaled so the total stays consistent).
  void step(double p);
};

// Source of the tie-breaking draws xi_t. Kept injectable so tests can pin
// xi to a constant and golden traces stay deterministic.
class XiStream {
 public:
  virtual ~XiStream() = default;
  virtual double next() = 0;
  virtual std::uint64_t seed() const { return 0; }
};

class SeededXiStream final : public XiStream {
 public:
  explicit SeededXiStream(std::uint64_t seed) : seed_(seed), rng_(seed, streams::kXi) {}
  double next() override { return rng_.uniform(); }
  std::uint64_t seed() const override { return seed_; }

 private:
  std::uint64_t seed_;
  Rng rng_;
};

class ConstantXiStream final : public XiStream {
 public:
  explicit ConstantXiStream(double xi) : xi_(xi) {}
  double next() override { return xi_; }

 private:
  double xi_;
};

// 1 - sign(z.z') |z.z' / (|z||z'|)|^gamma, in [0, 2]. Errors on zero norms.
double sharpened_cosine_distance(const std::vector<double>& z, const std::vector<double>& zp,
                                 double gamma);

// Sentinel for an empty label-conditioned minimum (first point of its class).
inline constexpr double kInfScore = std::numeric_limits<double>::infinity();

// Nearest-neighbor conformity scores alpha_1..alpha_t over the prefix of
// length t (t >= 2): alpha_i = min_{j <= t, j != i} d(phi_i, phi_j).
std::vector<double> conformity_scores_covariate(const DetectionSequence& seq, std::size_t t,
                                                double gamma);

// Label-conditioned variant: the min runs over same-label indices only; a
// point with no same-label partner in the prefix scores kInfScore.
std::vector<double> conformity_scores_concept(const DetectionSequence& seq, std::size_t t,
                                              double gamma);

// Randomized rank p-values from per-prefix scores. scores_per_prefix[t-1]
// holds alpha_1..alpha_t for the prefix of length t; the entry for t=1 may be
// empty (p_1 reduces to xi_1). Infinite sentinels tie only with each other.
PValueSequence conformal_pvalues(const std::vector<std::vector<double>>& scores_per_prefix,
                                 DetectMode mode, const std::optional<std::vector<int>>& labels,
                                 XiStream& xi);

// Betting martingale of the p-value sequence. With alpha > 0 the trace gets
// threshold 1/alpha and the first-crossing index; otherwise it never triggers.
MartingaleTrace betting_martingale(const PValueSequence& pvalues, double alpha = 0.0);

struct DetectionResult {
  PValueSequence pvalues;
  MartingaleTrace trace;
};

// Full pipeline: incremental nearest-neighbor scores over every prefix
// (O(T^2) distance evaluations), p-values, betting martingale, threshold
// 1/alpha. Deterministic given the xi stream.
DetectionResult run_detector(const DetectionSequence& seq, double alpha, DetectMode mode,
                             double gamma, XiStream& xi);
DetectionResult run_detector(const DetectionSequence& seq, double alpha, DetectMode mode,
                             double gamma, std::uint64_t xi_seed);

MartingaleTrace detect(const DetectionSequence& seq, double alpha, DetectMode mode, double gamma,
                       std::uint64_t xi_seed);

// Empirical detection-delay measurement for a changepoint at nu (0-based:
// points 0..nu-1 from `pre`, the rest from `post`).
using FeatureSampler = std::function<FeatureVector(Rng&)>;

struct DelayStats {
  int reps = 0;
  int triggered_after_changepoint = 0;
  std::optional<double> mean_delay;  // empty when nothing triggered after nu
};

DelayStats measure_detection_delay(const FeatureSampler& pre, const FeatureSampler& post,
                                   std::size_t nu, double alpha, int reps, std::size_t horizon,
                                   std::uint64_t seed, double gamma = 1.0);

}  // namespace drm
