#include "drm/conformal.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace drm {

namespace {

double vec_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double unit_dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double sharpened_from_cosine(double c, double gamma) {
  const double s = c > 0.0 ? 1.0 : (c < 0.0 ? -1.0 : 0.0);
  return 1.0 - s * std::pow(std::abs(c), gamma);
}

void validate_labels(const DetectionSequence& seq) {
  if (!seq.labels.has_value()) {
    throw std::invalid_argument("concept mode requires labels on the detection sequence");
  }
  if (seq.labels->size() != seq.features.size()) {
    throw std::invalid_argument("labels length " + std::to_string(seq.labels->size()) +
                                " does not match features length " +
                                std::to_string(seq.features.size()));
  }
}

void validate_p(double p) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::invalid_argument("p-value " + std::to_string(p) + " outside [0,1]");
  }
}

// Rows of unit-normalized features; the cosine of a pair is a plain dot.
std::vector<std::vector<double>> normalize_features(const DetectionSequence& seq) {
  std::vector<std::vector<double>> rows;
  rows.reserve(seq.features.size());
  for (std::size_t i = 0; i < seq.features.size(); ++i) {
    const auto& f = seq.features[i].v;
    const double n = vec_norm(f);
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw std::invalid_argument("feature " + std::to_string(i) +
                                  " has zero or non-finite norm");
    }
    std::vector<double> r(f.size());
    for (std::size_t k = 0; k < f.size(); ++k) r[k] = f[k] / n;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

double sharpened_cosine_distance(const std::vector<double>& z, const std::vector<double>& zp,
                                 double gamma) {
  if (z.size() != zp.size()) {
    throw std::invalid_argument("distance: dimension mismatch " + std::to_string(z.size()) +
                                " vs " + std::to_string(zp.size()));
  }
  const double nz = vec_norm(z);
  const double nzp = vec_norm(zp);
  if (!(nz > 0.0) || !(nzp > 0.0)) {
    throw std::invalid_argument("distance: zero-norm input");
  }
  const double c = unit_dot(z, zp) / (nz * nzp);
  return sharpened_from_cosine(c, gamma);
}

std::vector<double> conformity_scores_covariate(const DetectionSequence& seq, std::size_t t,
                                                double gamma) {
  if (t < 2) throw std::invalid_argument("conformity scores need a prefix of length >= 2");
  if (t > seq.size()) {
    throw std::invalid_argument("prefix length " + std::to_string(t) + " exceeds sequence length " +
                                std::to_string(seq.size()));
  }
  std::vector<double> scores(t, kInfScore);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) {
      const double d = sharpened_cosine_distance(seq.features[i].v, seq.features[j].v, gamma);
      scores[i] = std::min(scores[i], d);
      scores[j] = std::min(scores[j], d);
    }
  }
  return scores;
}

std::vector<double> conformity_scores_concept(const DetectionSequence& seq, std::size_t t,
                                              double gamma) {
  if (t < 2) throw std::invalid_argument("conformity scores need a prefix of length >= 2");
  if (t > seq.size()) {
    throw std::invalid_argument("prefix length " + std::to_string(t) + " exceeds sequence length " +
                                std::to_string(seq.size()));
  }
  validate_labels(seq);
  const auto& y = *seq.labels;
  std::vector<double> scores(t, kInfScore);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) {
      if (y[i] != y[j]) continue;
      const double d = sharpened_cosine_distance(seq.features[i].v, seq.features[j].v, gamma);
      scores[i] = std::min(scores[i], d);
      scores[j] = std::min(scores[j], d);
    }
  }
  return scores;
}

PValueSequence conformal_pvalues(const std::vector<std::vector<double>>& scores_per_prefix,
                                 DetectMode mode, const std::optional<std::vector<int>>& labels,
                                 XiStream& xi) {
  if (mode == DetectMode::Concept && !labels.has_value()) {
    throw std::invalid_argument("concept mode requires labels");
  }
  PValueSequence out;
  out.xi_seed = xi.seed();
  out.values.reserve(scores_per_prefix.size());
  for (std::size_t ti = 0; ti < scores_per_prefix.size(); ++ti) {
    const std::size_t t = ti + 1;
    const double xit = xi.next();
    if (t == 1) {
      // Only the self-tie exists: p_1 = xi_1.
      out.values.push_back(xit);
      continue;
    }
    const auto& scores = scores_per_prefix[ti];
    if (scores.size() != t) {
      throw std::invalid_argument("prefix " + std::to_string(t) + " has " +
                                  std::to_string(scores.size()) + " scores");
    }
    const double at = scores[t - 1];
    std::size_t strict = 0, ties = 0, denom = 0;
    for (std::size_t i = 0; i < t; ++i) {
      if (mode == DetectMode::Concept && (*labels)[i] != (*labels)[t - 1]) continue;
      ++denom;
      if (scores[i] < at) ++strict;
      if (scores[i] == at) ++ties;  // +inf ties only with +inf
    }
    if (mode == DetectMode::Covariate) denom = t;
    const double p =
        (static_cast<double>(strict) + xit * static_cast<double>(ties)) / static_cast<double>(denom);
    validate_p(p);
    out.values.push_back(p);
  }
  return out;
}

void BettorState::step(double p) {
  validate_p(p);
  const double avg = capital / static_cast<double>(kSlopes.size());
  for (std::size_t e = 0; e < kSlopes.size(); ++e) {
    // Written as a delta so a uniform state stays exactly fixed.
    per_slope[e] += kMixRate * (avg - per_slope[e]);
    per_slope[e] *= 1.0 + kSlopes[e] * (p - 0.5);
  }
  double total = 0.0;
  for (double c : per_slope) total += c;
  if (total > kCap) {
    const double r = kCap / total;
    for (double& c : per_slope) c *= r;
    total = kCap;
  }
  capital = total;
}

MartingaleTrace betting_martingale(const PValueSequence& pvalues, double alpha) {
  MartingaleTrace trace;
  trace.threshold = alpha > 0.0 ? 1.0 / alpha : std::numeric_limits<double>::infinity();
  trace.values.reserve(pvalues.values.size());
  BettorState bettor;
  for (std::size_t t = 0; t < pvalues.values.size(); ++t) {
    bettor.step(pvalues.values[t]);
    trace.values.push_back(bettor.capital);
    if (!trace.triggered_at && bettor.capital >= trace.threshold) {
      trace.triggered_at = t;
    }
  }
  return trace;
}

DetectionResult run_detector(const DetectionSequence& seq, double alpha, DetectMode mode,
                             double gamma, XiStream& xi) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("alpha must lie in (0,1), got " + std::to_string(alpha));
  }
  if (mode == DetectMode::Concept) validate_labels(seq);
  const std::size_t T = seq.size();
  const auto rows = normalize_features(seq);

  PValueSequence pvalues;
  pvalues.xi_seed = xi.seed();
  pvalues.values.reserve(T);

  // Running nearest-neighbor distance per point; exact for every prefix
  // because mins only shrink as points arrive.
  std::vector<double> mins(T, kInfScore);
  const auto* y = mode == DetectMode::Concept ? &*seq.labels : nullptr;

  for (std::size_t idx = 0; idx < T; ++idx) {
    const std::size_t t = idx + 1;
    const double xit = xi.next();
    if (t >= 2) {
      for (std::size_t i = 0; i < idx; ++i) {
        if (y && (*y)[i] != (*y)[idx]) continue;
        const double d = sharpened_from_cosine(unit_dot(rows[i], rows[idx]), gamma);
        if (d < mins[i]) mins[i] = d;
        if (d < mins[idx]) mins[idx] = d;
      }
    }
    double p;
    if (t == 1) {
      p = xit;
    } else {
      const double at = mins[idx];
      std::size_t strict = 0, ties = 0, denom = 0;
      for (std::size_t i = 0; i <= idx; ++i) {
        if (y && (*y)[i] != (*y)[idx]) continue;
        ++denom;
        if (mins[i] < at) ++strict;
        if (mins[i] == at) ++ties;
      }
      if (!y) denom = t;
      p = (static_cast<double>(strict) + xit * static_cast<double>(ties)) /
          static_cast<double>(denom);
      validate_p(p);
    }
    pvalues.values.push_back(p);
  }

  DetectionResult res;
  res.trace = betting_martingale(pvalues, alpha);
  res.pvalues = std::move(pvalues);
  return res;
}

DetectionResult run_detector(const DetectionSequence& seq, double alpha, DetectMode mode,
                             double gamma, std::uint64_t xi_seed) {
  SeededXiStream xi(xi_seed);
  return run_detector(seq, alpha, mode, gamma, xi);
}

MartingaleTrace detect(const DetectionSequence& seq, double alpha, DetectMode mode, double gamma,
                       std::uint64_t xi_seed) {
  return run_detector(seq, alpha, mode, gamma, xi_seed).trace;
}

DelayStats measure_detection_delay(const FeatureSampler& pre, const FeatureSampler& post,
                                   std::size_t nu, double alpha, int reps, std::size_t horizon,
                                   std::uint64_t seed, double gamma) {
  if (horizon <= nu) {
    throw std::invalid_argument("horizon must exceed the changepoint");
  }
  DelayStats stats;
  stats.reps = reps;
  double total_delay = 0.0;
  for (int r = 0; r < reps; ++r) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(r)), streams::kXNoise);
    DetectionSequence seq;
    seq.features.reserve(horizon);
    for (std::size_t t = 0; t < horizon; ++t) {
      seq.features.push_back(t < nu ? pre(rng) : post(rng));
    }
    const auto res = run_detector(seq, alpha, DetectMode::Covariate, gamma,
                                  mix_seed(seed, 0x9d39247e33776d41ULL + r));
    if (res.trace.triggered_at) {
      const std::size_t t_star = *res.trace.triggered_at + 1;  // 1-based trigger time
      if (t_star > nu) {
        ++stats.triggered_after_changepoint;
        total_delay += static_cast<double>(t_star - nu);
      }
    }
  }
  if (stats.triggered_after_changepoint > 0) {
    stats.mean_delay = total_delay / stats.triggered_after_changepoint;
  }
  return stats;
}

}  // namespace drm
