#pragma once

/**
 * @file probmath.hpp
 * @brief Probability-vector math used by every acquisition score.
 *
 * All logs are natural logs, so entropies and divergences are in nats.
 * Heads are trained with per-class sigmoids, so their raw outputs are
 * turned into distributions by dividing by their sum before any of the
 * information measures are taken.
 */

#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smem/error.hpp"

namespace smem {

inline constexpr double kDistributionSumTolerance = 1e-9;

/// Per-class sigmoid outputs of one head: elements in [0, 1], not all zero.
class RawOutput {
 public:
  RawOutput() = default;
  explicit RawOutput(std::vector<double> values) : values_(std::move(values)) {
    if (values_.size() < 2) {
      throw InvalidRawOutput("raw output needs at least 2 classes");
    }
    bool any_positive = false;
    for (double v : values_) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw InvalidRawOutput("raw output element outside [0,1]: " + std::to_string(v));
      }
      any_positive = any_positive || v > 0.0;
    }
    if (!any_positive) throw AllZeroOutput("raw output is all zero");
  }

  [[nodiscard]] std::span<const double> values() const { return values_; }
  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] double operator[](std::size_t i) const { return values_[i]; }

 private:
  std::vector<double> values_;
};

/// A normalized probability vector over the answer set.
class Distribution {
 public:
  Distribution() = default;
  explicit Distribution(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.size() < 2) throw InvalidDistribution("distribution needs at least 2 classes");
    double sum = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0)) throw InvalidDistribution("negative or NaN probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kDistributionSumTolerance) {
      throw InvalidDistribution("probabilities sum to " + std::to_string(sum));
    }
  }

  static Distribution uniform(std::size_t k) {
    return Distribution(std::vector<double>(k, 1.0 / static_cast<double>(k)));
  }

  [[nodiscard]] std::span<const double> probs() const { return probs_; }
  [[nodiscard]] std::size_t size() const { return probs_.size(); }
  [[nodiscard]] double operator[](std::size_t i) const { return probs_[i]; }

 private:
  std::vector<double> probs_;
};

/// How kl_div treats p[i] > 0 where q[i] = 0.
enum class KlMode {
  Infinite,  ///< return +inf
  Smoothed,  ///< add kKlSmoothingEpsilon to q, renormalize
};

inline constexpr double kKlSmoothingEpsilon = 1e-12;

inline Distribution normalize(const RawOutput& raw) {
  const auto v = raw.values();
  const double sum = std::accumulate(v.begin(), v.end(), 0.0);
  if (sum <= 0.0) throw AllZeroOutput("cannot normalize an all-zero output");
  std::vector<double> probs(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) probs[i] = v[i] / sum;
  return Distribution(std::move(probs));
}

/// Shannon entropy in nats, with 0 ln 0 = 0.
inline double entropy(const Distribution& d) {
  double h = 0.0;
  for (double p : d.probs()) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

inline double kl_div(const Distribution& p, const Distribution& q, KlMode mode = KlMode::Infinite) {
  if (p.size() != q.size()) throw LengthMismatch("kl_div: distributions differ in length");
  const std::size_t k = p.size();
  double q_scale = 1.0;
  double q_shift = 0.0;
  if (mode == KlMode::Smoothed) {
    q_shift = kKlSmoothingEpsilon;
    q_scale = 1.0 / (1.0 + static_cast<double>(k) * kKlSmoothingEpsilon);
  }
  double d = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (p[i] <= 0.0) continue;
    const double qi = (q[i] + q_shift) * q_scale;
    if (qi <= 0.0) return std::numeric_limits<double>::infinity();
    d += p[i] * std::log(p[i] / qi);
  }
  // Rounding can leave tiny negatives when p == q.
  return d < 0.0 ? 0.0 : d;
}

/// Jensen-Shannon divergence against the midpoint M = (p + q) / 2; always finite.
inline double jsd(const Distribution& p, const Distribution& q) {
  if (p.size() != q.size()) throw LengthMismatch("jsd: distributions differ in length");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) d += p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) d += q[i] * std::log(q[i] / m);
  }
  d *= 0.5;
  return d < 0.0 ? 0.0 : d;
}

}  // namespace smem
