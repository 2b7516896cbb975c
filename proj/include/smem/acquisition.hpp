#pragma once

/**
 * @file acquisition.hpp
 * @brief Sample-scoring strategies for pool-based active learning and
 *        budgeted top-b selection.
 *
 * Every score is "higher means more worth labeling". The single-modal
 * entropic measure and its variants consume all three head outputs of the
 * tri-branch model; the classic baselines only look at the main head.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smem/error.hpp"
#include "smem/probmath.hpp"

namespace smem {

using SampleId = std::uint64_t;

/// Raw outputs of the main (fused), visual-only and question-only heads.
struct OutputTriple {
  RawOutput main;
  RawOutput visual_only;
  RawOutput question_only;

  OutputTriple(RawOutput main_out, RawOutput visual_out, RawOutput question_out)
      : main(std::move(main_out)),
        visual_only(std::move(visual_out)),
        question_only(std::move(question_out)) {
    if (main.size() != visual_only.size() || main.size() != question_only.size()) {
      throw LengthMismatch("output triple heads differ in class count");
    }
  }

  [[nodiscard]] std::size_t num_classes() const { return main.size(); }
};

enum class Strategy {
  Random,
  Entropy,
  Margin,
  LeastConfident,
  SMEM,
  SMEM_JSD,
  SMEM_Full,
  KLD,
  AD_KLD,
  MI,
};

inline constexpr std::array<std::pair<Strategy, std::string_view>, 10> kStrategyNames{{
    {Strategy::Random, "random"},
    {Strategy::Entropy, "entropy"},
    {Strategy::Margin, "margin"},
    {Strategy::LeastConfident, "least_confident"},
    {Strategy::SMEM, "smem"},
    {Strategy::SMEM_JSD, "smem_jsd"},
    {Strategy::SMEM_Full, "smem_full"},
    {Strategy::KLD, "kld"},
    {Strategy::AD_KLD, "ad_kld"},
    {Strategy::MI, "mi"},
}};

inline std::string registry_listing() {
  std::string out;
  for (const auto& [s, name] : kStrategyNames) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

inline std::string_view to_string(Strategy s) {
  for (const auto& [value, name] : kStrategyNames) {
    if (value == s) return name;
  }
  return "unknown";
}

inline Strategy strategy_from_string(std::string_view name) {
  for (const auto& [value, n] : kStrategyNames) {
    if (n == name) return value;
  }
  throw InvalidConfig("unknown strategy '" + std::string(name) +
                      "'; registry: " + registry_listing());
}

struct AcquisitionConfig {
  double alpha = 0.5;  ///< weight of the question-only entropy; 1 - alpha goes to visual
  double beta = 1.0;   ///< weight of JSD(y_v || y_q)
  double gamma = 1.0;  ///< weight of the main-head entropy
  Strategy strategy = Strategy::SMEM_Full;
  KlMode kl_mode = KlMode::Infinite;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidConfig("alpha in [0,1]");
    if (!(beta >= 0.0)) throw InvalidConfig("beta >= 0");
    if (!(gamma >= 0.0)) throw InvalidConfig("gamma >= 0");
  }
};

struct ScoredSample {
  SampleId sample_id = 0;
  double score = 0.0;
};

// ---------------------------------------------------------------------------
// Main-head baselines

inline double score_entropy(const OutputTriple& t) { return entropy(normalize(t.main)); }

/// 1 - (p1 - p2) over the two largest normalized main probabilities.
inline double score_margin(const OutputTriple& t) {
  const Distribution d = normalize(t.main);
  double first = -1.0;
  double second = -1.0;
  for (double p : d.probs()) {
    if (p > first) {
      second = first;
      first = p;
    } else if (p > second) {
      second = p;
    }
  }
  return 1.0 - (first - second);
}

inline double score_least_confident(const OutputTriple& t) {
  const Distribution d = normalize(t.main);
  return 1.0 - *std::max_element(d.probs().begin(), d.probs().end());
}

// ---------------------------------------------------------------------------
// Single-modal measures

inline double score_smem(const OutputTriple& t, const AcquisitionConfig& cfg) {
  const double h_q = entropy(normalize(t.question_only));
  const double h_v = entropy(normalize(t.visual_only));
  return cfg.alpha * h_q + (1.0 - cfg.alpha) * h_v;
}

/// SMEM + beta * JSD(y_v || y_q) + gamma * H(y_hat).
inline double score_smem_full(const OutputTriple& t, const AcquisitionConfig& cfg) {
  double s = score_smem(t, cfg);
  if (cfg.beta != 0.0) s += cfg.beta * jsd(normalize(t.visual_only), normalize(t.question_only));
  if (cfg.gamma != 0.0) s += cfg.gamma * entropy(normalize(t.main));
  return s;
}

inline double score_smem_jsd(const OutputTriple& t, const AcquisitionConfig& cfg) {
  AcquisitionConfig no_main = cfg;
  no_main.gamma = 0.0;
  return score_smem_full(t, no_main);
}

/// KL from the main output to each single-modal output; main acts as reference.
inline double score_kld(const OutputTriple& t, const AcquisitionConfig& cfg) {
  const Distribution y = normalize(t.main);
  double s = 0.0;
  if (cfg.alpha != 0.0) s += cfg.alpha * kl_div(y, normalize(t.question_only), cfg.kl_mode);
  if (cfg.alpha != 1.0) s += (1.0 - cfg.alpha) * kl_div(y, normalize(t.visual_only), cfg.kl_mode);
  return s;
}

inline double score_ad_kld(const OutputTriple& t, KlMode mode = KlMode::Infinite) {
  const Distribution y = normalize(t.main);
  const double to_q = kl_div(y, normalize(t.question_only), mode);
  const double to_v = kl_div(y, normalize(t.visual_only), mode);
  if (std::isinf(to_q) && std::isinf(to_v)) return std::numeric_limits<double>::infinity();
  return std::abs(to_q - to_v);
}

/// Plug-in conditional mutual information; can be negative.
inline double score_mi(const OutputTriple& t, const AcquisitionConfig& cfg) {
  const double h_main = entropy(normalize(t.main));
  const double h_q = entropy(normalize(t.question_only));
  const double h_v = entropy(normalize(t.visual_only));
  return cfg.alpha * (h_q - h_main) + (1.0 - cfg.alpha) * (h_v - h_main);
}

// ---------------------------------------------------------------------------
// Random baseline

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Uniform score in [0, 1), a pure function of (seed, id).
inline double score_random(SampleId sample_id, std::uint64_t seed) {
  const std::uint64_t h = detail::splitmix64(seed ^ detail::splitmix64(sample_id));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Scores one sample with the configured strategy.
inline double score(SampleId sample_id, const OutputTriple& t, const AcquisitionConfig& cfg,
                    std::uint64_t random_seed) {
  switch (cfg.strategy) {
    case Strategy::Random: return score_random(sample_id, random_seed);
    case Strategy::Entropy: return score_entropy(t);
    case Strategy::Margin: return score_margin(t);
    case Strategy::LeastConfident: return score_least_confident(t);
    case Strategy::SMEM: return score_smem(t, cfg);
    case Strategy::SMEM_JSD: return score_smem_jsd(t, cfg);
    case Strategy::SMEM_Full: return score_smem_full(t, cfg);
    case Strategy::KLD: return score_kld(t, cfg);
    case Strategy::AD_KLD: return score_ad_kld(t, cfg.kl_mode);
    case Strategy::MI: return score_mi(t, cfg);
  }
  throw InvalidConfig("unhandled strategy");
}

// ---------------------------------------------------------------------------
// Selection

/// Orders by descending score, then ascending id. +inf ranks above every finite score.
inline bool ranks_before(const ScoredSample& a, const ScoredSample& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.sample_id < b.sample_id;
}

/// The b highest-scoring ids, in descending score then ascending id order.
inline std::vector<SampleId> select_top_b(std::span<const ScoredSample> scored, std::size_t b) {
  if (b > scored.size()) {
    throw BudgetExceedsPool("budget " + std::to_string(b) + " exceeds " +
                            std::to_string(scored.size()) + " scored samples");
  }
  for (const auto& s : scored) {
    if (std::isnan(s.score)) throw InvalidScore("NaN score for sample " + std::to_string(s.sample_id));
  }
  std::vector<ScoredSample> work(scored.begin(), scored.end());
  std::partial_sort(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(b), work.end(),
                    ranks_before);
  std::vector<SampleId> ids;
  ids.reserve(b);
  for (std::size_t i = 0; i < b; ++i) ids.push_back(work[i].sample_id);
  return ids;
}

}  // namespace smem
