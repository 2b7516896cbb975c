#pragma once

/**
 * @file dataset.hpp
 * @brief Synthetic two-modality classification data with VQA-style soft targets.
 *
 * Each sample belongs to one answerability mode:
 *   - VisualOnly:   x_v carries the class, x_q is pure noise
 *   - QuestionOnly: the mirror image
 *   - Joint:        x_v carries c_v, x_q carries c_q and the class is (c_v + c_q) mod K,
 *                   so neither modality alone says anything about the answer
 *   - Noise:        neither modality carries the class
 *
 * Ten simulated annotators vote per sample; the soft target is
 * min(votes / 3, 1) per class, the same rule the VQA accuracy metric uses.
 */

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smem/error.hpp"
#include "smem/model.hpp"

namespace smem {

inline constexpr int kAnnotators = 10;

enum class Mode { VisualOnly, QuestionOnly, Joint, Noise };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::VisualOnly: return "visual_only";
    case Mode::QuestionOnly: return "question_only";
    case Mode::Joint: return "joint";
    case Mode::Noise: return "noise";
  }
  return "unknown";
}

inline Mode mode_from_string(std::string_view s) {
  for (Mode m : {Mode::VisualOnly, Mode::QuestionOnly, Mode::Joint, Mode::Noise}) {
    if (to_string(m) == s) return m;
  }
  throw FormatError("unknown mode '" + std::string(s) + "'");
}

struct Sample {
  SampleId id = 0;
  std::vector<double> x_v;
  std::vector<double> x_q;
  std::vector<double> target;
  std::vector<int> annotator_counts;
  Mode mode = Mode::Noise;
  std::size_t label = 0;  ///< class the annotators were drawn around

  [[nodiscard]] Example example() const { return {x_v, x_q, target}; }

  bool operator==(const Sample&) const = default;
};

inline std::vector<double> soft_target(std::span<const int> counts) {
  std::vector<double> t(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    t[i] = std::min(static_cast<double>(counts[i]) / 3.0, 1.0);
  }
  return t;
}

struct DatasetConfig {
  std::size_t pool_size = 5000;
  std::size_t test_size = 2000;
  std::size_t num_classes = 10;
  std::size_t dim_v = 16;
  std::size_t dim_q = 16;
  /// VisualOnly, QuestionOnly, Joint, Noise
  std::array<double, 4> mode_fractions{0.25, 0.25, 0.40, 0.10};
  double label_noise = 0.0;
  double signal_scale = 4.0;  ///< distance of each class mean from the origin
  std::uint64_t seed = 0;

  void validate() const {
    if (pool_size < 1 || test_size < 1) throw InvalidConfig("pool_size and test_size >= 1");
    if (num_classes < 2) throw InvalidConfig("num_classes >= 2");
    if (dim_v < 1 || dim_q < 1) throw InvalidConfig("feature dims >= 1");
    double sum = 0.0;
    for (double f : mode_fractions) {
      if (!(f >= 0.0)) throw InvalidConfig("mode_fractions must be >= 0");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw InvalidConfig("mode_fractions must sum to 1");
    if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw InvalidConfig("label_noise in [0,1]");
    if (!(signal_scale >= 0.0) || !std::isfinite(signal_scale)) {
      throw InvalidConfig("signal_scale must be finite and >= 0");
    }
  }
};

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t dim_v = 0;
  std::size_t dim_q = 0;
  std::vector<Sample> pool;
  std::vector<Sample> test;

  bool operator==(const Dataset&) const = default;
};

namespace detail {

/// Class means: scaled basis vectors when the width allows, random directions otherwise.
inline std::vector<std::vector<double>> class_means(std::size_t k, std::size_t dim, double scale,
                                                    std::mt19937_64& rng) {
  std::vector<std::vector<double>> means(k, std::vector<double>(dim, 0.0));
  if (dim >= k) {
    for (std::size_t c = 0; c < k; ++c) means[c][c] = scale;
    return means;
  }
  std::normal_distribution<double> n01(0.0, 1.0);
  for (auto& m : means) {
    double norm = 0.0;
    while (norm == 0.0) {
      for (double& x : m) x = n01(rng);
      norm = std::sqrt(std::inner_product(m.begin(), m.end(), m.begin(), 0.0));
    }
    for (double& x : m) x *= scale / norm;
  }
  return means;
}

inline std::vector<int> draw_votes(std::size_t label, std::size_t k, double label_noise,
                                   std::mt19937_64& rng) {
  std::vector<int> counts(k, 0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (label_noise <= 0.0 || u01(rng) >= label_noise) {
    counts[label] = kAnnotators;
    return counts;
  }
  // Scatter: the true class keeps a strict plurality, the rest goes to one or two other classes.
  std::vector<std::size_t> others;
  for (std::size_t c = 0; c < k; ++c) {
    if (c != label) others.push_back(c);
  }
  std::shuffle(others.begin(), others.end(), rng);
  const int kept = std::uniform_int_distribution<int>(others.size() == 1 ? 6 : 4, 8)(rng);
  const int rest = kAnnotators - kept;
  counts[label] = kept;
  const bool one_other = others.size() == 1 || (rest < kept && std::uniform_int_distribution<int>(0, 1)(rng) == 0);
  if (one_other) {
    counts[others[0]] = rest;
  } else {
    const int first = std::uniform_int_distribution<int>(std::max(1, rest - kept + 1), std::min(rest - 1, kept - 1))(rng);
    counts[others[0]] = first;
    counts[others[1]] = rest - first;
  }
  return counts;
}

}  // namespace detail

/// Deterministic in cfg.seed. Pool ids are 0..pool_size-1, test ids continue after them.
inline Dataset generate(const DatasetConfig& cfg) {
  cfg.validate();
  const std::size_t k = cfg.num_classes;
  std::mt19937_64 rng(cfg.seed);
  const auto means_v = detail::class_means(k, cfg.dim_v, cfg.signal_scale, rng);
  const auto means_q = detail::class_means(k, cfg.dim_q, cfg.signal_scale, rng);

  std::discrete_distribution<int> pick_mode(cfg.mode_fractions.begin(), cfg.mode_fractions.end());
  std::uniform_int_distribution<std::size_t> pick_class(0, k - 1);
  std::normal_distribution<double> n01(0.0, 1.0);

  auto features = [&](const std::vector<double>* mean, std::size_t dim) {
    std::vector<double> x(dim);
    for (std::size_t i = 0; i < dim; ++i) x[i] = n01(rng) + (mean ? (*mean)[i] : 0.0);
    return x;
  };

  auto make = [&](SampleId id) {
    Sample s;
    s.id = id;
    s.mode = static_cast<Mode>(pick_mode(rng));
    s.label = pick_class(rng);
    switch (s.mode) {
      case Mode::VisualOnly:
        s.x_v = features(&means_v[s.label], cfg.dim_v);
        s.x_q = features(nullptr, cfg.dim_q);
        break;
      case Mode::QuestionOnly:
        s.x_v = features(nullptr, cfg.dim_v);
        s.x_q = features(&means_q[s.label], cfg.dim_q);
        break;
      case Mode::Joint: {
        const std::size_t c_v = pick_class(rng);
        const std::size_t c_q = (s.label + k - c_v) % k;
        s.x_v = features(&means_v[c_v], cfg.dim_v);
        s.x_q = features(&means_q[c_q], cfg.dim_q);
        break;
      }
      case Mode::Noise:
        s.x_v = features(nullptr, cfg.dim_v);
        s.x_q = features(nullptr, cfg.dim_q);
        break;
    }
    s.annotator_counts = detail::draw_votes(s.label, k, cfg.label_noise, rng);
    s.target = soft_target(s.annotator_counts);
    return s;
  };

  Dataset ds{k, cfg.dim_v, cfg.dim_q, {}, {}};
  ds.pool.reserve(cfg.pool_size);
  ds.test.reserve(cfg.test_size);
  for (std::size_t i = 0; i < cfg.pool_size; ++i) ds.pool.push_back(make(i));
  for (std::size_t i = 0; i < cfg.test_size; ++i) ds.test.push_back(make(cfg.pool_size + i));
  return ds;
}

// ---------------------------------------------------------------------------
// Metrics

/// min(#annotators that gave the predicted answer / 3, 1)
inline double vqa_accuracy(std::size_t predicted_class, std::span<const int> annotator_counts) {
  if (predicted_class >= annotator_counts.size()) {
    throw IndexOutOfRange("predicted class " + std::to_string(predicted_class) + " out of range");
  }
  return std::min(static_cast<double>(annotator_counts[predicted_class]) / 3.0, 1.0);
}

/// Argmax with ties going to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

struct Metrics {
  double vqa_accuracy_mean = 0.0;
  double top1_accuracy = 0.0;

  bool operator==(const Metrics&) const = default;
};

/// Scores per-sample predictions; predict(sample) returns the main-head output vector.
template <typename Predict>
Metrics evaluate_with(std::span<const Sample> test, Predict&& predict) {
  if (test.empty()) throw EmptySplit("evaluation split is empty");
  double vqa = 0.0;
  double top1 = 0.0;
  for (const Sample& s : test) {
    const std::size_t pred = argmax(predict(s));
    vqa += vqa_accuracy(pred, s.annotator_counts);
    top1 += pred == s.label ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(test.size());
  return {vqa / n, top1 / n};
}

inline Metrics evaluate(const Parameters& p, std::span<const Sample> test) {
  Activations a;
  return evaluate_with(test, [&](const Sample& s) -> std::span<const double> {
    forward_into(p, s.x_v, s.x_q, a, /*with_branches=*/false);
    return a.y_main;
  });
}

// ---------------------------------------------------------------------------
// Text format
//
//   smem-dataset 1
//   classes <K> dim_v <Dv> dim_q <Dq> pool <N> test <M>
//   <pool|test> <id> <mode> <label> <K vote counts> <Dv floats> <Dq floats>
//
// One sample per line, space separated, LF endings. Floats use the shortest
// decimal form that round-trips; targets are rebuilt from the vote counts.

namespace detail {

inline void put_double(std::ostream& os, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  os.write(buf, res.ptr - buf);
}

inline double parse_double(std::string_view tok) {
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
    throw FormatError("bad float '" + std::string(tok) + "'");
  }
  return v;
}

template <typename Int>
Int parse_int(std::string_view tok) {
  Int v = 0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
    throw FormatError("bad integer '" + std::string(tok) + "'");
  }
  return v;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, std::ostream& os) {
  os << "smem-dataset 1\n";
  os << "classes " << ds.num_classes << " dim_v " << ds.dim_v << " dim_q " << ds.dim_q << " pool "
     << ds.pool.size() << " test " << ds.test.size() << '\n';
  auto emit = [&](std::string_view split, const Sample& s) {
    os << split << ' ' << s.id << ' ' << to_string(s.mode) << ' ' << s.label;
    for (int c : s.annotator_counts) os << ' ' << c;
    for (double x : s.x_v) {
      os << ' ';
      detail::put_double(os, x);
    }
    for (double x : s.x_q) {
      os << ' ';
      detail::put_double(os, x);
    }
    os << '\n';
  };
  for (const Sample& s : ds.pool) emit("pool", s);
  for (const Sample& s : ds.test) emit("test", s);
  if (!os) throw FormatError("failed writing dataset");
}

inline Dataset read_dataset(std::istream& is) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    while (std::getline(is, line)) {
      ++line_no;
      if (!line.empty()) return true;
    }
    return false;
  };
  auto fail = [&](const std::string& msg) -> FormatError {
    return FormatError("dataset line " + std::to_string(line_no) + ": " + msg);
  };

  if (!next_line() || line != "smem-dataset 1") throw fail("missing 'smem-dataset 1' header");
  if (!next_line()) throw fail("missing shape line");
  Dataset ds;
  std::size_t n_pool = 0;
  std::size_t n_test = 0;
  {
    std::istringstream hdr(line);
    std::string k1, k2, k3, k4, k5;
    if (!(hdr >> k1 >> ds.num_classes >> k2 >> ds.dim_v >> k3 >> ds.dim_q >> k4 >> n_pool >> k5 >>
          n_test) ||
        k1 != "classes" || k2 != "dim_v" || k3 != "dim_q" || k4 != "pool" || k5 != "test") {
      throw fail("malformed shape line");
    }
  }
  const std::size_t expected_tokens = 4 + ds.num_classes + ds.dim_v + ds.dim_q;
  std::vector<std::string_view> toks;
  while (next_line()) {
    toks.clear();
    std::string_view rest(line);
    while (!rest.empty()) {
      const auto pos = rest.find(' ');
      const auto tok = rest.substr(0, pos);
      if (!tok.empty()) toks.push_back(tok);
      if (pos == std::string_view::npos) break;
      rest.remove_prefix(pos + 1);
    }
    if (toks.size() != expected_tokens) throw fail("expected " + std::to_string(expected_tokens) + " fields");
    Sample s;
    try {
      s.id = detail::parse_int<SampleId>(toks[1]);
      s.mode = mode_from_string(toks[2]);
      s.label = detail::parse_int<std::size_t>(toks[3]);
      std::size_t t = 4;
      int votes = 0;
      for (std::size_t i = 0; i < ds.num_classes; ++i) {
        s.annotator_counts.push_back(detail::parse_int<int>(toks[t++]));
        votes += s.annotator_counts.back();
      }
      if (votes != kAnnotators) throw FormatError("vote counts must sum to 10");
      if (s.label >= ds.num_classes) throw FormatError("label out of range");
      for (std::size_t i = 0; i < ds.dim_v; ++i) s.x_v.push_back(detail::parse_double(toks[t++]));
      for (std::size_t i = 0; i < ds.dim_q; ++i) s.x_q.push_back(detail::parse_double(toks[t++]));
    } catch (const FormatError& e) {
      throw fail(e.what());
    }
    s.target = soft_target(s.annotator_counts);
    if (toks[0] == "pool") {
      ds.pool.push_back(std::move(s));
    } else if (toks[0] == "test") {
      ds.test.push_back(std::move(s));
    } else {
      throw fail("unknown split '" + std::string(toks[0]) + "'");
    }
  }
  if (ds.pool.size() != n_pool || ds.test.size() != n_test) throw fail("sample count does not match header");
  return ds;
}

}  // namespace smem
