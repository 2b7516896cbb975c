#pragma once

/**
 * @file model.hpp
 * @brief Tri-branch multi-modal classifier with detached single-modal heads.
 *
 *   z_v = relu(W_v x_v + b_v)          z_q = relu(W_q x_q + b_q)
 *   z   = relu(W_z [z_v; z_q] + b_z)
 *   y_hat = sigmoid(head_main z)   y_v = sigmoid(head_v z_v)   y_q = sigmoid(head_q z_q)
 *
 * The main loss trains encoders, fusion and the main head. The single-modal
 * heads read z_v / z_q but their losses never propagate into the encoders,
 * and the distillation target y_hat is treated as a constant. Consequently
 * the main-model parameter trajectory does not depend on the heads at all.
 */

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smem/acquisition.hpp"
#include "smem/error.hpp"

namespace smem {

struct ModelConfig {
  std::size_t dim_v = 0;
  std::size_t dim_q = 0;
  std::size_t hidden = 32;
  std::size_t num_classes = 2;
  double lambda = 1.0;  ///< self-distillation weight
  std::uint64_t seed = 0;

  void validate() const {
    if (dim_v < 1 || dim_q < 1 || hidden < 1) throw InvalidConfig("model dims must be >= 1");
    if (num_classes < 2) throw InvalidConfig("num_classes >= 2");
    if (!(lambda >= 0.0)) throw InvalidConfig("lambda >= 0");
  }
};

/// y = W x + b with W stored row-major (out x in).
struct Affine {
  std::size_t out = 0;
  std::size_t in = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  Affine() = default;
  Affine(std::size_t out_dim, std::size_t in_dim)
      : out(out_dim), in(in_dim), weight(out_dim * in_dim, 0.0), bias(out_dim, 0.0) {}

  [[nodiscard]] double w(std::size_t r, std::size_t c) const { return weight[r * in + c]; }

  void apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t r = 0; r < out; ++r) {
      const double* row = weight.data() + r * in;
      double acc = bias[r];
      for (std::size_t c = 0; c < in; ++c) acc += row[c] * x[c];
      y[r] = acc;
    }
  }

  bool operator==(const Affine&) const = default;
};

/// The six affine blocks of the model; shared layout of parameters and gradients.
struct LayerSet {
  Affine enc_v;
  Affine enc_q;
  Affine fusion;
  Affine head_main;
  Affine head_v;
  Affine head_q;

  LayerSet() = default;
  explicit LayerSet(const ModelConfig& cfg)
      : enc_v(cfg.hidden, cfg.dim_v),
        enc_q(cfg.hidden, cfg.dim_q),
        fusion(cfg.hidden, 2 * cfg.hidden),
        head_main(cfg.num_classes, cfg.hidden),
        head_v(cfg.num_classes, cfg.hidden),
        head_q(cfg.num_classes, cfg.hidden) {}

  [[nodiscard]] std::array<Affine*, 6> layers() {
    return {&enc_v, &enc_q, &fusion, &head_main, &head_v, &head_q};
  }
  [[nodiscard]] std::array<const Affine*, 6> layers() const {
    return {&enc_v, &enc_q, &fusion, &head_main, &head_v, &head_q};
  }

  [[nodiscard]] std::size_t dim_v() const { return enc_v.in; }
  [[nodiscard]] std::size_t dim_q() const { return enc_q.in; }
  [[nodiscard]] std::size_t hidden() const { return enc_v.out; }
  [[nodiscard]] std::size_t num_classes() const { return head_main.out; }

  bool operator==(const LayerSet&) const = default;
};

struct Parameters : LayerSet {
  using LayerSet::LayerSet;
  bool operator==(const Parameters&) const = default;
};

struct Gradients : LayerSet {
  using LayerSet::LayerSet;
};

/// Parameter groups updated independently: theta (main model), theta_v, theta_q.
enum class ParamGroup { Main, Visual, Question };

inline std::vector<Affine*> group_layers(LayerSet& s, ParamGroup g) {
  switch (g) {
    case ParamGroup::Main: return {&s.enc_v, &s.enc_q, &s.fusion, &s.head_main};
    case ParamGroup::Visual: return {&s.head_v};
    case ParamGroup::Question: return {&s.head_q};
  }
  return {};
}

inline std::vector<const Affine*> group_layers(const LayerSet& s, ParamGroup g) {
  std::vector<const Affine*> out;
  for (Affine* a : group_layers(const_cast<LayerSet&>(s), g)) out.push_back(a);
  return out;
}

namespace detail {

inline double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

inline void relu_inplace(std::span<const double> pre, std::span<double> out) {
  for (std::size_t i = 0; i < pre.size(); ++i) out[i] = pre[i] > 0.0 ? pre[i] : 0.0;
}

inline void init_affine(Affine& a, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(a.in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& w : a.weight) w = dist(rng);
  std::fill(a.bias.begin(), a.bias.end(), 0.0);
}

}  // namespace detail

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases, seeded by cfg.seed.
inline Parameters init_model(const ModelConfig& cfg) {
  cfg.validate();
  Parameters p(cfg);
  std::mt19937_64 rng(cfg.seed);
  for (Affine* a : p.layers()) detail::init_affine(*a, rng);
  return p;
}

/// Hidden states of one sample plus the three head outputs.
struct Activations {
  std::vector<double> pre_v, z_v;
  std::vector<double> pre_q, z_q;
  std::vector<double> pre_z, z;
  std::vector<double> y_main, y_v, y_q;
};

/// Forward pass without output validation. Branch heads are skipped when with_branches is false.
inline void forward_into(const Parameters& p, std::span<const double> x_v,
                         std::span<const double> x_q, Activations& a, bool with_branches = true) {
  if (x_v.size() != p.dim_v() || x_q.size() != p.dim_q()) {
    throw ShapeMismatch("input widths (" + std::to_string(x_v.size()) + ", " +
                        std::to_string(x_q.size()) + ") do not match model (" +
                        std::to_string(p.dim_v()) + ", " + std::to_string(p.dim_q()) + ")");
  }
  const std::size_t h = p.hidden();
  const std::size_t k = p.num_classes();
  a.pre_v.resize(h);
  a.z_v.resize(h);
  a.pre_q.resize(h);
  a.z_q.resize(h);
  a.pre_z.resize(h);
  a.z.resize(h);
  a.y_main.resize(k);

  p.enc_v.apply(x_v, a.pre_v);
  detail::relu_inplace(a.pre_v, a.z_v);
  p.enc_q.apply(x_q, a.pre_q);
  detail::relu_inplace(a.pre_q, a.z_q);

  std::vector<double> joint(2 * h);
  std::copy(a.z_v.begin(), a.z_v.end(), joint.begin());
  std::copy(a.z_q.begin(), a.z_q.end(), joint.begin() + static_cast<std::ptrdiff_t>(h));
  p.fusion.apply(joint, a.pre_z);
  detail::relu_inplace(a.pre_z, a.z);

  p.head_main.apply(a.z, a.y_main);
  for (double& y : a.y_main) y = detail::sigmoid(y);

  if (with_branches) {
    a.y_v.resize(k);
    a.y_q.resize(k);
    p.head_v.apply(a.z_v, a.y_v);
    p.head_q.apply(a.z_q, a.y_q);
    for (double& y : a.y_v) y = detail::sigmoid(y);
    for (double& y : a.y_q) y = detail::sigmoid(y);
  } else {
    a.y_v.clear();
    a.y_q.clear();
  }
}

inline std::pair<Activations, OutputTriple> forward(const Parameters& p, std::span<const double> x_v,
                                                    std::span<const double> x_q) {
  Activations a;
  forward_into(p, x_v, x_q, a);
  OutputTriple t(RawOutput(a.y_main), RawOutput(a.y_v), RawOutput(a.y_q));
  return {std::move(a), std::move(t)};
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kLogClamp = 1e-12;

/// Binary cross-entropy averaged over classes; target is the (soft) label.
inline double bce(std::span<const double> target, std::span<const double> pred) {
  if (target.size() != pred.size()) throw LengthMismatch("bce: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], kLogClamp, 1.0 - kLogClamp);
    s -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
  }
  return s / static_cast<double>(pred.size());
}

inline double loss_main(std::span<const double> y_hat, std::span<const double> target) {
  return bce(target, y_hat);
}

/// BCE(y, y_m) + lambda * BCE(y_hat, y_m); y_hat is a constant teacher.
inline double loss_branch(std::span<const double> y_m, std::span<const double> target,
                          std::span<const double> y_hat, double lambda) {
  return bce(target, y_m) + lambda * bce(y_hat, y_m);
}

// ---------------------------------------------------------------------------
// Backward

/// One training example as views into caller-owned storage.
struct Example {
  std::span<const double> x_v;
  std::span<const double> x_q;
  std::span<const double> target;
};

/// Which loss terms take part in a step.
struct LossTerms {
  bool main = true;      ///< L_main -> encoders, fusion, main head
  bool branches = true;  ///< L_v, L_q -> single-modal heads; false removes the heads entirely
};

struct BatchResult {
  Gradients grads;
  double loss_main = 0.0;  ///< batch means
  double loss_v = 0.0;
  double loss_q = 0.0;
};

/// Exact gradients of the batch-mean losses. Each group only receives the gradient of its own loss.
inline BatchResult backward(const Parameters& p, std::span<const Example> batch, double lambda,
                            LossTerms terms = {}) {
  if (batch.empty()) throw EmptyLabeledSet("backward on an empty batch");
  const std::size_t h = p.hidden();
  const std::size_t k = p.num_classes();
  const double scale = 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(k));

  BatchResult out;
  out.grads = Gradients(ModelConfig{p.dim_v(), p.dim_q(), h, k, lambda, 0});

  Activations a;
  std::vector<double> delta(k), dz(h), dpre_z(h), djoint(2 * h), dpre_v(h), dpre_q(h), joint(2 * h);

  auto accumulate_outer = [](Affine& g, std::span<const double> d, std::span<const double> x) {
    for (std::size_t r = 0; r < g.out; ++r) {
      if (d[r] == 0.0) continue;
      double* row = g.weight.data() + r * g.in;
      for (std::size_t c = 0; c < g.in; ++c) row[c] += d[r] * x[c];
      g.bias[r] += d[r];
    }
  };
  // dx = W^T d
  auto transpose_apply = [](const Affine& w, std::span<const double> d, std::span<double> dx) {
    std::fill(dx.begin(), dx.end(), 0.0);
    for (std::size_t r = 0; r < w.out; ++r) {
      if (d[r] == 0.0) continue;
      const double* row = w.weight.data() + r * w.in;
      for (std::size_t c = 0; c < w.in; ++c) dx[c] += row[c] * d[r];
    }
  };

  for (const Example& ex : batch) {
    if (ex.target.size() != k) throw ShapeMismatch("target width does not match num_classes");
    forward_into(p, ex.x_v, ex.x_q, a, terms.branches);
    out.loss_main += loss_main(a.y_main, ex.target);

    if (terms.main) {
      // d BCE / d logit = (sigmoid - target) for the unclamped loss.
      for (std::size_t i = 0; i < k; ++i) delta[i] = (a.y_main[i] - ex.target[i]) * scale;
      accumulate_outer(out.grads.head_main, delta, a.z);
      transpose_apply(p.head_main, delta, dz);
      for (std::size_t i = 0; i < h; ++i) dpre_z[i] = a.pre_z[i] > 0.0 ? dz[i] : 0.0;
      std::copy(a.z_v.begin(), a.z_v.end(), joint.begin());
      std::copy(a.z_q.begin(), a.z_q.end(), joint.begin() + static_cast<std::ptrdiff_t>(h));
      accumulate_outer(out.grads.fusion, dpre_z, joint);
      transpose_apply(p.fusion, dpre_z, djoint);
      for (std::size_t i = 0; i < h; ++i) {
        dpre_v[i] = a.pre_v[i] > 0.0 ? djoint[i] : 0.0;
        dpre_q[i] = a.pre_q[i] > 0.0 ? djoint[h + i] : 0.0;
      }
      accumulate_outer(out.grads.enc_v, dpre_v, ex.x_v);
      accumulate_outer(out.grads.enc_q, dpre_q, ex.x_q);
    }

    if (terms.branches) {
      out.loss_v += loss_branch(a.y_v, ex.target, a.y_main, lambda);
      out.loss_q += loss_branch(a.y_q, ex.target, a.y_main, lambda);
      for (std::size_t i = 0; i < k; ++i) {
        delta[i] = ((a.y_v[i] - ex.target[i]) + lambda * (a.y_v[i] - a.y_main[i])) * scale;
      }
      accumulate_outer(out.grads.head_v, delta, a.z_v);
      for (std::size_t i = 0; i < k; ++i) {
        delta[i] = ((a.y_q[i] - ex.target[i]) + lambda * (a.y_q[i] - a.y_main[i])) * scale;
      }
      accumulate_outer(out.grads.head_q, delta, a.z_q);
    }
  }
  const double n = static_cast<double>(batch.size());
  out.loss_main /= n;
  out.loss_v /= n;
  out.loss_q /= n;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

enum class OptimizerKind { Adamax, SGD };

struct TrainConfig {
  double learning_rate = 0.002;
  std::size_t max_epoch = 10;
  std::size_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::Adamax;
  double adamax_beta1 = 0.9;
  double adamax_beta2 = 0.999;
  double adamax_eps = 1e-8;
  LossTerms terms{};

  void validate() const {
    // lr = 0 is accepted so a run can be made a no-op.
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw InvalidConfig("learning_rate must be finite and >= 0");
    }
    if (max_epoch < 1) throw InvalidConfig("max_epoch >= 1");
    if (batch_size < 1) throw InvalidConfig("batch_size >= 1");
    if (!(adamax_beta1 >= 0.0 && adamax_beta1 < 1.0)) throw InvalidConfig("adamax beta1 in [0,1)");
    if (!(adamax_beta2 >= 0.0 && adamax_beta2 < 1.0)) throw InvalidConfig("adamax beta2 in [0,1)");
    if (!(adamax_eps >= 0.0)) throw InvalidConfig("adamax eps >= 0");
  }
};

/// Adamax moments for one parameter group.
struct GroupMoments {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;  // one entry per weight/bias tensor in the group
  std::vector<std::vector<double>> u;
};

struct OptimizerState {
  std::array<GroupMoments, 3> groups;  // indexed by ParamGroup
};

namespace detail {

inline void adamax_tensor(std::span<double> theta, std::span<const double> g, std::vector<double>& m,
                          std::vector<double>& u, double step_size, const TrainConfig& tc) {
  if (m.empty()) {
    m.assign(theta.size(), 0.0);
    u.assign(theta.size(), 0.0);
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = tc.adamax_beta1 * m[i] + (1.0 - tc.adamax_beta1) * g[i];
    u[i] = std::max(tc.adamax_beta2 * u[i], std::abs(g[i]));
    const double denom = u[i] + tc.adamax_eps;
    if (denom > 0.0) theta[i] -= step_size * m[i] / denom;
  }
}

}  // namespace detail

/// Updates one parameter group in place.
inline void optimizer_step(Parameters& p, const Gradients& grads, OptimizerState& state,
                           const TrainConfig& tc, ParamGroup group) {
  auto params = group_layers(p, group);
  auto gs = group_layers(grads, group);
  if (tc.optimizer == OptimizerKind::SGD) {
    for (std::size_t l = 0; l < params.size(); ++l) {
      if (params[l]->weight.size() != gs[l]->weight.size()) throw ShapeMismatch("gradient shape");
      for (std::size_t i = 0; i < params[l]->weight.size(); ++i) {
        params[l]->weight[i] -= tc.learning_rate * gs[l]->weight[i];
      }
      for (std::size_t i = 0; i < params[l]->bias.size(); ++i) {
        params[l]->bias[i] -= tc.learning_rate * gs[l]->bias[i];
      }
    }
    return;
  }

  GroupMoments& mom = state.groups[static_cast<std::size_t>(group)];
  mom.step += 1;
  if (mom.m.empty()) {
    mom.m.resize(2 * params.size());
    mom.u.resize(2 * params.size());
  }
  const double bias_correction = 1.0 - std::pow(tc.adamax_beta1, static_cast<double>(mom.step));
  const double step_size = tc.learning_rate / bias_correction;
  for (std::size_t l = 0; l < params.size(); ++l) {
    if (params[l]->weight.size() != gs[l]->weight.size()) throw ShapeMismatch("gradient shape");
    detail::adamax_tensor(params[l]->weight, gs[l]->weight, mom.m[2 * l], mom.u[2 * l], step_size, tc);
    detail::adamax_tensor(params[l]->bias, gs[l]->bias, mom.m[2 * l + 1], mom.u[2 * l + 1], step_size,
                          tc);
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  Parameters params;
  std::vector<double> epoch_loss_main;  ///< sample-weighted mean of batch L_main per epoch
};

/// Called after each epoch with (epoch index, current parameters, epoch L_main).
using EpochCallback = std::function<void(std::size_t, const Parameters&, double)>;

/// Mini-batch training; epoch e is shuffled with a generator seeded by (shuffle_seed, e).
inline TrainResult train(Parameters p, std::span<const Example> labeled, const TrainConfig& tc,
                         double lambda, std::uint64_t shuffle_seed,
                         const EpochCallback& on_epoch = {}) {
  tc.validate();
  if (labeled.empty()) throw EmptyLabeledSet("cannot train on an empty labeled set");
  if (!(lambda >= 0.0)) throw InvalidConfig("lambda >= 0");

  TrainResult result;
  OptimizerState state;
  std::vector<std::size_t> order(labeled.size());
  std::vector<Example> batch;
  batch.reserve(tc.batch_size);

  for (std::size_t epoch = 0; epoch < tc.max_epoch; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(shuffle_seed),
                      static_cast<std::uint32_t>(shuffle_seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t stop = std::min(order.size(), start + tc.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(labeled[order[i]]);
      const BatchResult br = backward(p, batch, lambda, tc.terms);
      loss_sum += br.loss_main * static_cast<double>(batch.size());
      if (tc.terms.main) optimizer_step(p, br.grads, state, tc, ParamGroup::Main);
      if (tc.terms.branches) {
        optimizer_step(p, br.grads, state, tc, ParamGroup::Visual);
        optimizer_step(p, br.grads, state, tc, ParamGroup::Question);
      }
    }
    const double epoch_loss = loss_sum / static_cast<double>(order.size());
    result.epoch_loss_main.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, p, epoch_loss);
  }
  result.params = std::move(p);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Binary layout, all integers uint64 and all reals IEEE-754 float64, little-endian:
//   8 bytes  magic "SMEMPAR1"
//   4 x u64  dim_v, dim_q, hidden, num_classes
//   then for enc_v, enc_q, fusion, head_main, head_v, head_q in that order:
//            weight (out x in, row-major), then bias (out)

inline constexpr char kCheckpointMagic[8] = {'S', 'M', 'E', 'M', 'P', 'A', 'R', '1'};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw FormatError("checkpoint truncated");
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

}  // namespace detail

inline void save_parameters(const Parameters& p, std::ostream& os) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  for (std::uint64_t d : {p.dim_v(), p.dim_q(), p.hidden(), p.num_classes()}) {
    detail::write_le<std::uint64_t>(os, d);
  }
  for (const Affine* a : p.layers()) {
    for (double w : a->weight) detail::write_le<double>(os, w);
    for (double b : a->bias) detail::write_le<double>(os, b);
  }
  if (!os) throw FormatError("failed writing checkpoint");
}

inline Parameters load_parameters(std::istream& is) {
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("not a parameter checkpoint (bad magic)");
  }
  ModelConfig cfg;
  cfg.dim_v = detail::read_le<std::uint64_t>(is);
  cfg.dim_q = detail::read_le<std::uint64_t>(is);
  cfg.hidden = detail::read_le<std::uint64_t>(is);
  cfg.num_classes = detail::read_le<std::uint64_t>(is);
  constexpr std::uint64_t kMaxDim = 1u << 20;
  if (cfg.dim_v > kMaxDim || cfg.dim_q > kMaxDim || cfg.hidden > kMaxDim || cfg.num_classes > kMaxDim) {
    throw FormatError("checkpoint dimensions out of range");
  }
  cfg.validate();
  Parameters p(cfg);
  for (Affine* a : p.layers()) {
    for (double& w : a->weight) w = detail::read_le<double>(is);
    for (double& b : a->bias) b = detail::read_le<double>(is);
  }
  for (const Affine* a : p.layers()) {
    for (double w : a->weight) {
      if (!std::isfinite(w)) throw FormatError("checkpoint contains non-finite weight");
    }
  }
  return p;
}

/// FNV-1a over the raw bytes of every parameter; used to check that scoring leaves weights alone.
inline std::uint64_t checksum(const Parameters& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](double v) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  };
  for (const Affine* a : p.layers()) {
    for (double w : a->weight) mix(w);
    for (double b : a->bias) mix(b);
  }
  return h;
}

}  // namespace smem
