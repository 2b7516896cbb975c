#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "smem/dataset.hpp"
#include "smem/model.hpp"
#include "testing.hpp"

namespace smem {
namespace {

using testing::kLn2;

ModelConfig small_config(std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.dim_v = 3;
  cfg.dim_q = 4;
  cfg.hidden = 5;
  cfg.num_classes = 3;
  cfg.lambda = 0.5;
  cfg.seed = seed;
  return cfg;
}

bool main_groups_equal(const Parameters& a, const Parameters& b) {
  return a.enc_v == b.enc_v && a.enc_q == b.enc_q && a.fusion == b.fusion && a.head_main == b.head_main;
}

TEST(InitModel, DeterministicAndBounded) {
  ModelConfig cfg = small_config(3);
  cfg.hidden = 8;
  cfg.dim_v = 4;
  const Parameters a = init_model(cfg);
  const Parameters b = init_model(cfg);
  EXPECT_EQ(a, b);
  cfg.seed = 4;
  EXPECT_NE(init_model(cfg), a);
  for (double w : a.enc_v.weight) {
    EXPECT_GE(w, -0.5);
    EXPECT_LE(w, 0.5);
  }
  for (const Affine* l : a.layers()) {
    for (double bias : l->bias) EXPECT_EQ(bias, 0.0);
  }
  ModelConfig bad = small_config();
  bad.num_classes = 1;
  EXPECT_THROW(init_model(bad), InvalidConfig);
}

TEST(Forward, ZeroWeightsGiveOneHalf) {
  const ModelConfig cfg = small_config();
  const Parameters p(cfg);  // all zeros
  const std::vector<double> xv{1.0, -2.0, 3.0};
  const std::vector<double> xq{0.5, 0.5, -1.0, 2.0};
  const auto [act, out] = forward(p, xv, xq);
  for (std::size_t i = 0; i < cfg.num_classes; ++i) {
    EXPECT_EQ(out.main[i], 0.5);
    EXPECT_EQ(out.visual_only[i], 0.5);
    EXPECT_EQ(out.question_only[i], 0.5);
  }
}

TEST(Forward, BranchPurityAndShapeChecks) {
  const Parameters p = init_model(small_config(9));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> xv(3), xq(4), xq2(4), xv2(3);
    for (auto* v : {&xv, &xv2}) for (double& x : *v) x = n01(rng);
    for (auto* v : {&xq, &xq2}) for (double& x : *v) x = n01(rng);
    const auto a = forward(p, xv, xq).first;
    const auto b = forward(p, xv, xq2).first;
    const auto c = forward(p, xv2, xq).first;
    EXPECT_EQ(a.y_v, b.y_v);
    EXPECT_EQ(a.y_q, c.y_q);
    EXPECT_EQ(a.y_main, forward(p, xv, xq).first.y_main);
  }
  const std::vector<double> wrong(2, 0.0);
  const std::vector<double> xq(4, 0.0);
  EXPECT_THROW(forward(p, wrong, xq), ShapeMismatch);
}

TEST(Losses, MainExamples) {
  const std::vector<double> hard{1.0, 0.0, 1.0};
  EXPECT_LE(loss_main(hard, hard), 1e-11);
  EXPECT_NEAR(loss_main(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0}), kLn2, 1e-15);
  EXPECT_NEAR(loss_main(std::vector<double>{0.9, 0.1}, std::vector<double>{1.0, 0.0}), 0.1053605, 1e-7);
}

TEST(Losses, BranchExamples) {
  const std::vector<double> y{1.0, 0.0};
  const std::vector<double> ym{0.7, 0.2};
  const std::vector<double> yhat{0.4, 0.9};
  EXPECT_EQ(loss_branch(ym, y, yhat, 0.0), bce(y, ym));
  EXPECT_LE(loss_branch(y, y, y, 3.0), 1e-11);
  // BCE(y, 0.5) = ln 2 and BCE(0.5 teacher, 0.5 student) = ln 2 as well.
  const std::vector<double> half{0.5, 0.5};
  EXPECT_NEAR(loss_branch(half, y, half, 1.0), 1.3862944, 1e-7);
}

TEST(Losses, NonNegativeAndFiniteOnClosedUnitInterval) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> pred(5), target(5), teacher(5);
    for (std::size_t i = 0; i < 5; ++i) {
      const double r = u01(rng);
      pred[i] = r < 0.2 ? 0.0 : (r > 0.8 ? 1.0 : u01(rng));
      target[i] = u01(rng) < 0.5 ? std::round(u01(rng)) : u01(rng);
      teacher[i] = u01(rng);
    }
    const double lm = loss_main(pred, target);
    const double lb = loss_branch(pred, target, teacher, 2.0);
    EXPECT_TRUE(std::isfinite(lm));
    EXPECT_TRUE(std::isfinite(lb));
    EXPECT_GE(lm, 0.0);
    EXPECT_GE(lb, 0.0);
  }
}

TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ModelConfig cfg = small_config(seed);
    const auto batch = testing::random_batch(rng, cfg, 4);
    for (double lambda : {0.0, 0.5, 2.0}) {
      const auto res = testing::check_gradients(cfg, batch, lambda, seed);
      EXPECT_EQ(res.failures, 0u) << "seed " << seed << " lambda " << lambda << " max rel err "
                                  << res.max_rel_error;
    }
  }
}

TEST(Backward, TinyConfig) {
  ModelConfig cfg;
  cfg.dim_v = 1;
  cfg.dim_q = 1;
  cfg.hidden = 1;
  cfg.num_classes = 2;
  std::mt19937_64 rng(8);
  const auto batch = testing::random_batch(rng, cfg, 3);
  const auto res = testing::check_gradients(cfg, batch, 1.0, 21);
  EXPECT_EQ(res.failures, 0u) << res.max_rel_error;
}

TEST(Backward, BranchLossesNeverReachSharedLayers) {
  const ModelConfig cfg = small_config(5);
  std::mt19937_64 rng(2);
  const auto batch = testing::random_batch(rng, cfg, 6);
  const auto ex = batch.examples();
  const Parameters p = init_model(cfg);
  const BatchResult only_branches = backward(p, ex, 2.0, LossTerms{.main = false, .branches = true});
  const Gradients zero(cfg);
  EXPECT_EQ(only_branches.grads.enc_v, zero.enc_v);
  EXPECT_EQ(only_branches.grads.enc_q, zero.enc_q);
  EXPECT_EQ(only_branches.grads.fusion, zero.fusion);
  EXPECT_EQ(only_branches.grads.head_main, zero.head_main);
  EXPECT_NE(only_branches.grads.head_v, zero.head_v);

  // Main-model gradients do not depend on lambda or on whether the heads exist.
  const BatchResult all = backward(p, ex, 2.0);
  const BatchResult no_heads = backward(p, ex, 0.0, LossTerms{.main = true, .branches = false});
  EXPECT_EQ(all.grads.enc_v, no_heads.grads.enc_v);
  EXPECT_EQ(all.grads.fusion, no_heads.grads.fusion);
  EXPECT_EQ(all.grads.head_main, no_heads.grads.head_main);
}

TEST(Backward, ZeroLambdaIsPlainBce) {
  const ModelConfig cfg = small_config(6);
  std::mt19937_64 rng(3);
  const auto batch = testing::random_batch(rng, cfg, 5);
  const Parameters p = init_model(cfg);
  const BatchResult br = backward(p, batch.examples(), 0.0);
  // Plain BCE gradient w.r.t. head_v: mean over samples and classes of (y_v - y) z_v^T.
  Gradients expected(cfg);
  const double scale = 1.0 / (5.0 * static_cast<double>(cfg.num_classes));
  for (std::size_t n = 0; n < 5; ++n) {
    const auto act = forward(p, batch.xv[n], batch.xq[n]).first;
    for (std::size_t r = 0; r < cfg.num_classes; ++r) {
      const double d = (act.y_v[r] - batch.y[n][r]) * scale;
      for (std::size_t c = 0; c < cfg.hidden; ++c) expected.head_v.weight[r * cfg.hidden + c] += d * act.z_v[c];
      expected.head_v.bias[r] += d;
    }
  }
  for (std::size_t i = 0; i < expected.head_v.weight.size(); ++i) {
    EXPECT_NEAR(br.grads.head_v.weight[i], expected.head_v.weight[i], 1e-15);
  }
  for (std::size_t i = 0; i < expected.head_v.bias.size(); ++i) {
    EXPECT_NEAR(br.grads.head_v.bias[i], expected.head_v.bias[i], 1e-15);
  }
}

// Independent Adamax recurrence (Kingma & Ba, Algorithm 2) for one scalar.
struct RefAdamax {
  long double m = 0, u = 0, theta;
  int t = 0;
  explicit RefAdamax(long double start) : theta(start) {}
  void step(long double g, long double lr, long double b1, long double b2, long double eps) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    u = std::max(b2 * u, std::fabs(g));
    theta -= (lr / (1 - std::pow(b1, static_cast<long double>(t)))) * m / (u + eps);
  }
};

ModelConfig scalar_config() {
  ModelConfig cfg;
  cfg.dim_v = 1;
  cfg.dim_q = 1;
  cfg.hidden = 1;
  cfg.num_classes = 2;
  return cfg;
}

TEST(OptimizerStep, ZeroGradientLeavesParameters) {
  const ModelConfig cfg = small_config(8);
  Parameters p = init_model(cfg);
  const Parameters before = p;
  const Gradients g(cfg);
  OptimizerState st;
  TrainConfig tc;
  for (auto group : {ParamGroup::Main, ParamGroup::Visual, ParamGroup::Question}) {
    optimizer_step(p, g, st, tc, group);
  }
  EXPECT_EQ(p, before);
  tc.optimizer = OptimizerKind::SGD;
  optimizer_step(p, g, st, tc, ParamGroup::Main);
  EXPECT_EQ(p, before);
}

TEST(OptimizerStep, SgdStep) {
  const ModelConfig cfg = scalar_config();
  Parameters p(cfg);
  p.enc_v.weight[0] = 1.0;
  Gradients g(cfg);
  g.enc_v.weight[0] = 1.0;
  OptimizerState st;
  TrainConfig tc;
  tc.optimizer = OptimizerKind::SGD;
  tc.learning_rate = 0.1;
  optimizer_step(p, g, st, tc, ParamGroup::Main);
  EXPECT_EQ(p.enc_v.weight[0], 1.0 - 0.1);
}

TEST(OptimizerStep, AdamaxMatchesReferenceRecurrence) {
  const ModelConfig cfg = scalar_config();
  Parameters p(cfg);
  Gradients g(cfg);
  OptimizerState st;
  TrainConfig tc;  // lr 0.002, betas (0.9, 0.999), eps 1e-8

  g.enc_v.weight[0] = 1.0;
  optimizer_step(p, g, st, tc, ParamGroup::Main);
  // 0.002 * (0.1 / 0.1) / (1 + 1e-8), evaluated at 30 digits.
  EXPECT_NEAR(-p.enc_v.weight[0], 0.00199999998000000020, 1e-18);

  g.enc_v.weight[0] = 0.5;
  const double before = p.enc_v.weight[0];
  optimizer_step(p, g, st, tc, ParamGroup::Main);
  EXPECT_NEAR(before - p.enc_v.weight[0], 0.00147515935512985209, 1e-17);

  // Longer random trajectory against the reference.
  Parameters q(cfg);
  OptimizerState st2;
  RefAdamax ref(0.0L);
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n01;
  for (int i = 0; i < 200; ++i) {
    const double gi = i % 17 == 0 ? 0.0 : n01(rng);
    g.enc_v.weight[0] = gi;
    optimizer_step(q, g, st2, tc, ParamGroup::Main);
    ref.step(gi, 0.002L, 0.9L, 0.999L, 1e-8L);
  }
  EXPECT_NEAR(q.enc_v.weight[0], static_cast<double>(ref.theta), 1e-12);
}

TEST(OptimizerStep, GroupsKeepSeparateState) {
  const ModelConfig cfg = scalar_config();
  Parameters p(cfg);
  Gradients g(cfg);
  g.head_v.weight[0] = 1.0;
  g.enc_v.weight[0] = 1.0;
  OptimizerState st;
  TrainConfig tc;
  optimizer_step(p, g, st, tc, ParamGroup::Visual);
  EXPECT_EQ(p.enc_v.weight[0], 0.0);
  EXPECT_NE(p.head_v.weight[0], 0.0);
  EXPECT_EQ(st.groups[static_cast<std::size_t>(ParamGroup::Main)].step, 0u);
  EXPECT_EQ(st.groups[static_cast<std::size_t>(ParamGroup::Visual)].step, 1u);
}

// ---------------------------------------------------------------------------
// Training

struct OwnedSet {
  std::vector<Sample> samples;
  std::vector<Example> examples() const {
    std::vector<Example> ex;
    for (const auto& s : samples) ex.push_back(s.example());
    return ex;
  }
};

OwnedSet small_dataset(std::uint64_t seed, std::size_t n, std::size_t k = 4) {
  DatasetConfig dc;
  dc.pool_size = n;
  dc.test_size = 1;
  dc.num_classes = k;
  dc.dim_v = 6;
  dc.dim_q = 6;
  dc.seed = seed;
  return {generate(dc).pool};
}

TEST(Train, RejectsBadInput) {
  const ModelConfig cfg = small_config();
  TrainConfig tc;
  tc.max_epoch = 0;
  std::vector<double> xv(3, 0.0), xq(4, 0.0), y(3, 0.0);
  const std::vector<Example> one{{xv, xq, y}};
  EXPECT_THROW(train(init_model(cfg), one, tc, 1.0, 0), InvalidConfig);
  tc.max_epoch = 1;
  EXPECT_THROW(train(init_model(cfg), std::span<const Example>{}, tc, 1.0, 0), EmptyLabeledSet);
}

TEST(Train, ZeroLearningRateIsNoOp) {
  const auto data = small_dataset(1, 64);
  ModelConfig cfg;
  cfg.dim_v = 6;
  cfg.dim_q = 6;
  cfg.hidden = 8;
  cfg.num_classes = 4;
  const Parameters p = init_model(cfg);
  TrainConfig tc;
  tc.max_epoch = 1;
  tc.learning_rate = 0.0;
  EXPECT_EQ(train(p, data.examples(), tc, 1.0, 3).params, p);
}

TEST(Train, SeparableToyReachesFullAccuracy) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 0.3);
  std::vector<Sample> set;
  for (SampleId i = 0; i < 100; ++i) {
    Sample s;
    s.id = i;
    s.label = i % 2;
    const double sign = s.label == 0 ? 1.0 : -1.0;
    s.x_v = {sign * 1.5 + noise(rng), sign * 1.5 + noise(rng)};
    s.x_q = {noise(rng), noise(rng)};
    s.annotator_counts = s.label == 0 ? std::vector<int>{10, 0} : std::vector<int>{0, 10};
    s.target = soft_target(s.annotator_counts);
    set.push_back(s);
  }
  std::vector<Example> ex;
  for (const auto& s : set) ex.push_back(s.example());
  ModelConfig cfg;
  cfg.dim_v = 2;
  cfg.dim_q = 2;
  cfg.hidden = 8;
  cfg.num_classes = 2;
  cfg.seed = 17;
  TrainConfig tc;
  tc.max_epoch = 200;
  tc.learning_rate = 0.01;
  tc.batch_size = 16;
  const auto tr = train(init_model(cfg), ex, tc, 1.0, 4);
  EXPECT_EQ(evaluate(tr.params, set).top1_accuracy, 1.0);
  EXPECT_LT(tr.epoch_loss_main.back(), tr.epoch_loss_main.front());
}

TEST(Train, OnlyBranchLossesLeaveMainModelUntouched) {
  const auto data = small_dataset(2, 320);
  ModelConfig cfg;
  cfg.dim_v = 6;
  cfg.dim_q = 6;
  cfg.hidden = 8;
  cfg.num_classes = 4;
  cfg.seed = 2;
  const Parameters p0 = init_model(cfg);
  TrainConfig tc;
  tc.batch_size = 32;
  tc.max_epoch = 10;  // 10 batches per epoch -> 100 steps
  tc.learning_rate = 0.01;
  tc.terms = {.main = false, .branches = true};
  const auto tr = train(p0, data.examples(), tc, 1.0, 1);
  EXPECT_TRUE(main_groups_equal(tr.params, p0));
  EXPECT_NE(tr.params.head_v, p0.head_v);
  EXPECT_NE(tr.params.head_q, p0.head_q);
}

TEST(Train, MainTrajectoryIgnoresAuxiliaryHeads) {
  const auto data = small_dataset(3, 200);
  ModelConfig cfg;
  cfg.dim_v = 6;
  cfg.dim_q = 6;
  cfg.hidden = 8;
  cfg.num_classes = 4;
  cfg.seed = 3;
  TrainConfig with_heads;
  with_heads.max_epoch = 5;
  with_heads.learning_rate = 0.01;
  TrainConfig without = with_heads;
  without.terms.branches = false;
  const auto a = train(init_model(cfg), data.examples(), with_heads, 10.0, 9);
  const auto b = train(init_model(cfg), data.examples(), without, 0.0, 9);
  EXPECT_TRUE(main_groups_equal(a.params, b.params));
  EXPECT_EQ(a.epoch_loss_main, b.epoch_loss_main);
}

TEST(Train, Deterministic) {
  const auto data = small_dataset(4, 100);
  ModelConfig cfg;
  cfg.dim_v = 6;
  cfg.dim_q = 6;
  cfg.hidden = 8;
  cfg.num_classes = 4;
  TrainConfig tc;
  tc.max_epoch = 3;
  EXPECT_EQ(train(init_model(cfg), data.examples(), tc, 1.0, 5).params,
            train(init_model(cfg), data.examples(), tc, 1.0, 5).params);
  EXPECT_NE(train(init_model(cfg), data.examples(), tc, 1.0, 5).params,
            train(init_model(cfg), data.examples(), tc, 1.0, 6).params);
}

double mean_distillation_gap(const Parameters& p, const std::vector<Sample>& held_out) {
  double s = 0.0;
  for (const auto& x : held_out) {
    const auto act = forward(p, x.x_v, x.x_q).first;
    s += bce(act.y_main, act.y_v);
  }
  return s / static_cast<double>(held_out.size());
}

TEST(Train, DistillationPullsBranchesTowardMainHead) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto data = small_dataset(100 + seed, 500);
    std::vector<Sample> held_out(data.samples.begin() + 400, data.samples.end());
    data.samples.resize(400);
    ModelConfig cfg;
    cfg.dim_v = 6;
    cfg.dim_q = 6;
    cfg.hidden = 16;
    cfg.num_classes = 4;
    cfg.seed = seed;
    TrainConfig tc;
    tc.max_epoch = 30;
    tc.learning_rate = 0.01;
    const auto distilled = train(init_model(cfg), data.examples(), tc, 10.0, seed);
    const auto plain = train(init_model(cfg), data.examples(), tc, 0.0, seed);
    if (mean_distillation_gap(distilled.params, held_out) < mean_distillation_gap(plain.params, held_out)) ++wins;
  }
  EXPECT_GE(wins, 3);
}

TEST(Checkpoint, RoundTripAndRejectsGarbage) {
  const Parameters p = init_model(small_config(77));
  std::stringstream ss;
  save_parameters(p, ss);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 8), "SMEMPAR1");
  std::size_t n_values = 0;
  for (const Affine* a : p.layers()) n_values += a->weight.size() + a->bias.size();
  EXPECT_EQ(bytes.size(), 8 + 4 * 8 + 8 * n_values);
  std::stringstream in(bytes);
  EXPECT_EQ(load_parameters(in), p);

  std::stringstream bad("NOTMAGIC");
  EXPECT_THROW(load_parameters(bad), FormatError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_parameters(truncated), FormatError);
}

TEST(Checksum, DetectsChanges) {
  Parameters p = init_model(small_config(1));
  const auto c = checksum(p);
  EXPECT_EQ(c, checksum(p));
  p.head_q.bias[0] += 1e-300;
  EXPECT_NE(c, checksum(p));
}

}  // namespace
}  // namespace smem
