#pragma once

/**
 * @file alloop.hpp
 * @brief Staged pool-based active learning.
 *
 * Stage 0 trains on the random initial labeled set and evaluates. Every
 * later stage first acquires b samples with the model from the previous
 * stage (score D_U, take the top b, reveal their labels, move them to D_L),
 * then trains on the enlarged D_L and evaluates, so the record of stage s
 * always describes a model trained on initial + s*b labels.
 */

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "smem/acquisition.hpp"
#include "smem/dataset.hpp"
#include "smem/error.hpp"
#include "smem/model.hpp"

namespace smem {

/// Stream-separated seed derivation so every consumer gets an independent generator.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
  return detail::splitmix64(detail::splitmix64(master ^ detail::splitmix64(stream)) + index);
}

namespace seed_stream {
inline constexpr std::uint64_t kPool = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kRandomScore = 3;
inline constexpr std::uint64_t kReinit = 4;
inline constexpr std::uint64_t kDataset = 5;
inline constexpr std::uint64_t kModel = 6;
}  // namespace seed_stream

struct Pool {
  std::set<SampleId> labeled;
  std::set<SampleId> unlabeled;

  bool operator==(const Pool&) const = default;
};

struct ALConfig {
  std::size_t initial_labeled = 250;
  std::size_t budget_per_stage = 250;
  std::size_t num_stages = 5;
  bool reinit_per_stage = false;  ///< default is warm start
  bool best_epoch = false;        ///< report the best per-epoch test score instead of the final one
  std::size_t initial_epochs = 0;  ///< epochs for stage 0; 0 means train.max_epoch
  TrainConfig train{};
  AcquisitionConfig acquisition{};
  std::uint64_t seed = 0;

  void validate(std::size_t pool_size) const {
    train.validate();
    acquisition.validate();
    if (initial_labeled < 1) throw InvalidConfig("initial_labeled >= 1");
    if (initial_labeled + num_stages * budget_per_stage > pool_size) {
      throw BudgetExceedsPool("initial_labeled + num_stages * budget_per_stage exceeds pool size " +
                              std::to_string(pool_size));
    }
  }
};

struct StageRecord {
  std::size_t stage = 0;
  std::size_t labeled_count = 0;
  double vqa_accuracy = 0.0;
  double top1_accuracy = 0.0;
  double train_loss_final = 0.0;
  double wall_time = 0.0;  ///< seconds
};

/// Seeded uniform sample without replacement of initial_labeled ids into D_L.
inline Pool init_pool(std::span<const SampleId> pool_ids, const ALConfig& cfg) {
  if (cfg.initial_labeled < 1) throw InvalidConfig("initial_labeled >= 1");
  if (cfg.initial_labeled > pool_ids.size()) {
    throw BudgetExceedsPool("initial_labeled exceeds pool size");
  }
  std::vector<SampleId> ids(pool_ids.begin(), pool_ids.end());
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(derive_seed(cfg.seed, seed_stream::kPool));
  std::shuffle(ids.begin(), ids.end(), rng);
  Pool pool;
  pool.labeled.insert(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cfg.initial_labeled));
  pool.unlabeled.insert(ids.begin() + static_cast<std::ptrdiff_t>(cfg.initial_labeled), ids.end());
  return pool;
}

/// Id -> position in a sample list.
class SampleIndex {
 public:
  SampleIndex() = default;
  explicit SampleIndex(std::span<const Sample> samples) : samples_(samples) {
    for (std::size_t i = 0; i < samples.size(); ++i) by_id_.emplace(samples[i].id, i);
  }

  [[nodiscard]] const Sample* find(SampleId id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &samples_[it->second];
  }
  [[nodiscard]] const Sample& at(SampleId id) const {
    const Sample* s = find(id);
    if (!s) throw UnknownId("unknown sample id " + std::to_string(id));
    return *s;
  }

 private:
  std::span<const Sample> samples_;
  std::unordered_map<SampleId, std::size_t> by_id_;
};

/// Reveals stored annotations for ids that are still unlabeled. Does not move them.
inline std::vector<const Sample*> oracle(std::span<const SampleId> ids, const Pool& pool,
                                         const SampleIndex& index) {
  std::vector<const Sample*> out;
  out.reserve(ids.size());
  for (SampleId id : ids) {
    if (pool.labeled.contains(id)) throw AlreadyLabeled("sample " + std::to_string(id) + " already labeled");
    if (!pool.unlabeled.contains(id)) throw UnknownId("sample " + std::to_string(id) + " not in pool");
    out.push_back(&index.at(id));
  }
  return out;
}

/// Scores every id with the outputs produced by predict(sample) -> OutputTriple.
template <typename Predict>
std::vector<ScoredSample> score_pool_with(std::span<const SampleId> ids, const SampleIndex& index,
                                     Predict&& predict, const AcquisitionConfig& cfg,
                                     std::uint64_t random_seed) {
  std::vector<ScoredSample> scored;
  scored.reserve(ids.size());
  for (SampleId id : ids) {
    if (cfg.strategy == Strategy::Random) {
      scored.push_back({id, score_random(id, random_seed)});
      continue;
    }
    const OutputTriple t = predict(index.at(id));
    scored.push_back({id, score(id, t, cfg, random_seed)});
  }
  return scored;
}

inline std::vector<ScoredSample> score_pool(std::span<const SampleId> ids, const SampleIndex& index,
                                            const Parameters& params, const AcquisitionConfig& cfg,
                                            std::uint64_t random_seed) {
  return score_pool_with(
      ids, index, [&params](const Sample& s) { return forward(params, s.x_v, s.x_q).second; }, cfg,
      random_seed);
}

/// Moves ids from D_U to D_L after checking them with the oracle.
inline void label(Pool& pool, std::span<const SampleId> ids, const SampleIndex& index) {
  (void)oracle(ids, pool, index);
  for (SampleId id : ids) {
    pool.unlabeled.erase(id);
    pool.labeled.insert(id);
  }
}

/// Everything an experiment carries from one stage to the next.
struct ExperimentState {
  const Dataset* dataset = nullptr;
  SampleIndex index;
  ModelConfig model;
  ALConfig al;
  Pool pool;
  Parameters params;
  std::size_t stage = 0;  ///< next stage to run
};

inline ExperimentState make_state(const Dataset& ds, const ModelConfig& model_cfg, const ALConfig& al_cfg) {
  model_cfg.validate();
  al_cfg.validate(ds.pool.size());
  if (model_cfg.dim_v != ds.dim_v || model_cfg.dim_q != ds.dim_q || model_cfg.num_classes != ds.num_classes) {
    throw InvalidConfig("model dims do not match dataset dims");
  }
  if (ds.test.empty()) throw EmptySplit("dataset has no test split");
  ExperimentState st;
  st.dataset = &ds;
  st.index = SampleIndex(ds.pool);
  st.model = model_cfg;
  st.al = al_cfg;
  std::vector<SampleId> ids;
  ids.reserve(ds.pool.size());
  for (const Sample& s : ds.pool) ids.push_back(s.id);
  st.pool = init_pool(ids, al_cfg);
  st.params = init_model(model_cfg);
  return st;
}

/// Trains on the current D_L (and evaluates) for the stage held in state.stage.
inline StageRecord train_and_evaluate(ExperimentState& st) {
  const auto t0 = std::chrono::steady_clock::now();
  if (st.al.reinit_per_stage && st.stage > 0) {
    ModelConfig fresh = st.model;
    fresh.seed = derive_seed(st.model.seed, seed_stream::kReinit, st.stage);
    st.params = init_model(fresh);
  }

  std::vector<Example> labeled;
  labeled.reserve(st.pool.labeled.size());
  for (SampleId id : st.pool.labeled) labeled.push_back(st.index.at(id).example());

  TrainConfig tc = st.al.train;
  if (st.stage == 0 && st.al.initial_epochs > 0) tc.max_epoch = st.al.initial_epochs;

  std::optional<Metrics> best;
  EpochCallback on_epoch;
  if (st.al.best_epoch) {
    on_epoch = [&](std::size_t, const Parameters& p, double) {
      const Metrics m = evaluate(p, st.dataset->test);
      if (!best || m.vqa_accuracy_mean > best->vqa_accuracy_mean) best = m;
    };
  }
  TrainResult tr = train(std::move(st.params), labeled, tc, st.model.lambda,
                         derive_seed(st.al.seed, seed_stream::kShuffle, st.stage), on_epoch);
  st.params = std::move(tr.params);

  const Metrics m = best ? *best : evaluate(st.params, st.dataset->test);
  StageRecord rec;
  rec.stage = st.stage;
  rec.labeled_count = st.pool.labeled.size();
  rec.vqa_accuracy = m.vqa_accuracy_mean;
  rec.top1_accuracy = m.top1_accuracy;
  rec.train_loss_final = tr.epoch_loss_main.back();
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

/// Scores D_U with the current model and labels the top b. Returns the selected ids.
inline std::vector<SampleId> acquire(ExperimentState& st) {
  const std::size_t b = st.al.budget_per_stage;
  if (st.pool.unlabeled.size() < b) throw BudgetExceedsPool("unlabeled pool smaller than budget");
  const std::vector<SampleId> candidates(st.pool.unlabeled.begin(), st.pool.unlabeled.end());
  const auto scored = score_pool(candidates, st.index, st.params, st.al.acquisition,
                                 derive_seed(st.al.seed, seed_stream::kRandomScore, st.stage));
  std::vector<SampleId> chosen = select_top_b(scored, b);
  label(st.pool, chosen, st.index);
  return chosen;
}

/// Runs the next stage: stage 0 only trains; later stages acquire, then train.
inline StageRecord run_stage(ExperimentState& st) {
  const auto t0 = std::chrono::steady_clock::now();
  if (st.stage > 0) acquire(st);
  StageRecord rec = train_and_evaluate(st);
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ++st.stage;
  return rec;
}

using RecordSink = std::function<void(const StageRecord&)>;

/// Stage 0 plus num_stages acquisition stages on an already generated dataset.
inline std::vector<StageRecord> run_experiment(const ALConfig& al_cfg, const Dataset& ds,
                                               const ModelConfig& model_cfg, const RecordSink& sink = {}) {
  ExperimentState st = make_state(ds, model_cfg, al_cfg);
  std::vector<StageRecord> records;
  records.reserve(al_cfg.num_stages + 1);
  for (std::size_t s = 0; s <= al_cfg.num_stages; ++s) {
    records.push_back(run_stage(st));
    if (sink) sink(records.back());
  }
  return records;
}

inline std::vector<StageRecord> run_experiment(const ALConfig& al_cfg, const DatasetConfig& dataset_cfg,
                                               const ModelConfig& model_cfg, const RecordSink& sink = {}) {
  const Dataset ds = generate(dataset_cfg);
  return run_experiment(al_cfg, ds, model_cfg, sink);
}

}  // namespace smem
