#pragma once

/**
 * @file experiment.hpp
 * @brief Experiment specs, the (strategy x seed) grid runner and result files.
 *
 * A spec is a JSON document:
 *
 *   {
 *     "dataset": { "pool_size", "test_size", "num_classes", "dim_v", "dim_q",
 *                  "mode_fractions": [visual_only, question_only, joint, noise],
 *                  "label_noise", "signal_scale", "seed" },
 *     "model":   { "hidden", "lambda" },
 *     "al":      { "initial_labeled", "budget_per_stage", "num_stages",
 *                  "reinit_per_stage", "best_epoch", "initial_epochs",
 *                  "train": { "learning_rate", "max_epoch", "batch_size",
 *                             "optimizer": "adamax" | "sgd",
 *                             "adamax_betas": [b1, b2], "adamax_eps" },
 *                  "acquisition": { "alpha", "beta", "gamma",
 *                                   "kl_mode": "infinite" | "smoothed" } },
 *     "strategies": ["smem_full", "random", ...],
 *     "seeds": [1, 2, 3],
 *     "output_dir": "results"
 *   }
 *
 * Every key except "strategies" and "seeds" is optional; unknown keys are errors.
 */

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "smem/alloop.hpp"

namespace smem {

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(what) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what) {}
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& what) : Error(what) {}
};

class RunError : public Error {
 public:
  explicit RunError(const std::string& what) : Error(what) {}
};

struct ExperimentSpec {
  DatasetConfig dataset{};
  ModelConfig model{};
  ALConfig al{};
  std::vector<Strategy> strategies;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir = "results";

  void validate() const {
    try {
      dataset.validate();
      model.validate();
      al.validate(dataset.pool_size);
    } catch (const Error& e) {
      throw ValidationError(e.what());
    }
    if (strategies.empty()) throw ValidationError("strategies must be non-empty; registry: " + registry_listing());
    if (seeds.empty()) throw ValidationError("seeds must be non-empty");
    std::set<std::uint64_t> distinct(seeds.begin(), seeds.end());
    if (distinct.size() != seeds.size()) throw ValidationError("seeds must be distinct");
    std::set<Strategy> distinct_strategies(strategies.begin(), strategies.end());
    if (distinct_strategies.size() != strategies.size()) throw ValidationError("strategies must be distinct");
  }
};

namespace detail {

/// Reads an object's keys, remembers which were used and rejects the rest.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ParseError("'" + display() + "' must be an object");
  }

  template <typename T>
  void get(std::string_view key, T& out) {
    const std::string k(key);
    seen_.insert(k);
    auto it = j_.find(k);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ParseError("key '" + qualified(k) + "' has the wrong type");
    }
  }

  [[nodiscard]] const nlohmann::json* child(std::string_view key) {
    const std::string k(key);
    seen_.insert(k);
    auto it = j_.find(k);
    return it == j_.end() ? nullptr : &*it;
  }

  [[nodiscard]] std::string qualified(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ParseError("unknown key '" + qualified(it.key()) + "'");
    }
  }

 private:
  [[nodiscard]] std::string display() const { return path_.empty() ? "<root>" : path_; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string line_context(std::string_view text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

/// Parses and validates a spec. Throws ParseError for syntax/type/unknown-key problems and
/// ValidationError for values that violate an invariant.
inline ExperimentSpec parse_spec(std::string_view text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("spec is not valid JSON at " + detail::line_context(text, e.byte) + ": " + e.what());
  }

  ExperimentSpec spec;
  detail::ObjectReader top(root, "");

  if (const auto* d = top.child("dataset")) {
    detail::ObjectReader r(*d, "dataset");
    auto& c = spec.dataset;
    r.get("pool_size", c.pool_size);
    r.get("test_size", c.test_size);
    r.get("num_classes", c.num_classes);
    r.get("dim_v", c.dim_v);
    r.get("dim_q", c.dim_q);
    r.get("mode_fractions", c.mode_fractions);
    r.get("label_noise", c.label_noise);
    r.get("signal_scale", c.signal_scale);
    r.get("seed", c.seed);
    r.finish();
  }

  if (const auto* m = top.child("model")) {
    detail::ObjectReader r(*m, "model");
    r.get("hidden", spec.model.hidden);
    r.get("lambda", spec.model.lambda);
    r.finish();
  }
  spec.model.dim_v = spec.dataset.dim_v;
  spec.model.dim_q = spec.dataset.dim_q;
  spec.model.num_classes = spec.dataset.num_classes;

  if (const auto* a = top.child("al")) {
    detail::ObjectReader r(*a, "al");
    auto& c = spec.al;
    r.get("initial_labeled", c.initial_labeled);
    r.get("budget_per_stage", c.budget_per_stage);
    r.get("num_stages", c.num_stages);
    r.get("reinit_per_stage", c.reinit_per_stage);
    r.get("best_epoch", c.best_epoch);
    r.get("initial_epochs", c.initial_epochs);
    if (const auto* t = r.child("train")) {
      detail::ObjectReader tr(*t, "al.train");
      auto& tc = c.train;
      tr.get("learning_rate", tc.learning_rate);
      tr.get("max_epoch", tc.max_epoch);
      tr.get("batch_size", tc.batch_size);
      std::string opt = tc.optimizer == OptimizerKind::SGD ? "sgd" : "adamax";
      tr.get("optimizer", opt);
      if (opt == "adamax") {
        tc.optimizer = OptimizerKind::Adamax;
      } else if (opt == "sgd") {
        tc.optimizer = OptimizerKind::SGD;
      } else {
        throw ValidationError("al.train.optimizer must be 'adamax' or 'sgd'");
      }
      std::array<double, 2> betas{tc.adamax_beta1, tc.adamax_beta2};
      tr.get("adamax_betas", betas);
      tc.adamax_beta1 = betas[0];
      tc.adamax_beta2 = betas[1];
      tr.get("adamax_eps", tc.adamax_eps);
      tr.finish();
    }
    if (const auto* q = r.child("acquisition")) {
      detail::ObjectReader ar(*q, "al.acquisition");
      auto& ac = c.acquisition;
      ar.get("alpha", ac.alpha);
      ar.get("beta", ac.beta);
      ar.get("gamma", ac.gamma);
      std::string kl = ac.kl_mode == KlMode::Smoothed ? "smoothed" : "infinite";
      ar.get("kl_mode", kl);
      if (kl == "infinite") {
        ac.kl_mode = KlMode::Infinite;
      } else if (kl == "smoothed") {
        ac.kl_mode = KlMode::Smoothed;
      } else {
        throw ValidationError("al.acquisition.kl_mode must be 'infinite' or 'smoothed'");
      }
      ar.finish();
    }
    r.finish();
  }

  std::vector<std::string> names;
  top.get("strategies", names);
  for (const auto& n : names) {
    try {
      spec.strategies.push_back(strategy_from_string(n));
    } catch (const InvalidConfig& e) {
      throw ValidationError(e.what());
    }
  }
  top.get("seeds", spec.seeds);
  std::string out_dir = spec.output_dir.string();
  top.get("output_dir", out_dir);
  spec.output_dir = out_dir;
  top.finish();

  spec.validate();
  return spec;
}

/// "1,2,3" -> {1, 2, 3}; used for the seed-list environment override.
inline std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  std::vector<std::uint64_t> seeds;
  std::string_view rest = text;
  while (!rest.empty()) {
    const auto pos = rest.find(',');
    std::string_view tok = rest.substr(0, pos);
    while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
    while (!tok.empty() && tok.back() == ' ') tok.remove_suffix(1);
    std::uint64_t v = 0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
      throw ValidationError("bad seed '" + std::string(tok) + "' in seed list");
    }
    seeds.push_back(v);
    if (pos == std::string_view::npos) break;
    rest.remove_prefix(pos + 1);
  }
  if (seeds.empty()) throw ValidationError("seed list is empty");
  return seeds;
}

// ---------------------------------------------------------------------------
// Results

struct ResultRow {
  std::string strategy;
  std::uint64_t seed = 0;
  std::size_t stage = 0;
  std::size_t labeled_count = 0;
  double vqa_accuracy = 0.0;
  double top1_accuracy = 0.0;
};

struct ResultTable {
  std::vector<ResultRow> rows;
};

inline constexpr std::string_view kCsvHeader =
    "strategy,seed,stage,labeled_count,vqa_accuracy,top1_accuracy";

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.7g", v);
  return buf;
}

inline void write_csv(const ResultTable& table, std::ostream& os) {
  os << kCsvHeader << '\n';
  for (const auto& r : table.rows) {
    os << r.strategy << ',' << r.seed << ',' << r.stage << ',' << r.labeled_count << ','
       << format_real(r.vqa_accuracy) << ',' << format_real(r.top1_accuracy) << '\n';
  }
}

inline ResultTable read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw SchemaError("empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader) throw SchemaError("unexpected CSV header '" + line + "'");
  ResultTable t;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw SchemaError("CSV line " + std::to_string(line_no) + ": expected 6 fields");
    try {
      std::size_t used = 0;
      ResultRow r;
      r.strategy = f[0];
      r.seed = std::stoull(f[1], &used);
      if (used != f[1].size()) throw std::invalid_argument("seed");
      r.stage = std::stoull(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("stage");
      r.labeled_count = std::stoull(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument("labeled_count");
      r.vqa_accuracy = std::stod(f[4], &used);
      if (used != f[4].size()) throw std::invalid_argument("vqa_accuracy");
      r.top1_accuracy = std::stod(f[5], &used);
      if (used != f[5].size()) throw std::invalid_argument("top1_accuracy");
      t.rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw SchemaError("CSV line " + std::to_string(line_no) + ": malformed field");
    }
  }
  if (t.rows.empty()) throw SchemaError("CSV has no data rows");
  return t;
}

struct SummaryRow {
  std::string strategy;
  std::size_t stage = 0;
  std::size_t runs = 0;
  std::size_t labeled_count = 0;
  double vqa_mean = 0.0;
  double vqa_stddev = 0.0;  ///< sample stddev (n - 1); 0 for a single run
  double top1_mean = 0.0;
  double top1_stddev = 0.0;
};

inline std::pair<double, double> mean_stddev(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

/// Aggregates over seeds, ordered by strategy name then stage.
inline std::vector<SummaryRow> summarize(const ResultTable& table) {
  if (table.rows.empty()) throw SchemaError("no rows to summarize");
  struct Acc {
    std::vector<double> vqa, top1;
    std::size_t labeled = 0;
  };
  std::map<std::pair<std::string, std::size_t>, Acc> groups;
  for (const auto& r : table.rows) {
    auto& g = groups[{r.strategy, r.stage}];
    g.vqa.push_back(r.vqa_accuracy);
    g.top1.push_back(r.top1_accuracy);
    g.labeled = r.labeled_count;
  }
  std::vector<SummaryRow> out;
  for (const auto& [key, acc] : groups) {
    SummaryRow s;
    s.strategy = key.first;
    s.stage = key.second;
    s.runs = acc.vqa.size();
    s.labeled_count = acc.labeled;
    std::tie(s.vqa_mean, s.vqa_stddev) = mean_stddev(acc.vqa);
    std::tie(s.top1_mean, s.top1_stddev) = mean_stddev(acc.top1);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<SummaryRow> summarize(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw SchemaError("cannot open " + csv_path.string());
  return summarize(read_csv(in));
}

inline void print_summary(const std::vector<SummaryRow>& rows, std::ostream& os) {
  os << std::left << std::setw(16) << "strategy" << std::right << std::setw(6) << "stage" << std::setw(6)
     << "runs" << std::setw(9) << "labeled" << std::setw(12) << "vqa_mean" << std::setw(12) << "vqa_std"
     << std::setw(12) << "top1_mean" << std::setw(12) << "top1_std" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(16) << r.strategy << std::right << std::setw(6) << r.stage << std::setw(6)
       << r.runs << std::setw(9) << r.labeled_count << std::setw(12) << format_real(r.vqa_mean)
       << std::setw(12) << format_real(r.vqa_stddev) << std::setw(12) << format_real(r.top1_mean)
       << std::setw(12) << format_real(r.top1_stddev) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Runner

/// Per-seed configs. The dataset, model init and AL streams all derive from the master seed.
struct SeededConfigs {
  DatasetConfig dataset;
  ModelConfig model;
  ALConfig al;
};

inline SeededConfigs configs_for_seed(const ExperimentSpec& spec, std::uint64_t master_seed) {
  SeededConfigs c{spec.dataset, spec.model, spec.al};
  c.dataset.seed = derive_seed(master_seed, seed_stream::kDataset, spec.dataset.seed);
  c.model.seed = derive_seed(master_seed, seed_stream::kModel);
  c.al.seed = master_seed;
  return c;
}

inline nlohmann::json spec_to_json(const ExperimentSpec& spec) {
  const auto& d = spec.dataset;
  const auto& a = spec.al;
  nlohmann::json strategies = nlohmann::json::array();
  for (Strategy s : spec.strategies) strategies.push_back(std::string(to_string(s)));
  return {
      {"dataset",
       {{"pool_size", d.pool_size},
        {"test_size", d.test_size},
        {"num_classes", d.num_classes},
        {"dim_v", d.dim_v},
        {"dim_q", d.dim_q},
        {"mode_fractions", d.mode_fractions},
        {"label_noise", d.label_noise},
        {"signal_scale", d.signal_scale},
        {"seed", d.seed}}},
      {"model", {{"hidden", spec.model.hidden}, {"lambda", spec.model.lambda}}},
      {"al",
       {{"initial_labeled", a.initial_labeled},
        {"budget_per_stage", a.budget_per_stage},
        {"num_stages", a.num_stages},
        {"reinit_per_stage", a.reinit_per_stage},
        {"best_epoch", a.best_epoch},
        {"initial_epochs", a.initial_epochs},
        {"train",
         {{"learning_rate", a.train.learning_rate},
          {"max_epoch", a.train.max_epoch},
          {"batch_size", a.train.batch_size},
          {"optimizer", a.train.optimizer == OptimizerKind::SGD ? "sgd" : "adamax"},
          {"adamax_betas", {a.train.adamax_beta1, a.train.adamax_beta2}},
          {"adamax_eps", a.train.adamax_eps}}},
        {"acquisition",
         {{"alpha", a.acquisition.alpha},
          {"beta", a.acquisition.beta},
          {"gamma", a.acquisition.gamma},
          {"kl_mode", a.acquisition.kl_mode == KlMode::Smoothed ? "smoothed" : "infinite"}}}}},
      {"strategies", strategies},
      {"seeds", spec.seeds},
      {"output_dir", spec.output_dir.string()},
  };
}

inline nlohmann::json record_to_json(const StageRecord& r) {
  return {{"stage", r.stage},
          {"labeled_count", r.labeled_count},
          {"vqa_accuracy", r.vqa_accuracy},
          {"top1_accuracy", r.top1_accuracy},
          {"train_loss_final", r.train_loss_final},
          {"wall_time", r.wall_time}};
}

struct RunOptions {
  std::size_t workers = 1;
  /// Receives (strategy, seed, record) as stages finish; calls are serialized.
  std::function<void(std::string_view, std::uint64_t, const StageRecord&)> on_record;
};

namespace detail {

inline void write_file_atomically(const std::filesystem::path& target, const std::string& contents) {
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RunError("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw RunError("failed writing " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw RunError("cannot move results into " + target.string());
  }
}

inline void prepare_output_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "runs", ec);
  if (ec) throw RunError("cannot create output directory " + dir.string() + ": " + ec.message());
  const auto probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw RunError("output directory " + dir.string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

}  // namespace detail

inline constexpr std::string_view kCsvFileName = "results.csv";

/// Runs every (strategy, seed) experiment, writes runs/<strategy>-seed<seed>.json as runs finish
/// and results.csv once everything succeeded. Rows are ordered by strategy (spec order), seed, stage.
inline ResultTable run(const ExperimentSpec& spec, const RunOptions& opts = {}) {
  spec.validate();
  detail::prepare_output_dir(spec.output_dir);

  std::vector<Dataset> datasets;
  std::vector<SeededConfigs> seeded;
  for (std::uint64_t s : spec.seeds) {
    seeded.push_back(configs_for_seed(spec, s));
    datasets.push_back(generate(seeded.back().dataset));
  }

  struct Job {
    std::size_t strategy_idx;
    std::size_t seed_idx;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < spec.strategies.size(); ++i) {
    for (std::size_t j = 0; j < spec.seeds.size(); ++j) jobs.push_back({i, j});
  }
  std::vector<std::vector<StageRecord>> results(jobs.size());
  std::vector<std::string> failures;
  std::mutex sink_mutex;
  std::atomic<std::size_t> next{0};
  const nlohmann::json spec_json = spec_to_json(spec);

  auto worker = [&]() {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      const Job job = jobs[k];
      const Strategy strat = spec.strategies[job.strategy_idx];
      const std::uint64_t seed = spec.seeds[job.seed_idx];
      const std::string name(to_string(strat));
      try {
        SeededConfigs cfg = seeded[job.seed_idx];
        cfg.al.acquisition.strategy = strat;
        results[k] = run_experiment(cfg.al, datasets[job.seed_idx], cfg.model, [&](const StageRecord& r) {
          std::lock_guard lock(sink_mutex);
          if (opts.on_record) opts.on_record(name, seed, r);
        });
        nlohmann::json doc = {{"strategy", name}, {"seed", seed}, {"spec", spec_json}};
        doc["records"] = nlohmann::json::array();
        for (const auto& r : results[k]) doc["records"].push_back(record_to_json(r));
        std::lock_guard lock(sink_mutex);
        detail::write_file_atomically(
            spec.output_dir / "runs" / (name + "-seed" + std::to_string(seed) + ".json"), doc.dump(2) + "\n");
      } catch (const std::exception& e) {
        std::lock_guard lock(sink_mutex);
        failures.push_back(name + " seed " + std::to_string(seed) + ": " + e.what());
      }
    }
  };

  const std::size_t n_workers = std::max<std::size_t>(1, std::min(opts.workers, jobs.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (!failures.empty()) {
    std::string msg = std::to_string(failures.size()) + " run(s) failed";
    for (const auto& f : failures) msg += "\n  " + f;
    throw RunError(msg);
  }

  ResultTable table;
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    for (const auto& r : results[k]) {
      table.rows.push_back({std::string(to_string(spec.strategies[jobs[k].strategy_idx])),
                            spec.seeds[jobs[k].seed_idx], r.stage, r.labeled_count, r.vqa_accuracy,
                            r.top1_accuracy});
    }
  }
  std::ostringstream csv;
  write_csv(table, csv);
  detail::write_file_atomically(spec.output_dir / kCsvFileName, csv.str());
  return table;
}

}  // namespace smem
