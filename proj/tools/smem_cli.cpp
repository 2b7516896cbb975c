// Command-line front-end: run an experiment grid from a JSON spec, or summarize a results CSV.
//
// Exit codes: 0 success, 1 run failure, 2 spec/usage failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "smem/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRunFailure = 1;
constexpr int kExitSpecFailure = 2;

constexpr const char* kSeedEnv = "SMEM_SEEDS";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pool-based active learning with single-modal entropic acquisition"};
  std::string spec_path;
  std::string out_dir;
  std::size_t workers = 1;
  std::string summarize_path;
  bool quiet = false;
  app.add_option("--spec", spec_path, "Experiment spec (JSON)");
  app.add_option("--out", out_dir, "Output directory (overrides the spec's output_dir)");
  app.add_option("--workers", workers, "Concurrent (strategy, seed) runs")->check(CLI::PositiveNumber);
  app.add_option("--summarize", summarize_path, "Print per-strategy mean/stddev per stage of a results CSV");
  app.add_flag("--quiet", quiet, "Do not stream stage records to stderr");
  app.footer(std::string("Environment: ") + kSeedEnv + "=1,2,3 overrides the spec's seed list.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitSpecFailure;
  }

  if (!summarize_path.empty()) {
    try {
      smem::print_summary(smem::summarize(summarize_path), std::cout);
      return kExitOk;
    } catch (const smem::Error& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitSpecFailure;
    }
  }

  if (spec_path.empty()) {
    std::cerr << "error: one of --spec or --summarize is required\n" << app.help();
    return kExitSpecFailure;
  }

  smem::ExperimentSpec spec;
  try {
    std::ifstream in(spec_path);
    if (!in) throw smem::ParseError("cannot open spec file " + spec_path);
    std::stringstream buf;
    buf << in.rdbuf();
    spec = smem::parse_spec(buf.str());
    if (const char* env = std::getenv(kSeedEnv); env != nullptr && *env != '\0') {
      spec.seeds = smem::parse_seed_list(env);
    }
    if (!out_dir.empty()) spec.output_dir = out_dir;
    spec.validate();
  } catch (const smem::Error& e) {
    std::cerr << "spec error: " << e.what() << '\n';
    return kExitSpecFailure;
  }

  smem::RunOptions opts;
  opts.workers = workers;
  if (!quiet) {
    opts.on_record = [](std::string_view strategy, std::uint64_t seed, const smem::StageRecord& r) {
      std::cerr << strategy << " seed=" << seed << " stage=" << r.stage << " labeled=" << r.labeled_count
                << " vqa=" << smem::format_real(r.vqa_accuracy) << " top1=" << smem::format_real(r.top1_accuracy)
                << " loss=" << smem::format_real(r.train_loss_final) << '\n';
    };
  }
  try {
    const auto table = smem::run(spec, opts);
    std::cout << "wrote " << table.rows.size() << " rows to "
              << (spec.output_dir / smem::kCsvFileName).string() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    return kExitRunFailure;
  }
  return kExitOk;
}
