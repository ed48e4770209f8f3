// ebmssl: data generation, single runs, grids, reports and the self-test.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ebmssl/error.hpp"
#include "ebmssl/harness.hpp"
#include "ebmssl/param_store.hpp"

namespace fs = std::filesystem;
using namespace ebmssl;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

harness::Config load_config(const Globals& g) {
  if (g.config.empty()) return {};
  return harness::Config::load(g.config);
}

harness::ExperimentGrid grid_for(const Globals& g) {
  harness::Config cfg = load_config(g);
  if (g.seed) cfg.set("grid", "global_seed", std::to_string(*g.seed));
  if (g.out) cfg.set("grid", "out", *g.out);
  return harness::grid_from_config(cfg);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string metrics_line(const pipe::Metrics& m) {
  char buf[200];
  if (std::isnan(m.span_f1)) {
    std::snprintf(buf, sizeof buf, "accuracy %.4f", m.accuracy);
  } else {
    std::snprintf(buf, sizeof buf, "accuracy %.4f precision %.4f recall %.4f span_f1 %.4f", m.accuracy,
                  m.precision, m.recall, m.span_f1);
  }
  return buf;
}

int cmd_gen_data(const Globals& g, const std::string& split_name, std::size_t n) {
  const auto grid = grid_for(g);
  const auto& task = grid.task;
  const fs::path out = g.out ? fs::path(*g.out) : fs::path("data");
  fs::create_directories(out);
  const std::uint64_t seed = grid.global_seed;
  const fs::path file = out / (task.id + "_" + split_name + ".txt");
  if (task.modality == pipe::Modality::kContinuous) {
    const std::size_t per_class = n > 0 ? n : task.per_class_pool;
    data::save_dataset(file, data::gen_mixture(task.mixture, per_class, seed));
  } else {
    data::save_dataset(file, data::gen_hmm(task.hmm, n > 0 ? n : task.label_pool, seed));
  }
  std::cout << "wrote " << file.string() << '\n';
  return 0;
}

struct TrainArgs {
  std::string method = "supervised";
  double proportion = 0.1;
  double ratio = 50;
  std::size_t run = 0;
  std::optional<double> lambda;
  std::size_t checkpoint_every = 0;
  bool resume = false;
  std::size_t stop_after = 0;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  const auto grid = grid_for(g);
  const auto spec = harness::MethodSpec::parse(a.method);
  pipe::TrainConfig cfg = grid.train;
  cfg.method = spec.method;
  cfg.seed = harness::run_seed(grid.global_seed, a.run);
  if (spec.unsup_weight) cfg.unsup_weight = *spec.unsup_weight;
  if (a.lambda) cfg.unsup_weight = *a.lambda;
  const fs::path out = g.out ? fs::path(*g.out) : fs::path("run");
  fs::create_directories(out);
  cfg.checkpoint_every = a.checkpoint_every;
  cfg.resume = a.resume;
  cfg.stop_after = a.stop_after;
  if (a.checkpoint_every > 0 || a.resume || a.stop_after > 0) cfg.checkpoint = out / "run.ckpt";

  const auto data = harness::make_run_data(grid.task, a.proportion, a.ratio, grid.global_seed, a.run);
  const auto result = harness::run_single(grid.task, data, cfg);
  {
    std::ofstream log(out / "log.csv");
    pipe::write_log_csv(log, result.model.log);
  }
  if (!result.model.complete) {
    std::cout << "stopped after step " << result.model.steps_done << " of " << cfg.total_steps() << '\n';
    return 1;
  }
  save_checkpoint(out / "model.ckpt", result.model.params);
  const std::string text = "test " + metrics_line(result.test) + "\ndev " + metrics_line(result.dev) + '\n';
  write_text(out / "metrics.txt", text);
  std::cout << text;
  return 0;
}

int cmd_sweep(const Globals& g) {
  const auto grid = grid_for(g);
  const auto summary = harness::run_grid(grid);
  std::cout << "trained " << summary.trained << ", reused " << summary.reused << ", skipped " << summary.skipped
            << ", failed " << summary.failures.size() << '\n';
  for (const auto& f : summary.failures) std::cerr << "failed: " << f << '\n';
  if (!summary.table.rows.empty()) {
    const auto files = harness::report(summary.table);
    harness::write_report(files, grid.out_dir);
    std::cout << files.table3 << '\n' << files.table4;
  }
  return summary.failures.empty() ? 0 : 1;
}

int cmd_report(const Globals& g, const std::string& results, const std::string& metric) {
  const fs::path out = g.out ? fs::path(*g.out) : fs::path("results");
  const fs::path in_path = results.empty() ? out / "results.csv" : fs::path(results);
  std::ifstream in(in_path);
  if (!in) throw Error("cannot read " + in_path.string());
  harness::ResultTable table{harness::read_results_csv(in)};
  const auto files = harness::report(table, metric);
  harness::write_report(files, out);
  std::cout << files.table3 << '\n' << files.table4;
  return 0;
}

int cmd_selftest() {
  const auto verdicts = harness::selftest(&std::cout);
  std::size_t failed = 0;
  double seconds = 0.0;
  for (const auto& v : verdicts) {
    failed += v.pass ? 0 : 1;
    seconds += v.seconds;
  }
  std::printf("%zu checks, %zu failed, %.1f s\n", verdicts.size(), failed, seconds);
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised learning with energy-based models"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--config", g.config, "config file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "global seed");
  auto* out_opt = app.add_option("--out", out, "output directory");

  auto* gen = app.add_subcommand("gen-data", "write a generated dataset");
  std::string split_name = "pool";
  std::size_t n = 0;
  gen->add_option("--name", split_name, "file name suffix");
  gen->add_option("-n,--size", n, "per-class points (mixture) or sentences (hmm); 0 = task pool size");

  auto* train = app.add_subcommand("train", "train one method on one cell");
  TrainArgs ta;
  train->add_option("--method", ta.method, "supervised | pretrain | joint | joint:<lambda>");
  train->add_option("--proportion", ta.proportion, "labeled fraction of the pool");
  train->add_option("--ratio", ta.ratio, "unlabeled / labeled ratio");
  train->add_option("--run", ta.run, "run index");
  train->add_option("--lambda", ta.lambda, "unsupervised weight for joint training");
  train->add_option("--checkpoint-every", ta.checkpoint_every, "checkpoint interval in steps");
  train->add_flag("--resume", ta.resume, "continue from <out>/run.ckpt");
  train->add_option("--stop-after", ta.stop_after, "stop after this many steps");

  auto* sweep = app.add_subcommand("sweep", "run a grid; completed runs are reused");
  auto* rep = app.add_subcommand("report", "tables from a results CSV");
  std::string results, metric;
  rep->add_option("--results", results, "results CSV (default <out>/results.csv)");
  rep->add_option("--metric", metric, "metric name (default: primary metric per task)");

  auto* self = app.add_subcommand("selftest", "run the invariant checks");

  app.fallthrough();
  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) g.seed = seed;
  if (*out_opt) g.out = out;

  try {
    if (*gen) return cmd_gen_data(g, split_name, n);
    if (*train) return cmd_train(g, ta);
    if (*sweep) return cmd_sweep(g);
    if (*rep) return cmd_report(g, results, metric);
    if (*self) return cmd_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
