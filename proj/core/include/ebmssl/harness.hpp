#pragma once

// Experiment grids over labeling proportion x U/L ratio x method x seed.
//
// Results CSV: task,proportion,ul_ratio,method,seed,metric,value
// with metric values in percent and proportion as a fraction. Metric names
// are accuracy, span_f1 (BIO tasks only) and error_rate (100 - primary).
//
// Config files are INI-like:
//   # comment
//   [section]
//   key = value
// Sections: task, train, sampler, nce, grid. See README.md for every key.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ebmssl/data.hpp"
#include "ebmssl/pipelines.hpp"

namespace ebmssl::harness {

class Config {
 public:
  static Config parse(std::istream& in);
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& section, const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                  const std::vector<double>& fallback) const;
  std::vector<std::string> get_strings(const std::string& section, const std::string& key,
                                       const std::vector<std::string>& fallback) const;
  void set(const std::string& section, const std::string& key, const std::string& value);

  // Throws InvalidArgument naming the first key not in `allowed`.
  void check_keys(const std::map<std::string, std::vector<std::string>>& allowed) const;
  const std::map<std::string, std::map<std::string, std::string>>& sections() const { return sections_; }

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

// Synthetic task: generator settings plus pool sizes.
struct TaskSpec {
  std::string id = "mixture";  // mixture | hmm | hmm_bio
  pipe::Modality modality = pipe::Modality::kContinuous;
  data::MixtureDescriptor mixture;
  std::size_t per_class_pool = 250;  // mixture label pool per class
  data::HmmDescriptor hmm;
  std::size_t label_pool = 500;  // hmm label pool (sentences)
  std::size_t test_size = 2000;
  std::size_t dev_size = 400;
  bool stratified = true;

  static TaskSpec mixture_task();
  static TaskSpec hmm_task();
  static TaskSpec hmm_bio_task();
  static TaskSpec by_id(const std::string& id);
  std::string metric_name() const;  // accuracy or span_f1
};

// Default training settings per task.
pipe::TrainConfig default_train_config(const TaskSpec& task);

struct RunData {
  std::optional<data::ContinuousSplit> mixture;
  std::optional<data::ContinuousDataset> mixture_test;
  std::optional<data::ContinuousDataset> mixture_dev;
  std::optional<data::SequenceSplit> seq;
  std::optional<data::SequenceDataset> seq_test;
  std::optional<data::SequenceDataset> seq_dev;
};

// Data for run index `run`: every method and ratio at a given proportion
// sees the same labeled set, and larger ratios see supersets of the
// unlabeled pools of smaller ones.
RunData make_run_data(const TaskSpec& task, double proportion, double ul_ratio, std::uint64_t global_seed,
                      std::size_t run);
std::uint64_t run_seed(std::uint64_t global_seed, std::size_t run);

struct RunOutcome {
  pipe::Metrics test;
  pipe::Metrics dev;
  pipe::TrainedModel model;
};

RunOutcome run_single(const TaskSpec& task, const RunData& data, const pipe::TrainConfig& cfg);

struct ResultRow {
  std::string task;
  double proportion = 0.0;
  double ul_ratio = 0.0;
  std::string method;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample std; NaN when n < 2
  std::size_t n = 0;
};

// Mean and sample (n - 1) standard deviation.
Aggregate aggregate(const std::vector<double>& values);

struct ResultTable {
  std::vector<ResultRow> rows;

  std::vector<double> values(const std::string& task, double proportion, double ul_ratio, const std::string& method,
                             const std::string& metric) const;
  std::optional<Aggregate> cell(const std::string& task, double proportion, double ul_ratio,
                                const std::string& method, const std::string& metric) const;
};

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_results_csv(std::istream& in);
std::string format_double(double v);

// Method names in a grid: supervised, pretrain, joint, or joint:<lambda>.
struct MethodSpec {
  std::string name;
  pipe::Method method = pipe::Method::kSupervised;
  std::optional<double> unsup_weight;
  static MethodSpec parse(const std::string& s);
};

struct ExperimentGrid {
  TaskSpec task;
  std::vector<double> proportions{0.02, 0.10, 1.00};
  std::vector<double> ratios{0, 50, 250, 500};
  std::vector<std::string> methods{"supervised", "pretrain", "joint"};
  std::size_t seeds = 10;
  pipe::TrainConfig train;
  std::uint64_t global_seed = 0;
  std::size_t workers = 1;
  std::filesystem::path out_dir = "results";

  void validate() const;
};

// Task, training and grid settings from a config (defaults for absent keys).
ExperimentGrid grid_from_config(const Config& cfg);
pipe::TrainConfig train_config_from(const Config& cfg, const TaskSpec& task);
TaskSpec task_from_config(const Config& cfg);

struct GridSummary {
  ResultTable table;
  std::size_t trained = 0;  // runs executed now
  std::size_t reused = 0;   // runs read back from completed markers
  std::size_t skipped = 0;  // non-supervised methods at U/L = 0
  std::vector<std::string> failures;
};

// Runs every proportion x ratio x method x seed cell. Each finished run
// leaves <out>/runs/<key>.csv and a <key>.done marker; runs with a marker
// are read back instead of retrained. <out>/results.csv is rewritten from
// all run files in grid order at the end.
GridSummary run_grid(const ExperimentGrid& grid);

// Percent reduction of the error 100 - metric. Throws at baseline 100.
double relative_error_reduction(double baseline, double improved);

// Relative error reduction of `joint` over `baseline` at (proportion, ratio)
// from cell means. The supervised baseline is taken at U/L = 0 when present.
std::optional<double> improvement(const ResultTable& table, const std::string& task, double proportion,
                                  double ul_ratio, const std::string& joint, const std::string& baseline,
                                  const std::string& metric);

struct ReportFiles {
  std::string table3;  // mean +- std per method x ratio, columns = proportions
  std::string table4;  // relative error reduction, joint over sup. and over pre.
  std::string curve_csv;
};

ReportFiles report(const ResultTable& table, const std::string& metric = "");
void write_report(const ReportFiles& files, const std::filesystem::path& dir);

struct Verdict {
  std::string id;  // "<module>.<n>"
  std::string property;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

struct SelftestCheck {
  std::string id;
  std::string property;
  std::function<std::string()> run;  // throws or returns a failure message; "" on success
};

// One check per module invariant.
const std::vector<SelftestCheck>& selftest_registry();
// Number of invariants each module declares.
const std::map<std::string, std::size_t>& declared_invariants();
std::vector<Verdict> selftest(std::ostream* progress = nullptr);

}  // namespace ebmssl::harness
