#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ebmssl/error.hpp"
#include "ebmssl/harness.hpp"

using namespace ebmssl;
using harness::ResultRow;

namespace {

// Tagging results: per proportion, the supervised value then (pre, joint) at U/L 50, 250, 500.
struct Block {
  double prop;
  double sup;
  double pre[3], joint[3];
};
const Block kPos[] = {{0.02, 95.57, {95.72, 95.96, 96.08}, {95.92, 96.13, 96.24}},
                      {0.10, 96.81, {96.87, 96.88, 96.92}, {96.99, 97.00, 97.08}},
                      {1.00, 97.41, {97.40, 97.45, 97.46}, {97.49, 97.54, 97.57}}};
// Relative improvements, joint over sup. then joint over pre., rows U/L 50, 250, 500.
const double kPosOverSup[3][3] = {{7.9, 12.6, 15.1}, {5.6, 6.0, 8.5}, {3.1, 5.0, 6.2}};
const double kPosOverPre[3][3] = {{4.7, 4.2, 4.1}, {3.8, 3.8, 5.2}, {3.5, 3.5, 4.3}};
const double kRatios[3] = {50, 250, 500};

harness::ResultTable pos_table() {
  harness::ResultTable t;
  for (const auto& b : kPos) {
    t.rows.push_back({"pos", b.prop, 0, "supervised", 0, "accuracy", b.sup});
    for (int j = 0; j < 3; ++j) {
      t.rows.push_back({"pos", b.prop, kRatios[j], "pretrain", 0, "accuracy", b.pre[j]});
      t.rows.push_back({"pos", b.prop, kRatios[j], "joint", 0, "accuracy", b.joint[j]});
    }
  }
  return t;
}

harness::ExperimentGrid tiny_grid(const std::filesystem::path& out) {
  harness::ExperimentGrid g;
  g.task = harness::TaskSpec::mixture_task();
  g.task.per_class_pool = 20;
  g.task.test_size = 80;
  g.task.dev_size = 40;
  g.train = harness::default_train_config(g.task);
  g.train.steps = 10;
  g.train.pretrain_steps = 6;
  g.train.batch_labeled = 4;
  g.train.batch_unlabeled = 8;
  g.train.hidden = 6;
  g.train.sampler.particles = 8;
  g.train.sampler.steps_per_update = 2;
  g.proportions = {0.1, 0.2, 0.5};
  g.ratios = {0, 1, 2};
  g.methods = {"supervised"};
  g.seeds = 2;
  g.global_seed = 9;
  g.out_dir = out;
  return g;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_metric(const harness::ResultTable& t, const std::string& metric) {
  std::size_t n = 0;
  for (const auto& r : t.rows) n += r.metric == metric;
  return n;
}

}  // namespace

TEST_CASE("relative error reduction on reference entries") {
  CHECK(std::abs(harness::relative_error_reduction(97.41, 97.49) - 3.1) <= 0.05);
  CHECK(std::abs(harness::relative_error_reduction(78.73, 82.24) - 16.5) <= 0.05);
  CHECK(std::abs(harness::relative_error_reduction(90.74, 91.34) - 6.5) <= 0.05);
}

TEST_CASE("relative error reduction identities and errors") {
  for (double m : {0.0, 10.0, 55.5, 99.9}) CHECK(harness::relative_error_reduction(m, m) == 0.0);
  CHECK(harness::relative_error_reduction(90, 80) == doctest::Approx(-100.0));
  CHECK(harness::relative_error_reduction(90, 100) == doctest::Approx(100.0));
  CHECK_THROWS_AS(harness::relative_error_reduction(100, 99), InvalidArgument);
  CHECK_THROWS_AS(harness::relative_error_reduction(101, 99), InvalidArgument);
}

TEST_CASE("sample standard deviation") {
  const auto a = harness::aggregate({1, 2, 3, 4, 5});
  CHECK(a.mean == 3.0);
  CHECK(a.std == doctest::Approx(std::sqrt(2.5)).epsilon(1e-15));
  CHECK(a.n == 5);
  CHECK(std::isnan(harness::aggregate({4.0}).std));
}

TEST_CASE("report reproduces the tagging improvement table") {
  const auto files = harness::report(pos_table());
  std::istringstream in(files.table4);
  std::string line;
  int sup_rows = 0, pre_rows = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string joint, over, base;
    double ratio;
    if (!(ls >> joint >> over >> base >> ratio) || over != "over") continue;
    const int j = ratio == 50 ? 0 : ratio == 250 ? 1 : 2;
    const auto& ref = base == "sup." ? kPosOverSup : kPosOverPre;
    (base == "sup." ? sup_rows : pre_rows)++;
    for (int p = 0; p < 3; ++p) {
      double v;
      REQUIRE(static_cast<bool>(ls >> v));
      CHECK(std::abs(v - ref[p][j]) <= 0.1);
    }
  }
  CHECK(sup_rows == 3);
  CHECK(pre_rows == 3);
}

TEST_CASE("improvement grid matches the function applied cell by cell") {
  const auto t = pos_table();
  for (const auto& b : kPos)
    for (int j = 0; j < 3; ++j) {
      const auto v = harness::improvement(t, "pos", b.prop, kRatios[j], "joint", "supervised", "accuracy");
      REQUIRE(v.has_value());
      CHECK(*v == harness::relative_error_reduction(b.sup, b.joint[j]));
    }
  CHECK(!harness::improvement(t, "pos", 0.5, 50, "joint", "supervised", "accuracy").has_value());
}

TEST_CASE("missing baselines are marked absent") {
  harness::ResultTable t;
  t.rows.push_back({"x", 0.1, 50, "joint", 0, "accuracy", 90});
  CHECK(!harness::improvement(t, "x", 0.1, 50, "joint", "supervised", "accuracy").has_value());
  const auto files = harness::report(t);
  CHECK(files.table4.find("joint over sup.") == std::string::npos);
  CHECK_THROWS_AS(harness::report(harness::ResultTable{}), InvalidArgument);
}

TEST_CASE("single-run cell reports no standard deviation") {
  harness::ResultTable t;
  t.rows.push_back({"x", 0.1, 0, "supervised", 0, "accuracy", 80});
  const auto files = harness::report(t);
  CHECK(files.table3.find("80.00 +- n/a") != std::string::npos);
}

TEST_CASE("results CSV round-trips") {
  const std::vector<ResultRow> rows{{"mixture", 0.016, 50, "joint:0.5", 3, "accuracy", 91.23456789012345},
                                    {"hmm", 1, 0, "supervised", 0, "error_rate", 0.1 + 0.2}};
  std::stringstream ss;
  harness::write_results_csv(ss, rows);
  CHECK(ss.str().rfind("task,proportion,ul_ratio,method,seed,metric,value\n", 0) == 0);
  CHECK(harness::read_results_csv(ss) == rows);
  std::istringstream bad("task,proportion\nx,1\n");
  CHECK_THROWS_AS(harness::read_results_csv(bad), FormatError);
}

TEST_CASE("method names") {
  const auto j = harness::MethodSpec::parse("joint:0.1");
  CHECK(j.method == pipe::Method::kJoint);
  CHECK(j.unsup_weight.value() == 0.1);
  CHECK(harness::MethodSpec::parse("pretrain").method == pipe::Method::kPretrainFinetune);
  CHECK_THROWS(harness::MethodSpec::parse("bogus"));
}

TEST_CASE("config parsing") {
  std::istringstream in("# c\n[train]\nsteps = 12\nlr=0.1\n[grid]\nproportions = 0.1, 0.5\nmethods = supervised, joint:0.5\n");
  const auto cfg = harness::Config::parse(in);
  CHECK(cfg.get_uint("train", "steps", 0) == 12);
  CHECK(cfg.get_double("train", "lr", 0) == 0.1);
  CHECK(cfg.get_doubles("grid", "proportions", {}) == std::vector<double>{0.1, 0.5});
  CHECK(cfg.get_strings("grid", "methods", {}).size() == 2);
  const auto g = harness::grid_from_config(cfg);
  CHECK(g.train.steps == 12);
  CHECK(g.proportions == std::vector<double>{0.1, 0.5});
  std::istringstream unknown("[train]\nstpes = 3\n");
  CHECK_THROWS_AS(harness::grid_from_config(harness::Config::parse(unknown)), InvalidArgument);
}

TEST_CASE("run data shares labels across ratios and nests unlabeled pools") {
  auto task = harness::TaskSpec::mixture_task();
  task.per_class_pool = 20;
  task.test_size = 40;
  task.dev_size = 20;
  const auto a = harness::make_run_data(task, 0.2, 1, 5, 0);
  const auto b = harness::make_run_data(task, 0.2, 3, 5, 0);
  CHECK(a.mixture->labeled.points == b.mixture->labeled.points);
  REQUIRE(a.mixture->unlabeled.rows() < b.mixture->unlabeled.rows());
  for (std::size_t i = 0; i < a.mixture->unlabeled.size(); ++i) CHECK(a.mixture->unlabeled[i] == b.mixture->unlabeled[i]);
  CHECK(!(harness::make_run_data(task, 0.2, 1, 5, 1).mixture->labeled.points == a.mixture->labeled.points));
  CHECK(harness::run_seed(5, 0) != harness::run_seed(5, 1));
  CHECK(harness::run_seed(5, 0) != harness::run_seed(6, 0));
}

TEST_CASE("grid runs every cell once and reuses finished runs") {
  const auto dir = std::filesystem::temp_directory_path() / "ebmssl-test-grid";
  std::filesystem::remove_all(dir);
  auto g = tiny_grid(dir / "a");
  const auto first = harness::run_grid(g);
  CHECK(first.failures.empty());
  CHECK(first.trained == 18);
  CHECK(count_metric(first.table, "accuracy") == 18);
  const std::string csv = slurp(g.out_dir / "results.csv");
  const auto second = harness::run_grid(g);
  CHECK(second.trained == 0);
  CHECK(second.reused == 18);
  CHECK(slurp(g.out_dir / "results.csv") == csv);
  // a fresh directory reproduces the table bit for bit
  g.out_dir = dir / "b";
  harness::run_grid(g);
  CHECK(slurp(g.out_dir / "results.csv") == csv);
  // error rate is the complement of the primary metric
  for (const auto& r : first.table.rows) {
    if (r.metric != "accuracy") continue;
    const auto a = first.table.values(r.task, r.proportion, r.ul_ratio, r.method, "accuracy");
    const auto e = first.table.values(r.task, r.proportion, r.ul_ratio, r.method, "error_rate");
    REQUIRE(e.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(e[i] == 100.0 - a[i]);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("two-seed aggregate equals the hand average") {
  const auto dir = std::filesystem::temp_directory_path() / "ebmssl-test-seeds";
  std::filesystem::remove_all(dir);
  auto g = tiny_grid(dir);
  g.proportions = {0.2};
  g.ratios = {0, 2};
  g.methods = {"supervised", "joint:0.5"};
  g.seeds = 2;
  const auto s = harness::run_grid(g);
  CHECK(s.failures.empty());
  CHECK(s.skipped == 2);
  const auto v = s.table.values("mixture", 0.2, 2, "joint:0.5", "accuracy");
  REQUIRE(v.size() == 2);
  const auto c = s.table.cell("mixture", 0.2, 2, "joint:0.5", "accuracy");
  CHECK(c->mean == doctest::Approx((v[0] + v[1]) / 2).epsilon(1e-15));
  CHECK(c->std == doctest::Approx(std::abs(v[0] - v[1]) / std::sqrt(2.0)).epsilon(1e-12));
  std::filesystem::remove_all(dir);
}

TEST_CASE("selftest covers every declared invariant and passes") {
  std::map<std::string, std::size_t> per_module;
  for (const auto& c : harness::selftest_registry()) ++per_module[c.id.substr(0, c.id.find('.'))];
  for (const auto& [module, n] : harness::declared_invariants()) CHECK(per_module[module] >= n);
  CHECK(harness::declared_invariants().size() == 9);
  for (const auto& v : harness::selftest()) {
    CAPTURE(v.id);
    CAPTURE(v.detail);
    CHECK(v.pass);
  }
}
