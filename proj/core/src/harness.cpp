#include "ebmssl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "ebmssl/error.hpp"

namespace ebmssl::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

double to_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw InvalidArgument(what + ": not a number '" + s + "'");
  return v;
}

std::uint64_t to_uint(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw InvalidArgument(what + ": not an unsigned integer '" + s + "'");
  return v;
}

}  // namespace

// ---- config ----

Config Config::parse(std::istream& in) {
  Config cfg;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(lineno);
    if (t.front() == '[') {
      if (t.back() != ']') throw InvalidArgument(where + ": unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) throw InvalidArgument(where + ": empty section name");
      cfg.sections_[section];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InvalidArgument(where + ": expected key = value");
    if (section.empty()) throw InvalidArgument(where + ": key outside any [section]");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw InvalidArgument(where + ": empty key");
    auto& sec = cfg.sections_[section];
    if (sec.count(key)) throw InvalidArgument(where + ": duplicate key '" + key + "'");
    sec[key] = trim(t.substr(eq + 1));
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config " + path.string());
  return parse(in);
}

bool Config::has(const std::string& section, const std::string& key) const {
  auto it = sections_.find(section);
  return it != sections_.end() && it->second.count(key) != 0;
}

std::string Config::get(const std::string& section, const std::string& key, const std::string& fallback) const {
  if (!has(section, key)) return fallback;
  return sections_.at(section).at(key);
}

double Config::get_double(const std::string& section, const std::string& key, double fallback) const {
  if (!has(section, key)) return fallback;
  return to_double(get(section, key, ""), section + "." + key);
}

std::uint64_t Config::get_uint(const std::string& section, const std::string& key, std::uint64_t fallback) const {
  if (!has(section, key)) return fallback;
  return to_uint(get(section, key, ""), section + "." + key);
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get(section, key, "");
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw InvalidArgument(section + "." + key + ": not a boolean '" + v + "'");
}

std::vector<double> Config::get_doubles(const std::string& section, const std::string& key,
                                        const std::vector<double>& fallback) const {
  if (!has(section, key)) return fallback;
  std::vector<double> out;
  for (const auto& s : split_list(get(section, key, ""))) out.push_back(to_double(s, section + "." + key));
  return out;
}

std::vector<std::string> Config::get_strings(const std::string& section, const std::string& key,
                                             const std::vector<std::string>& fallback) const {
  if (!has(section, key)) return fallback;
  return split_list(get(section, key, ""));
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
  sections_[section][key] = value;
}

void Config::check_keys(const std::map<std::string, std::vector<std::string>>& allowed) const {
  for (const auto& [sec, kv] : sections_) {
    auto it = allowed.find(sec);
    if (it == allowed.end()) throw InvalidArgument("config: unknown section [" + sec + "]");
    for (const auto& [k, v] : kv) {
      if (std::find(it->second.begin(), it->second.end(), k) == it->second.end()) {
        throw InvalidArgument("config: unknown key '" + k + "' in [" + sec + "]");
      }
    }
  }
}

// ---- tasks ----

TaskSpec TaskSpec::mixture_task() {
  TaskSpec t;
  t.id = "mixture";
  t.modality = pipe::Modality::kContinuous;
  t.mixture.classes = 4;
  t.mixture.radius = 4.0;
  t.mixture.stddev = 1.5;
  t.per_class_pool = 250;
  t.test_size = 2000;
  t.dev_size = 400;
  t.stratified = true;
  return t;
}

TaskSpec TaskSpec::hmm_task() {
  TaskSpec t;
  t.id = "hmm";
  t.modality = pipe::Modality::kSequence;
  t.hmm = data::HmmDescriptor::standard(3, 16, 12, 0, 0.6, 0.2);
  t.label_pool = 500;
  t.test_size = 300;
  t.dev_size = 100;
  t.stratified = false;
  return t;
}

TaskSpec TaskSpec::hmm_bio_task() {
  TaskSpec t = hmm_task();
  t.id = "hmm_bio";
  t.hmm = data::HmmDescriptor::bio(16, 12, 0, 0.2);
  return t;
}

TaskSpec TaskSpec::by_id(const std::string& id) {
  if (id == "mixture") return mixture_task();
  if (id == "hmm") return hmm_task();
  if (id == "hmm_bio") return hmm_bio_task();
  throw InvalidArgument("unknown task '" + id + "'");
}

std::string TaskSpec::metric_name() const {
  if (modality == pipe::Modality::kSequence && pipe::is_bio_label_set(hmm.label_names)) return "span_f1";
  return "accuracy";
}

pipe::TrainConfig default_train_config(const TaskSpec& task) {
  pipe::TrainConfig c;
  c.modality = task.modality;
  if (task.modality == pipe::Modality::kContinuous) {
    c.steps = 400;
    c.pretrain_steps = 400;
    c.lr = 0.05;
    c.pretrain_lr = 0.01;
    c.batch_labeled = 16;
    c.batch_unlabeled = 32;
  } else {
    c.steps = 500;
    c.pretrain_steps = 500;
    c.lr = 0.05;
    c.pretrain_lr = 0.01;
    c.batch_labeled = 8;
    c.batch_unlabeled = 16;
  }
  c.log_every = 100;
  return c;
}

// ---- run data ----

namespace {

enum DataStream : std::uint64_t {
  kPool = 101,
  kSplit = 102,
  kUnlabeledPool = 103,
  kTest = 104,
  kDev = 105,
  kTrain = 106,
};

std::uint64_t derive(std::uint64_t global_seed, std::uint64_t stream, std::uint64_t index) {
  Rng rng = pipe::stream_rng(global_seed, stream, index);
  return rng();
}

std::size_t labeled_size(double p, std::size_t pool) {
  return static_cast<std::size_t>(std::ceil(p * static_cast<double>(pool) - 1e-9));
}

}  // namespace

std::uint64_t run_seed(std::uint64_t global_seed, std::size_t run) { return derive(global_seed, kTrain, run); }

RunData make_run_data(const TaskSpec& task, double proportion, double ul_ratio, std::uint64_t global_seed,
                      std::size_t run) {
  RunData d;
  const std::uint64_t split_seed = derive(global_seed, kSplit, run);
  if (task.modality == pipe::Modality::kContinuous) {
    const auto pool = data::gen_mixture(task.mixture, task.per_class_pool, derive(global_seed, kPool, run));
    data::SplitOptions opt;
    opt.stratified = task.stratified;
    auto split = data::split(pool, proportion, 0.0, split_seed, opt);
    const auto n_u = static_cast<std::size_t>(std::llround(ul_ratio * static_cast<double>(split.labeled.size())));
    split.unlabeled = data::sample_mixture_points(task.mixture, n_u, derive(global_seed, kUnlabeledPool, run));
    split.unlabeled_index.clear();
    split.ratio = ul_ratio;
    d.mixture = std::move(split);
    const std::size_t k = task.mixture.classes;
    d.mixture_test = data::gen_mixture(task.mixture, std::max<std::size_t>(1, task.test_size / k),
                                       derive(global_seed, kTest, run));
    d.mixture_dev = data::gen_mixture(task.mixture, std::max<std::size_t>(1, task.dev_size / k),
                                      derive(global_seed, kDev, run));
  } else {
    const auto pool = data::gen_hmm(task.hmm, task.label_pool, derive(global_seed, kPool, run));
    const std::size_t n_l = labeled_size(proportion, task.label_pool);
    const auto n_u = static_cast<std::size_t>(std::llround(ul_ratio * static_cast<double>(n_l)));
    const auto unlabeled = data::gen_hmm(task.hmm, n_u, derive(global_seed, kUnlabeledPool, run)).tokens;
    d.seq = data::split(pool, proportion, ul_ratio, split_seed, &unlabeled);
    d.seq_test = data::gen_hmm(task.hmm, task.test_size, derive(global_seed, kTest, run));
    d.seq_dev = data::gen_hmm(task.hmm, task.dev_size, derive(global_seed, kDev, run));
  }
  return d;
}

RunOutcome run_single(const TaskSpec& task, const RunData& data, const pipe::TrainConfig& cfg_in) {
  pipe::TrainConfig cfg = cfg_in;
  cfg.modality = task.modality;
  RunOutcome out;
  if (task.modality == pipe::Modality::kContinuous) {
    out.model = pipe::train(*data.mixture, cfg, static_cast<const data::ContinuousDataset*>(nullptr));
    out.test = pipe::evaluate(out.model, *data.mixture_test);
    out.dev = pipe::evaluate(out.model, *data.mixture_dev);
  } else {
    out.model = pipe::train(*data.seq, cfg, static_cast<const data::SequenceDataset*>(nullptr));
    out.test = pipe::evaluate(out.model, *data.seq_test);
    out.dev = pipe::evaluate(out.model, *data.seq_dev);
  }
  return out;
}

// ---- results ----

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.n = values.size();
  if (values.empty()) throw InvalidArgument("aggregate: no values");
  double s = 0.0;
  for (double v : values) s += v;
  a.mean = s / static_cast<double>(a.n);
  if (a.n < 2) {
    a.std = std::numeric_limits<double>::quiet_NaN();
    return a;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
  return a;
}

std::vector<double> ResultTable::values(const std::string& task, double proportion, double ul_ratio,
                                        const std::string& method, const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.task == task && r.proportion == proportion && r.ul_ratio == ul_ratio && r.method == method &&
        r.metric == metric) {
      out.push_back(r.value);
    }
  }
  return out;
}

std::optional<Aggregate> ResultTable::cell(const std::string& task, double proportion, double ul_ratio,
                                           const std::string& method, const std::string& metric) const {
  const auto v = values(task, proportion, ul_ratio, method, metric);
  if (v.empty()) return std::nullopt;
  return aggregate(v);
}

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "task,proportion,ul_ratio,method,seed,metric,value\n";
  for (const auto& r : rows) {
    out << r.task << ',' << format_double(r.proportion) << ',' << format_double(r.ul_ratio) << ',' << r.method << ','
        << r.seed << ',' << r.metric << ',' << format_double(r.value) << '\n';
  }
}

std::vector<ResultRow> read_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "task,proportion,ul_ratio,method,seed,metric,value") {
    throw FormatError("results CSV lacks the expected header");
  }
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::string cur;
    std::istringstream ls(line);
    while (std::getline(ls, cur, ',')) f.push_back(trim(cur));
    if (f.size() != 7) throw FormatError("results CSV row needs 7 fields: " + line);
    try {
      rows.push_back({f[0], to_double(f[1], "proportion"), to_double(f[2], "ul_ratio"), f[3], to_uint(f[4], "seed"),
                      f[5], to_double(f[6], "value")});
    } catch (const InvalidArgument& e) {
      throw FormatError(e.what());
    }
  }
  return rows;
}

MethodSpec MethodSpec::parse(const std::string& s) {
  MethodSpec m;
  m.name = s;
  const auto colon = s.find(':');
  m.method = pipe::parse_method(s.substr(0, colon));
  if (colon != std::string::npos) {
    if (m.method != pipe::Method::kJoint) throw InvalidArgument("only joint takes a weight: '" + s + "'");
    m.unsup_weight = to_double(s.substr(colon + 1), "method weight");
    if (!(*m.unsup_weight >= 0.0)) throw InvalidArgument("joint weight must be >= 0: '" + s + "'");
  }
  return m;
}

void ExperimentGrid::validate() const {
  if (proportions.empty() || ratios.empty() || methods.empty()) throw InvalidArgument("grid: empty axis");
  if (seeds < 2) throw InvalidArgument("grid: at least two seeds are needed for a standard deviation");
  for (double p : proportions) {
    if (!(p > 0.0) || p > 1.0) throw InvalidArgument("grid: proportion outside (0, 1]");
  }
  for (double r : ratios) {
    if (!(r >= 0.0)) throw InvalidArgument("grid: negative U/L ratio");
  }
  std::set<std::string> seen;
  for (const auto& m : methods) {
    MethodSpec::parse(m);
    if (!seen.insert(m).second) throw InvalidArgument("grid: duplicate method '" + m + "'");
  }
  if (workers == 0) throw InvalidArgument("grid: workers must be positive");
  train.validate();
}

// ---- config mapping ----

namespace {

const std::map<std::string, std::vector<std::string>> kAllowedKeys = {
    {"task",
     {"id", "classes", "dim", "radius", "stddev", "per_class_pool", "states", "vocab", "max_len", "min_len", "stay",
      "shared", "bio", "label_pool", "test_size", "dev_size", "stratified"}},
    {"train",
     {"lr", "pretrain_lr", "momentum", "clip_norm", "steps", "pretrain_steps", "batch_labeled", "batch_unlabeled",
      "unsup_weight", "freeze_encoder", "hidden", "layers", "embed_dim", "log_every", "seed"}},
    {"sampler",
     {"step_size", "noise_scale", "bound", "particles", "steps_per_update", "reinit_prob", "use_generator",
      "latent_dim", "generator_hidden", "generator_lr"}},
    {"nce", {"nu", "dnce", "refresh_every", "model_fraction", "max_corpus"}},
    {"grid", {"proportions", "ratios", "methods", "seeds", "workers", "global_seed", "out"}},
};

}  // namespace

TaskSpec task_from_config(const Config& cfg) {
  cfg.check_keys(kAllowedKeys);
  TaskSpec t = TaskSpec::by_id(cfg.get("task", "id", "mixture"));
  if (t.modality == pipe::Modality::kContinuous) {
    t.mixture.classes = cfg.get_uint("task", "classes", t.mixture.classes);
    t.mixture.dim = cfg.get_uint("task", "dim", t.mixture.dim);
    t.mixture.radius = cfg.get_double("task", "radius", t.mixture.radius);
    t.mixture.stddev = cfg.get_double("task", "stddev", t.mixture.stddev);
    t.per_class_pool = cfg.get_uint("task", "per_class_pool", t.per_class_pool);
  } else {
    const bool bio = cfg.get_bool("task", "bio", t.id == "hmm_bio");
    const std::size_t vocab = cfg.get_uint("task", "vocab", t.hmm.vocab);
    const std::size_t max_len = cfg.get_uint("task", "max_len", t.hmm.max_len);
    const std::size_t min_len = cfg.get_uint("task", "min_len", 0);
    const double shared = cfg.get_double("task", "shared", 0.2);
    if (bio) {
      t.hmm = data::HmmDescriptor::bio(vocab, max_len, min_len, shared);
    } else {
      t.hmm = data::HmmDescriptor::standard(cfg.get_uint("task", "states", t.hmm.states), vocab, max_len, min_len,
                                            cfg.get_double("task", "stay", 0.6), shared);
    }
    t.label_pool = cfg.get_uint("task", "label_pool", t.label_pool);
  }
  t.test_size = cfg.get_uint("task", "test_size", t.test_size);
  t.dev_size = cfg.get_uint("task", "dev_size", t.dev_size);
  t.stratified = cfg.get_bool("task", "stratified", t.stratified);
  return t;
}

pipe::TrainConfig train_config_from(const Config& cfg, const TaskSpec& task) {
  cfg.check_keys(kAllowedKeys);
  pipe::TrainConfig c = default_train_config(task);
  c.lr = cfg.get_double("train", "lr", c.lr);
  c.pretrain_lr = cfg.get_double("train", "pretrain_lr", c.pretrain_lr);
  c.momentum = cfg.get_double("train", "momentum", c.momentum);
  c.clip_norm = cfg.get_double("train", "clip_norm", c.clip_norm);
  c.steps = cfg.get_uint("train", "steps", c.steps);
  c.pretrain_steps = cfg.get_uint("train", "pretrain_steps", c.pretrain_steps);
  c.batch_labeled = cfg.get_uint("train", "batch_labeled", c.batch_labeled);
  c.batch_unlabeled = cfg.get_uint("train", "batch_unlabeled", c.batch_unlabeled);
  c.unsup_weight = cfg.get_double("train", "unsup_weight", c.unsup_weight);
  c.freeze_encoder = cfg.get_bool("train", "freeze_encoder", c.freeze_encoder);
  c.hidden = cfg.get_uint("train", "hidden", c.hidden);
  c.layers = cfg.get_uint("train", "layers", c.layers);
  c.embed_dim = cfg.get_uint("train", "embed_dim", c.embed_dim);
  c.log_every = cfg.get_uint("train", "log_every", c.log_every);
  c.seed = cfg.get_uint("train", "seed", c.seed);
  auto& s = c.sampler;
  s.sgld.step_size = cfg.get_double("sampler", "step_size", s.sgld.step_size);
  s.sgld.noise_scale = cfg.get_double("sampler", "noise_scale", s.sgld.noise_scale);
  s.sgld.bound = cfg.get_double("sampler", "bound", s.sgld.bound);
  s.particles = cfg.get_uint("sampler", "particles", s.particles);
  s.steps_per_update = cfg.get_uint("sampler", "steps_per_update", s.steps_per_update);
  s.reinit_prob = cfg.get_double("sampler", "reinit_prob", s.reinit_prob);
  s.use_generator = cfg.get_bool("sampler", "use_generator", s.use_generator);
  s.latent_dim = cfg.get_uint("sampler", "latent_dim", s.latent_dim);
  s.generator_hidden = cfg.get_uint("sampler", "generator_hidden", s.generator_hidden);
  s.generator_lr = cfg.get_double("sampler", "generator_lr", s.generator_lr);
  auto& n = c.nce;
  n.nu = cfg.get_uint("nce", "nu", n.nu);
  n.dnce = cfg.get_bool("nce", "dnce", n.dnce);
  n.refresh_every = cfg.get_uint("nce", "refresh_every", n.refresh_every);
  n.refresh.model_fraction = cfg.get_double("nce", "model_fraction", n.refresh.model_fraction);
  n.refresh.max_corpus = cfg.get_uint("nce", "max_corpus", n.refresh.max_corpus);
  c.validate();
  return c;
}

ExperimentGrid grid_from_config(const Config& cfg) {
  ExperimentGrid g;
  g.task = task_from_config(cfg);
  g.train = train_config_from(cfg, g.task);
  g.proportions = cfg.get_doubles("grid", "proportions", g.proportions);
  g.ratios = cfg.get_doubles("grid", "ratios", g.ratios);
  g.methods = cfg.get_strings("grid", "methods", g.methods);
  g.seeds = cfg.get_uint("grid", "seeds", g.seeds);
  g.workers = cfg.get_uint("grid", "workers", g.workers);
  g.global_seed = cfg.get_uint("grid", "global_seed", g.global_seed);
  g.out_dir = cfg.get("grid", "out", g.out_dir.string());
  g.validate();
  return g;
}

// ---- grid ----

namespace {

struct Job {
  double proportion;
  double ratio;
  MethodSpec method;
  std::size_t run;
  std::string key;
};

std::string job_key(const std::string& task, double p, double r, const std::string& method, std::size_t run) {
  std::string m = method;
  std::replace(m.begin(), m.end(), ':', '-');
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s_p%g_r%g_%s_s%zu", task.c_str(), p, r, m.c_str(), run);
  return buf;
}

std::vector<ResultRow> rows_for(const TaskSpec& task, const Job& job, const pipe::Metrics& m) {
  std::vector<ResultRow> rows;
  auto add = [&](const std::string& metric, double v) {
    rows.push_back({task.id, job.proportion, job.ratio, job.method.name, job.run, metric, v});
  };
  add("accuracy", 100.0 * m.accuracy);
  if (!std::isnan(m.span_f1)) add("span_f1", 100.0 * m.span_f1);
  add("error_rate", 100.0 - 100.0 * m.primary());
  return rows;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << content;
    out.flush();
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

GridSummary run_grid(const ExperimentGrid& grid) {
  grid.validate();
  const auto runs_dir = grid.out_dir / "runs";
  std::filesystem::create_directories(runs_dir);

  std::vector<Job> jobs;
  GridSummary summary;
  for (double p : grid.proportions) {
    for (double r : grid.ratios) {
      for (const auto& name : grid.methods) {
        const MethodSpec m = MethodSpec::parse(name);
        for (std::size_t run = 0; run < grid.seeds; ++run) {
          if (r == 0.0 && m.method != pipe::Method::kSupervised) {
            ++summary.skipped;
            continue;
          }
          jobs.push_back({p, r, m, run, job_key(grid.task.id, p, r, name, run)});
        }
      }
    }
  }

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> trained{0}, reused{0};
  std::mutex fail_mu;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      const Job& job = jobs[i];
      const auto marker = runs_dir / (job.key + ".done");
      const auto file = runs_dir / (job.key + ".csv");
      if (std::filesystem::exists(marker) && std::filesystem::exists(file)) {
        ++reused;
        continue;
      }
      try {
        pipe::TrainConfig cfg = grid.train;
        cfg.method = job.method.method;
        cfg.seed = run_seed(grid.global_seed, job.run);
        if (job.method.unsup_weight) cfg.unsup_weight = *job.method.unsup_weight;
        const RunData data = make_run_data(grid.task, job.proportion, job.ratio, grid.global_seed, job.run);
        const RunOutcome out = run_single(grid.task, data, cfg);
        std::ostringstream csv;
        write_results_csv(csv, rows_for(grid.task, job, out.test));
        write_file_atomic(file, csv.str());
        write_file_atomic(marker, "");
        ++trained;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(fail_mu);
        summary.failures.push_back(job.key + ": " + e.what());
      }
    }
  };
  const std::size_t n_workers = std::min(grid.workers, std::max<std::size_t>(1, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  summary.trained = trained;
  summary.reused = reused;
  std::sort(summary.failures.begin(), summary.failures.end());

  // Merge in grid order.
  for (const auto& job : jobs) {
    const auto file = runs_dir / (job.key + ".csv");
    if (!std::filesystem::exists(runs_dir / (job.key + ".done"))) continue;
    std::ifstream in(file);
    auto rows = read_results_csv(in);
    summary.table.rows.insert(summary.table.rows.end(), rows.begin(), rows.end());
  }
  std::ostringstream all;
  write_results_csv(all, summary.table.rows);
  write_file_atomic(grid.out_dir / "results.csv", all.str());
  return summary;
}

// ---- report ----

double relative_error_reduction(double baseline, double improved) {
  if (!(baseline >= 0.0 && baseline <= 100.0) || !(improved >= 0.0 && improved <= 100.0)) {
    throw InvalidArgument("relative_error_reduction: metrics must be percentages in [0, 100]");
  }
  if (baseline == 100.0) throw InvalidArgument("relative_error_reduction: undefined at baseline 100");
  return 100.0 * ((100.0 - baseline) - (100.0 - improved)) / (100.0 - baseline);
}

std::optional<double> improvement(const ResultTable& table, const std::string& task, double proportion,
                                  double ul_ratio, const std::string& joint, const std::string& baseline,
                                  const std::string& metric) {
  const auto j = table.cell(task, proportion, ul_ratio, joint, metric);
  if (!j) return std::nullopt;
  std::optional<Aggregate> b;
  if (MethodSpec::parse(baseline).method == pipe::Method::kSupervised) b = table.cell(task, proportion, 0.0, baseline, metric);
  if (!b) b = table.cell(task, proportion, ul_ratio, baseline, metric);
  if (!b || b->mean >= 100.0) return std::nullopt;
  return relative_error_reduction(b->mean, j->mean);
}

namespace {

template <class T>
std::vector<T> ordered_unique(const std::vector<T>& v) {
  std::vector<T> out;
  for (const auto& x : v) {
    if (std::find(out.begin(), out.end(), x) == out.end()) out.push_back(x);
  }
  return out;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string task_metric(const ResultTable& t, const std::string& task, const std::string& requested) {
  if (!requested.empty()) return requested;
  for (const auto& r : t.rows) {
    if (r.task == task && r.metric == "span_f1") return "span_f1";
  }
  return "accuracy";
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s + " " : s + std::string(w - s.size(), ' '); }

}  // namespace

namespace {

std::string percent_label(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g%%", 100.0 * p);
  return buf;
}

}  // namespace

ReportFiles report(const ResultTable& table, const std::string& metric) {
  if (table.rows.empty()) throw InvalidArgument("report: empty result table");
  std::vector<std::string> tasks;
  for (const auto& r : table.rows) tasks.push_back(r.task);
  tasks = ordered_unique(tasks);

  ReportFiles files;
  std::ostringstream t3, t4, curve;
  curve << "task,method,ul_ratio,proportion,metric,mean,std,n\n";
  for (const auto& task : tasks) {
    const std::string m = task_metric(table, task, metric);
    std::vector<double> props, ratios;
    std::vector<std::string> methods;
    for (const auto& r : table.rows) {
      if (r.task != task) continue;
      props.push_back(r.proportion);
      ratios.push_back(r.ul_ratio);
      methods.push_back(r.method);
    }
    props = ordered_unique(props);
    std::sort(props.begin(), props.end());
    ratios = ordered_unique(ratios);
    std::sort(ratios.begin(), ratios.end());
    methods = ordered_unique(methods);

    t3 << "task " << task << ", " << m << " (%), mean +- sample std\n";
    t3 << pad("method", 14) << pad("U/L", 6);
    for (double p : props) t3 << pad(percent_label(p), 20);
    t3 << '\n';
    for (const auto& meth : methods) {
      for (double r : ratios) {
        bool any = false;
        std::ostringstream line;
        line << pad(meth, 14) << pad(format_double(r), 6);
        for (double p : props) {
          const auto c = table.cell(task, p, r, meth, m);
          if (!c) {
            line << pad("-", 20);
            continue;
          }
          any = true;
          line << pad(pct(c->mean) + " +- " + (c->n < 2 ? std::string("n/a") : pct(c->std)), 20);
        }
        if (any) t3 << line.str() << '\n';
      }
    }
    t3 << '\n';

    t4 << "task " << task << ", relative error reduction (%) of " << m << '\n';
    t4 << pad("comparison", 28) << pad("U/L", 6);
    for (double p : props) t4 << pad(percent_label(p), 10);
    t4 << '\n';
    for (const auto& joint : methods) {
      if (MethodSpec::parse(joint).method != pipe::Method::kJoint) continue;
      for (const std::string base : {"supervised", "pretrain"}) {
        for (double r : ratios) {
          if (r == 0.0) continue;
          bool any = false;
          std::ostringstream line;
          line << pad(joint + " over " + (base == "supervised" ? "sup." : "pre."), 28) << pad(format_double(r), 6);
          for (double p : props) {
            const auto v = improvement(table, task, p, r, joint, base, m);
            if (!v) {
              line << pad("-", 10);
              continue;
            }
            any = true;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.1f", *v);
            line << pad(buf, 10);
          }
          if (any) t4 << line.str() << '\n';
        }
      }
    }
    t4 << '\n';

    for (const auto& meth : methods) {
      for (double r : ratios) {
        for (double p : props) {
          const auto c = table.cell(task, p, r, meth, "error_rate");
          if (!c) continue;
          curve << task << ',' << meth << ',' << format_double(r) << ',' << format_double(p) << ",error_rate,"
                << format_double(c->mean) << ',' << (c->n < 2 ? std::string("") : format_double(c->std)) << ','
                << c->n << '\n';
        }
      }
    }
  }
  files.table3 = t3.str();
  files.table4 = t4.str();
  files.curve_csv = curve.str();
  return files;
}

void write_report(const ReportFiles& files, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "table3.txt", files.table3);
  write_file_atomic(dir / "table4.txt", files.table4);
  write_file_atomic(dir / "label_curve.csv", files.curve_csv);
}

}  // namespace ebmssl::harness
