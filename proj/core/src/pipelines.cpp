#include "ebmssl/pipelines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "ebmssl/crf.hpp"
#include "ebmssl/ebm.hpp"
#include "ebmssl/error.hpp"
#include "ebmssl/graph.hpp"
#include "ebmssl/tape.hpp"

namespace ebmssl::pipe {

namespace {

enum Stream : std::uint64_t {
  kInit = 1,
  kLabeled = 2,
  kUnlabeled = 3,
  kStep = 4,
  kChain = 5,
  kHeadInit = 6,
  kRefresh = 7,
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
const std::string kLogC = "nce.log_c";

}  // namespace

// ---- names, config ----

std::string to_string(Modality m) { return m == Modality::kContinuous ? "continuous" : "sequence"; }

std::string to_string(Method m) {
  switch (m) {
    case Method::kSupervised:
      return "supervised";
    case Method::kPretrainFinetune:
      return "pretrain";
    case Method::kJoint:
      return "joint";
  }
  return "?";
}

Modality parse_modality(const std::string& s) {
  if (s == "continuous") return Modality::kContinuous;
  if (s == "sequence") return Modality::kSequence;
  throw InvalidArgument("unknown modality '" + s + "'");
}

Method parse_method(const std::string& s) {
  if (s == "supervised" || s == "sup") return Method::kSupervised;
  if (s == "pretrain" || s == "pretrain_finetune" || s == "pre") return Method::kPretrainFinetune;
  if (s == "joint") return Method::kJoint;
  throw InvalidArgument("unknown method '" + s + "'");
}

std::size_t TrainConfig::total_steps() const {
  return steps + (method == Method::kPretrainFinetune ? pretrain_steps : 0);
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !(pretrain_lr > 0.0)) throw InvalidArgument("config: learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw InvalidArgument("config: momentum must be in [0, 1)");
  if (clip_norm < 0.0) throw InvalidArgument("config: clip norm must be non-negative");
  if (batch_labeled == 0 || batch_unlabeled == 0) throw InvalidArgument("config: batch sizes must be positive");
  if (!(unsup_weight >= 0.0) || !std::isfinite(unsup_weight)) {
    throw InvalidArgument("config: unsup_weight must be a finite value >= 0");
  }
  if (hidden == 0 || layers == 0 || embed_dim == 0) throw InvalidArgument("config: architecture sizes must be positive");
  if (log_every == 0) throw InvalidArgument("config: log_every must be positive");
  if (nce.nu == 0) throw InvalidArgument("config: nce nu must be >= 1");
  if (nce.dnce && nce.refresh_every == 0) throw InvalidArgument("config: refresh_every must be positive");
  if (sampler.particles == 0) throw InvalidArgument("config: sampler needs particles");
  if (!(sampler.sgld.step_size > 0.0)) throw InvalidArgument("config: SGLD step size must be positive");
  if (checkpoint_every > 0 && checkpoint.empty()) throw InvalidArgument("config: checkpoint_every without a path");
}

double Metrics::primary() const { return std::isnan(span_f1) ? accuracy : span_f1; }
std::string Metrics::primary_name() const { return std::isnan(span_f1) ? "accuracy" : "span_f1"; }

void write_log_csv(std::ostream& out, std::span<const LogRow> rows) {
  out << "step,loss_sup,loss_unsup,metric_train,metric_dev,diverged_particles,wallclock_s\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%zu,%.3f\n", r.step, r.loss_sup, r.loss_unsup,
                  r.metric_train, r.metric_dev, r.diverged_particles, r.wallclock_s);
    out << buf;
  }
}

// ---- randomness, batches ----

Rng stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

BatchSchedule::BatchSchedule(std::size_t n, std::size_t batch, std::uint64_t seed, std::uint64_t stream)
    : n_(n), batch_(std::min(batch, n)), seed_(seed), stream_(stream) {
  if (n == 0) throw InvalidArgument("BatchSchedule: empty pool");
}

const std::vector<std::size_t>& BatchSchedule::epoch(std::size_t e) const {
  if (e != cached_epoch_) {
    perm_.resize(n_);
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    Rng rng = stream_rng(seed_, stream_, e);
    std::shuffle(perm_.begin(), perm_.end(), rng);
    cached_epoch_ = e;
  }
  return perm_;
}

std::vector<std::size_t> BatchSchedule::batch(std::size_t step) const {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  const std::size_t start = step * batch_;
  for (std::size_t j = 0; j < batch_; ++j) {
    const std::size_t pos = start + j;
    out.push_back(epoch(pos / n_)[pos % n_]);
  }
  return out;
}

// ---- evaluation helpers ----

bool is_bio_label_set(std::span<const std::string> names) {
  bool has_b = false;
  for (const auto& n : names) {
    if (n == "O") continue;
    if (n.size() > 2 && n[1] == '-' && (n[0] == 'B' || n[0] == 'I')) {
      has_b = has_b || n[0] == 'B';
      continue;
    }
    return false;
  }
  return has_b;
}

std::vector<Span> bio_spans(std::span<const data::Sequence> labels, std::span<const std::string> names) {
  std::vector<Span> out;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const auto& y = labels[s];
    std::optional<Span> open;
    auto close = [&](std::size_t at) {
      if (open) {
        open->end = at;
        out.push_back(*open);
        open.reset();
      }
    };
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= names.size()) throw InvalidArgument("bio_spans: bad label");
      const std::string& n = names[static_cast<std::size_t>(y[i])];
      if (n == "O") {
        close(i);
        continue;
      }
      const std::string type = n.substr(2);
      if (n[0] == 'I' && open && open->type == type) continue;
      close(i);
      open = Span{s, i, 0, type};
    }
    close(y.size());
  }
  return out;
}

Metrics span_scores(std::span<const data::Sequence> gold, std::span<const data::Sequence> pred,
                    std::span<const std::string> names) {
  if (gold.size() != pred.size()) throw InvalidArgument("span_scores: sentence counts differ");
  auto g = bio_spans(gold, names);
  auto p = bio_spans(pred, names);
  std::sort(g.begin(), g.end());
  std::sort(p.begin(), p.end());
  std::vector<Span> common;
  std::set_intersection(g.begin(), g.end(), p.begin(), p.end(), std::back_inserter(common));
  Metrics m;
  m.accuracy = token_accuracy(gold, pred);
  if (g.empty() && p.empty()) {
    m.precision = m.recall = m.span_f1 = 1.0;
    return m;
  }
  const double tp = static_cast<double>(common.size());
  m.precision = p.empty() ? 0.0 : tp / static_cast<double>(p.size());
  m.recall = g.empty() ? 0.0 : tp / static_cast<double>(g.size());
  m.span_f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

double token_accuracy(std::span<const data::Sequence> gold, std::span<const data::Sequence> pred) {
  if (gold.size() != pred.size()) throw InvalidArgument("token_accuracy: sentence counts differ");
  std::size_t hit = 0, total = 0;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    if (gold[s].size() != pred[s].size()) throw InvalidArgument("token_accuracy: sentence lengths differ");
    for (std::size_t i = 0; i < gold[s].size(); ++i) hit += gold[s][i] == pred[s][i];
    total += gold[s].size();
  }
  return total == 0 ? kNaN : static_cast<double>(hit) / static_cast<double>(total);
}

std::vector<int> predict(const TrainedModel& model, const RealArray& x) {
  if (model.modality != Modality::kContinuous) throw InvalidArgument("predict: model is not continuous");
  const RealArray logits = pot::classifier_logits_batch(model.net, model.params, x);
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row_view(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

std::vector<data::Sequence> predict(const TrainedModel& model, std::span<const data::Sequence> xs) {
  if (model.modality != Modality::kSequence) throw InvalidArgument("predict: model is not a sequence model");
  std::vector<data::Sequence> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(crf::viterbi(ebm::chain_potentials(model.enc, model.params, x)).labels);
  return out;
}

Metrics evaluate(const TrainedModel& model, const data::ContinuousDataset& test) {
  if (test.classes() != model.net.classes) throw InvalidArgument("evaluate: label set differs from the model's");
  if (test.size() == 0) throw InvalidArgument("evaluate: empty test set");
  const auto pred = predict(model, test.points);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
  Metrics m;
  m.accuracy = static_cast<double>(hit) / static_cast<double>(pred.size());
  return m;
}

Metrics evaluate(const TrainedModel& model, const data::SequenceDataset& test) {
  if (test.desc.states != model.enc.classes || test.desc.label_names != model.label_names) {
    throw InvalidArgument("evaluate: label set differs from the model's");
  }
  if (test.size() == 0) throw InvalidArgument("evaluate: empty test set");
  const auto pred = predict(model, test.tokens);
  if (is_bio_label_set(model.label_names)) return span_scores(test.labels, pred, model.label_names);
  Metrics m;
  m.accuracy = token_accuracy(test.labels, pred);
  return m;
}

// ---- shared run machinery ----

namespace {

using Clock = std::chrono::steady_clock;

// Checkpoint layout: model parameters under "model/", optimizer velocity
// under "opt/", generator under "gen/", chain particles "chain/particles",
// noise counts "noise.*", step counter "state/step", log "state/log".
struct RunCheckpoint {
  ParamStore params;
  ParamStore velocity;
  ParamStore generator;
  std::optional<RealArray> particles;
  std::optional<nce::NoiseLM> noise;
  std::size_t step = 0;
  std::vector<LogRow> log;
};

void add_prefixed(ParamStore& out, const ParamStore& in, const std::string& prefix) {
  for (const auto& [k, e] : in.entries()) out.set(prefix + k, e.value);
}

ParamStore strip_prefix(const ParamStore& in, const std::string& prefix) {
  ParamStore out;
  for (const auto& [k, e] : in.entries()) {
    if (k.rfind(prefix, 0) == 0) out.set(k.substr(prefix.size()), e.value);
  }
  return out;
}

void save_run(const std::filesystem::path& path, const RunCheckpoint& ck) {
  ParamStore s;
  add_prefixed(s, ck.params, "model/");
  add_prefixed(s, ck.velocity, "opt/");
  add_prefixed(s, ck.generator, "gen/");
  if (ck.particles) s.set("chain/particles", *ck.particles);
  if (ck.noise) ck.noise->to_params(s, "noise");
  s.set("state/step", RealArray::scalar(static_cast<double>(ck.step)));
  if (!ck.log.empty()) {
    std::vector<double> v;
    for (const auto& r : ck.log) {
      v.insert(v.end(), {static_cast<double>(r.step), r.loss_sup, r.loss_unsup, r.metric_train, r.metric_dev,
                         static_cast<double>(r.diverged_particles), r.wallclock_s});
    }
    // missing entries are stored as 0 with a mask since the format holds finite values only
    std::vector<double> missing(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (std::isnan(v[i])) {
        missing[i] = 1.0;
        v[i] = 0.0;
      }
    }
    s.set("state/log", RealArray({ck.log.size(), 7}, std::move(v)));
    s.set("state/log_missing", RealArray({ck.log.size(), 7}, std::move(missing)));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_checkpoint(path, s);
}

RunCheckpoint load_run(const std::filesystem::path& path) {
  const ParamStore s = load_checkpoint(path);
  RunCheckpoint ck;
  ck.params = strip_prefix(s, "model/");
  ck.velocity = strip_prefix(s, "opt/");
  ck.generator = strip_prefix(s, "gen/");
  if (s.contains("chain/particles")) ck.particles = s.value("chain/particles");
  if (s.contains("noise.bigram")) ck.noise = nce::NoiseLM::from_params(s, "noise");
  if (!s.contains("state/step")) throw FormatError("run checkpoint lacks state/step");
  ck.step = static_cast<std::size_t>(s.value("state/step").item());
  if (s.contains("state/log")) {
    const RealArray& l = s.value("state/log");
    if (l.cols() != 7) throw FormatError("run checkpoint log must have 7 columns");
    if (!s.contains("state/log_missing") || !s.value("state/log_missing").same_shape(l)) {
      throw FormatError("run checkpoint log lacks its missing-value mask");
    }
    const RealArray& mask = s.value("state/log_missing");
    for (std::size_t i = 0; i < l.rows(); ++i) {
      std::vector<double> r(l.row_view(i).begin(), l.row_view(i).end());
      for (std::size_t j = 0; j < 7; ++j) {
        if (mask.at(i, j) != 0.0) r[j] = kNaN;
      }
      ck.log.push_back({static_cast<std::size_t>(r[0]), r[1], r[2], r[3], r[4], static_cast<std::size_t>(r[5]), r[6]});
    }
  }
  return ck;
}

// Step bookkeeping shared by both modalities.
struct Runner {
  const TrainConfig& cfg;
  TrainedModel& model;
  ad::MomentumOptimizer opt;
  std::size_t step = 0;  // completed steps
  std::size_t diverged = 0;
  Clock::time_point started = Clock::now();
  double clock_offset = 0.0;

  Runner(const TrainConfig& c, TrainedModel& m) : cfg(c), model(m), opt(c.lr, c.momentum, c.clip_norm) {}

  double elapsed() const {
    return clock_offset + std::chrono::duration<double>(Clock::now() - started).count();
  }
  bool should_log(std::size_t s) const { return s % cfg.log_every == 0 || s == cfg.total_steps(); }
  bool should_checkpoint(std::size_t s) const {
    return !cfg.checkpoint.empty() && cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0;
  }
  bool should_stop(std::size_t s) const { return cfg.stop_after > 0 && s >= cfg.stop_after; }

  // Applies a loaded checkpoint's shared parts; returns it for the rest.
  std::optional<RunCheckpoint> try_resume() {
    if (!cfg.resume || cfg.checkpoint.empty() || !std::filesystem::exists(cfg.checkpoint)) return std::nullopt;
    RunCheckpoint ck = load_run(cfg.checkpoint);
    if (ck.step > cfg.total_steps()) throw FormatError("checkpoint is past the configured step budget");
    model.params = ck.params;
    opt.velocity() = ck.velocity;
    step = ck.step;
    model.log = ck.log;
    if (!ck.log.empty()) {
      diverged = ck.log.back().diverged_particles;
      clock_offset = ck.log.back().wallclock_s;
    }
    return ck;
  }

  RunCheckpoint snapshot() const {
    RunCheckpoint ck;
    ck.params = model.params;
    ck.velocity = opt.velocity();
    ck.step = step;
    ck.log = model.log;
    return ck;
  }
};

RealArray gather_rows(const RealArray& x, std::span<const std::size_t> idx) {
  RealArray out({idx.size(), x.cols()});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto src = x.row_view(idx[k]);
    std::copy(src.begin(), src.end(), out.row_view(k).begin());
  }
  return out;
}

double mean_potential(const ebm::ContinuousEnergyModel& m, const ParamStore& params, const RealArray& x) {
  ad::Tape tape(params);
  return tape.item(ad::mean(m.potential(tape, tape.constant(x))));
}

// ---- continuous ----

class ContinuousRun {
 public:
  ContinuousRun(const data::ContinuousSplit& split, const TrainConfig& cfg, const data::ContinuousDataset* dev)
      : split_(split), cfg_(cfg), dev_(dev), run_(cfg, model_) {}

  TrainedModel run() {
    const auto& L = split_.labeled;
    if (L.size() == 0) throw InvalidArgument("train: empty labeled set");
    const bool needs_unlabeled =
        cfg_.method == Method::kPretrainFinetune || (cfg_.method == Method::kJoint && cfg_.unsup_weight > 0.0);
    if (needs_unlabeled && split_.unlabeled.rows() == 0) throw InvalidArgument("train: empty unlabeled set");

    model_.modality = Modality::kContinuous;
    model_.method = cfg_.method;
    std::vector<std::size_t> sizes{L.points.cols()};
    for (std::size_t i = 0; i < cfg_.layers; ++i) sizes.push_back(cfg_.hidden);
    pot::MlpBody body{"body", sizes, pot::Activation::kTanh};
    model_.net = pot::ClassifierNet{body, L.classes(), "head"};
    pot_ = pot::MlpPotential{body, "pot"};

    Rng init = stream_rng(cfg_.seed, kInit, 0);
    if (cfg_.method == Method::kPretrainFinetune) {
      pot_.init(model_.params, init);
    } else {
      model_.net.init(model_.params, init);
    }
    if (needs_unlabeled) {
      Rng chain_rng = stream_rng(cfg_.seed, kChain, 0);
      chain_ = sampling::ChainState::standard_normal(cfg_.sampler.particles, L.points.cols(), chain_rng);
      chain_.sgld = cfg_.sampler.sgld;
      chain_.steps_per_update = cfg_.sampler.steps_per_update;
      chain_.reinit_prob = cfg_.sampler.reinit_prob;
      if (cfg_.sampler.use_generator) {
        gen_.emplace(cfg_.sampler.latent_dim, cfg_.sampler.generator_hidden, L.points.cols(), chain_rng);
      }
    }

    labeled_.emplace(L.size(), cfg_.batch_labeled, cfg_.seed, kLabeled);
    if (split_.unlabeled.rows() > 0) {
      unlabeled_.emplace(split_.unlabeled.rows(), cfg_.batch_unlabeled, cfg_.seed, kUnlabeled);
    }

    std::optional<ParamStore> velocity;
    if (auto ck = run_.try_resume()) {
      if (ck->particles) chain_.particles = *ck->particles;
      if (gen_) {
        for (const auto& n : ck->generator.names()) gen_->params().set(n, ck->generator.value(n));
      }
      if (!ck->log.empty()) chain_.divergences = ck->log.back().diverged_particles;
      velocity = ck->velocity;
      if (cfg_.method == Method::kPretrainFinetune && run_.step >= cfg_.pretrain_steps) enter_finetune(false);
    }
    const bool in_pretrain = cfg_.method == Method::kPretrainFinetune && run_.step < cfg_.pretrain_steps;
    run_.opt = ad::MomentumOptimizer(in_pretrain ? cfg_.pretrain_lr : cfg_.lr, cfg_.momentum, cfg_.clip_norm);
    if (velocity) run_.opt.velocity() = *velocity;

    const std::size_t total = cfg_.total_steps();
    while (run_.step < total) {
      const std::size_t s = run_.step;  // 0-based index of the step being taken
      LogRow row;
      if (cfg_.method == Method::kPretrainFinetune && s < cfg_.pretrain_steps) {
        row.loss_unsup = pretrain_step(s);
      } else {
        if (cfg_.method == Method::kPretrainFinetune && !finetuning_) enter_finetune(true);
        const auto losses = supervised_step(s - (cfg_.method == Method::kPretrainFinetune ? cfg_.pretrain_steps : 0), s);
        row.loss_sup = losses.first;
        row.loss_unsup = losses.second;
      }
      run_.step = s + 1;
      if (run_.should_log(run_.step)) {
        row.step = run_.step;
        if (classifier_ready()) {
          row.metric_train = evaluate(model_, split_.labeled).primary();
          if (dev_ != nullptr) row.metric_dev = evaluate(model_, *dev_).primary();
        }
        row.diverged_particles = chain_.divergences;
        row.wallclock_s = run_.elapsed();
        model_.log.push_back(row);
      }
      if (run_.should_checkpoint(run_.step) || (run_.should_stop(run_.step) && !cfg_.checkpoint.empty())) save();
      if (run_.should_stop(run_.step)) break;
    }
    model_.steps_done = run_.step;
    model_.complete = run_.step == total;
    if (cfg_.method == Method::kPretrainFinetune && model_.complete && !finetuning_) enter_finetune(true);
    if (classifier_ready()) model_.train_metrics = evaluate(model_, split_.labeled);
    return std::move(model_);
  }

 private:
  bool classifier_ready() const { return cfg_.method != Method::kPretrainFinetune || finetuning_; }

  void save() {
    RunCheckpoint ck = run_.snapshot();
    if (chain_.particles.size() > 0) ck.particles = chain_.particles;
    if (gen_) ck.generator = gen_->params();
    save_run(cfg_.checkpoint, ck);
  }

  // Drops the potential head and attaches a fresh K x H classifier head.
  void enter_finetune(bool fresh_head) {
    finetuning_ = true;
    if (fresh_head) {
      model_.params.erase(pot_.head + ".w");
      model_.params.erase(pot_.head + ".b");
      Rng head_rng = stream_rng(cfg_.seed, kHeadInit, 0);
      model_.net.init_head(model_.params, head_rng);
      run_.opt = ad::MomentumOptimizer(cfg_.lr, cfg_.momentum, cfg_.clip_norm);
    }
    if (cfg_.freeze_encoder) {
      hidden_ = pot::mlp_hidden_batch(model_.net.body, model_.params, split_.labeled.points);
    }
  }

  double pretrain_step(std::size_t s) {
    Rng rng = stream_rng(cfg_.seed, kStep, s);
    const auto m = ebm::mlp_model(pot_);
    const RealArray samples = sampling::sample_batch(m, model_.params, chain_, gen_ ? &*gen_ : nullptr, rng);
    const RealArray batch = gather_rows(split_.unlabeled, unlabeled_->batch(s));
    model_.params.zero_grad();
    model_.params.accumulate_grad(ebm::sampled_ml_gradient(m, model_.params, batch, samples), -1.0);
    run_.opt.step(model_.params);
    if (gen_) gen_->update(samples, cfg_.sampler.generator_lr, rng);
    if (!run_.should_log(s + 1)) return kNaN;
    return mean_potential(m, model_.params, samples) - mean_potential(m, model_.params, batch);
  }

  // Returns (supervised loss, unsupervised surrogate or NaN).
  std::pair<double, double> supervised_step(std::size_t local, std::size_t s) {
    const auto idx = labeled_->batch(local);
    const auto& L = split_.labeled;
    std::vector<int> y;
    for (auto i : idx) y.push_back(L.labels[i]);
    model_.params.zero_grad();
    double loss_sup = 0.0;
    {
      ad::Tape tape(model_.params);
      ad::Var logits;
      if (finetuning_ && cfg_.freeze_encoder) {
        logits = model_.net.logits_from_hidden(tape, tape.constant(gather_rows(hidden_, idx)));
      } else {
        logits = model_.net.logits(tape, tape.constant(gather_rows(L.points, idx)));
      }
      ad::Var loss = ad::scale(ad::softmax_xent(logits, y), 1.0 / static_cast<double>(idx.size()));
      tape.backward(loss);
      loss_sup = tape.item(loss);
    }
    double loss_unsup = kNaN;
    if (cfg_.method == Method::kJoint && cfg_.unsup_weight > 0.0) {
      Rng rng = stream_rng(cfg_.seed, kStep, s);
      const auto m = ebm::marginal_fixed_model(model_.net);
      const RealArray samples = sampling::sample_batch(m, model_.params, chain_, gen_ ? &*gen_ : nullptr, rng);
      const RealArray batch = gather_rows(split_.unlabeled, unlabeled_->batch(s));
      model_.params.accumulate_grad(ebm::sampled_ml_gradient(m, model_.params, batch, samples), -cfg_.unsup_weight);
      if (gen_) gen_->update(samples, cfg_.sampler.generator_lr, rng);
      if (run_.should_log(s + 1)) {
        loss_unsup = mean_potential(m, model_.params, samples) - mean_potential(m, model_.params, batch);
      }
    }
    if (finetuning_ && cfg_.freeze_encoder) {
      run_.opt.step(model_.params, model_.net.head_names());
    } else {
      run_.opt.step(model_.params);
    }
    return {loss_sup, loss_unsup};
  }

  const data::ContinuousSplit& split_;
  const TrainConfig& cfg_;
  const data::ContinuousDataset* dev_;
  TrainedModel model_;
  Runner run_;
  pot::MlpPotential pot_;
  sampling::ChainState chain_;
  std::optional<sampling::AuxGenerator> gen_;
  std::optional<BatchSchedule> labeled_;
  std::optional<BatchSchedule> unlabeled_;
  bool finetuning_ = false;
  RealArray hidden_;
};

// ---- sequence ----

class SequenceRun {
 public:
  SequenceRun(const data::SequenceSplit& split, const TrainConfig& cfg, const data::SequenceDataset* dev)
      : split_(split), cfg_(cfg), dev_(dev), run_(cfg, model_) {}

  TrainedModel run() {
    const auto& L = split_.labeled;
    if (L.size() == 0) throw InvalidArgument("train: empty labeled set");
    const bool needs_unlabeled =
        cfg_.method == Method::kPretrainFinetune || (cfg_.method == Method::kJoint && cfg_.unsup_weight > 0.0);
    if (needs_unlabeled && split_.unlabeled.empty()) throw InvalidArgument("train: empty unlabeled set");

    model_.modality = Modality::kSequence;
    model_.method = cfg_.method;
    model_.label_names = L.desc.label_names;
    auto& enc = model_.enc;
    enc.vocab = L.desc.vocab;
    enc.dim = cfg_.embed_dim;
    enc.classes = L.desc.states;

    Rng init = stream_rng(cfg_.seed, kInit, 0);
    enc.init(model_.params, init);
    if (cfg_.method != Method::kPretrainFinetune) enc.init_tag_head(model_.params, init);

    labeled_.emplace(L.size(), cfg_.batch_labeled, cfg_.seed, kLabeled);
    if (!split_.unlabeled.empty()) {
      unlabeled_.emplace(split_.unlabeled.size(), cfg_.batch_unlabeled, cfg_.seed, kUnlabeled);
    }
    if (needs_unlabeled) {
      noise_ = nce::NoiseLM::fit(split_.unlabeled, L.desc.vocab, L.desc.max_len);
      model_.params.add(kLogC, RealArray::scalar(initial_log_c()));
    }

    std::optional<ParamStore> velocity;
    if (auto ck = run_.try_resume()) {
      if (ck->noise) noise_ = *ck->noise;
      velocity = ck->velocity;
      if (cfg_.method == Method::kPretrainFinetune && run_.step >= cfg_.pretrain_steps) enter_finetune(false);
    }
    const bool in_pretrain = cfg_.method == Method::kPretrainFinetune && run_.step < cfg_.pretrain_steps;
    run_.opt = ad::MomentumOptimizer(in_pretrain ? cfg_.pretrain_lr : cfg_.lr, cfg_.momentum, cfg_.clip_norm);
    if (velocity) run_.opt.velocity() = *velocity;

    const std::size_t total = cfg_.total_steps();
    while (run_.step < total) {
      const std::size_t s = run_.step;
      LogRow row;
      if (cfg_.method == Method::kPretrainFinetune && s < cfg_.pretrain_steps) {
        row.loss_unsup = pretrain_step(s);
      } else {
        if (cfg_.method == Method::kPretrainFinetune && !finetuning_) enter_finetune(true);
        const auto losses = supervised_step(s - (cfg_.method == Method::kPretrainFinetune ? cfg_.pretrain_steps : 0), s);
        row.loss_sup = losses.first;
        row.loss_unsup = losses.second;
      }
      maybe_refresh(s);
      run_.step = s + 1;
      if (run_.should_log(run_.step)) {
        row.step = run_.step;
        if (tagger_ready()) {
          row.metric_train = evaluate(model_, split_.labeled).primary();
          if (dev_ != nullptr) row.metric_dev = evaluate(model_, *dev_).primary();
        }
        row.wallclock_s = run_.elapsed();
        model_.log.push_back(row);
      }
      if (run_.should_checkpoint(run_.step) || (run_.should_stop(run_.step) && !cfg_.checkpoint.empty())) save();
      if (run_.should_stop(run_.step)) break;
    }
    model_.steps_done = run_.step;
    model_.complete = run_.step == total;
    if (cfg_.method == Method::kPretrainFinetune && model_.complete && !finetuning_) enter_finetune(true);
    if (tagger_ready()) model_.train_metrics = evaluate(model_, split_.labeled);
    return std::move(model_);
  }

 private:
  bool tagger_ready() const { return cfg_.method != Method::kPretrainFinetune || finetuning_; }
  bool uses_nce() const {
    return cfg_.method == Method::kPretrainFinetune || (cfg_.method == Method::kJoint && cfg_.unsup_weight > 0.0);
  }

  ebm::SeqPotentialFn unsup_potential() const {
    const pot::SeqEncoder& enc = model_.enc;
    if (cfg_.method == Method::kPretrainFinetune) {
      return [&enc](ad::Tape& t, std::span<const int> x) { return enc.pretrain_potential(t, x); };
    }
    return [&enc](ad::Tape& t, std::span<const int> x) { return ebm::marginal_potential_seq(t, enc, x); };
  }

  double potential_value(std::span<const int> x) const {
    ad::Tape tape(static_cast<const ParamStore&>(model_.params));
    return tape.item(unsup_potential()(tape, x));
  }

  // -log Z estimated by importance sampling under the noise: start the
  // discriminant near balance.
  double initial_log_c() const {
    std::vector<double> w;
    Rng rng = stream_rng(cfg_.seed, kInit, 1);
    for (const auto& x : noise_.sample(64, rng)) w.push_back(potential_value(x) - noise_.log_prob(x));
    return -(log_sum_exp(w) - std::log(static_cast<double>(w.size())));
  }

  void save() {
    RunCheckpoint ck = run_.snapshot();
    if (uses_nce()) ck.noise = noise_;
    save_run(cfg_.checkpoint, ck);
  }

  void enter_finetune(bool fresh_head) {
    finetuning_ = true;
    if (fresh_head) {
      Rng head_rng = stream_rng(cfg_.seed, kHeadInit, 0);
      model_.enc.init_tag_head(model_.params, head_rng);
      run_.opt = ad::MomentumOptimizer(cfg_.lr, cfg_.momentum, cfg_.clip_norm);
    }
    if (cfg_.freeze_encoder) {
      features_.clear();
      for (const auto& x : split_.labeled.tokens) {
        features_.push_back(pot::seq_features(model_.enc, model_.params, x).concat);
      }
    }
  }

  ad::Var nce_term(ad::Tape& tape, std::size_t s) {
    Rng rng = stream_rng(cfg_.seed, kStep, s);
    std::vector<data::Sequence> batch;
    for (auto i : unlabeled_->batch(s)) batch.push_back(split_.unlabeled[i]);
    const auto noise_batch = noise_.sample(cfg_.nce.nu * batch.size(), rng);
    return nce::nce_loss(tape, unsup_potential(), tape.param(kLogC), noise_, batch, noise_batch, cfg_.nce.nu);
  }

  double pretrain_step(std::size_t s) {
    model_.params.zero_grad();
    ad::Tape tape(model_.params);
    ad::Var loss = nce_term(tape, s);
    tape.backward(loss);
    run_.opt.step(model_.params);
    return tape.item(loss);
  }

  std::pair<double, double> supervised_step(std::size_t local, std::size_t s) {
    const auto idx = labeled_->batch(local);
    const auto& L = split_.labeled;
    const auto& enc = model_.enc;
    model_.params.zero_grad();
    ad::Tape tape(model_.params);
    std::vector<ad::Var> nlls;
    for (auto i : idx) {
      ad::Var feats = (finetuning_ && cfg_.freeze_encoder) ? tape.constant(features_[i]) : enc.features(tape, L.tokens[i]);
      nlls.push_back(crf::nll(enc.tag_logits(tape, feats), enc.edge(tape), L.labels[i], enc.start(tape)));
    }
    ad::Var sup = ad::mean(ad::concat_rows(nlls));
    ad::Var total = sup;
    ad::Var unsup;
    const bool joint = cfg_.method == Method::kJoint && cfg_.unsup_weight > 0.0;
    if (joint) {
      // Per-draw mean over the 1 + nu data and noise draws.
      unsup = ad::scale(nce_term(tape, s), 1.0 / static_cast<double>(1 + cfg_.nce.nu));
      total = ad::add(sup, ad::scale(unsup, cfg_.unsup_weight));
    }
    tape.backward(total);
    if (finetuning_ && cfg_.freeze_encoder) {
      run_.opt.step(model_.params, enc.tag_names());
    } else {
      run_.opt.step(model_.params);
    }
    return {tape.item(sup), joint ? tape.item(unsup) : kNaN};
  }

  // Noise refit after every refresh_every-th step while the NCE term is active.
  void maybe_refresh(std::size_t s) {
    if (!uses_nce() || !cfg_.nce.dnce) return;
    if (cfg_.method == Method::kPretrainFinetune && s >= cfg_.pretrain_steps) return;
    if ((s + 1) % cfg_.nce.refresh_every != 0) return;
    Rng rng = stream_rng(cfg_.seed, kRefresh, s);
    const nce::NoiseLM current = noise_;
    auto score = [this](const data::Sequence& x) { return potential_value(x); };
    noise_ = nce::dnce_refresh(current, split_.unlabeled, score, rng, cfg_.nce.refresh);
  }

  const data::SequenceSplit& split_;
  const TrainConfig& cfg_;
  const data::SequenceDataset* dev_;
  TrainedModel model_;
  Runner run_;
  std::optional<BatchSchedule> labeled_;
  std::optional<BatchSchedule> unlabeled_;
  nce::NoiseLM noise_;
  bool finetuning_ = false;
  std::vector<RealArray> features_;
};

}  // namespace

TrainedModel train(const data::ContinuousSplit& split, const TrainConfig& cfg, const data::ContinuousDataset* dev) {
  cfg.validate();
  if (cfg.modality != Modality::kContinuous) throw InvalidArgument("train: config modality is not continuous");
  return ContinuousRun(split, cfg, dev).run();
}

TrainedModel train(const data::SequenceSplit& split, const TrainConfig& cfg, const data::SequenceDataset* dev) {
  cfg.validate();
  if (cfg.modality != Modality::kSequence) throw InvalidArgument("train: config modality is not sequence");
  return SequenceRun(split, cfg, dev).run();
}

}  // namespace ebmssl::pipe
