#pragma once

// Training procedures: supervised baseline, pre-training + fine-tuning and
// joint training, for mixture (continuous) and token-sequence data.
//
// Every run is a fixed number of optimizer steps. Step s draws one labeled
// and one unlabeled batch, each a window of a per-epoch shuffle of its pool,
// and all randomness of step s comes from a generator seeded by
// (seed, stream, s). A run can therefore stop after any checkpoint and
// resume to the same final parameters.
//
// Pre-training + fine-tuning counts steps across both stages: steps
// 1..pretrain_steps fit the unconditional model, the next `steps` fit the
// head.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebmssl/data.hpp"
#include "ebmssl/nce.hpp"
#include "ebmssl/param_store.hpp"
#include "ebmssl/potentials.hpp"
#include "ebmssl/samplers.hpp"

namespace ebmssl::pipe {

enum class Modality { kContinuous, kSequence };
enum class Method { kSupervised, kPretrainFinetune, kJoint };

std::string to_string(Modality m);
std::string to_string(Method m);
Modality parse_modality(const std::string& s);
Method parse_method(const std::string& s);

struct SamplerConfig {
  sampling::SgldConfig sgld{0.05, 1.0, 8.0};
  std::size_t particles = 64;
  std::size_t steps_per_update = 20;
  double reinit_prob = 0.05;
  bool use_generator = false;
  std::size_t latent_dim = 2;
  std::size_t generator_hidden = 32;
  double generator_lr = 0.01;
};

struct NceConfig {
  std::size_t nu = 10;
  bool dnce = true;
  std::size_t refresh_every = 500;
  nce::DnceConfig refresh;
};

struct TrainConfig {
  Modality modality = Modality::kContinuous;
  Method method = Method::kSupervised;

  double lr = 0.05;
  double pretrain_lr = 0.01;
  double momentum = 0.9;
  double clip_norm = 5.0;
  std::size_t steps = 400;
  std::size_t pretrain_steps = 400;
  std::size_t batch_labeled = 16;
  std::size_t batch_unlabeled = 32;
  double unsup_weight = 0.5;  // joint only
  bool freeze_encoder = true;  // fine-tuning only

  // continuous architecture
  std::size_t hidden = 32;
  std::size_t layers = 2;
  // sequence architecture
  std::size_t embed_dim = 16;

  SamplerConfig sampler;
  NceConfig nce;

  std::size_t log_every = 50;
  std::uint64_t seed = 0;

  // Checkpoint file; written every checkpoint_every steps (0 disables).
  std::filesystem::path checkpoint;
  std::size_t checkpoint_every = 0;
  bool resume = false;
  // Stop after this many steps in total (for interrupting runs); 0 = no limit.
  std::size_t stop_after = 0;

  std::size_t total_steps() const;
  void validate() const;
};

struct Metrics {
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  // NaN unless the label set is BIO-shaped.
  double precision = std::numeric_limits<double>::quiet_NaN();
  double recall = std::numeric_limits<double>::quiet_NaN();
  double span_f1 = std::numeric_limits<double>::quiet_NaN();

  // span_f1 when defined, else accuracy.
  double primary() const;
  std::string primary_name() const;
};

struct LogRow {
  std::size_t step = 0;
  double loss_sup = std::numeric_limits<double>::quiet_NaN();
  double loss_unsup = std::numeric_limits<double>::quiet_NaN();
  double metric_train = std::numeric_limits<double>::quiet_NaN();
  double metric_dev = std::numeric_limits<double>::quiet_NaN();
  std::size_t diverged_particles = 0;
  double wallclock_s = 0.0;
};

void write_log_csv(std::ostream& out, std::span<const LogRow> rows);

struct TrainedModel {
  Modality modality = Modality::kContinuous;
  Method method = Method::kSupervised;
  ParamStore params;
  pot::ClassifierNet net;  // continuous
  pot::SeqEncoder enc;     // sequence
  std::vector<std::string> label_names;
  Metrics train_metrics;
  std::vector<LogRow> log;
  std::size_t steps_done = 0;
  bool complete = false;
};

// Continuous modality.
TrainedModel train(const data::ContinuousSplit& split, const TrainConfig& cfg,
                   const data::ContinuousDataset* dev = nullptr);
// Sequence modality.
TrainedModel train(const data::SequenceSplit& split, const TrainConfig& cfg,
                   const data::SequenceDataset* dev = nullptr);

template <class Split, class Dev>
TrainedModel train_supervised(const Split& split, TrainConfig cfg, const Dev* dev = nullptr) {
  cfg.method = Method::kSupervised;
  return train(split, cfg, dev);
}
template <class Split, class Dev>
TrainedModel train_pretrain_finetune(const Split& split, TrainConfig cfg, const Dev* dev = nullptr) {
  cfg.method = Method::kPretrainFinetune;
  return train(split, cfg, dev);
}
template <class Split, class Dev>
TrainedModel train_joint(const Split& split, TrainConfig cfg, const Dev* dev = nullptr) {
  cfg.method = Method::kJoint;
  return train(split, cfg, dev);
}

std::vector<int> predict(const TrainedModel& model, const RealArray& x);
std::vector<data::Sequence> predict(const TrainedModel& model, std::span<const data::Sequence> xs);

Metrics evaluate(const TrainedModel& model, const data::ContinuousDataset& test);
Metrics evaluate(const TrainedModel& model, const data::SequenceDataset& test);

struct Span {
  std::size_t sentence = 0;
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::string type;
  friend auto operator<=>(const Span&, const Span&) = default;
};

// Spans decoded from B-X / I-X / O names. An I-X not continuing a span of
// type X opens a new span.
std::vector<Span> bio_spans(std::span<const data::Sequence> labels, std::span<const std::string> names);
bool is_bio_label_set(std::span<const std::string> names);

// Exact-match span precision, recall and F1. Precision is 0 when nothing is
// predicted, recall 0 when the gold set is empty; both empty gives 1, 1, 1.
Metrics span_scores(std::span<const data::Sequence> gold, std::span<const data::Sequence> pred,
                    std::span<const std::string> names);
double token_accuracy(std::span<const data::Sequence> gold, std::span<const data::Sequence> pred);

// Generator seeded by (seed, stream, index).
Rng stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

// Round-robin batches over per-epoch shuffles of 0..n-1.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n, std::size_t batch, std::uint64_t seed, std::uint64_t stream);
  std::vector<std::size_t> batch(std::size_t step) const;
  std::size_t batch_size() const { return batch_; }

 private:
  const std::vector<std::size_t>& epoch(std::size_t e) const;
  std::size_t n_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::uint64_t stream_;
  mutable std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  mutable std::vector<std::size_t> perm_;
};

}  // namespace ebmssl::pipe
