#pragma once

// Noise-contrastive estimation for sequence potentials.
//
// The discriminant against noise is G(x) = u(x) + log_c - log p_noise(x) and
// the loss, for nu noise draws per data draw, is
//   -mean_data log s(G - log nu) - nu * mean_noise log(1 - s(G - log nu))
// with s the logistic function. log_c is a single trainable scalar standing
// in for -log Z of the energy model.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ebmssl/ebm.hpp"
#include "ebmssl/param_store.hpp"
#include "ebmssl/tape.hpp"

namespace ebmssl::nce {

using ebm::Sequence;

// Add-one smoothed bigram model with an explicit (unsmoothed) length
// distribution over 1..max_len. Context row 0 is the sequence start.
class NoiseLM {
 public:
  NoiseLM() = default;
  NoiseLM(std::size_t vocab, std::size_t max_len);

  static NoiseLM fit(std::span<const Sequence> corpus, std::size_t vocab, std::size_t max_len);

  std::size_t vocab() const { return vocab_; }
  std::size_t max_len() const { return max_len_; }

  double log_prob(std::span<const int> x) const;
  double next_prob(int prev, int token) const;  // prev = -1 for the start context
  double length_prob(std::size_t len) const;
  Sequence sample(Rng& rng) const;
  std::vector<Sequence> sample(std::size_t n, Rng& rng) const;
  // Exact entropy in nats of the sequence distribution.
  double entropy() const;

  const std::vector<std::int64_t>& bigram_counts() const { return bigram_; }
  const std::vector<std::int64_t>& length_counts() const { return lengths_; }

  // Stored as "<prefix>.bigram" ((V+1) x V) and "<prefix>.length" (L).
  void to_params(ParamStore& store, const std::string& prefix = "noise") const;
  static NoiseLM from_params(const ParamStore& store, const std::string& prefix = "noise");

  friend bool operator==(const NoiseLM&, const NoiseLM&) = default;

 private:
  void add(std::span<const int> x);
  std::size_t vocab_ = 0;
  std::size_t max_len_ = 0;
  std::vector<std::int64_t> bigram_;   // (V+1) x V
  std::vector<std::int64_t> row_totals_;
  std::vector<std::int64_t> lengths_;  // L
  std::int64_t total_sequences_ = 0;
};

NoiseLM noise_fit(std::span<const Sequence> corpus, std::size_t vocab, std::size_t max_len);

// Differentiable NCE loss. log_c is a 1 x 1 Var (usually a parameter).
ad::Var nce_loss(ad::Tape& tape, const ebm::SeqPotentialFn& potential, ad::Var log_c, const NoiseLM& noise,
                 std::span<const Sequence> data, std::span<const Sequence> noise_batch, std::size_t nu);

struct NceResult {
  double loss = 0.0;
  ebm::Gradients grads;
};

// Loss value plus parameter gradients; log_c is read from params[log_c_name].
NceResult nce_loss(const ebm::SeqPotentialFn& potential, const ParamStore& params, const std::string& log_c_name,
                   const NoiseLM& noise, std::span<const Sequence> data, std::span<const Sequence> noise_batch,
                   std::size_t nu);

// (1 + nu) * H_b(1 / (1 + nu)): the per-data-point loss when the model matches
// the noise exactly.
double matched_loss(std::size_t nu);

struct DnceConfig {
  double model_fraction = 0.5;  // share of refit sequences drawn from the filtered noise samples
  std::size_t max_corpus = 2000;
};

// Refits the noise on a mix of corpus sequences and noise samples filtered
// by the model: draws twice as many noise sequences as needed, keeps the
// higher-scoring half under `score`, and refits bigram and length counts on
// corpus + kept samples. A corpus larger than max_corpus is subsampled.
NoiseLM dnce_refresh(const NoiseLM& noise, std::span<const Sequence> corpus,
                     const std::function<double(const Sequence&)>& score, Rng& rng, const DnceConfig& cfg = {});

}  // namespace ebmssl::nce
