#pragma once

// Synthetic datasets and labeled/unlabeled splits.
//
// Labels are 0-based in memory. The text dump format writes labels 1-based:
//   continuous: "# <descriptor>" then one line per item "label v1 v2 ..."
//   sequence:   "# <descriptor>" then two lines per item: tokens, labels

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ebmssl/param_store.hpp"
#include "ebmssl/real_array.hpp"

namespace ebmssl::data {

using Sequence = std::vector<int>;

struct MixtureDescriptor {
  std::size_t classes = 4;
  std::size_t dim = 2;
  double radius = 4.0;
  double stddev = 1.0;

  std::vector<double> mean(std::size_t k) const;
  std::string to_string() const;
  static MixtureDescriptor parse(const std::string& s);
};

struct ContinuousDataset {
  RealArray points;  // N x D
  std::vector<int> labels;
  MixtureDescriptor desc;

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const { return desc.classes; }
  ContinuousDataset subset(std::span<const std::size_t> idx) const;
  void validate() const;
};

struct HmmDescriptor {
  std::size_t states = 3;
  std::size_t vocab = 16;
  std::size_t max_len = 12;
  std::vector<double> initial;     // K
  std::vector<double> transition;  // K x K, row = from
  std::vector<double> emission;    // K x V
  std::vector<double> length;      // L, P(len = l + 1)
  std::vector<std::string> label_names;

  // Diagonally dominant transitions (stay_prob on the diagonal), each state
  // owning the tokens t with t % K == k with Zipf weights, plus a shared
  // uniform component; lengths uniform on [min_len, max_len].
  static HmmDescriptor standard(std::size_t states, std::size_t vocab, std::size_t max_len,
                                std::size_t min_len = 0, double stay_prob = 0.7, double shared = 0.3);
  // Three-label O / B-ENT / I-ENT structure: I only follows B or I.
  static HmmDescriptor bio(std::size_t vocab, std::size_t max_len, std::size_t min_len = 0, double shared = 0.3);
  // Every state emits exactly one token (vocab == states).
  static HmmDescriptor identity(std::size_t states, std::size_t max_len);

  bool is_bio() const;
  void validate() const;
  std::string to_string() const;
  static HmmDescriptor parse(const std::string& s);
};

struct SequenceDataset {
  std::vector<Sequence> tokens;
  std::vector<Sequence> labels;
  HmmDescriptor desc;

  std::size_t size() const { return tokens.size(); }
  SequenceDataset subset(std::span<const std::size_t> idx) const;
  void validate() const;
};

ContinuousDataset gen_mixture(std::size_t classes, std::size_t per_class, std::uint64_t seed, double radius = 4.0,
                              double stddev = 1.0);
ContinuousDataset gen_mixture(const MixtureDescriptor& desc, std::size_t per_class, std::uint64_t seed);

// n unlabeled points, class drawn uniformly per point. The first m points
// do not depend on n.
RealArray sample_mixture_points(const MixtureDescriptor& desc, std::size_t n, std::uint64_t seed);

SequenceDataset gen_hmm(const HmmDescriptor& desc, std::size_t n, std::uint64_t seed);
SequenceDataset gen_hmm(std::size_t states, std::size_t vocab, std::size_t n, std::size_t max_len,
                        std::uint64_t seed);

// Exact per-position posterior p(y_i | x) under the generating HMM, l x K.
RealArray hmm_posteriors(const HmmDescriptor& desc, std::span<const int> x);
// argmax_i of hmm_posteriors; ties to the lowest state.
Sequence hmm_posterior_decode(const HmmDescriptor& desc, std::span<const int> x);
// Token accuracy of posterior decoding: the Bayes ceiling for token accuracy.
double bayes_token_accuracy(const SequenceDataset& ds);

struct ContinuousSplit {
  ContinuousDataset labeled;
  RealArray unlabeled;  // U x D, no labels
  double proportion = 1.0;
  double ratio = 0.0;
  std::vector<std::size_t> labeled_index;
  std::vector<std::size_t> unlabeled_index;
};

struct SequenceSplit {
  SequenceDataset labeled;
  std::vector<Sequence> unlabeled;  // no labels
  double proportion = 1.0;
  double ratio = 0.0;
  std::vector<std::size_t> labeled_index;
};

struct SplitOptions {
  // Sample ceil(p * n_k) items from each class instead of ceil(p * N) overall.
  bool stratified = false;
  // Size of the pool labels are drawn from (the first label_pool items);
  // 0 means the whole dataset. The rest serves as the unlabeled reservoir.
  std::size_t label_pool = 0;
};

// Labeled subset of size ceil(p * pool) with every class present (resampled
// until it is), unlabeled set of round(r * |labeled|) items from the
// remaining items. Throws InvalidArgument when the pool is exhausted.
ContinuousSplit split(const ContinuousDataset& ds, double p, double r, std::uint64_t seed,
                      const SplitOptions& opt = {});
// Unlabeled sequences are taken from `unlabeled_pool` when given (a separate
// draw), else from the items not selected as labeled.
SequenceSplit split(const SequenceDataset& ds, double p, double r, std::uint64_t seed,
                    const std::vector<Sequence>* unlabeled_pool = nullptr);

void write_dataset(std::ostream& out, const ContinuousDataset& ds);
void write_dataset(std::ostream& out, const SequenceDataset& ds);
ContinuousDataset read_continuous(std::istream& in);
SequenceDataset read_sequences(std::istream& in);
void save_dataset(const std::filesystem::path& path, const ContinuousDataset& ds);
void save_dataset(const std::filesystem::path& path, const SequenceDataset& ds);

}  // namespace ebmssl::data
