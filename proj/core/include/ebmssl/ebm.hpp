#pragma once

// Energy-based model layer: p(x) = exp(u(x)) / Z over a continuous box or a
// finite set of token sequences.
//
// Gradients returned by the estimators are gradients of the mean
// log-likelihood (ascent direction):
//   mean_data grad u(x) - E_model[grad u(x')]
//
// Sequence spaces are trans-dimensional: Z sums over every length in
// [min_len, max_len] with no extra per-length weight.

#include <functional>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ebmssl/crf.hpp"
#include "ebmssl/param_store.hpp"
#include "ebmssl/potentials.hpp"
#include "ebmssl/tape.hpp"

namespace ebmssl::ebm {

using pot::Sequence;
using Gradients = std::map<std::string, RealArray>;

inline constexpr std::size_t kMaxEnumeration = 1'000'000;

struct SequenceSpace {
  std::size_t vocab = 2;
  std::size_t min_len = 1;
  std::size_t max_len = 1;

  // Number of sequences; saturates above kMaxEnumeration + 1.
  std::size_t size() const;
  // All sequences, shorter first, lexicographic within a length.
  std::vector<Sequence> enumerate() const;
  bool contains(std::span<const int> x) const;
};

using SeqPotentialFn = std::function<ad::Var(ad::Tape&, std::span<const int>)>;
// N x D -> N x 1
using BatchPotentialFn = std::function<ad::Var(ad::Tape&, ad::Var)>;

struct DiscreteEnergyModel {
  SequenceSpace space;
  SeqPotentialFn potential;
};

struct ContinuousEnergyModel {
  std::size_t dim = 2;
  BatchPotentialFn potential;
};

using EnergyModel = std::variant<ContinuousEnergyModel, DiscreteEnergyModel>;

// Factories for the potentials in this repository.
DiscreteEnergyModel pretrain_sequence_model(const pot::SeqEncoder& enc, SequenceSpace space);
// Marginal of the joint sequence model: log-sum over label sequences.
DiscreteEnergyModel marginal_sequence_model(const pot::SeqEncoder& enc, SequenceSpace space);
ContinuousEnergyModel mlp_model(const pot::MlpPotential& net);
// Marginal of the joint fixed-dimensional model: logsumexp of the K logits.
ContinuousEnergyModel marginal_fixed_model(const pot::ClassifierNet& net);

double log_unnorm(const DiscreteEnergyModel& m, const ParamStore& params, std::span<const int> x);
double log_unnorm(const ContinuousEnergyModel& m, const ParamStore& params, std::span<const double> x);
// u(x, y) = logits(x)[y]
double log_unnorm(const pot::ClassifierNet& net, const ParamStore& params, std::span<const double> x, int y);
// u(x, y) = sum_i logits[i, y_i] + sum_i A[y_{i-1}, y_i]
double log_unnorm(const pot::SeqEncoder& enc, const ParamStore& params, std::span<const int> x,
                  std::span<const int> y);

// log Z by enumeration; rejects continuous models and spaces larger than
// kMaxEnumeration.
double exact_log_partition(const EnergyModel& m, const ParamStore& params);
double exact_log_partition(const DiscreteEnergyModel& m, const ParamStore& params);
// Normalized probabilities in SequenceSpace::enumerate() order.
std::vector<double> exact_probabilities(const DiscreteEnergyModel& m, const ParamStore& params);

// Mean log-likelihood of the data, differentiable: mean u(data) - log Z.
ad::Var exact_log_likelihood(ad::Tape& tape, const DiscreteEnergyModel& m, std::span<const Sequence> data);

// Data term minus the exact model expectation, computed point by point with
// probability weights.
Gradients exact_ml_gradient(const DiscreteEnergyModel& m, const ParamStore& params,
                            std::span<const Sequence> data);

// Data term minus the sample mean. Samples are put in canonical order before
// reduction so the result does not depend on their order.
Gradients sampled_ml_gradient(const DiscreteEnergyModel& m, const ParamStore& params,
                              std::span<const Sequence> data, std::span<const Sequence> samples);
// data and samples are N x D and M x D.
Gradients sampled_ml_gradient(const ContinuousEnergyModel& m, const ParamStore& params,
                              const RealArray& data, const RealArray& samples);

// p(y | x) = softmax(logits(x)).
std::vector<double> joint_conditional(const pot::ClassifierNet& net, const ParamStore& params,
                                      std::span<const double> x);
// log sum_y exp logits(x)[y]
double marginal_potential_fixed(const pot::ClassifierNet& net, const ParamStore& params,
                                std::span<const double> x);
// log sum over label sequences of exp u(x, y), by the forward recursion.
double marginal_potential_seq(const pot::SeqEncoder& enc, const ParamStore& params, std::span<const int> x);
ad::Var marginal_potential_seq(ad::Tape& tape, const pot::SeqEncoder& enc, std::span<const int> x);

// Node/edge potentials of the joint sequence model for x.
crf::ChainPotentials chain_potentials(const pot::SeqEncoder& enc, const ParamStore& params,
                                      std::span<const int> x);

double total_variation(std::span<const double> p, std::span<const double> q);

}  // namespace ebmssl::ebm
