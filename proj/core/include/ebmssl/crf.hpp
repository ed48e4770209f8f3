#pragma once

// Linear-chain CRF over per-position node potentials and an edge matrix.
//
// Labels are 0-based (0..K-1). The score of a labeling is
//   sum_i node[i, y_i] + sum_{i>=1} edge[y_{i-1}, y_i]  (+ start[y_0] if set)
// There is no edge term into the first position unless a start vector is
// supplied, and no end/stop potential.

#include <optional>
#include <span>
#include <vector>

#include "ebmssl/real_array.hpp"
#include "ebmssl/tape.hpp"

namespace ebmssl::crf {

struct ChainPotentials {
  RealArray node;                  // l x K
  RealArray edge;                  // K x K
  std::optional<RealArray> start;  // K, learned start vector

  std::size_t length() const { return node.rows(); }
  std::size_t labels() const { return node.cols(); }
  void validate() const;
};

struct Decoded {
  std::vector<int> labels;
  double score = 0.0;
};

double score(const ChainPotentials& ch, std::span<const int> y);
double forward_log_z(const ChainPotentials& ch);
// -log p(y | x) = forward_log_z - score(y); always >= 0 up to rounding.
double nll(const ChainPotentials& ch, std::span<const int> y);
// Exact MAP labeling; ties go to the lowest label index.
Decoded viterbi(const ChainPotentials& ch);
// Per-position label marginals, l x K.
RealArray marginals(const ChainPotentials& ch);

// Raw recursion shared by the pure functions and the tape operations.
// alpha is l x K; alpha[i][k] = log-sum of scores of prefixes ending in k.
std::vector<double> forward_alpha(std::span<const double> node, std::span<const double> edge,
                                  std::span<const double> start, std::size_t len, std::size_t k);
std::vector<double> backward_beta(std::span<const double> node, std::span<const double> edge,
                                  std::size_t len, std::size_t k);

// Differentiable versions. `start` may be an unbound Var (tape == nullptr).
ad::Var log_partition(ad::Var node, ad::Var edge, ad::Var start = {});
ad::Var chain_score(ad::Var node, ad::Var edge, std::span<const int> y, ad::Var start = {});
// log_partition - chain_score
ad::Var nll(ad::Var node, ad::Var edge, std::span<const int> y, ad::Var start = {});

}  // namespace ebmssl::crf
