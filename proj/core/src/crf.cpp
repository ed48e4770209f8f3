#include "ebmssl/crf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ebmssl/error.hpp"

namespace ebmssl::crf {

namespace {

void check_labels(std::span<const int> y, std::size_t len, std::size_t k) {
  if (y.size() != len) {
    throw InvalidArgument("label sequence length " + std::to_string(y.size()) + " != chain length " +
                          std::to_string(len));
  }
  for (int v : y) {
    if (v < 0 || static_cast<std::size_t>(v) >= k) {
      throw InvalidArgument("label " + std::to_string(v) + " outside 0.." + std::to_string(k - 1));
    }
  }
}

double score_raw(std::span<const double> node, std::span<const double> edge,
                 std::span<const double> start, std::size_t k, std::span<const int> y) {
  double s = node[static_cast<std::size_t>(y[0])];
  if (!start.empty()) s += start[static_cast<std::size_t>(y[0])];
  for (std::size_t i = 1; i < y.size(); ++i) {
    // same association as the forward recursion so K = 1 gives nll exactly 0
    s = node[i * k + static_cast<std::size_t>(y[i])] + (s + edge[static_cast<std::size_t>(y[i - 1]) * k + static_cast<std::size_t>(y[i])]);
  }
  return s;
}

std::span<const double> start_span(const ChainPotentials& ch) {
  if (!ch.start) return {};
  return ch.start->values();
}

}  // namespace

void ChainPotentials::validate() const {
  if (node.size() == 0 || node.rank() != 2) throw ShapeError("chain: node potentials must be l x K with l >= 1");
  const std::size_t k = node.cols();
  if (edge.rows() != k || edge.cols() != k || edge.size() != k * k) throw ShapeError("chain: edge must be K x K");
  if (start && start->size() != k) throw ShapeError("chain: start vector must have K entries");
  if (!node.all_finite() || !edge.all_finite() || (start && !start->all_finite())) {
    throw NonFiniteError("chain: non-finite potentials");
  }
}

std::vector<double> forward_alpha(std::span<const double> node, std::span<const double> edge,
                                  std::span<const double> start, std::size_t len, std::size_t k) {
  std::vector<double> alpha(len * k);
  for (std::size_t j = 0; j < k; ++j) alpha[j] = node[j] + (start.empty() ? 0.0 : start[j]);
  std::vector<double> buf(k);
  for (std::size_t i = 1; i < len; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t p = 0; p < k; ++p) buf[p] = alpha[(i - 1) * k + p] + edge[p * k + c];
      alpha[i * k + c] = node[i * k + c] + log_sum_exp(buf);
    }
  }
  return alpha;
}

std::vector<double> backward_beta(std::span<const double> node, std::span<const double> edge,
                                  std::size_t len, std::size_t k) {
  std::vector<double> beta(len * k, 0.0);
  std::vector<double> buf(k);
  for (std::size_t i = len - 1; i-- > 0;) {
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t c = 0; c < k; ++c) buf[c] = edge[p * k + c] + node[(i + 1) * k + c] + beta[(i + 1) * k + c];
      beta[i * k + p] = log_sum_exp(buf);
    }
  }
  return beta;
}

double score(const ChainPotentials& ch, std::span<const int> y) {
  ch.validate();
  check_labels(y, ch.length(), ch.labels());
  return score_raw(ch.node.values(), ch.edge.values(), start_span(ch), ch.labels(), y);
}

double forward_log_z(const ChainPotentials& ch) {
  ch.validate();
  const std::size_t len = ch.length(), k = ch.labels();
  const auto alpha = forward_alpha(ch.node.values(), ch.edge.values(), start_span(ch), len, k);
  return log_sum_exp(std::span<const double>(alpha).subspan((len - 1) * k, k));
}

double nll(const ChainPotentials& ch, std::span<const int> y) {
  return forward_log_z(ch) - score(ch, y);
}

Decoded viterbi(const ChainPotentials& ch) {
  ch.validate();
  const std::size_t len = ch.length(), k = ch.labels();
  const auto node = ch.node.values();
  const auto edge = ch.edge.values();
  const auto start = start_span(ch);
  std::vector<double> delta(len * k);
  std::vector<int> back(len * k, 0);
  for (std::size_t j = 0; j < k; ++j) delta[j] = node[j] + (start.empty() ? 0.0 : start[j]);
  for (std::size_t i = 1; i < len; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const double s = delta[(i - 1) * k + p] + edge[p * k + c];
        if (s > best) {
          best = s;
          arg = static_cast<int>(p);
        }
      }
      delta[i * k + c] = node[i * k + c] + best;
      back[i * k + c] = arg;
    }
  }
  Decoded out;
  out.labels.assign(len, 0);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    if (delta[(len - 1) * k + c] > best) {
      best = delta[(len - 1) * k + c];
      out.labels[len - 1] = static_cast<int>(c);
    }
  }
  for (std::size_t i = len - 1; i > 0; --i) {
    out.labels[i - 1] = back[i * k + static_cast<std::size_t>(out.labels[i])];
  }
  out.score = score_raw(node, edge, start, k, out.labels);
  return out;
}

RealArray marginals(const ChainPotentials& ch) {
  ch.validate();
  const std::size_t len = ch.length(), k = ch.labels();
  const auto alpha = forward_alpha(ch.node.values(), ch.edge.values(), start_span(ch), len, k);
  const auto beta = backward_beta(ch.node.values(), ch.edge.values(), len, k);
  const double log_z = log_sum_exp(std::span<const double>(alpha).subspan((len - 1) * k, k));
  RealArray out({len, k});
  for (std::size_t q = 0; q < len * k; ++q) out[q] = std::exp(alpha[q] + beta[q] - log_z);
  return out;
}

// --- differentiable versions ----------------------------------------------

namespace {

struct ChainInputs {
  ad::Tape* tape;
  std::size_t len;
  std::size_t k;
  bool has_start;
};

ChainInputs check_chain_vars(ad::Var node, ad::Var edge, ad::Var start) {
  if (node.tape == nullptr || node.tape != edge.tape) throw InvalidArgument("crf: node/edge on different tapes");
  if (start.tape != nullptr && start.tape != node.tape) throw InvalidArgument("crf: start on a different tape");
  const ad::Tape& t = *node.tape;
  const std::size_t len = t.rows(node), k = t.cols(node);
  if (t.rows(edge) != k || t.cols(edge) != k) throw ShapeError("crf: edge must be K x K");
  if (start.tape != nullptr && t.rows(start) * t.cols(start) != k) throw ShapeError("crf: start must have K entries");
  return {node.tape, len, k, start.tape != nullptr};
}

ad::Node chain_node(const ChainInputs& ci, ad::Var node, ad::Var edge, ad::Var start) {
  ad::Node n;
  n.op = ad::Op::kCustom;
  n.rows = 1;
  n.cols = 1;
  n.value.assign(1, 0.0);
  n.inputs = {node.id, edge.id};
  if (ci.has_start) n.inputs.push_back(start.id);
  for (auto id : n.inputs) n.requires_grad = n.requires_grad || ci.tape->node(id).requires_grad;
  return n;
}

}  // namespace

ad::Var log_partition(ad::Var node, ad::Var edge, ad::Var start) {
  const auto ci = check_chain_vars(node, edge, start);
  ad::Tape& t = *ci.tape;
  ad::Node n = chain_node(ci, node, edge, start);
  const std::span<const double> st = ci.has_start ? t.value(start) : std::span<const double>{};
  n.aux = forward_alpha(t.value(node), t.value(edge), st, ci.len, ci.k);
  n.value[0] = log_sum_exp(std::span<const double>(n.aux).subspan((ci.len - 1) * ci.k, ci.k));
  n.custom = [len = ci.len, k = ci.k](ad::Tape& tape, const ad::Node& self) {
    ad::Node& nn = tape.node_mut(self.inputs[0]);
    ad::Node& ne = tape.node_mut(self.inputs[1]);
    const double g = self.grad[0];
    const double log_z = self.value[0];
    const auto beta = backward_beta(nn.value, ne.value, len, k);
    const auto& alpha = self.aux;
    if (nn.requires_grad) {
      for (std::size_t q = 0; q < len * k; ++q) nn.grad[q] += g * std::exp(alpha[q] + beta[q] - log_z);
    }
    if (self.inputs.size() > 2) {
      ad::Node& ns = tape.node_mut(self.inputs[2]);
      if (ns.requires_grad)
        for (std::size_t c = 0; c < k; ++c) ns.grad[c] += g * std::exp(alpha[c] + beta[c] - log_z);
    }
    if (ne.requires_grad) {
      for (std::size_t i = 1; i < len; ++i)
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t c = 0; c < k; ++c) {
            const double lp = alpha[(i - 1) * k + p] + ne.value[p * k + c] + nn.value[i * k + c] +
                              beta[i * k + c] - log_z;
            ne.grad[p * k + c] += g * std::exp(lp);
          }
    }
  };
  return t.push(std::move(n));
}

ad::Var chain_score(ad::Var node, ad::Var edge, std::span<const int> y, ad::Var start) {
  const auto ci = check_chain_vars(node, edge, start);
  check_labels(y, ci.len, ci.k);
  ad::Tape& t = *ci.tape;
  ad::Node n = chain_node(ci, node, edge, start);
  n.ints.assign(y.begin(), y.end());
  const std::span<const double> st = ci.has_start ? t.value(start) : std::span<const double>{};
  n.value[0] = score_raw(t.value(node), t.value(edge), st, ci.k, y);
  n.custom = [k = ci.k](ad::Tape& tape, const ad::Node& self) {
    ad::Node& nn = tape.node_mut(self.inputs[0]);
    ad::Node& ne = tape.node_mut(self.inputs[1]);
    const double g = self.grad[0];
    const auto& lab = self.ints;
    if (nn.requires_grad)
      for (std::size_t i = 0; i < lab.size(); ++i) nn.grad[i * k + static_cast<std::size_t>(lab[i])] += g;
    if (ne.requires_grad)
      for (std::size_t i = 1; i < lab.size(); ++i)
        ne.grad[static_cast<std::size_t>(lab[i - 1]) * k + static_cast<std::size_t>(lab[i])] += g;
    if (self.inputs.size() > 2) {
      ad::Node& ns = tape.node_mut(self.inputs[2]);
      if (ns.requires_grad) ns.grad[static_cast<std::size_t>(lab[0])] += g;
    }
  };
  return t.push(std::move(n));
}

ad::Var nll(ad::Var node, ad::Var edge, std::span<const int> y, ad::Var start) {
  return ad::sub(log_partition(node, edge, start), chain_score(node, edge, y, start));
}

}  // namespace ebmssl::crf
