#include "ebmssl/ebm.hpp"

#include <algorithm>
#include <cmath>

#include "ebmssl/error.hpp"

namespace ebmssl::ebm {

std::size_t SequenceSpace::size() const {
  if (vocab == 0 || min_len == 0 || min_len > max_len) throw InvalidArgument("invalid sequence space");
  std::size_t total = 0;
  std::size_t count = 1;
  for (std::size_t l = 1; l <= max_len; ++l) {
    if (count > kMaxEnumeration) return kMaxEnumeration + 1;
    count *= vocab;
    if (l >= min_len) total += count;
    if (total > kMaxEnumeration) return kMaxEnumeration + 1;
  }
  return total;
}

std::vector<Sequence> SequenceSpace::enumerate() const {
  if (size() > kMaxEnumeration) {
    throw SpaceTooLargeError("sequence space exceeds " + std::to_string(kMaxEnumeration) + " points");
  }
  std::vector<Sequence> out;
  for (std::size_t l = min_len; l <= max_len; ++l) {
    Sequence s(l, 0);
    while (true) {
      out.push_back(s);
      std::size_t i = l;
      while (i > 0) {
        --i;
        if (static_cast<std::size_t>(++s[i]) < vocab) break;
        s[i] = 0;
        if (i == 0) goto next_length;
      }
    }
  next_length:;
  }
  return out;
}

bool SequenceSpace::contains(std::span<const int> x) const {
  if (x.size() < min_len || x.size() > max_len) return false;
  return std::all_of(x.begin(), x.end(), [&](int t) { return t >= 0 && static_cast<std::size_t>(t) < vocab; });
}

DiscreteEnergyModel pretrain_sequence_model(const pot::SeqEncoder& enc, SequenceSpace space) {
  return {space, [enc](ad::Tape& t, std::span<const int> x) { return enc.pretrain_potential(t, x); }};
}

DiscreteEnergyModel marginal_sequence_model(const pot::SeqEncoder& enc, SequenceSpace space) {
  return {space, [enc](ad::Tape& t, std::span<const int> x) { return marginal_potential_seq(t, enc, x); }};
}

ContinuousEnergyModel mlp_model(const pot::MlpPotential& net) {
  return {net.body.input_dim(), [net](ad::Tape& t, ad::Var x) { return net.potential(t, x); }};
}

ContinuousEnergyModel marginal_fixed_model(const pot::ClassifierNet& net) {
  return {net.body.input_dim(),
          [net](ad::Tape& t, ad::Var x) { return ad::log_sum_exp_rows(net.logits(t, x)); }};
}

namespace {

void check_in_space(const DiscreteEnergyModel& m, std::span<const int> x) {
  if (!m.space.contains(x)) throw InvalidArgument("sequence is not a point of the model's space");
}

RealArray as_row(std::span<const double> x) {
  return RealArray({1, x.size()}, std::vector<double>(x.begin(), x.end()));
}

std::vector<double> log_unnorm_all(const DiscreteEnergyModel& m, const ParamStore& params,
                                   const std::vector<Sequence>& points) {
  std::vector<double> u(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    ad::Tape tape(params);
    u[i] = tape.item(m.potential(tape, points[i]));
  }
  return u;
}

void add_scaled(Gradients& dst, const Gradients& src, double s) {
  for (const auto& [name, g] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) it = dst.emplace(name, RealArray(g.shape(), 0.0)).first;
    for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += s * g[k];
  }
}

Gradients potential_gradient(const DiscreteEnergyModel& m, const ParamStore& params, std::span<const int> x) {
  ad::Tape tape(params);
  ad::Var u = m.potential(tape, x);
  tape.backward(u);
  return tape.param_gradients();
}

bool seq_less(const Sequence& a, const Sequence& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return a < b;
}

}  // namespace

double log_unnorm(const DiscreteEnergyModel& m, const ParamStore& params, std::span<const int> x) {
  check_in_space(m, x);
  ad::Tape tape(params);
  return tape.item(m.potential(tape, x));
}

double log_unnorm(const ContinuousEnergyModel& m, const ParamStore& params, std::span<const double> x) {
  if (x.size() != m.dim) throw InvalidArgument("point dimension does not match the model");
  ad::Tape tape(params);
  return tape.item(m.potential(tape, tape.constant(as_row(x))));
}

double log_unnorm(const pot::ClassifierNet& net, const ParamStore& params, std::span<const double> x, int y) {
  if (y < 0 || static_cast<std::size_t>(y) >= net.classes) throw InvalidArgument("label out of range");
  return pot::classifier_logits(net, params, x)[static_cast<std::size_t>(y)];
}

double log_unnorm(const pot::SeqEncoder& enc, const ParamStore& params, std::span<const int> x,
                  std::span<const int> y) {
  return crf::score(chain_potentials(enc, params, x), y);
}

double exact_log_partition(const EnergyModel& m, const ParamStore& params) {
  if (std::holds_alternative<ContinuousEnergyModel>(m)) {
    throw InvalidArgument("exact log partition is only defined for enumerable discrete spaces");
  }
  return exact_log_partition(std::get<DiscreteEnergyModel>(m), params);
}

double exact_log_partition(const DiscreteEnergyModel& m, const ParamStore& params) {
  const auto points = m.space.enumerate();
  return log_sum_exp(log_unnorm_all(m, params, points));
}

std::vector<double> exact_probabilities(const DiscreteEnergyModel& m, const ParamStore& params) {
  const auto points = m.space.enumerate();
  auto u = log_unnorm_all(m, params, points);
  const double log_z = log_sum_exp(u);
  for (auto& v : u) v = std::exp(v - log_z);
  return u;
}

ad::Var exact_log_likelihood(ad::Tape& tape, const DiscreteEnergyModel& m, std::span<const Sequence> data) {
  if (data.empty()) throw InvalidArgument("exact_log_likelihood: empty data");
  const auto points = m.space.enumerate();
  std::vector<ad::Var> all;
  all.reserve(points.size());
  for (const auto& x : points) all.push_back(m.potential(tape, x));
  std::vector<ad::Var> observed;
  observed.reserve(data.size());
  for (const auto& x : data) {
    check_in_space(m, x);
    observed.push_back(m.potential(tape, x));
  }
  ad::Var log_z = ad::log_sum_exp(ad::concat_rows(all));
  return ad::sub(ad::mean(ad::concat_rows(observed)), log_z);
}

Gradients exact_ml_gradient(const DiscreteEnergyModel& m, const ParamStore& params,
                            std::span<const Sequence> data) {
  if (data.empty()) throw InvalidArgument("exact_ml_gradient: empty data");
  const auto points = m.space.enumerate();
  const auto u = log_unnorm_all(m, params, points);
  const double log_z = log_sum_exp(u);
  Gradients out;
  const double w = 1.0 / static_cast<double>(data.size());
  for (const auto& x : data) {
    check_in_space(m, x);
    add_scaled(out, potential_gradient(m, params, x), w);
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    add_scaled(out, potential_gradient(m, params, points[i]), -std::exp(u[i] - log_z));
  }
  return out;
}

Gradients sampled_ml_gradient(const DiscreteEnergyModel& m, const ParamStore& params,
                              std::span<const Sequence> data, std::span<const Sequence> samples) {
  if (samples.empty()) throw InvalidArgument("sampled_ml_gradient: no model samples");
  if (data.empty()) throw InvalidArgument("sampled_ml_gradient: empty data");
  std::vector<Sequence> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end(), seq_less);
  ad::Tape tape(params);
  std::vector<ad::Var> pos, neg;
  for (const auto& x : data) pos.push_back(m.potential(tape, x));
  for (const auto& x : sorted) neg.push_back(m.potential(tape, x));
  ad::Var obj = ad::sub(ad::mean(ad::concat_rows(pos)), ad::mean(ad::concat_rows(neg)));
  tape.backward(obj);
  return tape.param_gradients();
}

Gradients sampled_ml_gradient(const ContinuousEnergyModel& m, const ParamStore& params,
                              const RealArray& data, const RealArray& samples) {
  if (samples.size() == 0) throw InvalidArgument("sampled_ml_gradient: no model samples");
  if (data.cols() != m.dim || samples.cols() != m.dim) throw ShapeError("sampled_ml_gradient: dimension mismatch");
  // Canonical (lexicographic) row order for the negative phase.
  std::vector<std::size_t> order(samples.rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    auto ra = samples.row_view(a);
    auto rb = samples.row_view(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  RealArray sorted({samples.rows(), samples.cols()});
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto src = samples.row_view(order[i]);
    std::copy(src.begin(), src.end(), sorted.row_view(i).begin());
  }
  ad::Tape tape(params);
  ad::Var pos = ad::mean(m.potential(tape, tape.constant(data)));
  ad::Var neg = ad::mean(m.potential(tape, tape.constant(sorted)));
  ad::Var obj = ad::sub(pos, neg);
  tape.backward(obj);
  return tape.param_gradients();
}

std::vector<double> joint_conditional(const pot::ClassifierNet& net, const ParamStore& params,
                                      std::span<const double> x) {
  return softmax(pot::classifier_logits(net, params, x).values());
}

double marginal_potential_fixed(const pot::ClassifierNet& net, const ParamStore& params,
                                std::span<const double> x) {
  return log_sum_exp(pot::classifier_logits(net, params, x).values());
}

crf::ChainPotentials chain_potentials(const pot::SeqEncoder& enc, const ParamStore& params,
                                      std::span<const int> x) {
  auto f = pot::seq_features(enc, params, x);
  crf::ChainPotentials ch{std::move(f.logits), params.value(enc.edge_name()), std::nullopt};
  if (enc.start_vector) ch.start = params.value(enc.start_name());
  return ch;
}

double marginal_potential_seq(const pot::SeqEncoder& enc, const ParamStore& params, std::span<const int> x) {
  return crf::forward_log_z(chain_potentials(enc, params, x));
}

ad::Var marginal_potential_seq(ad::Tape& tape, const pot::SeqEncoder& enc, std::span<const int> x) {
  ad::Var logits = enc.tag_logits(tape, enc.features(tape, x));
  return crf::log_partition(logits, enc.edge(tape), enc.start(tape));
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

}  // namespace ebmssl::ebm
