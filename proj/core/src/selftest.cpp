#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "ebmssl/crf.hpp"
#include "ebmssl/ebm.hpp"
#include "ebmssl/error.hpp"
#include "ebmssl/graph.hpp"
#include "ebmssl/harness.hpp"
#include "ebmssl/nce.hpp"
#include "ebmssl/samplers.hpp"

namespace ebmssl::harness {

namespace {

using data::Sequence;

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

RealArray random_array(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  RealArray a(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : a.values()) v = n(rng);
  return a;
}

pot::ClassifierNet small_classifier(std::size_t dim, std::size_t classes) {
  return pot::ClassifierNet{pot::MlpBody{"body", {dim, 6, 6}, pot::Activation::kTanh}, classes, "head"};
}

pot::SeqEncoder small_encoder(std::size_t vocab, std::size_t dim, std::size_t classes) {
  pot::SeqEncoder enc;
  enc.vocab = vocab;
  enc.dim = dim;
  enc.classes = classes;
  return enc;
}

// Encoder with a tag head and a non-zero edge matrix.
ParamStore tagged_params(const pot::SeqEncoder& enc, Rng& rng) {
  ParamStore p;
  enc.init(p, rng);
  enc.init_tag_head(p, rng);
  p.set(enc.edge_name(), random_array({enc.classes, enc.classes}, rng, 0.7));
  return p;
}

std::string check_fd(const char* what, const ad::Graph& g, ParamStore& params, const ad::Inputs& in) {
  const double err = ad::finite_diff_check(g, params, in, 1e-5);
  if (!(err < 1e-4)) return std::string(what) + fmt(": relative error %.3g", err);
  return "";
}

// ---- diffcore ----

std::string diffcore_purity() {
  Rng rng(11);
  auto net = small_classifier(3, 4);
  ParamStore params;
  net.init(params, rng);
  const ParamStore before = params;
  ad::Inputs in{{"x", random_array({5, 3}, rng)}};
  ad::Graph g = [&](ad::Tape& t, const ad::Inputs& i) { return ad::sum(net.logits(t, ad::bind(t, i, "x"))); };
  const RealArray a = ad::evaluate(g, params, in);
  const RealArray b = ad::evaluate(g, params, in);
  if (!(a == b)) return "two evaluations differ";
  if (!(params == before)) return "evaluation mutated parameters";
  return "";
}

std::string diffcore_fd() {
  Rng rng(12);
  std::string msg;
  {
    auto net = small_classifier(3, 4);
    ParamStore p;
    net.init(p, rng);
    const std::vector<int> y{0, 3, 1, 2, 2};
    ad::Inputs in{{"x", random_array({5, 3}, rng)}};
    ad::Graph g = [&](ad::Tape& t, const ad::Inputs& i) {
      return ad::softmax_xent(net.logits(t, ad::bind(t, i, "x")), y);
    };
    msg = check_fd("softmax cross-entropy", g, p, in);
    if (!msg.empty()) return msg;
    ad::Graph m = [&](ad::Tape& t, const ad::Inputs& i) {
      return ad::mean(ad::log_sum_exp_rows(net.logits(t, ad::bind(t, i, "x"))));
    };
    msg = check_fd("marginal fixed-dim potential", m, p, in);
    if (!msg.empty()) return msg;
  }
  auto enc = small_encoder(3, 3, 3);
  ParamStore p = tagged_params(enc, rng);
  const Sequence x{0, 2, 1, 1};
  const std::vector<int> y{1, 2, 0, 1};
  ad::Graph crf_g = [&](ad::Tape& t, const ad::Inputs&) {
    return crf::nll(enc.tag_logits(t, enc.features(t, x)), enc.edge(t), y);
  };
  if (!(msg = check_fd("crf nll", crf_g, p, {})).empty()) return msg;
  ad::Graph marg = [&](ad::Tape& t, const ad::Inputs&) { return ebm::marginal_potential_seq(t, enc, x); };
  if (!(msg = check_fd("marginal sequence potential", marg, p, {})).empty()) return msg;
  ad::Graph pre = [&](ad::Tape& t, const ad::Inputs&) { return enc.pretrain_potential(t, x); };
  if (!(msg = check_fd("pretrain potential", pre, p, {})).empty()) return msg;

  const ebm::SequenceSpace space{3, 1, 3};
  const auto model = ebm::pretrain_sequence_model(enc, space);
  const std::vector<Sequence> data{{0, 1}, {2}, {1, 1, 0}};
  ad::Graph ll = [&](ad::Tape& t, const ad::Inputs&) { return ebm::exact_log_likelihood(t, model, data); };
  if (!(msg = check_fd("exact log-likelihood", ll, p, {})).empty()) return msg;

  const auto noise = nce::noise_fit(data, 3, 3);
  Rng nr(5);
  const auto noise_batch = noise.sample(6, nr);
  p.add("nce.log_c", RealArray({1, 1}, 0.3));
  ad::Graph nl = [&](ad::Tape& t, const ad::Inputs&) {
    return nce::nce_loss(t, model.potential, t.param("nce.log_c"), noise, data, noise_batch, 2);
  };
  return check_fd("nce loss", nl, p, {});
}

std::string diffcore_lse_shift() {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const RealArray v = random_array({7}, rng, 3.0);
    const double base = log_sum_exp(v.values());
    for (double c : {-300.0, -1.5, 0.0, 2.25, 40.0, 700.0}) {
      std::vector<double> s(v.values().begin(), v.values().end());
      for (auto& e : s) e += c;
      const double got = log_sum_exp(s);
      if (!(std::abs(got - (base + c)) <= 1e-12 * std::max(1.0, std::abs(base + c))))
        return fmt("shift %g off by %.3g", c, got - base - c);
    }
  }
  return "";
}

// ---- potentials ----

std::string potentials_single_token() {
  Rng rng(21);
  auto enc = small_encoder(5, 4, 2);
  ParamStore p;
  enc.init(p, rng);
  for (int t = 0; t < 5; ++t) {
    const Sequence x{t};
    const double u = pot::seq_potential_pretrain(enc, p, x);
    if (u != 0.0) return fmt("u([%g]) = %.3g", t, u);
  }
  return "";
}

std::string potentials_reversal() {
  Rng rng(22);
  auto enc = small_encoder(5, 4, 2);
  ParamStore p;
  enc.init(p, rng);
  // Swapping the two directions of the recurrent encoder maps u(x) to u(reverse(x)).
  ParamStore swapped = p;
  for (const char* part : {"Wx", "Uh", "b"}) {
    swapped.set(enc.prefix + ".fwd." + part, p.value(enc.prefix + ".bwd." + part));
    swapped.set(enc.prefix + ".bwd." + part, p.value(enc.prefix + ".fwd." + part));
  }
  std::uniform_int_distribution<int> tok(0, 4);
  for (int trial = 0; trial < 20; ++trial) {
    Sequence x(1 + trial % 6);
    for (auto& t : x) t = tok(rng);
    Sequence r(x.rbegin(), x.rend());
    const double a = pot::seq_potential_pretrain(enc, p, x);
    const double b = pot::seq_potential_pretrain(enc, swapped, r);
    if (std::abs(a - b) > 1e-10 * std::max(1.0, std::abs(a))) return fmt("u(x) %.6g vs %.6g", a, b);
  }
  return "";
}

std::string potentials_finite() {
  Rng rng(23);
  auto net = small_classifier(2, 3);
  pot::MlpPotential mlp{net.body, "pot"};
  ParamStore p, q0;
  net.init(p, rng);
  mlp.init(q0, rng);
  for (double scale : {1.0, 1e3, 1e8}) {
    const RealArray x = random_array({16, 2}, rng, scale);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (!std::isfinite(pot::mlp_potential(mlp, q0, x.row_view(i)))) return "non-finite mlp potential";
      if (!pot::classifier_logits(net, p, x.row_view(i)).all_finite()) return "non-finite logits";
    }
  }
  auto enc = small_encoder(6, 4, 3);
  ParamStore q = tagged_params(enc, rng);
  std::uniform_int_distribution<int> tok(0, 5);
  for (int trial = 0; trial < 20; ++trial) {
    Sequence x(1 + trial);
    for (auto& t : x) t = tok(rng);
    if (!std::isfinite(pot::seq_potential_pretrain(enc, q, x))) return "non-finite sequence potential";
    if (!std::isfinite(ebm::marginal_potential_seq(enc, q, x))) return "non-finite marginal potential";
  }
  return "";
}

// ---- ebm_core ----

std::string ebm_normalized() {
  Rng rng(31);
  auto enc = small_encoder(3, 3, 2);
  ParamStore p;
  enc.init(p, rng);
  const auto model = ebm::pretrain_sequence_model(enc, {3, 1, 4});
  const double log_z = ebm::exact_log_partition(model, p);
  double total = 0.0;
  for (const auto& x : model.space.enumerate()) total += std::exp(ebm::log_unnorm(model, p, x) - log_z);
  if (std::abs(total - 1.0) > 1e-10) return fmt("sum of probabilities %.15g", total);
  return "";
}

std::string ebm_shift_invariance() {
  Rng rng(32);
  auto net = small_classifier(2, 4);
  ParamStore p;
  net.init(p, rng);
  ParamStore shifted = p;
  for (auto& b : shifted.value("head.b").values()) b += 3.75;
  for (int trial = 0; trial < 10; ++trial) {
    const RealArray x = random_array({2}, rng, 2.0);
    const auto a = ebm::joint_conditional(net, p, x.values());
    const auto b = ebm::joint_conditional(net, shifted, x.values());
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (std::abs(a[k] - b[k]) > 1e-12) return fmt("p(y|x) moved by %.3g", a[k] - b[k]);
    }
  }
  return "";
}

std::string ebm_exact_gradient() {
  Rng rng(33);
  auto enc = small_encoder(3, 3, 2);
  ParamStore p;
  enc.init(p, rng);
  const auto model = ebm::pretrain_sequence_model(enc, {3, 1, 3});
  const std::vector<Sequence> data{{0, 1}, {2, 2, 1}, {1}, {0, 0}};
  const auto g = ebm::exact_ml_gradient(model, p, data);
  ad::Tape tape(p);
  tape.backward(ebm::exact_log_likelihood(tape, model, data));
  const auto ref = tape.param_gradients();
  for (const auto& [name, arr] : ref) {
    auto it = g.find(name);
    if (it == g.end()) return "missing gradient for " + name;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const double d = std::abs(arr[i] - it->second[i]);
      if (d > 1e-9 * std::max(1.0, std::abs(arr[i]))) return name + fmt(" differs by %.3g", d);
    }
  }
  return "";
}

// Sum over label sequences of exp u(x, y) by brute force.
double enumerate_marginal(const pot::SeqEncoder& enc, const ParamStore& p, const Sequence& x) {
  const std::size_t k = enc.classes;
  std::vector<double> scores;
  Sequence y(x.size(), 0);
  while (true) {
    scores.push_back(ebm::log_unnorm(enc, p, x, y));
    std::size_t i = 0;
    while (i < y.size() && ++y[i] == static_cast<int>(k)) y[i++] = 0;
    if (i == y.size()) break;
  }
  return log_sum_exp(scores);
}

std::string ebm_marginal_enumeration() {
  Rng rng(34);
  auto enc = small_encoder(4, 3, 3);
  ParamStore p = tagged_params(enc, rng);
  std::uniform_int_distribution<int> tok(0, 3);
  for (int len = 1; len <= 5; ++len) {
    Sequence x(len);
    for (auto& t : x) t = tok(rng);
    const double a = ebm::marginal_potential_seq(enc, p, x);
    const double b = enumerate_marginal(enc, p, x);
    if (std::abs(a - b) > 1e-10) return fmt("length %g: %.3g", len, a - b);
  }
  return "";
}

// ---- samplers ----

ebm::ContinuousEnergyModel standard_normal_model(std::size_t dim) {
  return {dim, [](ad::Tape&, ad::Var x) { return ad::scale(ad::row_sum(ad::square(x)), -0.5); }};
}

std::string samplers_moments() {
  Rng rng(41);
  const auto model = standard_normal_model(1);
  ParamStore none;
  RealArray particles = random_array({200, 1}, rng);
  const sampling::SgldConfig cfg{0.02, 1.0, 0.0};
  double s1 = 0.0, s2 = 0.0;
  std::size_t n = 0;
  for (int step = 0; step < 1500; ++step) {
    sampling::sgld_step(model, none, particles, cfg, rng);
    if (step < 300 || step % 5 != 0) continue;
    for (double v : particles.values()) {
      s1 += v;
      s2 += v * v;
      ++n;
    }
  }
  const double mean = s1 / static_cast<double>(n);
  const double var = s2 / static_cast<double>(n) - mean * mean;
  if (std::abs(mean) > 0.05 || std::abs(var - 1.0) > 0.1) return fmt("mean %.4f var %.4f", mean, var);
  return "";
}

std::string samplers_finite() {
  Rng rng(42);
  // Steep potential with a large step makes unclamped chains blow up.
  ebm::ContinuousEnergyModel model{
      2, [](ad::Tape&, ad::Var x) { return ad::scale(ad::row_sum(ad::square(ad::square(x))), 5.0); }};
  ParamStore none;
  auto chain = sampling::ChainState::standard_normal(32, 2, rng);
  chain.sgld = {0.5, 1.0, 0.0};
  chain.steps_per_update = 10;
  for (int round = 0; round < 5; ++round) {
    const RealArray out = sampling::sample_batch(model, none, chain, nullptr, rng);
    if (!out.all_finite()) return "non-finite particle returned";
  }
  if (chain.divergences == 0) return "no divergence recorded for an exploding chain";
  return "";
}

std::string samplers_exact() {
  Rng rng(43);
  auto enc = small_encoder(2, 3, 2);
  ParamStore p;
  enc.init(p, rng);
  const auto model = ebm::pretrain_sequence_model(enc, {2, 1, 3});
  const auto probs = ebm::exact_probabilities(model, p);
  const auto all = model.space.enumerate();
  const std::size_t n = 100000;
  const auto draws = sampling::exact_discrete_sample(model, p, rng, n);
  std::map<Sequence, double> freq;
  for (const auto& d : draws) freq[d] += 1.0 / static_cast<double>(n);
  std::vector<double> emp(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) emp[i] = freq[all[i]];
  const double tv = ebm::total_variation(probs, emp);
  if (tv >= 0.03) return fmt("total variation %.4f", tv);
  return "";
}

// ---- nce ----

struct MatchedSetup {
  pot::SeqEncoder enc = small_encoder(4, 3, 2);
  ParamStore params;
  nce::NoiseLM noise;
  std::vector<Sequence> data;
  ebm::SeqPotentialFn potential;
};

// Potential equal to log p_noise(x) - log_c on the given data points while
// still depending on the encoder parameters.
MatchedSetup matched_setup(std::size_t nu) {
  MatchedSetup s;
  Rng rng(51 + nu);
  s.enc.init(s.params, rng);
  s.params.add("nce.log_c", RealArray({1, 1}, 0.4));
  s.data = {{0, 1, 2}, {3}, {1, 1}, {2, 0, 3, 1}};
  s.noise = nce::noise_fit(s.data, 4, 4);
  auto offsets = std::make_shared<std::map<Sequence, double>>();
  for (const auto& x : s.data) {
    (*offsets)[x] = s.noise.log_prob(x) - 0.4 - pot::seq_potential_pretrain(s.enc, s.params, x);
  }
  const auto enc = s.enc;
  s.potential = [enc, offsets](ad::Tape& t, std::span<const int> x) {
    const Sequence key(x.begin(), x.end());
    return ad::add_scalar(enc.pretrain_potential(t, x), offsets->at(key));
  };
  return s;
}

std::string nce_matched_loss() {
  for (std::size_t nu : {1, 5}) {
    auto s = matched_setup(nu);
    std::vector<Sequence> noise_batch;
    for (std::size_t r = 0; r < nu; ++r) noise_batch.insert(noise_batch.end(), s.data.begin(), s.data.end());
    const auto res = nce::nce_loss(s.potential, s.params, "nce.log_c", s.noise, s.data, noise_batch, nu);
    const double want = nce::matched_loss(nu);
    if (std::abs(res.loss - want) > 1e-9) return fmt("nu %g: loss off by %.3g", double(nu), res.loss - want);
  }
  return "";
}

std::string nce_noise_consistency() {
  const std::vector<Sequence> corpus{{0, 1, 2}, {2, 2}, {1}, {0, 0, 1, 3}, {3, 1}};
  const auto noise = nce::noise_fit(corpus, 4, 4);
  Rng rng(52);
  const std::size_t n = 10000;
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = -noise.log_prob(noise.sample(rng));
    s1 += v;
    s2 += v * v;
  }
  const double mean = s1 / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  const double h = noise.entropy();
  if (std::abs(mean - h) > 2.0 * se) return fmt("mean -log p %.4f vs entropy %.4f", mean, h);
  return "";
}

std::string nce_matched_gradient() {
  for (std::size_t nu : {1, 5}) {
    auto s = matched_setup(nu);
    std::vector<Sequence> noise_batch;
    for (std::size_t r = 0; r < nu; ++r) noise_batch.insert(noise_batch.end(), s.data.begin(), s.data.end());
    const auto res = nce::nce_loss(s.potential, s.params, "nce.log_c", s.noise, s.data, noise_batch, nu);
    for (const auto& [name, g] : res.grads) {
      for (double v : g.values()) {
        if (std::abs(v) > 1e-6) return name + fmt(" gradient %.3g at nu %g", v, double(nu));
      }
    }
  }
  return "";
}

// ---- crf ----

std::vector<std::vector<int>> all_labelings(std::size_t len, std::size_t k) {
  std::vector<std::vector<int>> out;
  std::vector<int> y(len, 0);
  while (true) {
    out.push_back(y);
    std::size_t i = 0;
    while (i < len && ++y[i] == static_cast<int>(k)) y[i++] = 0;
    if (i == len) break;
  }
  return out;
}

crf::ChainPotentials random_chain(std::size_t len, std::size_t k, Rng& rng) {
  return {random_array({len, k}, rng, 1.5), random_array({k, k}, rng, 1.0), std::nullopt};
}

std::string crf_bound() {
  Rng rng(61);
  for (std::size_t k : {1, 2, 3}) {
    for (std::size_t len : {1, 3, 4}) {
      const auto ch = random_chain(len, k, rng);
      const double z = crf::forward_log_z(ch);
      for (const auto& y : all_labelings(len, k)) {
        const double s = crf::score(ch, y);
        if (s > z + 1e-12) return fmt("score %.6g above log Z %.6g", s, z);
        if (k == 1 && std::abs(s - z) > 1e-12) return "K = 1 score differs from log Z";
        if (k > 1 && std::abs(s - z) < 1e-9) return "strict inequality violated for K > 1";
      }
    }
  }
  return "";
}

std::string crf_normalized() {
  Rng rng(62);
  for (std::size_t len : {1, 2, 5}) {
    const auto ch = random_chain(len, 3, rng);
    const double z = crf::forward_log_z(ch);
    double total = 0.0;
    for (const auto& y : all_labelings(len, 3)) total += std::exp(crf::score(ch, y) - z);
    if (std::abs(total - 1.0) > 1e-12) return fmt("sum %.15g", total);
  }
  return "";
}

std::string crf_marginal_matches() {
  Rng rng(63);
  auto enc = small_encoder(5, 3, 3);
  ParamStore p = tagged_params(enc, rng);
  std::uniform_int_distribution<int> tok(0, 4);
  for (int len = 1; len <= 8; ++len) {
    Sequence x(len);
    for (auto& t : x) t = tok(rng);
    const double a = ebm::marginal_potential_seq(enc, p, x);
    const double b = crf::forward_log_z(ebm::chain_potentials(enc, p, x));
    if (std::abs(a - b) > 1e-12 * std::max(1.0, std::abs(a))) return fmt("difference %.3g", a - b);
  }
  return "";
}

// ---- data ----

std::string data_split_deterministic() {
  const auto ds = data::gen_mixture(3, 40, 7);
  const auto a = data::split(ds, 0.1, 2.0, 99);
  const auto b = data::split(ds, 0.1, 2.0, 99);
  const auto c = data::split(ds, 0.1, 2.0, 100);
  if (a.labeled_index != b.labeled_index || !(a.unlabeled == b.unlabeled)) return "same seed, different split";
  if (a.labeled_index == c.labeled_index && a.unlabeled_index == c.unlabeled_index) return "different seeds agree";
  const auto seqs = data::gen_hmm(data::HmmDescriptor::standard(3, 8, 6), 60, 3);
  const auto s1 = data::split(seqs, 0.2, 1.0, 5);
  const auto s2 = data::split(seqs, 0.2, 1.0, 5);
  if (s1.labeled_index != s2.labeled_index || s1.unlabeled != s2.unlabeled) return "sequence split not repeatable";
  return "";
}

std::string data_no_leakage() {
  const auto ds = data::gen_mixture(3, 50, 8);
  const auto sp = data::split(ds, 0.2, 3.0, 4);
  std::set<std::size_t> labeled(sp.labeled_index.begin(), sp.labeled_index.end());
  for (auto i : sp.unlabeled_index) {
    if (labeled.count(i) != 0) return "labeled item in the unlabeled set";
  }
  if (sp.unlabeled.rows() != sp.unlabeled_index.size()) return "unlabeled index does not match the set";
  for (std::size_t r = 0; r < sp.unlabeled.rows(); ++r) {
    auto row = ds.points.row_view(sp.unlabeled_index[r]);
    if (!std::equal(row.begin(), row.end(), sp.unlabeled.row_view(r).begin())) return "unlabeled point mismatch";
  }
  const auto seqs = data::gen_hmm(data::HmmDescriptor::standard(3, 8, 6), 60, 3);
  const auto ss = data::split(seqs, 0.2, 2.0, 5);
  std::set<std::size_t> sl(ss.labeled_index.begin(), ss.labeled_index.end());
  std::multiset<Sequence> pool;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (sl.count(i) == 0) pool.insert(seqs.tokens[i]);
  }
  for (const auto& u : ss.unlabeled) {
    auto it = pool.find(u);
    if (it == pool.end()) return "unlabeled sequence not from the unlabeled reservoir";
    pool.erase(it);
  }
  return "";
}

std::string data_gold_states() {
  const auto desc = data::HmmDescriptor::identity(4, 7);
  const auto ds = data::gen_hmm(desc, 200, 17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.tokens[i] != ds.labels[i]) return "labels differ from the emitting states";
  }
  return "";
}

// ---- pipelines ----

struct SmallData {
  data::ContinuousSplit mix;
  data::SequenceSplit seq;
};

const SmallData& small_data() {
  static const SmallData d = [] {
    SmallData s;
    s.mix = data::split(data::gen_mixture(3, 30, 71), 0.2, 2.0, 72);
    const auto desc = data::HmmDescriptor::standard(3, 8, 5, 0, 0.6, 0.2);
    s.seq = data::split(data::gen_hmm(desc, 60, 73), 0.3, 1.0, 74);
    return s;
  }();
  return d;
}

pipe::TrainConfig small_config(pipe::Modality m, pipe::Method method) {
  pipe::TrainConfig c;
  c.modality = m;
  c.method = method;
  c.steps = 12;
  c.pretrain_steps = 8;
  c.batch_labeled = 4;
  c.batch_unlabeled = 8;
  c.hidden = 8;
  c.embed_dim = 4;
  c.sampler.particles = 8;
  c.sampler.steps_per_update = 3;
  c.nce.nu = 3;
  c.nce.refresh_every = 5;
  c.log_every = 4;
  c.seed = 77;
  return c;
}

pipe::TrainedModel run_small(const pipe::TrainConfig& c) {
  const auto& d = small_data();
  if (c.modality == pipe::Modality::kContinuous) return pipe::train(d.mix, c);
  return pipe::train(d.seq, c);
}

std::string pipelines_lambda_zero() {
  for (auto m : {pipe::Modality::kContinuous, pipe::Modality::kSequence}) {
    auto sup = small_config(m, pipe::Method::kSupervised);
    auto joint = small_config(m, pipe::Method::kJoint);
    joint.unsup_weight = 0.0;
    if (!(run_small(sup).params == run_small(joint).params)) return "lambda = 0 differs for " + pipe::to_string(m);
  }
  return "";
}

std::string pipelines_frozen() {
  for (auto m : {pipe::Modality::kContinuous, pipe::Modality::kSequence}) {
    auto c = small_config(m, pipe::Method::kPretrainFinetune);
    const auto full = run_small(c);
    c.stop_after = c.pretrain_steps;
    const auto stage1 = run_small(c);
    const std::string prefix = m == pipe::Modality::kContinuous ? "body." : "enc.";
    std::size_t compared = 0;
    for (const auto& name : stage1.params.names_with_prefix(prefix)) {
      if (!full.params.contains(name)) return "encoder parameter dropped: " + name;
      if (!(full.params.value(name) == stage1.params.value(name))) return "frozen parameter changed: " + name;
      ++compared;
    }
    if (compared == 0) return "no encoder parameters found";
  }
  return "";
}

std::string pipelines_resume() {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("ebmssl-selftest-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
  std::filesystem::create_directories(dir);
  std::string msg;
  for (auto m : {pipe::Modality::kContinuous, pipe::Modality::kSequence}) {
    for (auto method : {pipe::Method::kSupervised, pipe::Method::kPretrainFinetune, pipe::Method::kJoint}) {
      auto c = small_config(m, method);
      const auto full = run_small(c);
      c.checkpoint = dir / "run.ckpt";
      std::filesystem::remove(c.checkpoint);
      c.checkpoint_every = 3;
      c.stop_after = method == pipe::Method::kPretrainFinetune ? 10 : 7;
      const auto part = run_small(c);
      c.stop_after = 0;
      c.resume = true;
      const auto resumed = run_small(c);
      const std::string tag = pipe::to_string(m) + "/" + pipe::to_string(method);
      if (part.complete || !resumed.complete) {
        msg = tag + ": completion flags wrong";
      } else if (!(resumed.params == full.params)) {
        msg = tag + ": resumed parameters differ";
      } else if (resumed.log.size() != full.log.size()) {
        msg = tag + ": log length differs";
      } else {
        for (std::size_t i = 0; i < full.log.size(); ++i) {
          if (resumed.log[i].step != full.log[i].step) msg = tag + ": log steps differ";
        }
      }
      if (!msg.empty()) break;
    }
    if (!msg.empty()) break;
  }
  std::filesystem::remove_all(dir);
  return msg;
}

// ---- harness ----

std::string harness_grid_determinism() {
  const auto base = std::filesystem::temp_directory_path() /
                    ("ebmssl-grid-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
  ExperimentGrid g;
  g.task = TaskSpec::mixture_task();
  g.task.per_class_pool = 20;
  g.task.test_size = 100;
  g.task.dev_size = 40;
  g.proportions = {0.2};
  g.ratios = {0, 2};
  g.methods = {"supervised", "joint"};
  g.seeds = 2;
  g.train = small_config(pipe::Modality::kContinuous, pipe::Method::kSupervised);
  g.global_seed = 5;
  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  std::string out[2];
  std::string msg;
  for (int i = 0; i < 2 && msg.empty(); ++i) {
    g.out_dir = base / std::to_string(i);
    const auto s = run_grid(g);
    if (!s.failures.empty()) msg = "grid failure: " + s.failures.front();
    out[i] = read(g.out_dir / "results.csv");
  }
  if (msg.empty() && (out[0].empty() || out[0] != out[1])) msg = "results differ between identical grids";
  std::filesystem::remove_all(base);
  return msg;
}

std::string harness_rer_zero() {
  for (double m : {0.0, 12.5, 50.0, 87.3, 99.99}) {
    const double r = relative_error_reduction(m, m);
    if (r != 0.0) return fmt("metric %g gives %g", m, r);
  }
  return "";
}

std::string harness_sample_std() {
  const auto a = aggregate({1.0, 2.0, 3.0, 4.0});
  const double want = std::sqrt(5.0 / 3.0);
  if (std::abs(a.mean - 2.5) > 1e-15 || std::abs(a.std - want) > 1e-15 || a.n != 4)
    return fmt("mean %.17g std %.17g", a.mean, a.std);
  if (!std::isnan(aggregate({3.0}).std)) return "single value std is not NaN";
  return "";
}

std::string checkpoint_corruption() {
  Rng rng(81);
  ParamStore p;
  p.add_weight("w", 3, 2, rng);
  std::ostringstream os;
  write_checkpoint(os, p);
  std::string text = os.str();
  for (const std::string& bad : {text.substr(0, text.size() / 2), std::string("EBMSSL-CKPT v9\n"),
                                 text.substr(0, text.size() - 4) + "zz\n"}) {
    std::istringstream in(bad);
    try {
      read_checkpoint(in);
      return "corrupted checkpoint accepted";
    } catch (const FormatError&) {
    }
  }
  return "";
}

}  // namespace

const std::vector<SelftestCheck>& selftest_registry() {
  static const std::vector<SelftestCheck> checks{
      {"diffcore.1", "graph evaluation is pure and repeatable", diffcore_purity},
      {"diffcore.2", "analytic gradients of every loss match central differences", diffcore_fd},
      {"diffcore.3", "logsumexp commutes with constant shifts", diffcore_lse_shift},
      {"potentials.1", "sequence potential is zero for single tokens", potentials_single_token},
      {"potentials.2", "swapping encoder directions reverses the sequence", potentials_reversal},
      {"potentials.3", "potentials stay finite for finite inputs", potentials_finite},
      {"ebm_core.1", "enumerated probabilities sum to one", ebm_normalized},
      {"ebm_core.2", "p(y|x) is invariant to a shared logit shift", ebm_shift_invariance},
      {"ebm_core.3", "exact ML gradient equals the autodiff gradient", ebm_exact_gradient},
      {"ebm_core.4", "marginal sequence potential equals label enumeration", ebm_marginal_enumeration},
      {"samplers.1", "SGLD on a standard normal matches its moments", samplers_moments},
      {"samplers.2", "sample_batch never returns non-finite particles", samplers_finite},
      {"samplers.3", "exact discrete sampling matches enumeration", samplers_exact},
      {"nce.1", "matched model gives the binary-entropy loss", nce_matched_loss},
      {"nce.2", "noise sampling agrees with noise scoring", nce_noise_consistency},
      {"nce.3", "matched model has zero gradient", nce_matched_gradient},
      {"crf.1", "log Z bounds every labeling score", crf_bound},
      {"crf.2", "labeling probabilities sum to one", crf_normalized},
      {"crf.3", "forward log Z equals the marginal sequence potential", crf_marginal_matches},
      {"data.1", "splits are a function of the seed", data_split_deterministic},
      {"data.2", "unlabeled sets carry no labeled items", data_no_leakage},
      {"data.3", "generated labels are the emitting states", data_gold_states},
      {"pipelines.1", "joint training at weight 0 equals supervised training", pipelines_lambda_zero},
      {"pipelines.2", "fine-tuning leaves a frozen encoder untouched", pipelines_frozen},
      {"pipelines.3", "interrupted runs resume to the same parameters", pipelines_resume},
      {"harness.1", "identical grids write identical results", harness_grid_determinism},
      {"harness.2", "relative error reduction of a method over itself is zero", harness_rer_zero},
      {"harness.3", "aggregates use the sample standard deviation", harness_sample_std},
      {"checkpoint", "corrupted checkpoints raise a load error", checkpoint_corruption},
  };
  return checks;
}

const std::map<std::string, std::size_t>& declared_invariants() {
  static const std::map<std::string, std::size_t> m{
      {"diffcore", 3}, {"potentials", 3}, {"ebm_core", 4}, {"samplers", 3}, {"nce", 3},
      {"crf", 3},      {"data", 3},       {"pipelines", 3}, {"harness", 3},
  };
  return m;
}

std::vector<Verdict> selftest(std::ostream* progress) {
  std::vector<Verdict> out;
  std::map<std::string, std::size_t> covered;
  for (const auto& check : selftest_registry()) {
    Verdict v{check.id, check.property, false, "", 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      v.detail = check.run();
      v.pass = v.detail.empty();
    } catch (const std::exception& e) {
      v.detail = std::string("exception: ") + e.what();
    }
    v.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto dot = check.id.find('.');
    if (dot != std::string::npos) ++covered[check.id.substr(0, dot)];
    if (progress != nullptr) {
      *progress << (v.pass ? "PASS " : "FAIL ") << v.id << "  " << v.property;
      if (!v.pass) *progress << "  (" << v.detail << ")";
      *progress << '\n';
    }
    out.push_back(std::move(v));
  }
  for (const auto& [module, n] : declared_invariants()) {
    Verdict v{module + ".count", "every declared invariant has a check", covered[module] == n, "", 0.0};
    if (!v.pass) v.detail = fmt("%g checks for %g invariants", double(covered[module]), double(n));
    if (progress != nullptr && !v.pass) *progress << "FAIL " << v.id << "  " << v.detail << '\n';
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace ebmssl::harness
