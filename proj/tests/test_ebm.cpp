#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "ebmssl/ebm.hpp"
#include "ebmssl/error.hpp"
#include "ebmssl/graph.hpp"
#include "ebmssl/samplers.hpp"
#include "oracles.hpp"

using namespace ebmssl;

namespace {

pot::SeqEncoder encoder(std::size_t vocab, std::size_t dim, std::size_t classes) {
  pot::SeqEncoder e;
  e.vocab = vocab;
  e.dim = dim;
  e.classes = classes;
  return e;
}

ebm::DiscreteEnergyModel zero_model(ebm::SequenceSpace space) {
  return {space, [](ad::Tape& t, std::span<const int>) { return t.scalar(0.0); }};
}

// u(x) = theta[index of x in the enumeration]
ebm::DiscreteEnergyModel tabular_model(ebm::SequenceSpace space) {
  auto all = std::make_shared<std::vector<ebm::Sequence>>(space.enumerate());
  return {space, [all](ad::Tape& t, std::span<const int> x) {
            const ebm::Sequence key(x.begin(), x.end());
            const int idx = static_cast<int>(std::find(all->begin(), all->end(), key) - all->begin());
            const std::vector<int> ids{idx};
            return ad::embedding(t.param("theta"), ids);
          }};
}

double max_abs(const ebm::Gradients& g) {
  double m = 0;
  for (const auto& [n, a] : g)
    for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

ParamStore tagged(const pot::SeqEncoder& enc, Rng& rng) {
  ParamStore p;
  enc.init(p, rng);
  enc.init_tag_head(p, rng);
  p.set(enc.edge_name(), oracle::random({enc.classes, enc.classes}, rng));
  return p;
}

}  // namespace

TEST_CASE("sequence space enumeration") {
  const ebm::SequenceSpace s{2, 1, 3};
  CHECK(s.size() == 14);
  const auto all = s.enumerate();
  CHECK(all.size() == 14);
  CHECK(all == oracle::all_sequences(2, 1, 3));
  CHECK(s.contains(std::vector<int>{1, 0}));
  CHECK(!s.contains(std::vector<int>{1, 0, 1, 1}));
  CHECK(!s.contains(std::vector<int>{2}));
  CHECK_THROWS_AS((ebm::SequenceSpace{10, 1, 8}.enumerate()), SpaceTooLargeError);
}

TEST_CASE("log_unnorm delegates to the potentials") {
  Rng rng(1);
  auto enc = encoder(3, 3, 2);
  ParamStore p = tagged(enc, rng);
  const auto model = ebm::pretrain_sequence_model(enc, {3, 1, 4});
  std::uniform_int_distribution<int> tok(0, 2);
  for (int t = 0; t < 20; ++t) {
    std::vector<int> x(1 + t % 4);
    for (auto& v : x) v = tok(rng);
    CHECK(ebm::log_unnorm(model, p, x) == pot::seq_potential_pretrain(enc, p, x));
    const std::vector<int> y(x.size(), t % 2);
    const auto ch = ebm::chain_potentials(enc, p, x);
    CHECK(ebm::log_unnorm(enc, p, x, y) == doctest::Approx(crf::score(ch, y)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(ebm::log_unnorm(model, p, std::vector<int>{0, 1, 2, 0, 1}), InvalidArgument);

  pot::ClassifierNet net{{"body", {2, 5}, pot::Activation::kTanh}, 3, "head"};
  ParamStore q;
  net.init(q, rng);
  for (int t = 0; t < 10; ++t) {
    const auto x = oracle::random({2}, rng);
    const auto logits = pot::classifier_logits(net, q, x.values());
    for (int y = 0; y < 3; ++y) CHECK(ebm::log_unnorm(net, q, x.values(), y) == logits[y]);
  }
  ParamStore zero = q;
  for (const auto& n : zero.names()) zero.value(n).fill(0.0);
  CHECK(ebm::log_unnorm(net, zero, std::vector<double>{3, 4}, 1) == 0.0);
}

TEST_CASE("log_unnorm is finite on random inputs") {
  Rng rng(2);
  pot::MlpPotential mlp{{"body", {2, 8, 8}, pot::Activation::kTanh}, "pot"};
  ParamStore p;
  mlp.init(p, rng);
  const auto m = ebm::mlp_model(mlp);
  for (int t = 0; t < 1000; ++t) {
    const auto x = oracle::random({2}, rng, 10.0);
    CHECK(std::isfinite(ebm::log_unnorm(m, p, x.values())));
  }
}

TEST_CASE("partition function counting cases") {
  ParamStore none;
  CHECK(ebm::exact_log_partition(zero_model({3, 2, 2}), none) == doctest::Approx(std::log(9.0)).epsilon(1e-15));
  CHECK(ebm::exact_log_partition(zero_model({2, 1, 3}), none) == doctest::Approx(std::log(14.0)).epsilon(1e-15));
  CHECK_THROWS_AS(ebm::exact_log_partition(zero_model({10, 1, 7}), none), SpaceTooLargeError);
  const ebm::EnergyModel cont = ebm::ContinuousEnergyModel{2, nullptr};
  CHECK_THROWS_AS(ebm::exact_log_partition(cont, none), InvalidArgument);
}

TEST_CASE("partition function equals an independent brute-force sum") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto enc = encoder(3, 2 + trial % 2, 2);
    ParamStore p;
    enc.init(p, rng);
    for (const auto& n : p.names()) p.set(n, oracle::random(p.value(n).shape(), rng, 0.8));
    oracle::Vec u;
    for (const auto& x : oracle::all_sequences(3, 1, 4)) u.push_back(oracle::seq_potential(p, "enc", x));
    const double want = oracle::lse(u);
    CHECK(std::abs(ebm::exact_log_partition(ebm::pretrain_sequence_model(enc, {3, 1, 4}), p) - want) < 1e-10);
  }
}

TEST_CASE("probabilities sum to one") {
  Rng rng(4);
  auto enc = encoder(2, 3, 2);
  ParamStore p;
  enc.init(p, rng);
  const auto m = ebm::pretrain_sequence_model(enc, {2, 1, 5});
  const double z = ebm::exact_log_partition(m, p);
  double tot = 0;
  for (const auto& x : m.space.enumerate()) tot += std::exp(ebm::log_unnorm(m, p, x) - z);
  CHECK(std::abs(tot - 1.0) < 1e-10);
  double tot2 = 0;
  for (double q : ebm::exact_probabilities(m, p)) tot2 += q;
  CHECK(std::abs(tot2 - 1.0) < 1e-12);
}

TEST_CASE("exact ML gradient vanishes when data match the model") {
  const ebm::SequenceSpace space{2, 1, 2};
  const auto m = tabular_model(space);
  const auto all = space.enumerate();
  const std::vector<int> counts{3, 1, 2, 5, 1, 4};
  std::vector<ebm::Sequence> data;
  RealArray theta({all.size(), 1});
  for (std::size_t i = 0; i < all.size(); ++i) {
    theta[i] = std::log(static_cast<double>(counts[i]));
    for (int c = 0; c < counts[i]; ++c) data.push_back(all[i]);
  }
  ParamStore p;
  p.add("theta", theta);
  CHECK(max_abs(ebm::exact_ml_gradient(m, p, data)) < 1e-8);
}

TEST_CASE("exact ML gradient equals the autodiff gradient of the log-likelihood") {
  Rng rng(5);
  auto enc = encoder(3, 3, 2);
  ParamStore p;
  enc.init(p, rng);
  const auto m = ebm::pretrain_sequence_model(enc, {3, 1, 3});
  const std::vector<ebm::Sequence> data{{0}, {1, 2}, {2, 2, 0}, {0, 1}};
  const auto g = ebm::exact_ml_gradient(m, p, data);
  ad::Graph ll = [&](ad::Tape& t, const ad::Inputs&) { return ebm::exact_log_likelihood(t, m, data); };
  ad::gradient(ll, p, {});
  for (const auto& n : p.names()) {
    for (std::size_t i = 0; i < p.grad(n).size(); ++i) {
      const double a = g.at(n)[i], b = p.grad(n)[i];
      CHECK(std::abs(a - b) <= 1e-6 * (std::abs(a) + std::abs(b)) + 1e-14);
    }
  }
  CHECK(ad::finite_diff_check(ll, p, {}) < 1e-4);
}

TEST_CASE("exact ML ascent fits a two-token length-two space") {
  Rng rng(6);
  auto enc = encoder(2, 4, 2);
  ParamStore p;
  enc.init(p, rng);
  const auto m = ebm::pretrain_sequence_model(enc, {2, 2, 2});
  const std::vector<ebm::Sequence> data{{0, 0}, {0, 0}, {0, 0}, {0, 1}, {1, 1}, {1, 1}, {1, 0}, {0, 0}};
  const oracle::Vec emp{0.5, 0.125, 0.125, 0.25};
  for (int step = 0; step < 1500; ++step) {
    const auto g = ebm::exact_ml_gradient(m, p, data);
    for (const auto& [n, a] : g)
      for (std::size_t i = 0; i < a.size(); ++i) p.value(n)[i] += 0.2 * a[i];
  }
  const auto q = ebm::exact_probabilities(m, p);
  CHECK(oracle::tv(q, emp) < 0.05);
}

TEST_CASE("sampled ML gradient with exact samples is unbiased") {
  Rng rng(7);
  auto enc = encoder(2, 2, 2);
  ParamStore p;
  enc.init(p, rng);
  const auto m = ebm::pretrain_sequence_model(enc, {2, 1, 3});
  const std::vector<ebm::Sequence> data{{0, 1}, {1}, {1, 1, 0}};
  const auto exact = ebm::exact_ml_gradient(m, p, data);
  const std::size_t n = 10000;
  const auto samples = sampling::exact_discrete_sample(m, p, rng, n);
  const auto sampled = ebm::sampled_ml_gradient(m, p, data, samples);
  // per-sample gradients of u give the standard error of the sample mean
  std::map<ebm::Sequence, ebm::Gradients> cache;
  for (const auto& x : m.space.enumerate()) {
    ad::Tape t(p);
    t.backward(enc.pretrain_potential(t, x));
    cache[x] = t.param_gradients();
  }
  std::mt19937_64 dir_rng(99);
  for (int proj = 0; proj < 3; ++proj) {
    std::map<std::string, RealArray> v;
    for (const auto& n2 : p.names()) v[n2] = oracle::random(p.value(n2).shape(), dir_rng);
    auto project = [&](const ebm::Gradients& g) {
      double s = 0;
      for (const auto& [name, a] : g)
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * v.at(name)[i];
      return s;
    };
    double s1 = 0, s2 = 0;
    for (const auto& x : samples) {
      const double z = project(cache.at(x));
      s1 += z;
      s2 += z * z;
    }
    const double mean = s1 / n;
    const double se = std::sqrt((s2 / n - mean * mean) / n);
    CAPTURE(proj);
    CHECK(std::abs(project(sampled) - project(exact)) <= 3.0 * se);
  }
}

TEST_CASE("sampled ML gradient edge cases") {
  Rng rng(8);
  auto enc = encoder(3, 3, 2);
  ParamStore p;
  enc.init(p, rng);
  const auto m = ebm::pretrain_sequence_model(enc, {3, 1, 3});
  const std::vector<ebm::Sequence> one{{2, 0, 1}};
  CHECK(max_abs(ebm::sampled_ml_gradient(m, p, one, one)) < 1e-15);
  std::vector<ebm::Sequence> samples{{0}, {1, 2}, {2, 2, 2}, {0, 1}, {1}};
  const auto a = ebm::sampled_ml_gradient(m, p, one, samples);
  std::reverse(samples.begin(), samples.end());
  std::swap(samples[0], samples[2]);
  CHECK(ebm::sampled_ml_gradient(m, p, one, samples) == a);
  CHECK_THROWS_AS(ebm::sampled_ml_gradient(m, p, one, std::vector<ebm::Sequence>{}), InvalidArgument);

  pot::MlpPotential mlp{{"body", {2, 4}, pot::Activation::kTanh}, "pot"};
  ParamStore q;
  mlp.init(q, rng);
  const auto cm = ebm::mlp_model(mlp);
  const auto x = oracle::random({5, 2}, rng);
  CHECK(max_abs(ebm::sampled_ml_gradient(cm, q, x, x)) < 1e-15);
  CHECK_THROWS_AS(ebm::sampled_ml_gradient(cm, q, x, RealArray({0, 2})), InvalidArgument);
}

TEST_CASE("joint conditional") {
  pot::ClassifierNet net{{"body", {2, 3}, pot::Activation::kTanh}, 2, "head"};
  Rng rng(9);
  ParamStore p;
  net.init(p, rng);
  p.value("head.W").fill(0.0);
  p.set("head.b", RealArray::row({1, 0}));
  const auto c = ebm::joint_conditional(net, p, std::vector<double>{0.3, 0.1});
  CHECK(c[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1)).epsilon(1e-15));
  CHECK(c[1] == doctest::Approx(1 / (std::exp(1.0) + 1)).epsilon(1e-15));
  CHECK(c[0] == doctest::Approx(0.7311).epsilon(1e-4));
  p.set("head.b", RealArray::row({0.5, 0.5}));
  const auto u = ebm::joint_conditional(net, p, std::vector<double>{2, 2});
  CHECK(u[0] == 0.5);
  CHECK(u[1] == 0.5);

  pot::ClassifierNet big{{"body", {2, 6, 6}, pot::Activation::kTanh}, 5, "head"};
  ParamStore q;
  big.init(q, rng);
  for (int t = 0; t < 100; ++t) {
    const auto x = oracle::random({2}, rng, 3);
    const auto want = softmax(pot::classifier_logits(big, q, x.values()).values());
    CHECK(ebm::joint_conditional(big, q, x.values()) == want);
  }
}

TEST_CASE("joint conditional ignores shared logit shifts") {
  Rng rng(10);
  pot::ClassifierNet net{{"body", {2, 6}, pot::Activation::kTanh}, 4, "head"};
  ParamStore p;
  net.init(p, rng);
  ParamStore s = p;
  for (auto& b : s.value("head.b").values()) b -= 2.5;
  for (int t = 0; t < 30; ++t) {
    const auto x = oracle::random({2}, rng);
    const auto a = ebm::joint_conditional(net, p, x.values());
    const auto b = ebm::joint_conditional(net, s, x.values());
    for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(a[k] - b[k]) < 1e-12);
  }
}

TEST_CASE("marginal fixed-dimensional potential") {
  Rng rng(11);
  pot::ClassifierNet net{{"body", {2, 5}, pot::Activation::kTanh}, 3, "head"};
  ParamStore p;
  net.init(p, rng);
  ParamStore flat = p;
  flat.value("head.W").fill(0.0);
  flat.set("head.b", RealArray::row({1.7, 1.7, 1.7}));
  CHECK(ebm::marginal_potential_fixed(net, flat, std::vector<double>{1, -1}) ==
        doctest::Approx(1.7 + std::log(3.0)).epsilon(1e-15));
  for (int t = 0; t < 30; ++t) {
    const auto x = oracle::random({2}, rng, 2);
    const auto l = pot::classifier_logits(net, p, x.values());
    const double u = ebm::marginal_potential_fixed(net, p, x.values());
    CHECK(u >= *std::max_element(l.values().begin(), l.values().end()));
    const double direct = std::log(std::exp(l[0]) + std::exp(l[1]) + std::exp(l[2]));
    CHECK(std::abs(u - direct) < 1e-12);
  }
}

TEST_CASE("marginal sequence potential") {
  Rng rng(12);
  auto enc = encoder(4, 3, 3);
  ParamStore zero = tagged(enc, rng);
  for (const auto& n : enc.tag_names()) zero.value(n).fill(0.0);
  CHECK(ebm::marginal_potential_seq(enc, zero, std::vector<int>{1, 3}) == doctest::Approx(std::log(9.0)).epsilon(1e-14));

  ParamStore p = tagged(enc, rng);
  std::uniform_int_distribution<int> tok(0, 3);
  for (int t = 0; t < 10; ++t) {
    std::vector<int> x(4);
    for (auto& v : x) v = tok(rng);
    const auto node = oracle::tag_logits(p, "enc", "tag", x);
    const auto edge = oracle::to_rows(p.value(enc.edge_name()));
    CHECK(std::abs(ebm::marginal_potential_seq(enc, p, x) - oracle::brute_log_z(node, edge)) < 1e-10);
  }
  const std::vector<int> x{0, 2, 1, 3, 3};
  ParamStore shifted = p;
  for (auto& b : shifted.value("tag.b").values()) b += 0.75;
  CHECK(ebm::marginal_potential_seq(enc, shifted, x) ==
        doctest::Approx(ebm::marginal_potential_seq(enc, p, x) + 5 * 0.75).epsilon(1e-13));
}

TEST_CASE("marginal sequence potential over a grid of label counts and lengths") {
  Rng rng(13);
  for (std::size_t k = 1; k <= 4; ++k) {
    auto enc = encoder(3, 2, k);
    ParamStore p = tagged(enc, rng);
    std::uniform_int_distribution<int> tok(0, 2);
    for (std::size_t len = 1; len <= 6; ++len) {
      std::vector<int> x(len);
      for (auto& v : x) v = tok(rng);
      const auto node = oracle::tag_logits(p, "enc", "tag", x);
      const auto edge = oracle::to_rows(p.value(enc.edge_name()));
      CHECK(std::abs(ebm::marginal_potential_seq(enc, p, x) - oracle::brute_log_z(node, edge)) < 1e-10);
    }
  }
}

TEST_CASE("marginal sequence model gradient matches finite differences") {
  Rng rng(14);
  auto enc = encoder(3, 2, 2);
  ParamStore p = tagged(enc, rng);
  const auto m = ebm::marginal_sequence_model(enc, {3, 1, 3});
  const std::vector<ebm::Sequence> data{{0, 2}, {1}, {2, 1, 1}};
  ad::Graph ll = [&](ad::Tape& t, const ad::Inputs&) { return ebm::exact_log_likelihood(t, m, data); };
  CHECK(ad::finite_diff_check(ll, p, {}) < 1e-4);
}
