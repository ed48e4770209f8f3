// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ebmssl/crf.hpp"
#include "ebmssl/ebm.hpp"
#include "ebmssl/graph.hpp"
#include "ebmssl/harness.hpp"
#include "ebmssl/nce.hpp"
#include "ebmssl/samplers.hpp"
#include "oracles.hpp"

using namespace ebmssl;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void info(const std::string& what) { notes.push_back("     " + what); }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double max_abs(const ebm::Gradients& g) {
  double m = 0;
  for (const auto& [n, a] : g)
    for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

pot::SeqEncoder encoder(std::size_t vocab, std::size_t dim, std::size_t classes) {
  pot::SeqEncoder e;
  e.vocab = vocab;
  e.dim = dim;
  e.classes = classes;
  return e;
}

void randomize(ParamStore& p, Rng& rng, double sd) {
  for (const auto& n : p.names()) p.set(n, oracle::random(p.value(n).shape(), rng, sd));
}

oracle::Seq random_seq(std::size_t base, std::size_t len, Rng& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(base) - 1);
  oracle::Seq s(len);
  for (auto& v : s) v = d(rng);
  return s;
}

// u(x) = theta[index of x in the enumeration of the space]
ebm::DiscreteEnergyModel tabular_model(const ebm::SequenceSpace& space) {
  auto all = std::make_shared<std::vector<ebm::Sequence>>(space.enumerate());
  return {space, [all](ad::Tape& t, std::span<const int> x) {
            const ebm::Sequence key(x.begin(), x.end());
            const std::vector<int> ids{static_cast<int>(std::find(all->begin(), all->end(), key) - all->begin())};
            return ad::embedding(t.param("theta"), ids);
          }};
}

// ---- 1: metric reproduction ----

struct TaggingTable {
  std::string task;
  double sup[3];
  double joint[3][3];        // proportion x U/L
  double over_sup[3][3];     // printed improvements, proportion x U/L
  bool checked[3];           // proportions held to the printed values
};

const double kProps[3] = {0.02, 0.10, 1.00};
const double kRatios[3] = {50, 250, 500};

const TaggingTable kTagging[] = {
    {"pos",
     {95.57, 96.81, 97.41},
     {{95.92, 96.13, 96.24}, {96.99, 97.00, 97.08}, {97.49, 97.54, 97.57}},
     {{7.9, 12.6, 15.1}, {5.6, 6.0, 8.5}, {3.1, 5.0, 6.2}},
     {true, true, true}},
    {"chunking",
     {78.73, 90.06, 94.77},
     {{82.24, 82.26, 83.05}, {91.85, 91.93, 92.23}, {95.31, 95.48, 95.50}},
     {{16.5, 16.6, 20.3}, {18.0, 18.3, 21.8}, {10.3, 13.6, 14.0}},
     {true, true, true}},
    {"ner",
     {78.91, 86.93, 90.74},
     {{77.61, 78.51, 79.17}, {87.05, 86.77, 87.06}, {91.34, 91.51, 91.52}},
     {{-2.7, 1.5, 4.5}, {0.9, -1.2, 1.0}, {6.5, 8.3, 8.4}},
     {false, true, true}},
};

Outcome criterion1() {
  Outcome o;
  harness::ResultTable table;
  for (const auto& t : kTagging)
    for (int p = 0; p < 3; ++p) {
      table.rows.push_back({t.task, kProps[p], 0, "supervised", 0, "accuracy", t.sup[p]});
      for (int r = 0; r < 3; ++r) table.rows.push_back({t.task, kProps[p], kRatios[r], "joint", 0, "accuracy", t.joint[p][r]});
    }
  std::size_t checked = 0, matched = 0;
  for (const auto& t : kTagging)
    for (int p = 0; p < 3; ++p)
      for (int r = 0; r < 3; ++r) {
        const auto v = harness::improvement(table, t.task, kProps[p], kRatios[r], "joint", "supervised", "accuracy");
        const double printed = t.over_sup[p][r];
        const std::string where = fmt("%s %g%% U/L %g: computed %.2f printed %.1f", t.task.c_str(), kProps[p] * 100,
                                      kRatios[r], v.value_or(NAN), printed);
        if (!t.checked[p]) {
          o.info("excluded " + where);
          continue;
        }
        ++checked;
        const bool ok = v && std::abs(*v - printed) <= 0.1 + 1e-9;
        matched += ok;
        if (!ok) o.require(false, where);
      }
  o.require(checked == 24, fmt("%zu entries held to the printed values", checked));
  o.info(fmt("%zu of %zu entries within 0.1", matched, checked));
  return o;
}

// ---- 2: gradient suite ----

Outcome criterion2() {
  Outcome o;
  Rng rng(2);
  const std::size_t n = 20;
  std::map<std::string, double> worst;
  auto record = [&](const std::string& name, ad::Graph g, ParamStore& p) {
    const double e = ad::finite_diff_check(g, p, {}, 1e-5);
    worst[name] = std::max(worst[name], e);
  };
  std::uniform_int_distribution<std::size_t> small(1, 4);
  for (std::size_t i = 0; i < n; ++i) {
    {  // softmax cross-entropy of a classifier
      pot::ClassifierNet net;
      net.body.sizes = {2, 1 + small(rng)};
      net.classes = 1 + small(rng);
      ParamStore p;
      net.init(p, rng);
      randomize(p, rng, 0.7);
      const std::size_t rows = small(rng);
      const RealArray x = oracle::random({rows, 2}, rng);
      std::vector<int> y = random_seq(net.classes, rows, rng);
      record("softmax_xent", [&](ad::Tape& t, const ad::Inputs&) { return ad::softmax_xent(net.logits(t, t.constant(x)), y); }, p);
    }
    {  // CRF negative log-likelihood, with a start vector on odd instances
      const std::size_t k = small(rng), l = 1 + small(rng);
      ParamStore p;
      p.add("node", oracle::random({l, k}, rng));
      p.add("edge", oracle::random({k, k}, rng));
      p.add("start", oracle::random({k}, rng));
      const auto y = random_seq(k, l, rng);
      const bool with_start = i % 2 == 1;
      record("crf_nll",
             [&](ad::Tape& t, const ad::Inputs&) {
               return crf::nll(t.param("node"), t.param("edge"), y, with_start ? t.param("start") : ad::Var{});
             },
             p);
    }
    {  // NCE loss for a recurrent sequence potential
      auto enc = encoder(3, 2 + i % 2, 2);
      ParamStore p;
      enc.init(p, rng);
      randomize(p, rng, 0.5);
      p.add("log_c", RealArray({1, 1}, -0.5 + 0.05 * static_cast<double>(i)));
      std::vector<nce::Sequence> corpus;
      for (int c = 0; c < 6; ++c) corpus.push_back(random_seq(3, small(rng), rng));
      const auto lm = nce::noise_fit(corpus, 3, 4);
      const std::size_t nu = small(rng);
      const auto noise = lm.sample(nu * corpus.size(), rng);
      const auto model = ebm::pretrain_sequence_model(enc, {3, 1, 4});
      record("nce_loss",
             [&](ad::Tape& t, const ad::Inputs&) {
               return nce::nce_loss(t, model.potential, t.param("log_c"), lm, corpus, noise, nu);
             },
             p);
    }
    {  // exact maximum-likelihood log-likelihood
      auto enc = encoder(2, 2 + i % 2, 2);
      ParamStore p;
      enc.init(p, rng);
      randomize(p, rng, 0.5);
      const auto model = ebm::pretrain_sequence_model(enc, {2, 1, 3});
      std::vector<ebm::Sequence> data;
      for (int c = 0; c < 4; ++c) data.push_back(random_seq(2, 1 + small(rng) % 3, rng));
      record("exact_log_likelihood",
             [&](ad::Tape& t, const ad::Inputs&) { return ebm::exact_log_likelihood(t, model, data); }, p);
    }
    {  // pre-training sequence potential
      auto enc = encoder(4, 2 + i % 3, 2);
      ParamStore p;
      enc.init(p, rng);
      randomize(p, rng, 0.5);
      const auto x = random_seq(4, 1 + small(rng), rng);
      record("pretrain_potential", [&](ad::Tape& t, const ad::Inputs&) { return enc.pretrain_potential(t, x); }, p);
    }
    {  // joint sequence score u(x, y) and its label-marginal
      auto enc = encoder(4, 2 + i % 2, 2 + small(rng) % 3);
      enc.start_vector = i % 2 == 0;
      ParamStore p;
      enc.init(p, rng);
      enc.init_tag_head(p, rng);
      randomize(p, rng, 0.5);
      const auto x = random_seq(4, small(rng), rng);
      const auto y = random_seq(enc.classes, x.size(), rng);
      record("joint_score",
             [&](ad::Tape& t, const ad::Inputs&) {
               return crf::chain_score(enc.tag_logits(t, enc.features(t, x)), enc.edge(t), y, enc.start(t));
             },
             p);
      record("joint_marginal", [&](ad::Tape& t, const ad::Inputs&) { return ebm::marginal_potential_seq(t, enc, x); }, p);
    }
  }
  for (const auto& [name, e] : worst) o.require(e < 1e-4, fmt("%-22s %zu instances, max rel. error %.2e", name.c_str(), n, e));
  return o;
}

// ---- 3: oracle equivalences ----

Outcome criterion3() {
  Outcome o;
  Rng rng(3);
  std::uniform_int_distribution<std::size_t> kd(1, 4), ld(1, 6);
  double z_err = 0;
  std::size_t vit_ok = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t k = kd(rng), l = ld(rng);
    const crf::ChainPotentials ch{oracle::random({l, k}, rng), oracle::random({k, k}, rng), std::nullopt};
    const auto node = oracle::to_rows(ch.node), edge = oracle::to_rows(ch.edge);
    z_err = std::max(z_err, std::abs(crf::forward_log_z(ch) - oracle::brute_log_z(node, edge)));
    vit_ok += crf::viterbi(ch).labels == oracle::brute_argmax(node, edge);
  }
  o.require(z_err < 1e-10, fmt("forward log Z vs enumeration, 100 chains (K<=4, l<=6): max |diff| %.2e", z_err));
  o.require(vit_ok == 100, fmt("viterbi vs enumeration argmax: %zu / 100", vit_ok));

  double m_err = 0;
  for (int i = 0; i < 100; ++i) {
    auto enc = encoder(5, 2 + i % 3, 1 + i % 4);
    ParamStore p;
    enc.init(p, rng);
    enc.init_tag_head(p, rng);
    randomize(p, rng, 0.8);
    const auto x = random_seq(5, ld(rng), rng);
    const double want = oracle::brute_log_z(oracle::tag_logits(p, enc.prefix, enc.tag_prefix, x),
                                            oracle::to_rows(p.value(enc.edge_name())));
    m_err = std::max(m_err, std::abs(ebm::marginal_potential_seq(enc, p, x) - want));
  }
  o.require(m_err < 1e-10, fmt("marginal sequence potential vs label enumeration, 100 inputs: max |diff| %.2e", m_err));

  double p_err = 0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t v = 2 + i % 2, maxl = v == 2 ? 5 : 4;
    auto enc = encoder(v, 2 + i % 3, 2);
    ParamStore p;
    enc.init(p, rng);
    randomize(p, rng, 0.8);
    oracle::Vec u;
    for (const auto& x : oracle::all_sequences(v, 1, maxl)) u.push_back(oracle::seq_potential(p, enc.prefix, x));
    p_err = std::max(p_err, std::abs(ebm::exact_log_partition(ebm::pretrain_sequence_model(enc, {v, 1, maxl}), p) -
                                     oracle::lse(u)));
  }
  o.require(p_err < 1e-10, fmt("exact log partition vs brute-force sum, 20 models: max |diff| %.2e", p_err));

  std::size_t bit_ok = 0;
  for (int i = 0; i < 100; ++i) {
    pot::ClassifierNet net;
    net.body.sizes = {3, 4, 5};
    net.classes = 2 + i % 4;
    ParamStore p;
    net.init(p, rng);
    randomize(p, rng, 1.5);
    const RealArray x = oracle::random({3}, rng, 2.0);
    const RealArray logits = pot::classifier_logits(net, p, x.values());
    double m = -INFINITY;
    for (double v : logits.values()) m = std::max(m, v);
    std::vector<double> want;
    double s = 0;
    for (double v : logits.values()) {
      want.push_back(std::exp(v - m));
      s += want.back();
    }
    for (auto& v : want) v /= s;
    const auto got = ebm::joint_conditional(net, p, x.values());
    bit_ok += got.size() == want.size() && std::memcmp(got.data(), want.data(), got.size() * sizeof(double)) == 0;
  }
  o.require(bit_ok == 100, fmt("joint conditional equals softmax of the logits bit for bit: %zu / 100", bit_ok));
  return o;
}

// ---- 4: maximum-likelihood fixed point and sampled gradient ----

Outcome criterion4() {
  Outcome o;
  Rng rng(4);
  {
    // recurrent potential plus a table offset that makes p(x) proportional to the counts
    const ebm::SequenceSpace space{2, 1, 3};
    const auto all = space.enumerate();
    auto enc = encoder(2, 3, 2);
    ParamStore p;
    enc.init(p, rng);
    std::vector<ebm::Sequence> data;
    RealArray theta({all.size(), 1});
    std::uniform_int_distribution<int> cd(1, 6);
    for (std::size_t i = 0; i < all.size(); ++i) {
      const int c = cd(rng);
      theta[i] = std::log(static_cast<double>(c)) - oracle::seq_potential(p, enc.prefix, all[i]);
      for (int r = 0; r < c; ++r) data.push_back(all[i]);
    }
    p.add("theta", theta);
    const auto table = tabular_model(space);
    const ebm::DiscreteEnergyModel m{space, [&](ad::Tape& t, std::span<const int> x) {
                                       return enc.pretrain_potential(t, x) + table.potential(t, x);
                                     }};
    const double g = max_abs(ebm::exact_ml_gradient(m, p, data));
    o.require(g < 1e-8, fmt("exact gradient at the fixed point: max |g| %.2e", g));
  }
  {
    auto enc = encoder(2, 2, 2);
    ParamStore p;
    enc.init(p, rng);
    randomize(p, rng, 0.8);
    const auto m = ebm::pretrain_sequence_model(enc, {2, 1, 3});
    const std::vector<ebm::Sequence> data{{0, 1}, {1}, {1, 1, 0}, {0, 0}};
    const auto exact = ebm::exact_ml_gradient(m, p, data);
    const std::size_t n = 10000;
    const auto samples = sampling::exact_discrete_sample(m, p, rng, n);
    const auto sampled = ebm::sampled_ml_gradient(m, p, data, samples);
    std::map<ebm::Sequence, ebm::Gradients> per_point;
    for (const auto& x : m.space.enumerate()) {
      ad::Tape t(p);
      t.backward(enc.pretrain_potential(t, x));
      per_point[x] = t.param_gradients();
    }
    // each coordinate, then a few random projections
    std::size_t coords = 0, within = 0;
    double worst_z = 0;
    auto check_direction = [&](const std::function<double(const ebm::Gradients&)>& project) {
      double s1 = 0, s2 = 0;
      for (const auto& x : samples) {
        const double z = project(per_point.at(x));
        s1 += z;
        s2 += z * z;
      }
      const double mean = s1 / static_cast<double>(n);
      const double se = std::sqrt(std::max(0.0, s2 / static_cast<double>(n) - mean * mean) / static_cast<double>(n));
      const double diff = std::abs(project(sampled) - project(exact));
      return std::pair{diff, se};
    };
    for (const auto& name : p.names())
      for (std::size_t i = 0; i < p.value(name).size(); ++i) {
        const auto [diff, se] = check_direction([&](const ebm::Gradients& g) { return g.at(name)[i]; });
        ++coords;
        within += diff <= 3.0 * se + 1e-12;
        if (se > 0) worst_z = std::max(worst_z, diff / se);
      }
    Rng dir_rng(44);
    std::size_t proj_ok = 0;
    for (int k = 0; k < 3; ++k) {
      std::map<std::string, RealArray> v;
      for (const auto& name : p.names()) v[name] = oracle::random(p.value(name).shape(), dir_rng);
      const auto [diff, se] = check_direction([&](const ebm::Gradients& g) {
        double s = 0;
        for (const auto& [name, a] : g)
          for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * v.at(name)[i];
        return s;
      });
      proj_ok += diff <= 3.0 * se;
    }
    o.require(proj_ok == 3, fmt("sampled vs exact gradient, 1e4 exact samples: %zu / 3 random projections within 3 SE", proj_ok));
    o.info(fmt("per coordinate: %zu / %zu within 3 SE, largest |diff|/SE %.2f", within, coords, worst_z));
  }
  return o;
}

// ---- 5 and 6: exact ML and NCE on a two-token space of length up to three ----

struct TinyProblem {
  ebm::SequenceSpace space{2, 1, 3};
  std::vector<ebm::Sequence> all = space.enumerate();
  std::vector<ebm::Sequence> data;
  oracle::Vec emp;

  TinyProblem() {
    const std::vector<int> counts{6, 2, 5, 1, 3, 8, 2, 1, 4, 2, 3, 1, 6, 4};
    double total = 0;
    for (int c : counts) total += c;
    for (std::size_t i = 0; i < all.size(); ++i) {
      for (int c = 0; c < counts[i]; ++c) data.push_back(all[i]);
      emp.push_back(counts[i] / total);
    }
  }
};

oracle::Vec exact_ml_solution(const TinyProblem& tp, std::size_t steps, double lr, std::size_t* steps_to_fit = nullptr) {
  const auto m = tabular_model(tp.space);
  ParamStore p;
  p.add("theta", RealArray({tp.all.size(), 1}, 0.0));
  for (std::size_t s = 1; s <= steps; ++s) {
    const auto g = ebm::exact_ml_gradient(m, p, tp.data);
    for (std::size_t i = 0; i < tp.all.size(); ++i) p.value("theta")[i] += lr * g.at("theta")[i];
    if (steps_to_fit && *steps_to_fit == 0 && oracle::tv(ebm::exact_probabilities(m, p), tp.emp) < 0.05)
      *steps_to_fit = s;
  }
  return ebm::exact_probabilities(m, p);
}

Outcome criterion5() {
  Outcome o;
  const auto t0 = Clock::now();
  TinyProblem tp;
  std::size_t hit = 0;
  const auto q = exact_ml_solution(tp, 2000, 1.0, &hit);
  const double tv = oracle::tv(q, tp.emp);
  o.require(tv < 0.05, fmt("TV to the empirical distribution after 2000 steps: %.2e", tv));
  o.info(fmt("TV first below 0.05 at step %zu", hit));
  // the same ascent with the recurrent potential, for reference
  {
    Rng rng(5);
    auto enc = encoder(2, 4, 2);
    ParamStore p;
    enc.init(p, rng);
    const auto m = ebm::pretrain_sequence_model(enc, tp.space);
    for (int s = 0; s < 2000; ++s) {
      const auto g = ebm::exact_ml_gradient(m, p, tp.data);
      for (const auto& [n, a] : g)
        for (std::size_t i = 0; i < a.size(); ++i) p.value(n)[i] += 0.2 * a[i];
    }
    o.info(fmt("recurrent potential after 2000 steps: TV %.3f (single tokens share u = 0)",
               oracle::tv(ebm::exact_probabilities(m, p), tp.emp)));
  }
  const double secs = seconds_since(t0);
  o.require(secs < 60, fmt("runtime %.1f s", secs));
  return o;
}

Outcome criterion6() {
  Outcome o;
  {
    const std::vector<nce::Sequence> corpus{{0, 1, 2}, {0, 1}, {2, 2, 1, 0}, {1}, {0, 1, 2, 2}, {2, 0}};
    const auto lm = nce::noise_fit(corpus, 3, 4);
    ParamStore p;
    p.add("w", RealArray({1, 1}, 0.0));
    p.add("log_c", RealArray({1, 1}, 0.0));
    const ebm::SeqPotentialFn u = [&](ad::Tape& t, std::span<const int> x) {
      return ad::add_scalar(t.param("w"), lm.log_prob(x));
    };
    Rng rng(6);
    for (std::size_t nu : {1u, 3u, 10u}) {
      const auto noise = lm.sample(nu * corpus.size(), rng);
      const auto r = nce::nce_loss(u, p, "log_c", lm, corpus, noise, nu);
      const double q = 1.0 / (1.0 + static_cast<double>(nu));
      const double want = (1.0 + static_cast<double>(nu)) * (-q * std::log(q) - (1 - q) * std::log(1 - q));
      o.require(std::abs(r.loss - want) <= 1e-9 && max_abs(r.grads) < 1e-6,
                fmt("matched model, nu=%zu: loss %.12f vs %.12f, max |grad| %.1e", nu, r.loss, want, max_abs(r.grads)));
    }
  }
  {
    TinyProblem tp;
    const auto ml = exact_ml_solution(tp, 2000, 1.0);
    const auto m = tabular_model(tp.space);
    ParamStore p;
    p.add("theta", RealArray({tp.all.size(), 1}, 0.0));
    p.add("log_c", RealArray({1, 1}, 0.0));
    const auto lm = nce::noise_fit(tp.data, 2, 3);
    Rng rng(60);
    const std::size_t nu = 10;
    std::uniform_int_distribution<std::size_t> pick(0, tp.data.size() - 1);
    for (int step = 0; step < 5000; ++step) {
      std::vector<nce::Sequence> batch;
      for (int i = 0; i < 16; ++i) batch.push_back(tp.data[pick(rng)]);
      const auto noise = lm.sample(nu * batch.size(), rng);
      const auto r = nce::nce_loss(m.potential, p, "log_c", lm, batch, noise, nu);
      for (const auto& [n, g] : r.grads)
        for (std::size_t i = 0; i < g.size(); ++i) p.value(n)[i] -= 0.05 * g[i];
    }
    const double tv = oracle::tv(ebm::exact_probabilities(m, p), ml);
    o.require(tv < 0.1, fmt("NCE (nu=10) vs exact-ML solution on the tiny space: TV %.3f", tv));
    o.info(fmt("log c %.3f vs -log Z %.3f", p.value("log_c")[0], -ebm::exact_log_partition(m, p)));
  }
  return o;
}

// ---- 7: SGLD on a standard normal ----

Outcome criterion7() {
  Outcome o;
  const ebm::ContinuousEnergyModel model{1, [](ad::Tape&, ad::Var x) { return ad::scale(ad::square(x), -0.5); }};
  ParamStore none;
  Rng rng(7);
  const std::size_t chains = 16, steps = 100000, burn = 1000;
  RealArray x({chains, 1}, 0.0);
  const sampling::SgldConfig cfg{0.05, 1.0, 0.0};
  double s1 = 0, s2 = 0;
  std::size_t cnt = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    sampling::sgld_step(model, none, x, cfg, rng);
    if (s < burn) continue;
    for (double v : x.values()) {
      s1 += v;
      s2 += v * v;
      ++cnt;
    }
  }
  const double mean = s1 / static_cast<double>(cnt);
  const double var = s2 / static_cast<double>(cnt) - mean * mean;
  o.require(std::abs(mean) < 0.05, fmt("mean %.4f (16 chains x 1e5 steps, step 0.05)", mean));
  o.require(std::abs(var - 1.0) < 0.1, fmt("variance %.4f", var));
  return o;
}

// ---- 8 and 9: synthetic semi-supervised experiments ----

const std::uint64_t kGlobalSeed = 2024;
const std::size_t kSeeds = 10;

struct TaskRun {
  harness::TaskSpec task;
  double proportion;
};

std::vector<TaskRun> ab_tasks() {
  auto mix = harness::TaskSpec::mixture_task();
  auto hmm = harness::TaskSpec::hmm_task();
  return {{mix, 4.0 / static_cast<double>(mix.per_class_pool)}, {hmm, 0.02}};
}

harness::RunOutcome run_method(const harness::TaskSpec& task, const harness::RunData& data, pipe::Method method,
                               double lambda, std::size_t run) {
  auto cfg = harness::default_train_config(task);
  cfg.method = method;
  cfg.unsup_weight = lambda;
  cfg.seed = harness::run_seed(kGlobalSeed, run);
  return harness::run_single(task, data, cfg);
}

Outcome criterion8() {
  Outcome o;
  const auto t0 = Clock::now();
  const std::vector<double> lambdas{0.1, 0.5, 1.0};
  for (const auto& [task, prop] : ab_tasks()) {
    const std::string metric = task.metric_name();
    std::vector<double> sup(kSeeds), pre(kSeeds);
    std::vector<std::vector<double>> joint_test(lambdas.size(), std::vector<double>(kSeeds));
    std::vector<double> joint_dev(lambdas.size(), 0.0);
    std::size_t identical = 0;
    for (std::size_t run = 0; run < kSeeds; ++run) {
      const auto data = harness::make_run_data(task, prop, 50, kGlobalSeed, run);
      const auto s = run_method(task, data, pipe::Method::kSupervised, 0.5, run);
      sup[run] = s.test.primary();
      pre[run] = run_method(task, data, pipe::Method::kPretrainFinetune, 0.5, run).test.primary();
      for (std::size_t l = 0; l < lambdas.size(); ++l) {
        const auto j = run_method(task, data, pipe::Method::kJoint, lambdas[l], run);
        joint_test[l][run] = j.test.primary();
        joint_dev[l] += j.dev.primary() / kSeeds;
      }
      const auto zero = run_method(task, data, pipe::Method::kJoint, 0.0, run);
      std::ostringstream a, b;
      write_checkpoint(a, s.model.params);
      write_checkpoint(b, zero.model.params);
      identical += a.str() == b.str() && std::memcmp(&zero.test.accuracy, &s.test.accuracy, sizeof(double)) == 0;
    }
    const std::size_t best = static_cast<std::size_t>(
        std::max_element(joint_dev.begin(), joint_dev.end()) - joint_dev.begin());
    const auto& joint = joint_test[best];
    auto mean = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    std::size_t wins = 0;
    for (std::size_t r = 0; r < kSeeds; ++r) wins += joint[r] > pre[r];
    const std::string tag = task.id + ": ";
    for (std::size_t l = 0; l < lambdas.size(); ++l)
      o.info(tag + fmt("joint lambda %.1f: dev %.4f test %.4f", lambdas[l], joint_dev[l], mean(joint_test[l])));
    o.info(tag + fmt("lambda %.1f chosen on dev; %s sup %.4f pre %.4f joint %.4f", lambdas[best], metric.c_str(),
                     mean(sup), mean(pre), mean(joint)));
    std::string per_seed = tag + "per seed (sup/pre/joint):";
    for (std::size_t r = 0; r < kSeeds; ++r) per_seed += fmt(" %.3f/%.3f/%.3f", sup[r], pre[r], joint[r]);
    o.info(per_seed);
    o.require(mean(joint) >= mean(sup), tag + fmt("(a) joint mean %.4f >= supervised mean %.4f", mean(joint), mean(sup)));
    o.require(mean(joint) >= mean(pre) && wins >= 6,
              tag + fmt("(b) joint mean %.4f >= pre-training mean %.4f, joint wins %zu / 10 seeds", mean(joint),
                        mean(pre), wins));
    o.require(identical == kSeeds, tag + fmt("(c) lambda = 0 identical to supervised in %zu / 10 seeds", identical));
  }
  const double secs = seconds_since(t0);
  o.require(secs < 1800, fmt("runtime %.0f s", secs));
  return o;
}

Outcome criterion9() {
  Outcome o;
  const std::vector<double> props{0.02, 0.10, 0.50, 1.00};
  for (const auto& [task, unused] : ab_tasks()) {
    (void)unused;
    std::vector<double> err;
    for (double p : props) {
      double s = 0;
      for (std::size_t run = 0; run < kSeeds; ++run) {
        const auto data = harness::make_run_data(task, p, 0, kGlobalSeed, run);
        s += 100.0 * (1.0 - run_method(task, data, pipe::Method::kSupervised, 0.5, run).test.primary());
      }
      err.push_back(s / kSeeds);
    }
    std::size_t inversions = 0;
    bool small = true;
    for (std::size_t i = 1; i < err.size(); ++i)
      if (err[i] > err[i - 1]) {
        ++inversions;
        small = small && err[i] - err[i - 1] <= 0.5;
      }
    o.require(inversions == 0 || (inversions == 1 && small),
              task.id + fmt(": supervised error %% at 2/10/50/100%%: %.2f %.2f %.2f %.2f", err[0], err[1], err[2], err[3]));
  }
  return o;
}

// ---- 10: determinism, checkpoints, selftest ----

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

harness::ExperimentGrid small_grid(const std::string& task_id, const std::filesystem::path& out) {
  harness::ExperimentGrid g;
  g.task = harness::TaskSpec::by_id(task_id);
  g.task.per_class_pool = 40;
  g.task.label_pool = 60;
  g.task.test_size = 100;
  g.task.dev_size = 30;
  g.train = harness::default_train_config(g.task);
  g.train.steps = 20;
  g.train.pretrain_steps = 15;
  g.train.hidden = 8;
  g.train.embed_dim = 4;
  g.train.sampler.particles = 8;
  g.train.sampler.steps_per_update = 3;
  g.train.nce.nu = 3;
  g.train.nce.refresh_every = 7;
  g.proportions = {0.1, 0.5};
  g.ratios = {0, 2};
  g.methods = {"supervised", "pretrain", "joint:0.5"};
  g.seeds = 2;
  g.global_seed = 77;
  g.out_dir = out;
  return g;
}

Outcome criterion10() {
  Outcome o;
  const auto root = std::filesystem::temp_directory_path() / "ebmssl-acceptance";
  std::filesystem::remove_all(root);
  for (const std::string id : {"mixture", "hmm", "hmm_bio"}) {
    auto g = small_grid(id, root / id / "a");
    const auto first = harness::run_grid(g);
    const std::string a = slurp(g.out_dir / "results.csv");
    const auto again = harness::run_grid(g);
    g.out_dir = root / id / "b";
    const auto fresh = harness::run_grid(g);
    const std::string b = slurp(g.out_dir / "results.csv");
    o.require(first.failures.empty() && fresh.failures.empty() && !a.empty() && a == b,
              id + fmt(": grid rerun in a fresh directory reproduces %zu CSV rows bit for bit", first.table.rows.size()));
    o.require(again.trained == 0 && slurp(root / id / "a" / "results.csv") == a,
              id + fmt(": rerun in place reuses %zu finished runs", again.reused));
  }
  {
    const auto task = harness::TaskSpec::hmm_task();
    const auto data = harness::make_run_data(task, 0.02, 5, 1, 0);
    auto cfg = harness::default_train_config(task);
    cfg.steps = 20;
    cfg.method = pipe::Method::kJoint;
    const auto model = pipe::train(*data.seq, cfg, static_cast<const data::SequenceDataset*>(nullptr));
    std::ostringstream first;
    write_checkpoint(first, model.params);
    std::istringstream in(first.str());
    const auto back = read_checkpoint(in);
    std::ostringstream second;
    write_checkpoint(second, back);
    bool bits = back.names() == model.params.names();
    for (const auto& n : model.params.names())
      bits = bits && back.value(n).shape() == model.params.value(n).shape() &&
             std::memcmp(back.value(n).values().data(), model.params.value(n).values().data(),
                         model.params.value(n).size() * sizeof(double)) == 0;
    o.require(bits && first.str() == second.str(), "parameter checkpoint round-trips bit for bit");

    // interrupted and resumed run equals the uninterrupted one
    auto ck = cfg;
    ck.checkpoint = root / "resume.ckpt";
    ck.checkpoint_every = 5;
    ck.stop_after = 12;
    pipe::train(*data.seq, ck, static_cast<const data::SequenceDataset*>(nullptr));
    ck.stop_after = 0;
    ck.resume = true;
    const auto resumed = pipe::train(*data.seq, ck, static_cast<const data::SequenceDataset*>(nullptr));
    std::ostringstream r;
    write_checkpoint(r, resumed.params);
    o.require(r.str() == first.str(), "run interrupted at step 12 and resumed ends with identical parameters");
  }
  {
    std::map<std::string, std::size_t> per_module;
    for (const auto& c : harness::selftest_registry()) ++per_module[c.id.substr(0, c.id.find('.'))];
    bool covered = true;
    for (const auto& [module, n] : harness::declared_invariants()) covered = covered && per_module[module] >= n;
    const auto verdicts = harness::selftest();
    std::size_t passed = 0;
    for (const auto& v : verdicts) {
      passed += v.pass;
      if (!v.pass) o.info("selftest " + v.id + " failed: " + v.detail);
    }
    o.require(covered && harness::declared_invariants().size() == 9,
              fmt("selftest registry covers the invariants of all %zu modules", harness::declared_invariants().size()));
    o.require(passed == verdicts.size(), fmt("selftest %zu / %zu checks pass", passed, verdicts.size()));
  }
  std::filesystem::remove_all(root);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"relative error reduction reproduces the tagging improvement table", criterion1},
      {"finite-difference gradient suite", criterion2},
      {"oracle equivalences", criterion3},
      {"maximum-likelihood fixed point and sampled gradient", criterion4},
      {"exact maximum-likelihood convergence", criterion5},
      {"NCE consistency", criterion6},
      {"SGLD on a standard normal", criterion7},
      {"semi-supervised A/B on synthetic tasks", criterion8},
      {"supervised error falls with more labels", criterion9},
      {"determinism, checkpoints and selftest", criterion10},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out.require(false, std::string("exception: ") + e.what());
    }
    const double secs = seconds_since(t0);
    std::printf("criterion %2d: %s  %s  [%.1f s]\n", id, out.pass ? "PASS" : "FAIL", criteria[i].first, secs);
    for (const auto& n : out.notes) std::printf("      %s\n", n.c_str());
    std::fflush(stdout);
    failed += !out.pass;
  }
  return failed == 0 ? 0 : 1;
}
