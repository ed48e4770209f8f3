#include <cmath>
#include <sstream>

#include "doctest.h"
#include "ebmssl/error.hpp"
#include "ebmssl/graph.hpp"
#include "ebmssl/potentials.hpp"
#include "oracles.hpp"

using namespace ebmssl;

TEST_CASE("affine with identity weight returns the input") {
  ParamStore p;
  p.add("M", RealArray::matrix(2, 2, {1, 0, 0, 1}));
  p.add_zeros("b", {2});
  ad::Graph g = [](ad::Tape& t, const ad::Inputs& in) {
    return ad::affine(ad::bind(t, in, "x"), t.param("M"), t.param("b"));
  };
  const auto out = ad::evaluate(g, p, {{"x", RealArray::matrix(1, 2, {1, 2})}});
  CHECK(out[0] == 1.0);
  CHECK(out[1] == 2.0);
}

TEST_CASE("logsumexp of zeros is log 3") {
  ParamStore p;
  ad::Graph g = [](ad::Tape& t, const ad::Inputs& in) { return ad::log_sum_exp(ad::bind(t, in, "v")); };
  const auto out = ad::evaluate(g, p, {{"v", RealArray({1, 3}, 0.0)}});
  CHECK(out.item() == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK(log_sum_exp(std::vector<double>{0, 0, 0}) == doctest::Approx(1.0986122886681098));
}

TEST_CASE("two-layer tanh MLP matches a hand-rolled forward pass") {
  Rng rng(3);
  pot::MlpBody body{"body", {3, 4, 5}, pot::Activation::kTanh};
  ParamStore p;
  body.init(p, rng);
  p.set("body.l0.b", oracle::random({4}, rng));
  p.set("body.l1.b", oracle::random({5}, rng));
  const oracle::Vec x{0.3, -1.2, 0.7};
  const auto ref = oracle::mlp_body(p, "body", 2, x);
  const auto got = pot::mlp_hidden_batch(body, p, RealArray({1, 3}, std::vector<double>(x)));
  for (std::size_t i = 0; i < 5; ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("evaluate errors") {
  ParamStore p;
  p.add("w", RealArray::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  p.add_zeros("b", {2});
  ad::Graph g = [](ad::Tape& t, const ad::Inputs& in) { return ad::affine(ad::bind(t, in, "x"), t.param("w"), t.param("b")); };
  CHECK_THROWS_AS(ad::evaluate(g, p, {}), UnboundNameError);
  CHECK_THROWS_AS(ad::evaluate(g, p, {{"x", RealArray({1, 2}, 1.0)}}), ShapeError);
  ad::Graph unknown = [](ad::Tape& t, const ad::Inputs&) { return t.param("nope"); };
  CHECK_THROWS_AS(ad::evaluate(unknown, p, {}), UnboundNameError);
  ad::Graph overflow = [](ad::Tape& t, const ad::Inputs& in) {
    auto v = ad::bind(t, in, "x");
    for (int i = 0; i < 12; ++i) v = ad::square(v);
    return v;
  };
  CHECK_THROWS_AS(ad::evaluate(overflow, p, {{"x", RealArray({1, 1}, 1e3)}}), NonFiniteError);
  RealArray bad({1, 3}, 0.0);
  bad[1] = NAN;
  CHECK_THROWS_AS(ad::evaluate(g, p, {{"x", bad}}), NonFiniteError);
}

TEST_CASE("gradient of half squared norm is the point") {
  ParamStore p;
  p.add("x", RealArray::matrix(1, 2, {3, -4}));
  ad::Graph g = [](ad::Tape& t, const ad::Inputs&) { return ad::scale(ad::sum(ad::square(t.param("x"))), 0.5); };
  const double v = ad::gradient(g, p, {});
  CHECK(v == 12.5);
  CHECK(p.grad("x")[0] == 3.0);
  CHECK(p.grad("x")[1] == -4.0);
  // repeated calls accumulate
  ad::gradient(g, p, {});
  CHECK(p.grad("x")[0] == 6.0);
  p.zero_grad();
  CHECK(p.grad("x")[1] == 0.0);
}

TEST_CASE("gradient of logsumexp is softmax") {
  Rng rng(4);
  ParamStore p;
  p.add("v", oracle::random({1, 5}, rng, 2.0));
  ad::Graph g = [](ad::Tape& t, const ad::Inputs&) { return ad::log_sum_exp(t.param("v")); };
  ad::gradient(g, p, {});
  const double z = oracle::lse(oracle::Vec(p.value("v").values().begin(), p.value("v").values().end()));
  for (std::size_t i = 0; i < 5; ++i) CHECK(p.grad("v")[i] == doctest::Approx(std::exp(p.value("v")[i] - z)).epsilon(1e-14));
}

TEST_CASE("gradient requires a scalar output") {
  ParamStore p;
  p.add("v", RealArray({1, 3}, 1.0));
  ad::Graph g = [](ad::Tape& t, const ad::Inputs&) { return ad::tanh(t.param("v")); };
  CHECK_THROWS_AS(ad::gradient(g, p, {}), ShapeError);
}

TEST_CASE("finite differences on a quadratic are near exact") {
  Rng rng(5);
  ParamStore p;
  p.add("a", oracle::random({2, 3}, rng));
  ad::Graph g = [](ad::Tape& t, const ad::Inputs&) { return ad::sum(ad::square(t.param("a"))); };
  CHECK(ad::finite_diff_check(g, p, {}, 1e-5) < 1e-9);
  CHECK_THROWS_AS(ad::finite_diff_check(g, p, {}, 0.5), InvalidArgument);
}

TEST_CASE("finite differences on every tape operation") {
  Rng rng(6);
  ParamStore p;
  p.add("a", oracle::random({3, 4}, rng));
  p.add("b", oracle::random({3, 4}, rng));
  p.add("w", oracle::random({2, 4}, rng));
  p.add("r", oracle::random({1, 4}, rng));
  p.add("emb", oracle::random({5, 3}, rng));
  p.add("wx", oracle::random({9, 3}, rng, 0.5));
  p.add("uh", oracle::random({9, 3}, rng, 0.5));
  p.add("gb", oracle::random({9}, rng, 0.5));
  const std::vector<int> ids{4, 0, 2, 2};
  const std::vector<int> targets{1, 0, 3};
  std::vector<ad::Graph> graphs{
      [](ad::Tape& t, const ad::Inputs&) { return ad::sum(ad::matmul_t(t.param("a"), t.param("w"))); },
      [](ad::Tape& t, const ad::Inputs&) { return ad::sum(ad::tanh(ad::mul(t.param("a"), t.param("b")))); },
      [](ad::Tape& t, const ad::Inputs&) { return ad::sum(ad::sigmoid(ad::sub(t.param("a"), t.param("b")))); },
      [](ad::Tape& t, const ad::Inputs&) { return ad::sum(ad::log_sigmoid(ad::add_row(t.param("a"), t.param("r")))); },
      [](ad::Tape& t, const ad::Inputs&) { return ad::mean(ad::log_sum_exp_rows(t.param("a"))); },
      [&](ad::Tape& t, const ad::Inputs&) { return ad::softmax_xent(t.param("a"), targets); },
      [](ad::Tape& t, const ad::Inputs&) {
        return ad::sum(ad::row_dot(ad::slice_rows(t.param("a"), 0, 2), ad::slice_rows(ad::slice_cols(ad::concat_cols(t.param("b"), t.param("a")), 2, 6), 1, 3)));
      },
      [&](ad::Tape& t, const ad::Inputs&) {
        auto x = ad::embedding(t.param("emb"), ids);
        auto hf = ad::gru_scan(x, t.param("wx"), t.param("uh"), t.param("gb"), false);
        auto hb = ad::gru_scan(x, t.param("wx"), t.param("uh"), t.param("gb"), true);
        std::vector<ad::Var> parts{hf, hb};
        return ad::sum(ad::square(ad::concat_rows(parts)));
      },
      [](ad::Tape& t, const ad::Inputs&) { return ad::scale(ad::sum(ad::add_scalar(ad::square(t.param("r")), 2.0)), 0.3); },
  };
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    CAPTURE(i);
    CHECK(ad::finite_diff_check(graphs[i], p, {}, 1e-5) < 1e-6);
  }
}

TEST_CASE("evaluation is pure") {
  Rng rng(7);
  ParamStore p;
  p.add("a", oracle::random({4, 4}, rng));
  const ParamStore before = p;
  ad::Graph g = [](ad::Tape& t, const ad::Inputs&) { return ad::log_sum_exp(ad::tanh(t.param("a"))); };
  const auto a = ad::evaluate(g, p, {});
  const auto b = ad::evaluate(g, p, {});
  CHECK(a == b);
  CHECK(p == before);
}

TEST_CASE("logsumexp shift identity") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto v = oracle::random({9}, rng, 5.0);
    const double base = log_sum_exp(v.values());
    for (double c : {-500.0, -3.0, 1e-3, 17.0, 650.0}) {
      std::vector<double> s(v.values().begin(), v.values().end());
      for (auto& e : s) e += c;
      CHECK(std::abs(log_sum_exp(s) - (base + c)) <= 1e-12 * std::max(1.0, std::abs(base + c)));
    }
  }
  CHECK(std::isinf(log_sum_exp(std::vector<double>{})));
  CHECK(std::isfinite(log_sum_exp(std::vector<double>{1000.0, 1000.0})));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  Rng rng(9);
  ParamStore p;
  p.add("z", oracle::random({3, 2}, rng));
  p.add("a.b", oracle::random({5}, rng, 1e-7));
  p.add("s", RealArray::scalar(0.1 + 0.2));
  std::ostringstream os;
  write_checkpoint(os, p);
  CHECK(os.str().rfind("EBMSSL-CKPT v1\n", 0) == 0);
  std::istringstream is(os.str());
  const ParamStore q = read_checkpoint(is);
  CHECK(q == p);
  for (const auto& n : p.names()) CHECK(q.value(n) == p.value(n));
}

TEST_CASE("corrupted checkpoints are rejected") {
  for (const char* text : {"", "EBMSSL-CKPT v2\n", "EBMSSL-CKPT v1\nw 2 2 2\n1 2 3\n", "EBMSSL-CKPT v1\nw 1 2\n1 x\n",
                           "EBMSSL-CKPT v1\nw 1 2\n1 nan\n"}) {
    std::istringstream is(text);
    CHECK_THROWS_AS(read_checkpoint(is), FormatError);
  }
}

TEST_CASE("param store contracts") {
  Rng rng(10);
  ParamStore p;
  p.add_weight("w", 4, 6, rng);
  CHECK_THROWS_AS(p.add_zeros("w", {2}), InvalidArgument);
  const double s = std::sqrt(6.0 / 10.0);
  for (double v : p.value("w").values()) CHECK(std::abs(v) <= s);
  CHECK(p.grad("w").same_shape(p.value("w")));
}

TEST_CASE("momentum optimizer clips the global norm") {
  ParamStore p;
  p.add("x", RealArray::matrix(1, 2, {0, 0}));
  p.grad("x")[0] = 30;
  p.grad("x")[1] = 40;
  ad::MomentumOptimizer opt(0.1, 0.9, 5.0);
  CHECK(opt.step(p) == doctest::Approx(50.0));
  CHECK(p.value("x")[0] == doctest::Approx(-0.3));
  CHECK(p.value("x")[1] == doctest::Approx(-0.4));
}

TEST_CASE("finite differences flag a wrong gradient and accept rounding-level zeros") {
  ParamStore p;
  p.add("a", RealArray({1, 1}, 0.7));
  // tanh(a) - tanh(a) has a zero gradient that only rounding can perturb
  ad::Graph zero = [](ad::Tape& t, const ad::Inputs&) { return ad::tanh(t.param("a")) - ad::tanh(t.param("a")); };
  CHECK(ad::finite_diff_check(zero, p, {}, 1e-5) < 1e-4);
  // reading the parameter as a constant hides it from the backward pass
  ad::Graph hidden = [&p](ad::Tape& t, const ad::Inputs&) { return ad::sum(ad::square(t.constant(p.value("a")))); };
  CHECK(ad::finite_diff_check(hidden, p, {}, 1e-5) == doctest::Approx(1.0));
}
