#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ebmssl/crf.hpp"
#include "ebmssl/ebm.hpp"
#include "ebmssl/nce.hpp"
#include "ebmssl/samplers.hpp"

using namespace ebmssl;

namespace {

RealArray normal(std::vector<std::size_t> shape, Rng& rng) {
  RealArray a(std::move(shape));
  std::normal_distribution<double> n;
  for (auto& v : a.values()) v = n(rng);
  return a;
}

std::vector<int> tokens(std::size_t len, std::size_t vocab, Rng& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(vocab) - 1);
  std::vector<int> x(len);
  for (auto& t : x) t = d(rng);
  return x;
}

void BM_CrfForward(benchmark::State& state) {
  Rng rng(1);
  const auto len = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const crf::ChainPotentials ch{normal({len, k}, rng), normal({k, k}, rng), std::nullopt};
  for (auto _ : state) benchmark::DoNotOptimize(crf::forward_log_z(ch));
}
BENCHMARK(BM_CrfForward)->Args({12, 3})->Args({40, 9})->Args({100, 17});

void BM_Viterbi(benchmark::State& state) {
  Rng rng(2);
  const auto len = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const crf::ChainPotentials ch{normal({len, k}, rng), normal({k, k}, rng), std::nullopt};
  for (auto _ : state) benchmark::DoNotOptimize(crf::viterbi(ch));
}
BENCHMARK(BM_Viterbi)->Args({12, 3})->Args({40, 9});

// Tape construction plus backward pass of the bidirectional recurrent potential.
void BM_SequencePotentialBackward(benchmark::State& state) {
  Rng rng(3);
  pot::SeqEncoder enc;
  enc.vocab = 16;
  enc.dim = static_cast<std::size_t>(state.range(1));
  ParamStore p;
  enc.init(p, rng);
  const auto x = tokens(static_cast<std::size_t>(state.range(0)), enc.vocab, rng);
  for (auto _ : state) {
    ad::Tape t(p);
    t.backward(enc.pretrain_potential(t, x));
    benchmark::DoNotOptimize(t.param_gradients());
  }
}
BENCHMARK(BM_SequencePotentialBackward)->Args({12, 16})->Args({40, 32});

void BM_MarginalSequenceBackward(benchmark::State& state) {
  Rng rng(4);
  pot::SeqEncoder enc;
  enc.vocab = 16;
  enc.dim = 16;
  enc.classes = 3;
  ParamStore p;
  enc.init(p, rng);
  enc.init_tag_head(p, rng);
  const auto x = tokens(12, enc.vocab, rng);
  for (auto _ : state) {
    ad::Tape t(p);
    t.backward(ebm::marginal_potential_seq(t, enc, x));
    benchmark::DoNotOptimize(t.param_gradients());
  }
}
BENCHMARK(BM_MarginalSequenceBackward);

void BM_SgldStep(benchmark::State& state) {
  Rng rng(5);
  pot::ClassifierNet net;
  net.body.sizes = {2, 32, 32};
  net.classes = 4;
  ParamStore p;
  net.init(p, rng);
  const auto model = ebm::marginal_fixed_model(net);
  RealArray x = normal({static_cast<std::size_t>(state.range(0)), 2}, rng);
  const sampling::SgldConfig cfg{0.05, 1.0, 8.0};
  for (auto _ : state) sampling::sgld_step(model, p, x, cfg, rng);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SgldStep)->Arg(16)->Arg(64)->Arg(256);

void BM_NoiseSample(benchmark::State& state) {
  Rng rng(6);
  std::vector<nce::Sequence> corpus;
  for (int i = 0; i < 200; ++i) corpus.push_back(tokens(1 + i % 12, 16, rng));
  const auto lm = nce::noise_fit(corpus, 16, 12);
  for (auto _ : state) benchmark::DoNotOptimize(lm.sample(rng));
}
BENCHMARK(BM_NoiseSample);

}  // namespace

BENCHMARK_MAIN();
