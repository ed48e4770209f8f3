#include "ebmssl/nce.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ebmssl/error.hpp"

namespace ebmssl::nce {

NoiseLM::NoiseLM(std::size_t vocab, std::size_t max_len)
    : vocab_(vocab),
      max_len_(max_len),
      bigram_((vocab + 1) * vocab, 0),
      row_totals_(vocab + 1, 0),
      lengths_(max_len, 0) {
  if (vocab == 0 || max_len == 0) throw InvalidArgument("NoiseLM: vocab and max_len must be positive");
}

void NoiseLM::add(std::span<const int> x) {
  if (x.empty() || x.size() > max_len_) {
    throw InvalidArgument("NoiseLM: sequence length " + std::to_string(x.size()) + " outside 1.." +
                          std::to_string(max_len_));
  }
  std::size_t ctx = 0;
  for (int t : x) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_) throw InvalidArgument("NoiseLM: token outside vocabulary");
    ++bigram_[ctx * vocab_ + static_cast<std::size_t>(t)];
    ++row_totals_[ctx];
    ctx = static_cast<std::size_t>(t) + 1;
  }
  ++lengths_[x.size() - 1];
  ++total_sequences_;
}

NoiseLM NoiseLM::fit(std::span<const Sequence> corpus, std::size_t vocab, std::size_t max_len) {
  if (corpus.empty()) throw InvalidArgument("NoiseLM: empty corpus");
  NoiseLM lm(vocab, max_len);
  for (const auto& x : corpus) lm.add(x);
  return lm;
}

NoiseLM noise_fit(std::span<const Sequence> corpus, std::size_t vocab, std::size_t max_len) {
  return NoiseLM::fit(corpus, vocab, max_len);
}

double NoiseLM::next_prob(int prev, int token) const {
  const std::size_t ctx = prev < 0 ? 0 : static_cast<std::size_t>(prev) + 1;
  return static_cast<double>(bigram_[ctx * vocab_ + static_cast<std::size_t>(token)] + 1) /
         static_cast<double>(row_totals_[ctx] + static_cast<std::int64_t>(vocab_));
}

double NoiseLM::length_prob(std::size_t len) const {
  if (len == 0 || len > max_len_ || total_sequences_ == 0) return 0.0;
  return static_cast<double>(lengths_[len - 1]) / static_cast<double>(total_sequences_);
}

double NoiseLM::log_prob(std::span<const int> x) const {
  double lp = std::log(length_prob(x.size()));
  int prev = -1;
  for (int t : x) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_) throw InvalidArgument("NoiseLM: token outside vocabulary");
    lp += std::log(next_prob(prev, t));
    prev = t;
  }
  return lp;
}

Sequence NoiseLM::sample(Rng& rng) const {
  std::discrete_distribution<std::size_t> len_dist(lengths_.begin(), lengths_.end());
  const std::size_t len = len_dist(rng) + 1;
  Sequence x;
  x.reserve(len);
  std::vector<double> w(vocab_);
  int prev = -1;
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t t = 0; t < vocab_; ++t) w[t] = next_prob(prev, static_cast<int>(t));
    std::discrete_distribution<int> next(w.begin(), w.end());
    prev = next(rng);
    x.push_back(prev);
  }
  return x;
}

std::vector<Sequence> NoiseLM::sample(std::size_t n, Rng& rng) const {
  std::vector<Sequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample(rng));
  return out;
}

double NoiseLM::entropy() const {
  // Row entropies of the smoothed transition matrix.
  std::vector<double> row_h(vocab_ + 1, 0.0);
  for (std::size_t ctx = 0; ctx <= vocab_; ++ctx) {
    const int prev = ctx == 0 ? -1 : static_cast<int>(ctx) - 1;
    for (std::size_t t = 0; t < vocab_; ++t) {
      const double p = next_prob(prev, static_cast<int>(t));
      row_h[ctx] -= p * std::log(p);
    }
  }
  double h = 0.0;
  double token_h_prefix = 0.0;  // sum of expected conditional entropies up to position i
  std::vector<double> ctx_dist(vocab_ + 1, 0.0);
  ctx_dist[0] = 1.0;
  for (std::size_t len = 1; len <= max_len_; ++len) {
    double step_h = 0.0;
    std::vector<double> next(vocab_ + 1, 0.0);
    for (std::size_t ctx = 0; ctx <= vocab_; ++ctx) {
      if (ctx_dist[ctx] == 0.0) continue;
      step_h += ctx_dist[ctx] * row_h[ctx];
      const int prev = ctx == 0 ? -1 : static_cast<int>(ctx) - 1;
      for (std::size_t t = 0; t < vocab_; ++t) next[t + 1] += ctx_dist[ctx] * next_prob(prev, static_cast<int>(t));
    }
    token_h_prefix += step_h;
    ctx_dist = std::move(next);
    const double pl = length_prob(len);
    if (pl > 0.0) h += pl * (token_h_prefix - std::log(pl));
  }
  return h;
}

void NoiseLM::to_params(ParamStore& store, const std::string& prefix) const {
  std::vector<double> big(bigram_.begin(), bigram_.end());
  std::vector<double> len(lengths_.begin(), lengths_.end());
  store.set(prefix + ".bigram", RealArray({vocab_ + 1, vocab_}, std::move(big)));
  store.set(prefix + ".length", RealArray({max_len_}, std::move(len)));
}

NoiseLM NoiseLM::from_params(const ParamStore& store, const std::string& prefix) {
  const RealArray& big = store.value(prefix + ".bigram");
  const RealArray& len = store.value(prefix + ".length");
  if (big.rank() != 2 || big.rows() != big.cols() + 1) throw FormatError("noise bigram table must be (V+1) x V");
  NoiseLM lm(big.cols(), len.size());
  for (std::size_t i = 0; i < big.size(); ++i) {
    const double v = big[i];
    if (v < 0 || v != std::floor(v)) throw FormatError("noise bigram counts must be non-negative integers");
    lm.bigram_[i] = static_cast<std::int64_t>(v);
    lm.row_totals_[i / lm.vocab_] += lm.bigram_[i];
  }
  for (std::size_t i = 0; i < len.size(); ++i) {
    const double v = len[i];
    if (v < 0 || v != std::floor(v)) throw FormatError("noise length counts must be non-negative integers");
    lm.lengths_[i] = static_cast<std::int64_t>(v);
    lm.total_sequences_ += lm.lengths_[i];
  }
  if (lm.total_sequences_ == 0) throw FormatError("noise length table is empty");
  return lm;
}

ad::Var nce_loss(ad::Tape& tape, const ebm::SeqPotentialFn& potential, ad::Var log_c, const NoiseLM& noise,
                 std::span<const Sequence> data, std::span<const Sequence> noise_batch, std::size_t nu) {
  if (nu < 1) throw InvalidArgument("nce_loss: noise ratio must be >= 1");
  if (data.empty()) throw InvalidArgument("nce_loss: empty data batch");
  if (noise_batch.size() != nu * data.size()) {
    throw InvalidArgument("nce_loss: noise batch must hold nu x data batch size sequences");
  }
  const double log_nu = std::log(static_cast<double>(nu));
  auto discriminant = [&](std::span<const Sequence> xs) {
    std::vector<ad::Var> us;
    std::vector<double> shift;
    us.reserve(xs.size());
    for (const auto& x : xs) {
      const double lp = noise.log_prob(x);
      if (!std::isfinite(lp)) throw NonFiniteError("nce_loss: noise assigns zero probability to a sequence");
      us.push_back(potential(tape, x));
      shift.push_back(-lp - log_nu);
    }
    ad::Var u = ad::concat_rows(us);
    ad::Var g = ad::add_row(u, log_c);
    return ad::add(g, tape.constant(xs.size(), 1, std::move(shift)));
  };
  ad::Var gd = discriminant(data);
  ad::Var gn = discriminant(noise_batch);
  ad::Var data_term = ad::scale(ad::mean(ad::log_sigmoid(gd)), -1.0);
  ad::Var noise_term = ad::scale(ad::mean(ad::log_sigmoid(ad::scale(gn, -1.0))), -static_cast<double>(nu));
  return ad::add(data_term, noise_term);
}

NceResult nce_loss(const ebm::SeqPotentialFn& potential, const ParamStore& params, const std::string& log_c_name,
                   const NoiseLM& noise, std::span<const Sequence> data, std::span<const Sequence> noise_batch,
                   std::size_t nu) {
  ad::Tape tape(params);
  ad::Var loss = nce_loss(tape, potential, tape.param(log_c_name), noise, data, noise_batch, nu);
  tape.backward(loss);
  return {tape.item(loss), tape.param_gradients()};
}

double matched_loss(std::size_t nu) {
  const double n = static_cast<double>(nu);
  const double p = 1.0 / (1.0 + n);
  const double hb = -p * std::log(p) - (1.0 - p) * std::log(1.0 - p);
  return (1.0 + n) * hb;
}

NoiseLM dnce_refresh(const NoiseLM& noise, std::span<const Sequence> corpus,
                     const std::function<double(const Sequence&)>& score, Rng& rng, const DnceConfig& cfg) {
  if (corpus.empty()) throw InvalidArgument("dnce_refresh: empty corpus");
  if (cfg.model_fraction < 0.0 || cfg.model_fraction >= 1.0) {
    throw InvalidArgument("dnce_refresh: model fraction must be in [0, 1)");
  }
  std::vector<Sequence> mix;
  if (cfg.max_corpus > 0 && corpus.size() > cfg.max_corpus) {
    std::vector<std::size_t> idx(corpus.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(cfg.max_corpus);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) mix.push_back(corpus[i]);
  } else {
    mix.assign(corpus.begin(), corpus.end());
  }
  const std::size_t n_corpus = mix.size();
  const auto n_model = static_cast<std::size_t>(
      std::llround(static_cast<double>(n_corpus) * cfg.model_fraction / (1.0 - cfg.model_fraction)));
  if (n_model > 0) {
    auto drawn = noise.sample(2 * n_model, rng);
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(drawn.size());
    for (std::size_t i = 0; i < drawn.size(); ++i) scored.emplace_back(score(drawn[i]), i);
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; k < n_model; ++k) mix.push_back(std::move(drawn[scored[k].second]));
  }
  return NoiseLM::fit(mix, noise.vocab(), noise.max_len());
}

}  // namespace ebmssl::nce
