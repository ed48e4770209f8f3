#include "ebmssl/samplers.hpp"

#include <algorithm>
#include <cmath>

#include "ebmssl/error.hpp"

namespace ebmssl::sampling {

namespace {

RealArray normal_matrix(std::size_t n, std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  RealArray out({n, d});
  for (auto& v : out.values()) v = normal(rng);
  return out;
}

double row_norm(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

bool row_ok(std::span<const double> r) {
  for (double v : r) {
    if (!std::isfinite(v)) return false;
  }
  return row_norm(r) <= kDivergenceNorm;
}

void reinit_row(std::span<double> r, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : r) v = normal(rng);
}

// Gradient of u at every row of x; rows whose forward or backward fails are
// flagged in ok.
RealArray potential_gradients(const ebm::ContinuousEnergyModel& model, const ParamStore& params,
                              const RealArray& x, std::vector<bool>& ok) {
  ok.assign(x.rows(), true);
  try {
    ad::Tape tape(params);
    ad::Var v = tape.variable(x);
    ad::Var u = ad::sum(model.potential(tape, v));
    tape.backward(u);
    return tape.grad_array(v);
  } catch (const NonFiniteError&) {
  }
  RealArray grads({x.rows(), x.cols()}, 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    try {
      ad::Tape tape(params);
      RealArray row({1, x.cols()}, std::vector<double>(x.row_view(i).begin(), x.row_view(i).end()));
      ad::Var v = tape.variable(row);
      tape.backward(ad::sum(model.potential(tape, v)));
      auto g = tape.grad(v);
      std::copy(g.begin(), g.end(), grads.row_view(i).begin());
    } catch (const NonFiniteError&) {
      ok[i] = false;
    }
  }
  return grads;
}

}  // namespace

ChainState ChainState::standard_normal(std::size_t n, std::size_t dim, Rng& rng) {
  if (n == 0 || dim == 0) throw InvalidArgument("chain needs at least one particle of positive dimension");
  ChainState c;
  c.particles = normal_matrix(n, dim, rng);
  return c;
}

void ChainState::validate() const {
  if (particles.size() == 0) throw InvalidArgument("chain: no particles");
  if (!(sgld.step_size > 0.0)) throw InvalidArgument("chain: SGLD step size must be positive");
  if (reinit_prob < 0.0 || reinit_prob > 1.0) throw InvalidArgument("chain: reinit probability outside [0,1]");
}

SgldStats sgld_step(const ebm::ContinuousEnergyModel& model, const ParamStore& params, RealArray& particles,
                    const SgldConfig& cfg, Rng& rng) {
  if (!(cfg.step_size > 0.0)) throw InvalidArgument("sgld_step: step size must be positive");
  if (particles.cols() != model.dim) throw ShapeError("sgld_step: particle dimension mismatch");
  SgldStats stats;
  for (std::size_t i = 0; i < particles.rows(); ++i) {
    if (!row_ok(particles.row_view(i))) {
      reinit_row(particles.row_view(i), rng);
      ++stats.diverged;
    }
  }
  std::vector<bool> ok;
  const RealArray grads = potential_gradients(model, params, particles, ok);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double drift = 0.5 * cfg.step_size;
  const double noise = cfg.noise_scale * std::sqrt(cfg.step_size);
  for (std::size_t i = 0; i < particles.rows(); ++i) {
    auto row = particles.row_view(i);
    if (!ok[i]) {
      reinit_row(row, rng);
      ++stats.diverged;
      continue;
    }
    auto g = grads.row_view(i);
    for (std::size_t k = 0; k < row.size(); ++k) {
      double v = row[k] + drift * g[k];
      if (noise != 0.0) v += noise * normal(rng);
      if (cfg.bound > 0.0) v = std::clamp(v, -cfg.bound, cfg.bound);
      row[k] = v;
    }
    if (!row_ok(row)) {
      reinit_row(row, rng);
      ++stats.diverged;
    }
  }
  return stats;
}

AuxGenerator::AuxGenerator(std::size_t latent_dim, std::size_t hidden, std::size_t out_dim, Rng& rng,
                           std::string prefix)
    : latent_dim_(latent_dim), hidden_(hidden), out_dim_(out_dim), prefix_(std::move(prefix)) {
  if (latent_dim == 0 || hidden == 0 || out_dim == 0) throw InvalidArgument("generator sizes must be positive");
  params_.add_weight(prefix_ + ".l0.W", hidden, latent_dim, rng);
  params_.add_zeros(prefix_ + ".l0.b", {hidden});
  params_.add_weight(prefix_ + ".l1.W", out_dim, hidden, rng);
  params_.add_zeros(prefix_ + ".l1.b", {out_dim});
}

ad::Var AuxGenerator::forward(ad::Tape& tape, ad::Var z) const {
  ad::Var h = ad::tanh(ad::affine(z, tape.param(prefix_ + ".l0.W"), tape.param(prefix_ + ".l0.b")));
  return ad::affine(h, tape.param(prefix_ + ".l1.W"), tape.param(prefix_ + ".l1.b"));
}

RealArray AuxGenerator::sample_latent(std::size_t n, Rng& rng) const { return normal_matrix(n, latent_dim_, rng); }

RealArray AuxGenerator::generate(const RealArray& latent) const {
  if (latent.cols() != latent_dim_) throw ShapeError("generator: latent dimension mismatch");
  ad::Tape tape(params_);
  return tape.to_array(forward(tape, tape.constant(latent)));
}

RealArray AuxGenerator::sample(std::size_t n, Rng& rng) const { return generate(sample_latent(n, rng)); }

namespace {

ad::Var mixture_nll(ad::Tape& tape, ad::Var generated, const RealArray& samples, double sigma) {
  const std::size_t n = samples.rows(), m = tape.rows(generated);
  std::vector<double> xsq(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : samples.row_view(i)) s += v * v;
    std::fill_n(xsq.begin() + static_cast<std::ptrdiff_t>(i * m), m, s);
  }
  ad::Var cross = ad::scale(ad::matmul_t(tape.constant(samples), generated), -2.0);
  ad::Var dist = ad::add(ad::add_row(cross, ad::row_sum(ad::square(generated))), tape.constant(n, m, std::move(xsq)));
  ad::Var lse = ad::log_sum_exp_rows(ad::scale(dist, -1.0 / (2.0 * sigma * sigma)));
  return ad::add_scalar(ad::scale(ad::mean(lse), -1.0), std::log(static_cast<double>(m)));
}

}  // namespace

double AuxGenerator::objective(const RealArray& samples, const RealArray& latent, double sigma) const {
  if (samples.size() == 0) throw InvalidArgument("generator objective: empty sample set");
  if (samples.cols() != out_dim_) throw ShapeError("generator objective: sample dimension mismatch");
  ad::Tape tape(params_);
  return tape.item(mixture_nll(tape, forward(tape, tape.constant(latent)), samples, sigma));
}

double AuxGenerator::update(const RealArray& model_samples, double lr, Rng& rng, double sigma) {
  if (model_samples.size() == 0) throw InvalidArgument("generator update: empty sample batch");
  if (model_samples.cols() != out_dim_) throw ShapeError("generator update: sample dimension mismatch");
  const RealArray latent = sample_latent(model_samples.rows(), rng);
  params_.zero_grad();
  ad::Tape tape(params_);
  ad::Var loss = mixture_nll(tape, forward(tape, tape.constant(latent)), model_samples, sigma);
  tape.backward(loss);
  for (const auto& name : params_.names()) {
    RealArray& v = params_.value(name);
    const RealArray& g = params_.grad(name);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
  params_.zero_grad();
  return tape.item(loss);
}

double inclusive_generator_update(AuxGenerator& gen, const RealArray& model_samples, double lr, Rng& rng) {
  return gen.update(model_samples, lr, rng);
}

RealArray sample_batch(const ebm::ContinuousEnergyModel& model, const ParamStore& params, ChainState& chain,
                       const AuxGenerator* gen, Rng& rng) {
  chain.validate();
  RealArray& x = chain.particles;
  if (x.cols() != model.dim) throw ShapeError("sample_batch: particle dimension mismatch");
  if (gen != nullptr && gen->out_dim() != model.dim) throw ShapeError("sample_batch: generator dimension mismatch");
  if (chain.reinit_prob > 0.0) {
    std::bernoulli_distribution coin(chain.reinit_prob);
    std::vector<std::size_t> fresh;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (coin(rng)) fresh.push_back(i);
    }
    if (!fresh.empty()) {
      const RealArray init = gen != nullptr ? gen->sample(fresh.size(), rng) : normal_matrix(fresh.size(), x.cols(), rng);
      for (std::size_t k = 0; k < fresh.size(); ++k) {
        auto src = init.row_view(k);
        std::copy(src.begin(), src.end(), x.row_view(fresh[k]).begin());
      }
    }
  }
  for (std::size_t s = 0; s < chain.steps_per_update; ++s) {
    chain.divergences += sgld_step(model, params, x, chain.sgld, rng).diverged;
  }
  return x;
}

std::vector<ebm::Sequence> exact_discrete_sample(const ebm::DiscreteEnergyModel& model, const ParamStore& params,
                                                 Rng& rng, std::size_t n) {
  const auto points = model.space.enumerate();
  const auto probs = ebm::exact_probabilities(model, params);
  std::vector<double> cdf(probs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    cdf[i] = acc;
  }
  std::uniform_real_distribution<double> unif(0.0, acc);
  std::vector<ebm::Sequence> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u = unif(rng);
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const std::size_t idx = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), points.size() - 1);
    out.push_back(points[idx]);
  }
  return out;
}

}  // namespace ebmssl::sampling
