#pragma once

// Samplers for energy-based models.
//
// SGLD update, applied to every particle:
//   x' = clamp(x + (eps / 2) * grad_x u(x) + noise_scale * sqrt(eps) * eta)
// with eta standard normal per coordinate and clamp to [-bound, bound]^D.
// A particle whose gradient or position is non-finite, or whose norm exceeds
// kDivergenceNorm, is re-initialized and counted as a divergence incident.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebmssl/ebm.hpp"
#include "ebmssl/param_store.hpp"
#include "ebmssl/potentials.hpp"

namespace ebmssl::sampling {

inline constexpr double kDivergenceNorm = 1e6;

struct SgldConfig {
  double step_size = 0.01;
  double noise_scale = 1.0;
  double bound = 0.0;  // <= 0 disables clamping
};

struct ChainState {
  RealArray particles;  // N x D
  SgldConfig sgld;
  std::size_t steps_per_update = 20;
  double reinit_prob = 0.05;
  std::size_t divergences = 0;

  static ChainState standard_normal(std::size_t n, std::size_t dim, Rng& rng);
  void validate() const;
};

struct SgldStats {
  std::size_t diverged = 0;
};

// One SGLD step on every particle (rows of particles).
SgldStats sgld_step(const ebm::ContinuousEnergyModel& model, const ParamStore& params, RealArray& particles,
                    const SgldConfig& cfg, Rng& rng);

// Small MLP generator g: R^Z -> R^D with standard-normal latents. The output
// layer is linear.
class AuxGenerator {
 public:
  AuxGenerator(std::size_t latent_dim, std::size_t hidden, std::size_t out_dim, Rng& rng,
               std::string prefix = "gen");

  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t out_dim() const { return out_dim_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }

  RealArray sample_latent(std::size_t n, Rng& rng) const;
  RealArray generate(const RealArray& latent) const;
  RealArray sample(std::size_t n, Rng& rng) const;

  // Negative mean log-likelihood of the samples under the latent-batch
  // mixture (1/M) sum_m N(x; g(z_m), sigma^2 I), dropping the Gaussian
  // normalizer. As sigma shrinks each sample is explained by its nearest
  // generated point and the objective becomes a nearest-match squared error.
  double objective(const RealArray& samples, const RealArray& latent, double sigma = 1.0) const;

  // One descent step of the objective on a fresh latent batch the size of
  // the sample set. Returns the objective before the step.
  double update(const RealArray& model_samples, double lr, Rng& rng, double sigma = 1.0);

 private:
  ad::Var forward(ad::Tape& tape, ad::Var z) const;
  std::size_t latent_dim_;
  std::size_t hidden_;
  std::size_t out_dim_;
  std::string prefix_;
  ParamStore params_;
};

double inclusive_generator_update(AuxGenerator& gen, const RealArray& model_samples, double lr, Rng& rng);

// Re-initializes each particle with probability reinit_prob (from the
// generator, or standard normal without one), then runs steps_per_update SGLD
// steps. Persists and returns the particles.
RealArray sample_batch(const ebm::ContinuousEnergyModel& model, const ParamStore& params, ChainState& chain,
                       const AuxGenerator* gen, Rng& rng);

// i.i.d. draws from exp(u - log Z) by inverse CDF over the enumeration.
std::vector<ebm::Sequence> exact_discrete_sample(const ebm::DiscreteEnergyModel& model, const ParamStore& params,
                                                 Rng& rng, std::size_t n);

}  // namespace ebmssl::sampling
