#pragma once

#include <functional>
#include <map>
#include <string>

#include "ebmssl/param_store.hpp"
#include "ebmssl/tape.hpp"

namespace ebmssl::ad {

using Inputs = std::map<std::string, RealArray>;

// A graph is a recipe that records its nodes onto a tape given bound inputs.
// Parameters are looked up by name through Tape::param.
using Graph = std::function<Var(Tape&, const Inputs&)>;

// Binds a named input as a constant node; throws UnboundNameError if absent.
Var bind(Tape& tape, const Inputs& inputs, const std::string& name);

// Forward value; params are not mutated.
RealArray evaluate(const Graph& graph, const ParamStore& params, const Inputs& inputs);

// Adds d(output)/d(theta) into params' gradient slots and returns the output.
// Output must be scalar.
double gradient(const Graph& graph, ParamStore& params, const Inputs& inputs);

// Max over every parameter scalar of
//   |analytic - central| / max(|analytic| + |central|, 1e-6)
// using central differences with the given step. The floor keeps gradients
// that are zero up to rounding from reading as large relative errors. The floor keeps gradients
// that are zero up to rounding from reading as large relative errors.
double finite_diff_check(const Graph& graph, ParamStore& params, const Inputs& inputs,
                         double step = 1e-5);

// Momentum gradient descent on the store's gradient slots with global-norm
// clipping. Velocities are kept per parameter name.
class MomentumOptimizer {
 public:
  MomentumOptimizer(double lr, double momentum = 0.9, double clip_norm = 5.0)
      : lr_(lr), momentum_(momentum), clip_norm_(clip_norm) {}

  // Updates the named parameters (all when names is empty); returns the
  // pre-clip gradient norm.
  double step(ParamStore& params, const std::vector<std::string>& names = {});

  const ParamStore& velocity() const { return velocity_; }
  ParamStore& velocity() { return velocity_; }
  double learning_rate() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  double clip_norm_;
  ParamStore velocity_;
};

}  // namespace ebmssl::ad
