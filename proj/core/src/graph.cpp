#include "ebmssl/graph.hpp"

#include <algorithm>
#include <cmath>

#include "ebmssl/error.hpp"

namespace ebmssl::ad {

Var bind(Tape& tape, const Inputs& inputs, const std::string& name) {
  auto it = inputs.find(name);
  if (it == inputs.end()) throw UnboundNameError("graph input '" + name + "' is not bound");
  if (!it->second.all_finite()) throw NonFiniteError("graph input '" + name + "' is not finite");
  return tape.constant(it->second);
}

RealArray evaluate(const Graph& graph, const ParamStore& params, const Inputs& inputs) {
  Tape tape(params);
  Var out = graph(tape, inputs);
  return tape.to_array(out);
}

double gradient(const Graph& graph, ParamStore& params, const Inputs& inputs) {
  Tape tape(params);
  Var out = graph(tape, inputs);
  if (tape.rows(out) * tape.cols(out) != 1) throw ShapeError("gradient: graph output is not scalar");
  tape.backward(out);
  return tape.item(out);
}

double finite_diff_check(const Graph& graph, ParamStore& params, const Inputs& inputs,
                         double step) {
  if (!(step > 0.0 && step <= 1e-2)) throw InvalidArgument("finite_diff_check: step must be in (0, 1e-2]");
  const auto saved = params.gradients();
  params.zero_grad();
  gradient(graph, params, inputs);
  const auto analytic = params.gradients();
  double worst = 0.0;
  for (const auto& name : params.names()) {
    RealArray& v = params.value(name);
    const RealArray& a = analytic.at(name);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + step;
      const double up = evaluate(graph, params, inputs).item();
      v[i] = orig - step;
      const double down = evaluate(graph, params, inputs).item();
      v[i] = orig;
      const double central = (up - down) / (2.0 * step);
      const double err = std::abs(a[i] - central) / std::max(std::abs(a[i]) + std::abs(central), 1e-6);
      worst = std::max(worst, err);
    }
  }
  params.zero_grad();
  params.accumulate_grad(saved, 1.0);
  return worst;
}

double MomentumOptimizer::step(ParamStore& params, const std::vector<std::string>& names) {
  const std::vector<std::string> targets = names.empty() ? params.names() : names;
  double sq = 0.0;
  for (const auto& n : targets) {
    for (double g : params.grad(n).values()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NonFiniteError("optimizer: non-finite gradient norm");
  const double factor = (clip_norm_ > 0.0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;
  for (const auto& n : targets) {
    if (!velocity_.contains(n)) velocity_.add_zeros(n, params.value(n).shape());
    RealArray& vel = velocity_.value(n);
    RealArray& val = params.value(n);
    const RealArray& g = params.grad(n);
    for (std::size_t i = 0; i < val.size(); ++i) {
      vel[i] = momentum_ * vel[i] + factor * g[i];
      val[i] -= lr_ * vel[i];
    }
  }
  return norm;
}

}  // namespace ebmssl::ad
