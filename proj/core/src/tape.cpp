#include "ebmssl/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ebmssl/error.hpp"

namespace ebmssl::ad {

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw InvalidArgument("operation on unbound Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw InvalidArgument("operands recorded on different tapes");
  return tape_of(a);
}

void require_same_shape(const Node& a, const Node& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows) + "x" +
                     std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                     std::to_string(b.cols));
  }
}

Node make_node(Op op, std::size_t rows, std::size_t cols, std::initializer_list<Var> in,
               const Tape& t) {
  Node n;
  n.op = op;
  n.rows = rows;
  n.cols = cols;
  n.value.assign(rows * cols, 0.0);
  for (Var v : in) {
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || t.node(v).requires_grad;
  }
  return n;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow for large |x|.
double log_sigmoid_scalar(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

std::pair<std::size_t, std::size_t> matrix_dims(const RealArray& v) {
  return {v.rows(), v.cols()};
}

}  // namespace

Var Tape::push(Node n) {
  for (double v : n.value) {
    if (!std::isfinite(v)) {
      throw NonFiniteError("non-finite value produced by graph node " +
                           std::to_string(nodes_.size()));
    }
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(const RealArray& v) {
  auto [r, c] = matrix_dims(v);
  return constant(r, c, std::vector<double>(v.values().begin(), v.values().end()));
}

Var Tape::constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
  if (values.size() != rows * cols) throw ShapeError("constant: data/shape mismatch");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(values);
  return push(std::move(n));
}

Var Tape::scalar(double v) { return constant(1, 1, {v}); }

Var Tape::variable(const RealArray& v) {
  Var out = constant(v);
  nodes_[out.id].requires_grad = true;
  return out;
}

Var Tape::param(const std::string& name) {
  if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var{this, it->second};
  if (params_ == nullptr) throw UnboundNameError("tape has no parameter store for '" + name + "'");
  const RealArray& v = params_->value(name);
  auto [r, c] = matrix_dims(v);
  Node n;
  n.rows = r;
  n.cols = c;
  n.value.assign(v.values().begin(), v.values().end());
  n.requires_grad = true;
  n.param = name;
  Var out = push(std::move(n));
  param_ids_.emplace(name, out.id);
  return out;
}

double Tape::item(Var v) const {
  const Node& n = node(v);
  if (n.value.size() != 1) throw ShapeError("item() on non-scalar node");
  return n.value[0];
}

RealArray Tape::to_array(Var v) const {
  const Node& n = node(v);
  return RealArray({n.rows, n.cols}, n.value);
}

RealArray Tape::grad_array(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) return RealArray({n.rows, n.cols}, 0.0);
  return RealArray({n.rows, n.cols}, n.grad);
}

std::map<std::string, RealArray> Tape::param_gradients() const {
  std::map<std::string, RealArray> out;
  for (const auto& [name, id] : param_ids_) {
    const Node& n = nodes_[id];
    out.emplace(name, n.grad.empty() ? RealArray(params_->value(name).shape(), 0.0)
                                     : RealArray(params_->value(name).shape(), n.grad));
  }
  return out;
}

void Tape::backward(Var out) {
  if (out.tape != this) throw InvalidArgument("backward: Var from another tape");
  Node& o = nodes_[out.id];
  if (o.rows * o.cols != 1) throw ShapeError("backward: output must be scalar");
  for (auto& n : nodes_) {
    if (n.requires_grad) n.grad.assign(n.value.size(), 0.0);
  }
  if (!o.requires_grad) return;
  o.grad[0] = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.requires_grad || n.op == Op::kLeaf) continue;
    backward_node(n);
  }
  for (const auto& n : nodes_) {
    if (!n.grad.empty()) {
      for (double g : n.grad) {
        if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in backward pass");
      }
    }
  }
  if (mutable_params_ != nullptr) {
    for (const auto& [name, id] : param_ids_) {
      auto& dst = mutable_params_->grad(name);
      const auto& g = nodes_[id].grad;
      for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
    }
  }
}

void Tape::backward_node(const Node& n) {
  const std::vector<double>& g = n.grad;
  auto input = [&](std::size_t k) -> Node& { return nodes_[n.inputs[k]]; };
  auto wants = [&](std::size_t k) { return input(k).requires_grad; };

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kMatMulT: {
      Node& a = input(0);
      Node& b = input(1);
      const std::size_t rows = a.rows, inner = a.cols, out = b.rows;
      if (wants(0)) {
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < out; ++j) {
            const double gij = g[i * out + j];
            if (gij == 0.0) continue;
            for (std::size_t k = 0; k < inner; ++k) a.grad[i * inner + k] += gij * b.value[j * inner + k];
          }
      }
      if (wants(1)) {
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < out; ++j) {
            const double gij = g[i * out + j];
            if (gij == 0.0) continue;
            for (std::size_t k = 0; k < inner; ++k) b.grad[j * inner + k] += gij * a.value[i * inner + k];
          }
      }
      break;
    }
    case Op::kAffine: {
      Node& x = input(0);
      Node& w = input(1);
      Node& b = input(2);
      const std::size_t rows = x.rows, inner = x.cols, out = w.rows;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < out; ++j) {
          const double gij = g[i * out + j];
          if (b.requires_grad) b.grad[j] += gij;
          if (gij == 0.0) continue;
          if (x.requires_grad)
            for (std::size_t k = 0; k < inner; ++k) x.grad[i * inner + k] += gij * w.value[j * inner + k];
          if (w.requires_grad)
            for (std::size_t k = 0; k < inner; ++k) w.grad[j * inner + k] += gij * x.value[i * inner + k];
        }
      }
      break;
    }
    case Op::kAdd:
      if (wants(0)) for (std::size_t k = 0; k < g.size(); ++k) input(0).grad[k] += g[k];
      if (wants(1)) for (std::size_t k = 0; k < g.size(); ++k) input(1).grad[k] += g[k];
      break;
    case Op::kSub:
      if (wants(0)) for (std::size_t k = 0; k < g.size(); ++k) input(0).grad[k] += g[k];
      if (wants(1)) for (std::size_t k = 0; k < g.size(); ++k) input(1).grad[k] -= g[k];
      break;
    case Op::kMul: {
      Node& a = input(0);
      Node& b = input(1);
      if (a.requires_grad) for (std::size_t k = 0; k < g.size(); ++k) a.grad[k] += g[k] * b.value[k];
      if (b.requires_grad) for (std::size_t k = 0; k < g.size(); ++k) b.grad[k] += g[k] * a.value[k];
      break;
    }
    case Op::kScale:
      for (std::size_t k = 0; k < g.size(); ++k) input(0).grad[k] += n.arg * g[k];
      break;
    case Op::kAddScalar:
      for (std::size_t k = 0; k < g.size(); ++k) input(0).grad[k] += g[k];
      break;
    case Op::kAddRow: {
      Node& a = input(0);
      Node& r = input(1);
      for (std::size_t i = 0; i < n.rows; ++i)
        for (std::size_t j = 0; j < n.cols; ++j) {
          const double gij = g[i * n.cols + j];
          if (a.requires_grad) a.grad[i * n.cols + j] += gij;
          if (r.requires_grad) r.grad[j] += gij;
        }
      break;
    }
    case Op::kTanh:
      for (std::size_t k = 0; k < g.size(); ++k) input(0).grad[k] += g[k] * (1.0 - n.value[k] * n.value[k]);
      break;
    case Op::kRelu:
      for (std::size_t k = 0; k < g.size(); ++k)
        if (input(0).value[k] > 0.0) input(0).grad[k] += g[k];
      break;
    case Op::kSigmoid:
      for (std::size_t k = 0; k < g.size(); ++k) input(0).grad[k] += g[k] * n.value[k] * (1.0 - n.value[k]);
      break;
    case Op::kLogSigmoid:
      // d/dx log sigmoid(x) = 1 - sigmoid(x) = sigmoid(-x)
      for (std::size_t k = 0; k < g.size(); ++k)
        input(0).grad[k] += g[k] * sigmoid_scalar(-input(0).value[k]);
      break;
    case Op::kSquare:
      for (std::size_t k = 0; k < g.size(); ++k) input(0).grad[k] += 2.0 * g[k] * input(0).value[k];
      break;
    case Op::kSum: {
      Node& a = input(0);
      const double s = g[0] * n.arg;
      for (auto& v : a.grad) v += s;
      break;
    }
    case Op::kRowSum: {
      Node& a = input(0);
      for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) a.grad[i * a.cols + j] += g[i];
      break;
    }
    case Op::kLogSumExp: {
      Node& a = input(0);
      const double lse = n.value[0];
      for (std::size_t k = 0; k < a.value.size(); ++k) a.grad[k] += g[0] * std::exp(a.value[k] - lse);
      break;
    }
    case Op::kLogSumExpRows: {
      Node& a = input(0);
      for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j)
          a.grad[i * a.cols + j] += g[i] * std::exp(a.value[i * a.cols + j] - n.value[i]);
      break;
    }
    case Op::kSoftmaxXent: {
      // aux holds the row softmax probabilities.
      Node& a = input(0);
      for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) {
          const double p = n.aux[i * a.cols + j];
          a.grad[i * a.cols + j] += g[0] * (p - (static_cast<int>(j) == n.ints[i] ? 1.0 : 0.0));
        }
      break;
    }
    case Op::kEmbedding: {
      Node& table = input(0);
      for (std::size_t i = 0; i < n.ints.size(); ++i) {
        const std::size_t row = static_cast<std::size_t>(n.ints[i]);
        for (std::size_t j = 0; j < n.cols; ++j) table.grad[row * n.cols + j] += g[i * n.cols + j];
      }
      break;
    }
    case Op::kGruScan: {
      Node& x = input(0);
      Node& wx = input(1);
      Node& uh = input(2);
      Node& b = input(3);
      const std::size_t len = n.rows, d = n.cols, din = x.cols;
      // aux layout per processed step s: z[d] r[d] c[d] hprev[d]
      std::vector<double> carry(d, 0.0), dh(d), da(3 * d), drh(d);
      for (std::size_t s = len; s-- > 0;) {
        const std::size_t t = n.flag ? len - 1 - s : s;
        const double* z = &n.aux[s * 4 * d];
        const double* r = z + d;
        const double* c = r + d;
        const double* hp = c + d;
        for (std::size_t k = 0; k < d; ++k) dh[k] = g[t * d + k] + carry[k];
        std::fill(carry.begin(), carry.end(), 0.0);
        for (std::size_t k = 0; k < d; ++k) {
          const double dz = dh[k] * (c[k] - hp[k]);
          const double dc = dh[k] * z[k];
          carry[k] += dh[k] * (1.0 - z[k]);
          da[k] = dz * z[k] * (1.0 - z[k]);
          da[2 * d + k] = dc * (1.0 - c[k] * c[k]);
        }
        // candidate path: Uc (r * hprev)
        std::fill(drh.begin(), drh.end(), 0.0);
        for (std::size_t j = 0; j < d; ++j) {
          const double dac = da[2 * d + j];
          const double* row = &uh.value[(2 * d + j) * d];
          for (std::size_t k = 0; k < d; ++k) drh[k] += dac * row[k];
          if (uh.requires_grad) {
            double* grow = &uh.grad[(2 * d + j) * d];
            for (std::size_t k = 0; k < d; ++k) grow[k] += dac * r[k] * hp[k];
          }
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double dr = drh[k] * hp[k];
          carry[k] += drh[k] * r[k];
          da[d + k] = dr * r[k] * (1.0 - r[k]);
        }
        // gate paths: Uz hprev, Ur hprev
        for (std::size_t j = 0; j < 2 * d; ++j) {
          const double daj = da[j];
          const double* row = &uh.value[j * d];
          for (std::size_t k = 0; k < d; ++k) carry[k] += daj * row[k];
          if (uh.requires_grad) {
            double* grow = &uh.grad[j * d];
            for (std::size_t k = 0; k < d; ++k) grow[k] += daj * hp[k];
          }
        }
        const double* xt = &x.value[t * din];
        for (std::size_t j = 0; j < 3 * d; ++j) {
          const double daj = da[j];
          if (b.requires_grad) b.grad[j] += daj;
          if (wx.requires_grad) {
            double* grow = &wx.grad[j * din];
            for (std::size_t k = 0; k < din; ++k) grow[k] += daj * xt[k];
          }
          if (x.requires_grad) {
            const double* row = &wx.value[j * din];
            double* gx = &x.grad[t * din];
            for (std::size_t k = 0; k < din; ++k) gx[k] += daj * row[k];
          }
        }
      }
      break;
    }
    case Op::kConcatCols: {
      Node& a = input(0);
      Node& b = input(1);
      for (std::size_t i = 0; i < n.rows; ++i) {
        if (a.requires_grad)
          for (std::size_t j = 0; j < a.cols; ++j) a.grad[i * a.cols + j] += g[i * n.cols + j];
        if (b.requires_grad)
          for (std::size_t j = 0; j < b.cols; ++j) b.grad[i * b.cols + j] += g[i * n.cols + a.cols + j];
      }
      break;
    }
    case Op::kConcatRows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& part = input(k);
        if (part.requires_grad)
          for (std::size_t q = 0; q < part.value.size(); ++q) part.grad[q] += g[offset + q];
        offset += part.value.size();
      }
      break;
    }
    case Op::kSliceRows: {
      Node& a = input(0);
      const std::size_t off = n.arg_index * n.cols;
      for (std::size_t q = 0; q < g.size(); ++q) a.grad[off + q] += g[q];
      break;
    }
    case Op::kSliceCols: {
      Node& a = input(0);
      for (std::size_t i = 0; i < n.rows; ++i)
        for (std::size_t j = 0; j < n.cols; ++j)
          a.grad[i * a.cols + n.arg_index + j] += g[i * n.cols + j];
      break;
    }
    case Op::kRowDot: {
      Node& a = input(0);
      Node& b = input(1);
      for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) {
          const std::size_t q = i * a.cols + j;
          if (a.requires_grad) a.grad[q] += g[i] * b.value[q];
          if (b.requires_grad) b.grad[q] += g[i] * a.value[q];
        }
      break;
    }
    case Op::kCustom:
      n.custom(*this, n);
      break;
  }
}

Var matmul_t(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Node& na = t.node(a);
  const Node& nb = t.node(b);
  if (na.cols != nb.cols) throw ShapeError("matmul_t: inner dimension mismatch");
  Node n = make_node(Op::kMatMulT, na.rows, nb.rows, {a, b}, t);
  for (std::size_t i = 0; i < na.rows; ++i)
    for (std::size_t j = 0; j < nb.rows; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < na.cols; ++k) s += na.value[i * na.cols + k] * nb.value[j * na.cols + k];
      n.value[i * nb.rows + j] = s;
    }
  return t.push(std::move(n));
}

Var affine(Var x, Var w, Var b) {
  Tape& t = tape_of(x, w);
  tape_of(x, b);
  const Node& nx = t.node(x);
  const Node& nw = t.node(w);
  const Node& nb = t.node(b);
  if (nx.cols != nw.cols) {
    throw ShapeError("affine: input has " + std::to_string(nx.cols) + " columns, weight expects " +
                     std::to_string(nw.cols));
  }
  if (nb.rows * nb.cols != nw.rows) throw ShapeError("affine: bias length mismatch");
  Node n = make_node(Op::kAffine, nx.rows, nw.rows, {x, w, b}, t);
  const std::size_t inner = nx.cols, out = nw.rows;
  for (std::size_t i = 0; i < nx.rows; ++i)
    for (std::size_t j = 0; j < out; ++j) {
      double s = nb.value[j];
      for (std::size_t k = 0; k < inner; ++k) s += nx.value[i * inner + k] * nw.value[j * inner + k];
      n.value[i * out + j] = s;
    }
  return t.push(std::move(n));
}

namespace {

template <class F>
Var binary(Op op, Var a, Var b, const char* name, F f) {
  Tape& t = tape_of(a, b);
  const Node& na = t.node(a);
  const Node& nb = t.node(b);
  require_same_shape(na, nb, name);
  Node n = make_node(op, na.rows, na.cols, {a, b}, t);
  for (std::size_t k = 0; k < n.value.size(); ++k) n.value[k] = f(na.value[k], nb.value[k]);
  return t.push(std::move(n));
}

template <class F>
Var unary(Op op, Var a, F f) {
  Tape& t = tape_of(a);
  const Node& na = t.node(a);
  Node n = make_node(op, na.rows, na.cols, {a}, t);
  for (std::size_t k = 0; k < n.value.size(); ++k) n.value[k] = f(na.value[k]);
  return t.push(std::move(n));
}

}  // namespace

Var add(Var a, Var b) { return binary(Op::kAdd, a, b, "add", [](double x, double y) { return x + y; }); }
Var sub(Var a, Var b) { return binary(Op::kSub, a, b, "sub", [](double x, double y) { return x - y; }); }
Var mul(Var a, Var b) { return binary(Op::kMul, a, b, "mul", [](double x, double y) { return x * y; }); }

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  const Node& na = t.node(a);
  Node n = make_node(Op::kScale, na.rows, na.cols, {a}, t);
  n.arg = s;
  for (std::size_t k = 0; k < n.value.size(); ++k) n.value[k] = s * na.value[k];
  return t.push(std::move(n));
}

Var add_scalar(Var a, double s) {
  return unary(Op::kAddScalar, a, [s](double x) { return x + s; });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  const Node& na = t.node(a);
  const Node& nr = t.node(row);
  if (nr.rows * nr.cols != na.cols) throw ShapeError("add_row: row length mismatch");
  Node n = make_node(Op::kAddRow, na.rows, na.cols, {a, row}, t);
  for (std::size_t i = 0; i < na.rows; ++i)
    for (std::size_t j = 0; j < na.cols; ++j) n.value[i * na.cols + j] = na.value[i * na.cols + j] + nr.value[j];
  return t.push(std::move(n));
}

Var tanh(Var a) { return unary(Op::kTanh, a, [](double x) { return std::tanh(x); }); }
Var relu(Var a) { return unary(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; }); }
Var sigmoid(Var a) { return unary(Op::kSigmoid, a, sigmoid_scalar); }
Var log_sigmoid(Var a) { return unary(Op::kLogSigmoid, a, log_sigmoid_scalar); }
Var square(Var a) { return unary(Op::kSquare, a, [](double x) { return x * x; }); }

Var sum(Var a) {
  Tape& t = tape_of(a);
  const Node& na = t.node(a);
  Node n = make_node(Op::kSum, 1, 1, {a}, t);
  n.arg = 1.0;
  double s = 0.0;
  for (double v : na.value) s += v;
  n.value[0] = s;
  return t.push(std::move(n));
}

Var mean(Var a) {
  Tape& t = tape_of(a);
  const Node& na = t.node(a);
  Node n = make_node(Op::kSum, 1, 1, {a}, t);
  n.arg = 1.0 / static_cast<double>(na.value.size());
  double s = 0.0;
  for (double v : na.value) s += v;
  n.value[0] = s * n.arg;
  return t.push(std::move(n));
}

Var row_sum(Var a) {
  Tape& t = tape_of(a);
  const Node& na = t.node(a);
  Node n = make_node(Op::kRowSum, na.rows, 1, {a}, t);
  for (std::size_t i = 0; i < na.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < na.cols; ++j) s += na.value[i * na.cols + j];
    n.value[i] = s;
  }
  return t.push(std::move(n));
}

Var log_sum_exp(Var a) {
  Tape& t = tape_of(a);
  const Node& na = t.node(a);
  Node n = make_node(Op::kLogSumExp, 1, 1, {a}, t);
  n.value[0] = ebmssl::log_sum_exp(na.value);
  return t.push(std::move(n));
}

Var log_sum_exp_rows(Var a) {
  Tape& t = tape_of(a);
  const Node& na = t.node(a);
  Node n = make_node(Op::kLogSumExpRows, na.rows, 1, {a}, t);
  for (std::size_t i = 0; i < na.rows; ++i) {
    n.value[i] = ebmssl::log_sum_exp(std::span<const double>(na.value).subspan(i * na.cols, na.cols));
  }
  return t.push(std::move(n));
}

Var softmax_xent(Var logits, std::span<const int> targets) {
  Tape& t = tape_of(logits);
  const Node& na = t.node(logits);
  if (targets.size() != na.rows) throw ShapeError("softmax_xent: one target per row required");
  Node n = make_node(Op::kSoftmaxXent, 1, 1, {logits}, t);
  n.ints.assign(targets.begin(), targets.end());
  n.aux.resize(na.value.size());
  double total = 0.0;
  for (std::size_t i = 0; i < na.rows; ++i) {
    const int y = targets[i];
    if (y < 0 || static_cast<std::size_t>(y) >= na.cols) throw InvalidArgument("softmax_xent: target out of range");
    auto row = std::span<const double>(na.value).subspan(i * na.cols, na.cols);
    const double lse = ebmssl::log_sum_exp(row);
    for (std::size_t j = 0; j < na.cols; ++j) n.aux[i * na.cols + j] = std::exp(row[j] - lse);
    total += lse - row[static_cast<std::size_t>(y)];
  }
  n.value[0] = total;
  return t.push(std::move(n));
}

Var embedding(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const Node& nt = t.node(table);
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Node n = make_node(Op::kEmbedding, ids.size(), nt.cols, {table}, t);
  n.ints.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= nt.rows) {
      throw InvalidArgument("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(nt.rows) + " rows");
    }
    std::copy_n(&nt.value[static_cast<std::size_t>(ids[i]) * nt.cols], nt.cols, &n.value[i * nt.cols]);
  }
  return t.push(std::move(n));
}

Var gru_scan(Var x, Var wx, Var uh, Var b, bool reverse) {
  Tape& t = tape_of(x, wx);
  tape_of(x, uh);
  tape_of(x, b);
  const Node& nx = t.node(x);
  const Node& nw = t.node(wx);
  const Node& nu = t.node(uh);
  const Node& nb = t.node(b);
  const std::size_t d = nu.cols;
  if (nu.rows != 3 * d) throw ShapeError("gru_scan: recurrent weight must be 3d x d");
  if (nw.rows != 3 * d || nw.cols != nx.cols) throw ShapeError("gru_scan: input weight must be 3d x input_dim");
  if (nb.rows * nb.cols != 3 * d) throw ShapeError("gru_scan: bias must have 3d entries");
  const std::size_t len = nx.rows, din = nx.cols;
  Node n = make_node(Op::kGruScan, len, d, {x, wx, uh, b}, t);
  n.flag = reverse;
  n.aux.resize(len * 4 * d);
  std::vector<double> h(d, 0.0), a(3 * d), rh(d);
  for (std::size_t s = 0; s < len; ++s) {
    const std::size_t pos = reverse ? len - 1 - s : s;
    const double* xt = &nx.value[pos * din];
    for (std::size_t j = 0; j < 3 * d; ++j) {
      double acc = nb.value[j];
      const double* row = &nw.value[j * din];
      for (std::size_t k = 0; k < din; ++k) acc += row[k] * xt[k];
      a[j] = acc;
    }
    double* z = &n.aux[s * 4 * d];
    double* r = z + d;
    double* c = r + d;
    double* hp = c + d;
    std::copy(h.begin(), h.end(), hp);
    for (std::size_t j = 0; j < 2 * d; ++j) {
      const double* row = &nu.value[j * d];
      double acc = a[j];
      for (std::size_t k = 0; k < d; ++k) acc += row[k] * h[k];
      if (j < d) z[j] = sigmoid_scalar(acc);
      else r[j - d] = sigmoid_scalar(acc);
    }
    for (std::size_t k = 0; k < d; ++k) rh[k] = r[k] * h[k];
    for (std::size_t j = 0; j < d; ++j) {
      const double* row = &nu.value[(2 * d + j) * d];
      double acc = a[2 * d + j];
      for (std::size_t k = 0; k < d; ++k) acc += row[k] * rh[k];
      c[j] = std::tanh(acc);
    }
    for (std::size_t k = 0; k < d; ++k) {
      h[k] = (1.0 - z[k]) * hp[k] + z[k] * c[k];
      n.value[pos * d + k] = h[k];
    }
  }
  return t.push(std::move(n));
}

Var concat_cols(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Node& na = t.node(a);
  const Node& nb = t.node(b);
  if (na.rows != nb.rows) throw ShapeError("concat_cols: row count mismatch");
  Node n = make_node(Op::kConcatCols, na.rows, na.cols + nb.cols, {a, b}, t);
  for (std::size_t i = 0; i < na.rows; ++i) {
    std::copy_n(&na.value[i * na.cols], na.cols, &n.value[i * n.cols]);
    std::copy_n(&nb.value[i * nb.cols], nb.cols, &n.value[i * n.cols + na.cols]);
  }
  return t.push(std::move(n));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t cols = t.node(parts[0]).cols;
  std::size_t rows = 0;
  for (Var p : parts) {
    tape_of(parts[0], p);
    if (t.node(p).cols != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += t.node(p).rows;
  }
  Node n = make_node(Op::kConcatRows, rows, cols, {}, t);
  std::size_t off = 0;
  for (Var p : parts) {
    const Node& np = t.node(p);
    n.inputs.push_back(p.id);
    n.requires_grad = n.requires_grad || np.requires_grad;
    std::copy(np.value.begin(), np.value.end(), n.value.begin() + static_cast<std::ptrdiff_t>(off));
    off += np.value.size();
  }
  return t.push(std::move(n));
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(a);
  const Node& na = t.node(a);
  if (begin >= end || end > na.rows) throw ShapeError("slice_rows: invalid range");
  Node n = make_node(Op::kSliceRows, end - begin, na.cols, {a}, t);
  n.arg_index = begin;
  std::copy_n(&na.value[begin * na.cols], (end - begin) * na.cols, n.value.begin());
  return t.push(std::move(n));
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(a);
  const Node& na = t.node(a);
  if (begin >= end || end > na.cols) throw ShapeError("slice_cols: invalid range");
  Node n = make_node(Op::kSliceCols, na.rows, end - begin, {a}, t);
  n.arg_index = begin;
  for (std::size_t i = 0; i < na.rows; ++i)
    std::copy_n(&na.value[i * na.cols + begin], end - begin, &n.value[i * n.cols]);
  return t.push(std::move(n));
}

Var row_dot(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Node& na = t.node(a);
  const Node& nb = t.node(b);
  require_same_shape(na, nb, "row_dot");
  Node n = make_node(Op::kRowDot, na.rows, 1, {a, b}, t);
  for (std::size_t i = 0; i < na.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < na.cols; ++j) s += na.value[i * na.cols + j] * nb.value[i * na.cols + j];
    n.value[i] = s;
  }
  return t.push(std::move(n));
}

}  // namespace ebmssl::ad
