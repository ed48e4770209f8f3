#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape records nodes as operations are applied (define-by-run); node index
// order is a topological order, so the backward sweep is a single reverse
// pass and gradient accumulation order is fixed. Every value is viewed as a
// rows x cols matrix: scalars are 1 x 1 and rank-1 parameters are 1 x n rows.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ebmssl/param_store.hpp"
#include "ebmssl/real_array.hpp"

namespace ebmssl::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatMulT,
  kAffine,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kAddRow,
  kTanh,
  kRelu,
  kSigmoid,
  kLogSigmoid,
  kSquare,
  kSum,
  kRowSum,
  kLogSumExp,
  kLogSumExpRows,
  kSoftmaxXent,
  kEmbedding,
  kGruScan,
  kConcatCols,
  kConcatRows,
  kSliceRows,
  kSliceCols,
  kRowDot,
  kCustom,
};

struct Node;
using CustomBackward = std::function<void(Tape&, const Node&)>;

struct Node {
  Op op = Op::kLeaf;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<std::uint32_t> inputs;
  std::vector<int> ints;
  std::vector<double> aux;
  double arg = 0.0;
  std::size_t arg_index = 0;
  bool flag = false;
  bool requires_grad = false;
  std::string param;
  CustomBackward custom;
};

class Tape {
 public:
  Tape() = default;
  explicit Tape(const ParamStore& params) : params_(&params) {}
  explicit Tape(ParamStore& params) : params_(&params), mutable_params_(&params) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(const RealArray& v);
  Var constant(std::size_t rows, std::size_t cols, std::vector<double> values);
  Var scalar(double v);
  // Input whose gradient is tracked and readable after backward().
  Var variable(const RealArray& v);
  // Parameter leaf bound to the store; repeated lookups return the same node.
  Var param(const std::string& name);

  std::size_t rows(Var v) const { return node(v).rows; }
  std::size_t cols(Var v) const { return node(v).cols; }
  std::span<const double> value(Var v) const { return node(v).value; }
  double item(Var v) const;
  RealArray to_array(Var v) const;
  std::span<const double> grad(Var v) const { return node(v).grad; }
  RealArray grad_array(Var v) const;

  // Seeds d(out)/d(out) = 1 for a 1 x 1 output and sweeps backward. When the
  // tape was built over a mutable ParamStore the parameter gradients are
  // added to the store's gradient slots.
  void backward(Var out);

  // Gradients of every parameter leaf recorded on this tape (after backward).
  std::map<std::string, RealArray> param_gradients() const;

  std::size_t node_count() const { return nodes_.size(); }
  const Node& node(Var v) const { return nodes_[v.id]; }
  Node& node_mut(std::uint32_t id) { return nodes_[id]; }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }

  // Appends a node; validates finiteness of its value.
  Var push(Node n);

 private:
  void backward_node(const Node& n);
  std::vector<Node> nodes_;
  const ParamStore* params_ = nullptr;
  ParamStore* mutable_params_ = nullptr;
  std::unordered_map<std::string, std::uint32_t> param_ids_;
};

// --- operations ---------------------------------------------------------

Var matmul_t(Var a, Var b);             // a (n x k) * b^T, b is (m x k)
Var affine(Var x, Var w, Var b);        // x * w^T + b, b broadcast over rows
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);            // row (1 x c) broadcast over a's rows
Var tanh(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);                     // n x 1
Var log_sum_exp(Var a);                 // over all entries, 1 x 1
Var log_sum_exp_rows(Var a);            // n x 1
// Sum over rows of -log softmax(logits)[target]; targets index columns.
Var softmax_xent(Var logits, std::span<const int> targets);
Var embedding(Var table, std::span<const int> ids);
// Gated recurrent scan over the rows of x; see potentials.hpp for the cell.
Var gru_scan(Var x, Var wx, Var uh, Var b, bool reverse);
Var concat_cols(Var a, Var b);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var row_dot(Var a, Var b);              // n x 1

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace ebmssl::ad
