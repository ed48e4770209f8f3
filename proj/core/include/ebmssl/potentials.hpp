#pragma once

// Neural potential functions.
//
// MlpPotential     u(x) = w^T h(x) + c, h the last hidden layer of a body MLP.
// ClassifierNet    K logits from the same kind of body; the joint potential
//                  is u(x, y) = logits(x)[y].
// SeqEncoder       shared embedding table e, a forward and a backward gated
//                  recurrent cell over the embedded tokens, and an optional
//                  linear tag head on [h_f,i ; h_b,i].
//
// Recurrent cell (one per direction), hidden size d equal to the embedding
// size, h_0 = 0, gates stacked [z; r; c] in Wx (3d x d), Uh (3d x d), b (3d):
//   z = sigmoid(Wz x + Uz h + bz)
//   r = sigmoid(Wr x + Ur h + br)
//   c = tanh(Wc x + Uc (r * h) + bc)
//   h' = (1 - z) * h + z * c
// h_f,i is the forward state after reading x_1..x_i; h_b,i the backward state
// after reading x_l..x_i. The sequence potential is
//   u(x) = sum_{i<l} h_f,i . e_{i+1} + sum_{i>1} h_b,i . e_{i-1}
// which is exactly zero for single-token sequences.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebmssl/param_store.hpp"
#include "ebmssl/tape.hpp"

namespace ebmssl::pot {

using Sequence = std::vector<int>;

enum class Activation { kTanh, kRelu };

struct MlpBody {
  std::string prefix = "body";
  std::vector<std::size_t> sizes;  // D, H1, ..., H
  Activation activation = Activation::kTanh;

  std::size_t input_dim() const { return sizes.front(); }
  std::size_t hidden_dim() const { return sizes.back(); }
  void init(ParamStore& params, Rng& rng) const;
  std::vector<std::string> param_names() const;
  // x: N x D -> h: N x H
  ad::Var forward(ad::Tape& tape, ad::Var x) const;
};

struct MlpPotential {
  MlpBody body;
  std::string head = "pot";

  void init(ParamStore& params, Rng& rng) const;
  std::vector<std::string> param_names() const;
  // N x D -> N x 1
  ad::Var potential(ad::Tape& tape, ad::Var x) const;
  ad::Var potential_from_hidden(ad::Tape& tape, ad::Var h) const;
};

struct ClassifierNet {
  MlpBody body;
  std::size_t classes = 2;
  std::string head = "head";

  void init(ParamStore& params, Rng& rng) const;
  // Initializes only the K x H output layer (fine-tuning on a given body).
  void init_head(ParamStore& params, Rng& rng) const;
  std::vector<std::string> param_names() const;
  std::vector<std::string> head_names() const;
  // N x D -> N x K
  ad::Var logits(ad::Tape& tape, ad::Var x) const;
  ad::Var logits_from_hidden(ad::Tape& tape, ad::Var h) const;
};

struct MlpForward {
  double potential = 0.0;
  RealArray hidden;  // H
};

// Single forward pass yielding both u(x) and the hidden layer h.
MlpForward mlp_forward(const MlpPotential& net, const ParamStore& params, std::span<const double> x);
double mlp_potential(const MlpPotential& net, const ParamStore& params, std::span<const double> x);
RealArray mlp_hidden(const MlpPotential& net, const ParamStore& params, std::span<const double> x);
// Batch version of the hidden layer: N x D -> N x H.
RealArray mlp_hidden_batch(const MlpBody& body, const ParamStore& params, const RealArray& x);
RealArray classifier_logits(const ClassifierNet& net, const ParamStore& params, std::span<const double> x);
// N x D -> N x K
RealArray classifier_logits_batch(const ClassifierNet& net, const ParamStore& params, const RealArray& x);

struct SeqEncoder {
  std::string prefix = "enc";
  std::string tag_prefix = "tag";
  std::size_t vocab = 16;
  std::size_t dim = 16;
  std::size_t classes = 3;
  bool tied_embeddings = true;
  bool start_vector = false;

  void init(ParamStore& params, Rng& rng) const;
  // Tag head: K x 2d projection, bias, K x K edge matrix (zero-initialized).
  void init_tag_head(ParamStore& params, Rng& rng) const;
  std::vector<std::string> encoder_names() const;
  std::vector<std::string> tag_names() const;
  std::string edge_name() const { return tag_prefix + ".A"; }
  std::string start_name() const { return tag_prefix + ".start"; }

  struct States {
    ad::Var embedded;  // l x d, input embeddings
    ad::Var output;    // l x d, output embeddings (== embedded when tied)
    ad::Var forward;   // l x d, h_f,i
    ad::Var backward;  // l x d, h_b,i
  };
  States encode(ad::Tape& tape, std::span<const int> x) const;
  // 1 x 1 pre-training potential.
  ad::Var pretrain_potential(ad::Tape& tape, std::span<const int> x) const;
  ad::Var pretrain_potential(ad::Tape& tape, const States& s) const;
  // l x 2d features [h_f,i ; h_b,i]
  ad::Var features(ad::Tape& tape, std::span<const int> x) const;
  // l x K node potentials of the tag head applied to given features.
  ad::Var tag_logits(ad::Tape& tape, ad::Var features) const;
  ad::Var edge(ad::Tape& tape) const { return tape.param(edge_name()); }
  ad::Var start(ad::Tape& tape) const;

  void check_tokens(std::span<const int> x) const;
};

struct SeqFeatures {
  RealArray forward;   // l x d
  RealArray backward;  // l x d
  RealArray concat;    // l x 2d
  RealArray logits;    // l x K (empty when the tag head is not initialized)
};

double seq_potential_pretrain(const SeqEncoder& enc, const ParamStore& params, std::span<const int> x);
SeqFeatures seq_features(const SeqEncoder& enc, const ParamStore& params, std::span<const int> x);

}  // namespace ebmssl::pot
