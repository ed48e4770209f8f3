#include "ebmssl/potentials.hpp"

#include "ebmssl/error.hpp"

namespace ebmssl::pot {

namespace {

std::string layer_name(const std::string& prefix, std::size_t i, const char* what) {
  return prefix + ".l" + std::to_string(i) + "." + what;
}

ad::Var activate(Activation a, ad::Var v) {
  return a == Activation::kTanh ? ad::tanh(v) : ad::relu(v);
}

RealArray as_row(std::span<const double> x) {
  return RealArray({1, x.size()}, std::vector<double>(x.begin(), x.end()));
}

}  // namespace

void MlpBody::init(ParamStore& params, Rng& rng) const {
  if (sizes.size() < 2) throw InvalidArgument("MlpBody needs at least input and one hidden size");
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    params.add_weight(layer_name(prefix, i, "W"), sizes[i + 1], sizes[i], rng);
    params.add_zeros(layer_name(prefix, i, "b"), {sizes[i + 1]});
  }
}

std::vector<std::string> MlpBody::param_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    out.push_back(layer_name(prefix, i, "W"));
    out.push_back(layer_name(prefix, i, "b"));
  }
  return out;
}

ad::Var MlpBody::forward(ad::Tape& tape, ad::Var x) const {
  if (tape.cols(x) != input_dim()) {
    throw ShapeError("MLP input has dimension " + std::to_string(tape.cols(x)) + ", expected " +
                     std::to_string(input_dim()));
  }
  ad::Var h = x;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    h = activate(activation, ad::affine(h, tape.param(layer_name(prefix, i, "W")),
                                        tape.param(layer_name(prefix, i, "b"))));
  }
  return h;
}

void MlpPotential::init(ParamStore& params, Rng& rng) const {
  body.init(params, rng);
  params.add_weight(head + ".w", 1, body.hidden_dim(), rng);
  params.add_zeros(head + ".b", {1});
}

std::vector<std::string> MlpPotential::param_names() const {
  auto out = body.param_names();
  out.push_back(head + ".w");
  out.push_back(head + ".b");
  return out;
}

ad::Var MlpPotential::potential(ad::Tape& tape, ad::Var x) const {
  return potential_from_hidden(tape, body.forward(tape, x));
}

ad::Var MlpPotential::potential_from_hidden(ad::Tape& tape, ad::Var h) const {
  return ad::affine(h, tape.param(head + ".w"), tape.param(head + ".b"));
}

void ClassifierNet::init(ParamStore& params, Rng& rng) const {
  body.init(params, rng);
  init_head(params, rng);
}

void ClassifierNet::init_head(ParamStore& params, Rng& rng) const {
  params.add_weight(head + ".W", classes, body.hidden_dim(), rng);
  params.add_zeros(head + ".b", {classes});
}

std::vector<std::string> ClassifierNet::param_names() const {
  auto out = body.param_names();
  for (auto& n : head_names()) out.push_back(n);
  return out;
}

std::vector<std::string> ClassifierNet::head_names() const { return {head + ".W", head + ".b"}; }

ad::Var ClassifierNet::logits(ad::Tape& tape, ad::Var x) const {
  return logits_from_hidden(tape, body.forward(tape, x));
}

ad::Var ClassifierNet::logits_from_hidden(ad::Tape& tape, ad::Var h) const {
  return ad::affine(h, tape.param(head + ".W"), tape.param(head + ".b"));
}

MlpForward mlp_forward(const MlpPotential& net, const ParamStore& params, std::span<const double> x) {
  ad::Tape tape(params);
  ad::Var h = net.body.forward(tape, tape.constant(as_row(x)));
  ad::Var u = net.potential_from_hidden(tape, h);
  MlpForward out;
  out.potential = tape.item(u);
  out.hidden = RealArray::row(std::vector<double>(tape.value(h).begin(), tape.value(h).end()));
  return out;
}

double mlp_potential(const MlpPotential& net, const ParamStore& params, std::span<const double> x) {
  return mlp_forward(net, params, x).potential;
}

RealArray mlp_hidden(const MlpPotential& net, const ParamStore& params, std::span<const double> x) {
  return mlp_forward(net, params, x).hidden;
}

RealArray mlp_hidden_batch(const MlpBody& body, const ParamStore& params, const RealArray& x) {
  ad::Tape tape(params);
  return tape.to_array(body.forward(tape, tape.constant(x)));
}

RealArray classifier_logits(const ClassifierNet& net, const ParamStore& params, std::span<const double> x) {
  ad::Tape tape(params);
  ad::Var l = net.logits(tape, tape.constant(as_row(x)));
  return RealArray::row(std::vector<double>(tape.value(l).begin(), tape.value(l).end()));
}

RealArray classifier_logits_batch(const ClassifierNet& net, const ParamStore& params, const RealArray& x) {
  ad::Tape tape(params);
  return tape.to_array(net.logits(tape, tape.constant(x)));
}

// --- sequences -------------------------------------------------------------

void SeqEncoder::init(ParamStore& params, Rng& rng) const {
  if (vocab == 0 || dim == 0) throw InvalidArgument("SeqEncoder: vocab and dim must be positive");
  // Embedding rows are drawn like a weight with fan_in = dim.
  params.add_weight(prefix + ".emb", vocab, dim, rng);
  if (!tied_embeddings) params.add_weight(prefix + ".out_emb", vocab, dim, rng);
  for (const char* dir : {".fwd", ".bwd"}) {
    params.add_weight(prefix + dir + ".Wx", 3 * dim, dim, rng);
    params.add_weight(prefix + dir + ".Uh", 3 * dim, dim, rng);
    params.add_zeros(prefix + dir + ".b", {3 * dim});
  }
}

void SeqEncoder::init_tag_head(ParamStore& params, Rng& rng) const {
  params.add_weight(tag_prefix + ".W", classes, 2 * dim, rng);
  params.add_zeros(tag_prefix + ".b", {classes});
  params.add_zeros(edge_name(), {classes, classes});
  if (start_vector) params.add_zeros(start_name(), {classes});
}

std::vector<std::string> SeqEncoder::encoder_names() const {
  std::vector<std::string> out{prefix + ".emb"};
  if (!tied_embeddings) out.push_back(prefix + ".out_emb");
  for (const char* dir : {".fwd", ".bwd"}) {
    out.push_back(prefix + dir + ".Wx");
    out.push_back(prefix + dir + ".Uh");
    out.push_back(prefix + dir + ".b");
  }
  return out;
}

std::vector<std::string> SeqEncoder::tag_names() const {
  std::vector<std::string> out{tag_prefix + ".W", tag_prefix + ".b", edge_name()};
  if (start_vector) out.push_back(start_name());
  return out;
}

void SeqEncoder::check_tokens(std::span<const int> x) const {
  if (x.empty()) throw InvalidArgument("sequence must contain at least one token");
  for (int t : x) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw InvalidArgument("token " + std::to_string(t) + " outside vocabulary of size " + std::to_string(vocab));
    }
  }
}

SeqEncoder::States SeqEncoder::encode(ad::Tape& tape, std::span<const int> x) const {
  check_tokens(x);
  States s;
  s.embedded = ad::embedding(tape.param(prefix + ".emb"), x);
  s.output = tied_embeddings ? s.embedded : ad::embedding(tape.param(prefix + ".out_emb"), x);
  s.forward = ad::gru_scan(s.embedded, tape.param(prefix + ".fwd.Wx"), tape.param(prefix + ".fwd.Uh"),
                           tape.param(prefix + ".fwd.b"), false);
  s.backward = ad::gru_scan(s.embedded, tape.param(prefix + ".bwd.Wx"), tape.param(prefix + ".bwd.Uh"),
                            tape.param(prefix + ".bwd.b"), true);
  return s;
}

ad::Var SeqEncoder::pretrain_potential(ad::Tape& tape, std::span<const int> x) const {
  return pretrain_potential(tape, encode(tape, x));
}

ad::Var SeqEncoder::pretrain_potential(ad::Tape& tape, const States& s) const {
  const std::size_t len = tape.rows(s.embedded);
  if (len == 1) return tape.scalar(0.0);
  ad::Var fwd = ad::row_dot(ad::slice_rows(s.forward, 0, len - 1), ad::slice_rows(s.output, 1, len));
  ad::Var bwd = ad::row_dot(ad::slice_rows(s.backward, 1, len), ad::slice_rows(s.output, 0, len - 1));
  return ad::add(ad::sum(fwd), ad::sum(bwd));
}

ad::Var SeqEncoder::features(ad::Tape& tape, std::span<const int> x) const {
  States s = encode(tape, x);
  return ad::concat_cols(s.forward, s.backward);
}

ad::Var SeqEncoder::tag_logits(ad::Tape& tape, ad::Var features) const {
  return ad::affine(features, tape.param(tag_prefix + ".W"), tape.param(tag_prefix + ".b"));
}

ad::Var SeqEncoder::start(ad::Tape& tape) const {
  if (!start_vector) return {};
  return tape.param(start_name());
}

double seq_potential_pretrain(const SeqEncoder& enc, const ParamStore& params, std::span<const int> x) {
  ad::Tape tape(params);
  return tape.item(enc.pretrain_potential(tape, x));
}

SeqFeatures seq_features(const SeqEncoder& enc, const ParamStore& params, std::span<const int> x) {
  ad::Tape tape(params);
  auto s = enc.encode(tape, x);
  ad::Var cat = ad::concat_cols(s.forward, s.backward);
  SeqFeatures out;
  out.forward = tape.to_array(s.forward);
  out.backward = tape.to_array(s.backward);
  out.concat = tape.to_array(cat);
  if (params.contains(enc.tag_prefix + ".W")) out.logits = tape.to_array(enc.tag_logits(tape, cat));
  return out;
}

}  // namespace ebmssl::pot
