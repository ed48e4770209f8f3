#include "ebmssl/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "ebmssl/error.hpp"

namespace ebmssl::data {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += fmt(v[i]);
  }
  return s;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw FormatError("not a number: '" + s + "'");
  return v;
}

long parse_int(const std::string& s) {
  long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw FormatError("not an integer: '" + s + "'");
  return v;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  for (const auto& t : split_on(s, ',')) out.push_back(parse_double(t));
  return out;
}

// "kind key=value key=value ..."
std::map<std::string, std::string> parse_descriptor(const std::string& s, const std::string& kind) {
  std::istringstream in(s);
  std::string word;
  if (!(in >> word) || word != kind) throw FormatError("expected a '" + kind + "' descriptor");
  std::map<std::string, std::string> kv;
  while (in >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw FormatError("malformed descriptor field '" + word + "'");
    kv[word.substr(0, eq)] = word.substr(eq + 1);
  }
  return kv;
}

const std::string& field(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("descriptor missing '" + key + "'");
  return it->second;
}

void normalize(std::span<double> v) {
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  for (auto& x : v) x /= s;
}

std::vector<double> uniform_lengths(std::size_t min_len, std::size_t max_len) {
  if (min_len == 0) min_len = std::max<std::size_t>(1, (max_len + 2) / 3);
  if (min_len > max_len) throw InvalidArgument("HMM: min_len exceeds max_len");
  std::vector<double> len(max_len, 0.0);
  for (std::size_t l = min_len; l <= max_len; ++l) len[l - 1] = 1.0;
  normalize(len);
  return len;
}

// Per-state token ownership t % K == k with Zipf weights, mixed with uniform.
std::vector<double> block_emission(std::size_t states, std::size_t vocab, double shared) {
  std::vector<double> em(states * vocab, 0.0);
  for (std::size_t k = 0; k < states; ++k) {
    std::span<double> row(em.data() + k * vocab, vocab);
    std::size_t rank = 0;
    double total = 0.0;
    for (std::size_t t = k; t < vocab; t += states) {
      row[t] = 1.0 / static_cast<double>(++rank);
      total += row[t];
    }
    for (std::size_t t = 0; t < vocab; ++t) {
      row[t] = (total > 0.0 ? (1.0 - shared) * row[t] / total : 0.0) + shared / static_cast<double>(vocab);
    }
    normalize(row);
  }
  return em;
}

std::size_t draw(std::span<const double> w, Rng& rng) {
  std::discrete_distribution<std::size_t> d(w.begin(), w.end());
  return d(rng);
}

}  // namespace

// ---- descriptors ----

std::vector<double> MixtureDescriptor::mean(std::size_t k) const {
  std::vector<double> m(dim, 0.0);
  const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
  m[0] = radius * std::cos(a);
  if (dim > 1) m[1] = radius * std::sin(a);
  return m;
}

std::string MixtureDescriptor::to_string() const {
  return "mixture classes=" + std::to_string(classes) + " dim=" + std::to_string(dim) + " radius=" + fmt(radius) +
         " stddev=" + fmt(stddev);
}

MixtureDescriptor MixtureDescriptor::parse(const std::string& s) {
  const auto kv = parse_descriptor(s, "mixture");
  MixtureDescriptor d;
  d.classes = static_cast<std::size_t>(parse_int(field(kv, "classes")));
  d.dim = static_cast<std::size_t>(parse_int(field(kv, "dim")));
  d.radius = parse_double(field(kv, "radius"));
  d.stddev = parse_double(field(kv, "stddev"));
  if (d.classes < 2 || d.dim == 0 || !(d.stddev > 0.0)) throw FormatError("invalid mixture descriptor");
  return d;
}

HmmDescriptor HmmDescriptor::standard(std::size_t states, std::size_t vocab, std::size_t max_len,
                                      std::size_t min_len, double stay_prob, double shared) {
  if (states == 0 || vocab < states || max_len == 0) throw InvalidArgument("HMM: need K >= 1, V >= K, L >= 1");
  if (stay_prob <= 0.0 || stay_prob >= 1.0) throw InvalidArgument("HMM: stay probability must be in (0,1)");
  if (shared < 0.0 || shared > 1.0) throw InvalidArgument("HMM: shared emission mass must be in [0,1]");
  HmmDescriptor d;
  d.states = states;
  d.vocab = vocab;
  d.max_len = max_len;
  d.initial.assign(states, 1.0 / static_cast<double>(states));
  d.transition.assign(states * states, states == 1 ? 0.0 : (1.0 - stay_prob) / static_cast<double>(states - 1));
  for (std::size_t k = 0; k < states; ++k) d.transition[k * states + k] = states == 1 ? 1.0 : stay_prob;
  d.emission = block_emission(states, vocab, shared);
  d.length = uniform_lengths(min_len, max_len);
  for (std::size_t k = 0; k < states; ++k) d.label_names.push_back("S" + std::to_string(k));
  return d;
}

HmmDescriptor HmmDescriptor::bio(std::size_t vocab, std::size_t max_len, std::size_t min_len, double shared) {
  HmmDescriptor d = standard(3, vocab, max_len, min_len, 0.7, shared);
  d.initial = {0.6, 0.4, 0.0};
  d.transition = {0.7, 0.3, 0.0,    // O
                  0.3, 0.05, 0.65,  // B
                  0.4, 0.1, 0.5};   // I
  d.label_names = {"O", "B-ENT", "I-ENT"};
  return d;
}

HmmDescriptor HmmDescriptor::identity(std::size_t states, std::size_t max_len) {
  HmmDescriptor d = standard(states, states, max_len, 1, 0.7, 0.0);
  std::fill(d.emission.begin(), d.emission.end(), 0.0);
  for (std::size_t k = 0; k < states; ++k) d.emission[k * states + k] = 1.0;
  return d;
}

bool HmmDescriptor::is_bio() const {
  return states == 3 && label_names == std::vector<std::string>{"O", "B-ENT", "I-ENT"};
}

void HmmDescriptor::validate() const {
  auto check_rows = [](const std::vector<double>& v, std::size_t rows, std::size_t cols, const char* what) {
    if (v.size() != rows * cols) throw InvalidArgument(std::string("HMM: ") + what + " has the wrong size");
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double x = v[r * cols + c];
        if (!(x >= 0.0) || !std::isfinite(x)) throw InvalidArgument(std::string("HMM: ") + what + " has a bad entry");
        s += x;
      }
      if (std::abs(s - 1.0) > 1e-9) throw InvalidArgument(std::string("HMM: ") + what + " rows must sum to 1");
    }
  };
  if (states == 0 || vocab == 0 || max_len == 0) throw InvalidArgument("HMM: empty dimensions");
  check_rows(initial, 1, states, "initial");
  check_rows(transition, states, states, "transition");
  check_rows(emission, states, vocab, "emission");
  check_rows(length, 1, max_len, "length");
  if (label_names.size() != states) throw InvalidArgument("HMM: one label name per state required");
}

std::string HmmDescriptor::to_string() const {
  std::string names;
  for (std::size_t i = 0; i < label_names.size(); ++i) names += (i ? "," : "") + label_names[i];
  return "hmm states=" + std::to_string(states) + " vocab=" + std::to_string(vocab) +
         " max_len=" + std::to_string(max_len) + " labels=" + names + " initial=" + join(initial) +
         " transition=" + join(transition) + " emission=" + join(emission) + " length=" + join(length);
}

HmmDescriptor HmmDescriptor::parse(const std::string& s) {
  const auto kv = parse_descriptor(s, "hmm");
  HmmDescriptor d;
  d.states = static_cast<std::size_t>(parse_int(field(kv, "states")));
  d.vocab = static_cast<std::size_t>(parse_int(field(kv, "vocab")));
  d.max_len = static_cast<std::size_t>(parse_int(field(kv, "max_len")));
  d.label_names = split_on(field(kv, "labels"), ',');
  d.initial = parse_list(field(kv, "initial"));
  d.transition = parse_list(field(kv, "transition"));
  d.emission = parse_list(field(kv, "emission"));
  d.length = parse_list(field(kv, "length"));
  try {
    d.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(e.what());
  }
  return d;
}

// ---- datasets ----

ContinuousDataset ContinuousDataset::subset(std::span<const std::size_t> idx) const {
  ContinuousDataset out;
  out.desc = desc;
  const std::size_t d = points.cols();
  std::vector<double> v;
  v.reserve(idx.size() * d);
  for (auto i : idx) {
    if (i >= size()) throw InvalidArgument("subset: index out of range");
    auto r = points.row_view(i);
    v.insert(v.end(), r.begin(), r.end());
    out.labels.push_back(labels[i]);
  }
  out.points = RealArray({idx.size(), d}, std::move(v));
  return out;
}

void ContinuousDataset::validate() const {
  if (points.rank() != 2 || points.rows() != labels.size()) throw ShapeError("dataset: points and labels disagree");
  if (points.cols() != desc.dim) throw ShapeError("dataset: point dimension differs from descriptor");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= desc.classes) throw InvalidArgument("dataset: label out of range");
  }
  if (!points.all_finite()) throw NonFiniteError("dataset: non-finite coordinate");
}

SequenceDataset SequenceDataset::subset(std::span<const std::size_t> idx) const {
  SequenceDataset out;
  out.desc = desc;
  for (auto i : idx) {
    if (i >= size()) throw InvalidArgument("subset: index out of range");
    out.tokens.push_back(tokens[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

void SequenceDataset::validate() const {
  if (tokens.size() != labels.size()) throw ShapeError("dataset: token and label counts differ");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].empty() || tokens[i].size() > desc.max_len) throw InvalidArgument("dataset: bad sequence length");
    if (tokens[i].size() != labels[i].size()) throw ShapeError("dataset: tokens and labels differ in length");
    for (int t : tokens[i]) {
      if (t < 0 || static_cast<std::size_t>(t) >= desc.vocab) throw InvalidArgument("dataset: token out of range");
    }
    for (int y : labels[i]) {
      if (y < 0 || static_cast<std::size_t>(y) >= desc.states) throw InvalidArgument("dataset: label out of range");
    }
  }
}

ContinuousDataset gen_mixture(std::size_t classes, std::size_t per_class, std::uint64_t seed, double radius,
                              double stddev) {
  MixtureDescriptor d;
  d.classes = classes;
  d.radius = radius;
  d.stddev = stddev;
  return gen_mixture(d, per_class, seed);
}

ContinuousDataset gen_mixture(const MixtureDescriptor& desc, std::size_t per_class, std::uint64_t seed) {
  if (desc.classes < 2 || desc.dim == 0 || per_class == 0) throw InvalidArgument("gen_mixture: empty configuration");
  if (!(desc.stddev > 0.0)) throw InvalidArgument("gen_mixture: stddev must be positive");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, desc.stddev);
  const std::size_t n = desc.classes * per_class;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  ContinuousDataset ds;
  ds.desc = desc;
  ds.points = RealArray({n, desc.dim});
  ds.labels.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t k = order[j] / per_class;
    const auto m = desc.mean(k);
    auto row = ds.points.row_view(j);
    for (std::size_t c = 0; c < desc.dim; ++c) row[c] = m[c] + normal(rng);
    ds.labels[j] = static_cast<int>(k);
  }
  return ds;
}

RealArray sample_mixture_points(const MixtureDescriptor& desc, std::size_t n, std::uint64_t seed) {
  if (desc.classes == 0 || desc.dim == 0) throw InvalidArgument("sample_mixture_points: empty configuration");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, desc.classes - 1);
  std::normal_distribution<double> normal(0.0, desc.stddev);
  RealArray out({n, desc.dim});
  for (std::size_t j = 0; j < n; ++j) {
    const auto m = desc.mean(pick(rng));
    auto row = out.row_view(j);
    for (std::size_t c = 0; c < desc.dim; ++c) row[c] = m[c] + normal(rng);
  }
  return out;
}

SequenceDataset gen_hmm(const HmmDescriptor& desc, std::size_t n, std::uint64_t seed) {
  desc.validate();
  Rng rng(seed);
  SequenceDataset ds;
  ds.desc = desc;
  ds.tokens.reserve(n);
  ds.labels.reserve(n);
  const std::size_t K = desc.states, V = desc.vocab;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = draw(desc.length, rng) + 1;
    Sequence x(len), y(len);
    std::size_t s = draw(desc.initial, rng);
    for (std::size_t p = 0; p < len; ++p) {
      if (p > 0) s = draw(std::span<const double>(desc.transition.data() + s * K, K), rng);
      y[p] = static_cast<int>(s);
      x[p] = static_cast<int>(draw(std::span<const double>(desc.emission.data() + s * V, V), rng));
    }
    ds.tokens.push_back(std::move(x));
    ds.labels.push_back(std::move(y));
  }
  return ds;
}

SequenceDataset gen_hmm(std::size_t states, std::size_t vocab, std::size_t n, std::size_t max_len,
                        std::uint64_t seed) {
  return gen_hmm(HmmDescriptor::standard(states, vocab, max_len), n, seed);
}

RealArray hmm_posteriors(const HmmDescriptor& desc, std::span<const int> x) {
  const std::size_t K = desc.states, V = desc.vocab, l = x.size();
  if (l == 0) throw InvalidArgument("hmm_posteriors: empty sequence");
  for (int t : x) {
    if (t < 0 || static_cast<std::size_t>(t) >= V) throw InvalidArgument("hmm_posteriors: token out of range");
  }
  auto em = [&](std::size_t k, std::size_t p) { return desc.emission[k * V + static_cast<std::size_t>(x[p])]; };
  // Scaled forward-backward.
  std::vector<double> alpha(l * K), beta(l * K, 1.0);
  for (std::size_t k = 0; k < K; ++k) alpha[k] = desc.initial[k] * em(k, 0);
  auto rescale = [&](double* row) {
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += row[k];
    if (!(s > 0.0)) throw InvalidArgument("hmm_posteriors: sequence has zero probability");
    for (std::size_t k = 0; k < K; ++k) row[k] /= s;
  };
  rescale(alpha.data());
  for (std::size_t p = 1; p < l; ++p) {
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < K; ++j) s += alpha[(p - 1) * K + j] * desc.transition[j * K + k];
      alpha[p * K + k] = s * em(k, p);
    }
    rescale(alpha.data() + p * K);
  }
  for (std::size_t p = l - 1; p-- > 0;) {
    for (std::size_t j = 0; j < K; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += desc.transition[j * K + k] * em(k, p + 1) * beta[(p + 1) * K + k];
      beta[p * K + j] = s;
    }
    rescale(beta.data() + p * K);
  }
  RealArray post({l, K});
  for (std::size_t p = 0; p < l; ++p) {
    auto row = post.row_view(p);
    for (std::size_t k = 0; k < K; ++k) row[k] = alpha[p * K + k] * beta[p * K + k];
    rescale(row.data());
  }
  return post;
}

Sequence hmm_posterior_decode(const HmmDescriptor& desc, std::span<const int> x) {
  const RealArray post = hmm_posteriors(desc, x);
  Sequence y(x.size());
  for (std::size_t p = 0; p < x.size(); ++p) {
    auto row = post.row_view(p);
    y[p] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return y;
}

double bayes_token_accuracy(const SequenceDataset& ds) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sequence y = hmm_posterior_decode(ds.desc, ds.tokens[i]);
    for (std::size_t p = 0; p < y.size(); ++p) hit += y[p] == ds.labels[i][p];
    total += y.size();
  }
  if (total == 0) throw InvalidArgument("bayes_token_accuracy: empty dataset");
  return static_cast<double>(hit) / static_cast<double>(total);
}

// ---- splits ----

namespace {

constexpr int kMaxResample = 1000;

std::size_t labeled_count(double p, std::size_t pool) {
  if (!(p > 0.0) || p > 1.0) throw InvalidArgument("split: proportion must be in (0, 1]");
  return static_cast<std::size_t>(std::ceil(p * static_cast<double>(pool) - 1e-9));
}

std::size_t unlabeled_count(double r, std::size_t n_labeled) {
  if (!(r >= 0.0) || !std::isfinite(r)) throw InvalidArgument("split: ratio must be non-negative");
  return static_cast<std::size_t>(std::llround(r * static_cast<double>(n_labeled)));
}

std::vector<std::size_t> complement(std::size_t n, const std::vector<std::size_t>& taken) {
  std::vector<bool> used(n, false);
  for (auto i : taken) used[i] = true;
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < n; ++i) {
    if (!used[i]) rest.push_back(i);
  }
  return rest;
}

}  // namespace

ContinuousSplit split(const ContinuousDataset& ds, double p, double r, std::uint64_t seed, const SplitOptions& opt) {
  ds.validate();
  const std::size_t pool = opt.label_pool == 0 ? ds.size() : opt.label_pool;
  if (pool > ds.size()) throw InvalidArgument("split: label pool larger than the dataset");
  Rng rng(seed);
  std::vector<std::size_t> labeled;
  if (opt.stratified) {
    std::vector<std::vector<std::size_t>> by_class(ds.classes());
    for (std::size_t i = 0; i < pool; ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    for (auto& members : by_class) {
      if (members.empty()) throw InvalidArgument("split: a class has no items in the label pool");
      const std::size_t take = labeled_count(p, members.size());
      std::shuffle(members.begin(), members.end(), rng);
      labeled.insert(labeled.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
    }
  } else {
    const std::size_t take = labeled_count(p, pool);
    if (take < ds.classes()) throw InvalidArgument("split: fewer labeled items than classes");
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    bool covered = false;
    for (int attempt = 0; attempt < kMaxResample && !covered; ++attempt) {
      std::shuffle(idx.begin(), idx.end(), rng);
      labeled.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
      std::vector<bool> seen(ds.classes(), false);
      for (auto i : labeled) seen[static_cast<std::size_t>(ds.labels[i])] = true;
      covered = std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
    }
    if (!covered) throw InvalidArgument("split: could not draw a labeled set covering every class");
  }
  std::sort(labeled.begin(), labeled.end());
  std::vector<std::size_t> rest = complement(ds.size(), labeled);
  const std::size_t n_u = unlabeled_count(r, labeled.size());
  if (n_u > rest.size()) {
    throw InvalidArgument("split: unlabeled reservoir holds " + std::to_string(rest.size()) + " items, " +
                          std::to_string(n_u) + " requested");
  }
  std::shuffle(rest.begin(), rest.end(), rng);
  rest.resize(n_u);
  std::sort(rest.begin(), rest.end());

  ContinuousSplit out;
  out.labeled = ds.subset(labeled);
  out.unlabeled = ds.subset(rest).points;
  if (n_u == 0) out.unlabeled = RealArray({0, ds.points.cols()});
  out.proportion = p;
  out.ratio = r;
  out.labeled_index = std::move(labeled);
  out.unlabeled_index = std::move(rest);
  return out;
}

SequenceSplit split(const SequenceDataset& ds, double p, double r, std::uint64_t seed,
                    const std::vector<Sequence>* unlabeled_pool) {
  ds.validate();
  if (ds.size() == 0) throw InvalidArgument("split: empty dataset");
  Rng rng(seed);
  const std::size_t take = labeled_count(p, ds.size());
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<std::size_t> labeled;
  bool covered = false;
  for (int attempt = 0; attempt < kMaxResample && !covered; ++attempt) {
    std::shuffle(idx.begin(), idx.end(), rng);
    labeled.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    std::vector<bool> seen(ds.desc.states, false);
    for (auto i : labeled) {
      for (int y : ds.labels[i]) seen[static_cast<std::size_t>(y)] = true;
    }
    covered = std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
  }
  if (!covered) throw InvalidArgument("split: could not draw a labeled set covering every label");
  std::sort(labeled.begin(), labeled.end());
  const std::size_t n_u = unlabeled_count(r, labeled.size());

  SequenceSplit out;
  out.labeled = ds.subset(labeled);
  out.proportion = p;
  out.ratio = r;
  if (unlabeled_pool != nullptr) {
    if (n_u > unlabeled_pool->size()) {
      throw InvalidArgument("split: unlabeled pool holds " + std::to_string(unlabeled_pool->size()) + " items, " +
                            std::to_string(n_u) + " requested");
    }
    std::vector<std::size_t> u(unlabeled_pool->size());
    std::iota(u.begin(), u.end(), std::size_t{0});
    std::shuffle(u.begin(), u.end(), rng);
    u.resize(n_u);
    std::sort(u.begin(), u.end());
    for (auto i : u) out.unlabeled.push_back((*unlabeled_pool)[i]);
  } else {
    std::vector<std::size_t> rest = complement(ds.size(), labeled);
    if (n_u > rest.size()) {
      throw InvalidArgument("split: unlabeled reservoir holds " + std::to_string(rest.size()) + " items, " +
                            std::to_string(n_u) + " requested");
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    rest.resize(n_u);
    std::sort(rest.begin(), rest.end());
    for (auto i : rest) out.unlabeled.push_back(ds.tokens[i]);
  }
  out.labeled_index = std::move(labeled);
  return out;
}

// ---- text format ----

namespace {

std::vector<std::string> words(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string read_header(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw FormatError("dataset file lacks a '# ' header");
  return line.substr(2);
}

}  // namespace

void write_dataset(std::ostream& out, const ContinuousDataset& ds) {
  ds.validate();
  out << "# " << ds.desc.to_string() << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i] + 1;
    for (double v : ds.points.row_view(i)) out << ' ' << fmt(v);
    out << '\n';
  }
}

void write_dataset(std::ostream& out, const SequenceDataset& ds) {
  ds.validate();
  out << "# " << ds.desc.to_string() << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t p = 0; p < ds.tokens[i].size(); ++p) out << (p ? " " : "") << ds.tokens[i][p];
    out << '\n';
    for (std::size_t p = 0; p < ds.labels[i].size(); ++p) out << (p ? " " : "") << ds.labels[i][p] + 1;
    out << '\n';
  }
}

ContinuousDataset read_continuous(std::istream& in) {
  ContinuousDataset ds;
  ds.desc = MixtureDescriptor::parse(read_header(in));
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    const auto w = words(line);
    if (w.empty()) continue;
    if (w.size() != ds.desc.dim + 1) throw FormatError("dataset line has the wrong number of fields");
    ds.labels.push_back(static_cast<int>(parse_int(w[0])) - 1);
    for (std::size_t c = 1; c < w.size(); ++c) values.push_back(parse_double(w[c]));
  }
  ds.points = RealArray({ds.labels.size(), ds.desc.dim}, std::move(values));
  try {
    ds.validate();
  } catch (const Error& e) {
    throw FormatError(e.what());
  }
  return ds;
}

SequenceDataset read_sequences(std::istream& in) {
  SequenceDataset ds;
  ds.desc = HmmDescriptor::parse(read_header(in));
  std::string tok_line, lab_line;
  while (std::getline(in, tok_line)) {
    if (words(tok_line).empty()) continue;
    if (!std::getline(in, lab_line)) throw FormatError("token line without a label line");
    Sequence x, y;
    for (const auto& w : words(tok_line)) x.push_back(static_cast<int>(parse_int(w)));
    for (const auto& w : words(lab_line)) y.push_back(static_cast<int>(parse_int(w)) - 1);
    ds.tokens.push_back(std::move(x));
    ds.labels.push_back(std::move(y));
  }
  try {
    ds.validate();
  } catch (const Error& e) {
    throw FormatError(e.what());
  }
  return ds;
}

namespace {

template <class Dataset>
void save_impl(const std::filesystem::path& path, const Dataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_dataset(out, ds);
  if (!out) throw Error("write to " + path.string() + " failed");
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const ContinuousDataset& ds) { save_impl(path, ds); }
void save_dataset(const std::filesystem::path& path, const SequenceDataset& ds) { save_impl(path, ds); }

}  // namespace ebmssl::data
