#include "ebmssl/param_store.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ebmssl/error.hpp"

namespace ebmssl {

namespace {

constexpr const char* kCheckpointMagic = "EBMSSL-CKPT v1";

}  // namespace

RealArray& ParamStore::add(const std::string& name, RealArray value) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw InvalidArgument("invalid parameter name '" + name + "'");
  }
  if (contains(name)) throw InvalidArgument("duplicate parameter '" + name + "'");
  RealArray grad(value.shape(), 0.0);
  auto [it, ok] = entries_.emplace(name, Entry{std::move(value), std::move(grad)});
  return it->second.value;
}

RealArray& ParamStore::add_weight(const std::string& name, std::size_t fan_out,
                                  std::size_t fan_in, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-s, s);
  RealArray w({fan_out, fan_in});
  for (auto& v : w.values()) v = u(rng);
  return add(name, std::move(w));
}

RealArray& ParamStore::add_zeros(const std::string& name, std::vector<std::size_t> shape) {
  return add(name, RealArray(std::move(shape), 0.0));
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UnboundNameError("unknown parameter '" + name + "'");
  return it->second;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UnboundNameError("unknown parameter '" + name + "'");
  return it->second;
}

const RealArray& ParamStore::value(const std::string& name) const { return entry(name).value; }
RealArray& ParamStore::value(const std::string& name) { return entry(name).value; }
const RealArray& ParamStore::grad(const std::string& name) const { return entry(name).grad; }
RealArray& ParamStore::grad(const std::string& name) { return entry(name).grad; }

void ParamStore::set(const std::string& name, RealArray value) {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    add(name, std::move(value));
    return;
  }
  it->second.grad = RealArray(value.shape(), 0.0);
  it->second.value = std::move(value);
}

void ParamStore::erase(const std::string& name) { entries_.erase(name); }

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) {
    if (k.rfind(prefix, 0) == 0) out.push_back(k);
  }
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, e] : entries_) e.grad.fill(0.0);
}

void ParamStore::accumulate_grad(const std::map<std::string, RealArray>& g, double scale) {
  for (const auto& [name, arr] : g) {
    auto& dst = grad(name);
    if (!dst.same_shape(arr)) throw ShapeError("gradient shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < arr.size(); ++i) dst[i] += scale * arr[i];
  }
}

std::map<std::string, RealArray> ParamStore::gradients() const {
  std::map<std::string, RealArray> out;
  for (const auto& [k, e] : entries_) out.emplace(k, e.grad);
  return out;
}

ParamStore ParamStore::subset(const std::string& prefix) const {
  ParamStore out;
  for (const auto& [k, e] : entries_) {
    if (k.rfind(prefix, 0) == 0) out.add(k, e.value);
  }
  return out;
}

void ParamStore::merge(const ParamStore& other, const std::string& prefix) {
  for (const auto& [k, e] : other.entries_) set(prefix + k, e.value);
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  auto ib = b.entries_.begin();
  for (const auto& [k, e] : a.entries_) {
    if (k != ib->first || !(e.value == ib->second.value)) return false;
    ++ib;
  }
  return true;
}

void write_checkpoint(std::ostream& out, const ParamStore& params) {
  out << kCheckpointMagic << '\n';
  char buf[64];
  for (const auto& [name, e] : params.entries()) {
    out << name << ' ' << e.value.rank();
    for (auto d : e.value.shape()) out << ' ' << d;
    out << '\n';
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", e.value[i]);
      if (i) out << ' ';
      out << buf;
    }
    out << '\n';
  }
}

ParamStore read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw FormatError("checkpoint: missing '" + std::string(kCheckpointMagic) + "' header");
  }
  ParamStore params;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream header(line);
    std::string name;
    long ndims = -1;
    if (!(header >> name >> ndims) || ndims < 0 || ndims > 8) {
      throw FormatError("checkpoint: bad header at line " + std::to_string(lineno));
    }
    std::vector<std::size_t> shape;
    for (long i = 0; i < ndims; ++i) {
      long d = 0;
      if (!(header >> d) || d <= 0) {
        throw FormatError("checkpoint: bad dimension at line " + std::to_string(lineno));
      }
      shape.push_back(static_cast<std::size_t>(d));
    }
    std::string values;
    if (!std::getline(in, values)) {
      throw FormatError("checkpoint: missing values for '" + name + "'");
    }
    ++lineno;
    const std::size_t n = shape_product(shape);
    std::vector<double> data;
    data.reserve(n);
    const char* p = values.data();
    const char* end = values.data() + values.size();
    while (p < end) {
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
      if (p == end) break;
      double v = 0.0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc() || !std::isfinite(v)) {
        throw FormatError("checkpoint: bad number at line " + std::to_string(lineno));
      }
      data.push_back(v);
      p = next;
    }
    if (data.size() != n) {
      throw FormatError("checkpoint: '" + name + "' expects " + std::to_string(n) +
                        " values, found " + std::to_string(data.size()));
    }
    try {
      params.add(name, RealArray(std::move(shape), std::move(data)));
    } catch (const InvalidArgument& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    write_checkpoint(out, params);
    if (!out) throw Error("write failed for checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace ebmssl
