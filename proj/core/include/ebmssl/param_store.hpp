#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ebmssl/real_array.hpp"

namespace ebmssl {

using Rng = std::mt19937_64;

// Named parameter arrays, each paired with a same-shape gradient accumulator.
// Iteration order is lexicographic by name, which fixes every reduction over
// parameters (norms, checkpoints) independently of insertion order.
class ParamStore {
 public:
  struct Entry {
    RealArray value;
    RealArray grad;
  };

  // Throws InvalidArgument on duplicate names.
  RealArray& add(const std::string& name, RealArray value);
  // Glorot-uniform weight of shape {fan_out, fan_in}.
  RealArray& add_weight(const std::string& name, std::size_t fan_out, std::size_t fan_in, Rng& rng);
  RealArray& add_zeros(const std::string& name, std::vector<std::size_t> shape);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const RealArray& value(const std::string& name) const;
  RealArray& value(const std::string& name);
  const RealArray& grad(const std::string& name) const;
  RealArray& grad(const std::string& name);
  void set(const std::string& name, RealArray value);
  void erase(const std::string& name);

  std::vector<std::string> names() const;
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  // grad(name) += scale * g(name) for every name present in both stores' values.
  void accumulate_grad(const std::map<std::string, RealArray>& g, double scale);
  std::map<std::string, RealArray> gradients() const;

  // Copy of the value arrays whose names start with prefix (prefix kept).
  ParamStore subset(const std::string& prefix) const;
  // Insert or overwrite every entry from other.
  void merge(const ParamStore& other, const std::string& prefix = "");

  const std::map<std::string, Entry>& entries() const { return entries_; }

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  std::map<std::string, Entry> entries_;
};

// Checkpoint text container:
//   EBMSSL-CKPT v1
//   <name> <ndims> <d1> ... <dn>
//   <values, whitespace separated, 17 significant digits>
void write_checkpoint(std::ostream& out, const ParamStore& params);
ParamStore read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params);
ParamStore load_checkpoint(const std::filesystem::path& path);

}  // namespace ebmssl
