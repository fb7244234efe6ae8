#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "lgcaps/tape.hpp"
#include "lgcaps/tensor.hpp"

namespace lgcaps {

// Stable 64-bit name hash (FNV-1a); keeps per-parameter init streams
// independent of registration order and platform.
std::uint64_t name_hash(const std::string& s);

// Ordered registry of learnable tensors. Insertion order is the canonical
// order for checkpoints and optimizer state.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t init_seed) : seed_(init_seed) {}

  // Registers a tensor. fan_in > 0 draws entries from the He/Kaiming uniform
  // U(-a, a) with a = sqrt(6/fan_in); fan_in == 0 leaves it zero (biases).
  Tensor& add(const std::string& name, Shape shape, int fan_in);

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::size_t count() const { return names_.size(); }
  std::int64_t total_elems() const;

 private:
  std::uint64_t seed_;
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-tape view of a ParamStore: hands out leaf Refs on demand, one per
// parameter, so gradients can be read back after backward().
struct BoundParams {
  Tape* tape = nullptr;
  ParamStore* store = nullptr;
  std::unordered_map<std::string, Ref> bound;

  BoundParams(Tape& t, ParamStore& s) : tape(&t), store(&s) {}

  Ref operator[](const std::string& name);

  // Zero tensor if the parameter was never used on this tape.
  Tensor grad_of(const std::string& name);
};

}  // namespace lgcaps
