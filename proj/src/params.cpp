#include "lgcaps/params.hpp"

#include <cmath>

#include "lgcaps/rng.hpp"

namespace lgcaps {

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Tensor& ParamStore::add(const std::string& name, Shape shape, int fan_in) {
  if (index_.count(name)) throw ConfigError("parameter registered twice: " + name);
  Tensor t(std::move(shape));
  if (fan_in > 0) {
    Rng rng = Rng(seed_).derive(name_hash(name));
    // He/Kaiming uniform: var(w) = 2/fan_in keeps activation scale roughly
    // constant through deep relu/linear stacks instead of shrinking per stage.
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-a, a);
  }
  t.requires_grad = true;
  index_[name] = names_.size();
  names_.push_back(name);
  values_.push_back(std::move(t));
  return values_.back();
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return values_[it->second];
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return values_[it->second];
}

std::int64_t ParamStore::total_elems() const {
  std::int64_t n = 0;
  for (const Tensor& t : values_) n += t.numel();
  return n;
}

Ref BoundParams::operator[](const std::string& name) {
  auto it = bound.find(name);
  if (it != bound.end()) return it->second;
  Ref r = tape->leaf(store->get(name), true);
  bound.emplace(name, r);
  return r;
}

Tensor BoundParams::grad_of(const std::string& name) {
  auto it = bound.find(name);
  if (it == bound.end()) return Tensor(store->get(name).shape());
  return tape->grad(it->second).clone();
}

}  // namespace lgcaps
