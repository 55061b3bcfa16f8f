#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "sgg/tensor.hpp"

namespace sgg {

enum class Init { kZeros, kOnes, kXavier, kNormal };

// Ordered name -> tensor map for every learnable quantity. Iteration follows
// insertion order; initial values depend only on (seed, name, shape), never on
// creation order.
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : seed_(seed) {}

  Tensor create(const std::string& name, Shape shape, Init init, double init_scale = 1.0,
                bool trainable = true);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  bool trainable(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  size_t size() const { return names_.size(); }
  uint64_t seed() const { return seed_; }

  void zero_grads();
  int64_t total_elements() const;

 private:
  uint64_t seed_;
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::vector<bool> trainable_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace sgg
