#include "sgg/param_store.hpp"

#include <cmath>

#include "sgg/rng.hpp"

namespace sgg {

Tensor ParamStore::create(const std::string& name, Shape shape, Init init, double init_scale,
                          bool trainable) {
  if (index_.count(name)) throw ContractError("param '" + name + "' already exists");
  int64_t n = shape_numel(shape);
  std::vector<double> data(n, 0.0);
  Rng rng(mix_seed(seed_, name));
  switch (init) {
    case Init::kZeros:
      break;
    case Init::kOnes:
      for (auto& x : data) x = init_scale;
      break;
    case Init::kXavier: {
      // fan_in/fan_out from the trailing two extents; vectors treated as [1,d]
      int fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : 1;
      int fan_out = shape.back();
      double bound = init_scale * std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& x : data) x = rng.uniform(-bound, bound);
      break;
    }
    case Init::kNormal:
      for (auto& x : data) x = rng.normal(0.0, init_scale);
      break;
  }
  Tensor t = Tensor::from_data(std::move(shape), std::move(data));
  t.set_requires_grad(trainable);
  index_[name] = names_.size();
  names_.push_back(name);
  tensors_.push_back(t);
  trainable_.push_back(trainable);
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("param '" + name + "' not found");
  return tensors_[it->second];
}

bool ParamStore::trainable(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("param '" + name + "' not found");
  return trainable_[it->second];
}

void ParamStore::zero_grads() {
  for (size_t i = 0; i < tensors_.size(); ++i)
    if (trainable_[i]) tensors_[i].zero_grad();
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

}  // namespace sgg
