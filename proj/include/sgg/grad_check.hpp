#pragma once

#include <functional>
#include <vector>

#include "sgg/tensor.hpp"

namespace sgg {

struct GradCheckOptions {
  double eps = 1e-5;
  // Probe at most this many coordinates per tensor (<=0: all), chosen
  // deterministically from `seed`.
  int max_coords_per_tensor = 0;
  uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int probed = 0;
};

// Central finite differences against reverse-mode gradients. `fn` must
// rebuild the graph from the given leaves on every call and be deterministic
// (verified by a repeated evaluation; mismatch -> ContractError). Leaf values
// are restored afterwards. Relative error uses max(|analytic|, |numeric|,
// 1e-8) as denominator.
GradCheckResult grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> leaves,
                           const GradCheckOptions& opts = {});

}  // namespace sgg
