#pragma once

#include <functional>
#include <span>

#include "subformer/tensor.hpp"

namespace subformer {

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t checked = 0;  // number of scalar entries compared
};

// Compares reverse-mode gradients of the scalar `fn` against sixth-order
// central differences (steps +-h, +-2h, +-3h) for every entry of every tensor
// in `inputs`. The relative error of one entry is |a - n| / max(|a|, |n|, 1e-8).
//
// `fn` must recompute its value from the current contents of `inputs`; the
// tensors are perturbed in place and restored afterwards. Clears the current
// tape and the gradients of `inputs`.
GradCheckResult grad_check(const std::function<Tensor()>& fn, std::span<Tensor> inputs, double h = 2e-3);

}  // namespace subformer
