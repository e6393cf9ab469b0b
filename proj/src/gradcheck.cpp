#include "subformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace subformer {

GradCheckResult grad_check(const std::function<Tensor()>& fn, std::span<Tensor> inputs, double h) {
  Tape& tape = Tape::current();
  tape.clear();
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor loss = fn();
  std::vector<std::vector<double>> analytic;
  if (loss.requires_grad()) {
    tape.backward(loss);
  }
  for (Tensor& t : inputs) {
    auto g = t.has_grad() ? t.grad() : std::span<const double>{};
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
  }
  tape.clear();

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto values = inputs[ti].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      auto at = [&](double offset) {
        values[i] = original + offset;
        return fn().item();
      };
      // Sixth-order central difference.
      const double numeric =
          (45.0 * (at(h) - at(-h)) - 9.0 * (at(2.0 * h) - at(-2.0 * h)) + (at(3.0 * h) - at(-3.0 * h))) / (60.0 * h);
      values[i] = original;
      const double a = analytic[ti][i];
      const double diff = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      result.max_absolute_error = std::max(result.max_absolute_error, diff);
      result.max_relative_error = std::max(result.max_relative_error, diff / denom);
      ++result.checked;
    }
  }
  for (Tensor& t : inputs) t.zero_grad();
  return result;
}

}  // namespace subformer
