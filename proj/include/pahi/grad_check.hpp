#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "pahi/tensor.hpp"

namespace pahi {

struct GradCheckFailure {
  std::size_t param = 0;
  std::size_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<GradCheckFailure> failures;
  bool ok() const { return failures.empty(); }
};

/// Relative error used by grad_check: |a - n| / max(|a|, |n|, 1).
/// The unit floor turns it into an absolute error for partials near zero,
/// where central differences cannot resolve relative accuracy.
double gradient_rel_error(double analytic, double numeric);

/// Compares backward() of `program` against central differences
/// (f(x+h) - f(x-h)) / 2h for every coordinate of every parameter.
/// Parameter values are restored afterward; failures are reported, not thrown.
GradCheckReport grad_check(const std::function<Tensor()>& program, std::vector<Tensor> params, double h = 1e-5,
                           double tol = 1e-5);

}  // namespace pahi
