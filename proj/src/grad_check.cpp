#include "pahi/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pahi {

double gradient_rel_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / scale;
}

GradCheckReport grad_check(const std::function<Tensor()>& program, std::vector<Tensor> params, double h, double tol) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step h must be positive");

  zero_grads(params);
  program().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.push_back(p.grad());
  zero_grads(params);

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double up = program().item();
      values[i] = original - h;
      const double down = program().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double err = gradient_rel_error(analytic[p][i], numeric);
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.checked;
      if (!(err < tol)) report.failures.push_back({p, i, analytic[p][i], numeric, err});
    }
  }
  return report;
}

}  // namespace pahi
