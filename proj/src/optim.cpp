#include "pahi/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace pahi {

Adam::Adam(std::vector<NamedParameter> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    state_.m.emplace_back(p.tensor.size(), 0.0);
    state_.v.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::step(double lr) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.push_back(p.tensor.grad());
  adam_step(params_, grads, state_, config_, lr);
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void adam_step(std::vector<NamedParameter>& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               const AdamConfig& config, double lr) {
  if (!(lr >= 0.0)) throw std::invalid_argument("adam_step: learning rate must be non-negative");
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p].size() != params[p].tensor.size() || state.m[p].size() != grads[p].size()) {
      throw ShapeError("adam_step: gradient size mismatch for parameter '" + params[p].name + "'");
    }
    for (double g : grads[p]) {
      if (std::isnan(g)) throw DomainError("adam_step: NaN gradient in parameter '" + params[p].name + "'");
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].tensor.mutable_data();
    auto& m = state.m[p];
    auto& v = state.v[p];
    const auto& g = grads[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      values[i] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

double lr_at(long long step, double base_lr, long long warmup_steps, double floor_lr) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step " + std::to_string(step));
  if (warmup_steps < 1) throw std::invalid_argument("lr_at: warmup_steps must be >= 1");
  if (!(floor_lr >= 0.0 && floor_lr <= base_lr)) {
    throw std::invalid_argument("lr_at: need 0 <= floor_lr <= base_lr");
  }
  if (step >= warmup_steps) return base_lr;
  const double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
  return floor_lr + (base_lr - floor_lr) * frac;
}

}  // namespace pahi
