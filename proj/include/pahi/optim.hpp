#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pahi/tensor.hpp"

namespace pahi {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Per-parameter first/second moment buffers plus the shared step counter.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Bias-corrected Adam over a fixed parameter list. Reads each parameter's
/// accumulated grad() and updates its values in place.
class Adam {
 public:
  explicit Adam(std::vector<NamedParameter> params, AdamConfig config = {});

  void step(double lr);
  void zero_grad();

  const AdamState& state() const { return state_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }

 private:
  std::vector<NamedParameter> params_;
  AdamConfig config_;
  AdamState state_;
};

/// Single Adam update from explicit gradients; the free-function form used
/// by the class above. Throws on NaN gradients, naming the parameter.
void adam_step(std::vector<NamedParameter>& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               const AdamConfig& config, double lr);

/// Linear warm-up from floor_lr at step 0 to base_lr at warmup_steps, then
/// constant.
double lr_at(long long step, double base_lr, long long warmup_steps, double floor_lr);

}  // namespace pahi
