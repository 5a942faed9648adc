#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pahi/frozen_models.hpp"
#include "pahi/rng.hpp"
#include "pahi/tensor.hpp"

namespace pahi {

/// How sigma enters the sample. `stddev` draws mu + sigma * eps (covariance
/// diag(sigma^2)); `squared` draws mu + sigma^2 * eps.
enum class SigmaConvention { stddev, squared };

/// `common_random_numbers` reuses the candidate eps as the baseline noise.
enum class Pairing { common_random_numbers, independent };

/// Learnable diagonal Gaussian over noise space; sigma = exp(rho).
struct NoiseDistribution {
  Tensor mu;   // [d]
  Tensor rho;  // [d]

  /// mu = 0, rho = 0, both trainable.
  static NoiseDistribution standard(std::size_t dim);
  static NoiseDistribution from_values(std::vector<double> mu, std::vector<double> rho);

  std::size_t dim() const { return mu.size(); }
  std::vector<double> sigma() const;
  NoiseDistribution clone() const;
};

/// mu + s(rho) * eps with s = exp(rho) or exp(2 rho) by convention.
/// mu/rho may be a single row [d] (tiled over the batch) or per-sample [B, d];
/// eps is [d] or [B, d].
Tensor sample_reparameterized(const Tensor& mu, const Tensor& rho, const Tensor& eps,
                              SigmaConvention convention = SigmaConvention::stddev);
Tensor sample_reparameterized(const NoiseDistribution& dist, const Tensor& eps,
                              SigmaConvention convention = SigmaConvention::stddev);

/// -log(e^{s'} / (e^s + e^{s'})) = softplus(s - s').
double preference_pair_loss(double s, double s_prime);
/// Elementwise over matching shapes; differentiable in both.
Tensor preference_pair_loss(const Tensor& s, const Tensor& s_prime);

/// One Monte Carlo batch of the pairwise objective.
struct PreferenceBatch {
  std::vector<Prompt> prompts;
  Tensor baseline;       // [B, d_z], x_T ~ N(0, I)
  Tensor candidate_eps;  // [B, d_z], eps' ~ N(0, I)
  Pairing pairing = Pairing::common_random_numbers;
};

/// Draws `batch` prompts uniformly (with replacement) from `pool`.
PreferenceBatch draw_preference_batch(std::span<const Prompt> pool, std::size_t batch, std::size_t noise_dim,
                                      Pairing pairing, Rng& rng);
/// Every prompt in `prompts` repeated `samples_per_prompt` times, with
/// independent draws on the two legs.
PreferenceBatch fixed_preference_batch(std::span<const Prompt> prompts, std::size_t samples_per_prompt,
                                       std::size_t noise_dim, Rng& rng);

/// Mean softplus(s(baseline) - s(candidate)); the baseline leg is detached.
Tensor preference_loss(const FrozenGenerator& generator, const Scorer& scorer, std::span<const Prompt> prompts,
                       const Tensor& baseline_noise, const Tensor& candidate_noise);

Tensor hi_loss(const NoiseDistribution& dist, const FrozenGenerator& generator, const Scorer& scorer,
               const PreferenceBatch& batch, SigmaConvention convention = SigmaConvention::stddev);

struct TraceRow {
  long long step = 0;
  std::string split;   // "train" or "validation"
  std::string scorer;  // scorer name, or "mean" for the early-stopping average
  double loss = 0.0;
  double lr = 0.0;
};

struct HiConfig {
  long long steps = 2000;
  std::size_t batch = 32;
  double base_lr = 0.05;
  double floor_lr = 1e-5;
  long long warmup_steps = 200;
  Pairing pairing = Pairing::common_random_numbers;
  long long eval_every = 250;
  std::size_t validation_samples = 8;
  SigmaConvention convention = SigmaConvention::stddev;
};

struct HiResult {
  NoiseDistribution distribution;
  std::vector<TraceRow> trace;
  long long steps_run = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam over (mu, rho) from the standard distribution. Validation rows are
/// logged every `eval_every` steps against `validation_scorers` (none logged
/// when the list or the validation split is empty).
HiResult hi_optimize(const FrozenGenerator& generator, const Scorer& scorer, const PromptTable& prompts,
                     const HiConfig& config, std::uint64_t seed,
                     std::span<const Scorer> validation_scorers = {});

}  // namespace pahi
