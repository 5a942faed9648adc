#include "pahi/inversion.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "pahi/ops.hpp"
#include "pahi/optim.hpp"

namespace pahi {

NoiseDistribution NoiseDistribution::standard(std::size_t dim) {
  return {Tensor::parameter({dim}, std::vector<double>(dim, 0.0)),
          Tensor::parameter({dim}, std::vector<double>(dim, 0.0))};
}

NoiseDistribution NoiseDistribution::from_values(std::vector<double> mu, std::vector<double> rho) {
  if (mu.size() != rho.size()) throw ShapeError("noise distribution: mu and rho differ in length");
  const std::size_t d = mu.size();
  return {Tensor::parameter({d}, std::move(mu)), Tensor::parameter({d}, std::move(rho))};
}

std::vector<double> NoiseDistribution::sigma() const {
  std::vector<double> out(rho.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(rho.at(i));
  return out;
}

NoiseDistribution NoiseDistribution::clone() const { return from_values(mu.to_vector(), rho.to_vector()); }

Tensor sample_reparameterized(const Tensor& mu, const Tensor& rho, const Tensor& eps, SigmaConvention convention) {
  if (mu.shape() != rho.shape()) {
    throw ShapeError("sample_reparameterized: mu " + shape_string(mu.shape()) + " vs rho " +
                     shape_string(rho.shape()));
  }
  Tensor log_scale = convention == SigmaConvention::stddev ? rho : scale(rho, 2.0);
  Tensor spread = exp(log_scale);
  if (mu.shape() == eps.shape()) return add(mu, multiply(spread, eps));
  if (mu.rank() == 1 && eps.rank() == 2 && eps.shape()[1] == mu.size()) {
    const std::size_t batch = eps.shape()[0];
    return add_row(multiply(tile_rows(spread, batch), eps), mu);
  }
  throw ShapeError("sample_reparameterized: eps " + shape_string(eps.shape()) + " does not match mu " +
                   shape_string(mu.shape()));
}

Tensor sample_reparameterized(const NoiseDistribution& dist, const Tensor& eps, SigmaConvention convention) {
  return sample_reparameterized(dist.mu, dist.rho, eps, convention);
}

double preference_pair_loss(double s, double s_prime) { return softplus_value(s - s_prime); }

Tensor preference_pair_loss(const Tensor& s, const Tensor& s_prime) { return softplus(subtract(s, s_prime)); }

PreferenceBatch draw_preference_batch(std::span<const Prompt> pool, std::size_t batch, std::size_t noise_dim,
                                      Pairing pairing, Rng& rng) {
  if (pool.empty()) throw std::invalid_argument("draw_preference_batch: empty prompt pool");
  if (batch == 0) throw std::invalid_argument("draw_preference_batch: batch must be positive");
  PreferenceBatch out;
  out.pairing = pairing;
  out.prompts.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) out.prompts.push_back(pool[rng.index(pool.size())]);
  out.candidate_eps = rng.normal_tensor({batch, noise_dim});
  out.baseline =
      pairing == Pairing::common_random_numbers ? out.candidate_eps : rng.normal_tensor({batch, noise_dim});
  return out;
}

PreferenceBatch fixed_preference_batch(std::span<const Prompt> prompts, std::size_t samples_per_prompt,
                                       std::size_t noise_dim, Rng& rng) {
  if (prompts.empty()) throw std::invalid_argument("fixed_preference_batch: empty prompt set");
  PreferenceBatch out;
  out.pairing = Pairing::independent;
  for (const auto& p : prompts)
    for (std::size_t k = 0; k < samples_per_prompt; ++k) out.prompts.push_back(p);
  const std::size_t batch = out.prompts.size();
  out.baseline = rng.normal_tensor({batch, noise_dim});
  out.candidate_eps = rng.normal_tensor({batch, noise_dim});
  return out;
}

Tensor preference_loss(const FrozenGenerator& generator, const Scorer& scorer, std::span<const Prompt> prompts,
                       const Tensor& baseline_noise, const Tensor& candidate_noise) {
  if (prompts.empty()) throw std::invalid_argument("preference_loss: empty batch");
  if (baseline_noise.shape() != candidate_noise.shape()) {
    throw ShapeError("preference_loss: baseline " + shape_string(baseline_noise.shape()) + " vs candidate " +
                     shape_string(candidate_noise.shape()));
  }
  Tensor s = build_pipeline_score(generator, scorer, baseline_noise.detach(), prompts);
  Tensor s_prime = build_pipeline_score(generator, scorer, candidate_noise, prompts);
  return mean(preference_pair_loss(s, s_prime));
}

Tensor hi_loss(const NoiseDistribution& dist, const FrozenGenerator& generator, const Scorer& scorer,
               const PreferenceBatch& batch, SigmaConvention convention) {
  Tensor candidate = sample_reparameterized(dist, batch.candidate_eps, convention);
  return preference_loss(generator, scorer, batch.prompts, batch.baseline, candidate);
}

namespace {

std::string describe(const NoiseDistribution& dist) {
  double mu_norm = 0.0, rho_max = -1e300;
  for (double v : dist.mu.data()) mu_norm += v * v;
  for (double v : dist.rho.data()) rho_max = std::max(rho_max, v);
  std::ostringstream out;
  out << "|mu| = " << std::sqrt(mu_norm) << ", max rho = " << rho_max;
  return out.str();
}

}  // namespace

HiResult hi_optimize(const FrozenGenerator& generator, const Scorer& scorer, const PromptTable& prompts,
                     const HiConfig& config, std::uint64_t seed, std::span<const Scorer> validation_scorers) {
  if (config.steps < 0) throw std::invalid_argument("hi_optimize: negative step count");
  const auto train = prompts.train_prompts();
  if (train.empty() && config.steps > 0) throw std::invalid_argument("hi_optimize: empty training split");

  HiResult result{NoiseDistribution::standard(generator.noise_dim()), {}, 0};
  NoiseDistribution& dist = result.distribution;
  Adam adam({{"mu", dist.mu}, {"rho", dist.rho}});
  Rng rng(derive_seed(seed, "hi/batches"));

  const auto validation = prompts.validation_prompts();
  const bool validate = !validation.empty() && !validation_scorers.empty() && config.eval_every > 0;
  PreferenceBatch validation_batch;
  if (validate) {
    Rng vrng(derive_seed(seed, "hi/validation"));
    validation_batch = fixed_preference_batch(validation, config.validation_samples, generator.noise_dim(), vrng);
  }
  auto log_validation = [&](long long step, double lr) {
    double total = 0.0;
    for (const auto& s : validation_scorers) {
      const double loss = hi_loss(dist, generator, s, validation_batch, config.convention).item();
      result.trace.push_back({step, "validation", s.name(), loss, lr});
      total += loss;
    }
    result.trace.push_back({step, "validation", "mean", total / static_cast<double>(validation_scorers.size()), lr});
  };

  for (long long step = 0; step < config.steps; ++step) {
    const double lr = lr_at(step, config.base_lr, config.warmup_steps, config.floor_lr);
    auto batch = draw_preference_batch(train, config.batch, generator.noise_dim(), config.pairing, rng);
    adam.zero_grad();
    Tensor loss;
    try {
      loss = hi_loss(dist, generator, scorer, batch, config.convention);
      if (!std::isfinite(loss.item())) throw DomainError("non-finite loss");
      loss.backward();
      adam.step(lr);
    } catch (const DomainError& e) {
      throw TrainingDiverged("hi_optimize: " + std::string(e.what()) + " at step " + std::to_string(step) + " (" +
                             describe(dist) + ")");
    }
    result.trace.push_back({step, "train", scorer.name(), loss.item(), lr});
    result.steps_run = step + 1;
    if (validate && (step + 1) % config.eval_every == 0) log_validation(step + 1, lr);
  }
  return result;
}

}  // namespace pahi
