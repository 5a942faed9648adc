#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pahi/frozen_models.hpp"
#include "pahi/inversion.hpp"
#include "pahi/optim.hpp"
#include "pahi/tensor.hpp"

namespace pahi {

/// Two-layer perceptron: tanh(x W1 + b1) W2 + b2.
struct Mlp {
  Tensor w1, b1, w2, b2;

  /// Glorot-normal hidden layer; output layer scaled by `output_scale`.
  static Mlp seeded(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, double output_scale = 1.0);
  static Mlp zeros(std::size_t in, std::size_t hidden, std::size_t out);

  std::size_t input_dim() const { return w1.shape()[0]; }
  std::size_t hidden_dim() const { return w1.shape()[1]; }
  std::size_t output_dim() const { return w2.shape()[1]; }

  /// x [B, in] -> [B, out]
  Tensor forward(const Tensor& x) const;
  std::vector<NamedParameter> parameters(const std::string& prefix) const;
  Mlp clone() const;
  std::uint64_t hash(std::uint64_t seed) const;
};

struct PredictedNoise {
  Tensor mu;     // [B, d_z] (or [d_z] for a single embedding)
  Tensor rho;    // log sigma
  Tensor sigma;  // exp(rho)
};

/// Prompt-conditional noise distribution: independent heads for mu(c) and
/// rho(c) = log sigma(c).
struct NoisePredictor {
  Mlp mu_head;
  Mlp rho_head;

  static NoisePredictor seeded(std::size_t embedding_dim, std::size_t hidden, std::size_t noise_dim,
                               std::uint64_t seed);
  static NoisePredictor zeros(std::size_t embedding_dim, std::size_t hidden, std::size_t noise_dim);

  std::size_t embedding_dim() const { return mu_head.input_dim(); }
  std::size_t noise_dim() const { return mu_head.output_dim(); }
  std::vector<NamedParameter> parameters() const;
  NoisePredictor clone() const;
  std::uint64_t hash() const;
};

/// Accepts one embedding [d_e] or a batch [B, d_e].
PredictedNoise predict_noise_params(const NoisePredictor& predictor, const Tensor& embeddings);

/// Reconstructs the prompt embedding from a sampled noise vector.
struct EmbeddingDecoder {
  Mlp net;

  static EmbeddingDecoder seeded(std::size_t noise_dim, std::size_t hidden, std::size_t embedding_dim,
                                 std::uint64_t seed);
  std::vector<NamedParameter> parameters() const { return net.parameters("decoder."); }
  EmbeddingDecoder clone() const { return {net.clone()}; }
  std::uint64_t hash() const { return net.hash(0xdec0de); }
};

/// KL(N(mu, diag sigma^2) || N(0, I)) = 0.5 sum(sigma^2 + mu^2 - 1 - 2 ln sigma),
/// summed over every element. Throws on non-positive sigma.
Tensor kl_to_standard(const Tensor& mu, const Tensor& sigma);
double kl_to_standard(std::span<const double> mu, std::span<const double> sigma);

struct PretrainTerms {
  Tensor total;  // kl_weight * kl + recon_weight * mse
  double kl = 0.0;   // mean over the batch of the per-prompt KL
  double mse = 0.0;  // mean over batch and embedding dimensions
};

/// One-sample pretraining objective: KL of the predicted distribution to
/// N(0, I) plus the mean-squared error between each embedding and the
/// decoder's reconstruction from mu(c) + sigma(c) * eps.
PretrainTerms pretrain_loss(const NoisePredictor& predictor, const EmbeddingDecoder& decoder,
                            const Tensor& embeddings, const Tensor& eps, double kl_weight = 1.0,
                            double recon_weight = 1.0, SigmaConvention convention = SigmaConvention::stddev);

struct PretrainConfig {
  long long steps = 1000;
  std::size_t batch = 32;
  double base_lr = 3e-3;
  double floor_lr = 1e-5;
  long long warmup_steps = 100;
  double kl_weight = 1.0;
  double recon_weight = 1.0;
  SigmaConvention convention = SigmaConvention::stddev;
};

struct PretrainStep {
  long long step = 0;
  double kl = 0.0;
  double mse = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

struct PretrainReport {
  std::vector<PretrainStep> steps;
  double initial_mse = 0.0;
  double initial_kl_per_dim = 0.0;
  double final_mse = 0.0;
  double final_kl_per_dim = 0.0;  // mean over training prompts of KL / d_z
};

/// Minimizes the pretraining objective over predictor and decoder in place.
PretrainReport pretrain(NoisePredictor& predictor, EmbeddingDecoder& decoder, const PromptTable& prompts,
                        const PretrainConfig& config, std::uint64_t seed);

struct PahiConfig {
  long long steps = 5000;
  std::size_t batch = 32;
  double base_lr = 3e-3;
  double floor_lr = 1e-5;
  long long warmup_steps = 200;
  Pairing pairing = Pairing::common_random_numbers;
  long long eval_every = 250;
  std::size_t patience = 5;
  std::size_t validation_samples = 8;
  SigmaConvention convention = SigmaConvention::stddev;
};

struct PahiResult {
  NoisePredictor best;
  std::vector<TraceRow> trace;
  long long best_step = 0;
  double best_validation_loss = 0.0;
  long long steps_run = 0;
  bool stopped_early = false;
  std::optional<std::string> warning;
};

/// Per-prompt preference loss for a batch with the candidate drawn from the
/// predictor's distribution.
Tensor pahi_loss(const NoisePredictor& predictor, const FrozenGenerator& generator, const Scorer& scorer,
                 const PreferenceBatch& batch, SigmaConvention convention = SigmaConvention::stddev);

/// Adam over the predictor only, with early stopping on the mean validation
/// loss across `validation_scorers` (the training scorer when empty). Returns
/// the best-validation predictor; the input predictor is not modified.
PahiResult pahi_train(const NoisePredictor& predictor, const FrozenGenerator& generator, const Scorer& scorer,
                      const PromptTable& prompts, const PahiConfig& config, std::uint64_t seed,
                      std::span<const Scorer> validation_scorers = {});

/// Predictor pass, one reparameterized sample, one generator pass.
Tensor pahi_infer(const NoisePredictor& predictor, const FrozenGenerator& generator, const Tensor& embedding,
                  const Tensor& eps, SigmaConvention convention = SigmaConvention::stddev);

}  // namespace pahi
