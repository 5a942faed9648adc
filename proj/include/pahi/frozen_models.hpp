#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pahi/tensor.hpp"

namespace pahi {

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

struct Prompt {
  std::string id;
  std::vector<double> embedding;  // unit norm
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
};

/// Synthetic stand-in for text-encoder output: seeded unit vectors sharing a
/// common direction (real text embeddings are strongly anisotropic).
struct PromptTable {
  std::size_t embedding_dim = 0;
  std::vector<Prompt> prompts;
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;

  std::vector<Prompt> select(std::span<const std::size_t> indices) const;
  std::vector<Prompt> train_prompts() const { return select(train); }
  std::vector<Prompt> validation_prompts() const { return select(validation); }
  std::vector<Prompt> test_prompts() const { return select(test); }
  std::uint64_t hash() const;
};

/// `coherence` in [0, 1): squared weight of the shared direction before
/// normalization. 0 gives isotropic embeddings.
PromptTable make_prompt_table(std::size_t n, std::size_t embedding_dim, std::uint64_t seed, SplitCounts split,
                              double coherence = 0.8);

/// Stacks prompt embeddings into a [B, d_e] matrix.
Tensor embedding_matrix(std::span<const Prompt> prompts);

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

struct VarianceSchedule {
  double alpha = 1.0;  // alpha at the single sampling step, in (0, 1]
};

enum class PredictorKind { linear, mlp };

/// Frozen epsilon-prediction network, eps(x, e).
///   linear: x * A + e * B + b
///   mlp:    tanh(x * W1x + e * W1e + b1) * W2 + b2
class EpsilonPredictor {
 public:
  static EpsilonPredictor linear(Tensor noise_weight, Tensor prompt_weight, Tensor bias);
  static EpsilonPredictor zero(std::size_t noise_dim, std::size_t embedding_dim);
  static EpsilonPredictor seeded_linear(std::size_t noise_dim, std::size_t embedding_dim, std::uint64_t seed,
                                        double weight_scale = 0.5);
  static EpsilonPredictor seeded_mlp(std::size_t noise_dim, std::size_t embedding_dim, std::size_t hidden,
                                     std::uint64_t seed);

  /// noise [B, d_z], embeddings [B, d_e] -> [B, d_z]
  Tensor predict(const Tensor& noise, const Tensor& embeddings) const;

  PredictorKind kind() const { return kind_; }
  std::size_t noise_dim() const { return noise_dim_; }
  std::size_t embedding_dim() const { return embedding_dim_; }
  const std::vector<std::pair<std::string, Tensor>>& weights() const { return weights_; }
  std::uint64_t hash() const;

 private:
  EpsilonPredictor() = default;
  const Tensor& weight(const char* name) const;

  PredictorKind kind_ = PredictorKind::linear;
  std::size_t noise_dim_ = 0;
  std::size_t embedding_dim_ = 0;
  std::vector<std::pair<std::string, Tensor>> weights_;
};

/// One-step denoiser: image = (x - sqrt(1 - alpha) * eps(x, e)) / sqrt(alpha).
/// The image lives in the same space as the noise, so d_y == d_z.
class FrozenGenerator {
 public:
  FrozenGenerator(EpsilonPredictor predictor, VarianceSchedule schedule);

  std::size_t noise_dim() const { return predictor_.noise_dim(); }
  std::size_t image_dim() const { return predictor_.noise_dim(); }
  std::size_t embedding_dim() const { return predictor_.embedding_dim(); }
  const EpsilonPredictor& predictor() const { return predictor_; }
  const VarianceSchedule& schedule() const { return schedule_; }
  std::uint64_t hash() const;

 private:
  EpsilonPredictor predictor_;
  VarianceSchedule schedule_;
};

/// Accepts a single sample ([d_z], [d_e]) or a batch ([B, d_z], [B, d_e]);
/// the result has the same rank as `noise`.
Tensor denoise_one_step(const FrozenGenerator& generator, const Tensor& noise, const Tensor& embeddings);

// ---------------------------------------------------------------------------
// Scorers
// ---------------------------------------------------------------------------

enum class ScorerKind { quadratic, bilinear };

/// Prompt-dependent target t(c) = offset + (e(c) - center) W, W of shape
/// [d_e, d_y]. An empty center means zero.
struct TargetMap {
  double offset = 0.0;
  Tensor weight;  // [d_e, d_y]
  std::vector<double> center;

  std::vector<double> target(std::span<const double> embedding) const;
  static TargetMap constant(std::size_t embedding_dim, std::size_t image_dim, double value);
  static TargetMap seeded(std::size_t embedding_dim, std::size_t image_dim, double offset, double spread,
                          std::uint64_t seed, std::vector<double> center = {});
};

/// Mean embedding over every prompt in the table.
std::vector<double> mean_embedding(const PromptTable& table);

/// Frozen preference model, higher is better.
///   quadratic: -gamma * ||image - t(c)||^2, targets looked up by prompt id
///   bilinear:  <image * P, e(c) * Q> / temperature
class Scorer {
 public:
  static Scorer quadratic(std::string name, std::map<std::string, std::vector<double>> targets, double gamma);
  static Scorer bilinear(std::string name, Tensor image_projection, Tensor prompt_projection, double temperature);

  /// images [B, d_y] -> scores [B, 1]. Gradients reach the images only.
  Tensor score(const Tensor& images, std::span<const Prompt> prompts) const;

  const std::string& name() const { return name_; }
  ScorerKind kind() const { return kind_; }
  const std::vector<double>& target(const std::string& prompt_id) const;
  std::uint64_t hash() const;

 private:
  Scorer() = default;

  std::string name_;
  ScorerKind kind_ = ScorerKind::quadratic;
  std::map<std::string, std::vector<double>> targets_;
  double gamma_ = 1.0;
  Tensor image_projection_;   // [d_y, k]
  Tensor prompt_projection_;  // [d_e, k]
  double temperature_ = 1.0;
};

/// Scalar score of one image for one prompt.
double score_image(const Scorer& scorer, std::span<const double> image, const Prompt& prompt);

/// Quadratic scorer with t(c) from `targets` for every prompt in the table.
Scorer make_quadratic_scorer(std::string name, const PromptTable& table, const TargetMap& targets, double gamma);

/// Bilinear scorer whose P Q^T tracks `correlation * reference.weight^T` plus
/// an independent seeded component; correlation 0 gives an unrelated scorer.
Scorer make_bilinear_scorer(std::string name, std::size_t image_dim, std::size_t embedding_dim, std::size_t rank,
                            double temperature, double correlation, const TargetMap& reference, std::uint64_t seed);

/// s(x, c) = score(denoise(x, e(c)), c) for a batch; returns [B, 1].
Tensor build_pipeline_score(const FrozenGenerator& generator, const Scorer& scorer, const Tensor& noise,
                            std::span<const Prompt> prompts);

}  // namespace pahi
