#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pahi/frozen_models.hpp"
#include "pahi/inversion.hpp"
#include "pahi/predictor.hpp"
#include "pahi/tensor.hpp"

namespace pahi {

enum class CandidateKind { standard, distribution, predictor };

/// Where the candidate leg's noise comes from.
class Candidate {
 public:
  static Candidate standard();
  static Candidate distribution(const NoiseDistribution& dist);
  static Candidate predictor(const NoisePredictor& predictor);

  /// eps [B, d_z], embeddings [B, d_e] -> candidate noise [B, d_z]. Never
  /// records a tape.
  Tensor sample(const Tensor& eps, const Tensor& embeddings, SigmaConvention convention) const;

  CandidateKind kind() const { return kind_; }

 private:
  CandidateKind kind_ = CandidateKind::standard;
  NoiseDistribution distribution_;
  NoisePredictor predictor_;
};

struct EvalOptions {
  std::size_t samples_per_prompt = 8;
  SigmaConvention convention = SigmaConvention::stddev;
  /// Feed the baseline noise into the candidate leg instead of an independent
  /// draw. Only meant for checking the strict-win convention.
  bool shared_stream = false;
};

/// Paired images for every (prompt, sample), prompt-major.
struct EvalDraws {
  std::vector<Prompt> prompts;  // one entry per comparison
  Tensor baseline_images;       // [N, d_y]
  Tensor candidate_images;      // [N, d_y]
};

EvalDraws draw_eval_pairs(const Candidate& candidate, const FrozenGenerator& generator,
                          std::span<const Prompt> prompts, const EvalOptions& options, std::uint64_t seed);

struct ScorerWinRate {
  std::string scorer;
  double win_rate = 0.0;
  std::size_t wins = 0;
  std::size_t comparisons = 0;
  double mean_baseline_score = 0.0;
  double mean_candidate_score = 0.0;
};

struct EvalReport {
  std::uint64_t seed = 0;
  std::size_t prompt_count = 0;
  std::size_t samples_per_prompt = 0;
  std::vector<ScorerWinRate> scorers;

  const ScorerWinRate& at(const std::string& scorer) const;
};

/// Fraction of pairs with candidate strictly above baseline.
ScorerWinRate win_rate_from_scores(std::string scorer, std::span<const double> baseline,
                                   std::span<const double> candidate);

EvalReport evaluate_win_rate(const Candidate& candidate, const FrozenGenerator& generator,
                             std::span<const Scorer> scorers, std::span<const Prompt> prompts,
                             const EvalOptions& options, std::uint64_t seed);

/// Scores one set of draws with every scorer.
EvalReport score_eval_draws(const EvalDraws& draws, std::span<const Scorer> scorers, std::size_t prompt_count,
                            std::size_t samples_per_prompt, std::uint64_t seed);

struct AggregateEntry {
  std::string scorer;
  double mean = 0.0;
  std::optional<double> stddev;  // sample std, absent for a single run
};

struct AggregateReport {
  std::size_t run_count = 0;
  std::vector<AggregateEntry> scorers;

  const AggregateEntry& at(const std::string& scorer) const;
};

AggregateReport aggregate_runs(std::span<const EvalReport> reports);

/// Central `level` interval of the win rate under Binomial(n, p), from exact
/// quantiles.
struct BinomialBand {
  double lower = 0.0;
  double upper = 0.0;
  bool contains(double rate) const { return rate >= lower && rate <= upper; }
};
BinomialBand binomial_band(std::size_t n, double p = 0.5, double level = 0.99);
/// P(X >= successes) for X ~ Binomial(n, p).
double binomial_upper_tail(std::size_t successes, std::size_t n, double p = 0.5);

struct BenchOptions {
  std::size_t reps = 1000;
  std::size_t warmup = 10;
  std::size_t blocks = 100;
  SigmaConvention convention = SigmaConvention::stddev;
};

struct TimingReport {
  double plain_ms = 0.0;      // per image, plain one-step sampling
  double augmented_ms = 0.0;  // per image, predictor pass + one-step sampling
  double overhead = 0.0;      // augmented / plain - 1
  std::size_t reps = 0;
  std::size_t batch_size = 1;
  std::size_t prompt_count = 0;
};

/// Times batch-size-1 generation cycling over `prompts`. The two arms are
/// interleaved block by block; each arm's figure is the median of its block
/// means. Without a predictor both arms run plain sampling.
TimingReport bench_inference(const FrozenGenerator& generator, const NoisePredictor* predictor,
                             std::span<const Prompt> prompts, const BenchOptions& options, std::uint64_t seed);

}  // namespace pahi
