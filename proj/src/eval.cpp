#include "pahi/eval.hpp"

#include <algorithm>
#include <boost/math/distributions/binomial.hpp>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "pahi/ops.hpp"
#include "pahi/rng.hpp"

namespace pahi {

namespace {

Mlp frozen_mlp(const Mlp& m) { return {m.w1.detach(), m.b1.detach(), m.w2.detach(), m.b2.detach()}; }

std::vector<double> column(const Tensor& scores) {
  std::vector<double> out(scores.data().begin(), scores.data().end());
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Candidate Candidate::standard() { return {}; }

Candidate Candidate::distribution(const NoiseDistribution& dist) {
  Candidate c;
  c.kind_ = CandidateKind::distribution;
  c.distribution_ = {dist.mu.detach(), dist.rho.detach()};
  return c;
}

Candidate Candidate::predictor(const NoisePredictor& predictor) {
  Candidate c;
  c.kind_ = CandidateKind::predictor;
  c.predictor_ = {frozen_mlp(predictor.mu_head), frozen_mlp(predictor.rho_head)};
  return c;
}

Tensor Candidate::sample(const Tensor& eps, const Tensor& embeddings, SigmaConvention convention) const {
  switch (kind_) {
    case CandidateKind::standard:
      return eps;
    case CandidateKind::distribution:
      return sample_reparameterized(distribution_, eps, convention);
    case CandidateKind::predictor: {
      auto noise = predict_noise_params(predictor_, embeddings);
      return sample_reparameterized(noise.mu, noise.rho, eps, convention);
    }
  }
  throw std::logic_error("unknown candidate kind");
}

EvalDraws draw_eval_pairs(const Candidate& candidate, const FrozenGenerator& generator,
                          std::span<const Prompt> prompts, const EvalOptions& options, std::uint64_t seed) {
  if (prompts.empty()) throw std::invalid_argument("evaluate_win_rate: empty prompt set");
  if (options.samples_per_prompt == 0) throw std::invalid_argument("evaluate_win_rate: samples_per_prompt is 0");

  EvalDraws draws;
  for (const auto& p : prompts) {
    for (std::size_t s = 0; s < options.samples_per_prompt; ++s) draws.prompts.push_back(p);
  }
  const std::size_t n = draws.prompts.size();
  const std::size_t d = generator.noise_dim();

  // Separate streams keep the two legs independent.
  Rng baseline_rng(derive_seed(seed, "eval/baseline"));
  Rng candidate_rng(derive_seed(seed, "eval/candidate"));
  Tensor baseline = baseline_rng.normal_tensor({n, d});
  Tensor eps = options.shared_stream ? baseline : candidate_rng.normal_tensor({n, d});

  Tensor emb = embedding_matrix(draws.prompts);
  draws.baseline_images = denoise_one_step(generator, baseline, emb);
  draws.candidate_images = denoise_one_step(generator, candidate.sample(eps, emb, options.convention), emb);
  return draws;
}

const ScorerWinRate& EvalReport::at(const std::string& scorer) const {
  for (const auto& s : scorers) {
    if (s.scorer == scorer) return s;
  }
  throw std::out_of_range("eval report has no scorer " + scorer);
}

ScorerWinRate win_rate_from_scores(std::string scorer, std::span<const double> baseline,
                                   std::span<const double> candidate) {
  if (baseline.size() != candidate.size()) throw std::invalid_argument("win_rate: leg sizes differ");
  if (baseline.empty()) throw std::invalid_argument("win_rate: no comparisons");
  ScorerWinRate r;
  r.scorer = std::move(scorer);
  r.comparisons = baseline.size();
  for (std::size_t i = 0; i < baseline.size(); ++i) {
    if (candidate[i] > baseline[i]) ++r.wins;
    r.mean_baseline_score += baseline[i];
    r.mean_candidate_score += candidate[i];
  }
  const auto n = static_cast<double>(r.comparisons);
  r.win_rate = static_cast<double>(r.wins) / n;
  r.mean_baseline_score /= n;
  r.mean_candidate_score /= n;
  return r;
}

EvalReport score_eval_draws(const EvalDraws& draws, std::span<const Scorer> scorers, std::size_t prompt_count,
                            std::size_t samples_per_prompt, std::uint64_t seed) {
  if (scorers.empty()) throw std::invalid_argument("evaluate_win_rate: no scorers");
  EvalReport report{seed, prompt_count, samples_per_prompt, {}};
  for (const auto& scorer : scorers) {
    auto base = column(scorer.score(draws.baseline_images, draws.prompts));
    auto cand = column(scorer.score(draws.candidate_images, draws.prompts));
    report.scorers.push_back(win_rate_from_scores(scorer.name(), base, cand));
  }
  return report;
}

EvalReport evaluate_win_rate(const Candidate& candidate, const FrozenGenerator& generator,
                             std::span<const Scorer> scorers, std::span<const Prompt> prompts,
                             const EvalOptions& options, std::uint64_t seed) {
  auto draws = draw_eval_pairs(candidate, generator, prompts, options, seed);
  return score_eval_draws(draws, scorers, prompts.size(), options.samples_per_prompt, seed);
}

const AggregateEntry& AggregateReport::at(const std::string& scorer) const {
  for (const auto& s : scorers) {
    if (s.scorer == scorer) return s;
  }
  throw std::out_of_range("aggregate report has no scorer " + scorer);
}

AggregateReport aggregate_runs(std::span<const EvalReport> reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate_runs: no reports");
  const auto& first = reports.front();
  for (const auto& r : reports) {
    bool same = r.scorers.size() == first.scorers.size();
    for (std::size_t i = 0; same && i < r.scorers.size(); ++i) same = r.scorers[i].scorer == first.scorers[i].scorer;
    if (!same) throw std::invalid_argument("aggregate_runs: reports cover different scorer sets");
    if (r.prompt_count != first.prompt_count) {
      throw std::invalid_argument("aggregate_runs: reports cover different prompt sets");
    }
  }

  AggregateReport out;
  out.run_count = reports.size();
  const auto n = static_cast<double>(reports.size());
  for (std::size_t i = 0; i < first.scorers.size(); ++i) {
    AggregateEntry e;
    e.scorer = first.scorers[i].scorer;
    for (const auto& r : reports) e.mean += r.scorers[i].win_rate;
    e.mean /= n;
    if (reports.size() >= 2) {
      double ss = 0.0;
      for (const auto& r : reports) ss += (r.scorers[i].win_rate - e.mean) * (r.scorers[i].win_rate - e.mean);
      e.stddev = std::sqrt(ss / (n - 1.0));
    }
    out.scorers.push_back(e);
  }
  return out;
}

BinomialBand binomial_band(std::size_t n, double p, double level) {
  if (n == 0) throw std::invalid_argument("binomial_band: n is 0");
  boost::math::binomial_distribution<double> dist(static_cast<double>(n), p);
  const double tail = 0.5 * (1.0 - level);
  const double lo = boost::math::quantile(dist, tail);
  const double hi = boost::math::quantile(boost::math::complement(dist, tail));
  return {std::floor(lo) / static_cast<double>(n), std::ceil(hi) / static_cast<double>(n)};
}

double binomial_upper_tail(std::size_t successes, std::size_t n, double p) {
  if (successes == 0) return 1.0;
  if (successes > n) return 0.0;
  boost::math::binomial_distribution<double> dist(static_cast<double>(n), p);
  return boost::math::cdf(boost::math::complement(dist, static_cast<double>(successes - 1)));
}

TimingReport bench_inference(const FrozenGenerator& generator, const NoisePredictor* predictor,
                             std::span<const Prompt> prompts, const BenchOptions& options, std::uint64_t seed) {
  if (prompts.empty()) throw std::invalid_argument("bench_inference: empty prompt set");
  if (options.reps < 100) throw std::invalid_argument("bench_inference: need at least 100 timed reps");
  if (options.blocks == 0) throw std::invalid_argument("bench_inference: blocks is 0");

  const std::size_t d = generator.noise_dim();
  std::vector<Tensor> embeddings;
  for (const auto& p : prompts) embeddings.push_back(Tensor::from({1, p.embedding.size()}, p.embedding));
  Rng rng(derive_seed(seed, "bench/noise"));
  const std::size_t total = options.warmup + options.reps;
  std::vector<Tensor> noise;
  for (std::size_t i = 0; i < total; ++i) noise.push_back(rng.normal_tensor({1, d}));

  std::optional<Candidate> augmented;
  if (predictor != nullptr) augmented = Candidate::predictor(*predictor);

  double sink = 0.0;
  // Mean per-image time over reps [begin, end).
  auto run = [&](bool with_predictor, std::size_t begin, std::size_t end) {
    using clock = std::chrono::steady_clock;
    clock::duration elapsed{};
    for (std::size_t i = begin; i < end; ++i) {
      const Tensor& emb = embeddings[i % embeddings.size()];
      const auto start = clock::now();
      Tensor x = with_predictor ? augmented->sample(noise[i], emb, options.convention) : noise[i];
      Tensor image = denoise_one_step(generator, x, emb);
      const auto stop = clock::now();
      sink += image.data()[0];
      elapsed += stop - start;
    }
    return std::chrono::duration<double, std::milli>(elapsed).count() / static_cast<double>(end - begin);
  };

  (void)run(false, 0, options.warmup);
  (void)run(augmented.has_value(), 0, options.warmup);

  // Timed reps are split into short blocks so both arms see the same machine
  // state; the arm that goes first alternates.
  const std::size_t blocks = std::min(options.blocks, options.reps);
  std::vector<double> plain, aug;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t begin = options.warmup + b * options.reps / blocks;
    const std::size_t end = options.warmup + (b + 1) * options.reps / blocks;
    if (b % 2 == 0) {
      plain.push_back(run(false, begin, end));
      aug.push_back(run(augmented.has_value(), begin, end));
    } else {
      aug.push_back(run(augmented.has_value(), begin, end));
      plain.push_back(run(false, begin, end));
    }
  }
  if (std::isnan(sink)) throw DomainError("bench_inference: non-finite image");

  TimingReport r;
  r.plain_ms = median(plain);
  r.augmented_ms = median(aug);
  r.overhead = r.augmented_ms / r.plain_ms - 1.0;
  r.reps = options.reps;
  r.prompt_count = prompts.size();
  return r;
}

}  // namespace pahi
