// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <unistd.h>

#include "pahi/early_stop.hpp"
#include "pahi/eval.hpp"
#include "pahi/experiment.hpp"
#include "pahi/grad_check.hpp"
#include "pahi/inversion.hpp"
#include "pahi/predictor.hpp"
#include "support/random_program.hpp"

using namespace pahi;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Experiment desk() { return build_experiment(load_config(fs::path(PAHI_SOURCE_DIR) / "configs" / "desk.json")); }

// 1. Finite-difference agreement over 100 random programs.
Outcome gradient_integrity() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    auto prog = testing::make_random_program(seed, 16);
    auto report = grad_check([&] { return prog(); }, prog.params(), 1e-5, 1e-5);
    worst = std::max(worst, report.max_rel_error);
  }
  return {worst < 1e-5, fmt("max rel error %.2e over 100 programs", worst)};
}

// 2. Closed-form KL against a Monte Carlo estimate.
Outcome kl_oracle() {
  double worst_z = 0.0;
  for (int pair = 0; pair < 20; ++pair) {
    Rng rng(derive_seed(2024, "kl/pair-" + std::to_string(pair)));
    const std::size_t d = 1 + rng.index(6);
    std::vector<double> mu(d), sigma(d);
    for (std::size_t i = 0; i < d; ++i) {
      mu[i] = rng.normal();
      sigma[i] = std::exp(0.5 * rng.normal());
    }
    const double exact = kl_to_standard(mu, sigma);
    const std::size_t n = 100000;
    double m = 0.0, m2 = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      double lr = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double z = rng.normal();
        const double x = mu[i] + sigma[i] * z;
        lr += -0.5 * z * z - std::log(sigma[i]) + 0.5 * x * x;
      }
      m += lr;
      m2 += lr * lr;
    }
    m /= static_cast<double>(n);
    const double var = (m2 / static_cast<double>(n) - m * m) * static_cast<double>(n) / static_cast<double>(n - 1);
    const double se = std::sqrt(var / static_cast<double>(n));
    worst_z = std::max(worst_z, std::abs(m - exact) / se);
  }
  const double at_origin = kl_to_standard(std::vector<double>(8, 0.0), std::vector<double>(8, 1.0));
  return {worst_z < 3.0 && at_origin == 0.0,
          fmt("worst deviation %.2f SE over 20 pairs, KL(0,1) = %g", worst_z, at_origin)};
}

// 3. HI on A = I, b = 0, alpha = 1 with target 3.
Outcome closed_form_hi() {
  const std::size_t d = 8;
  FrozenGenerator gen(EpsilonPredictor::zero(d, 4), {1.0});
  auto table = make_prompt_table(16, 4, 3, {12, 4, 0});
  auto scorer = make_quadratic_scorer("q", table, TargetMap::constant(4, d, 3.0), 0.01);
  HiConfig cfg;
  cfg.steps = 2000;
  auto r = hi_optimize(gen, scorer, table, cfg, 3);
  double mu_err = 0.0, sigma_max = 0.0;
  for (double m : r.distribution.mu.data()) mu_err = std::max(mu_err, std::abs(m - 3.0));
  for (double s : r.distribution.sigma()) sigma_max = std::max(sigma_max, s);
  return {mu_err < 1e-2 && sigma_max < 0.1, fmt("|mu - t|_inf %.4f, max sigma %.4f", mu_err, sigma_max)};
}

// Shared world for criteria 4 and 5: 16 training prompts with distinct
// targets, 20 held-out test prompts.
struct PerPromptTask {
  PromptTable table = make_prompt_table(36, 8, 7, {16, 0, 20});
  TargetMap targets = TargetMap::seeded(8, 16, 0.5, 3.0, 5, mean_embedding(table));
  Scorer quadratic = make_quadratic_scorer("quadratic", table, targets, 0.01);
  Scorer bilinear = make_bilinear_scorer("bilinear", 16, 8, 4, 1.0, 0.8, targets, 21);
  FrozenGenerator generator{EpsilonPredictor::zero(16, 8), {1.0}};
  NoisePredictor trained = train();
  EvalOptions eval_options = [] {
    EvalOptions o;
    o.samples_per_prompt = 50;
    return o;
  }();

  NoisePredictor train() const {
    auto pred = NoisePredictor::seeded(8, 32, 16, 3);
    auto dec = EmbeddingDecoder::seeded(16, 32, 8, 4);
    (void)pretrain(pred, dec, table, PretrainConfig{}, 9);
    PahiConfig cfg;
    cfg.steps = 8000;
    return pahi_train(pred, generator, quadratic, table, cfg, 11).best;
  }

  EvalReport evaluate(const Candidate& c) const {
    const Scorer scorers[] = {quadratic, bilinear};
    return evaluate_win_rate(c, generator, scorers, table.test_prompts(), eval_options, 101);
  }
};

const PerPromptTask& per_prompt_task() {
  static const PerPromptTask task;
  return task;
}

// 4. Per-prompt oracle and PAHI > single-mu HI > 50% on held-out prompts.
Outcome per_prompt_oracle() {
  const auto& t = per_prompt_task();
  double mu_err = 0.0;
  for (const auto& p : t.table.train_prompts()) {
    auto out = predict_noise_params(t.trained, Tensor::vector(p.embedding));
    const auto& target = t.quadratic.target(p.id);
    for (std::size_t j = 0; j < target.size(); ++j) mu_err = std::max(mu_err, std::abs(out.mu.at(j) - target[j]));
  }
  const auto pahi = t.evaluate(Candidate::predictor(t.trained)).at("quadratic");

  // Best single distribution: trained HI, plus the mean test target at a
  // range of widths (the single mu closest to every held-out target).
  auto hi = hi_optimize(t.generator, t.quadratic, t.table, HiConfig{}, 13);
  double best_single = t.evaluate(Candidate::distribution(hi.distribution)).at("quadratic").win_rate;
  const double hi_rate = best_single;
  std::vector<double> mean_target(16, 0.0);
  const auto test = t.table.test_prompts();
  for (const auto& p : test) {
    const auto& target = t.quadratic.target(p.id);
    for (std::size_t j = 0; j < 16; ++j) mean_target[j] += target[j] / static_cast<double>(test.size());
  }
  for (double s : {0.01, 0.03, 0.1, 0.3, 1.0}) {
    auto dist = NoiseDistribution::from_values(mean_target, std::vector<double>(16, std::log(s)));
    best_single = std::max(best_single, t.evaluate(Candidate::distribution(dist)).at("quadratic").win_rate);
  }
  const bool pass = mu_err < 5e-2 && pahi.comparisons == 1000 && pahi.win_rate >= 0.9 &&
                    pahi.win_rate > best_single && best_single > 0.5;
  return {pass, fmt("train |mu - t|_inf %.4f, PAHI %.3f over %zu, HI %.3f, best single-mu %.3f", mu_err,
                    pahi.win_rate, pahi.comparisons, hi_rate, best_single)};
}

// 5. Transfer to an independent correlated bilinear scorer.
Outcome cross_scorer_transfer() {
  const auto& t = per_prompt_task();
  const auto b = t.evaluate(Candidate::predictor(t.trained)).at("bilinear");
  const double p_value = binomial_upper_tail(b.wins, b.comparisons, 0.5);
  return {p_value < 0.01,
          fmt("bilinear win rate %.3f (%zu/%zu), one-sided p = %.2e", b.win_rate, b.wins, b.comparisons, p_value)};
}

// 6. Standard candidate inside the 99% null band at 2000 comparisons.
Outcome null_candidate() {
  const auto e = desk();
  EvalOptions opts;
  const auto test = e.prompts.test_prompts();
  opts.samples_per_prompt = 2000 / test.size();
  auto r = evaluate_win_rate(Candidate::standard(), e.generator, e.eval_scorers, test, opts, 6);
  const auto band = binomial_band(2000);
  bool pass = true;
  std::string detail = fmt("band [%.4f, %.4f]", band.lower, band.upper);
  for (const auto& s : r.scorers) {
    pass = pass && s.comparisons == 2000 && band.contains(s.win_rate);
    detail += fmt(", %s %.4f", s.scorer.c_str(), s.win_rate);
  }
  return {pass, detail};
}

// 7. Pretraining drives both loss terms down.
Outcome pretraining_contract() {
  const auto e = desk();
  auto pred = initial_predictor(e);
  auto dec = EmbeddingDecoder::seeded(e.generator.noise_dim(), e.config.pahi.hidden, e.prompts.embedding_dim,
                                      derive_seed(e.config.seed, "pahi/decoder"));
  auto r = pretrain(pred, dec, e.prompts, pretrain_config(e.config), derive_seed(e.config.seed, "pahi/pretrain"));
  const double ratio = r.final_mse / r.initial_mse;
  return {r.final_kl_per_dim < 0.05 && ratio <= 0.1,
          fmt("KL per dim %.4f, MSE %.4f -> %.4f (ratio %.3f)", r.final_kl_per_dim, r.initial_mse, r.final_mse, ratio)};
}

// 8. Pair-loss identities.
Outcome loss_identities() {
  double worst = 0.0;
  for (double s : {-50.0, -3.0, -0.1, 0.0, 0.37, 2.0, 40.0}) {
    worst = std::max(worst, std::abs(preference_pair_loss(s, s) - std::numbers::ln2));
  }
  bool monotone = true;
  for (int i = -20; i <= 20; ++i) {
    for (int j = -20; j < 20; ++j) {
      const double s = 0.5 * i, sp = 0.5 * j;
      monotone = monotone && preference_pair_loss(s, sp + 0.5) < preference_pair_loss(s, sp);
      monotone = monotone && preference_pair_loss(sp + 0.5, s) > preference_pair_loss(sp, s);
    }
  }
  FrozenGenerator gen(EpsilonPredictor::seeded_mlp(8, 4, 32, 3), {0.5});
  auto table = make_prompt_table(16, 4, 2, {16, 0, 0});
  auto scorer = make_quadratic_scorer("q", table, TargetMap::seeded(4, 8, 0.5, 1.0, 1), 0.05);
  Rng rng(8);
  auto batch = draw_preference_batch(table.train_prompts(), 32, 8, Pairing::common_random_numbers, rng);
  const double crn = hi_loss(NoiseDistribution::standard(8), gen, scorer, batch).item();
  return {worst < 1e-12 && monotone && crn == std::numbers::ln2,
          fmt("max |L(s,s) - ln 2| %.1e, monotone grid %s, CRN loss - ln 2 = %.1e", worst, monotone ? "ok" : "violated",
              crn - std::numbers::ln2)};
}

// 9. Inference overhead of the predictor pass at default dimensions.
Outcome inference_overhead() {
  const auto e = desk();
  auto pred = initial_predictor(e);
  BenchOptions opts;
  opts.reps = 4000;
  opts.blocks = 400;
  auto t = bench_inference(e.generator, &pred, e.prompts.test_prompts(), opts, 9);
  return {t.reps >= 100 && t.batch_size == 1 && t.overhead > 0.0 && t.overhead < 0.15,
          fmt("plain %.4f ms, PAHI %.4f ms, overhead %+.1f%% over %zu reps", t.plain_ms, t.augmented_ms,
              100.0 * t.overhead, t.reps)};
}

// 10. Early stopping on scripted traces.
Outcome early_stopping() {
  auto stop_at = [](const std::vector<double>& losses) {
    EarlyStopMonitor m(5);
    for (std::size_t i = 0; i < losses.size(); ++i) {
      if (early_stop_update(m, losses[i]) == StopDecision::stop) return static_cast<int>(i);
    }
    return -1;
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> decreasing;
  for (int i = 0; i < 50; ++i) decreasing.push_back(5.0 - 0.1 * i);
  struct Trace {
    std::vector<double> losses;
    int expected;
  };
  const Trace traces[] = {
      {decreasing, -1},
      {{1.0, 1.0, 1.0, 1.0, 1.0, 1.0}, 5},
      {{1.0, 0.9, 1.1, 1.1, 1.1, 1.1, 0.8}, -1},
      {{1.0, 0.9, 1.1, 1.1, 1.1, 1.1, 0.8, 0.9, 0.9, 0.9, 0.9, 0.9}, 11},
      {{1.0, nan, nan, nan, nan, nan}, 5},
      {{1.0, nan, 1.2, nan, 1.0, nan}, 5},
      {{1.0, nan, nan, nan, nan, 0.5, nan}, -1},
  };
  int failures = 0;
  for (const auto& t : traces) failures += stop_at(t.losses) != t.expected;
  return {failures == 0, fmt("%d of %zu traces mismatched", failures, std::size(traces))};
}

// 11. Two full train-pahi + eval runs are byte-identical.
Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("pahi-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = fs::path(PAHI_SOURCE_DIR) / "configs" / "desk.json";
  const std::vector<std::string> overrides = {"pahi.pretrain_steps=200", "pahi.train_steps=600", "pahi.eval_every=100",
                                              "eval.runs=2"};
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  int failed_runs = 0;
  for (const char* arm : {"a", "b"}) {
    std::ostringstream err;
    RunRequest train{"train-pahi", config, root / arm / "train", std::nullopt, overrides, std::nullopt, false};
    failed_runs += run_command(train, err) != exit_ok;
    RunRequest eval{"eval", config, root / arm / "eval", std::nullopt, overrides, root / arm / "train" / "checkpoint.json",
                    false};
    failed_runs += run_command(eval, err) != exit_ok;
  }
  int differing = 0;
  const char* files[] = {"train/metrics.csv", "train/checkpoint.json", "eval/metrics.csv", "eval/summary.json"};
  for (const char* f : files) {
    const auto a = slurp(root / "a" / f);
    differing += a.empty() || a != slurp(root / "b" / f);
  }
  fs::remove_all(root);
  return {failed_runs == 0 && differing == 0,
          fmt("%d failed runs, %d of %zu artifacts differ", failed_runs, differing, std::size(files))};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0 = no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {1, "gradient integrity", 30.0, gradient_integrity},
      {2, "KL oracle", 30.0, kl_oracle},
      {3, "closed-form HI convergence", 60.0, closed_form_hi},
      {4, "per-prompt PAHI oracle", 600.0, per_prompt_oracle},
      {5, "cross-scorer transfer", 0.0, cross_scorer_transfer},
      {6, "null candidate", 0.0, null_candidate},
      {7, "pretraining contract", 60.0, pretraining_contract},
      {8, "loss identities", 0.0, loss_identities},
      {9, "inference overhead", 0.0, inference_overhead},
      {10, "early stopping", 0.0, early_stopping},
      {11, "determinism", 0.0, determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_s > 0.0 && secs >= c.budget_s) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s budget", c.budget_s);
    }
    failed += !o.pass;
    std::printf("criterion %2d %s  %s: %s [%.1f s]\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(std::size(criteria)) - failed, std::size(criteria));
  return failed == 0 ? 0 : 1;
}
