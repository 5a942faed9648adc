#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "pahi/grad_check.hpp"
#include "pahi/inversion.hpp"
#include "pahi/ops.hpp"
#include "pahi/rng.hpp"

using namespace pahi;

namespace {

// Image map of a linear-eps generator at a fixed embedding: image = x M + c.
struct AffineImage {
  Eigen::MatrixXd M;
  Eigen::RowVectorXd c;
};

AffineImage affine_image(const FrozenGenerator& gen, std::span<const double> embedding) {
  const std::size_t d = gen.noise_dim();
  Tensor e = Tensor::from({1, embedding.size()}, std::vector<double>(embedding.begin(), embedding.end()));
  AffineImage a{Eigen::MatrixXd(d, d), Eigen::RowVectorXd(d)};
  Tensor zero = denoise_one_step(gen, Tensor::zeros({1, d}), e);
  for (std::size_t j = 0; j < d; ++j) a.c(j) = zero.at(j);
  for (std::size_t i = 0; i < d; ++i) {
    Tensor basis = Tensor::zeros({1, d});
    basis.mutable_data()[i] = 1.0;
    Tensor img = denoise_one_step(gen, basis, e);
    for (std::size_t j = 0; j < d; ++j) a.M(i, j) = img.at(j) - a.c(j);
  }
  return a;
}

// Least-squares noise mean whose image is closest to `target`.
Eigen::RowVectorXd least_squares_mu(const AffineImage& a, const Eigen::RowVectorXd& target) {
  Eigen::VectorXd rhs = (target - a.c).transpose();
  Eigen::VectorXd mu = a.M.transpose().completeOrthogonalDecomposition().solve(rhs);
  return mu.transpose();
}

PromptTable single_prompt_table(std::size_t d_e) {
  PromptTable t;
  t.embedding_dim = d_e;
  std::vector<double> e(d_e, 0.0);
  e[0] = 1.0;
  t.prompts = {{"only", e}};
  t.train = {0};
  return t;
}

}  // namespace

TEST_SUITE("reparameterization") {
  TEST_CASE("zero eps returns mu") {
    auto d = NoiseDistribution::from_values({0.5, -1.0, 2.0}, {0.3, -0.2, 1.0});
    auto x = sample_reparameterized(d, Tensor::zeros({3}));
    CHECK(x.to_vector() == std::vector<double>{0.5, -1.0, 2.0});
  }

  TEST_CASE("standard distribution returns eps") {
    auto d = NoiseDistribution::standard(4);
    CHECK(d.mu.to_vector() == std::vector<double>(4, 0.0));
    CHECK(d.sigma() == std::vector<double>(4, 1.0));
    Tensor eps = Tensor::vector({0.1, -0.7, 1.3, 2.0});
    CHECK(sample_reparameterized(d, eps).to_vector() == eps.to_vector());
  }

  TEST_CASE("mu 1 sigma 2 eps (1, -1)") {
    auto d = NoiseDistribution::from_values({1.0, 1.0}, {std::log(2.0), std::log(2.0)});
    auto x = sample_reparameterized(d, Tensor::vector({1.0, -1.0}));
    CHECK(x.at(0) == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(x.at(1) == doctest::Approx(-1.0).epsilon(1e-15));
  }

  TEST_CASE("squared convention multiplies by sigma squared") {
    auto d = NoiseDistribution::from_values({1.0}, {std::log(2.0)});
    auto x = sample_reparameterized(d, Tensor::vector({1.0}), SigmaConvention::squared);
    CHECK(x.item() == doctest::Approx(5.0).epsilon(1e-14));
  }

  TEST_CASE("shape mismatch is rejected") {
    auto d = NoiseDistribution::standard(3);
    CHECK_THROWS_AS(sample_reparameterized(d, Tensor::zeros({4})), ShapeError);
    CHECK_THROWS_AS(sample_reparameterized(d, Tensor::zeros({2, 4})), ShapeError);
  }

  TEST_CASE("sigma stays positive for extreme rho") {
    auto d = NoiseDistribution::from_values({0.0, 0.0}, {-300.0, 300.0});
    for (double s : d.sigma()) {
      CHECK(s > 0.0);
      CHECK(std::isfinite(s));
    }
  }

  TEST_CASE("empirical moments match mu and sigma") {
    auto d = NoiseDistribution::from_values({1.5, -0.5}, {std::log(0.3), std::log(2.0)});
    const std::size_t n = 100000;
    Rng rng(12);
    Tensor x = sample_reparameterized(d, rng.normal_tensor({n, 2}));
    const auto sigma = d.sigma();
    for (std::size_t j = 0; j < 2; ++j) {
      double m = 0.0, v = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += x.at(i, j);
      m /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) v += (x.at(i, j) - m) * (x.at(i, j) - m);
      v /= static_cast<double>(n - 1);
      const double se_mean = sigma[j] / std::sqrt(static_cast<double>(n));
      const double se_std = sigma[j] / std::sqrt(2.0 * static_cast<double>(n - 1));
      CHECK(std::abs(m - d.mu.at(j)) < 3.0 * se_mean);
      CHECK(std::abs(std::sqrt(v) - sigma[j]) < 3.0 * se_std);
    }
  }
}

TEST_SUITE("pair loss") {
  TEST_CASE("equal scores give ln 2") {
    CHECK(std::abs(preference_pair_loss(0.37, 0.37) - std::numbers::ln2) < 1e-12);
  }

  TEST_CASE("reference values") {
    CHECK(preference_pair_loss(0.0, 10.0) == doctest::Approx(4.5398899216870535e-05).epsilon(1e-12));
    CHECK(preference_pair_loss(2.0, 0.0) == doctest::Approx(2.1269280110429727).epsilon(1e-12));
  }

  TEST_CASE("no overflow at large gaps") {
    CHECK(preference_pair_loss(1e6, 0.0) == doctest::Approx(1e6));
    CHECK(preference_pair_loss(0.0, 1e6) == 0.0);
    CHECK(std::isfinite(preference_pair_loss(-1e6, 1e6)));
  }

  TEST_CASE("swapped pairs sum to the softplus identity") {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
      const double s = rng.normal() * 5.0, sp = rng.normal() * 5.0;
      const double d = std::abs(s - sp);
      const double expected = d + 2.0 * std::log1p(std::exp(-d));
      CHECK(std::abs(preference_pair_loss(s, sp) + preference_pair_loss(sp, s) - expected) < 1e-12);
    }
  }

  TEST_CASE("monotone in both scores") {
    for (int i = -20; i <= 20; ++i) {
      for (int j = -20; j < 20; ++j) {
        const double s = 0.5 * i, sp = 0.5 * j;
        CHECK(preference_pair_loss(s, sp + 0.5) < preference_pair_loss(s, sp));
        CHECK(preference_pair_loss(sp + 0.5, s) > preference_pair_loss(sp, s));
      }
    }
  }

  TEST_CASE("gradient is sigmoid of the gap") {
    Tensor s = Tensor::parameter({3}, {0.0, 2.0, -1.0});
    Tensor sp = Tensor::parameter({3}, {1.0, -1.0, -1.0});
    sum(preference_pair_loss(s, sp)).backward();
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = 1.0 / (1.0 + std::exp(-(s.at(i) - sp.at(i))));
      CHECK(s.grad()[i] == doctest::Approx(g).epsilon(1e-14));
      CHECK(sp.grad()[i] == doctest::Approx(-g).epsilon(1e-14));
    }
  }
}

TEST_SUITE("hi loss") {
  TEST_CASE("common random numbers at the standard distribution give exactly ln 2") {
    FrozenGenerator gen(EpsilonPredictor::seeded_mlp(6, 4, 16, 3), {0.5});
    auto table = make_prompt_table(8, 4, 2, {8, 0, 0});
    auto scorer = make_quadratic_scorer("q", table, TargetMap::seeded(4, 6, 0.5, 1.0, 1), 0.3);
    auto dist = NoiseDistribution::standard(6);
    Rng rng(5);
    auto batch = draw_preference_batch(table.train_prompts(), 16, 6, Pairing::common_random_numbers, rng);
    Tensor loss = hi_loss(dist, gen, scorer, batch);
    CHECK(loss.item() == std::numbers::ln2);

    // Only the candidate leg carries gradient, so d loss / d mu is
    // -sigmoid(0) times the mean score gradient at the shared noise.
    loss.backward();
    Tensor x = Tensor::parameter(batch.baseline.shape(), batch.baseline.to_vector());
    sum(build_pipeline_score(gen, scorer, x, batch.prompts)).backward();
    const auto gx = x.grad();
    for (std::size_t j = 0; j < 6; ++j) {
      double expected = 0.0;
      for (std::size_t i = 0; i < 16; ++i) expected -= 0.5 * gx[i * 6 + j] / 16.0;
      CHECK(dist.mu.grad()[j] == doctest::Approx(expected).epsilon(1e-12));
    }
  }

  TEST_CASE("independent pairing at the standard distribution is exchangeable") {
    FrozenGenerator gen(EpsilonPredictor::seeded_linear(4, 3, 3), {0.5});
    auto table = make_prompt_table(8, 3, 2, {8, 0, 0});
    auto scorer = make_quadratic_scorer("q", table, TargetMap::seeded(3, 4, 0.5, 1.0, 1), 0.5);
    auto dist = NoiseDistribution::standard(4);
    Rng rng(6);
    const std::size_t n = 20000;
    auto batch = draw_preference_batch(table.train_prompts(), n, 4, Pairing::independent, rng);
    auto s = build_pipeline_score(gen, scorer, batch.baseline, batch.prompts);
    auto sp = build_pipeline_score(gen, scorer, batch.candidate_eps, batch.prompts);
    // Swapping the legs leaves the expected loss unchanged; the paired
    // difference has mean zero.
    double m = 0.0, diff = 0.0, v = 0.0;
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) {
      m += preference_pair_loss(s.at(i), sp.at(i));
      d[i] = s.at(i) - sp.at(i);
      diff += d[i];
    }
    m /= static_cast<double>(n);
    diff /= static_cast<double>(n);
    for (double x : d) v += (x - diff) * (x - diff);
    const double se = std::sqrt(v / static_cast<double>(n - 1) / static_cast<double>(n));
    CHECK(std::abs(hi_loss(dist, gen, scorer, batch).item() - m) < 1e-12);
    CHECK(std::abs(diff) < 3.0 * se);
    // softplus(d) + softplus(-d) >= 2 ln 2, so the expected loss is at least ln 2.
    CHECK(m >= std::numbers::ln2);
  }

  TEST_CASE("concentrating at the optimum beats ln 2 on almost every batch") {
    FrozenGenerator gen(EpsilonPredictor::zero(4, 2), {1.0});
    auto table = make_prompt_table(4, 2, 1, {4, 0, 0});
    auto scorer = make_quadratic_scorer("q", table, TargetMap::constant(2, 4, 1.0), 0.5);
    auto dist = NoiseDistribution::from_values(std::vector<double>(4, 1.0), std::vector<double>(4, std::log(0.01)));
    Rng rng(7);
    int below = 0;
    const int batches = 400;
    for (int b = 0; b < batches; ++b) {
      auto batch = draw_preference_batch(table.train_prompts(), 32, 4, Pairing::independent, rng);
      if (hi_loss(dist, gen, scorer, batch).item() < std::numbers::ln2) ++below;
    }
    CHECK(below >= 396);
  }

  TEST_CASE("gradient matches finite differences with replayed eps") {
    FrozenGenerator gen(EpsilonPredictor::seeded_mlp(5, 3, 10, 4), {0.6});
    auto table = make_prompt_table(6, 3, 3, {6, 0, 0});
    auto scorer = make_quadratic_scorer("q", table, TargetMap::seeded(3, 5, 0.3, 1.0, 2), 0.4);
    auto dist = NoiseDistribution::from_values({0.2, -0.1, 0.5, 0.0, 0.3}, {-0.2, 0.1, 0.0, -0.5, 0.2});
    Rng rng(8);
    auto batch = draw_preference_batch(table.train_prompts(), 12, 5, Pairing::independent, rng);
    auto report = grad_check([&] { return hi_loss(dist, gen, scorer, batch); }, {dist.mu, dist.rho});
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_SUITE("hi optimize") {
  TEST_CASE("closed form: identity generator, constant target 3") {
    const std::size_t d = 8;
    FrozenGenerator gen(EpsilonPredictor::zero(d, 4), {1.0});
    auto table = make_prompt_table(16, 4, 1, {12, 4, 0});
    auto scorer = make_quadratic_scorer("q", table, TargetMap::constant(4, d, 3.0), 0.01);
    auto result = hi_optimize(gen, scorer, table, HiConfig{}, 21);
    for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(result.distribution.mu.at(i) - 3.0) < 1e-2);
    for (double s : result.distribution.sigma()) CHECK(s < 0.1);
  }

  TEST_CASE("general linear generator matches the least-squares oracle") {
    const std::size_t d = 4, de = 2;
    auto table = single_prompt_table(de);
    FrozenGenerator gen(EpsilonPredictor::seeded_linear(d, de, 17, 0.4), {0.7});
    auto targets = TargetMap::constant(de, d, 0.0);
    Eigen::RowVectorXd t(d);
    t << 1.0, -0.5, 2.0, 0.25;
    auto scorer = Scorer::quadratic("q", {{"only", {t(0), t(1), t(2), t(3)}}}, 0.05);
    const auto oracle = least_squares_mu(affine_image(gen, table.prompts[0].embedding), t);

    HiConfig cfg;
    cfg.steps = 3000;
    auto result = hi_optimize(gen, scorer, table, cfg, 5);
    for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(result.distribution.mu.at(i) - oracle(i)) < 1e-2);
  }

  TEST_CASE("grid search agrees with the oracle in two dimensions") {
    FrozenGenerator gen(EpsilonPredictor::seeded_linear(2, 1, 9, 0.5), {0.5});
    auto table = single_prompt_table(1);
    Eigen::RowVectorXd t(2);
    t << 0.8, -1.2;
    auto scorer = Scorer::quadratic("q", {{"only", {t(0), t(1)}}}, 1.0);
    const auto oracle = least_squares_mu(affine_image(gen, table.prompts[0].embedding), t);
    double best = -1e300;
    double bx = 0.0, by = 0.0;
    for (int i = -300; i <= 300; ++i) {
      for (int j = -300; j <= 300; ++j) {
        const double x = 0.01 * i, y = 0.01 * j;
        Tensor img = denoise_one_step(gen, Tensor::vector({x, y}), Tensor::vector(table.prompts[0].embedding));
        const double s = score_image(scorer, img.data(), table.prompts[0]);
        if (s > best) best = s, bx = x, by = y;
      }
    }
    CHECK(std::abs(bx - oracle(0)) <= 0.01);
    CHECK(std::abs(by - oracle(1)) <= 0.01);
  }

  TEST_CASE("zero steps return the standard distribution") {
    FrozenGenerator gen(EpsilonPredictor::zero(3, 2), {1.0});
    auto table = make_prompt_table(4, 2, 1, {4, 0, 0});
    auto scorer = make_quadratic_scorer("q", table, TargetMap::constant(2, 3, 1.0), 0.1);
    HiConfig cfg;
    cfg.steps = 0;
    auto r = hi_optimize(gen, scorer, table, cfg, 1);
    CHECK(r.distribution.mu.to_vector() == std::vector<double>(3, 0.0));
    CHECK(r.distribution.rho.to_vector() == std::vector<double>(3, 0.0));
    CHECK(r.steps_run == 0);
  }

  TEST_CASE("same seed gives identical traces") {
    FrozenGenerator gen(EpsilonPredictor::seeded_mlp(4, 2, 8, 1), {0.5});
    auto table = make_prompt_table(10, 2, 1, {6, 4, 0});
    auto scorer = make_quadratic_scorer("q", table, TargetMap::seeded(2, 4, 0.5, 1.0, 3), 0.1);
    HiConfig cfg;
    cfg.steps = 120;
    cfg.eval_every = 40;
    const Scorer monitored[] = {scorer};
    auto a = hi_optimize(gen, scorer, table, cfg, 77, monitored);
    auto b = hi_optimize(gen, scorer, table, cfg, 77, monitored);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
      CHECK(a.trace[i].loss == b.trace[i].loss);
      CHECK(a.trace[i].split == b.trace[i].split);
    }
    CHECK(a.distribution.mu.to_vector() == b.distribution.mu.to_vector());
  }

  TEST_CASE("frozen models are untouched by training") {
    FrozenGenerator gen(EpsilonPredictor::seeded_mlp(4, 2, 8, 1), {0.5});
    auto table = make_prompt_table(6, 2, 1, {6, 0, 0});
    auto scorer = make_quadratic_scorer("q", table, TargetMap::seeded(2, 4, 0.5, 1.0, 3), 0.1);
    const auto g = gen.hash(), s = scorer.hash();
    HiConfig cfg;
    cfg.steps = 50;
    (void)hi_optimize(gen, scorer, table, cfg, 3);
    CHECK(gen.hash() == g);
    CHECK(scorer.hash() == s);
  }

  TEST_CASE("non-finite loss aborts with a diagnostic") {
    FrozenGenerator gen(EpsilonPredictor::zero(2, 2), {1.0});
    auto table = make_prompt_table(2, 2, 1, {2, 0, 0});
    auto scorer = make_quadratic_scorer("q", table, TargetMap::constant(2, 2, 1e200), 1e200);
    HiConfig cfg;
    cfg.steps = 5;
    CHECK_THROWS_AS(hi_optimize(gen, scorer, table, cfg, 1), TrainingDiverged);
  }
}
