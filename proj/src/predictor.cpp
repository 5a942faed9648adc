#include "pahi/predictor.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "pahi/early_stop.hpp"
#include "pahi/ops.hpp"
#include "pahi/rng.hpp"

namespace pahi {

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

namespace {

Tensor normal_parameter(Rng& rng, Shape shape, double stddev) {
  auto values = rng.normals(shape_numel(shape));
  for (auto& v : values) v *= stddev;
  return Tensor::parameter(std::move(shape), std::move(values));
}

Tensor zero_parameter(Shape shape) {
  const auto n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor copy_parameter(const Tensor& t) { return Tensor::parameter(t.shape(), t.to_vector()); }

}  // namespace

Mlp Mlp::seeded(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, double output_scale) {
  if (in == 0 || hidden == 0 || out == 0) throw std::invalid_argument("mlp: dimensions must be positive");
  Mlp m;
  m.w1 = normal_parameter(rng, {in, hidden}, std::sqrt(2.0 / static_cast<double>(in + hidden)));
  m.b1 = zero_parameter({hidden});
  m.w2 = normal_parameter(rng, {hidden, out}, output_scale * std::sqrt(2.0 / static_cast<double>(hidden + out)));
  m.b2 = zero_parameter({out});
  return m;
}

Mlp Mlp::zeros(std::size_t in, std::size_t hidden, std::size_t out) {
  return {zero_parameter({in, hidden}), zero_parameter({hidden}), zero_parameter({hidden, out}),
          zero_parameter({out})};
}

Tensor Mlp::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.shape()[1] != input_dim()) {
    throw ShapeError("mlp: expected input [B, " + std::to_string(input_dim()) + "], got " + shape_string(x.shape()));
  }
  return add_row(matmul(tanh(add_row(matmul(x, w1), b1)), w2), b2);
}

std::vector<NamedParameter> Mlp::parameters(const std::string& prefix) const {
  return {{prefix + "w1", w1}, {prefix + "b1", b1}, {prefix + "w2", w2}, {prefix + "b2", b2}};
}

Mlp Mlp::clone() const { return {copy_parameter(w1), copy_parameter(b1), copy_parameter(w2), copy_parameter(b2)}; }

std::uint64_t Mlp::hash(std::uint64_t seed) const {
  std::uint64_t h = seed;
  for (const auto* t : {&w1, &b1, &w2, &b2}) h = hash_doubles(t->data(), h);
  return h;
}

NoisePredictor NoisePredictor::seeded(std::size_t embedding_dim, std::size_t hidden, std::size_t noise_dim,
                                      std::uint64_t seed) {
  Rng rng(seed);
  NoisePredictor p;
  p.mu_head = Mlp::seeded(embedding_dim, hidden, noise_dim, rng);
  p.rho_head = Mlp::seeded(embedding_dim, hidden, noise_dim, rng);
  return p;
}

NoisePredictor NoisePredictor::zeros(std::size_t embedding_dim, std::size_t hidden, std::size_t noise_dim) {
  return {Mlp::zeros(embedding_dim, hidden, noise_dim), Mlp::zeros(embedding_dim, hidden, noise_dim)};
}

std::vector<NamedParameter> NoisePredictor::parameters() const {
  auto params = mu_head.parameters("mu_head.");
  for (auto& p : rho_head.parameters("rho_head.")) params.push_back(std::move(p));
  return params;
}

NoisePredictor NoisePredictor::clone() const { return {mu_head.clone(), rho_head.clone()}; }

std::uint64_t NoisePredictor::hash() const { return rho_head.hash(mu_head.hash(0x9a41)); }

PredictedNoise predict_noise_params(const NoisePredictor& predictor, const Tensor& embeddings) {
  const bool single = embeddings.rank() == 1;
  if (single && embeddings.size() != predictor.embedding_dim()) {
    throw ShapeError("predict_noise_params: embedding " + shape_string(embeddings.shape()) + " vs predictor input " +
                     std::to_string(predictor.embedding_dim()));
  }
  Tensor e = single ? reshape(embeddings, {1, embeddings.size()}) : embeddings;
  Tensor mu = predictor.mu_head.forward(e);
  Tensor rho = predictor.rho_head.forward(e);
  if (single) {
    mu = reshape(mu, {mu.size()});
    rho = reshape(rho, {rho.size()});
  }
  return {mu, rho, exp(rho)};
}

EmbeddingDecoder EmbeddingDecoder::seeded(std::size_t noise_dim, std::size_t hidden, std::size_t embedding_dim,
                                          std::uint64_t seed) {
  Rng rng(seed);
  return {Mlp::seeded(noise_dim, hidden, embedding_dim, rng)};
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

Tensor kl_to_standard(const Tensor& mu, const Tensor& sigma) {
  if (mu.shape() != sigma.shape()) {
    throw ShapeError("kl_to_standard: mu " + shape_string(mu.shape()) + " vs sigma " + shape_string(sigma.shape()));
  }
  for (double s : sigma.data()) {
    if (!(s > 0.0)) throw DomainError("kl_to_standard: sigma must be positive, got " + std::to_string(s));
  }
  Tensor terms = subtract(add(square(sigma), square(mu)), add(Tensor::full(mu.shape(), 1.0), scale(log(sigma), 2.0)));
  return scale(sum(terms), 0.5);
}

double kl_to_standard(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw ShapeError("kl_to_standard: mu and sigma differ in length");
  double total = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0.0)) throw DomainError("kl_to_standard: sigma must be positive");
    total += sigma[i] * sigma[i] + mu[i] * mu[i] - 1.0 - 2.0 * std::log(sigma[i]);
  }
  return 0.5 * total;
}

PretrainTerms pretrain_loss(const NoisePredictor& predictor, const EmbeddingDecoder& decoder,
                            const Tensor& embeddings, const Tensor& eps, double kl_weight, double recon_weight,
                            SigmaConvention convention) {
  if (embeddings.rank() != 2) throw ShapeError("pretrain_loss: embeddings must be a batch [B, d_e]");
  const double batch = static_cast<double>(embeddings.shape()[0]);
  auto noise = predict_noise_params(predictor, embeddings);
  Tensor kl = scale(kl_to_standard(noise.mu, noise.sigma), 1.0 / batch);
  Tensor sample = sample_reparameterized(noise.mu, noise.rho, eps, convention);
  Tensor mse = mean(square(subtract(embeddings, decoder.net.forward(sample))));
  Tensor total = add(scale(kl, kl_weight), scale(mse, recon_weight));
  return {total, kl.item(), mse.item()};
}

namespace {

Tensor batch_embeddings(const std::vector<Prompt>& pool, std::size_t batch, Rng& rng) {
  std::vector<Prompt> picked;
  picked.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) picked.push_back(pool[rng.index(pool.size())]);
  return embedding_matrix(picked);
}

}  // namespace

PretrainReport pretrain(NoisePredictor& predictor, EmbeddingDecoder& decoder, const PromptTable& prompts,
                        const PretrainConfig& config, std::uint64_t seed) {
  if (config.steps < 0) throw std::invalid_argument("pretrain: negative step count");
  const auto train = prompts.train_prompts();
  if (train.empty()) throw std::invalid_argument("pretrain: empty training split");

  const Tensor all_embeddings = embedding_matrix(train);
  Rng eval_rng(derive_seed(seed, "pretrain/eval"));
  const Tensor eval_eps = eval_rng.normal_tensor({train.size(), predictor.noise_dim()});
  const double dz = static_cast<double>(predictor.noise_dim());

  PretrainReport report;
  {
    auto terms = pretrain_loss(predictor, decoder, all_embeddings, eval_eps, 1.0, 1.0, config.convention);
    report.initial_mse = terms.mse;
    report.initial_kl_per_dim = terms.kl / dz;
  }

  auto params = predictor.parameters();
  for (auto& p : decoder.parameters()) params.push_back(std::move(p));
  Adam adam(params);
  Rng rng(derive_seed(seed, "pretrain/batches"));
  for (long long step = 0; step < config.steps; ++step) {
    const double lr = lr_at(step, config.base_lr, config.warmup_steps, config.floor_lr);
    Tensor e = batch_embeddings(train, config.batch, rng);
    Tensor eps = rng.normal_tensor({config.batch, predictor.noise_dim()});
    adam.zero_grad();
    PretrainTerms terms;
    try {
      terms = pretrain_loss(predictor, decoder, e, eps, config.kl_weight, config.recon_weight, config.convention);
      if (!std::isfinite(terms.total.item())) throw DomainError("non-finite loss");
      terms.total.backward();
      adam.step(lr);
    } catch (const DomainError& err) {
      throw TrainingDiverged("pretrain: " + std::string(err.what()) + " at step " + std::to_string(step));
    }
    report.steps.push_back({step, terms.kl, terms.mse, terms.total.item(), lr});
  }

  auto terms = pretrain_loss(predictor, decoder, all_embeddings, eval_eps, 1.0, 1.0, config.convention);
  report.final_mse = terms.mse;
  report.final_kl_per_dim = terms.kl / dz;
  return report;
}

// ---------------------------------------------------------------------------
// Preference training and inference
// ---------------------------------------------------------------------------

Tensor pahi_loss(const NoisePredictor& predictor, const FrozenGenerator& generator, const Scorer& scorer,
                 const PreferenceBatch& batch, SigmaConvention convention) {
  auto noise = predict_noise_params(predictor, embedding_matrix(batch.prompts));
  Tensor candidate = sample_reparameterized(noise.mu, noise.rho, batch.candidate_eps, convention);
  return preference_loss(generator, scorer, batch.prompts, batch.baseline, candidate);
}

PahiResult pahi_train(const NoisePredictor& predictor, const FrozenGenerator& generator, const Scorer& scorer,
                      const PromptTable& prompts, const PahiConfig& config, std::uint64_t seed,
                      std::span<const Scorer> validation_scorers) {
  if (config.steps < 0) throw std::invalid_argument("pahi_train: negative step count");
  if (predictor.noise_dim() != generator.noise_dim() || predictor.embedding_dim() != generator.embedding_dim()) {
    throw ShapeError("pahi_train: predictor and generator dimensions disagree");
  }
  const auto train = prompts.train_prompts();
  if (train.empty() && config.steps > 0) throw std::invalid_argument("pahi_train: empty training split");

  NoisePredictor model = predictor.clone();
  PahiResult result{model.clone(), {}, 0, std::numeric_limits<double>::quiet_NaN(), 0, false, std::nullopt};

  std::span<const Scorer> monitored = validation_scorers;
  if (monitored.empty()) monitored = std::span(&scorer, 1);
  const auto validation = prompts.validation_prompts();
  const bool validate = !validation.empty() && config.eval_every > 0;
  PreferenceBatch validation_batch;
  if (validate) {
    Rng vrng(derive_seed(seed, "pahi/validation"));
    validation_batch = fixed_preference_batch(validation, config.validation_samples, generator.noise_dim(), vrng);
  }
  EarlyStopMonitor monitor(config.patience);

  // Returns true when training should stop.
  auto evaluate = [&](long long step, double lr) {
    double total = 0.0;
    for (const auto& s : monitored) {
      const double loss = pahi_loss(model, generator, s, validation_batch, config.convention).item();
      result.trace.push_back({step, "validation", s.name(), loss, lr});
      total += loss;
    }
    const double avg = total / static_cast<double>(monitored.size());
    result.trace.push_back({step, "validation", "mean", avg, lr});
    const bool stop = monitor.update(avg) == StopDecision::stop;
    if (monitor.improved_last()) {
      result.best = model.clone();
      result.best_step = step;
      result.best_validation_loss = avg;
    }
    return stop;
  };

  if (validate) evaluate(0, lr_at(0, config.base_lr, config.warmup_steps, config.floor_lr));

  Adam adam(model.parameters());
  Rng rng(derive_seed(seed, "pahi/batches"));
  double lr = 0.0;
  for (long long step = 0; step < config.steps; ++step) {
    lr = lr_at(step, config.base_lr, config.warmup_steps, config.floor_lr);
    auto batch = draw_preference_batch(train, config.batch, generator.noise_dim(), config.pairing, rng);
    adam.zero_grad();
    Tensor loss;
    try {
      loss = pahi_loss(model, generator, scorer, batch, config.convention);
      if (!std::isfinite(loss.item())) throw DomainError("non-finite loss");
      loss.backward();
      adam.step(lr);
    } catch (const DomainError& err) {
      throw TrainingDiverged("pahi_train: " + std::string(err.what()) + " at step " + std::to_string(step));
    }
    result.trace.push_back({step, "train", scorer.name(), loss.item(), lr});
    result.steps_run = step + 1;
    if (validate && (step + 1) % config.eval_every == 0 && evaluate(step + 1, lr)) {
      result.stopped_early = true;
      break;
    }
  }

  if (!validate) {
    result.best = model.clone();
    result.best_step = result.steps_run;
  } else if (!result.stopped_early && result.steps_run % config.eval_every != 0) {
    evaluate(result.steps_run, lr);
  }
  if (validate && config.steps > 0 && result.best_step == 0) {
    result.warning = "validation loss never improved on the initialization; returning the initial predictor";
  }
  return result;
}

Tensor pahi_infer(const NoisePredictor& predictor, const FrozenGenerator& generator, const Tensor& embedding,
                  const Tensor& eps, SigmaConvention convention) {
  auto noise = predict_noise_params(predictor, embedding);
  Tensor x = sample_reparameterized(noise.mu, noise.rho, eps, convention);
  return denoise_one_step(generator, x, embedding);
}

}  // namespace pahi
