#include "pahi/frozen_models.hpp"

#include <cmath>
#include <stdexcept>

#include "pahi/ops.hpp"
#include "pahi/rng.hpp"

namespace pahi {

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

std::vector<Prompt> PromptTable::select(std::span<const std::size_t> indices) const {
  std::vector<Prompt> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(prompts.at(i));
  return out;
}

std::uint64_t PromptTable::hash() const {
  std::uint64_t h = fnv1a("prompt-table");
  for (const auto& p : prompts) {
    h = fnv1a(p.id, h);
    h = hash_doubles(p.embedding, h);
  }
  for (const auto* split : {&train, &validation, &test}) {
    std::vector<double> as_double(split->begin(), split->end());
    h = hash_doubles(as_double, h ^ split->size());
  }
  return h;
}

namespace {

std::vector<double> unit_vector(Rng& rng, std::size_t dim) {
  std::vector<double> v;
  double norm = 0.0;
  while (norm < 1e-12) {
    v = rng.normals(dim);
    norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
  }
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace

PromptTable make_prompt_table(std::size_t n, std::size_t embedding_dim, std::uint64_t seed, SplitCounts split,
                              double coherence) {
  if (split.train + split.validation + split.test != n) {
    throw std::invalid_argument("make_prompt_table: split counts " + std::to_string(split.train) + "+" +
                                std::to_string(split.validation) + "+" + std::to_string(split.test) +
                                " do not sum to n = " + std::to_string(n));
  }
  if (embedding_dim == 0) throw std::invalid_argument("make_prompt_table: embedding_dim must be positive");
  if (!(coherence >= 0.0 && coherence < 1.0)) {
    throw std::invalid_argument("make_prompt_table: coherence must lie in [0, 1)");
  }

  Rng rng(seed);
  const auto shared = unit_vector(rng, embedding_dim);
  const double a = std::sqrt(coherence);
  const double b = std::sqrt(1.0 - coherence);

  PromptTable table;
  table.embedding_dim = embedding_dim;
  for (std::size_t i = 0; i < n; ++i) {
    auto own = unit_vector(rng, embedding_dim);
    std::vector<double> e(embedding_dim);
    double norm = 0.0;
    for (std::size_t d = 0; d < embedding_dim; ++d) {
      e[d] = a * shared[d] + b * own[d];
      norm += e[d] * e[d];
    }
    norm = std::sqrt(norm);
    for (auto& x : e) x /= norm;
    table.prompts.push_back({"prompt-" + std::to_string(i), std::move(e)});
    if (i < split.train) {
      table.train.push_back(i);
    } else if (i < split.train + split.validation) {
      table.validation.push_back(i);
    } else {
      table.test.push_back(i);
    }
  }
  return table;
}

Tensor embedding_matrix(std::span<const Prompt> prompts) {
  if (prompts.empty()) throw std::invalid_argument("embedding_matrix: no prompts");
  const std::size_t d = prompts.front().embedding.size();
  std::vector<double> values;
  values.reserve(prompts.size() * d);
  for (const auto& p : prompts) {
    if (p.embedding.size() != d) throw ShapeError("embedding_matrix: ragged embeddings");
    values.insert(values.end(), p.embedding.begin(), p.embedding.end());
  }
  return Tensor::from({prompts.size(), d}, std::move(values));
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

namespace {

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  Tensor t = rng.normal_tensor(std::move(shape));
  for (auto& v : t.mutable_data()) v *= stddev;
  return t;
}

}  // namespace

EpsilonPredictor EpsilonPredictor::linear(Tensor noise_weight, Tensor prompt_weight, Tensor bias) {
  if (noise_weight.rank() != 2 || noise_weight.shape()[0] != noise_weight.shape()[1]) {
    throw ShapeError("linear predictor: noise weight must be square, got " + shape_string(noise_weight.shape()));
  }
  const std::size_t dz = noise_weight.shape()[0];
  if (prompt_weight.rank() != 2 || prompt_weight.shape()[1] != dz) {
    throw ShapeError("linear predictor: prompt weight must be [d_e, " + std::to_string(dz) + "], got " +
                     shape_string(prompt_weight.shape()));
  }
  if (bias.shape() != Shape{dz}) {
    throw ShapeError("linear predictor: bias must be [" + std::to_string(dz) + "], got " + shape_string(bias.shape()));
  }
  EpsilonPredictor p;
  p.kind_ = PredictorKind::linear;
  p.noise_dim_ = dz;
  p.embedding_dim_ = prompt_weight.shape()[0];
  p.weights_ = {{"A", noise_weight.detach()}, {"B", prompt_weight.detach()}, {"b", bias.detach()}};
  return p;
}

EpsilonPredictor EpsilonPredictor::zero(std::size_t noise_dim, std::size_t embedding_dim) {
  return linear(Tensor::zeros({noise_dim, noise_dim}), Tensor::zeros({embedding_dim, noise_dim}),
                Tensor::zeros({noise_dim}));
}

EpsilonPredictor EpsilonPredictor::seeded_linear(std::size_t noise_dim, std::size_t embedding_dim,
                                                 std::uint64_t seed, double weight_scale) {
  Rng rng(seed);
  const double s = weight_scale / std::sqrt(static_cast<double>(noise_dim));
  Tensor a = gaussian(rng, {noise_dim, noise_dim}, s);
  Tensor b = gaussian(rng, {embedding_dim, noise_dim}, weight_scale / std::sqrt(static_cast<double>(embedding_dim)));
  Tensor bias = gaussian(rng, {noise_dim}, 0.1 * weight_scale);
  return linear(a, b, bias);
}

EpsilonPredictor EpsilonPredictor::seeded_mlp(std::size_t noise_dim, std::size_t embedding_dim, std::size_t hidden,
                                              std::uint64_t seed) {
  if (noise_dim == 0 || embedding_dim == 0 || hidden == 0) {
    throw std::invalid_argument("mlp predictor: dimensions must be positive");
  }
  Rng rng(seed);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(noise_dim + embedding_dim));
  EpsilonPredictor p;
  p.kind_ = PredictorKind::mlp;
  p.noise_dim_ = noise_dim;
  p.embedding_dim_ = embedding_dim;
  p.weights_ = {
      {"W1x", gaussian(rng, {noise_dim, hidden}, in_scale)},
      {"W1e", gaussian(rng, {embedding_dim, hidden}, in_scale)},
      {"b1", gaussian(rng, {hidden}, 0.1)},
      {"W2", gaussian(rng, {hidden, noise_dim}, 0.5 / std::sqrt(static_cast<double>(hidden)))},
      {"b2", gaussian(rng, {noise_dim}, 0.05)},
  };
  return p;
}

const Tensor& EpsilonPredictor::weight(const char* name) const {
  for (const auto& [n, t] : weights_) {
    if (n == name) return t;
  }
  throw std::logic_error(std::string("epsilon predictor has no weight ") + name);
}

Tensor EpsilonPredictor::predict(const Tensor& noise, const Tensor& embeddings) const {
  if (noise.rank() != 2 || noise.shape()[1] != noise_dim_) {
    throw ShapeError("epsilon predictor: noise must be [B, " + std::to_string(noise_dim_) + "], got " +
                     shape_string(noise.shape()));
  }
  if (embeddings.rank() != 2 || embeddings.shape()[1] != embedding_dim_ ||
      embeddings.shape()[0] != noise.shape()[0]) {
    throw ShapeError("epsilon predictor: embeddings must be [" + std::to_string(noise.shape()[0]) + ", " +
                     std::to_string(embedding_dim_) + "], got " + shape_string(embeddings.shape()));
  }
  if (kind_ == PredictorKind::linear) {
    return add_row(add(matmul(noise, weight("A")), matmul(embeddings, weight("B"))), weight("b"));
  }
  Tensor hidden = tanh(add_row(add(matmul(noise, weight("W1x")), matmul(embeddings, weight("W1e"))), weight("b1")));
  return add_row(matmul(hidden, weight("W2")), weight("b2"));
}

std::uint64_t EpsilonPredictor::hash() const {
  std::uint64_t h = fnv1a(kind_ == PredictorKind::linear ? "eps-linear" : "eps-mlp");
  for (const auto& [name, t] : weights_) {
    h = fnv1a(name, h);
    h = hash_doubles(t.data(), h);
  }
  return h;
}

FrozenGenerator::FrozenGenerator(EpsilonPredictor predictor, VarianceSchedule schedule)
    : predictor_(std::move(predictor)), schedule_(schedule) {
  if (!(schedule_.alpha > 0.0 && schedule_.alpha <= 1.0)) {
    throw std::invalid_argument("variance schedule alpha must lie in (0, 1], got " + std::to_string(schedule_.alpha));
  }
}

std::uint64_t FrozenGenerator::hash() const {
  const double alpha = schedule_.alpha;
  return hash_doubles(std::span(&alpha, 1), predictor_.hash());
}

Tensor denoise_one_step(const FrozenGenerator& generator, const Tensor& noise, const Tensor& embeddings) {
  const bool single = noise.rank() == 1;
  if (single != (embeddings.rank() == 1)) {
    throw ShapeError("denoise_one_step: noise " + shape_string(noise.shape()) + " and embedding " +
                     shape_string(embeddings.shape()) + " must both be single samples or both batches");
  }
  Tensor x = single ? reshape(noise, {1, noise.size()}) : noise;
  Tensor e = single ? reshape(embeddings, {1, embeddings.size()}) : embeddings;

  const double alpha = generator.schedule().alpha;
  Tensor eps = generator.predictor().predict(x, e);
  Tensor image = scale(subtract(x, scale(eps, std::sqrt(1.0 - alpha))), 1.0 / std::sqrt(alpha));
  return single ? reshape(image, {image.size()}) : image;
}

// ---------------------------------------------------------------------------
// Scorers
// ---------------------------------------------------------------------------

std::vector<double> TargetMap::target(std::span<const double> embedding) const {
  if (weight.rank() != 2 || weight.shape()[0] != embedding.size()) {
    throw ShapeError("target map: embedding of size " + std::to_string(embedding.size()) +
                     " does not match weight " + shape_string(weight.shape()));
  }
  if (!center.empty() && center.size() != embedding.size()) {
    throw ShapeError("target map: center has " + std::to_string(center.size()) + " entries, embedding has " +
                     std::to_string(embedding.size()));
  }
  const std::size_t dy = weight.shape()[1];
  std::vector<double> t(dy, offset);
  for (std::size_t i = 0; i < embedding.size(); ++i) {
    const double e = embedding[i] - (center.empty() ? 0.0 : center[i]);
    for (std::size_t j = 0; j < dy; ++j) t[j] += e * weight.at(i, j);
  }
  return t;
}

TargetMap TargetMap::constant(std::size_t embedding_dim, std::size_t image_dim, double value) {
  return {value, Tensor::zeros({embedding_dim, image_dim}), {}};
}

TargetMap TargetMap::seeded(std::size_t embedding_dim, std::size_t image_dim, double offset, double spread,
                            std::uint64_t seed, std::vector<double> center) {
  Rng rng(seed);
  return {offset, gaussian(rng, {embedding_dim, image_dim}, spread), std::move(center)};
}

std::vector<double> mean_embedding(const PromptTable& table) {
  std::vector<double> m(table.embedding_dim, 0.0);
  for (const auto& p : table.prompts)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += p.embedding[i];
  for (auto& v : m) v /= static_cast<double>(table.prompts.size());
  return m;
}

Scorer Scorer::quadratic(std::string name, std::map<std::string, std::vector<double>> targets, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("quadratic scorer: gamma must be positive");
  if (targets.empty()) throw std::invalid_argument("quadratic scorer: empty target table");
  const std::size_t dy = targets.begin()->second.size();
  for (const auto& [id, t] : targets) {
    if (t.size() != dy) throw ShapeError("quadratic scorer: target for '" + id + "' has the wrong dimension");
  }
  Scorer s;
  s.name_ = std::move(name);
  s.kind_ = ScorerKind::quadratic;
  s.targets_ = std::move(targets);
  s.gamma_ = gamma;
  return s;
}

Scorer Scorer::bilinear(std::string name, Tensor image_projection, Tensor prompt_projection, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("bilinear scorer: temperature must be positive");
  if (image_projection.rank() != 2 || prompt_projection.rank() != 2 ||
      image_projection.shape()[1] != prompt_projection.shape()[1]) {
    throw ShapeError("bilinear scorer: projections " + shape_string(image_projection.shape()) + " and " +
                     shape_string(prompt_projection.shape()) + " must share their rank dimension");
  }
  Scorer s;
  s.name_ = std::move(name);
  s.kind_ = ScorerKind::bilinear;
  s.image_projection_ = image_projection.detach();
  s.prompt_projection_ = prompt_projection.detach();
  s.temperature_ = temperature;
  return s;
}

const std::vector<double>& Scorer::target(const std::string& prompt_id) const {
  auto it = targets_.find(prompt_id);
  if (it == targets_.end()) {
    throw std::out_of_range("scorer '" + name_ + "': no target for prompt '" + prompt_id + "'");
  }
  return it->second;
}

Tensor Scorer::score(const Tensor& images, std::span<const Prompt> prompts) const {
  if (images.rank() != 2 || images.shape()[0] != prompts.size()) {
    throw ShapeError("scorer '" + name_ + "': images " + shape_string(images.shape()) + " do not match " +
                     std::to_string(prompts.size()) + " prompts");
  }
  const std::size_t batch = prompts.size();
  const std::size_t dy = images.shape()[1];
  if (kind_ == ScorerKind::quadratic) {
    std::vector<double> stacked;
    stacked.reserve(batch * dy);
    for (const auto& p : prompts) {
      const auto& t = target(p.id);
      if (t.size() != dy) {
        throw ShapeError("scorer '" + name_ + "': image dimension " + std::to_string(dy) + " vs target dimension " +
                         std::to_string(t.size()));
      }
      stacked.insert(stacked.end(), t.begin(), t.end());
    }
    Tensor diff = subtract(images, Tensor::from({batch, dy}, std::move(stacked)));
    return scale(row_sum(square(diff)), -gamma_);
  }
  if (image_projection_.shape()[0] != dy) {
    throw ShapeError("scorer '" + name_ + "': image dimension " + std::to_string(dy) + " vs projection " +
                     shape_string(image_projection_.shape()));
  }
  Tensor image_features = matmul(images, image_projection_);
  Tensor prompt_features = matmul(embedding_matrix(prompts), prompt_projection_);
  return scale(row_sum(multiply(image_features, prompt_features)), 1.0 / temperature_);
}

std::uint64_t Scorer::hash() const {
  std::uint64_t h = fnv1a(name_);
  if (kind_ == ScorerKind::quadratic) {
    h = fnv1a("quadratic", h);
    h = hash_doubles(std::span(&gamma_, 1), h);
    for (const auto& [id, t] : targets_) h = hash_doubles(t, fnv1a(id, h));
  } else {
    h = fnv1a("bilinear", h);
    h = hash_doubles(std::span(&temperature_, 1), h);
    h = hash_doubles(image_projection_.data(), h);
    h = hash_doubles(prompt_projection_.data(), h);
  }
  return h;
}

double score_image(const Scorer& scorer, std::span<const double> image, const Prompt& prompt) {
  Tensor images = Tensor::from({1, image.size()}, std::vector<double>(image.begin(), image.end()));
  return scorer.score(images, std::span(&prompt, 1)).item();
}

Scorer make_quadratic_scorer(std::string name, const PromptTable& table, const TargetMap& targets, double gamma) {
  std::map<std::string, std::vector<double>> table_targets;
  for (const auto& p : table.prompts) table_targets.emplace(p.id, targets.target(p.embedding));
  return Scorer::quadratic(std::move(name), std::move(table_targets), gamma);
}

Scorer make_bilinear_scorer(std::string name, std::size_t image_dim, std::size_t embedding_dim, std::size_t rank,
                            double temperature, double correlation, const TargetMap& reference, std::uint64_t seed) {
  if (!(correlation >= 0.0 && correlation <= 1.0)) {
    throw std::invalid_argument("bilinear scorer: correlation must lie in [0, 1]");
  }
  if (rank == 0) throw std::invalid_argument("bilinear scorer: rank must be positive");
  if (reference.weight.shape() != Shape{embedding_dim, image_dim}) {
    throw ShapeError("bilinear scorer: reference target weight must be [" + std::to_string(embedding_dim) + ", " +
                     std::to_string(image_dim) + "], got " + shape_string(reference.weight.shape()));
  }
  Rng rng(seed);
  Tensor image_projection = gaussian(rng, {image_dim, rank}, 1.0 / std::sqrt(static_cast<double>(rank)));

  double rms = 0.0;
  for (double w : reference.weight.data()) rms += w * w;
  rms = std::sqrt(rms / static_cast<double>(reference.weight.size()));
  if (rms == 0.0) rms = 1.0;

  // Q = c * W P + sqrt(1 - c^2) * G, so that P Q^T ~ c * W^T + noise.
  Tensor aligned = matmul(reference.weight, image_projection);
  Tensor independent = gaussian(rng, {embedding_dim, rank}, rms);
  const double c = correlation;
  const double s = std::sqrt(1.0 - c * c);
  std::vector<double> q(aligned.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = c * aligned.at(i) + s * independent.at(i);
  return Scorer::bilinear(std::move(name), image_projection,
                          Tensor::from({embedding_dim, rank}, std::move(q)), temperature);
}

Tensor build_pipeline_score(const FrozenGenerator& generator, const Scorer& scorer, const Tensor& noise,
                            std::span<const Prompt> prompts) {
  Tensor x = noise.rank() == 1 ? reshape(noise, {1, noise.size()}) : noise;
  Tensor images = denoise_one_step(generator, x, embedding_matrix(prompts));
  return scorer.score(images, prompts);
}

}  // namespace pahi
