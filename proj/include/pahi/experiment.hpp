#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pahi/eval.hpp"
#include "pahi/frozen_models.hpp"
#include "pahi/inversion.hpp"
#include "pahi/predictor.hpp"

namespace pahi {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct PromptSpec {
  std::size_t count = 64;
  std::size_t embedding_dim = 8;
  std::size_t train = 44;
  std::size_t validation = 10;
  std::size_t test = 10;
  double coherence = 0.8;
  std::optional<std::uint64_t> seed;
  bool operator==(const PromptSpec&) const = default;
};

struct GeneratorSpec {
  std::string kind = "mlp";  // identity | linear | mlp
  std::size_t noise_dim = 16;
  std::size_t hidden = 1024;
  double alpha = 0.5;
  std::optional<std::uint64_t> seed;
  bool operator==(const GeneratorSpec&) const = default;
};

struct TargetSpec {
  double offset = 0.5;
  double spread = 3.0;
  bool centered = true;
  std::optional<std::uint64_t> seed;
  bool operator==(const TargetSpec&) const = default;
};

struct ScorerSpec {
  std::string name = "quadratic";
  std::string kind = "quadratic";  // quadratic | bilinear
  double gamma = 0.01;
  std::size_t rank = 4;
  double temperature = 1.0;
  double correlation = 0.8;
  std::optional<std::uint64_t> seed;
  bool operator==(const ScorerSpec&) const = default;
};

struct HiSpec {
  long long steps = 2000;
  std::size_t batch = 32;
  double base_lr = 0.05;
  double floor_lr = 1e-5;
  long long warmup_steps = 200;
  std::string pairing = "crn";  // crn | independent
  long long eval_every = 250;
  std::size_t validation_samples = 8;
  bool operator==(const HiSpec&) const = default;
};

struct PahiSpec {
  std::size_t hidden = 32;
  bool pretrain = true;
  long long pretrain_steps = 1000;
  double pretrain_lr = 3e-3;
  long long pretrain_warmup = 100;
  long long train_steps = 5000;
  std::size_t batch = 32;
  double base_lr = 3e-3;
  double floor_lr = 1e-5;
  long long warmup_steps = 200;
  std::string pairing = "crn";
  long long eval_every = 250;
  std::size_t patience = 5;
  std::size_t validation_samples = 8;
  bool operator==(const PahiSpec&) const = default;
};

struct EvalSpec {
  std::size_t samples_per_prompt = 8;
  std::size_t runs = 1;
  std::size_t dump_pairs = 4;
  bool operator==(const EvalSpec&) const = default;
};

struct BenchSpec {
  std::size_t reps = 1000;
  std::size_t warmup = 10;
  std::size_t blocks = 100;
  bool operator==(const BenchSpec&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string sigma_convention = "stddev";  // stddev | squared
  PromptSpec prompts;
  GeneratorSpec generator;
  TargetSpec targets;
  ScorerSpec training_scorer;
  std::vector<ScorerSpec> eval_scorers = {
      ScorerSpec{},
      ScorerSpec{"bilinear", "bilinear", 0.01, 4, 1.0, 0.8, std::nullopt},
  };
  HiSpec hi;
  PahiSpec pahi;
  EvalSpec eval;
  BenchSpec bench;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Invalid config; `field` is the dotted path of the offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Checkpoint that does not belong to the current config or format.
class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing keys keep their defaults; unknown keys and bad values throw.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);

/// Sets a dotted key ("pahi.train_steps=8000", "eval_scorers.1.gamma=0.1").
/// The value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, std::string_view assignment);

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

SigmaConvention sigma_convention(const ExperimentConfig& config);

/// Explicit component seed when given, else derived from the master seed.
std::uint64_t component_seed(const ExperimentConfig& config, const std::optional<std::uint64_t>& explicit_seed,
                             std::string_view component);

// ---------------------------------------------------------------------------
// Frozen world built from a config
// ---------------------------------------------------------------------------

struct Experiment {
  ExperimentConfig config;
  PromptTable prompts;
  FrozenGenerator generator;
  TargetMap targets;
  Scorer training_scorer;
  std::vector<Scorer> eval_scorers;

  nlohmann::json frozen_hashes() const;
};

Experiment build_experiment(const ExperimentConfig& config);

NoisePredictor initial_predictor(const Experiment& experiment);
HiConfig hi_config(const ExperimentConfig& config);
PretrainConfig pretrain_config(const ExperimentConfig& config);
PahiConfig pahi_config(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  int version = kCheckpointVersion;
  std::string kind;  // pretrain | hi | pahi
  nlohmann::json config;
  nlohmann::json frozen;
  std::vector<NamedArray> parameters;
  long long step = 0;
  std::optional<double> best_validation_loss;
  nlohmann::json frozen_weights;  // null unless archived
};

std::string encode_checkpoint(const Checkpoint& checkpoint);
/// Throws CheckpointMismatch on an unknown format or version.
Checkpoint decode_checkpoint(std::string_view text);

/// Throws CheckpointMismatch when a frozen model's hash differs.
void verify_checkpoint(const Checkpoint& checkpoint, const Experiment& experiment);

std::vector<NamedArray> predictor_arrays(const NoisePredictor& predictor);
NoisePredictor predictor_from_arrays(std::span<const NamedArray> arrays, const Experiment& experiment);
NoiseDistribution distribution_from_arrays(std::span<const NamedArray> arrays);

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct RunRequest {
  std::string command;  // pretrain | train-hi | train-pahi | eval | bench
  std::filesystem::path config;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::optional<std::filesystem::path> checkpoint;
  bool embed_frozen = false;
};

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_bad_config = 2, exit_checkpoint_mismatch = 3 };

/// Runs one subcommand; errors are reported on `err` as a JSON line.
int run_command(const RunRequest& request, std::ostream& err);

}  // namespace pahi
