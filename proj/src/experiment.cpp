#include "pahi/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "pahi/artifacts.hpp"
#include "pahi/rng.hpp"

namespace pahi {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string join_path(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

// Reads known keys from one config object and rejects the rest.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return join_path(path_, key); }

  const json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void read(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) {
      require(v->is_number_unsigned(), at(key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const std::string& key, long long& out) {
    if (const json* v = find(key)) {
      require(v->is_number_integer(), at(key), "expected an integer");
      out = v->get<long long>();
    }
  }
  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      require(v->is_number(), at(key), "expected a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      require(v->is_boolean(), at(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      require(v->is_string(), at(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void read(const std::string& key, std::optional<std::uint64_t>& out) {
    if (const json* v = find(key)) {
      require(v->is_number_unsigned(), at(key), "expected a non-negative integer seed");
      out = v->get<std::uint64_t>();
    }
  }
  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(at(key), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void one_of(const std::string& value, std::initializer_list<const char*> allowed, const std::string& field) {
  std::string list;
  for (const char* a : allowed) {
    if (value == a) return;
    list += list.empty() ? a : std::string(" | ") + a;
  }
  throw ConfigError(field, "expected one of " + list + ", got '" + value + "'");
}

ScorerSpec parse_scorer(const json& j, const std::string& path) {
  ScorerSpec s;
  Fields f(j, path);
  f.read("name", s.name);
  f.read("kind", s.kind);
  f.read("gamma", s.gamma);
  f.read("rank", s.rank);
  f.read("temperature", s.temperature);
  f.read("correlation", s.correlation);
  f.read("seed", s.seed);
  f.finish();
  require(!s.name.empty(), f.at("name"), "must not be empty");
  one_of(s.kind, {"quadratic", "bilinear"}, f.at("kind"));
  require(s.gamma > 0.0, f.at("gamma"), "must be positive");
  require(s.rank >= 1, f.at("rank"), "must be at least 1");
  require(s.temperature > 0.0, f.at("temperature"), "must be positive");
  require(s.correlation >= 0.0 && s.correlation <= 1.0, f.at("correlation"), "must lie in [0, 1]");
  return s;
}

json scorer_json(const ScorerSpec& s) {
  json j = {{"name", s.name},
            {"kind", s.kind},
            {"gamma", s.gamma},
            {"rank", s.rank},
            {"temperature", s.temperature},
            {"correlation", s.correlation}};
  if (s.seed) j["seed"] = *s.seed;
  return j;
}

void check_schedule(const Fields& f, long long steps, std::size_t batch, double base_lr, double floor_lr,
                    long long warmup, long long eval_every, std::size_t validation_samples, const char* steps_key) {
  require(steps >= 0, f.at(steps_key), "must be non-negative");
  require(batch >= 1, f.at("batch"), "must be at least 1");
  require(base_lr > 0.0, f.at("base_lr"), "must be positive");
  require(floor_lr >= 0.0 && floor_lr <= base_lr, f.at("floor_lr"), "must lie in [0, base_lr]");
  require(warmup >= 0, f.at("warmup_steps"), "must be non-negative");
  require(eval_every >= 0, f.at("eval_every"), "must be non-negative (0 disables validation)");
  require(validation_samples >= 1, f.at("validation_samples"), "must be at least 1");
}

Pairing pairing_of(const std::string& s) {
  return s == "independent" ? Pairing::independent : Pairing::common_random_numbers;
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Fields root(j, "");
  root.read("seed", c.seed);
  root.read("sigma_convention", c.sigma_convention);
  one_of(c.sigma_convention, {"stddev", "squared"}, "sigma_convention");

  if (const json* v = root.find("prompts")) {
    Fields f(*v, "prompts");
    auto& p = c.prompts;
    f.read("count", p.count);
    f.read("embedding_dim", p.embedding_dim);
    f.read("train", p.train);
    f.read("validation", p.validation);
    f.read("test", p.test);
    f.read("coherence", p.coherence);
    f.read("seed", p.seed);
    f.finish();
  }
  {
    const auto& p = c.prompts;
    require(p.embedding_dim >= 1, "prompts.embedding_dim", "must be at least 1");
    require(p.train >= 1, "prompts.train", "must be at least 1");
    require(p.train + p.validation + p.test == p.count, "prompts.count",
            "must equal train + validation + test (" + std::to_string(p.train + p.validation + p.test) + ")");
    require(p.coherence >= 0.0 && p.coherence < 1.0, "prompts.coherence", "must lie in [0, 1)");
  }

  if (const json* v = root.find("generator")) {
    Fields f(*v, "generator");
    auto& g = c.generator;
    f.read("kind", g.kind);
    f.read("noise_dim", g.noise_dim);
    f.read("hidden", g.hidden);
    f.read("alpha", g.alpha);
    f.read("seed", g.seed);
    f.finish();
  }
  one_of(c.generator.kind, {"identity", "linear", "mlp"}, "generator.kind");
  require(c.generator.noise_dim >= 1, "generator.noise_dim", "must be at least 1");
  require(c.generator.hidden >= 1, "generator.hidden", "must be at least 1");
  require(c.generator.alpha > 0.0 && c.generator.alpha <= 1.0, "generator.alpha", "must lie in (0, 1]");

  if (const json* v = root.find("targets")) {
    Fields f(*v, "targets");
    f.read("offset", c.targets.offset);
    f.read("spread", c.targets.spread);
    f.read("centered", c.targets.centered);
    f.read("seed", c.targets.seed);
    f.finish();
  }
  require(c.targets.spread >= 0.0, "targets.spread", "must be non-negative");

  if (const json* v = root.find("training_scorer")) c.training_scorer = parse_scorer(*v, "training_scorer");
  if (const json* v = root.find("eval_scorers")) {
    require(v->is_array(), "eval_scorers", "expected a list of scorers");
    require(!v->empty(), "eval_scorers", "must name at least one scorer");
    c.eval_scorers.clear();
    std::set<std::string> names;
    for (std::size_t i = 0; i < v->size(); ++i) {
      const std::string path = "eval_scorers." + std::to_string(i);
      c.eval_scorers.push_back(parse_scorer((*v)[i], path));
      require(names.insert(c.eval_scorers.back().name).second, path + ".name", "duplicate scorer name");
    }
  }
  for (std::size_t i = 0; i < c.eval_scorers.size(); ++i) {
    const auto& s = c.eval_scorers[i];
    if (s.name == c.training_scorer.name) {
      require(s == c.training_scorer, "eval_scorers." + std::to_string(i),
              "shares the training scorer's name but not its settings");
    }
  }

  if (const json* v = root.find("hi")) {
    Fields f(*v, "hi");
    auto& h = c.hi;
    f.read("steps", h.steps);
    f.read("batch", h.batch);
    f.read("base_lr", h.base_lr);
    f.read("floor_lr", h.floor_lr);
    f.read("warmup_steps", h.warmup_steps);
    f.read("pairing", h.pairing);
    f.read("eval_every", h.eval_every);
    f.read("validation_samples", h.validation_samples);
    f.finish();
    check_schedule(f, h.steps, h.batch, h.base_lr, h.floor_lr, h.warmup_steps, h.eval_every, h.validation_samples,
                   "steps");
    one_of(h.pairing, {"crn", "independent"}, f.at("pairing"));
  }

  if (const json* v = root.find("pahi")) {
    Fields f(*v, "pahi");
    auto& p = c.pahi;
    f.read("hidden", p.hidden);
    f.read("pretrain", p.pretrain);
    f.read("pretrain_steps", p.pretrain_steps);
    f.read("pretrain_lr", p.pretrain_lr);
    f.read("pretrain_warmup", p.pretrain_warmup);
    f.read("train_steps", p.train_steps);
    f.read("batch", p.batch);
    f.read("base_lr", p.base_lr);
    f.read("floor_lr", p.floor_lr);
    f.read("warmup_steps", p.warmup_steps);
    f.read("pairing", p.pairing);
    f.read("eval_every", p.eval_every);
    f.read("patience", p.patience);
    f.read("validation_samples", p.validation_samples);
    f.finish();
    check_schedule(f, p.train_steps, p.batch, p.base_lr, p.floor_lr, p.warmup_steps, p.eval_every,
                   p.validation_samples, "train_steps");
    one_of(p.pairing, {"crn", "independent"}, f.at("pairing"));
    require(p.hidden >= 1, f.at("hidden"), "must be at least 1");
    require(p.pretrain_steps >= 0, f.at("pretrain_steps"), "must be non-negative");
    require(p.pretrain_lr > 0.0, f.at("pretrain_lr"), "must be positive");
    require(p.pretrain_warmup >= 0, f.at("pretrain_warmup"), "must be non-negative");
    require(p.patience >= 1, f.at("patience"), "must be at least 1");
  }

  if (const json* v = root.find("eval")) {
    Fields f(*v, "eval");
    f.read("samples_per_prompt", c.eval.samples_per_prompt);
    f.read("runs", c.eval.runs);
    f.read("dump_pairs", c.eval.dump_pairs);
    f.finish();
    require(c.eval.samples_per_prompt >= 1, f.at("samples_per_prompt"), "must be at least 1");
    require(c.eval.runs >= 1, f.at("runs"), "must be at least 1");
  }

  if (const json* v = root.find("bench")) {
    Fields f(*v, "bench");
    f.read("reps", c.bench.reps);
    f.read("warmup", c.bench.warmup);
    f.read("blocks", c.bench.blocks);
    f.finish();
    require(c.bench.reps >= 100, f.at("reps"), "must be at least 100");
    require(c.bench.blocks >= 1, f.at("blocks"), "must be at least 1");
  }

  root.finish();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["sigma_convention"] = c.sigma_convention;
  const auto& p = c.prompts;
  j["prompts"] = {{"count", p.count},       {"embedding_dim", p.embedding_dim}, {"train", p.train},
                  {"validation", p.validation}, {"test", p.test},             {"coherence", p.coherence}};
  if (p.seed) j["prompts"]["seed"] = *p.seed;
  const auto& g = c.generator;
  j["generator"] = {{"kind", g.kind}, {"noise_dim", g.noise_dim}, {"hidden", g.hidden}, {"alpha", g.alpha}};
  if (g.seed) j["generator"]["seed"] = *g.seed;
  j["targets"] = {{"offset", c.targets.offset}, {"spread", c.targets.spread}, {"centered", c.targets.centered}};
  if (c.targets.seed) j["targets"]["seed"] = *c.targets.seed;
  j["training_scorer"] = scorer_json(c.training_scorer);
  j["eval_scorers"] = json::array();
  for (const auto& s : c.eval_scorers) j["eval_scorers"].push_back(scorer_json(s));
  const auto& h = c.hi;
  j["hi"] = {{"steps", h.steps},
             {"batch", h.batch},
             {"base_lr", h.base_lr},
             {"floor_lr", h.floor_lr},
             {"warmup_steps", h.warmup_steps},
             {"pairing", h.pairing},
             {"eval_every", h.eval_every},
             {"validation_samples", h.validation_samples}};
  const auto& a = c.pahi;
  j["pahi"] = {{"hidden", a.hidden},
               {"pretrain", a.pretrain},
               {"pretrain_steps", a.pretrain_steps},
               {"pretrain_lr", a.pretrain_lr},
               {"pretrain_warmup", a.pretrain_warmup},
               {"train_steps", a.train_steps},
               {"batch", a.batch},
               {"base_lr", a.base_lr},
               {"floor_lr", a.floor_lr},
               {"warmup_steps", a.warmup_steps},
               {"pairing", a.pairing},
               {"eval_every", a.eval_every},
               {"patience", a.patience},
               {"validation_samples", a.validation_samples}};
  j["eval"] = {{"samples_per_prompt", c.eval.samples_per_prompt},
               {"runs", c.eval.runs},
               {"dump_pairs", c.eval.dump_pairs}};
  j["bench"] = {{"reps", c.bench.reps}, {"warmup", c.bench.warmup}, {"blocks", c.bench.blocks}};
  return j;
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError(std::string(assignment), "override must look like key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &j;
  std::string path;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(key, "empty path component in override");
    path = join_path(path, part);
    json* next = nullptr;
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(part);
      } catch (const std::exception&) {
        throw ConfigError(path, "expected a list index");
      }
      if (idx >= node->size()) throw ConfigError(path, "index out of range");
      next = &(*node)[idx];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) throw ConfigError(path, "cannot descend into a scalar");
      next = &(*node)[part];
    }
    node = next;
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string(), "cannot read config file");
  std::stringstream buf;
  buf << in.rdbuf();
  json j = json::parse(buf.str(), nullptr, false);
  if (j.is_discarded()) throw ConfigError(path.string(), "not valid JSON");
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

SigmaConvention sigma_convention(const ExperimentConfig& config) {
  return config.sigma_convention == "squared" ? SigmaConvention::squared : SigmaConvention::stddev;
}

std::uint64_t component_seed(const ExperimentConfig& config, const std::optional<std::uint64_t>& explicit_seed,
                             std::string_view component) {
  return explicit_seed ? *explicit_seed : derive_seed(config.seed, component);
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

json Experiment::frozen_hashes() const {
  json scorers = json::object();
  for (const auto& s : eval_scorers) scorers[s.name()] = hex64(s.hash());
  return {{"prompts", hex64(prompts.hash())},
          {"generator", hex64(generator.hash())},
          {"training_scorer", hex64(training_scorer.hash())},
          {"eval_scorers", scorers}};
}

Experiment build_experiment(const ExperimentConfig& c) {
  const auto& p = c.prompts;
  auto table = make_prompt_table(p.count, p.embedding_dim, component_seed(c, p.seed, "prompts"),
                                 {p.train, p.validation, p.test}, p.coherence);

  const auto& g = c.generator;
  const auto gseed = component_seed(c, g.seed, "generator");
  auto eps = g.kind == "identity" ? EpsilonPredictor::zero(g.noise_dim, p.embedding_dim)
             : g.kind == "linear" ? EpsilonPredictor::seeded_linear(g.noise_dim, p.embedding_dim, gseed)
                                  : EpsilonPredictor::seeded_mlp(g.noise_dim, p.embedding_dim, g.hidden, gseed);
  FrozenGenerator generator(std::move(eps), {g.alpha});

  const auto& t = c.targets;
  auto targets = TargetMap::seeded(p.embedding_dim, g.noise_dim, t.offset, t.spread,
                                   component_seed(c, t.seed, "targets"),
                                   t.centered ? mean_embedding(table) : std::vector<double>{});

  auto make = [&](const ScorerSpec& s) {
    if (s.kind == "quadratic") return make_quadratic_scorer(s.name, table, targets, s.gamma);
    return make_bilinear_scorer(s.name, g.noise_dim, p.embedding_dim, s.rank, s.temperature, s.correlation, targets,
                                component_seed(c, s.seed, "scorer/" + s.name));
  };
  auto training = make(c.training_scorer);
  std::vector<Scorer> eval;
  for (const auto& s : c.eval_scorers) eval.push_back(make(s));
  return {c, std::move(table), std::move(generator), std::move(targets), std::move(training), std::move(eval)};
}

NoisePredictor initial_predictor(const Experiment& e) {
  return NoisePredictor::seeded(e.prompts.embedding_dim, e.config.pahi.hidden, e.generator.noise_dim(),
                                component_seed(e.config, std::nullopt, "pahi/init"));
}

HiConfig hi_config(const ExperimentConfig& c) {
  HiConfig h;
  h.steps = c.hi.steps;
  h.batch = c.hi.batch;
  h.base_lr = c.hi.base_lr;
  h.floor_lr = c.hi.floor_lr;
  h.warmup_steps = c.hi.warmup_steps;
  h.pairing = pairing_of(c.hi.pairing);
  h.eval_every = c.hi.eval_every;
  h.validation_samples = c.hi.validation_samples;
  h.convention = sigma_convention(c);
  return h;
}

PretrainConfig pretrain_config(const ExperimentConfig& c) {
  PretrainConfig p;
  p.steps = c.pahi.pretrain_steps;
  p.batch = c.pahi.batch;
  p.base_lr = c.pahi.pretrain_lr;
  p.floor_lr = std::min(c.pahi.floor_lr, c.pahi.pretrain_lr);
  p.warmup_steps = c.pahi.pretrain_warmup;
  p.convention = sigma_convention(c);
  return p;
}

PahiConfig pahi_config(const ExperimentConfig& c) {
  PahiConfig p;
  p.steps = c.pahi.train_steps;
  p.batch = c.pahi.batch;
  p.base_lr = c.pahi.base_lr;
  p.floor_lr = c.pahi.floor_lr;
  p.warmup_steps = c.pahi.warmup_steps;
  p.pairing = pairing_of(c.pahi.pairing);
  p.eval_every = c.pahi.eval_every;
  p.patience = c.pahi.patience;
  p.validation_samples = c.pahi.validation_samples;
  p.convention = sigma_convention(c);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "pahi-lab-checkpoint";

json arrays_json(std::span<const NamedArray> arrays) {
  json out = json::array();
  for (const auto& a : arrays) out.push_back({{"name", a.name}, {"shape", a.shape}, {"values", a.values}});
  return out;
}

NamedArray array_of(const std::string& name, const Tensor& t) { return {name, t.shape(), t.to_vector()}; }

const NamedArray& find_array(std::span<const NamedArray> arrays, const std::string& name) {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw CheckpointMismatch("checkpoint has no parameter array '" + name + "'");
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  json j = {{"format", kCheckpointFormat},
            {"version", c.version},
            {"kind", c.kind},
            {"step", c.step},
            {"best_validation_loss", c.best_validation_loss ? json(*c.best_validation_loss) : json(nullptr)},
            {"config", c.config},
            {"frozen", c.frozen},
            {"parameters", arrays_json(c.parameters)}};
  if (!c.frozen_weights.is_null()) j["frozen_weights"] = c.frozen_weights;
  return j.dump(1) + "\n";
}

Checkpoint decode_checkpoint(std::string_view text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("format", "") != kCheckpointFormat) {
    throw CheckpointMismatch("not a pahi-lab checkpoint");
  }
  const int version = j.value("version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointMismatch("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  try {
    c.version = version;
    c.kind = j.at("kind").get<std::string>();
    c.step = j.at("step").get<long long>();
    if (!j.at("best_validation_loss").is_null()) c.best_validation_loss = j["best_validation_loss"].get<double>();
    c.config = j.at("config");
    c.frozen = j.at("frozen");
    for (const auto& a : j.at("parameters")) {
      c.parameters.push_back(
          {a.at("name").get<std::string>(), a.at("shape").get<Shape>(), a.at("values").get<std::vector<double>>()});
    }
    if (j.contains("frozen_weights")) c.frozen_weights = j["frozen_weights"];
  } catch (const json::exception& e) {
    throw CheckpointMismatch(std::string("malformed checkpoint: ") + e.what());
  }
  return c;
}

void verify_checkpoint(const Checkpoint& c, const Experiment& e) {
  const json current = e.frozen_hashes();
  for (const char* key : {"prompts", "generator", "training_scorer"}) {
    if (!c.frozen.contains(key) || c.frozen[key] != current[key]) {
      throw CheckpointMismatch(std::string("frozen ") + key + " hash " + c.frozen.value(key, std::string("<missing>")) +
                               " in checkpoint does not match " + current[key].get<std::string>() +
                               " from the current config");
    }
  }
}

std::vector<NamedArray> predictor_arrays(const NoisePredictor& predictor) {
  std::vector<NamedArray> out;
  for (const auto& p : predictor.parameters()) out.push_back(array_of(p.name, p.tensor));
  return out;
}

NoisePredictor predictor_from_arrays(std::span<const NamedArray> arrays, const Experiment& e) {
  const auto& w1 = find_array(arrays, "mu_head.w1");
  if (w1.shape.size() != 2) throw CheckpointMismatch("mu_head.w1 is not a matrix");
  auto predictor = NoisePredictor::zeros(e.prompts.embedding_dim, w1.shape[1], e.generator.noise_dim());
  for (auto& p : predictor.parameters()) {
    const auto& a = find_array(arrays, p.name);
    if (a.shape != p.tensor.shape()) {
      throw CheckpointMismatch("parameter '" + p.name + "' has shape " + shape_string(a.shape) + ", expected " +
                               shape_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(a.values.begin(), a.values.end(), dst.begin());
  }
  return predictor;
}

NoiseDistribution distribution_from_arrays(std::span<const NamedArray> arrays) {
  return NoiseDistribution::from_values(find_array(arrays, "mu").values, find_array(arrays, "rho").values);
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

namespace {

struct RunContext {
  const RunRequest& request;
  const Experiment& experiment;
  fs::path out;
  std::vector<MetricsRow> rows;
  json summary;

  const ExperimentConfig& config() const { return experiment.config; }
  std::uint64_t seed(std::string_view component) const {
    return component_seed(experiment.config, std::nullopt, component);
  }
};

Checkpoint new_checkpoint(const RunContext& ctx, std::string kind) {
  Checkpoint c;
  c.kind = std::move(kind);
  c.config = config_to_json(ctx.config());
  c.frozen = ctx.experiment.frozen_hashes();
  if (ctx.request.embed_frozen) {
    std::vector<NamedArray> weights;
    for (const auto& [name, t] : ctx.experiment.generator.predictor().weights()) weights.push_back(array_of(name, t));
    c.frozen_weights = {{"generator_alpha", ctx.experiment.generator.schedule().alpha},
                        {"generator", arrays_json(weights)}};
  }
  return c;
}

Checkpoint load_checkpoint(const RunContext& ctx) {
  const auto& path = *ctx.request.checkpoint;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  auto c = decode_checkpoint(buf.str());
  verify_checkpoint(c, ctx.experiment);
  return c;
}

void add_trace(RunContext& ctx, const std::vector<TraceRow>& trace) {
  for (const auto& t : trace) ctx.rows.push_back({t.step, t.split, t.scorer, t.loss, std::nullopt, t.lr, std::nullopt});
}

json run_pretrain(RunContext& ctx, NoisePredictor& predictor) {
  const auto& e = ctx.experiment;
  auto decoder = EmbeddingDecoder::seeded(e.generator.noise_dim(), ctx.config().pahi.hidden, e.prompts.embedding_dim,
                                          ctx.seed("pahi/decoder"));
  auto report = pretrain(predictor, decoder, e.prompts, pretrain_config(ctx.config()), ctx.seed("pahi/pretrain"));
  for (const auto& s : report.steps) {
    ctx.rows.push_back({s.step, "pretrain", "kl", s.kl, std::nullopt, s.lr, std::nullopt});
    ctx.rows.push_back({s.step, "pretrain", "mse", s.mse, std::nullopt, s.lr, std::nullopt});
    ctx.rows.push_back({s.step, "pretrain", "total", s.total, std::nullopt, s.lr, std::nullopt});
  }
  return {{"steps", report.steps.size()},
          {"initial_mse", report.initial_mse},
          {"final_mse", report.final_mse},
          {"initial_kl_per_dim", report.initial_kl_per_dim},
          {"final_kl_per_dim", report.final_kl_per_dim}};
}

void cmd_pretrain(RunContext& ctx) {
  auto predictor = initial_predictor(ctx.experiment);
  ctx.summary["pretrain"] = run_pretrain(ctx, predictor);
  auto ckpt = new_checkpoint(ctx, "pretrain");
  ckpt.parameters = predictor_arrays(predictor);
  ckpt.step = ctx.config().pahi.pretrain_steps;
  atomic_write(ctx.out / "checkpoint.json", encode_checkpoint(ckpt));
}

void cmd_train_hi(RunContext& ctx) {
  const auto& e = ctx.experiment;
  auto result = hi_optimize(e.generator, e.training_scorer, e.prompts, hi_config(ctx.config()), ctx.seed("hi"),
                            e.eval_scorers);
  add_trace(ctx, result.trace);
  auto ckpt = new_checkpoint(ctx, "hi");
  ckpt.parameters = {array_of("mu", result.distribution.mu), array_of("rho", result.distribution.rho)};
  ckpt.step = result.steps_run;
  atomic_write(ctx.out / "checkpoint.json", encode_checkpoint(ckpt));
  ctx.summary["steps_run"] = result.steps_run;
  ctx.summary["mu"] = result.distribution.mu.to_vector();
  ctx.summary["sigma"] = result.distribution.sigma();
}

void cmd_train_pahi(RunContext& ctx) {
  const auto& e = ctx.experiment;
  NoisePredictor predictor;
  if (ctx.request.checkpoint) {
    auto c = load_checkpoint(ctx);
    if (c.kind == "hi") throw std::invalid_argument("train-pahi needs a pretrain or pahi checkpoint, got hi");
    predictor = predictor_from_arrays(c.parameters, e);
    ctx.summary["initialized_from"] = c.kind;
  } else {
    predictor = initial_predictor(e);
    if (ctx.config().pahi.pretrain && ctx.config().pahi.pretrain_steps > 0) {
      ctx.summary["pretrain"] = run_pretrain(ctx, predictor);
    }
    ctx.summary["initialized_from"] = ctx.summary.contains("pretrain") ? "pretrain" : "raw";
  }
  auto result = pahi_train(predictor, e.generator, e.training_scorer, e.prompts, pahi_config(ctx.config()),
                           ctx.seed("pahi/train"), e.eval_scorers);
  add_trace(ctx, result.trace);
  auto ckpt = new_checkpoint(ctx, "pahi");
  ckpt.parameters = predictor_arrays(result.best);
  ckpt.step = result.best_step;
  if (!std::isnan(result.best_validation_loss)) ckpt.best_validation_loss = result.best_validation_loss;
  atomic_write(ctx.out / "checkpoint.json", encode_checkpoint(ckpt));
  ctx.summary["best_step"] = result.best_step;
  ctx.summary["best_validation_loss"] = ckpt.best_validation_loss ? json(*ckpt.best_validation_loss) : json(nullptr);
  ctx.summary["steps_run"] = result.steps_run;
  ctx.summary["stopped_early"] = result.stopped_early;
  ctx.summary["warning"] = result.warning ? json(*result.warning) : json(nullptr);
}

void cmd_eval(RunContext& ctx) {
  const auto& e = ctx.experiment;
  const auto& spec = ctx.config().eval;
  if (spec.dump_pairs > 0) {
    try {
      square_side(e.generator.image_dim());
    } catch (const std::invalid_argument& err) {
      throw ConfigError("eval.dump_pairs", std::string(err.what()) + "; set eval.dump_pairs=0 to skip image dumps");
    }
  }
  auto candidate = Candidate::standard();
  std::string kind = "standard";
  if (ctx.request.checkpoint) {
    auto c = load_checkpoint(ctx);
    kind = c.kind;
    candidate = c.kind == "hi" ? Candidate::distribution(distribution_from_arrays(c.parameters))
                               : Candidate::predictor(predictor_from_arrays(c.parameters, e));
  }
  const auto test = e.prompts.test_prompts();
  if (test.empty()) throw ConfigError("prompts.test", "eval needs at least one test prompt");
  EvalOptions options;
  options.samples_per_prompt = spec.samples_per_prompt;
  options.convention = sigma_convention(ctx.config());

  std::vector<EvalReport> reports;
  json runs = json::array();
  for (std::size_t r = 0; r < spec.runs; ++r) {
    const auto seed = ctx.seed("eval/run-" + std::to_string(r));
    auto draws = draw_eval_pairs(candidate, e.generator, test, options, seed);
    reports.push_back(score_eval_draws(draws, e.eval_scorers, test.size(), spec.samples_per_prompt, seed));
    json scorers = json::object();
    for (const auto& s : reports.back().scorers) {
      ctx.rows.push_back({static_cast<long long>(r), "test", s.scorer, std::nullopt, s.win_rate, std::nullopt,
                          std::nullopt});
      scorers[s.scorer] = {{"win_rate", s.win_rate},
                           {"wins", s.wins},
                           {"comparisons", s.comparisons},
                           {"mean_baseline_score", s.mean_baseline_score},
                           {"mean_candidate_score", s.mean_candidate_score}};
    }
    runs.push_back({{"run", r}, {"seed", hex64(seed)}, {"scorers", scorers}});

    if (r == 0) {
      const std::size_t d = e.generator.image_dim();
      const std::size_t n = std::min(spec.dump_pairs, draws.prompts.size());
      const auto base = draws.baseline_images.data();
      const auto cand = draws.candidate_images.data();
      for (std::size_t i = 0; i < n; ++i) {
        // Spread the dumps across prompts rather than taking one prompt's samples.
        const std::size_t idx = (i * draws.prompts.size()) / n;
        char name[32];
        std::snprintf(name, sizeof name, "pair-%03zu.pgm", i);
        dump_image_pair(base.subspan(idx * d, d), cand.subspan(idx * d, d), ctx.out / "images" / name);
      }
    }
  }
  auto agg = aggregate_runs(reports);
  json aggregate = json::object();
  for (const auto& a : agg.scorers) {
    aggregate[a.scorer] = {{"mean", a.mean}, {"std", a.stddev ? json(*a.stddev) : json(nullptr)}};
  }
  const std::size_t comparisons = test.size() * spec.samples_per_prompt;
  const auto band = binomial_band(comparisons);
  ctx.summary["candidate"] = kind;
  ctx.summary["comparisons_per_run"] = comparisons;
  ctx.summary["runs"] = runs;
  ctx.summary["aggregate"] = aggregate;
  ctx.summary["null_band_99"] = {band.lower, band.upper};
}

void cmd_bench(RunContext& ctx) {
  const auto& e = ctx.experiment;
  NoisePredictor predictor = initial_predictor(e);
  if (ctx.request.checkpoint) {
    auto c = load_checkpoint(ctx);
    if (c.kind == "hi") throw std::invalid_argument("bench needs a pretrain or pahi checkpoint, got hi");
    predictor = predictor_from_arrays(c.parameters, e);
  }
  BenchOptions options;
  options.reps = ctx.config().bench.reps;
  options.warmup = ctx.config().bench.warmup;
  options.blocks = ctx.config().bench.blocks;
  options.convention = sigma_convention(ctx.config());
  auto t = bench_inference(e.generator, &predictor, e.prompts.prompts, options, ctx.seed("bench"));
  ctx.rows.push_back({std::nullopt, "bench", "plain", std::nullopt, std::nullopt, std::nullopt, t.plain_ms});
  ctx.rows.push_back({std::nullopt, "bench", "pahi", std::nullopt, std::nullopt, std::nullopt, t.augmented_ms});
  ctx.summary["plain_ms"] = t.plain_ms;
  ctx.summary["pahi_ms"] = t.augmented_ms;
  ctx.summary["overhead"] = t.overhead;
  ctx.summary["reps"] = t.reps;
  ctx.summary["blocks"] = options.blocks;
  ctx.summary["batch_size"] = t.batch_size;
  ctx.summary["prompt_count"] = t.prompt_count;
}

void report_error(std::ostream& err, int code, const char* kind, const std::string& message,
                  const std::string& field = {}) {
  json j = {{"error", kind}, {"exit_code", code}, {"message", message}};
  if (!field.empty()) j["field"] = field;
  err << j.dump() << "\n";
}

}  // namespace

int run_command(const RunRequest& request, std::ostream& err) {
  try {
    static const std::set<std::string> commands = {"pretrain", "train-hi", "train-pahi", "eval", "bench"};
    if (!commands.contains(request.command)) throw std::invalid_argument("unknown subcommand '" + request.command + "'");

    fs::path out = request.out;
    if (const char* env = std::getenv("PAHI_LAB_OUT"); env != nullptr && *env != '\0') out = env;

    auto config = load_config(request.config, request.overrides);
    if (request.seed) config.seed = *request.seed;
    const auto experiment = build_experiment(config);

    RunContext ctx{request, experiment, out, {}, json::object()};
    ctx.summary["command"] = request.command;
    ctx.summary["seed"] = config.seed;
    ctx.summary["frozen"] = experiment.frozen_hashes();

    if (request.command == "pretrain") cmd_pretrain(ctx);
    if (request.command == "train-hi") cmd_train_hi(ctx);
    if (request.command == "train-pahi") cmd_train_pahi(ctx);
    if (request.command == "eval") cmd_eval(ctx);
    if (request.command == "bench") cmd_bench(ctx);

    atomic_write(out / "config.json", config_to_json(config).dump(2) + "\n");
    write_metrics(out / "metrics.csv", ctx.rows);
    atomic_write(out / "summary.json", ctx.summary.dump(2) + "\n");
    return exit_ok;
  } catch (const ConfigError& e) {
    report_error(err, exit_bad_config, "invalid_config", e.what(), e.field());
    return exit_bad_config;
  } catch (const CheckpointMismatch& e) {
    report_error(err, exit_checkpoint_mismatch, "checkpoint_mismatch", e.what());
    return exit_checkpoint_mismatch;
  } catch (const std::exception& e) {
    report_error(err, exit_failure, "failure", e.what());
    return exit_failure;
  }
}

}  // namespace pahi
