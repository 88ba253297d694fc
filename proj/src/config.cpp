#include "ecgrobust/config.hpp"

#include <fstream>

#include <json.hpp>

#include "ecgrobust/errors.hpp"

namespace ecgrobust {

namespace {

// One visitation order for serialization, parsing and unknown-key rejection.
template <typename C, typename F>
void visit_fields(C& c, F&& f) {
  f("seed", c.seed);
  f("out_dir", c.out_dir);
  f("pack", c.pack);
  f("signal_dir", c.signal_dir);
  f("reference", c.reference);
  f("checkpoint", c.checkpoint);
  f("method", c.method);
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("warmup_epochs", c.warmup_epochs);
  f("train_epsilon", c.train_epsilon);
  f("lambda", c.lambda);
  f("beta", c.beta);
  f("eps_max", c.eps_max);
  f("lr", c.lr);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_eps", c.adam_eps);
  f("attack", c.attack);
  f("attack_epsilon", c.attack_epsilon);
  f("attack_steps", c.attack_steps);
  f("attack_alpha", c.attack_alpha);
  f("attack_random_start", c.attack_random_start);
  f("attack_perturb_padding", c.attack_perturb_padding);
  f("levels", c.levels);
  f("white_repeats", c.white_repeats);
  f("in_channels", c.in_channels);
  f("input_length", c.input_length);
  f("num_classes", c.num_classes);
  f("stem_channels", c.stem_channels);
  f("num_blocks", c.num_blocks);
  f("total_downsample", c.total_downsample);
  f("kernel_size", c.kernel_size);
  f("gn_groups", c.gn_groups);
  f("n_per_class", c.n_per_class);
  f("synth_length", c.synth_length);
  f("synth_classes", c.synth_classes);
  f("tune_grid", c.tune_grid);
  f("dump_index", c.dump_index);
  f("dump_lead", c.dump_lead);
}

}  // namespace

EcgNetConfig RunConfig::model_config() const {
  EcgNetConfig m;
  m.in_channels = in_channels;
  m.input_length = input_length;
  m.num_classes = num_classes;
  m.stem_channels = stem_channels;
  m.num_blocks = num_blocks;
  m.total_downsample = total_downsample;
  m.kernel_size = kernel_size;
  m.gn_groups = gn_groups;
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.method = method_from_name(method);
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.warmup_epochs = warmup_epochs;
  t.epsilon = train_epsilon;
  t.lambda = lambda;
  t.beta = beta;
  t.eps_max = eps_max;
  t.lr = lr;
  t.adam_beta1 = adam_beta1;
  t.adam_beta2 = adam_beta2;
  t.adam_eps = adam_eps;
  t.seed = seed;
  return t;
}

AttackConfig RunConfig::attack_config() const {
  AttackConfig a;
  a.epsilon = attack_epsilon;
  a.steps = attack_steps;
  a.alpha = attack_alpha;
  a.random_start = attack_random_start;
  a.perturb_padding = attack_perturb_padding;
  a.seed = seed;
  return a;
}

void merge_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config: malformed JSON in " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw DataError("config: top level must be an object");

  for (const auto& [key, value] : j.items()) {
    bool known = false;
    visit_fields(cfg, [&](const char* name, auto& field) {
      if (known || key != name) return;
      known = true;
      try {
        field = value.template get<std::decay_t<decltype(field)>>();
      } catch (const nlohmann::json::exception&) {
        throw ParameterError("config: bad value type for key '" + key + "'");
      }
    });
    if (!known) throw ParameterError("config: unknown key '" + key + "'");
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  RunConfig cfg;
  merge_config_file(cfg, path);
  return cfg;
}

void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& path) {
  nlohmann::json j;
  visit_fields(const_cast<RunConfig&>(cfg),
               [&](const char* name, auto& field) { j[name] = field; });
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("config: cannot write " + path.string());
  os << j.dump(2) << '\n';
}

std::vector<double> default_levels(NoiseKind kind) {
  if (kind == NoiseKind::kPgd) {
    return {0.0, 0.001, 0.003, 0.005, 0.007, 0.01, 0.03, 0.05, 0.1};
  }
  return {0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
}

std::vector<double> default_tune_grid(TrainMethod method) {
  if (method == TrainMethod::kNsr) {
    return {0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2};
  }
  if (method == TrainMethod::kJacob) {
    return {4.0, 14.0, 24.0, 34.0, 44.0, 54.0, 64.0, 74.0, 84.0};
  }
  throw ParameterError("tune: only nsr and jacob have tuning grids");
}

}  // namespace ecgrobust
