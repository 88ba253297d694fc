// Command-line front end: preprocess, synth, train, attack, evaluate, tune,
// dump-signal. Configuration comes from defaults, then an optional JSON
// config file, then per-key flag overrides; the effective configuration is
// echoed to <out_dir>/config.resolved.json.

#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ecgrobust/checkpoint.hpp"
#include "ecgrobust/config.hpp"
#include "ecgrobust/data.hpp"
#include "ecgrobust/defenses.hpp"
#include "ecgrobust/errors.hpp"
#include "ecgrobust/eval.hpp"
#include "ecgrobust/rng.hpp"

namespace fs = std::filesystem;
using namespace ecgrobust;

namespace {

struct SubCtx {
  CLI::App* cmd = nullptr;
  std::string config_path;
  RunConfig slots;
  std::vector<std::function<void(RunConfig&)>> apply;
  std::function<void(const RunConfig&)> run;
};

template <typename T>
void opt(SubCtx& ctx, const std::string& key, T RunConfig::*member, const char* desc) {
  CLI::Option* o = ctx.cmd->add_option("--" + key, ctx.slots.*member, desc);
  ctx.apply.push_back([o, member, &ctx](RunConfig& c) {
    if (o->count() > 0) c.*member = ctx.slots.*member;
  });
}

void add_all_options(SubCtx& ctx) {
  ctx.cmd->add_option("--config", ctx.config_path, "JSON configuration file");
  opt(ctx, "seed", &RunConfig::seed, "master seed");
  opt(ctx, "out_dir", &RunConfig::out_dir, "output directory");
  opt(ctx, "pack", &RunConfig::pack, "packed dataset path");
  opt(ctx, "signal_dir", &RunConfig::signal_dir, "directory of <id>.csv signals");
  opt(ctx, "reference", &RunConfig::reference, "REFERENCE.csv path");
  opt(ctx, "checkpoint", &RunConfig::checkpoint, "model checkpoint path");
  opt(ctx, "method", &RunConfig::method, "training method: ce|adv|jacob|nsr");
  opt(ctx, "epochs", &RunConfig::epochs, "training epochs");
  opt(ctx, "batch_size", &RunConfig::batch_size, "batch size");
  opt(ctx, "warmup_epochs", &RunConfig::warmup_epochs, "epochs before defenses activate");
  opt(ctx, "train_epsilon", &RunConfig::train_epsilon, "max noise level for adversarial training");
  opt(ctx, "lambda", &RunConfig::lambda, "Jacobian regularization coefficient");
  opt(ctx, "beta", &RunConfig::beta, "NSR regularization coefficient");
  opt(ctx, "eps_max", &RunConfig::eps_max, "NSR noise bound");
  opt(ctx, "lr", &RunConfig::lr, "learning rate");
  opt(ctx, "adam_beta1", &RunConfig::adam_beta1, "Adam beta1");
  opt(ctx, "adam_beta2", &RunConfig::adam_beta2, "Adam beta2");
  opt(ctx, "adam_eps", &RunConfig::adam_eps, "Adam epsilon");
  opt(ctx, "attack", &RunConfig::attack, "noise kind: pgd|white|none");
  opt(ctx, "attack_epsilon", &RunConfig::attack_epsilon, "attack noise level");
  opt(ctx, "attack_steps", &RunConfig::attack_steps, "PGD steps");
  opt(ctx, "attack_alpha", &RunConfig::attack_alpha, "PGD step size (0 = auto)");
  opt(ctx, "attack_random_start", &RunConfig::attack_random_start, "random start inside the ball");
  opt(ctx, "attack_perturb_padding", &RunConfig::attack_perturb_padding,
      "also perturb padded samples");
  opt(ctx, "levels", &RunConfig::levels, "noise levels for evaluate (starts at 0)");
  opt(ctx, "white_repeats", &RunConfig::white_repeats, "white-noise draws per level");
  opt(ctx, "in_channels", &RunConfig::in_channels, "model input channels");
  opt(ctx, "input_length", &RunConfig::input_length, "model input length");
  opt(ctx, "num_classes", &RunConfig::num_classes, "number of classes");
  opt(ctx, "stem_channels", &RunConfig::stem_channels, "stem output channels");
  opt(ctx, "num_blocks", &RunConfig::num_blocks, "doubling conv blocks");
  opt(ctx, "total_downsample", &RunConfig::total_downsample, "overall time downsampling");
  opt(ctx, "kernel_size", &RunConfig::kernel_size, "conv kernel size (odd)");
  opt(ctx, "gn_groups", &RunConfig::gn_groups, "group-norm groups");
  opt(ctx, "n_per_class", &RunConfig::n_per_class, "synthetic records per class");
  opt(ctx, "synth_length", &RunConfig::synth_length, "synthetic window length");
  opt(ctx, "synth_classes", &RunConfig::synth_classes, "synthetic class count");
  opt(ctx, "tune_grid", &RunConfig::tune_grid, "coefficient grid for tune");
  opt(ctx, "dump_index", &RunConfig::dump_index, "record index for dump-signal");
  opt(ctx, "dump_lead", &RunConfig::dump_lead, "lead index for dump-signal");
}

RunConfig resolve(SubCtx& ctx) {
  RunConfig cfg;
  if (!ctx.config_path.empty()) merge_config_file(cfg, ctx.config_path);
  for (auto& f : ctx.apply) f(cfg);
  fs::create_directories(cfg.out_dir);
  write_resolved_config(cfg, fs::path(cfg.out_dir) / "config.resolved.json");
  return cfg;
}

void require_key(const std::string& value, const char* key) {
  if (value.empty()) {
    throw ParameterError(std::string("missing required key '") + key + "'");
  }
}

DatasetSplit load_split(const RunConfig& cfg, std::int64_t num_classes) {
  require_key(cfg.pack, "pack");
  std::vector<PreparedRecord> records = load_pack(cfg.pack);
  return split_and_balance(std::move(records), cfg.seed, static_cast<int>(num_classes));
}

void run_preprocess(const RunConfig& cfg) {
  require_key(cfg.signal_dir, "signal_dir");
  require_key(cfg.reference, "reference");
  const std::vector<EcgRecord> raw = load_dataset(cfg.signal_dir, cfg.reference);
  std::vector<PreparedRecord> prepared;
  std::size_t multi = 0;
  for (const EcgRecord& rec : raw) {
    if (rec.labels.size() != 1) {
      ++multi;
      continue;
    }
    prepared.push_back({rec.id, rec.labels[0], prepare_leads(rec.leads, cfg.input_length)});
  }
  if (prepared.empty()) throw DataError("preprocess: no single-label records found");
  const fs::path out = fs::path(cfg.out_dir) / "dataset.pack";
  save_pack(out, prepared);
  std::cout << "preprocess: " << prepared.size() << " records kept, " << multi
            << " multi-label records dropped -> " << out.string() << "\n";
}

void run_synth(const RunConfig& cfg) {
  const auto records =
      synth_dataset(cfg.n_per_class, cfg.synth_length, cfg.synth_classes, cfg.seed);
  const fs::path out = fs::path(cfg.out_dir) / "dataset.pack";
  save_pack(out, records);
  std::cout << "synth: " << records.size() << " records (" << cfg.synth_classes
            << " classes) -> " << out.string() << "\n";
}

void run_train(const RunConfig& cfg) {
  const EcgNetConfig mcfg = cfg.model_config();
  const TrainConfig tcfg = cfg.train_config();
  DatasetSplit split = load_split(cfg, mcfg.num_classes);

  EcgNet net(mcfg, cfg.seed);
  const TrainResult result = train(net, split, tcfg);

  std::map<std::string, std::string> meta;
  meta["method"] = cfg.method;
  meta["seed"] = std::to_string(cfg.seed);
  meta["best_epoch"] = std::to_string(result.best_epoch);
  meta["best_val_f1"] = format_double(result.best_val_f1);
  if (tcfg.method == TrainMethod::kAdv) meta["epsilon"] = format_double(tcfg.epsilon);
  if (tcfg.method == TrainMethod::kJacob) meta["lambda"] = format_double(tcfg.lambda);
  if (tcfg.method == TrainMethod::kNsr) meta["beta"] = format_double(tcfg.beta);

  save_checkpoint(net, fs::path(cfg.out_dir) / "checkpoint.bin", meta);
  write_history_csv(result.history, fs::path(cfg.out_dir) / "history.csv");
  std::cout << "train: method=" << cfg.method << " best_epoch=" << result.best_epoch
            << " best_val_f1=" << format_double(result.best_val_f1) << "\n";
}

void run_evaluate(const RunConfig& cfg) {
  require_key(cfg.checkpoint, "checkpoint");
  LoadedCheckpoint loaded = load_checkpoint(cfg.checkpoint);
  const NoiseKind kind = noise_kind_from_name(cfg.attack);
  DatasetSplit split = load_split(cfg, loaded.net.config().num_classes);

  const std::vector<double> levels = cfg.levels.empty() ? default_levels(kind) : cfg.levels;
  const std::string label =
      loaded.meta.count("method") ? loaded.meta.at("method") : std::string("model");
  const SweepReport report =
      noise_sweep(loaded.net, split.test, kind, levels, cfg.attack_config(), label, cfg.seed,
                  cfg.batch_size, cfg.white_repeats);
  emit_report(report, cfg.out_dir);
  std::cout << "evaluate: " << label << " under " << noise_kind_name(kind) << ", "
            << report.rows.size() << " levels -> " << cfg.out_dir << "\n";
}

void run_attack(const RunConfig& cfg) {
  require_key(cfg.checkpoint, "checkpoint");
  LoadedCheckpoint loaded = load_checkpoint(cfg.checkpoint);
  DatasetSplit split = load_split(cfg, loaded.net.config().num_classes);
  const EcgNet& net = loaded.net;

  std::vector<int> preds;
  std::vector<int> labels;
  std::size_t start = 0;
  const std::int64_t target_len = net.config().input_length;
  while (start < split.test.size()) {
    const std::size_t stop =
        std::min(split.test.size(), start + static_cast<std::size_t>(cfg.batch_size));
    std::vector<const PreparedRecord*> ptrs;
    std::vector<std::int64_t> offsets;
    for (std::size_t i = start; i < stop; ++i) {
      ptrs.push_back(&split.test[i]);
      offsets.push_back(fixed_offset(split.test[i], target_len, cfg.seed));
    }
    MaskedBatch batch = make_batch(ptrs, target_len, offsets);
    Tensor inputs;
    if (cfg.attack == "pgd" && cfg.attack_epsilon > 0.0) {
      AttackConfig acfg = cfg.attack_config();
      acfg.seed = derive_seed(cfg.seed, "attack-cli", start);
      inputs = pgd_attack(net, batch, acfg);
    } else if (cfg.attack == "white" && cfg.attack_epsilon > 0.0) {
      inputs = uniform_noise(batch, cfg.attack_epsilon, cfg.attack_perturb_padding,
                             derive_seed(cfg.seed, "attack-cli", start));
    } else if (cfg.attack == "pgd" || cfg.attack == "white" || cfg.attack == "none") {
      inputs = batch.signals;
    } else {
      throw ParameterError("attack: unknown noise kind '" + cfg.attack + "'");
    }
    const Tensor logits = net.forward_values(inputs, batch.mask);
    for (int p : argmax_rows(logits)) preds.push_back(p);
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
    start = stop;
  }

  const double acc = accuracy(preds, labels);
  const double f1 = macro_f1(preds, labels, static_cast<int>(net.config().num_classes));
  {
    std::ofstream os(fs::path(cfg.out_dir) / "attack_result.csv",
                     std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("attack: cannot write attack_result.csv");
    os << "noise_level,accuracy,macro_f1\n";
    os << format_double(cfg.attack == "none" ? 0.0 : cfg.attack_epsilon) << ','
       << format_double(acc) << ',' << format_double(f1) << '\n';
  }
  std::cout << "attack: kind=" << cfg.attack << " epsilon=" << format_double(cfg.attack_epsilon)
            << " accuracy=" << format_double(acc) << " macro_f1=" << format_double(f1) << "\n";
}

void run_tune(const RunConfig& cfg) {
  const TrainMethod method = method_from_name(cfg.method);
  if (method != TrainMethod::kNsr && method != TrainMethod::kJacob) {
    throw ParameterError("tune: method must be nsr or jacob");
  }
  const EcgNetConfig mcfg = cfg.model_config();
  DatasetSplit split = load_split(cfg, mcfg.num_classes);
  const std::vector<double> grid =
      cfg.tune_grid.empty() ? default_tune_grid(method) : cfg.tune_grid;

  std::vector<int> val_labels;
  for (const PreparedRecord& r : split.val) val_labels.push_back(r.label);

  struct Row {
    double value, clean_acc, clean_f1, robust_acc;
  };
  std::vector<Row> rows;
  for (double v : grid) {
    TrainConfig tcfg = cfg.train_config();
    if (method == TrainMethod::kNsr) {
      tcfg.beta = v;
    } else {
      tcfg.lambda = v;
    }
    EcgNet net(mcfg, cfg.seed);
    train(net, split, tcfg);

    const std::vector<int> clean_preds = predict(net, split.val, cfg.seed, cfg.batch_size);
    const double clean_acc = accuracy(clean_preds, val_labels);
    const double clean_f1 =
        macro_f1(clean_preds, val_labels, static_cast<int>(mcfg.num_classes));

    AttackConfig acfg = cfg.attack_config();
    acfg.steps = kAdvTrainSteps;
    acfg.seed = derive_seed(cfg.seed, "tune-attack", std::bit_cast<std::uint64_t>(v));
    std::vector<int> rob_preds;
    std::size_t start = 0;
    while (start < split.val.size()) {
      const std::size_t stop =
          std::min(split.val.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const PreparedRecord*> ptrs;
      std::vector<std::int64_t> offsets;
      for (std::size_t i = start; i < stop; ++i) {
        ptrs.push_back(&split.val[i]);
        offsets.push_back(fixed_offset(split.val[i], mcfg.input_length, cfg.seed));
      }
      MaskedBatch batch = make_batch(ptrs, mcfg.input_length, offsets);
      const Tensor adv = acfg.epsilon > 0.0 ? pgd_attack(net, batch, acfg) : batch.signals;
      for (int p : argmax_rows(net.forward_values(adv, batch.mask))) rob_preds.push_back(p);
      start = stop;
    }
    const double robust_acc = accuracy(rob_preds, val_labels);
    rows.push_back({v, clean_acc, clean_f1, robust_acc});
    std::cout << "tune: " << cfg.method << " value=" << format_double(v)
              << " clean_f1=" << format_double(clean_f1)
              << " robust_acc=" << format_double(robust_acc) << "\n";
  }

  // largest coefficient whose clean F1 stays near the best seen
  double best_f1 = 0.0;
  for (const Row& r : rows) best_f1 = std::max(best_f1, r.clean_f1);
  double chosen = rows.front().value;
  for (const Row& r : rows) {
    if (r.clean_f1 >= best_f1 - 0.05 && r.value >= chosen) chosen = r.value;
  }

  const std::string stem = "tune_" + cfg.method;
  {
    std::ofstream os(fs::path(cfg.out_dir) / (stem + ".csv"), std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("tune: cannot write results");
    os << "value,clean_acc,clean_f1,robust_acc\n";
    for (const Row& r : rows) {
      os << format_double(r.value) << ',' << format_double(r.clean_acc) << ','
         << format_double(r.clean_f1) << ',' << format_double(r.robust_acc) << '\n';
    }
  }
  {
    nlohmann::json j;
    j["method"] = cfg.method;
    j["chosen"] = chosen;
    std::ofstream os(fs::path(cfg.out_dir) / (stem + ".json"), std::ios::binary | std::ios::trunc);
    os << j.dump(2) << '\n';
  }
  std::cout << "tune: chosen " << (method == TrainMethod::kNsr ? "beta" : "lambda") << " = "
            << format_double(chosen) << "\n";
}

void run_dump_signal(const RunConfig& cfg) {
  require_key(cfg.pack, "pack");
  const std::vector<PreparedRecord> records = load_pack(cfg.pack);
  if (cfg.dump_index < 0 || static_cast<std::size_t>(cfg.dump_index) >= records.size()) {
    throw ParameterError("dump-signal: index out of range");
  }
  const PreparedRecord& rec = records[static_cast<std::size_t>(cfg.dump_index)];
  const std::int64_t target_len = cfg.input_length;
  MaskedBatch batch =
      make_batch({&rec}, target_len, {fixed_offset(rec, target_len, cfg.seed)});

  Tensor noisy = batch.signals;
  if (cfg.attack == "pgd" && cfg.attack_epsilon > 0.0) {
    require_key(cfg.checkpoint, "checkpoint");
    LoadedCheckpoint loaded = load_checkpoint(cfg.checkpoint);
    AttackConfig acfg = cfg.attack_config();
    noisy = pgd_attack(loaded.net, batch, acfg);
  } else if (cfg.attack == "white" && cfg.attack_epsilon > 0.0) {
    noisy = uniform_noise(batch, cfg.attack_epsilon, cfg.attack_perturb_padding, cfg.seed);
  }

  const std::int64_t c = batch.signals.dim(1);
  if (cfg.dump_lead < 0 || cfg.dump_lead >= c) {
    throw ParameterError("dump-signal: lead out of range");
  }
  Tensor clean2({c, target_len}, std::vector<double>(batch.signals.data().begin(),
                                                     batch.signals.data().end()));
  Tensor noisy2({c, target_len}, std::vector<double>(noisy.data().begin(), noisy.data().end()));

  const fs::path svg = fs::path(cfg.out_dir) / ("dump_" + rec.id + ".svg");
  dump_signal_svg(clean2, noisy2, cfg.dump_lead, svg);
  {
    std::ofstream os(fs::path(cfg.out_dir) / ("dump_" + rec.id + ".csv"),
                     std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("dump-signal: cannot write trace CSV");
    os << "t,clean,noisy\n";
    const double* cl = clean2.ptr() + cfg.dump_lead * target_len;
    const double* no = noisy2.ptr() + cfg.dump_lead * target_len;
    for (std::int64_t t = 0; t < target_len; ++t) {
      os << t << ',' << format_double(cl[t]) << ',' << format_double(no[t]) << '\n';
    }
  }
  std::cout << "dump-signal: record " << rec.id << " -> " << svg.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked variable-length ECG CNN with noise-robustness defenses"};
  app.require_subcommand(1);

  std::deque<SubCtx> contexts;
  auto add_cmd = [&](const std::string& name, const char* desc,
                     std::function<void(const RunConfig&)> fn) -> SubCtx& {
    contexts.emplace_back();
    SubCtx& ctx = contexts.back();
    ctx.cmd = app.add_subcommand(name, desc);
    ctx.run = std::move(fn);
    add_all_options(ctx);
    return ctx;
  };

  add_cmd("preprocess", "ingest CSV recordings into a packed dataset", run_preprocess);
  add_cmd("synth", "generate a synthetic labeled dataset", run_synth);
  add_cmd("train", "train a model with the selected method", run_train);
  add_cmd("attack", "evaluate one noise level against a checkpoint", run_attack);
  add_cmd("evaluate", "noise sweep over a checkpoint", run_evaluate);
  add_cmd("tune", "grid-search a regularization coefficient", run_tune);
  add_cmd("dump-signal", "write clean/noisy traces of one record", run_dump_signal);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: usage: " << e.what() << "\n";
    return 1;
  }

  for (SubCtx& ctx : contexts) {
    if (!ctx.cmd->parsed()) continue;
    try {
      RunConfig cfg = resolve(ctx);
      ctx.run(cfg);
      return 0;
    } catch (const ParameterError& e) {
      std::cerr << "error: usage: " << e.what() << "\n";
      return 1;
    } catch (const DataError& e) {
      std::cerr << "error: data: " << e.what() << "\n";
      return 2;
    } catch (const NumericError& e) {
      std::cerr << "error: numeric: " << e.what() << "\n";
      return 3;
    }
  }
  std::cerr << "error: usage: no subcommand selected\n";
  return 1;
}
