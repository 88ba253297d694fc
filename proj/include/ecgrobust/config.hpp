#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ecgrobust/defenses.hpp"
#include "ecgrobust/eval.hpp"
#include "ecgrobust/model.hpp"

namespace ecgrobust {

// Flat key-value run configuration. Every field has a default except the
// data paths; unknown keys in a config file are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string pack;
  std::string signal_dir;
  std::string reference;
  std::string checkpoint;

  std::string method = "ce";
  int epochs = 70;
  int batch_size = 64;
  int warmup_epochs = 10;
  double train_epsilon = 0.01;
  double lambda = 44.0;
  double beta = 1.0;
  double eps_max = 1.0;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::string attack = "pgd";  // pgd | white | none
  double attack_epsilon = 0.01;
  int attack_steps = 100;
  double attack_alpha = 0.0;  // 0 = 2.5*eps/steps
  bool attack_random_start = false;
  bool attack_perturb_padding = false;
  std::vector<double> levels;  // empty = default grid for the noise kind
  int white_repeats = 1;

  std::int64_t in_channels = 8;
  std::int64_t input_length = 33792;
  std::int64_t num_classes = 9;
  std::int64_t stem_channels = 32;
  std::int64_t num_blocks = 4;
  std::int64_t total_downsample = 1024;
  std::int64_t kernel_size = 7;
  std::int64_t gn_groups = 8;

  int n_per_class = 255;
  std::int64_t synth_length = 2048;
  int synth_classes = 3;

  std::vector<double> tune_grid;  // empty = default grid for the method

  int dump_index = 0;
  int dump_lead = 0;

  EcgNetConfig model_config() const;
  TrainConfig train_config() const;  // throws on bad method name
  AttackConfig attack_config() const;
};

RunConfig load_config(const std::filesystem::path& path);
void merge_config_file(RunConfig& cfg, const std::filesystem::path& path);
void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& path);

std::vector<double> default_levels(NoiseKind kind);
std::vector<double> default_tune_grid(TrainMethod method);

}  // namespace ecgrobust
