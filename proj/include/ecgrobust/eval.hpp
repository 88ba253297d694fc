#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ecgrobust/attacks.hpp"
#include "ecgrobust/data.hpp"
#include "ecgrobust/model.hpp"

namespace ecgrobust {

double accuracy(std::span<const int> preds, std::span<const int> labels);

// Unweighted mean of per-class F1. Classes with no actual and no predicted
// members are left out of the mean entirely.
double macro_f1(std::span<const int> preds, std::span<const int> labels, int n_classes = 9);

enum class NoiseKind { kPgd, kWhite };
std::string noise_kind_name(NoiseKind k);
NoiseKind noise_kind_from_name(const std::string& name);

struct SweepRow {
  double noise_level = 0.0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

struct SweepReport {
  std::string method_label;
  NoiseKind kind = NoiseKind::kPgd;
  std::vector<SweepRow> rows;
  std::uint64_t seed = 0;
  AttackConfig attack_template;
  std::string model_checksum;
};

// frozen-model predictions on records placed at their fixed offsets
std::vector<int> predict(const EcgNet& net, const std::vector<PreparedRecord>& records,
                         std::uint64_t seed, int batch_size);

// One (accuracy, macro-F1) row per noise level; level 0 evaluates clean
// inputs. Each (kind, method, level) cell draws from its own derived seed.
// White-noise metrics can be averaged over `repeats` independent draws.
SweepReport noise_sweep(const EcgNet& net, const std::vector<PreparedRecord>& testset,
                        NoiseKind kind, std::span<const double> levels,
                        const AttackConfig& attack_template, const std::string& method_label,
                        std::uint64_t seed, int batch_size, int repeats = 1);

// writes <method>_<kind>.csv, .svg and .meta.json under out_dir
void emit_report(const SweepReport& report, const std::filesystem::path& out_dir);

std::vector<SweepRow> parse_report_csv(const std::filesystem::path& path);

// overlay of one lead before/after perturbation
void dump_signal_svg(const Tensor& clean, const Tensor& noisy, std::int64_t lead,
                     const std::filesystem::path& path);

// shortest decimal form that parses back to the same bits
std::string format_double(double v);
double parse_double_strict(const std::string& s);

}  // namespace ecgrobust
