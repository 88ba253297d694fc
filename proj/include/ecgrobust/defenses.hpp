#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ecgrobust/attacks.hpp"
#include "ecgrobust/data.hpp"
#include "ecgrobust/model.hpp"

namespace ecgrobust {

enum class TrainMethod { kCe, kAdv, kJacob, kNsr };

std::string method_name(TrainMethod m);
TrainMethod method_from_name(const std::string& name);  // throws ParameterError

struct TrainConfig {
  TrainMethod method = TrainMethod::kCe;
  int epochs = 70;
  int batch_size = 64;
  int warmup_epochs = 10;
  double epsilon = 0.01;  // max attack level for adversarial training
  double lambda = 44.0;   // Jacobian coefficient
  double beta = 1.0;      // NSR coefficient
  double eps_max = 1.0;   // NSR noise bound
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

// inner attack strength for adversarial training
constexpr int kAdvTrainSteps = 20;

// Linear noise ramp: 0 at the end of warmup, the full level at t_max.
double ramp_epsilon(int t, int t_max, double epsilon, int warmup = 10);

NodePtr loss_ce(const NodePtr& logits, std::span<const int> labels);

// 0.5*CE(clean) + 0.5*CE(adversarial) after warmup, plain CE before
NodePtr loss_adv(const EcgNet& net, const MaskedBatch& batch, const TrainConfig& cfg, int epoch,
                 std::uint64_t attack_seed);

// (lambda / (n*k)) * sqrt(sum over samples, classes and input dims of the
// squared input-Jacobian of the logits), computed exactly with one
// differentiable backward pass per class. x must be the graph input the
// logits were built from.
NodePtr jacobian_penalty(const NodePtr& logits, const NodePtr& x, double lambda);

// CE plus the scaled Frobenius norm of d(logits)/d(input), computed exactly
// with one differentiable backward pass per class
NodePtr loss_jacobian(const EcgNet& net, const MaskedBatch& batch, const TrainConfig& cfg,
                      int epoch);

// Per-sample pieces of the noise-to-signal bound. w1 = ||d z_y / d x||_1,
// zy_abs = |z_y| (clamped below at delta), r2 = w1 * eps_max / zy_abs.
// All nodes stay differentiable for the second backward pass.
struct NsrTerms {
  NodePtr logits;  // [n, k]
  NodePtr w1;      // [n]
  NodePtr zy_abs;  // [n]
  NodePtr r2;      // [n]
  std::vector<bool> correct;
};

constexpr double kNsrZClamp = 1e-4;

// core of nsr_bound for any differentiable graph from input x to logits
NsrTerms nsr_terms_from(const NodePtr& logits, const NodePtr& x, std::span<const int> labels,
                        double eps_max);

NsrTerms nsr_bound(const EcgNet& net, const MaskedBatch& batch, double eps_max);

// MSE toward the one-hot target, plus margin and beta*log(r2+1) for samples
// that are correctly classified once warmup has passed
NodePtr loss_nsr(const NodePtr& logits, const NsrTerms& nsr, std::span<const int> labels,
                 double beta, int epoch, int warmup);

class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1, double beta2, double eps);
  void step(EcgNet& net);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double val_acc = 0.0;
  double val_f1 = 0.0;
  double epsilon_t = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_val_f1 = 0.0;
};

// Seeded training loop; the network ends up at the best-validation-F1
// parameters. Aborts with NumericError on a non-finite loss.
TrainResult train(EcgNet& net, const DatasetSplit& data, const TrainConfig& cfg);

void write_history_csv(const std::vector<EpochStats>& history,
                       const std::filesystem::path& path);

}  // namespace ecgrobust
