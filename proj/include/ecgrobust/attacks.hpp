#pragma once

#include <cstdint>
#include <functional>

#include "ecgrobust/model.hpp"

namespace ecgrobust {

// L-infinity attack parameters. alpha <= 0 selects the 2.5*eps/steps default.
struct AttackConfig {
  double epsilon = 0.0;
  int steps = 1;
  double alpha = 0.0;
  bool random_start = false;
  bool perturb_padding = false;
  std::uint64_t seed = 0;

  void validate() const;
  double effective_alpha() const;
};

// scalar loss of the perturbed input node
using InputLossFn = std::function<NodePtr(const NodePtr& x)>;
// scalar loss of the logits produced from the perturbed input
using LogitsLossFn = std::function<NodePtr(const NodePtr& logits, std::span<const int> labels)>;

// Iterated sign-gradient ascent with per-step projection onto the eps-ball
// around x0. Model-agnostic core; the mask zeroes padding perturbations
// unless perturb_padding is set.
Tensor pgd_attack_fn(const Tensor& x0, const Tensor& mask, const InputLossFn& loss,
                     const AttackConfig& cfg);

// PGD against a frozen network; default loss is cross-entropy.
Tensor pgd_attack(const EcgNet& net, const MaskedBatch& batch, const AttackConfig& cfg,
                  const LogitsLossFn& loss = nullptr);

// x + iid uniform noise in [-epsilon, epsilon], masked off the padding
// unless perturb_padding is set.
Tensor uniform_noise(const MaskedBatch& batch, double epsilon, bool perturb_padding,
                     std::uint64_t seed);

}  // namespace ecgrobust
