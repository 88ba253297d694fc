#include "ecgrobust/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "ecgrobust/errors.hpp"
#include "ecgrobust/rng.hpp"

namespace ecgrobust {

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw ParameterError("attack: epsilon must be finite and >= 0");
  }
  if (steps < 1) throw ParameterError("attack: steps must be >= 1");
  if (alpha > 0.0 && !std::isfinite(alpha)) throw ParameterError("attack: alpha must be finite");
}

double AttackConfig::effective_alpha() const {
  if (alpha > 0.0) return alpha;
  return 2.5 * epsilon / static_cast<double>(steps);
}

namespace {

// mask expanded across channels: factor[n,c,t] = mask[n,t]
double mask_at(const Tensor& mask, std::int64_t n_ch, std::int64_t len, std::int64_t e) {
  const std::int64_t t = e % len;
  const std::int64_t row = e / (n_ch * len);
  return mask.ptr()[row * len + t];
}

void check_ball(const Tensor& x, const Tensor& x0, double eps) {
  const double* a = x.ptr();
  const double* b = x0.ptr();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    if (std::fabs(a[i] - b[i]) > eps + 1e-9) {
      throw NumericError("attack: iterate escaped the epsilon ball");
    }
  }
}

}  // namespace

Tensor pgd_attack_fn(const Tensor& x0, const Tensor& mask, const InputLossFn& loss,
                     const AttackConfig& cfg) {
  cfg.validate();
  if (x0.rank() != 3) throw ParameterError("attack: input must be [n,c,l]");
  if (mask.rank() != 2 || mask.dim(0) != x0.dim(0) || mask.dim(1) != x0.dim(2)) {
    throw ParameterError("attack: mask shape " + shape_string(mask.shape()) +
                         " does not match input " + shape_string(x0.shape()));
  }
  if (cfg.epsilon == 0.0) return x0;

  const double eps = cfg.epsilon;
  const double alpha = cfg.effective_alpha();
  if (alpha * cfg.steps < eps) {
    std::cerr << "warning: attack alpha*steps = " << alpha * cfg.steps
              << " cannot reach epsilon = " << eps << "\n";
  }

  const std::int64_t c = x0.dim(1), len = x0.dim(2);
  const std::int64_t total = x0.numel();

  Tensor x = x0;
  if (cfg.random_start) {
    Rng rng(derive_seed(cfg.seed, "pgd-start"));
    for (std::int64_t e = 0; e < total; ++e) {
      double eta = rng.uniform(-eps, eps);
      if (!cfg.perturb_padding) eta *= mask_at(mask, c, len, e);
      x.ptr()[e] += eta;
    }
  }

  for (int k = 0; k < cfg.steps; ++k) {
    NodePtr xn = variable(x);
    NodePtr l = loss(xn);
    if (l->value().numel() != 1) throw ParameterError("attack: loss must be scalar");
    NodePtr g = grad(l, std::span<const NodePtr>(&xn, 1))[0];
    const double* gp = g->value().ptr();
    Tensor next = x;
    double* xp = next.ptr();
    const double* x0p = x0.ptr();
    for (std::int64_t e = 0; e < total; ++e) {
      double step = alpha * (gp[e] > 0.0 ? 1.0 : (gp[e] < 0.0 ? -1.0 : 0.0));
      if (!cfg.perturb_padding) step *= mask_at(mask, c, len, e);
      xp[e] = std::clamp(xp[e] + step, x0p[e] - eps, x0p[e] + eps);
    }
    x = std::move(next);
    check_ball(x, x0, eps);
  }
  return x;
}

Tensor pgd_attack(const EcgNet& net, const MaskedBatch& batch, const AttackConfig& cfg,
                  const LogitsLossFn& loss) {
  NodePtr mask_node = constant(batch.mask);
  const std::vector<int>& labels = batch.labels;
  InputLossFn input_loss = [&net, &mask_node, &labels, &loss](const NodePtr& x) {
    NodePtr logits = net.forward(x, mask_node, /*frozen=*/true);
    return loss ? loss(logits, labels) : softmax_cross_entropy(logits, labels);
  };
  return pgd_attack_fn(batch.signals, batch.mask, input_loss, cfg);
}

Tensor uniform_noise(const MaskedBatch& batch, double epsilon, bool perturb_padding,
                     std::uint64_t seed) {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw ParameterError("uniform_noise: epsilon must be finite and >= 0");
  }
  Tensor out = batch.signals;
  if (epsilon == 0.0) return out;
  const std::int64_t c = out.dim(1), len = out.dim(2);
  Rng rng(derive_seed(seed, "white"));
  for (std::int64_t e = 0; e < out.numel(); ++e) {
    double eta = rng.uniform(-epsilon, epsilon);
    if (!perturb_padding) eta *= mask_at(batch.mask, c, len, e);
    out.ptr()[e] += eta;
  }
  return out;
}

}  // namespace ecgrobust
