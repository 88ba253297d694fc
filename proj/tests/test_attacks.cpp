#include <doctest.h>

#include <cmath>
#include <cstring>

#include "ecgrobust/attacks.hpp"
#include "ecgrobust/errors.hpp"
#include "support/fd.hpp"

using namespace ecgrobust;
using namespace ecgrobust::test;

namespace {

MaskedBatch tiny_batch(Rng& rng, std::int64_t n, std::int64_t c, std::int64_t l,
                       std::int64_t valid) {
  MaskedBatch b;
  b.signals = Tensor({n, c, l});
  b.mask = Tensor({n, l});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t t = 0; t < valid; ++t) {
        b.signals.ptr()[(i * c + ch) * l + t] = rng.uniform(-1.0, 1.0);
      }
    }
    for (std::int64_t t = 0; t < valid; ++t) b.mask.ptr()[i * l + t] = 1.0;
    b.labels.push_back(static_cast<int>(i % 2));
  }
  return b;
}

EcgNetConfig tiny_net_config() {
  EcgNetConfig cfg;
  cfg.in_channels = 2;
  cfg.input_length = 128;
  cfg.num_classes = 2;
  cfg.stem_channels = 4;
  cfg.num_blocks = 1;
  cfg.total_downsample = 16;
  cfg.gn_groups = 2;
  cfg.kernel_size = 3;
  return cfg;
}

}  // namespace

TEST_CASE("epsilon 0 returns the input exactly") {
  Rng rng(1);
  MaskedBatch b = tiny_batch(rng, 2, 2, 16, 12);
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  InputLossFn loss = [](const NodePtr& x) { return sum(x); };
  const Tensor out = pgd_attack_fn(b.signals, b.mask, loss, cfg);
  CHECK(std::memcmp(out.ptr(), b.signals.ptr(), out.numel() * sizeof(double)) == 0);
}

TEST_CASE("negative epsilon is rejected") {
  AttackConfig cfg;
  cfg.epsilon = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  CHECK_THROWS_AS(uniform_noise(MaskedBatch{Tensor({1, 1, 4}), Tensor::full({1, 4}, 1.0), {0}},
                                -1.0, false, 0),
                  ParameterError);
}

TEST_CASE("single step on a linear objective lands on the ball surface") {
  // loss = -c * sum(x) with c > 0: the sign step is -alpha, projected to -eps
  MaskedBatch b;
  b.signals = Tensor({1, 1, 6});
  b.mask = Tensor::full({1, 6}, 1.0);
  b.mask.ptr()[5] = 0.0;  // one padded column
  b.labels = {0};

  AttackConfig cfg;
  cfg.epsilon = 0.1;
  cfg.alpha = 0.2;
  cfg.steps = 1;
  InputLossFn loss = [](const NodePtr& x) { return mul_scalar(sum(x), -3.0); };
  const Tensor out = pgd_attack_fn(b.signals, b.mask, loss, cfg);
  for (std::int64_t t = 0; t < 5; ++t) CHECK(out.ptr()[t] == -0.1);
  CHECK(out.ptr()[5] == 0.0);  // padding untouched
}

TEST_CASE("linear objective with alpha*K >= eps reaches x + eps*sign(grad) exactly") {
  Rng rng(5);
  MaskedBatch b = tiny_batch(rng, 2, 2, 16, 16);
  Tensor r = rand_tensor_away_from_zero({2, 2, 16}, rng, 0.2);
  const Tensor sr = sign_tensor(r);

  AttackConfig cfg;
  cfg.epsilon = 0.05;
  cfg.steps = 7;  // auto alpha = 2.5*eps/7, alpha*K = 2.5*eps >= eps
  InputLossFn loss = [&r](const NodePtr& x) { return sum(mul(x, constant(r))); };
  const Tensor out = pgd_attack_fn(b.signals, b.mask, loss, cfg);
  for (std::int64_t e = 0; e < out.numel(); ++e) {
    CHECK(out.ptr()[e] == b.signals.ptr()[e] + cfg.epsilon * sr.ptr()[e]);
  }
}

TEST_CASE("attacked loss is non-decreasing in epsilon on a fixed linear objective") {
  Rng rng(7);
  MaskedBatch b = tiny_batch(rng, 1, 2, 32, 32);
  Tensor r = rand_tensor_away_from_zero({1, 2, 32}, rng, 0.2);
  InputLossFn loss = [&r](const NodePtr& x) { return sum(mul(x, constant(r))); };

  double prev = -1e300;
  for (double eps : {0.0, 0.01, 0.02, 0.05, 0.1, 0.3}) {
    AttackConfig cfg;
    cfg.epsilon = eps;
    cfg.steps = 5;
    const Tensor out = pgd_attack_fn(b.signals, b.mask, loss, cfg);
    GradModeGuard guard(false);
    const double val = loss(constant(out))->value().item();
    CHECK(val >= prev - 1e-12);
    prev = val;
  }
}

TEST_CASE("iterates stay inside the epsilon ball on a real network") {
  EcgNet net(tiny_net_config(), 3);
  Rng rng(9);
  MaskedBatch b = tiny_batch(rng, 3, 2, 128, 96);

  AttackConfig cfg;
  cfg.epsilon = 0.03;
  cfg.steps = 10;
  cfg.alpha = 0.02;  // overshooting alpha exercises the projection
  const Tensor out = pgd_attack(net, b, cfg);
  double worst = 0.0;
  for (std::int64_t e = 0; e < out.numel(); ++e) {
    worst = std::max(worst, std::fabs(out.ptr()[e] - b.signals.ptr()[e]));
  }
  CHECK(worst <= cfg.epsilon + 1e-9);
  CHECK(worst > 0.0);
}

TEST_CASE("K=1 with alpha=eps reproduces the one-step sign attack") {
  EcgNet net(tiny_net_config(), 13);
  Rng rng(14);
  MaskedBatch b = tiny_batch(rng, 2, 2, 128, 128);

  AttackConfig cfg;
  cfg.epsilon = 0.02;
  cfg.alpha = 0.02;
  cfg.steps = 1;
  const Tensor out = pgd_attack(net, b, cfg);

  // one-step reference computed directly from the input gradient
  NodePtr x = variable(b.signals);
  NodePtr l = softmax_cross_entropy(net.forward(x, constant(b.mask), true), b.labels);
  const Tensor g = grad(l, std::span<const NodePtr>(&x, 1))[0]->value();
  const Tensor sg = sign_tensor(g);
  for (std::int64_t e = 0; e < out.numel(); ++e) {
    const std::int64_t t = e % 128;
    const std::int64_t row = e / (2 * 128);
    const double m = b.mask.ptr()[row * 128 + t];
    CHECK(out.ptr()[e] == b.signals.ptr()[e] + cfg.epsilon * sg.ptr()[e] * m);
  }
}

TEST_CASE("attacks are deterministic under a fixed seed") {
  EcgNet net(tiny_net_config(), 17);
  Rng rng(18);
  MaskedBatch b = tiny_batch(rng, 2, 2, 128, 100);

  AttackConfig cfg;
  cfg.epsilon = 0.05;
  cfg.steps = 4;
  cfg.random_start = true;
  cfg.seed = 999;
  const Tensor a1 = pgd_attack(net, b, cfg);
  const Tensor a2 = pgd_attack(net, b, cfg);
  CHECK(std::memcmp(a1.ptr(), a2.ptr(), a1.numel() * sizeof(double)) == 0);

  cfg.seed = 1000;
  const Tensor a3 = pgd_attack(net, b, cfg);
  CHECK(std::memcmp(a1.ptr(), a3.ptr(), a1.numel() * sizeof(double)) != 0);
}

TEST_CASE("masked elements are never perturbed by default") {
  EcgNet net(tiny_net_config(), 19);
  Rng rng(20);
  MaskedBatch b = tiny_batch(rng, 2, 2, 128, 64);

  AttackConfig cfg;
  cfg.epsilon = 0.05;
  cfg.steps = 3;
  cfg.random_start = true;
  const Tensor out = pgd_attack(net, b, cfg);
  for (std::int64_t i = 0; i < 2; ++i) {
    for (std::int64_t ch = 0; ch < 2; ++ch) {
      for (std::int64_t t = 64; t < 128; ++t) {
        CHECK(out.ptr()[(i * 2 + ch) * 128 + t] == b.signals.ptr()[(i * 2 + ch) * 128 + t]);
      }
    }
  }
}

TEST_CASE("uniform noise: zero level, bounds, masking, determinism") {
  Rng rng(21);
  MaskedBatch b = tiny_batch(rng, 2, 2, 64, 48);

  const Tensor same = uniform_noise(b, 0.0, false, 5);
  CHECK(std::memcmp(same.ptr(), b.signals.ptr(), same.numel() * sizeof(double)) == 0);

  const Tensor n1 = uniform_noise(b, 0.2, false, 5);
  const Tensor n2 = uniform_noise(b, 0.2, false, 5);
  CHECK(std::memcmp(n1.ptr(), n2.ptr(), n1.numel() * sizeof(double)) == 0);

  for (std::int64_t i = 0; i < 2; ++i) {
    for (std::int64_t ch = 0; ch < 2; ++ch) {
      for (std::int64_t t = 48; t < 64; ++t) {
        CHECK(n1.ptr()[(i * 2 + ch) * 64 + t] == b.signals.ptr()[(i * 2 + ch) * 64 + t]);
      }
    }
  }
}

TEST_CASE("uniform noise statistics over a million draws") {
  MaskedBatch b;
  b.signals = Tensor({1, 1, 1000000});
  b.mask = Tensor::full({1, 1000000}, 1.0);
  b.labels = {0};
  const Tensor noisy = uniform_noise(b, 0.2, false, 12345);
  double mean = 0.0, peak = 0.0;
  for (std::int64_t e = 0; e < noisy.numel(); ++e) {
    mean += noisy.ptr()[e];
    peak = std::max(peak, std::fabs(noisy.ptr()[e]));
  }
  mean /= static_cast<double>(noisy.numel());
  CHECK(std::fabs(mean) < 0.001);
  CHECK(peak <= 0.2);
}
