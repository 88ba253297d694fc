#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "ecgrobust/data.hpp"
#include "ecgrobust/defenses.hpp"
#include "ecgrobust/errors.hpp"
#include "support/fd.hpp"

using namespace ecgrobust;
using namespace ecgrobust::test;

namespace {

EcgNetConfig tiny_cfg() {
  EcgNetConfig cfg;
  cfg.in_channels = 2;
  cfg.input_length = 64;
  cfg.num_classes = 3;
  cfg.stem_channels = 4;
  cfg.num_blocks = 1;
  cfg.total_downsample = 16;
  cfg.gn_groups = 2;
  cfg.kernel_size = 3;
  return cfg;
}

MaskedBatch tiny_batch(Rng& rng, const EcgNetConfig& cfg, std::int64_t n) {
  MaskedBatch b;
  b.signals = rand_tensor({n, cfg.in_channels, cfg.input_length}, rng, -0.8, 0.8);
  b.mask = Tensor::full({n, cfg.input_length}, 1.0);
  for (std::int64_t i = 0; i < n; ++i) {
    b.labels.push_back(static_cast<int>(i % cfg.num_classes));
  }
  return b;
}

// conv + relu + max-pool + linear: piecewise linear end to end
struct ToyReluNet {
  Tensor w1, b1, w2, b2;
  std::int64_t len;

  explicit ToyReluNet(Rng& rng, std::int64_t input_len = 16)
      : w1(rand_tensor({4, 2, 3}, rng)),
        b1(rand_tensor({4}, rng, -0.2, 0.2)),
        w2(rand_tensor({3, 4 * (input_len / 4)}, rng)),
        b2(rand_tensor({3}, rng, -0.2, 0.2)),
        len(input_len) {}

  NodePtr logits(const NodePtr& x) const {
    NodePtr h = relu(conv1d(x, constant(w1), constant(b1), 2, 1));
    NodePtr p = pool1d(h, PoolKind::kMax, 2, 2);
    NodePtr flat = reshape(p, {1, 4 * (len / 4)});
    return linear(flat, constant(w2), constant(b2));
  }

  // relu on/off states plus pooling argmax choices
  std::vector<std::int64_t> activation_signature(const Tensor& x) const {
    GradModeGuard guard(false);
    NodePtr pre = conv1d(constant(x), constant(w1), constant(b1), 2, 1);
    std::vector<std::int64_t> sig;
    const Tensor& pv = pre->value();
    for (std::int64_t e = 0; e < pv.numel(); ++e) sig.push_back(pv.ptr()[e] > 0.0 ? 1 : 0);
    NodePtr post = relu(pre);
    const Tensor& hv = post->value();
    const std::int64_t hl = hv.dim(2);
    for (std::int64_t c = 0; c < 4; ++c) {
      for (std::int64_t t = 0; t + 1 < hl; t += 2) {
        const double a = hv.ptr()[c * hl + t], b = hv.ptr()[c * hl + t + 1];
        sig.push_back(b > a ? 1 : 0);
      }
    }
    return sig;
  }
};

}  // namespace

TEST_CASE("cross-entropy worked examples against direct softmax evaluation") {
  // uniform logits over 9 classes
  NodePtr z = constant(Tensor({1, 9}));
  std::vector<int> y{0};
  CHECK(loss_ce(z, y)->value().item() == doctest::Approx(std::log(9.0)).epsilon(1e-12));

  // huge margin drives the loss to zero
  Tensor zt({1, 9});
  zt.ptr()[0] = 60.0;
  CHECK(loss_ce(constant(zt), y)->value().item() < 1e-9);

  // one unit logit among nine: -log(e / (e + 8))
  Tensor z1({1, 9});
  z1.ptr()[0] = 1.0;
  const double expected = std::log(std::exp(1.0) + 8.0) - 1.0;
  CHECK(loss_ce(constant(z1), y)->value().item() == doctest::Approx(expected).epsilon(1e-12));

  // batch mean over two rows
  Tensor z2({2, 9});
  z2.ptr()[0] = 1.0;
  std::vector<int> y2{0, 3};
  const double row2 = std::log(9.0);
  CHECK(loss_ce(constant(z2), y2)->value().item() ==
        doctest::Approx(0.5 * (expected + row2)).epsilon(1e-12));
}

TEST_CASE("noise ramp values are exact") {
  CHECK(ramp_epsilon(10, 70, 0.01) == 0.0);
  CHECK(ramp_epsilon(70, 70, 0.01) == 0.01);
  CHECK(ramp_epsilon(45, 80, 0.01) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(ramp_epsilon(1, 70, 0.01) == 0.0);    // clamped below
  CHECK(ramp_epsilon(200, 70, 0.01) == 0.01); // clamped above
  CHECK(ramp_epsilon(6, 30, 0.1, 5) == doctest::Approx(0.1 / 25.0).epsilon(1e-12));
  CHECK_THROWS_AS(ramp_epsilon(5, 10, 0.01), ParameterError);
  CHECK_THROWS_AS(ramp_epsilon(0, 70, 0.01), ParameterError);
}

TEST_CASE("ramp is exactly linear after warmup") {
  const double eps = 0.01;
  double prev_delta = -1.0;
  for (int t = 11; t <= 70; ++t) {
    const double delta = ramp_epsilon(t, 70, eps) - ramp_epsilon(t - 1, 70, eps);
    if (prev_delta >= 0.0) CHECK(delta == doctest::Approx(prev_delta).epsilon(1e-12));
    prev_delta = delta;
  }
}

TEST_CASE("adversarial loss: warmup equals plain CE, afterwards it is the exact average") {
  EcgNet net(tiny_cfg(), 51);
  Rng rng(52);
  MaskedBatch batch = tiny_batch(rng, tiny_cfg(), 4);
  TrainConfig cfg;
  cfg.method = TrainMethod::kAdv;
  cfg.epochs = 20;
  cfg.warmup_epochs = 10;
  cfg.epsilon = 0.05;

  const double ce = loss_ce(net.forward(batch), batch.labels)->value().item();
  CHECK(loss_adv(net, batch, cfg, 5, 77)->value().item() == ce);

  // after warmup: 0.5*CE(x) + 0.5*CE(x_adv) with the same attack seed
  const double eps_t = ramp_epsilon(15, cfg.epochs, cfg.epsilon, cfg.warmup_epochs);
  AttackConfig acfg;
  acfg.epsilon = eps_t;
  acfg.steps = kAdvTrainSteps;
  acfg.seed = 77;
  MaskedBatch adv{pgd_attack(net, batch, acfg), batch.mask, batch.labels};
  const double ce_adv = loss_ce(net.forward(adv), batch.labels)->value().item();
  CHECK(loss_adv(net, batch, cfg, 15, 77)->value().item() ==
        doctest::Approx(0.5 * ce + 0.5 * ce_adv).epsilon(1e-15));
  CHECK(ce_adv > ce);  // the attack found a worse input
}

TEST_CASE("jacobian penalty on frozen linear models") {
  // z = W x with W the 2x2 identity: penalty = (lambda/2) * sqrt(2)
  const double lambda = 3.0;
  Tensor w({2, 2}, {1, 0, 0, 1});
  {
    NodePtr x = variable(Tensor({1, 2}, {0.3, -0.4}));
    NodePtr z = matmul(x, transpose(constant(w)));
    const double got = jacobian_penalty(z, x, lambda)->value().item();
    CHECK(got == doctest::Approx(lambda / 2.0 * std::sqrt(2.0)).epsilon(1e-12));
  }
  // four identical samples: (lambda/(4*2)) * sqrt(8)
  {
    NodePtr x = variable(Tensor({4, 2}, {1, 2, 1, 2, 1, 2, 1, 2}));
    NodePtr z = matmul(x, transpose(constant(w)));
    const double got = jacobian_penalty(z, x, lambda)->value().item();
    CHECK(got == doctest::Approx(lambda * std::sqrt(8.0) / 8.0).epsilon(1e-12));
  }
}

TEST_CASE("jacobian penalty matches a finite-difference Frobenius estimate") {
  EcgNetConfig cfg = tiny_cfg();
  EcgNet net(cfg, 61);
  Rng rng(62);
  MaskedBatch batch = tiny_batch(rng, cfg, 2);

  NodePtr x = variable(batch.signals);
  NodePtr logits = net.forward(x, constant(batch.mask));
  const double penalty = jacobian_penalty(logits, x, 1.0)->value().item();

  // forward-difference Jacobian, one column per input element
  const double h = 1e-5;
  double frob_sq = 0.0;
  Tensor shifted = batch.signals;
  for (std::int64_t e = 0; e < shifted.numel(); ++e) {
    const double saved = shifted.ptr()[e];
    shifted.ptr()[e] = saved + h;
    const Tensor zp = net.forward_values(shifted, batch.mask);
    shifted.ptr()[e] = saved - h;
    const Tensor zm = net.forward_values(shifted, batch.mask);
    shifted.ptr()[e] = saved;
    for (std::int64_t j = 0; j < zp.numel(); ++j) {
      const double d = (zp.ptr()[j] - zm.ptr()[j]) / (2.0 * h);
      frob_sq += d * d;
    }
  }
  const std::int64_t n = batch.size(), k = cfg.num_classes;
  const double expected = std::sqrt(frob_sq) / static_cast<double>(n * k);
  CHECK(penalty == doctest::Approx(expected).epsilon(1e-3));
}

TEST_CASE("nsr terms on an analytic linear model") {
  // z_y = w^T x + b with w = [1,2], x = [1,1], b = 0 -> z_y = 3, |w|_1 = 3
  Tensor w({1, 2}, {1, 2});
  NodePtr x = variable(Tensor({1, 2}, {1, 1}));
  NodePtr z = matmul(x, transpose(constant(w)));  // [1,1]
  const std::vector<int> y{0};
  NsrTerms terms = nsr_terms_from(z, x, y, 1.0);
  CHECK(terms.w1->value().item() == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(terms.zy_abs->value().item() == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(terms.r2->value().item() == doctest::Approx(1.0).epsilon(1e-12));

  // R2 scales exactly with eps_max
  NsrTerms scaled = nsr_terms_from(z, x, y, 2.5);
  CHECK(scaled.r2->value().item() == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("piecewise-linear exactness: no activation flips means z_y moves linearly") {
  Rng rng(71);
  ToyReluNet toy(rng);
  const Tensor x0 = rand_tensor({1, 2, 16}, rng, -1.0, 1.0);

  NodePtr xn = variable(x0);
  NodePtr z = toy.logits(xn);
  const std::vector<int> y{1};
  NodePtr zy = select_labels(z, y);
  const Tensor w = grad(zy, std::span<const NodePtr>(&xn, 1))[0]->value();
  const double zy0 = zy->value().item();

  const auto sig0 = toy.activation_signature(x0);
  Rng eta_rng(72);
  Tensor eta = rand_tensor({1, 2, 16}, eta_rng);
  double scale = 1e-3;
  for (int tries = 0; tries < 60; ++tries) {
    Tensor xp = x0;
    for (std::int64_t e = 0; e < xp.numel(); ++e) xp.ptr()[e] += scale * eta.ptr()[e];
    if (toy.activation_signature(xp) == sig0) break;
    scale *= 0.5;
  }
  Tensor xp = x0;
  double dot = 0.0;
  for (std::int64_t e = 0; e < xp.numel(); ++e) {
    xp.ptr()[e] += scale * eta.ptr()[e];
    dot += w.ptr()[e] * scale * eta.ptr()[e];
  }
  REQUIRE(toy.activation_signature(xp) == sig0);

  GradModeGuard guard(false);
  const double zy1 = select_labels(toy.logits(constant(xp)), y)->value().item();
  CHECK(std::fabs((zy1 - zy0) - dot) <= 1e-8);
}

TEST_CASE("Hoelder bound: |w^T eta| <= |w|_1 * |eta|_inf with zero violations") {
  Rng rng(73);
  ToyReluNet toy(rng);
  const Tensor x0 = rand_tensor({1, 2, 16}, rng);

  NodePtr xn = variable(x0);
  NodePtr zy = select_labels(toy.logits(xn), std::vector<int>{0});
  const Tensor w = grad(zy, std::span<const NodePtr>(&xn, 1))[0]->value();
  double w1 = 0.0;
  for (std::int64_t e = 0; e < w.numel(); ++e) w1 += std::fabs(w.ptr()[e]);

  const double eps = 0.05;
  Rng eta_rng(74);
  int violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    double dot = 0.0;
    for (std::int64_t e = 0; e < w.numel(); ++e) {
      dot += w.ptr()[e] * eta_rng.uniform(-eps, eps);
    }
    if (std::fabs(dot) > w1 * eps) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("nsr loss worked examples") {
  // correctly classified, active epoch: MSE + margin + beta*log(R2+1)
  Tensor zt({1, 9});
  zt.ptr()[0] = 2.0;
  NodePtr z = constant(zt);
  const std::vector<int> y{0};

  NsrTerms terms;
  terms.logits = z;
  terms.w1 = constant(Tensor({1}, {1.0}));
  terms.zy_abs = constant(Tensor({1}, {2.0}));
  terms.r2 = constant(Tensor({1}, {1.0}));
  terms.correct = {true};

  const double got = loss_nsr(z, terms, y, 1.0, 20, 10)->value().item();
  CHECK(got == doctest::Approx(1.0 + std::log(2.0)).epsilon(1e-12));

  // wrongly classified: only the MSE part survives
  NsrTerms wrong = terms;
  wrong.correct = {false};
  CHECK(loss_nsr(z, wrong, y, 1.0, 20, 10)->value().item() ==
        doctest::Approx(1.0).epsilon(1e-12));

  // before warmup nothing but MSE regardless of correctness
  CHECK(loss_nsr(z, terms, y, 0.0, 5, 10)->value().item() ==
        doctest::Approx(1.0).epsilon(1e-12));

  // margin term: z = [2, 1.5, 0, ...] -> hinge on class 1 is 0.5
  Tensor zm({1, 9});
  zm.ptr()[0] = 2.0;
  zm.ptr()[1] = 1.5;
  NodePtr z2 = constant(zm);
  NsrTerms t2 = terms;
  t2.logits = z2;
  const double mse = 1.0 + 1.5 * 1.5;
  const double margin = 0.5;  // max(0, 1 - 2 + 1.5), other classes clamp to 0
  CHECK(loss_nsr(z2, t2, y, 1.0, 20, 10)->value().item() ==
        doctest::Approx(mse + margin + std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("training: warmup trace matches CE for adv and jacob") {
  auto records = synth_dataset(60, 256, 3, 404);
  DatasetSplit split = split_and_balance(records, 404, 3);

  EcgNetConfig mcfg;
  mcfg.in_channels = 8;
  mcfg.input_length = 256;
  mcfg.num_classes = 3;
  mcfg.stem_channels = 8;
  mcfg.num_blocks = 2;
  mcfg.total_downsample = 64;
  mcfg.gn_groups = 8;

  auto run = [&](TrainMethod method) {
    EcgNet net(mcfg, 11);
    TrainConfig cfg;
    cfg.method = method;
    cfg.epochs = 4;
    cfg.warmup_epochs = 3;
    cfg.batch_size = 8;
    cfg.epsilon = 0.05;
    cfg.lambda = 5.0;
    cfg.seed = 2024;
    return train(net, split, cfg);
  };

  const TrainResult ce = run(TrainMethod::kCe);
  const TrainResult adv = run(TrainMethod::kAdv);
  const TrainResult jac = run(TrainMethod::kJacob);
  REQUIRE(ce.history.size() == 4);
  for (int t = 0; t < 3; ++t) {  // inside warmup: identical traces
    CHECK(adv.history[t].loss == ce.history[t].loss);
    CHECK(jac.history[t].loss == ce.history[t].loss);
    CHECK(adv.history[t].val_f1 == ce.history[t].val_f1);
    CHECK(jac.history[t].val_f1 == ce.history[t].val_f1);
  }
}

TEST_CASE("training is deterministic under a fixed seed") {
  auto records = synth_dataset(58, 256, 3, 505);
  DatasetSplit split = split_and_balance(records, 505, 3);

  EcgNetConfig mcfg;
  mcfg.in_channels = 8;
  mcfg.input_length = 256;
  mcfg.num_classes = 3;
  mcfg.stem_channels = 8;
  mcfg.num_blocks = 2;
  mcfg.total_downsample = 64;
  mcfg.gn_groups = 8;

  auto run = [&]() {
    EcgNet net(mcfg, 12);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 8;
    cfg.seed = 99;
    TrainResult r = train(net, split, cfg);
    return std::pair(r, net.snapshot_parameters());
  };

  const auto [r1, p1] = run();
  const auto [r2, p2] = run();
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t t = 0; t < r1.history.size(); ++t) {
    CHECK(r1.history[t].loss == r2.history[t].loss);
    CHECK(r1.history[t].val_acc == r2.history[t].val_acc);
    CHECK(r1.history[t].val_f1 == r2.history[t].val_f1);
  }
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(std::memcmp(p1[i].ptr(), p2[i].ptr(), p1[i].numel() * sizeof(double)) == 0);
  }
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  auto records = synth_dataset(56, 256, 3, 606);
  records[0].core.ptr()[5] = std::numeric_limits<double>::quiet_NaN();
  DatasetSplit split = split_and_balance(records, 606, 3);

  EcgNetConfig mcfg;
  mcfg.in_channels = 8;
  mcfg.input_length = 256;
  mcfg.num_classes = 3;
  mcfg.stem_channels = 8;
  mcfg.num_blocks = 2;
  mcfg.total_downsample = 64;
  mcfg.gn_groups = 8;

  EcgNet net(mcfg, 13);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 64;
  cfg.seed = 1;
  // the poisoned record may land in val/test; only assert when training sees it
  bool in_train = false;
  for (const auto& r : split.train) in_train |= r.id == records[0].id;
  if (in_train) {
    CHECK_THROWS_AS(train(net, split, cfg), NumericError);
  } else {
    CHECK(true);
  }
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.warmup_epochs = 10;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = TrainConfig{};
  cfg.lambda = -1;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = TrainConfig{};
  cfg.lr = 0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
}
