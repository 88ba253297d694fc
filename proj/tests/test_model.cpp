#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "ecgrobust/checkpoint.hpp"
#include "ecgrobust/errors.hpp"
#include "ecgrobust/model.hpp"
#include "support/fd.hpp"

using namespace ecgrobust;
using namespace ecgrobust::test;

namespace {

EcgNetConfig desk_config() {
  EcgNetConfig cfg;
  cfg.in_channels = 8;
  cfg.input_length = 2048;
  cfg.num_classes = 3;
  cfg.stem_channels = 8;
  cfg.num_blocks = 2;
  cfg.total_downsample = 64;
  cfg.gn_groups = 8;
  return cfg;
}

MaskedBatch place_record(const Tensor& core, const EcgNetConfig& cfg, std::int64_t offset) {
  MaskedBatch b;
  const std::int64_t len = core.dim(1);
  b.signals = Tensor({1, cfg.in_channels, cfg.input_length});
  b.mask = Tensor({1, cfg.input_length});
  for (std::int64_t c = 0; c < cfg.in_channels; ++c) {
    std::memcpy(b.signals.ptr() + c * cfg.input_length + offset, core.ptr() + c * len,
                static_cast<std::size_t>(len) * sizeof(double));
  }
  for (std::int64_t t = 0; t < len; ++t) b.mask.ptr()[offset + t] = 1.0;
  b.labels = {0};
  return b;
}

}  // namespace

TEST_CASE("default config: 512-wide feature into a 9-way classifier") {
  EcgNetConfig cfg;
  cfg.validate();
  CHECK(cfg.feature_dim() == 512);
  CHECK(cfg.out_length() == 33);

  EcgNet net(cfg, 1234);
  bool saw_fc = false;
  for (const NamedParam& p : net.parameters()) {
    if (p.name == "fc.w") {
      saw_fc = true;
      CHECK(p.node->value().dim(0) == 9);
      CHECK(p.node->value().dim(1) == 512);
    }
  }
  CHECK(saw_fc);
}

TEST_CASE("channel doubling per block") {
  EcgNet net(desk_config(), 5);
  for (const NamedParam& p : net.parameters()) {
    if (p.name == "stem.conv.w") CHECK(p.node->value().dim(0) == 8);
    if (p.name == "block1.conv.w") CHECK(p.node->value().dim(0) == 16);
    if (p.name == "block2.conv.w") CHECK(p.node->value().dim(0) == 32);
  }
}

TEST_CASE("same seed gives bit-identical parameters") {
  EcgNet a(desk_config(), 99);
  EcgNet b(desk_config(), 99);
  REQUIRE(a.parameter_count() == b.parameter_count());
  for (std::size_t i = 0; i < a.parameter_count(); ++i) {
    const auto& av = a.parameter_value(i);
    const auto& bv = b.parameter_value(i);
    REQUIRE(av.numel() == bv.numel());
    CHECK(std::memcmp(av.ptr(), bv.ptr(), av.numel() * sizeof(double)) == 0);
  }
  EcgNet c(desk_config(), 100);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameter_count() && !any_diff; ++i) {
    const auto& av = a.parameter_value(i);
    const auto& cv = c.parameter_value(i);
    any_diff = std::memcmp(av.ptr(), cv.ptr(), av.numel() * sizeof(double)) != 0;
  }
  CHECK(any_diff);
}

TEST_CASE("config invariants are enforced") {
  EcgNetConfig cfg = desk_config();
  cfg.total_downsample = 128;  // not 4^(blocks+1)
  CHECK_THROWS_AS(cfg.validate(), ParameterError);

  cfg = desk_config();
  cfg.input_length = 2047;  // not divisible
  CHECK_THROWS_AS(cfg.validate(), ParameterError);

  cfg = desk_config();
  cfg.gn_groups = 3;  // does not divide stem channels
  CHECK_THROWS_AS(cfg.validate(), ParameterError);

  cfg = desk_config();
  cfg.kernel_size = 6;  // even kernels break the downsampling arithmetic
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
}

TEST_CASE("full-size forward keeps the shape contract") {
  EcgNetConfig cfg;  // 8 x 33792 -> 9 logits
  EcgNet net(cfg, 7);
  MaskedBatch b;
  b.signals = Tensor({1, 8, 33792});
  b.mask = Tensor::full({1, 33792}, 1.0);
  b.labels = {0};
  const Tensor logits = net.forward_values(b.signals, b.mask);
  CHECK(logits.shape() == Shape{1, 9});
  CHECK(logits.all_finite());
}

TEST_CASE("forward rejects mismatched shapes") {
  EcgNet net(desk_config(), 7);
  MaskedBatch b;
  b.signals = Tensor({1, 8, 1024});  // wrong length
  b.mask = Tensor::full({1, 1024}, 1.0);
  b.labels = {0};
  CHECK_THROWS_AS(net.forward(b), ParameterError);
}

TEST_CASE("grid-aligned re-placement leaves logits unchanged") {
  // aligned placements clear of the window edges are exactly equivariant;
  // spans that abut an edge pick up the conv-padding halo instead of the
  // constant feature background, so keep two grid cells of clearance
  const EcgNetConfig cfg = desk_config();
  EcgNet net(cfg, 21);
  Rng rng(22);
  const std::int64_t valid = 512;  // multiple of total_downsample
  const Tensor core = rand_tensor({8, valid}, rng);

  const MaskedBatch a = place_record(core, cfg, 128);
  const Tensor la = net.forward_values(a.signals, a.mask);
  for (std::int64_t offset : {192L, 640L, 1408L}) {
    const MaskedBatch b = place_record(core, cfg, offset);
    const Tensor lb = net.forward_values(b.signals, b.mask);
    for (std::int64_t e = 0; e < la.numel(); ++e) {
      CHECK(std::fabs(la.ptr()[e] - lb.ptr()[e]) < 1e-9);
    }
  }
}

TEST_CASE("unaligned re-placement changes logits only boundedly") {
  const EcgNetConfig cfg = desk_config();
  EcgNet net(cfg, 23);
  Rng rng(24);
  const Tensor core = rand_tensor({8, 512}, rng);
  const MaskedBatch a = place_record(core, cfg, 128);
  const Tensor la = net.forward_values(a.signals, a.mask);
  const MaskedBatch b = place_record(core, cfg, 165);  // off the downsampling grid
  const Tensor lb = net.forward_values(b.signals, b.mask);
  double worst = 0.0;
  for (std::int64_t e = 0; e < la.numel(); ++e) {
    worst = std::max(worst, std::fabs(la.ptr()[e] - lb.ptr()[e]));
  }
  CHECK(worst < 0.5);   // boundary windows mix; far looser than the aligned case
  CHECK(worst > 1e-9);  // and measurably different from it
}

TEST_CASE("all-zero signal gives the same constant logits for every sample") {
  const EcgNetConfig cfg = desk_config();
  EcgNet net(cfg, 31);
  MaskedBatch b;
  b.signals = Tensor({3, 8, 2048});
  b.mask = Tensor::full({3, 2048}, 1.0);
  b.labels = {0, 1, 2};
  const Tensor logits = net.forward_values(b.signals, b.mask);
  for (std::int64_t i = 1; i < 3; ++i) {
    for (std::int64_t j = 0; j < cfg.num_classes; ++j) {
      CHECK(logits.ptr()[i * cfg.num_classes + j] ==
            doctest::Approx(logits.ptr()[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("logit gradient w.r.t. the signal matches finite differences (spot check)") {
  const EcgNetConfig cfg = desk_config();
  EcgNet net(cfg, 41);
  Rng rng(42);
  const Tensor sig = rand_tensor({1, 8, 2048}, rng, -0.5, 0.5);
  const Tensor mask = Tensor::full({1, 2048}, 1.0);

  GraphFn f = [&net, &mask](std::span<const NodePtr> in) {
    return sum(square(net.forward(in[0], constant(mask))));
  };
  std::vector<std::int64_t> elems;
  Rng pick(43);
  for (int i = 0; i < 8; ++i) elems.push_back(pick.uniform_int(0, sig.numel() - 1));
  check_gradient_spot(f, {sig}, 0, elems, 1e-4);
}

TEST_CASE("masked_mean worked examples") {
  NodePtr f = constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  NodePtr m = constant(Tensor({3}, {1, 1, 0}));
  check_tensor_close(masked_mean(f, m)->value(), Tensor({2}, {1.5, 4.5}), 0, 0);

  NodePtr ones = constant(Tensor::full({3}, 1.0));
  check_tensor_close(masked_mean(f, ones)->value(), Tensor({2}, {2.0, 5.0}), 0, 0);

  NodePtr zeros = constant(Tensor({3}));
  CHECK_THROWS_AS(masked_mean(f, zeros), DataError);
}

TEST_CASE("downsample_mask worked examples") {
  // all ones at full scale
  NodePtr ones = constant(Tensor::full({33792}, 1.0));
  const Tensor d = downsample_mask(ones, 1024)->value();
  CHECK(d.shape() == Shape{33});
  for (double v : d.data()) CHECK(v == 1.0);

  // first window fully valid, the rest padding
  Tensor m({2048});
  for (std::int64_t t = 0; t < 1024; ++t) m.ptr()[t] = 1.0;
  const Tensor d2 = downsample_mask(constant(m), 1024)->value();
  CHECK(d2.ptr()[0] == 1.0);
  CHECK(d2.ptr()[1] == 0.0);

  // half-filled window averages to one half
  Tensor h({1024});
  for (std::int64_t t = 0; t < 512; ++t) h.ptr()[t] = 1.0;
  CHECK(downsample_mask(constant(h), 1024)->value().ptr()[0] == 0.5);

  CHECK_THROWS_AS(downsample_mask(constant(Tensor::full({10}, 1.0)), 3), ParameterError);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  const EcgNetConfig cfg = desk_config();
  EcgNet net(cfg, 77);
  const std::filesystem::path path = "t_checkpoint_roundtrip.bin";
  save_checkpoint(net, path, {{"method", "ce"}, {"note", "unit"}});

  LoadedCheckpoint loaded = load_checkpoint(path);
  CHECK(loaded.meta.at("method") == "ce");
  REQUIRE(loaded.net.parameter_count() == net.parameter_count());
  for (std::size_t i = 0; i < net.parameter_count(); ++i) {
    const auto& a = net.parameter_value(i);
    const auto& b = loaded.net.parameter_value(i);
    REQUIRE(a.same_shape(b));
    CHECK(std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(double)) == 0);
  }
  CHECK(model_checksum(net) == model_checksum(loaded.net));
  std::filesystem::remove(path);
}

TEST_CASE("batch validation") {
  const EcgNetConfig cfg = desk_config();
  MaskedBatch b;
  b.signals = Tensor({1, 8, 2048});
  b.signals.ptr()[100] = 0.5;
  b.mask = Tensor::full({1, 2048}, 1.0);
  b.labels = {0};
  CHECK_NOTHROW(b.validate(cfg));

  b.mask.ptr()[5] = 0.25;  // fractional entries are not valid input masks
  CHECK_THROWS_AS(b.validate(cfg), ParameterError);
  b.mask.ptr()[5] = 1.0;

  b.labels = {7};  // out of range for 3 classes
  CHECK_THROWS_AS(b.validate(cfg), ParameterError);
}
