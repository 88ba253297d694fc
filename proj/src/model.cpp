#include "ecgrobust/model.hpp"

#include <cmath>
#include <utility>

#include "ecgrobust/errors.hpp"
#include "ecgrobust/rng.hpp"

namespace ecgrobust {

void EcgNetConfig::validate() const {
  if (in_channels < 1) throw ParameterError("config: in_channels must be >= 1");
  if (input_length < 1) throw ParameterError("config: input_length must be >= 1");
  if (num_classes < 2) throw ParameterError("config: num_classes must be >= 2");
  if (stem_channels < 1) throw ParameterError("config: stem_channels must be >= 1");
  if (num_blocks < 1) throw ParameterError("config: num_blocks must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ParameterError("config: kernel_size must be odd and positive");
  }
  if (gn_groups < 1 || stem_channels % gn_groups != 0) {
    throw ParameterError("config: gn_groups must divide stem_channels");
  }
  std::int64_t expected = 4;  // stem: stride-2 conv + 2x pool
  for (std::int64_t i = 0; i < num_blocks; ++i) expected *= 4;
  if (total_downsample != expected) {
    throw ParameterError("config: total_downsample must be 4^(num_blocks+1) = " +
                         std::to_string(expected) + ", got " + std::to_string(total_downsample));
  }
  if (input_length % total_downsample != 0) {
    throw ParameterError("config: input_length " + std::to_string(input_length) +
                         " not divisible by total_downsample " + std::to_string(total_downsample));
  }
}

std::int64_t EcgNetConfig::feature_dim() const {
  std::int64_t f = stem_channels;
  for (std::int64_t i = 0; i < num_blocks; ++i) f *= 2;
  return f;
}

std::int64_t EcgNetConfig::out_length() const { return input_length / total_downsample; }

void MaskedBatch::validate(const EcgNetConfig& cfg) const {
  if (signals.rank() != 3 || signals.dim(1) != cfg.in_channels ||
      signals.dim(2) != cfg.input_length) {
    throw ParameterError("batch: signals must be [n," + std::to_string(cfg.in_channels) + "," +
                         std::to_string(cfg.input_length) + "], got " +
                         shape_string(signals.shape()));
  }
  const std::int64_t n = signals.dim(0);
  if (mask.rank() != 2 || mask.dim(0) != n || mask.dim(1) != cfg.input_length) {
    throw ParameterError("batch: mask must be [n," + std::to_string(cfg.input_length) +
                         "], got " + shape_string(mask.shape()));
  }
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ParameterError("batch: label count does not match batch size");
  }
  for (int y : labels) {
    if (y < 0 || y >= cfg.num_classes) throw ParameterError("batch: label out of range");
  }
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t t = 0; t < cfg.input_length; ++t) {
      const double m = mask.ptr()[i * cfg.input_length + t];
      if (m != 0.0 && m != 1.0) throw ParameterError("batch: mask entries must be 0 or 1");
      s += m;
    }
    if (s <= 0.0) throw DataError("batch: sample " + std::to_string(i) + " has an empty mask");
  }
}

namespace {

Tensor uniform_init(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  Tensor t(shape);
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

EcgNet::EcgNet(EcgNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(derive_seed(seed, "init"));
  const std::int64_t k = cfg_.kernel_size;

  auto add_conv_block = [&](const std::string& prefix, std::int64_t cin, std::int64_t cout) {
    LayerRef ref;
    ref.w = add_param(prefix + ".conv.w", uniform_init({cout, cin, k}, cin * k, rng));
    ref.b = add_param(prefix + ".conv.b", uniform_init({cout}, cin * k, rng));
    ref.gamma = add_param(prefix + ".gn.gamma", Tensor::full({cout}, 1.0));
    ref.beta = add_param(prefix + ".gn.beta", Tensor({cout}));
    return ref;
  };

  stem_ = add_conv_block("stem", cfg_.in_channels, cfg_.stem_channels);
  std::int64_t c = cfg_.stem_channels;
  for (std::int64_t i = 0; i < cfg_.num_blocks; ++i) {
    blocks_.push_back(add_conv_block("block" + std::to_string(i + 1), c, c * 2));
    c *= 2;
  }
  const std::int64_t f = cfg_.feature_dim();
  fc_w_ = add_param("fc.w", uniform_init({cfg_.num_classes, f}, f, rng));
  fc_b_ = add_param("fc.b", uniform_init({cfg_.num_classes}, f, rng));
}

std::size_t EcgNet::add_param(const std::string& name, Tensor value) {
  params_.push_back({name, Node::leaf(std::move(value), true)});
  return params_.size() - 1;
}

NodePtr EcgNet::forward(const NodePtr& signals, const NodePtr& mask, bool frozen) const {
  const Tensor& sv = signals->value();
  if (sv.rank() != 3 || sv.dim(1) != cfg_.in_channels || sv.dim(2) != cfg_.input_length) {
    throw ParameterError("forward: signals must be [n," + std::to_string(cfg_.in_channels) +
                         "," + std::to_string(cfg_.input_length) + "], got " +
                         shape_string(sv.shape()));
  }
  if (mask->value().rank() != 2 || mask->value().dim(0) != sv.dim(0) ||
      mask->value().dim(1) != cfg_.input_length) {
    throw ParameterError("forward: mask shape " + shape_string(mask->value().shape()) +
                         " does not match signals " + shape_string(sv.shape()));
  }

  auto P = [&](std::size_t i) {
    return frozen ? detach(params_[i].node) : params_[i].node;
  };
  const std::int64_t pad = cfg_.kernel_size / 2;

  auto conv_block = [&](const NodePtr& in, const LayerRef& ref) {
    NodePtr h = conv1d(in, P(ref.w), P(ref.b), 2, pad);
    h = group_norm(h, cfg_.gn_groups, P(ref.gamma), P(ref.beta));
    h = relu(h);
    return pool1d(h, PoolKind::kMax, 2, 2, 0);
  };

  NodePtr h = conv_block(signals, stem_);
  for (const LayerRef& blk : blocks_) h = conv_block(h, blk);

  NodePtr out_mask = downsample_mask(mask, cfg_.total_downsample);
  NodePtr feature = masked_mean(h, out_mask);
  return linear(feature, P(fc_w_), P(fc_b_));
}

NodePtr EcgNet::forward(const MaskedBatch& batch, bool frozen) const {
  return forward(constant(batch.signals), constant(batch.mask), frozen);
}

Tensor EcgNet::forward_values(const Tensor& signals, const Tensor& mask) const {
  GradModeGuard guard(false);
  return forward(constant(signals), constant(mask), false)->value();
}

std::int64_t EcgNet::scalar_parameter_count() const {
  std::int64_t n = 0;
  for (const NamedParam& p : params_) n += p.node->value().numel();
  return n;
}

const Tensor& EcgNet::parameter_value(std::size_t i) const {
  return params_.at(i).node->value();
}

void EcgNet::assign_parameter(std::size_t i, Tensor value) {
  NamedParam& p = params_.at(i);
  if (!value.same_shape(p.node->value())) {
    throw ParameterError("assign_parameter: shape mismatch for " + p.name);
  }
  p.node = Node::leaf(std::move(value), true);
}

void EcgNet::zero_grad() {
  for (NamedParam& p : params_) p.node->clear_grad();
}

std::vector<Tensor> EcgNet::snapshot_parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const NamedParam& p : params_) out.push_back(p.node->value());
  return out;
}

void EcgNet::restore_parameters(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) {
    throw ParameterError("restore_parameters: tensor count mismatch");
  }
  for (std::size_t i = 0; i < values.size(); ++i) assign_parameter(i, values[i]);
}

EcgNet build_ecgnet(const EcgNetConfig& cfg, std::uint64_t seed) { return EcgNet(cfg, seed); }

}  // namespace ecgrobust
