#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ecgrobust/ops.hpp"

namespace ecgrobust {

// Architecture hyperparameters. The stem halves the sequence twice
// (stride-2 conv + 2x max-pool) and every block does the same while doubling
// the channel count, so total_downsample must equal 4^(num_blocks+1).
struct EcgNetConfig {
  std::int64_t in_channels = 8;
  std::int64_t input_length = 33792;
  std::int64_t num_classes = 9;
  std::int64_t stem_channels = 32;
  std::int64_t num_blocks = 4;
  std::int64_t total_downsample = 1024;
  std::int64_t kernel_size = 7;
  std::int64_t gn_groups = 8;

  void validate() const;  // throws ParameterError
  std::int64_t feature_dim() const;  // stem_channels * 2^num_blocks
  std::int64_t out_length() const;   // input_length / total_downsample
};

// A batch of fixed-length signals with per-time-step validity masks.
// mask[n,t] = 0 exactly where signals[n,:,t] is padding.
struct MaskedBatch {
  Tensor signals;  // [n, c, l]
  Tensor mask;     // [n, l], entries in {0,1}
  std::vector<int> labels;

  std::int64_t size() const { return signals.rank() == 3 ? signals.dim(0) : 0; }
  void validate(const EcgNetConfig& cfg) const;  // throws ParameterError/DataError
};

struct NamedParam {
  std::string name;
  NodePtr node;
};

// The masked variable-length CNN: conv stem, doubling conv blocks, mask
// downsampling, mask-weighted channel averaging, linear classifier.
class EcgNet {
 public:
  EcgNet(EcgNetConfig cfg, std::uint64_t seed);

  const EcgNetConfig& config() const { return cfg_; }

  // logits [n, num_classes]. With frozen=true the parameters are detached so
  // gradients flow only into the input (attack mode).
  NodePtr forward(const NodePtr& signals, const NodePtr& mask, bool frozen = false) const;
  NodePtr forward(const MaskedBatch& batch, bool frozen = false) const;

  // evaluation path: no graph is recorded
  Tensor forward_values(const Tensor& signals, const Tensor& mask) const;

  std::span<const NamedParam> parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::int64_t scalar_parameter_count() const;

  const Tensor& parameter_value(std::size_t i) const;
  // replaces the leaf; the old node (and its grad) is dropped
  void assign_parameter(std::size_t i, Tensor value);
  void zero_grad();

  std::vector<Tensor> snapshot_parameters() const;
  void restore_parameters(const std::vector<Tensor>& values);

 private:
  struct LayerRef {
    std::size_t w, b, gamma, beta;
  };

  std::size_t add_param(const std::string& name, Tensor value);

  EcgNetConfig cfg_;
  std::vector<NamedParam> params_;
  LayerRef stem_{};
  std::vector<LayerRef> blocks_;
  std::size_t fc_w_ = 0, fc_b_ = 0;
};

EcgNet build_ecgnet(const EcgNetConfig& cfg, std::uint64_t seed);

}  // namespace ecgrobust
