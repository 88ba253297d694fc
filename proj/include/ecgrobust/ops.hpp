#pragma once

#include <span>
#include <vector>

#include "ecgrobust/autograd.hpp"

namespace ecgrobust {

// ---------------------------------------------------------------------------
// Differentiable ops. Every backward rule is written with these same ops, so
// gradients computed under create_graph can be differentiated again. Shapes
// must match exactly; there is no implicit broadcasting beyond the explicit
// broadcast ops below.
// ---------------------------------------------------------------------------

// elementwise
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr div(const NodePtr& a, const NodePtr& b);
NodePtr maximum(const NodePtr& a, const NodePtr& b);  // ties send the gradient to a

NodePtr relu(const NodePtr& x);  // subgradient at 0 is 0
NodePtr abs(const NodePtr& x);   // subgradient at 0 is 0
NodePtr sqrt(const NodePtr& x);
NodePtr log(const NodePtr& x);
NodePtr exp(const NodePtr& x);
NodePtr square(const NodePtr& x);
NodePtr neg(const NodePtr& x);
NodePtr add_scalar(const NodePtr& x, double c);
NodePtr mul_scalar(const NodePtr& x, double c);

// reductions and broadcasts
NodePtr sum(const NodePtr& x);   // -> rank-0
NodePtr mean(const NodePtr& x);  // -> rank-0
NodePtr sum_last(const NodePtr& x);                        // [..., t] -> [...]
NodePtr mean_last(const NodePtr& x);                       // [..., t] -> [...]
NodePtr repeat_last(const NodePtr& x, std::int64_t t);     // [...] -> [..., t]
NodePtr repeat_first(const NodePtr& x, std::int64_t n);    // [...] -> [n, ...]
NodePtr sum_first(const NodePtr& x);                       // [n, ...] -> [...]
NodePtr broadcast_scalar(const NodePtr& s, Shape shape);   // rank-0 -> shape
NodePtr reshape(const NodePtr& x, Shape shape);

// linear algebra (2-D)
NodePtr matmul(const NodePtr& a, const NodePtr& b);  // [m,k]x[k,n] -> [m,n]
NodePtr transpose(const NodePtr& x);                 // [m,n] -> [n,m]
// x [n,in] or [in]; w [out,in]; b [out] -> [n,out] or [out]
NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& b);

// channel-axis helpers for [n,c,l] tensors
NodePtr broadcast_channel(const NodePtr& v, std::int64_t n, std::int64_t l);  // [c] -> [n,c,l]
NodePtr channel_sum(const NodePtr& x);                                        // [n,c,l] -> [c]
NodePtr repeat_mid(const NodePtr& x, std::int64_t c);                         // [n,l] -> [n,c,l]
NodePtr sum_mid(const NodePtr& x);                                            // [n,c,l] -> [n,l]

// per-row selection: z [n,k], labels[i] in [0,k) -> [n]
NodePtr select_labels(const NodePtr& z, std::span<const int> labels);

// convolution and pooling over the last axis; x is [n,c,l] or [c,l]
NodePtr conv1d(const NodePtr& x, const NodePtr& w, const NodePtr& b, std::int64_t stride,
               std::int64_t pad);

enum class PoolKind { kMax, kAvg };
NodePtr pool1d(const NodePtr& x, PoolKind kind, std::int64_t k, std::int64_t stride,
               std::int64_t pad = 0);

// per-group standardization then per-channel affine; x [n,c,l] or [c,l]
NodePtr group_norm(const NodePtr& x, std::int64_t groups, const NodePtr& gamma,
                   const NodePtr& beta, double eps = 1e-5);

// mean of -log softmax(logits)[label] over rows; logits [n,k]
NodePtr softmax_cross_entropy(const NodePtr& logits, std::span<const int> labels);

// out[n,c] = sum_t f[n,c,t]*m[n,t] / sum_t m[n,t]; every mask row must have a
// positive sum. Also accepts [c,t] features with a [t] mask.
NodePtr masked_mean(const NodePtr& features, const NodePtr& mask);

// average-pool a [n,t] (or [t]) mask with kernel = stride = factor
NodePtr downsample_mask(const NodePtr& mask, std::int64_t factor);

// value-level helpers (no graph)
std::vector<int> argmax_rows(const Tensor& values);  // [n,k] -> n predictions, first index wins
Tensor sign_tensor(const Tensor& x);                 // sign(0) = 0

}  // namespace ecgrobust
