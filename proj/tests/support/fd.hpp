#pragma once

// Finite-difference oracles used to check reverse-mode gradients. These only
// ever evaluate the forward pass, so they stay independent of the backward
// rules they verify.

#include <doctest.h>

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "ecgrobust/autograd.hpp"
#include "ecgrobust/ops.hpp"
#include "ecgrobust/rng.hpp"

namespace ecgrobust::test {

// scalar graph built from a fixed list of leaf inputs
using GraphFn = std::function<NodePtr(std::span<const NodePtr>)>;

inline Tensor rand_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// random values bounded away from zero, for kinked ops like relu/abs
inline Tensor rand_tensor_away_from_zero(const Shape& shape, Rng& rng, double margin = 0.05) {
  Tensor t(shape);
  for (double& v : t.data()) {
    const double mag = margin + rng.uniform(0.0, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

inline double eval_value(const GraphFn& f, const std::vector<Tensor>& inputs) {
  GradModeGuard guard(false);
  std::vector<NodePtr> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(constant(t));
  return f(leaves)->value().item();
}

inline Tensor fd_gradient(const GraphFn& f, std::vector<Tensor> inputs, std::size_t wrt,
                          double h = 1e-5) {
  Tensor g(inputs[wrt].shape());
  for (std::int64_t e = 0; e < g.numel(); ++e) {
    const double saved = inputs[wrt].ptr()[e];
    inputs[wrt].ptr()[e] = saved + h;
    const double fp = eval_value(f, inputs);
    inputs[wrt].ptr()[e] = saved - h;
    const double fm = eval_value(f, inputs);
    inputs[wrt].ptr()[e] = saved;
    g.ptr()[e] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline void check_tensor_close(const Tensor& got, const Tensor& want, double rtol,
                               double atol = 1e-8) {
  REQUIRE(got.same_shape(want));
  for (std::int64_t e = 0; e < got.numel(); ++e) {
    const double a = got.ptr()[e], b = want.ptr()[e];
    const double tol = atol + rtol * std::max(std::fabs(a), std::fabs(b));
    CHECK_MESSAGE(std::fabs(a - b) <= tol,
                  "element ", e, ": got ", a, " want ", b, " (tol ", tol, ")");
    if (!(std::fabs(a - b) <= tol)) return;  // avoid drowning the log
  }
}

// reverse-mode gradients of every input against central differences
inline void check_gradients(const GraphFn& f, const std::vector<Tensor>& inputs,
                            double rtol = 1e-4, double h = 1e-5, double atol = 1e-8) {
  std::vector<NodePtr> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(variable(t));
  NodePtr out = f(leaves);
  REQUIRE(out->value().numel() == 1);
  const auto gs = grad(out, leaves);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    check_tensor_close(gs[i]->value(), fd_gradient(f, inputs, i, h), rtol, atol);
  }
}

// finite-difference check restricted to chosen elements of one input; for
// large tensors where the full sweep would be too slow
inline void check_gradient_spot(const GraphFn& f, const std::vector<Tensor>& inputs,
                                std::size_t wrt, std::span<const std::int64_t> elements,
                                double rtol = 1e-4, double h = 1e-5, double atol = 1e-8) {
  std::vector<NodePtr> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(variable(t));
  NodePtr out = f(leaves);
  const Tensor got = grad(out, std::span<const NodePtr>(&leaves[wrt], 1))[0]->value();

  std::vector<Tensor> shifted = inputs;
  for (std::int64_t e : elements) {
    const double saved = shifted[wrt].ptr()[e];
    shifted[wrt].ptr()[e] = saved + h;
    const double fp = eval_value(f, shifted);
    shifted[wrt].ptr()[e] = saved - h;
    const double fm = eval_value(f, shifted);
    shifted[wrt].ptr()[e] = saved;
    const double fd = (fp - fm) / (2.0 * h);
    const double a = got.ptr()[e];
    const double tol = atol + rtol * std::max(std::fabs(a), std::fabs(fd));
    CHECK_MESSAGE(std::fabs(a - fd) <= tol, "element ", e, ": got ", a, " want ", fd);
  }
}

// d/dx of ||d f / d x||^2 against finite differences of the first-order pass
inline void check_second_order(const GraphFn& f, const std::vector<Tensor>& inputs,
                               std::size_t wrt, double rtol = 1e-3, double h = 1e-5) {
  auto grad_norm_sq = [&](const std::vector<Tensor>& vals) {
    std::vector<NodePtr> leaves;
    leaves.reserve(vals.size());
    for (const Tensor& t : vals) leaves.push_back(variable(t));
    NodePtr out = f(leaves);
    NodePtr g = grad(out, std::span<const NodePtr>(&leaves[wrt], 1), /*create_graph=*/true)[0];
    return std::pair(sum(square(g)), leaves);
  };

  auto [loss, leaves] = grad_norm_sq(inputs);
  const NodePtr second = grad(loss, std::span<const NodePtr>(&leaves[wrt], 1))[0];

  Tensor fd(inputs[wrt].shape());
  std::vector<Tensor> shifted = inputs;
  for (std::int64_t e = 0; e < fd.numel(); ++e) {
    const double saved = shifted[wrt].ptr()[e];
    shifted[wrt].ptr()[e] = saved + h;
    const double fp = grad_norm_sq(shifted).first->value().item();
    shifted[wrt].ptr()[e] = saved - h;
    const double fm = grad_norm_sq(shifted).first->value().item();
    shifted[wrt].ptr()[e] = saved;
    fd.ptr()[e] = (fp - fm) / (2.0 * h);
  }
  check_tensor_close(second->value(), fd, rtol, 1e-7);
}

}  // namespace ecgrobust::test
