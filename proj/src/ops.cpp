#include "ecgrobust/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ecgrobust/errors.hpp"

namespace ecgrobust {
namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ParameterError(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ParameterError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

constexpr std::int64_t kParallelCutoff = 1 << 15;

template <typename F>
Tensor map1(const Tensor& x, F f) {
  Tensor out = Tensor::uninit(x.shape());
  const double* px = x.ptr();
  double* po = out.ptr();
  const std::int64_t n = x.numel();
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
  return out;
}

template <typename F>
Tensor map2(const Tensor& a, const Tensor& b, F f) {
  Tensor out = Tensor::uninit(a.shape());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  const std::int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

NodePtr make_node(Tensor out, std::vector<Edge> edges) {
  return Node::with_edges(std::move(out), std::move(edges));
}

// ---------------------------------------------------------------------------
// convolution kernels: forward, input-gradient and weight-gradient are three
// bilinear maps that express each other's adjoints, which is what makes the
// whole stack differentiable to second order.
// ---------------------------------------------------------------------------

struct ConvGeom {
  std::int64_t n, cin, len, cout, k, stride, pad, lout;
};

ConvGeom conv_geom(const Shape& xs, const Shape& ws, std::int64_t stride, std::int64_t pad) {
  require(ws.size() == 3, "conv1d: weight must be rank-3 [cout,cin,k]");
  require(xs.size() == 3, "conv1d: input must be rank-3 here");
  ConvGeom g;
  g.n = xs[0];
  g.cin = xs[1];
  g.len = xs[2];
  g.cout = ws[0];
  g.k = ws[2];
  require(ws[1] == g.cin, "conv1d: input channels " + std::to_string(g.cin) +
                              " do not match weight channels " + std::to_string(ws[1]));
  require(stride >= 1, "conv1d: stride must be >= 1");
  require(pad >= 0, "conv1d: pad must be >= 0");
  require(g.len + 2 * pad >= g.k, "conv1d: window larger than padded input");
  g.stride = stride;
  g.pad = pad;
  g.lout = (g.len + 2 * pad - g.k) / stride + 1;
  require(g.lout >= 1, "conv1d: empty output");
  return g;
}

// valid output range of t for reading xr[t*stride + off]: 0 <= t*s+off < len
struct TapRange {
  std::int64_t lo, hi;
};

inline TapRange tap_range(std::int64_t off, std::int64_t stride, std::int64_t len,
                          std::int64_t lout) {
  TapRange r{0, lout};
  if (off < 0) r.lo = (-off + stride - 1) / stride;
  const std::int64_t top = len - 1 - off;
  if (top < 0) {
    r.hi = r.lo;
  } else {
    r.hi = std::min(lout, top / stride + 1);
  }
  return r;
}

// bias (when present) seeds the accumulator rows
Tensor conv_core_val(const Tensor& x, const Tensor& w, const double* bias, const ConvGeom& g) {
  Tensor out = Tensor::uninit({g.n, g.cout, g.lout});
  const double* X = x.ptr();
  const double* W = w.ptr();
  double* O = out.ptr();
#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t a = 0; a < g.n; ++a) {
    for (std::int64_t o = 0; o < g.cout; ++o) {
      double* orow = O + (a * g.cout + o) * g.lout;
      const double seed = bias ? bias[o] : 0.0;
      for (std::int64_t t = 0; t < g.lout; ++t) orow[t] = seed;
      for (std::int64_t i = 0; i < g.cin; ++i) {
        const double* xr = X + (a * g.cin + i) * g.len;
        const double* wk = W + (o * g.cin + i) * g.k;
        for (std::int64_t kk = 0; kk < g.k; ++kk) {
          const double wv = wk[kk];
          const std::int64_t off = kk - g.pad;
          const TapRange r = tap_range(off, g.stride, g.len, g.lout);
          const double* xb = xr + off;
          const std::int64_t s = g.stride;
          for (std::int64_t t = r.lo; t < r.hi; ++t) orow[t] += wv * xb[t * s];
        }
      }
    }
  }
  return out;
}

Tensor conv_igrad_val(const Tensor& gy, const Tensor& w, const ConvGeom& g) {
  Tensor out({g.n, g.cin, g.len});
  const double* GY = gy.ptr();
  const double* W = w.ptr();
  double* GX = out.ptr();
#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t a = 0; a < g.n; ++a) {
    for (std::int64_t i = 0; i < g.cin; ++i) {
      double* gxr = GX + (a * g.cin + i) * g.len;
      for (std::int64_t o = 0; o < g.cout; ++o) {
        const double* grow = GY + (a * g.cout + o) * g.lout;
        const double* wk = W + (o * g.cin + i) * g.k;
        for (std::int64_t kk = 0; kk < g.k; ++kk) {
          const double wv = wk[kk];
          const std::int64_t off = kk - g.pad;
          const TapRange r = tap_range(off, g.stride, g.len, g.lout);
          double* gb = gxr + off;
          const std::int64_t s = g.stride;
          for (std::int64_t t = r.lo; t < r.hi; ++t) gb[t * s] += wv * grow[t];
        }
      }
    }
  }
  return out;
}

Tensor conv_wgrad_val(const Tensor& gy, const Tensor& x, const ConvGeom& g) {
  Tensor out = Tensor::uninit({g.cout, g.cin, g.k});
  const double* GY = gy.ptr();
  const double* X = x.ptr();
  double* GW = out.ptr();
#pragma omp parallel for schedule(static)
  for (std::int64_t o = 0; o < g.cout; ++o) {
    for (std::int64_t i = 0; i < g.cin; ++i) {
      for (std::int64_t kk = 0; kk < g.k; ++kk) {
        const std::int64_t d = g.pad - kk;
        const std::int64_t tlo = d > 0 ? (d + g.stride - 1) / g.stride : 0;
        const std::int64_t hi_num = g.len - 1 + g.pad - kk;
        if (hi_num < 0 || tlo >= g.lout) {
          GW[(o * g.cin + i) * g.k + kk] = 0.0;
          continue;
        }
        const std::int64_t thi = std::min(g.lout - 1, hi_num / g.stride);
        double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
        for (std::int64_t a = 0; a < g.n; ++a) {
          const double* grow = GY + (a * g.cout + o) * g.lout;
          const double* xr = X + (a * g.cin + i) * g.len + (kk - g.pad);
          std::int64_t t = tlo;
          for (; t + 3 <= thi; t += 4) {
            a0 += grow[t] * xr[t * g.stride];
            a1 += grow[t + 1] * xr[(t + 1) * g.stride];
            a2 += grow[t + 2] * xr[(t + 2) * g.stride];
            a3 += grow[t + 3] * xr[(t + 3) * g.stride];
          }
          for (; t <= thi; ++t) a0 += grow[t] * xr[t * g.stride];
        }
        GW[(o * g.cin + i) * g.k + kk] = (a0 + a1) + (a2 + a3);
      }
    }
  }
  return out;
}

// bias may be null; the linear-part adjoints never reintroduce it
NodePtr conv_core_op(const NodePtr& x, const NodePtr& w, const NodePtr& bias, const ConvGeom& g);
NodePtr conv_igrad_op(const NodePtr& gy, const NodePtr& w, const ConvGeom& g);
NodePtr conv_wgrad_op(const NodePtr& gy, const NodePtr& x, const ConvGeom& g);

NodePtr conv_core_op(const NodePtr& x, const NodePtr& w, const NodePtr& bias,
                     const ConvGeom& g) {
  Tensor out = conv_core_val(x->value(), w->value(), bias ? bias->value().ptr() : nullptr, g);
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (x->requires_grad())
      edges.push_back({x, [w, g](const NodePtr& up) { return conv_igrad_op(up, w, g); }});
    if (w->requires_grad())
      edges.push_back({w, [x, g](const NodePtr& up) { return conv_wgrad_op(up, x, g); }});
    if (bias && bias->requires_grad())
      edges.push_back({bias, [](const NodePtr& up) { return channel_sum(up); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr conv_igrad_op(const NodePtr& gy, const NodePtr& w, const ConvGeom& g) {
  Tensor out = conv_igrad_val(gy->value(), w->value(), g);
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (gy->requires_grad())
      edges.push_back(
          {gy, [w, g](const NodePtr& up) { return conv_core_op(up, w, nullptr, g); }});
    if (w->requires_grad())
      edges.push_back({w, [gy, g](const NodePtr& up) { return conv_wgrad_op(gy, up, g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr conv_wgrad_op(const NodePtr& gy, const NodePtr& x, const ConvGeom& g) {
  Tensor out = conv_wgrad_val(gy->value(), x->value(), g);
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (gy->requires_grad())
      edges.push_back(
          {gy, [x, g](const NodePtr& up) { return conv_core_op(x, up, nullptr, g); }});
    if (x->requires_grad())
      edges.push_back({x, [gy, g](const NodePtr& up) { return conv_igrad_op(gy, up, g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

// ---------------------------------------------------------------------------
// pooling kernels
// ---------------------------------------------------------------------------

struct PoolGeom {
  std::int64_t n, c, len, k, stride, pad, lout;
};

PoolGeom pool_geom(const Shape& xs, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  require(xs.size() == 3, "pool1d: input must be rank-3 here");
  PoolGeom g;
  g.n = xs[0];
  g.c = xs[1];
  g.len = xs[2];
  require(k >= 1 && stride >= 1 && pad >= 0 && pad < k, "pool1d: invalid window geometry");
  require(g.len + 2 * pad >= k, "pool1d: window larger than padded input");
  g.k = k;
  g.stride = stride;
  g.pad = pad;
  g.lout = (g.len + 2 * pad - k) / stride + 1;
  require(g.lout >= 1, "pool1d: empty output");
  return g;
}

using IndexVec = std::shared_ptr<const std::vector<std::int64_t>>;

NodePtr pool_scatter_op(const NodePtr& src, const IndexVec& idx, const PoolGeom& g);
NodePtr pool_take_op(const NodePtr& src, const IndexVec& idx, const PoolGeom& g);

// out[row, t] accumulates src[row, tau] over windows whose argmax hit t
NodePtr pool_scatter_op(const NodePtr& src, const IndexVec& idx, const PoolGeom& g) {
  Tensor out({g.n, g.c, g.len});
  {
    const double* S = src->value().ptr();
    double* O = out.ptr();
    const std::int64_t rows = g.n * g.c;
#pragma omp parallel for schedule(static) if (rows > 1)
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* srow = S + r * g.lout;
      const std::int64_t* irow = idx->data() + r * g.lout;
      double* orow = O + r * g.len;
      for (std::int64_t t = 0; t < g.lout; ++t) orow[irow[t]] += srow[t];
    }
  }
  std::vector<Edge> edges;
  if (grad_mode() && src->requires_grad()) {
    edges.push_back(
        {src, [idx, g](const NodePtr& up) { return pool_take_op(up, idx, g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr pool_take_op(const NodePtr& src, const IndexVec& idx, const PoolGeom& g) {
  Tensor out = Tensor::uninit({g.n, g.c, g.lout});
  {
    const double* S = src->value().ptr();
    double* O = out.ptr();
    const std::int64_t rows = g.n * g.c;
#pragma omp parallel for schedule(static) if (rows > 1)
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* srow = S + r * g.len;
      const std::int64_t* irow = idx->data() + r * g.lout;
      double* orow = O + r * g.lout;
      for (std::int64_t t = 0; t < g.lout; ++t) orow[t] = srow[irow[t]];
    }
  }
  std::vector<Edge> edges;
  if (grad_mode() && src->requires_grad()) {
    edges.push_back(
        {src, [idx, g](const NodePtr& up) { return pool_scatter_op(up, idx, g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr maxpool_op(const NodePtr& x, const PoolGeom& g) {
  Tensor out = Tensor::uninit({g.n, g.c, g.lout});
  auto idx = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(g.n * g.c * g.lout));
  {
    const double* X = x->value().ptr();
    double* O = out.ptr();
    std::int64_t* I = idx->data();
    const std::int64_t rows = g.n * g.c;
    const bool plain2 = g.k == 2 && g.stride == 2 && g.pad == 0;
#pragma omp parallel for schedule(static) if (rows > 1)
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = X + r * g.len;
      double* orow = O + r * g.lout;
      std::int64_t* irow = I + r * g.lout;
      if (plain2) {
        for (std::int64_t t = 0; t < g.lout; ++t) {
          const double a = xr[2 * t], b = xr[2 * t + 1];
          const bool right = b > a;  // ties keep the first index
          orow[t] = right ? b : a;
          irow[t] = 2 * t + (right ? 1 : 0);
        }
        continue;
      }
      for (std::int64_t t = 0; t < g.lout; ++t) {
        const std::int64_t t0 = t * g.stride - g.pad;
        const std::int64_t klo = std::max<std::int64_t>(0, -t0);
        const std::int64_t khi = std::min(g.k, g.len - t0);
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t bi = t0 + klo;
        for (std::int64_t kk = klo; kk < khi; ++kk) {
          if (xr[t0 + kk] > best) {
            best = xr[t0 + kk];
            bi = t0 + kk;
          }
        }
        orow[t] = best;
        irow[t] = bi;
      }
    }
  }
  IndexVec cidx = idx;
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back(
        {x, [cidx, g](const NodePtr& up) { return pool_scatter_op(up, cidx, g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr avgpool_fwd_op(const NodePtr& x, const PoolGeom& g);
NodePtr avgpool_adj_op(const NodePtr& gy, const PoolGeom& g);

// window mean; out-of-range positions count as zeros, the divisor is always k
NodePtr avgpool_fwd_op(const NodePtr& x, const PoolGeom& g) {
  Tensor out = Tensor::uninit({g.n, g.c, g.lout});
  {
    const double* X = x->value().ptr();
    double* O = out.ptr();
    const double inv_k = 1.0 / static_cast<double>(g.k);
    const std::int64_t rows = g.n * g.c;
#pragma omp parallel for schedule(static) if (rows > 1)
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = X + r * g.len;
      double* orow = O + r * g.lout;
      for (std::int64_t t = 0; t < g.lout; ++t) {
        const std::int64_t t0 = t * g.stride - g.pad;
        const std::int64_t klo = std::max<std::int64_t>(0, -t0);
        const std::int64_t khi = std::min(g.k, g.len - t0);
        double acc = 0.0;
        for (std::int64_t kk = klo; kk < khi; ++kk) acc += xr[t0 + kk];
        orow[t] = acc * inv_k;
      }
    }
  }
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [g](const NodePtr& up) { return avgpool_adj_op(up, g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr avgpool_adj_op(const NodePtr& gy, const PoolGeom& g) {
  Tensor out({g.n, g.c, g.len});
  {
    const double* GY = gy->value().ptr();
    double* O = out.ptr();
    const double inv_k = 1.0 / static_cast<double>(g.k);
    const std::int64_t rows = g.n * g.c;
#pragma omp parallel for schedule(static) if (rows > 1)
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* grow = GY + r * g.lout;
      double* orow = O + r * g.len;
      for (std::int64_t t = 0; t < g.lout; ++t) {
        const double gv = grow[t] * inv_k;
        if (gv == 0.0) continue;
        const std::int64_t t0 = t * g.stride - g.pad;
        const std::int64_t klo = std::max<std::int64_t>(0, -t0);
        const std::int64_t khi = std::min(g.k, g.len - t0);
        for (std::int64_t kk = klo; kk < khi; ++kk) orow[t0 + kk] += gv;
      }
    }
  }
  std::vector<Edge> edges;
  if (grad_mode() && gy->requires_grad()) {
    edges.push_back({gy, [g](const NodePtr& up) { return avgpool_fwd_op(up, g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

// ---------------------------------------------------------------------------
// label selection
// ---------------------------------------------------------------------------

using LabelVec = std::shared_ptr<const std::vector<int>>;

NodePtr select_labels_impl(const NodePtr& z, const LabelVec& labels);
NodePtr scatter_labels_impl(const NodePtr& v, const LabelVec& labels, std::int64_t k);

NodePtr select_labels_impl(const NodePtr& z, const LabelVec& labels) {
  const Tensor& zv = z->value();
  const std::int64_t n = zv.dim(0), k = zv.dim(1);
  Tensor out = Tensor::uninit({n});
  for (std::int64_t i = 0; i < n; ++i)
    out.ptr()[i] = zv.ptr()[i * k + (*labels)[static_cast<std::size_t>(i)]];
  std::vector<Edge> edges;
  if (grad_mode() && z->requires_grad()) {
    edges.push_back(
        {z, [labels, k](const NodePtr& up) { return scatter_labels_impl(up, labels, k); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr scatter_labels_impl(const NodePtr& v, const LabelVec& labels, std::int64_t k) {
  const Tensor& vv = v->value();
  const std::int64_t n = vv.dim(0);
  Tensor out({n, k});
  for (std::int64_t i = 0; i < n; ++i)
    out.ptr()[i * k + (*labels)[static_cast<std::size_t>(i)]] = vv.ptr()[i];
  std::vector<Edge> edges;
  if (grad_mode() && v->requires_grad()) {
    edges.push_back(
        {v, [labels](const NodePtr& up) { return select_labels_impl(up, labels); }});
  }
  return make_node(std::move(out), std::move(edges));
}

// per-group mean broadcast back over the group; self-adjoint linear map
NodePtr group_mean_op(const NodePtr& x, std::int64_t groups) {
  const Tensor& xv = x->value();
  const std::int64_t n = xv.dim(0), c = xv.dim(1), l = xv.dim(2);
  const std::int64_t m = (c / groups) * l;
  Tensor out = Tensor::uninit({n, c, l});
  {
    const double* X = xv.ptr();
    double* O = out.ptr();
    const std::int64_t blocks = n * groups;
#pragma omp parallel for schedule(static) if (blocks > 1)
    for (std::int64_t blk = 0; blk < blocks; ++blk) {
      const double* src = X + blk * m;
      double* dst = O + blk * m;
      double acc = 0.0;
      for (std::int64_t e = 0; e < m; ++e) acc += src[e];
      const double mean = acc / static_cast<double>(m);
      for (std::int64_t e = 0; e < m; ++e) dst[e] = mean;
    }
  }
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [groups](const NodePtr& up) { return group_mean_op(up, groups); }});
  }
  return make_node(std::move(out), std::move(edges));
}

// out[n,c,l] = x[n,c,l] * v[c]
NodePtr channel_scale_op(const NodePtr& x, const NodePtr& v);
// out[c] = sum over n,l of a[n,c,l] * b[n,c,l]
NodePtr channel_dot_op(const NodePtr& a, const NodePtr& b);

NodePtr channel_scale_op(const NodePtr& x, const NodePtr& v) {
  const Tensor& xv = x->value();
  const std::int64_t n = xv.dim(0), c = xv.dim(1), l = xv.dim(2);
  Tensor out = Tensor::uninit({n, c, l});
  {
    const double* X = xv.ptr();
    const double* V = v->value().ptr();
    double* O = out.ptr();
    for (std::int64_t a = 0; a < n; ++a) {
      for (std::int64_t j = 0; j < c; ++j) {
        const double s = V[j];
        const double* src = X + (a * c + j) * l;
        double* dst = O + (a * c + j) * l;
        for (std::int64_t t = 0; t < l; ++t) dst[t] = src[t] * s;
      }
    }
  }
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (x->requires_grad())
      edges.push_back({x, [v](const NodePtr& up) { return channel_scale_op(up, v); }});
    if (v->requires_grad())
      edges.push_back({v, [x](const NodePtr& up) { return channel_dot_op(up, x); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr channel_dot_op(const NodePtr& a, const NodePtr& b) {
  const Tensor& av = a->value();
  const std::int64_t n = av.dim(0), c = av.dim(1), l = av.dim(2);
  Tensor out = Tensor::uninit({c});
  {
    const double* A = av.ptr();
    const double* B = b->value().ptr();
    double* O = out.ptr();
    for (std::int64_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double* ra = A + (i * c + j) * l;
        const double* rb = B + (i * c + j) * l;
        for (std::int64_t t = 0; t < l; ++t) acc += ra[t] * rb[t];
      }
      O[j] = acc;
    }
  }
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (a->requires_grad())
      edges.push_back({a, [b](const NodePtr& up) { return channel_scale_op(b, up); }});
    if (b->requires_grad())
      edges.push_back({b, [a](const NodePtr& up) { return channel_scale_op(a, up); }});
  }
  return make_node(std::move(out), std::move(edges));
}

// out = x * gamma[c] + beta[c], one pass
NodePtr channel_affine_op(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta) {
  const Tensor& xv = x->value();
  const std::int64_t n = xv.dim(0), c = xv.dim(1), l = xv.dim(2);
  Tensor out = Tensor::uninit({n, c, l});
  {
    const double* X = xv.ptr();
    const double* G = gamma->value().ptr();
    const double* B = beta->value().ptr();
    double* O = out.ptr();
    for (std::int64_t a = 0; a < n; ++a) {
      for (std::int64_t j = 0; j < c; ++j) {
        const double s = G[j], sh = B[j];
        const double* src = X + (a * c + j) * l;
        double* dst = O + (a * c + j) * l;
        for (std::int64_t t = 0; t < l; ++t) dst[t] = src[t] * s + sh;
      }
    }
  }
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (x->requires_grad())
      edges.push_back({x, [gamma](const NodePtr& up) { return channel_scale_op(up, gamma); }});
    if (gamma->requires_grad())
      edges.push_back({gamma, [x](const NodePtr& up) { return channel_dot_op(up, x); }});
    if (beta->requires_grad())
      edges.push_back({beta, [](const NodePtr& up) { return channel_sum(up); }});
  }
  return make_node(std::move(out), std::move(edges));
}

// out = sqrt(x + c), one pass
NodePtr sqrt_shift_op(const NodePtr& x, double c) {
  Tensor out = map1(x->value(), [c](double v) { return std::sqrt(v + c); });
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [x, c](const NodePtr& up) {
                       return div(mul_scalar(up, 0.5), sqrt_shift_op(x, c));
                     }});
  }
  return make_node(std::move(out), std::move(edges));
}

// normalize [c,l] inputs to [1,c,l] for the rank-3 kernels
struct Rank3 {
  NodePtr x;
  bool was2;
};

Rank3 ensure_rank3(const NodePtr& x, const char* op) {
  const int r = x->value().rank();
  if (r == 3) return {x, false};
  if (r == 2) {
    Shape s = x->value().shape();
    return {reshape(x, {1, s[0], s[1]}), true};
  }
  throw ParameterError(std::string(op) + ": expected rank-2 or rank-3 input, got " +
                       shape_string(x->value().shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

NodePtr add(const NodePtr& a, const NodePtr& b) {
  require_same_shape(a->value(), b->value(), "add");
  Tensor out = map2(a->value(), b->value(), [](double x, double y) { return x + y; });
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (a->requires_grad()) edges.push_back({a, [](const NodePtr& g) { return g; }});
    if (b->requires_grad()) edges.push_back({b, [](const NodePtr& g) { return g; }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  require_same_shape(a->value(), b->value(), "sub");
  Tensor out = map2(a->value(), b->value(), [](double x, double y) { return x - y; });
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (a->requires_grad()) edges.push_back({a, [](const NodePtr& g) { return g; }});
    if (b->requires_grad()) edges.push_back({b, [](const NodePtr& g) { return neg(g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  require_same_shape(a->value(), b->value(), "mul");
  Tensor out = map2(a->value(), b->value(), [](double x, double y) { return x * y; });
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (a->requires_grad()) edges.push_back({a, [b](const NodePtr& g) { return mul(g, b); }});
    if (b->requires_grad()) edges.push_back({b, [a](const NodePtr& g) { return mul(g, a); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr div(const NodePtr& a, const NodePtr& b) {
  require_same_shape(a->value(), b->value(), "div");
  Tensor out = map2(a->value(), b->value(), [](double x, double y) { return x / y; });
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (a->requires_grad()) edges.push_back({a, [b](const NodePtr& g) { return div(g, b); }});
    if (b->requires_grad()) {
      edges.push_back(
          {b, [a, b](const NodePtr& g) { return neg(div(mul(g, a), square(b))); }});
    }
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr maximum(const NodePtr& a, const NodePtr& b) {
  require_same_shape(a->value(), b->value(), "maximum");
  Tensor out = map2(a->value(), b->value(), [](double x, double y) { return x >= y ? x : y; });
  std::vector<Edge> edges;
  if (grad_mode() && (a->requires_grad() || b->requires_grad())) {
    NodePtr mask_a =
        constant(map2(a->value(), b->value(), [](double x, double y) { return x >= y ? 1.0 : 0.0; }));
    if (a->requires_grad())
      edges.push_back({a, [mask_a](const NodePtr& g) { return mul(g, mask_a); }});
    if (b->requires_grad()) {
      NodePtr mask_b = constant(map1(mask_a->value(), [](double m) { return 1.0 - m; }));
      edges.push_back({b, [mask_b](const NodePtr& g) { return mul(g, mask_b); }});
    }
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr relu(const NodePtr& x) {
  const bool need_mask = grad_mode() && x->requires_grad();
  Tensor out(x->value().shape());
  Tensor mask_t = need_mask ? Tensor(x->value().shape()) : Tensor();
  {
    const double* px = x->value().ptr();
    double* po = out.ptr();
    double* pm = need_mask ? mask_t.ptr() : nullptr;
    const std::int64_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
    for (std::int64_t i = 0; i < n; ++i) {
      const bool on = px[i] > 0.0;
      po[i] = on ? px[i] : 0.0;
      if (pm) pm[i] = on ? 1.0 : 0.0;
    }
  }
  std::vector<Edge> edges;
  if (need_mask) {
    NodePtr mask = constant(std::move(mask_t));
    edges.push_back({x, [mask](const NodePtr& g) { return mul(g, mask); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr abs(const NodePtr& x) {
  Tensor out = map1(x->value(), [](double v) { return std::fabs(v); });
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    NodePtr sgn = constant(sign_tensor(x->value()));
    edges.push_back({x, [sgn](const NodePtr& g) { return mul(g, sgn); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr sqrt(const NodePtr& x) {
  Tensor out = map1(x->value(), [](double v) { return std::sqrt(v); });
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back(
        {x, [x](const NodePtr& g) { return div(mul_scalar(g, 0.5), sqrt(x)); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr log(const NodePtr& x) {
  Tensor out = map1(x->value(), [](double v) { return std::log(v); });
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [x](const NodePtr& g) { return div(g, x); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr exp(const NodePtr& x) {
  Tensor out = map1(x->value(), [](double v) { return std::exp(v); });
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [x](const NodePtr& g) { return mul(g, exp(x)); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr square(const NodePtr& x) {
  Tensor out = map1(x->value(), [](double v) { return v * v; });
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [x](const NodePtr& g) { return mul(g, mul_scalar(x, 2.0)); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr neg(const NodePtr& x) { return mul_scalar(x, -1.0); }

NodePtr add_scalar(const NodePtr& x, double c) {
  Tensor out = map1(x->value(), [c](double v) { return v + c; });
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [](const NodePtr& g) { return g; }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr mul_scalar(const NodePtr& x, double c) {
  Tensor out = map1(x->value(), [c](double v) { return v * c; });
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [c](const NodePtr& g) { return mul_scalar(g, c); }});
  }
  return make_node(std::move(out), std::move(edges));
}

// ---------------------------------------------------------------------------
// reductions and broadcasts
// ---------------------------------------------------------------------------

NodePtr sum(const NodePtr& x) {
  double acc = 0.0;
  for (double v : x->value().data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    Shape s = x->value().shape();
    edges.push_back({x, [s](const NodePtr& g) { return broadcast_scalar(g, s); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr mean(const NodePtr& x) {
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x->value().numel()));
}

NodePtr sum_last(const NodePtr& x) {
  require(x->value().rank() >= 1, "sum_last: rank-0 input");
  Shape s = x->value().shape();
  const std::int64_t t = s.back();
  Shape os(s.begin(), s.end() - 1);
  const std::int64_t rows = x->value().numel() / t;
  Tensor out = Tensor::uninit(os);
  const double* px = x->value().ptr();
  double* po = out.ptr();
#pragma omp parallel for schedule(static) if (rows > 64)
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* row = px + r * t;
    for (std::int64_t i = 0; i < t; ++i) acc += row[i];
    po[r] = acc;
  }
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [t](const NodePtr& g) { return repeat_last(g, t); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr mean_last(const NodePtr& x) {
  require(x->value().rank() >= 1, "mean_last: rank-0 input");
  return mul_scalar(sum_last(x), 1.0 / static_cast<double>(x->value().shape().back()));
}

NodePtr repeat_last(const NodePtr& x, std::int64_t t) {
  require(t >= 1, "repeat_last: non-positive length");
  Shape os = x->value().shape();
  os.push_back(t);
  const std::int64_t rows = x->value().numel();
  Tensor out = Tensor::uninit(os);
  const double* px = x->value().ptr();
  double* po = out.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double v = px[r];
    double* row = po + r * t;
    for (std::int64_t i = 0; i < t; ++i) row[i] = v;
  }
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [](const NodePtr& g) { return sum_last(g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr repeat_first(const NodePtr& x, std::int64_t n) {
  require(n >= 1, "repeat_first: non-positive count");
  Shape os = x->value().shape();
  os.insert(os.begin(), n);
  const std::int64_t m = x->value().numel();
  Tensor out = Tensor::uninit(os);
  const double* px = x->value().ptr();
  double* po = out.ptr();
  for (std::int64_t r = 0; r < n; ++r) std::copy(px, px + m, po + r * m);
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [](const NodePtr& g) { return sum_first(g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr sum_first(const NodePtr& x) {
  require(x->value().rank() >= 1, "sum_first: rank-0 input");
  Shape s = x->value().shape();
  const std::int64_t n = s.front();
  Shape os(s.begin() + 1, s.end());
  const std::int64_t m = x->value().numel() / n;
  Tensor out(os);
  const double* px = x->value().ptr();
  double* po = out.ptr();
  for (std::int64_t r = 0; r < n; ++r) {
    const double* row = px + r * m;
    for (std::int64_t i = 0; i < m; ++i) po[i] += row[i];
  }
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [n](const NodePtr& g) { return repeat_first(g, n); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr broadcast_scalar(const NodePtr& s, Shape shape) {
  require(s->value().numel() == 1, "broadcast_scalar: source must be a scalar");
  Tensor out = Tensor::full(shape, s->value().item());
  std::vector<Edge> edges;
  if (grad_mode() && s->requires_grad()) {
    Shape ss = s->value().shape();
    edges.push_back({s, [ss](const NodePtr& g) {
                       NodePtr r = sum(g);
                       return ss.empty() ? r : reshape(r, ss);
                     }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr reshape(const NodePtr& x, Shape shape) {
  require(shape_numel(shape) == x->value().numel(),
          "reshape: element count mismatch for " + shape_string(shape));
  Tensor out = Tensor::uninit(std::move(shape));
  std::copy(x->value().data().begin(), x->value().data().end(), out.ptr());
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    Shape back = x->value().shape();
    edges.push_back({x, [back](const NodePtr& g) { return reshape(g, back); }});
  }
  return make_node(std::move(out), std::move(edges));
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  const Tensor& av = a->value();
  const Tensor& bv = b->value();
  require(av.rank() == 2 && bv.rank() == 2, "matmul: rank-2 operands required");
  require(av.dim(1) == bv.dim(0), "matmul: inner dimensions disagree, " +
                                      shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  const std::int64_t m = av.dim(0), kk = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  const double* A = av.ptr();
  const double* B = bv.ptr();
  double* O = out.ptr();
#pragma omp parallel for schedule(static) if (m > 4)
  for (std::int64_t i = 0; i < m; ++i) {
    double* orow = O + i * n;
    const double* arow = A + i * kk;
    for (std::int64_t p = 0; p < kk; ++p) {
      const double apv = arow[p];
      if (apv == 0.0) continue;
      const double* brow = B + p * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += apv * brow[j];
    }
  }
  std::vector<Edge> edges;
  if (grad_mode()) {
    if (a->requires_grad())
      edges.push_back({a, [b](const NodePtr& g) { return matmul(g, transpose(b)); }});
    if (b->requires_grad())
      edges.push_back({b, [a](const NodePtr& g) { return matmul(transpose(a), g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr transpose(const NodePtr& x) {
  const Tensor& xv = x->value();
  require(xv.rank() == 2, "transpose: rank-2 input required");
  const std::int64_t m = xv.dim(0), n = xv.dim(1);
  Tensor out = Tensor::uninit({n, m});
  const double* X = xv.ptr();
  double* O = out.ptr();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) O[j * m + i] = X[i * n + j];
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [](const NodePtr& g) { return transpose(g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
  const Tensor& wv = w->value();
  require(wv.rank() == 2, "linear: weight must be [out,in]");
  require(b->value().rank() == 1 && b->value().dim(0) == wv.dim(0),
          "linear: bias must be [out]");
  const bool vec = x->value().rank() == 1;
  NodePtr x2 = vec ? reshape(x, {1, x->value().dim(0)}) : x;
  require(x2->value().rank() == 2, "linear: input must be rank-1 or rank-2");
  require(x2->value().dim(1) == wv.dim(1), "linear: input width " +
                                               std::to_string(x2->value().dim(1)) +
                                               " does not match weight width " +
                                               std::to_string(wv.dim(1)));
  NodePtr y = add(matmul(x2, transpose(w)), repeat_first(b, x2->value().dim(0)));
  return vec ? reshape(y, {wv.dim(0)}) : y;
}

// ---------------------------------------------------------------------------
// channel helpers
// ---------------------------------------------------------------------------

NodePtr broadcast_channel(const NodePtr& v, std::int64_t n, std::int64_t l) {
  require(v->value().rank() == 1, "broadcast_channel: rank-1 source required");
  const std::int64_t c = v->value().dim(0);
  Tensor out = Tensor::uninit({n, c, l});
  const double* V = v->value().ptr();
  double* O = out.ptr();
  for (std::int64_t a = 0; a < n; ++a)
    for (std::int64_t j = 0; j < c; ++j) {
      double* row = O + (a * c + j) * l;
      const double val = V[j];
      for (std::int64_t t = 0; t < l; ++t) row[t] = val;
    }
  std::vector<Edge> edges;
  if (grad_mode() && v->requires_grad()) {
    edges.push_back({v, [](const NodePtr& g) { return channel_sum(g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr channel_sum(const NodePtr& x) {
  const Tensor& xv = x->value();
  require(xv.rank() == 3, "channel_sum: rank-3 input required");
  const std::int64_t n = xv.dim(0), c = xv.dim(1), l = xv.dim(2);
  Tensor out = Tensor::uninit({c});
  const double* X = xv.ptr();
  double* O = out.ptr();
  for (std::int64_t j = 0; j < c; ++j) {
    double acc = 0.0;
    for (std::int64_t a = 0; a < n; ++a) {
      const double* row = X + (a * c + j) * l;
      for (std::int64_t t = 0; t < l; ++t) acc += row[t];
    }
    O[j] = acc;
  }
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [n, l](const NodePtr& g) { return broadcast_channel(g, n, l); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr repeat_mid(const NodePtr& x, std::int64_t c) {
  const Tensor& xv = x->value();
  require(xv.rank() == 2, "repeat_mid: rank-2 input required");
  require(c >= 1, "repeat_mid: non-positive channel count");
  const std::int64_t n = xv.dim(0), l = xv.dim(1);
  Tensor out = Tensor::uninit({n, c, l});
  const double* X = xv.ptr();
  double* O = out.ptr();
  for (std::int64_t a = 0; a < n; ++a) {
    const double* src = X + a * l;
    for (std::int64_t j = 0; j < c; ++j) std::copy(src, src + l, O + (a * c + j) * l);
  }
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [](const NodePtr& g) { return sum_mid(g); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr sum_mid(const NodePtr& x) {
  const Tensor& xv = x->value();
  require(xv.rank() == 3, "sum_mid: rank-3 input required");
  const std::int64_t n = xv.dim(0), c = xv.dim(1), l = xv.dim(2);
  Tensor out({n, l});
  const double* X = xv.ptr();
  double* O = out.ptr();
  for (std::int64_t a = 0; a < n; ++a) {
    double* orow = O + a * l;
    for (std::int64_t j = 0; j < c; ++j) {
      const double* row = X + (a * c + j) * l;
      for (std::int64_t t = 0; t < l; ++t) orow[t] += row[t];
    }
  }
  std::vector<Edge> edges;
  if (grad_mode() && x->requires_grad()) {
    edges.push_back({x, [c](const NodePtr& g) { return repeat_mid(g, c); }});
  }
  return make_node(std::move(out), std::move(edges));
}

NodePtr select_labels(const NodePtr& z, std::span<const int> labels) {
  const Tensor& zv = z->value();
  require(zv.rank() == 2, "select_labels: rank-2 logits required");
  require(static_cast<std::int64_t>(labels.size()) == zv.dim(0),
          "select_labels: label count does not match rows");
  for (int y : labels)
    require(y >= 0 && y < zv.dim(1), "select_labels: label out of range");
  auto copy = std::make_shared<const std::vector<int>>(labels.begin(), labels.end());
  return select_labels_impl(z, copy);
}

// ---------------------------------------------------------------------------
// convolution / pooling wrappers
// ---------------------------------------------------------------------------

NodePtr conv1d(const NodePtr& x, const NodePtr& w, const NodePtr& b, std::int64_t stride,
               std::int64_t pad) {
  Rank3 r3 = ensure_rank3(x, "conv1d");
  ConvGeom g = conv_geom(r3.x->value().shape(), w->value().shape(), stride, pad);
  require(b->value().rank() == 1 && b->value().dim(0) == g.cout, "conv1d: bias must be [cout]");
  NodePtr out = conv_core_op(r3.x, w, b, g);
  return r3.was2 ? reshape(out, {g.cout, g.lout}) : out;
}

NodePtr pool1d(const NodePtr& x, PoolKind kind, std::int64_t k, std::int64_t stride,
               std::int64_t pad) {
  Rank3 r3 = ensure_rank3(x, "pool1d");
  PoolGeom g = pool_geom(r3.x->value().shape(), k, stride, pad);
  NodePtr out = kind == PoolKind::kMax ? maxpool_op(r3.x, g) : avgpool_fwd_op(r3.x, g);
  return r3.was2 ? reshape(out, {g.c, g.lout}) : out;
}

NodePtr group_norm(const NodePtr& x, std::int64_t groups, const NodePtr& gamma,
                   const NodePtr& beta, double eps) {
  Rank3 r3 = ensure_rank3(x, "group_norm");
  const Shape& s = r3.x->value().shape();
  const std::int64_t n = s[0], c = s[1], l = s[2];
  require(groups >= 1 && c % groups == 0,
          "group_norm: channels " + std::to_string(c) + " not divisible by groups " +
              std::to_string(groups));
  require(eps > 0.0, "group_norm: eps must be positive");
  require(gamma->value().rank() == 1 && gamma->value().dim(0) == c, "group_norm: gamma must be [c]");
  require(beta->value().rank() == 1 && beta->value().dim(0) == c, "group_norm: beta must be [c]");

  NodePtr mu = group_mean_op(r3.x, groups);
  NodePtr centered = sub(r3.x, mu);
  NodePtr var = group_mean_op(square(centered), groups);
  NodePtr denom = sqrt_shift_op(var, eps);
  NodePtr normed = div(centered, denom);
  NodePtr out = channel_affine_op(normed, gamma, beta);
  return r3.was2 ? reshape(out, {c, l}) : out;
}

// ---------------------------------------------------------------------------
// composite losses / model pieces
// ---------------------------------------------------------------------------

NodePtr softmax_cross_entropy(const NodePtr& logits, std::span<const int> labels) {
  const Tensor& zv = logits->value();
  require(zv.rank() == 2, "softmax_cross_entropy: rank-2 logits required");
  const std::int64_t n = zv.dim(0), k = zv.dim(1);
  require(static_cast<std::int64_t>(labels.size()) == n,
          "softmax_cross_entropy: label count does not match rows");
  // shifting by the detached row max keeps exp() in range and cancels exactly
  Tensor mx({n});
  for (std::int64_t i = 0; i < n; ++i) {
    double best = zv.ptr()[i * k];
    for (std::int64_t j = 1; j < k; ++j) best = std::max(best, zv.ptr()[i * k + j]);
    mx.ptr()[i] = best;
  }
  NodePtr shifted = sub(logits, repeat_last(constant(mx), k));
  NodePtr lse = log(sum_last(exp(shifted)));
  NodePtr zy = select_labels(shifted, labels);
  return mean(sub(lse, zy));
}

NodePtr masked_mean(const NodePtr& features, const NodePtr& mask) {
  NodePtr f = features;
  NodePtr m = mask;
  bool was2 = false;
  if (f->value().rank() == 2 && m->value().rank() == 1) {
    f = reshape(f, {1, f->value().dim(0), f->value().dim(1)});
    m = reshape(m, {1, m->value().dim(0)});
    was2 = true;
  }
  require(f->value().rank() == 3 && m->value().rank() == 2,
          "masked_mean: need [n,c,t] features with [n,t] mask");
  const std::int64_t n = f->value().dim(0), c = f->value().dim(1), t = f->value().dim(2);
  require(m->value().dim(0) == n && m->value().dim(1) == t,
          "masked_mean: mask shape " + shape_string(m->value().shape()) +
              " does not match features " + shape_string(f->value().shape()));
  for (std::int64_t a = 0; a < n; ++a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < t; ++i) s += m->value().ptr()[a * t + i];
    if (!(s > 0.0)) throw DataError("masked_mean: mask row " + std::to_string(a) + " sums to zero");
  }
  NodePtr num = sum_last(mul(f, repeat_mid(m, c)));   // [n,c]
  NodePtr den = repeat_last(sum_last(m), c);          // [n,c]
  NodePtr out = div(num, den);
  return was2 ? reshape(out, {c}) : out;
}

NodePtr downsample_mask(const NodePtr& mask, std::int64_t factor) {
  NodePtr m = mask;
  bool was1 = false;
  if (m->value().rank() == 1) {
    m = reshape(m, {1, m->value().dim(0)});
    was1 = true;
  }
  require(m->value().rank() == 2, "downsample_mask: rank-1 or rank-2 mask required");
  const std::int64_t n = m->value().dim(0), t = m->value().dim(1);
  require(factor >= 1 && t % factor == 0,
          "downsample_mask: factor " + std::to_string(factor) + " does not divide length " +
              std::to_string(t));
  NodePtr pooled = pool1d(reshape(m, {n, 1, t}), PoolKind::kAvg, factor, factor, 0);
  NodePtr out = reshape(pooled, {n, t / factor});
  return was1 ? reshape(out, {t / factor}) : out;
}

std::vector<int> argmax_rows(const Tensor& values) {
  if (values.rank() != 2) throw ParameterError("argmax_rows: rank-2 input required");
  const std::int64_t n = values.dim(0), k = values.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = values.ptr() + i * k;
    int best = 0;
    for (std::int64_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

Tensor sign_tensor(const Tensor& x) {
  return map1(x, [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

}  // namespace ecgrobust
