#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lirf/tensor.hpp"

namespace lirf::ops {

// Dense primitives. Every op validates shapes (ShapeError names the op and
// extents), computes the forward value, and records a reverse-mode closure on
// the active tape when any input participates in gradients. Forward results
// are bit-identical for any thread count.

// [m,k]x[k,n] -> [m,n]; optional bias [n] added per row (dense-layer epilogue).
Tensor matmul(const Tensor& a, const Tensor& b, const Tensor& bias = {});

// Feature maps are HWC: x [H,W,Cin], kernel [Cout,Cin,kh,kw]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::int64_t stride_h,
              std::int64_t stride_w, std::int64_t pad_h, std::int64_t pad_w);
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::int64_t stride,
                     std::int64_t pad) {
  return conv2d(x, kernel, stride, stride, pad, pad);
}

// Same shape, or b one-dimensional and broadcast along the last axis (this
// also covers per-channel conv bias in HWC layout).
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// out[i,:] = x[indices[i],:]; backward scatter-adds shared rows.
Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> indices);

Tensor concat(std::span<const Tensor> parts, std::int64_t axis);
inline Tensor concat(std::initializer_list<Tensor> parts, std::int64_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}
Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t len);
Tensor reshape(const Tensor& x, std::vector<std::int64_t> shape);
Tensor transpose2d(const Tensor& x);

Tensor elu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);

// Normalization over the last axis (no affine; compose with mul/add).
Tensor layer_norm(const Tensor& x);

// mask (optional) has x's extents; zero entries are excluded from the
// softmax and produce exactly zero output. A fully masked line throws.
Tensor softmax(const Tensor& x, std::int64_t axis,
               std::span<const std::uint8_t> mask = {});

// out = x / sum(x) along the last axis, with optional masking as above.
Tensor normalize(const Tensor& x, std::span<const std::uint8_t> mask = {});

// Scaled dot-product attention over already-projected q,k,v of shape
// [B,S,D] (or [S,D]); D must divide evenly into heads.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::int64_t heads);

struct BilinearResult {
  Tensor features;                    // [P, C]
  std::vector<std::uint8_t> in_bounds;  // per point: uv inside [0,W]x[0,H]
};

// map [H,W,C]; uv holds P (u,v) pairs in pixel units, pixel centers at
// half-integer coordinates. Out-of-range taps replicate the border.
BilinearResult bilinear_sample(const Tensor& map, std::span<const double> uv);

Tensor upsample2x_w(const Tensor& x);  // [H,W,C] -> [H,2W,C], nearest

// weights (optional) must have shape x.shape[0..axis]. Weighted forms are the
// literal weighted moments sum(w*x) and sum(w*(x-mean)^2): callers pass
// weights that sum to 1 along the axis.
Tensor reduce_mean(const Tensor& x, std::int64_t axis, const Tensor& weights = {});
Tensor reduce_var(const Tensor& x, std::int64_t axis, const Tensor& weights = {});

Tensor mse(const Tensor& a, const Tensor& b);  // scalar mean squared error

struct CompositeResult {
  Tensor rgb;      // [R,3], on tape
  Tensor alpha;    // [R], detached diagnostics
  Tensor weights;  // [R,N], detached diagnostics
};

// Transmittance compositing without inter-sample distances:
//   C = sum_i T_i (1 - exp(-sigma_i)) c_i,  T_i = exp(-sum_{l<i} sigma_l).
CompositeResult composite(const Tensor& colors, const Tensor& densities);

// Names of every differentiable primitive, in registry order.
std::span<const char* const> primitive_names();

// Wall-time per op accumulated when LIRF_PROFILE=1; printed on demand.
void dump_op_profile();

}  // namespace lirf::ops

namespace lirf::ops::detail {
bool profiling();
void profile_add(const char* op, double seconds);

struct OpTimer {
  const char* op;
  double t0;
  explicit OpTimer(const char* o) : op(o), t0(profiling() ? wall_seconds() : 0.0) {}
  ~OpTimer() {
    if (profiling()) profile_add(op, wall_seconds() - t0);
  }
};

}  // namespace lirf::ops::detail

namespace lirf::ops {

}  // namespace lirf::ops
