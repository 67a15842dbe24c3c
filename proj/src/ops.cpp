#include "lirf/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <map>

namespace lirf::ops {
namespace {

using i64 = std::int64_t;

#define LIRF_DISPATCH(dt, fn, ...) \
  ((dt) == Dtype::f32 ? fn<float>(__VA_ARGS__) : fn<double>(__VA_ARGS__))

std::string shape_of(const Tensor& t) {
  return format_shape(t.shape().data(), t.rank());
}

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw ShapeError(op, msg);
}

void check_dtypes(const char* op, std::initializer_list<const Tensor*> ts) {
  Dtype dt = (*ts.begin())->dtype();
  for (const Tensor* t : ts)
    require(t->dtype() == dt, op,
            std::string("mixed dtypes ") + dtype_name(dt) + " vs " + dtype_name(t->dtype()));
}

void check_finite(const char* op, const Tensor& t) {
  if (!strict_nonfinite()) return;
  for (i64 i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t.value_at(i)))
      throw std::runtime_error(std::string(op) + ": non-finite input value at index " +
                               std::to_string(i) + " (strict mode)");
}

bool any_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// Marks the output and records the closure if a tape is active.
template <class F>
Tensor finish(const char* op, Tensor out, bool rg, F&& backward_fn) {
  out.set_requires_grad(rg);
  if (rg && active_tape()) active_tape()->record(op, out.node(), std::forward<F>(backward_fn));
  return out;
}

bool reached(const NodePtr& out) { return !out->grad.empty(); }

// ---------------------------------------------------------------------------
// matmul kernels

// Hand-vectorized micro-kernels over 32-byte lanes. GCC's autovectorizer
// falls back to 128-bit code for these runtime-extent loops, so the lanes
// are written out with vector extensions. Accumulation order per output
// element is a fixed serial reduction, independent of the thread count.
template <class T>
struct VecOf {
  typedef T type __attribute__((vector_size(32)));
};
template <class T>
using Vec = typename VecOf<T>::type;
template <class T>
constexpr int vlanes() {
  return static_cast<int>(32 / sizeof(T));
}

template <class T>
inline Vec<T> vload(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, 32);
  return v;
}
template <class T>
inline void vstore(T* p, Vec<T> v) {
  std::memcpy(p, &v, 32);
}

// 4 rows x NB columns (NB a multiple of the lane count). `bias`, when
// given, is added to stored rows (epilogue of a dense layer).
template <class T, int NB, bool Accumulate>
void mm_block4(const T* a, const T* b, T* c, i64 k, i64 n, i64 i, i64 j0, const T* bias) {
  constexpr int L = vlanes<T>();
  constexpr int NV = NB / L;
  Vec<T> acc[4][NV];
  for (int ii = 0; ii < 4; ++ii)
    for (int v = 0; v < NV; ++v) acc[ii][v] = Vec<T>{};
  for (i64 p = 0; p < k; ++p) {
    const T* bp = b + p * n + j0;
    Vec<T> bv[NV];
    for (int v = 0; v < NV; ++v) bv[v] = vload(bp + v * L);
    for (int ii = 0; ii < 4; ++ii) {
      Vec<T> av = Vec<T>{} + a[(i + ii) * k + p];
      for (int v = 0; v < NV; ++v) acc[ii][v] += av * bv[v];
    }
  }
  if (bias)
    for (int ii = 0; ii < 4; ++ii)
      for (int v = 0; v < NV; ++v) acc[ii][v] += vload(bias + j0 + v * L);
  for (int ii = 0; ii < 4; ++ii) {
    T* ci = c + (i + ii) * n + j0;
    for (int v = 0; v < NV; ++v) {
      if constexpr (Accumulate)
        vstore(ci + v * L, vload(ci + v * L) + acc[ii][v]);
      else
        vstore(ci + v * L, acc[ii][v]);
    }
  }
}

// Scalar fallback for row remainders and narrow column tails.
template <class T, bool Accumulate>
void mm_scalar(const T* a, const T* b, T* c, i64 k, i64 n, i64 i0, i64 i1, i64 j0, i64 nb,
               const T* bias) {
  constexpr int NBMAX = 64;
  for (i64 i = i0; i < i1; ++i) {
    T acc[NBMAX];
    for (i64 j = 0; j < nb; ++j) acc[j] = bias ? bias[j0 + j] : T(0);
    for (i64 p = 0; p < k; ++p) {
      const T* bp = b + p * n + j0;
      T av = a[i * k + p];
      for (i64 j = 0; j < nb; ++j) acc[j] += av * bp[j];
    }
    T* ci = c + i * n + j0;
    if constexpr (Accumulate)
      for (i64 j = 0; j < nb; ++j) ci[j] += acc[j];
    else
      for (i64 j = 0; j < nb; ++j) ci[j] = acc[j];
  }
}

// c[m,n] = (or +=) a[m,k] * b[k,n] (+ bias per row)
template <class T, bool Accumulate>
void mm_nn_impl(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, const T* bias = nullptr) {
  parallel_for(m, [=](i64 r0, i64 r1) {
    i64 j0 = 0;
    while (j0 < n) {
      i64 rem = n - j0;
      i64 tile = rem >= 64 ? 64 : rem >= 32 ? 32 : rem >= 16 ? 16 : rem;
      i64 i = r0;
      if (tile == 64)
        for (; i + 4 <= r1; i += 4) mm_block4<T, 64, Accumulate>(a, b, c, k, n, i, j0, bias);
      else if (tile == 32)
        for (; i + 4 <= r1; i += 4) mm_block4<T, 32, Accumulate>(a, b, c, k, n, i, j0, bias);
      else if (tile == 16)
        for (; i + 4 <= r1; i += 4) mm_block4<T, 16, Accumulate>(a, b, c, k, n, i, j0, bias);
      mm_scalar<T, Accumulate>(a, b, c, k, n, i, r1, j0, tile, bias);
      j0 += tile;
    }
  });
}

template <class T>
void mm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  mm_nn_impl<T, true>(a, b, c, m, k, n);
}

template <class T>
void mm_nn_store(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  mm_nn_impl<T, false>(a, b, c, m, k, n);
}

// c[m,k] += (or =) a[m,n] * b[k,n]^T via a transposed copy of the (small)
// b panel.
template <class T>
void mm_nt(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate = true) {
  std::vector<T> bt(static_cast<std::size_t>(n * k));
  for (i64 p = 0; p < k; ++p)
    for (i64 j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  if (accumulate)
    mm_nn_impl<T, true>(a, bt.data(), c, m, n, k);
  else
    mm_nn_impl<T, false>(a, bt.data(), c, m, n, k);
}

// c[k,n] += a[m,k]^T * b[m,n]. Each m tile of a is packed transposed so the
// reduction streams contiguously, and p rows are processed four at a time so
// the b tile is reused from cache. Accumulation order per element stays
// fixed (ascending m), so results are identical for any thread count.
template <class T, int NB>
void mm_tn_block4(const T* packed, i64 rows, const T* b, T* c, i64 n, i64 i0, i64 p_rel,
                  i64 p_abs, i64 j0) {
  constexpr int L = vlanes<T>();
  constexpr int NV = NB / L;
  Vec<T> acc[4][NV];
  for (int pp = 0; pp < 4; ++pp)
    for (int v = 0; v < NV; ++v) acc[pp][v] = Vec<T>{};
  const T* ap0 = packed + (p_rel + 0) * rows;
  const T* ap1 = packed + (p_rel + 1) * rows;
  const T* ap2 = packed + (p_rel + 2) * rows;
  const T* ap3 = packed + (p_rel + 3) * rows;
  for (i64 ii = 0; ii < rows; ++ii) {
    const T* bi = b + (i0 + ii) * n + j0;
    Vec<T> bv[NV];
    for (int v = 0; v < NV; ++v) bv[v] = vload(bi + v * L);
    Vec<T> a0 = Vec<T>{} + ap0[ii], a1 = Vec<T>{} + ap1[ii];
    Vec<T> a2 = Vec<T>{} + ap2[ii], a3 = Vec<T>{} + ap3[ii];
    for (int v = 0; v < NV; ++v) {
      acc[0][v] += a0 * bv[v];
      acc[1][v] += a1 * bv[v];
      acc[2][v] += a2 * bv[v];
      acc[3][v] += a3 * bv[v];
    }
  }
  for (int pp = 0; pp < 4; ++pp) {
    T* cp = c + (p_abs + pp) * n + j0;
    for (int v = 0; v < NV; ++v) vstore(cp + v * L, vload(cp + v * L) + acc[pp][v]);
  }
}

template <class T>
void mm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  constexpr i64 kTile = 512;
  parallel_for(k, [=](i64 p0, i64 p1) {
    std::vector<T> packed(static_cast<std::size_t>(kTile * (p1 - p0)));
    for (i64 i0 = 0; i0 < m; i0 += kTile) {
      i64 i1 = std::min(m, i0 + kTile);
      i64 rows = i1 - i0;
      // packed[(p - p0) * rows + ii] = a[(i0 + ii) * k + p]
      for (i64 ii = 0; ii < rows; ++ii) {
        const T* ai = a + (i0 + ii) * k;
        for (i64 p = p0; p < p1; ++p) packed[(p - p0) * rows + ii] = ai[p];
      }
      i64 j0 = 0;
      while (j0 < n) {
        i64 rem = n - j0;
        i64 tile = rem >= 64 ? 64 : rem >= 32 ? 32 : rem >= 16 ? 16 : rem;
        i64 p = p0;
        if (tile == 64)
          for (; p + 4 <= p1; p += 4)
            mm_tn_block4<T, 64>(packed.data(), rows, b, c, n, i0, p - p0, p, j0);
        else if (tile == 32)
          for (; p + 4 <= p1; p += 4)
            mm_tn_block4<T, 32>(packed.data(), rows, b, c, n, i0, p - p0, p, j0);
        else if (tile == 16)
          for (; p + 4 <= p1; p += 4)
            mm_tn_block4<T, 16>(packed.data(), rows, b, c, n, i0, p - p0, p, j0);
        for (; p < p1; ++p) {
          const T* ap = packed.data() + (p - p0) * rows;
          T acc[64];
          for (i64 j = 0; j < tile; ++j) acc[j] = T(0);
          for (i64 ii = 0; ii < rows; ++ii) {
            const T* bi = b + (i0 + ii) * n + j0;
            T av = ap[ii];
            for (i64 j = 0; j < tile; ++j) acc[j] += av * bi[j];
          }
          T* cp = c + p * n + j0;
          for (i64 j = 0; j < tile; ++j) cp[j] += acc[j];
        }
        j0 += tile;
      }
    }
  });
}

template <class T>
void matmul_forward(const Storage& a, const Storage& b, const Storage* bias, Storage& c, i64 m,
                    i64 k, i64 n) {
  mm_nn_impl<T, false>(a.data<T>(), b.data<T>(), c.data<T>(), m, k, n,
                       bias ? bias->data<T>() : nullptr);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, const Tensor& bias) {
  const char* op = "matmul";
  detail::OpTimer timer_(op);
  require(a.rank() == 2 && b.rank() == 2, op,
          "expects rank-2 inputs, got " + shape_of(a) + " and " + shape_of(b));
  require(a.dim(1) == b.dim(0), op,
          "inner extents differ: " + shape_of(a) + " x " + shape_of(b));
  check_dtypes(op, {&a, &b});
  check_finite(op, a);
  check_finite(op, b);
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == b.dim(1), op,
            "bias " + shape_of(bias) + " does not match output columns of " + shape_of(b));
    check_finite(op, bias);
  }
  i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::uninitialized(a.dtype(), {m, n});
  const Storage* bias_vals = bias.defined() ? &bias.values() : nullptr;
  LIRF_DISPATCH(a.dtype(), matmul_forward, a.values(), b.values(), bias_vals, out.values(), m,
                k, n);

  bool rg = any_grad({&a, &b}) || (bias.defined() && bias.requires_grad());
  NodePtr an = a.node(), bn = b.node(), on = out.node();
  NodePtr biasn = bias.defined() ? bias.node() : nullptr;
  return finish(op, out, rg, [an, bn, biasn, on, m, k, n] {
    if (!reached(on)) return;
    auto dt = on->values.dtype();
    if (an->requires_grad) {
      bool acc = grad_accumulate_mode(*an);
      if (dt == Dtype::f32)
        mm_nt<float>(on->grad.f32(), bn->values.f32(), an->grad.f32(), m, n, k, acc);
      else
        mm_nt<double>(on->grad.f64(), bn->values.f64(), an->grad.f64(), m, n, k, acc);
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      if (dt == Dtype::f32)
        mm_tn<float>(an->values.f32(), on->grad.f32(), bn->grad.f32(), m, k, n);
      else
        mm_tn<double>(an->values.f64(), on->grad.f64(), bn->grad.f64(), m, k, n);
    }
    if (biasn && biasn->requires_grad) {
      ensure_grad(*biasn);
      auto col_sums = [&](const auto* go, auto* gb) {
        for (i64 i = 0; i < m; ++i)
          for (i64 j = 0; j < n; ++j) gb[j] += go[i * n + j];
      };
      if (dt == Dtype::f32)
        col_sums(on->grad.f32(), biasn->grad.f32());
      else
        col_sums(on->grad.f64(), biasn->grad.f64());
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d via im2col

namespace {

struct ConvDims {
  i64 cin, h, w, cout, kh, kw, sh, sw, ph, pw, hout, wout;
};

// Row per output pixel, column order (dy, dx, ci): contiguous channel runs.
template <class T>
void im2col_rows(const T* x, T* col, const ConvDims& d) {
  i64 kdim = d.kh * d.kw * d.cin;
  parallel_for(d.hout * d.wout, [&](i64 p0, i64 p1) {
    for (i64 p = p0; p < p1; ++p) {
      i64 oy = p / d.wout, ox = p % d.wout;
      T* row = col + p * kdim;
      for (i64 dy = 0; dy < d.kh; ++dy) {
        i64 iy = oy * d.sh + dy - d.ph;
        for (i64 dx = 0; dx < d.kw; ++dx) {
          i64 ix = ox * d.sw + dx - d.pw;
          T* dst = row + (dy * d.kw + dx) * d.cin;
          if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) {
            const T* src = x + (iy * d.w + ix) * d.cin;
            for (i64 ci = 0; ci < d.cin; ++ci) dst[ci] = src[ci];
          } else {
            for (i64 ci = 0; ci < d.cin; ++ci) dst[ci] = T(0);
          }
        }
      }
    }
  });
}

// Scatter col gradients back to the input; partitioned by input row so
// writes stay disjoint across threads.
template <class T>
void col2im_rows_add(const T* col, T* x, const ConvDims& d) {
  i64 kdim = d.kh * d.kw * d.cin;
  parallel_for(d.h, [&](i64 y0, i64 y1) {
    for (i64 iy = y0; iy < y1; ++iy) {
      for (i64 dy = 0; dy < d.kh; ++dy) {
        i64 oy_num = iy + d.ph - dy;
        if (oy_num < 0 || oy_num % d.sh != 0) continue;
        i64 oy = oy_num / d.sh;
        if (oy >= d.hout) continue;
        for (i64 ox = 0; ox < d.wout; ++ox) {
          const T* row = col + (oy * d.wout + ox) * kdim;
          for (i64 dx = 0; dx < d.kw; ++dx) {
            i64 ix = ox * d.sw + dx - d.pw;
            if (ix < 0 || ix >= d.w) continue;
            const T* src = row + (dy * d.kw + dx) * d.cin;
            T* dst = x + (iy * d.w + ix) * d.cin;
            for (i64 ci = 0; ci < d.cin; ++ci) dst[ci] += src[ci];
          }
        }
      }
    }
  });
}

// kernel [Cout,Cin,kh,kw] -> [ (dy,dx,ci), Cout ]
template <class T>
void kernel_to_cols(const T* k, T* kt, const ConvDims& d) {
  for (i64 co = 0; co < d.cout; ++co)
    for (i64 ci = 0; ci < d.cin; ++ci)
      for (i64 dy = 0; dy < d.kh; ++dy)
        for (i64 dx = 0; dx < d.kw; ++dx)
          kt[((dy * d.kw + dx) * d.cin + ci) * d.cout + co] =
              k[((co * d.cin + ci) * d.kh + dy) * d.kw + dx];
}

template <class T>
void cols_to_kernel_add(const T* kt, T* k, const ConvDims& d) {
  for (i64 co = 0; co < d.cout; ++co)
    for (i64 ci = 0; ci < d.cin; ++ci)
      for (i64 dy = 0; dy < d.kh; ++dy)
        for (i64 dx = 0; dx < d.kw; ++dx)
          k[((co * d.cin + ci) * d.kh + dy) * d.kw + dx] +=
              kt[((dy * d.kw + dx) * d.cin + ci) * d.cout + co];
}

template <class T>
void conv_forward(const Storage& x, const Storage& k, Storage& col, Storage& y,
                  const ConvDims& d) {
  i64 kdim = d.kh * d.kw * d.cin;
  im2col_rows<T>(x.data<T>(), col.data<T>(), d);
  std::vector<T> kt(static_cast<std::size_t>(kdim * d.cout));
  kernel_to_cols<T>(k.data<T>(), kt.data(), d);
  mm_nn_store<T>(col.data<T>(), kt.data(), y.data<T>(), d.hout * d.wout, kdim, d.cout);
}

template <class T>
void conv_backward(const TensorNode& xn, const TensorNode& kn, const TensorNode& on,
                   const Storage& col, const ConvDims& d) {
  i64 kdim = d.kh * d.kw * d.cin, area = d.hout * d.wout;
  const T* go = on.grad.data<T>();
  if (kn.requires_grad) {
    std::vector<T> dkt(static_cast<std::size_t>(kdim * d.cout));
    mm_tn<T>(col.data<T>(), go, dkt.data(), area, kdim, d.cout);
    cols_to_kernel_add<T>(dkt.data(), const_cast<TensorNode&>(kn).grad.data<T>(), d);
  }
  if (xn.requires_grad) {
    std::vector<T> kt(static_cast<std::size_t>(kdim * d.cout));
    kernel_to_cols<T>(kn.values.data<T>(), kt.data(), d);
    Storage dcol = Storage::uninit(on.values.dtype(), static_cast<std::size_t>(area * kdim));
    mm_nt<T>(go, kt.data(), dcol.data<T>(), area, d.cout, kdim, /*accumulate=*/false);
    col2im_rows_add<T>(dcol.data<T>(), const_cast<TensorNode&>(xn).grad.data<T>(), d);
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, i64 stride_h, i64 stride_w, i64 pad_h,
              i64 pad_w) {
  const char* op = "conv2d";
  detail::OpTimer timer_(op);
  require(x.rank() == 3, op, "input must be [H,W,C], got " + shape_of(x));
  require(kernel.rank() == 4, op, "kernel must be [Cout,Cin,kh,kw], got " + shape_of(kernel));
  require(kernel.dim(1) == x.dim(2), op,
          "channel mismatch: input " + shape_of(x) + " vs kernel " + shape_of(kernel));
  require(stride_h >= 1 && stride_w >= 1, op, "stride must be >= 1");
  check_dtypes(op, {&x, &kernel});
  check_finite(op, x);
  check_finite(op, kernel);

  ConvDims d;
  d.cin = x.dim(2);
  d.h = x.dim(0);
  d.w = x.dim(1);
  d.cout = kernel.dim(0);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  d.sh = stride_h;
  d.sw = stride_w;
  d.ph = pad_h;
  d.pw = pad_w;
  d.hout = (d.h + 2 * d.ph - d.kh) / d.sh + 1;
  d.wout = (d.w + 2 * d.pw - d.kw) / d.sw + 1;
  require(d.hout >= 1 && d.wout >= 1, op,
          "kernel " + shape_of(kernel) + " does not fit input " + shape_of(x));

  auto col = std::make_shared<Storage>(
      x.dtype(), static_cast<std::size_t>(d.kh * d.kw * d.cin * d.hout * d.wout));
  Tensor out = Tensor::uninitialized(x.dtype(), {d.hout, d.wout, d.cout});
  LIRF_DISPATCH(x.dtype(), conv_forward, x.values(), kernel.values(), *col, out.values(), d);

  bool rg = any_grad({&x, &kernel});
  NodePtr xn = x.node(), kn = kernel.node(), on = out.node();
  return finish(op, out, rg, [xn, kn, on, col, d] {
    if (!reached(on)) return;
    if (xn->requires_grad) ensure_grad(*xn);
    if (kn->requires_grad) ensure_grad(*kn);
    if (on->values.dtype() == Dtype::f32)
      conv_backward<float>(*xn, *kn, *on, *col, d);
    else
      conv_backward<double>(*xn, *kn, *on, *col, d);
  });
}

// ---------------------------------------------------------------------------
// add / mul / channel bias

namespace {

enum class BroadcastKind { same, last_axis };

BroadcastKind classify_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return BroadcastKind::same;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0))
    return BroadcastKind::last_axis;
  throw ShapeError(op, "incompatible shapes " + shape_of(a) + " and " + shape_of(b));
}

template <class T>
void add_same(const T* a, const T* b, T* o, i64 n) {
  parallel_for(n, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) o[i] = a[i] + b[i];
  });
}

template <class T>
void mul_same(const T* a, const T* b, T* o, i64 n) {
  parallel_for(n, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) o[i] = a[i] * b[i];
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const char* op = "add";
  detail::OpTimer timer_(op);
  check_dtypes(op, {&a, &b});
  check_finite(op, a);
  check_finite(op, b);
  BroadcastKind kind = classify_broadcast(op, a, b);
  i64 n = a.numel(), d = kind == BroadcastKind::last_axis ? b.dim(0) : 0;
  Tensor out = Tensor::uninitialized(a.dtype(), a.shape());

  if (a.dtype() == Dtype::f32) {
    const float* av = a.values().f32();
    const float* bv = b.values().f32();
    float* ov = out.values().f32();
    if (kind == BroadcastKind::same)
      add_same<float>(av, bv, ov, n);
    else
      parallel_for(n / d, [&](i64 r0, i64 r1) {
        for (i64 r = r0; r < r1; ++r)
          for (i64 j = 0; j < d; ++j) ov[r * d + j] = av[r * d + j] + bv[j];
      });
  } else {
    const double* av = a.values().f64();
    const double* bv = b.values().f64();
    double* ov = out.values().f64();
    if (kind == BroadcastKind::same)
      add_same<double>(av, bv, ov, n);
    else
      parallel_for(n / d, [&](i64 r0, i64 r1) {
        for (i64 r = r0; r < r1; ++r)
          for (i64 j = 0; j < d; ++j) ov[r * d + j] = av[r * d + j] + bv[j];
      });
  }

  bool rg = any_grad({&a, &b});
  NodePtr an = a.node(), bn = b.node(), on = out.node();
  return finish(op, out, rg, [an, bn, on, kind, n, d] {
    if (!reached(on)) return;
    if (an->requires_grad) {
      if (grad_accumulate_mode(*an))
        accumulate(an->grad, on->grad);
      else
        std::memcpy(an->grad.raw(), on->grad.raw(),
                    on->grad.size() * dtype_size(on->grad.dtype()));
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      if (kind == BroadcastKind::same) {
        accumulate(bn->grad, on->grad);
      } else if (on->values.dtype() == Dtype::f32) {
        float* gb = bn->grad.f32();
        const float* go = on->grad.f32();
        for (i64 r = 0; r < n / d; ++r)
          for (i64 j = 0; j < d; ++j) gb[j] += go[r * d + j];
      } else {
        double* gb = bn->grad.f64();
        const double* go = on->grad.f64();
        for (i64 r = 0; r < n / d; ++r)
          for (i64 j = 0; j < d; ++j) gb[j] += go[r * d + j];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const char* op = "mul";
  detail::OpTimer timer_(op);
  check_dtypes(op, {&a, &b});
  check_finite(op, a);
  check_finite(op, b);
  BroadcastKind kind = classify_broadcast(op, a, b);
  i64 n = a.numel(), d = kind == BroadcastKind::last_axis ? b.dim(0) : 0;
  Tensor out = Tensor::uninitialized(a.dtype(), a.shape());

  if (a.dtype() == Dtype::f32) {
    const float* av = a.values().f32();
    const float* bv = b.values().f32();
    float* ov = out.values().f32();
    if (kind == BroadcastKind::same)
      mul_same<float>(av, bv, ov, n);
    else
      parallel_for(n / d, [&](i64 r0, i64 r1) {
        for (i64 r = r0; r < r1; ++r)
          for (i64 j = 0; j < d; ++j) ov[r * d + j] = av[r * d + j] * bv[j];
      });
  } else {
    const double* av = a.values().f64();
    const double* bv = b.values().f64();
    double* ov = out.values().f64();
    if (kind == BroadcastKind::same)
      mul_same<double>(av, bv, ov, n);
    else
      parallel_for(n / d, [&](i64 r0, i64 r1) {
        for (i64 r = r0; r < r1; ++r)
          for (i64 j = 0; j < d; ++j) ov[r * d + j] = av[r * d + j] * bv[j];
      });
  }

  bool rg = any_grad({&a, &b});
  NodePtr an = a.node(), bn = b.node(), on = out.node();
  return finish(op, out, rg, [an, bn, on, kind, n, d] {
    if (!reached(on)) return;
    auto acc_mul = [&](auto* ga, const auto* go, const auto* other, bool bcast_other) {
      if (!bcast_other) {
        for (i64 i = 0; i < n; ++i) ga[i] += go[i] * other[i];
      } else {
        for (i64 r = 0; r < n / d; ++r)
          for (i64 j = 0; j < d; ++j) ga[r * d + j] += go[r * d + j] * other[j];
      }
    };
    if (an->requires_grad) {
      ensure_grad(*an);
      if (on->values.dtype() == Dtype::f32)
        acc_mul(an->grad.f32(), on->grad.f32(), bn->values.f32(), kind == BroadcastKind::last_axis);
      else
        acc_mul(an->grad.f64(), on->grad.f64(), bn->values.f64(), kind == BroadcastKind::last_axis);
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      if (kind == BroadcastKind::same) {
        if (on->values.dtype() == Dtype::f32) {
          float* gb = bn->grad.f32();
          const float* go = on->grad.f32();
          const float* av = an->values.f32();
          for (i64 i = 0; i < n; ++i) gb[i] += go[i] * av[i];
        } else {
          double* gb = bn->grad.f64();
          const double* go = on->grad.f64();
          const double* av = an->values.f64();
          for (i64 i = 0; i < n; ++i) gb[i] += go[i] * av[i];
        }
      } else {
        if (on->values.dtype() == Dtype::f32) {
          float* gb = bn->grad.f32();
          const float* go = on->grad.f32();
          const float* av = an->values.f32();
          for (i64 r = 0; r < n / d; ++r)
            for (i64 j = 0; j < d; ++j) gb[j] += go[r * d + j] * av[r * d + j];
        } else {
          double* gb = bn->grad.f64();
          const double* go = on->grad.f64();
          const double* av = an->values.f64();
          for (i64 r = 0; r < n / d; ++r)
            for (i64 j = 0; j < d; ++j) gb[j] += go[r * d + j] * av[r * d + j];
        }
      }
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> indices) {
  const char* op = "gather_rows";
  detail::OpTimer timer_(op);
  require(x.rank() == 2, op, "expects rank-2 input, got " + shape_of(x));
  i64 rows = x.dim(0), d = x.dim(1);
  for (i64 idx : indices)
    require(idx >= 0 && idx < rows, op,
            "index " + std::to_string(idx) + " out of range for " + shape_of(x));
  i64 r = static_cast<i64>(indices.size());
  Tensor out = Tensor::uninitialized(x.dtype(), {r, d});
  auto gather = [&](const auto* xv, auto* ov) {
    parallel_for(r, [&](i64 lo, i64 hi) {
      for (i64 i = lo; i < hi; ++i) {
        const auto* src = xv + indices[i] * d;
        auto* dst = ov + i * d;
        for (i64 j = 0; j < d; ++j) dst[j] = src[j];
      }
    });
  };
  if (x.dtype() == Dtype::f32)
    gather(x.values().f32(), out.values().f32());
  else
    gather(x.values().f64(), out.values().f64());

  bool rg = x.requires_grad();
  NodePtr xn = x.node(), on = out.node();
  std::vector<i64> idx_copy(indices.begin(), indices.end());
  return finish(op, out, rg, [xn, on, idx_copy, d] {
    if (!reached(on)) return;
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    if (on->values.dtype() == Dtype::f32) {
      float* gx = xn->grad.f32();
      const float* go = on->grad.f32();
      for (std::size_t i = 0; i < idx_copy.size(); ++i)
        for (i64 j = 0; j < d; ++j) gx[idx_copy[i] * d + j] += go[i * d + j];
    } else {
      double* gx = xn->grad.f64();
      const double* go = on->grad.f64();
      for (std::size_t i = 0; i < idx_copy.size(); ++i)
        for (i64 j = 0; j < d; ++j) gx[idx_copy[i] * d + j] += go[i * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// concat / slice / reshape / transpose

Tensor concat(std::span<const Tensor> parts, i64 axis) {
  const char* op = "concat";
  detail::OpTimer timer_(op);
  require(!parts.empty(), op, "no inputs");
  const Tensor& first = parts[0];
  i64 rank = static_cast<i64>(first.rank());
  require(axis >= 0 && axis < rank, op, "axis out of range");
  std::vector<i64> out_shape = first.shape();
  i64 total_axis = 0;
  for (const Tensor& t : parts) {
    require(static_cast<i64>(t.rank()) == rank, op, "rank mismatch " + shape_of(t));
    require(t.dtype() == first.dtype(), op, "mixed dtypes");
    for (i64 i = 0; i < rank; ++i)
      require(i == axis || t.dim(i) == first.dim(i), op,
              "extent mismatch at axis " + std::to_string(i) + ": " + shape_of(t) + " vs " +
                  shape_of(first));
    check_finite(op, t);
    total_axis += t.dim(axis);
  }
  out_shape[axis] = total_axis;

  i64 inner = 1;
  for (i64 i = axis + 1; i < rank; ++i) inner *= first.dim(i);
  i64 outer = 1;
  for (i64 i = 0; i < axis; ++i) outer *= first.dim(i);

  Tensor out = Tensor::uninitialized(first.dtype(), out_shape);
  std::size_t esz = dtype_size(first.dtype());
  char* ov = static_cast<char*>(out.values().raw());
  i64 offset_axis = 0;
  for (const Tensor& t : parts) {
    i64 block = t.dim(axis) * inner;
    const char* tv = static_cast<const char*>(t.values().raw());
    for (i64 o = 0; o < outer; ++o)
      std::memcpy(ov + ((o * total_axis + offset_axis) * inner) * esz, tv + (o * block) * esz,
                  static_cast<std::size_t>(block) * esz);
    offset_axis += t.dim(axis);
  }

  bool rg = false;
  for (const Tensor& t : parts) rg = rg || t.requires_grad();
  std::vector<NodePtr> in_nodes;
  for (const Tensor& t : parts) in_nodes.push_back(t.node());
  NodePtr on = out.node();
  return finish(op, out, rg, [in_nodes, on, outer, inner, total_axis] {
    if (!reached(on)) return;
    i64 offset = 0;
    for (const NodePtr& n : in_nodes) {
      i64 axis_n = static_cast<i64>(n->values.size()) / std::max<i64>(1, outer * inner);
      if (n->requires_grad) {
        bool acc = grad_accumulate_mode(*n);
        i64 block = axis_n * inner;
        auto scatter = [&](auto* gi, const auto* go) {
          parallel_for(outer, [&](i64 o0, i64 o1) {
            for (i64 o = o0; o < o1; ++o)
              for (i64 j = 0; j < block; ++j) {
                auto v = go[(o * total_axis + offset) * inner + j];
                if (acc)
                  gi[o * block + j] += v;
                else
                  gi[o * block + j] = v;
              }
          });
        };
        if (on->values.dtype() == Dtype::f32)
          scatter(n->grad.f32(), on->grad.f32());
        else
          scatter(n->grad.f64(), on->grad.f64());
      }
      offset += axis_n;
    }
  });
}

Tensor slice(const Tensor& x, i64 axis, i64 start, i64 len) {
  const char* op = "slice";
  detail::OpTimer timer_(op);
  i64 rank = static_cast<i64>(x.rank());
  require(axis >= 0 && axis < rank, op, "axis out of range for " + shape_of(x));
  require(start >= 0 && len >= 1 && start + len <= x.dim(axis), op,
          "range [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") out of bounds for " + shape_of(x));
  check_finite(op, x);
  i64 inner = 1;
  for (i64 i = axis + 1; i < rank; ++i) inner *= x.dim(i);
  i64 outer = 1;
  for (i64 i = 0; i < axis; ++i) outer *= x.dim(i);
  i64 ax = x.dim(axis);

  std::vector<i64> out_shape = x.shape();
  out_shape[axis] = len;
  Tensor out = Tensor::uninitialized(x.dtype(), out_shape);
  std::size_t esz = dtype_size(x.dtype());
  const char* xv = static_cast<const char*>(x.values().raw());
  char* ov = static_cast<char*>(out.values().raw());
  for (i64 o = 0; o < outer; ++o)
    std::memcpy(ov + (o * len * inner) * esz, xv + ((o * ax + start) * inner) * esz,
                static_cast<std::size_t>(len * inner) * esz);

  bool rg = x.requires_grad();
  NodePtr xn = x.node(), on = out.node();
  return finish(op, out, rg, [xn, on, outer, inner, ax, start, len] {
    if (!reached(on)) return;
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    if (on->values.dtype() == Dtype::f32) {
      float* gx = xn->grad.f32();
      const float* go = on->grad.f32();
      for (i64 o = 0; o < outer; ++o)
        for (i64 j = 0; j < len * inner; ++j)
          gx[(o * ax + start) * inner + j] += go[o * len * inner + j];
    } else {
      double* gx = xn->grad.f64();
      const double* go = on->grad.f64();
      for (i64 o = 0; o < outer; ++o)
        for (i64 j = 0; j < len * inner; ++j)
          gx[(o * ax + start) * inner + j] += go[o * len * inner + j];
    }
  });
}

Tensor reshape(const Tensor& x, std::vector<i64> shape) {
  const char* op = "reshape";
  detail::OpTimer timer_(op);
  require(shape_numel(shape) == x.numel(), op,
          "cannot reshape " + shape_of(x) + " to " + format_shape(shape.data(), shape.size()));
  Tensor out;
  {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = x.values();  // aliased view; ops never write their inputs
    out = Tensor(std::move(node));
  }

  bool rg = x.requires_grad();
  NodePtr xn = x.node(), on = out.node();
  return finish(op, out, rg, [xn, on] {
    if (!reached(on)) return;
    if (!xn->requires_grad) return;
    if (xn->grad.empty()) {
      // The consumer side is already finished in the reverse pass, so the
      // flat gradient can be shared instead of copied.
      xn->grad = on->grad;
      xn->grad_live = true;
    } else {
      accumulate(xn->grad, on->grad);
    }
  });
}

Tensor transpose2d(const Tensor& x) {
  const char* op = "transpose2d";
  detail::OpTimer timer_(op);
  require(x.rank() == 2, op, "expects rank-2 input, got " + shape_of(x));
  i64 m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::uninitialized(x.dtype(), {n, m});
  if (x.dtype() == Dtype::f32) {
    const float* xv = x.values().f32();
    float* ov = out.values().f32();
    for (i64 i = 0; i < m; ++i)
      for (i64 j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
  } else {
    const double* xv = x.values().f64();
    double* ov = out.values().f64();
    for (i64 i = 0; i < m; ++i)
      for (i64 j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
  }
  bool rg = x.requires_grad();
  NodePtr xn = x.node(), on = out.node();
  return finish(op, out, rg, [xn, on, m, n] {
    if (!reached(on)) return;
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    if (on->values.dtype() == Dtype::f32) {
      float* gx = xn->grad.f32();
      const float* go = on->grad.f32();
      for (i64 j = 0; j < n; ++j)
        for (i64 i = 0; i < m; ++i) gx[i * n + j] += go[j * m + i];
    } else {
      double* gx = xn->grad.f64();
      const double* go = on->grad.f64();
      for (i64 j = 0; j < n; ++j)
        for (i64 i = 0; i < m; ++i) gx[i * n + j] += go[j * m + i];
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities

namespace {

template <class T, class FwdF>
void ew_forward(const Storage& x, Storage& y, FwdF f) {
  const T* xv = x.data<T>();
  T* yv = y.data<T>();
  i64 n = static_cast<i64>(x.size());
  parallel_for(n, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) yv[i] = f(xv[i]);
  });
}

// dfdx computed from the input value; both functors are resolved statically.
template <class FwdF, class DerivF>
Tensor elementwise(const char* op, const Tensor& x, FwdF fwd, DerivF dfdx) {
  check_finite(op, x);
  Tensor out = Tensor::uninitialized(x.dtype(), x.shape());
  if (x.dtype() == Dtype::f32)
    ew_forward<float>(x.values(), out.values(), [fwd](float v) { return static_cast<float>(fwd(v)); });
  else
    ew_forward<double>(x.values(), out.values(), [fwd](double v) { return fwd(v); });

  bool rg = x.requires_grad();
  NodePtr xn = x.node(), on = out.node();
  return finish(op, out, rg, [xn, on, dfdx] {
    if (!reached(on)) return;
    if (!xn->requires_grad) return;
    bool acc = grad_accumulate_mode(*xn);
    i64 n = static_cast<i64>(xn->values.size());
    auto run_bwd = [&](auto* gx, const auto* go, const auto* xv) {
      using T = std::remove_cv_t<std::remove_reference_t<decltype(gx[0])>>;
      parallel_for(n, [&](i64 lo, i64 hi) {
        if (acc)
          for (i64 i = lo; i < hi; ++i) gx[i] += go[i] * static_cast<T>(dfdx(xv[i]));
        else
          for (i64 i = lo; i < hi; ++i) gx[i] = go[i] * static_cast<T>(dfdx(xv[i]));
      });
    };
    if (on->values.dtype() == Dtype::f32)
      run_bwd(xn->grad.f32(), on->grad.f32(), xn->values.f32());
    else
      run_bwd(xn->grad.f64(), on->grad.f64(), xn->values.f64());
  });
}

struct EluFwd {
  double operator()(double v) const { return v > 0 ? v : std::expm1(v); }
};
struct SigmoidFwd {
  double operator()(double v) const { return 1.0 / (1.0 + std::exp(-v)); }
};
struct SoftplusFwd {
  double operator()(double v) const { return v > 30 ? v : std::log1p(std::exp(v)); }
};

}  // namespace

Tensor elu(const Tensor& x) {
  return elementwise("elu", x, EluFwd{}, [](double v) { return v > 0 ? 1.0 : std::exp(v); });
}

Tensor sigmoid(const Tensor& x) {
  return elementwise("sigmoid", x, SigmoidFwd{}, [](double v) {
    double s = SigmoidFwd{}(v);
    return s * (1.0 - s);
  });
}

Tensor softplus(const Tensor& x) {
  return elementwise("softplus", x, SoftplusFwd{}, [](double v) { return SigmoidFwd{}(v); });
}

// ---------------------------------------------------------------------------
// layer_norm / softmax / normalize

namespace {
constexpr double kLayerNormEps = 1e-5;

template <class T>
void layer_norm_fwd(const T* x, T* y, i64 rows, i64 d) {
  parallel_for(rows, [&](i64 r0, i64 r1) {
    for (i64 r = r0; r < r1; ++r) {
      const T* xr = x + r * d;
      T* yr = y + r * d;
      T mu = T(0);
      for (i64 j = 0; j < d; ++j) mu += xr[j];
      mu /= static_cast<T>(d);
      T var = T(0);
      for (i64 j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<T>(d);
      T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
      for (i64 j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rstd;
    }
  });
}

template <class T, bool Accumulate>
void layer_norm_bwd(const T* x, const T* go, T* gx, i64 rows, i64 d) {
  parallel_for(rows, [&](i64 r0, i64 r1) {
    for (i64 r = r0; r < r1; ++r) {
      const T* xr = x + r * d;
      const T* gr = go + r * d;
      T* gxr = gx + r * d;
      T mu = T(0);
      for (i64 j = 0; j < d; ++j) mu += xr[j];
      mu /= static_cast<T>(d);
      T var = T(0);
      for (i64 j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<T>(d);
      T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
      T gmean = T(0), gxhat = T(0);
      for (i64 j = 0; j < d; ++j) {
        gmean += gr[j];
        gxhat += gr[j] * (xr[j] - mu) * rstd;
      }
      gmean /= static_cast<T>(d);
      gxhat /= static_cast<T>(d);
      for (i64 j = 0; j < d; ++j) {
        T xh = (xr[j] - mu) * rstd;
        if constexpr (Accumulate)
          gxr[j] += rstd * (gr[j] - gmean - xh * gxhat);
        else
          gxr[j] = rstd * (gr[j] - gmean - xh * gxhat);
      }
    }
  });
}
}  // namespace

Tensor layer_norm(const Tensor& x) {
  const char* op = "layer_norm";
  detail::OpTimer timer_(op);
  require(x.rank() >= 1, op, "needs at least one axis");
  check_finite(op, x);
  i64 d = x.shape().back();
  i64 rows = x.numel() / d;
  Tensor out = Tensor::uninitialized(x.dtype(), x.shape());
  if (x.dtype() == Dtype::f32)
    layer_norm_fwd<float>(x.values().f32(), out.values().f32(), rows, d);
  else
    layer_norm_fwd<double>(x.values().f64(), out.values().f64(), rows, d);

  bool rg = x.requires_grad();
  NodePtr xn = x.node(), on = out.node();
  return finish(op, out, rg, [xn, on, rows, d] {
    if (!reached(on)) return;
    if (!xn->requires_grad) return;
    bool acc = grad_accumulate_mode(*xn);
    if (on->values.dtype() == Dtype::f32) {
      if (acc)
        layer_norm_bwd<float, true>(xn->values.f32(), on->grad.f32(), xn->grad.f32(), rows, d);
      else
        layer_norm_bwd<float, false>(xn->values.f32(), on->grad.f32(), xn->grad.f32(), rows, d);
    } else {
      if (acc)
        layer_norm_bwd<double, true>(xn->values.f64(), on->grad.f64(), xn->grad.f64(), rows, d);
      else
        layer_norm_bwd<double, false>(xn->values.f64(), on->grad.f64(), xn->grad.f64(), rows,
                                      d);
    }
  });
}

namespace {

struct AxisDims {
  i64 outer, ax, inner;
};

AxisDims axis_dims(const Tensor& x, i64 axis) {
  AxisDims d{1, x.dim(axis), 1};
  for (i64 i = 0; i < axis; ++i) d.outer *= x.dim(i);
  for (i64 i = axis + 1; i < static_cast<i64>(x.rank()); ++i) d.inner *= x.dim(i);
  return d;
}

template <class T>
void softmax_fwd(const T* x, const std::uint8_t* mask, T* y, const AxisDims& d) {
  parallel_for(d.outer * d.inner, [&](i64 lo, i64 hi) {
    for (i64 t = lo; t < hi; ++t) {
      i64 o = t / d.inner, i = t % d.inner;
      auto at = [&](i64 a) { return (o * d.ax + a) * d.inner + i; };
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (i64 a = 0; a < d.ax; ++a) {
        if (mask && !mask[at(a)]) continue;
        any = true;
        mx = std::max(mx, x[at(a)]);
      }
      if (!any) throw std::runtime_error("softmax: every entry masked along the axis");
      T sum = T(0);
      for (i64 a = 0; a < d.ax; ++a) {
        T e = (mask && !mask[at(a)]) ? T(0) : std::exp(x[at(a)] - mx);
        y[at(a)] = e;
        sum += e;
      }
      for (i64 a = 0; a < d.ax; ++a) y[at(a)] /= sum;
    }
  });
}

template <class T>
void softmax_bwd(const T* y, const T* go, T* gx, const AxisDims& d) {
  parallel_for(d.outer * d.inner, [&](i64 lo, i64 hi) {
    for (i64 t = lo; t < hi; ++t) {
      i64 o = t / d.inner, i = t % d.inner;
      auto at = [&](i64 a) { return (o * d.ax + a) * d.inner + i; };
      T dot = T(0);
      for (i64 a = 0; a < d.ax; ++a) dot += go[at(a)] * y[at(a)];
      for (i64 a = 0; a < d.ax; ++a) gx[at(a)] += y[at(a)] * (go[at(a)] - dot);
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& x, i64 axis, std::span<const std::uint8_t> mask) {
  const char* op = "softmax";
  detail::OpTimer timer_(op);
  require(axis >= 0 && axis < static_cast<i64>(x.rank()), op,
          "axis " + std::to_string(axis) + " out of range for " + shape_of(x));
  require(mask.empty() || static_cast<i64>(mask.size()) == x.numel(), op,
          "mask size mismatch");
  check_finite(op, x);
  AxisDims d = axis_dims(x, axis);
  Tensor out = Tensor::uninitialized(x.dtype(), x.shape());
  const std::uint8_t* m = mask.empty() ? nullptr : mask.data();
  if (x.dtype() == Dtype::f32)
    softmax_fwd<float>(x.values().f32(), m, out.values().f32(), d);
  else
    softmax_fwd<double>(x.values().f64(), m, out.values().f64(), d);

  bool rg = x.requires_grad();
  NodePtr xn = x.node(), on = out.node();
  return finish(op, out, rg, [xn, on, d] {
    if (!reached(on)) return;
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    if (on->values.dtype() == Dtype::f32)
      softmax_bwd<float>(on->values.f32(), on->grad.f32(), xn->grad.f32(), d);
    else
      softmax_bwd<double>(on->values.f64(), on->grad.f64(), xn->grad.f64(), d);
  });
}

Tensor normalize(const Tensor& x, std::span<const std::uint8_t> mask) {
  const char* op = "normalize";
  detail::OpTimer timer_(op);
  require(x.rank() >= 1, op, "needs at least one axis");
  require(mask.empty() || static_cast<i64>(mask.size()) == x.numel(), op,
          "mask size mismatch");
  check_finite(op, x);
  i64 d = x.shape().back();
  i64 rows = x.numel() / d;
  Tensor out = Tensor::uninitialized(x.dtype(), x.shape());
  const std::uint8_t* m = mask.empty() ? nullptr : mask.data();

  auto run_fwd = [&](auto* xv, auto* ov) {
    using T = std::remove_cv_t<std::remove_reference_t<decltype(xv[0])>>;
    for (i64 r = 0; r < rows; ++r) {
      T sum = T(0);
      for (i64 j = 0; j < d; ++j)
        if (!m || m[r * d + j]) sum += xv[r * d + j];
      if (sum == T(0))
        throw std::runtime_error("normalize: row sums to zero (all entries masked or zero)");
      for (i64 j = 0; j < d; ++j)
        ov[r * d + j] = (!m || m[r * d + j]) ? xv[r * d + j] / sum : T(0);
    }
  };
  if (x.dtype() == Dtype::f32)
    run_fwd(x.values().f32(), out.values().f32());
  else
    run_fwd(x.values().f64(), out.values().f64());

  bool rg = x.requires_grad();
  NodePtr xn = x.node(), on = out.node();
  std::vector<std::uint8_t> mask_copy(mask.begin(), mask.end());
  return finish(op, out, rg, [xn, on, rows, d, mask_copy] {
    if (!reached(on)) return;
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const std::uint8_t* m = mask_copy.empty() ? nullptr : mask_copy.data();
    auto run_bwd = [&](const auto* xv, const auto* ov, const auto* go, auto* gx) {
      using T = std::remove_cv_t<std::remove_reference_t<decltype(xv[0])>>;
      for (i64 r = 0; r < rows; ++r) {
        T sum = T(0), dot = T(0);
        for (i64 j = 0; j < d; ++j) {
          if (m && !m[r * d + j]) continue;
          sum += xv[r * d + j];
          dot += go[r * d + j] * ov[r * d + j];
        }
        for (i64 j = 0; j < d; ++j) {
          if (m && !m[r * d + j]) continue;
          gx[r * d + j] += (go[r * d + j] - dot) / sum;
        }
      }
    };
    if (on->values.dtype() == Dtype::f32)
      run_bwd(xn->values.f32(), on->values.f32(), on->grad.f32(), xn->grad.f32());
    else
      run_bwd(xn->values.f64(), on->values.f64(), on->grad.f64(), xn->grad.f64());
  });
}

// ---------------------------------------------------------------------------
// multi-head attention

namespace {

struct AttnDims {
  i64 b, s, dm, h, dh;
};

template <class T>
void attention_fwd(const T* q, const T* k, const T* v, T* out, T* probs, const AttnDims& a) {
  T scale = T(1) / std::sqrt(static_cast<T>(a.dh));
  parallel_for(a.b, [&](i64 b0, i64 b1) {
    for (i64 b = b0; b < b1; ++b) {
      for (i64 hd = 0; hd < a.h; ++hd) {
        const T* qb = q + b * a.s * a.dm + hd * a.dh;
        const T* kb = k + b * a.s * a.dm + hd * a.dh;
        const T* vb = v + b * a.s * a.dm + hd * a.dh;
        T* ob = out + b * a.s * a.dm + hd * a.dh;
        T* pb = probs + ((b * a.h) + hd) * a.s * a.s;
        for (i64 i = 0; i < a.s; ++i) {
          T* pi = pb + i * a.s;
          T mx = -std::numeric_limits<T>::infinity();
          for (i64 j = 0; j < a.s; ++j) {
            T dot = T(0);
            for (i64 e = 0; e < a.dh; ++e) dot += qb[i * a.dm + e] * kb[j * a.dm + e];
            pi[j] = dot * scale;
            mx = std::max(mx, pi[j]);
          }
          T sum = T(0);
          for (i64 j = 0; j < a.s; ++j) {
            pi[j] = std::exp(pi[j] - mx);
            sum += pi[j];
          }
          for (i64 j = 0; j < a.s; ++j) pi[j] /= sum;
          for (i64 e = 0; e < a.dh; ++e) {
            T acc = T(0);
            for (i64 j = 0; j < a.s; ++j) acc += pi[j] * vb[j * a.dm + e];
            ob[i * a.dm + e] = acc;
          }
        }
      }
    }
  });
}

template <class T>
void attention_bwd(const T* q, const T* k, const T* v, const T* probs, const T* go, T* gq,
                   T* gk, T* gv, const AttnDims& a) {
  T scale = T(1) / std::sqrt(static_cast<T>(a.dh));
  parallel_for(a.b, [&](i64 b0, i64 b1) {
    std::vector<T> dp(static_cast<std::size_t>(a.s) * a.s);
    for (i64 b = b0; b < b1; ++b) {
      for (i64 hd = 0; hd < a.h; ++hd) {
        const T* qb = q + b * a.s * a.dm + hd * a.dh;
        const T* kb = k + b * a.s * a.dm + hd * a.dh;
        const T* vb = v + b * a.s * a.dm + hd * a.dh;
        const T* gob = go + b * a.s * a.dm + hd * a.dh;
        const T* pb = probs + ((b * a.h) + hd) * a.s * a.s;
        T* gqb = gq ? gq + b * a.s * a.dm + hd * a.dh : nullptr;
        T* gkb = gk ? gk + b * a.s * a.dm + hd * a.dh : nullptr;
        T* gvb = gv ? gv + b * a.s * a.dm + hd * a.dh : nullptr;

        // dV += P^T dO
        if (gvb)
          for (i64 j = 0; j < a.s; ++j)
            for (i64 e = 0; e < a.dh; ++e) {
              T acc = T(0);
              for (i64 i = 0; i < a.s; ++i) acc += pb[i * a.s + j] * gob[i * a.dm + e];
              gvb[j * a.dm + e] += acc;
            }

        // dP = dO V^T; dA = P (dP - rowsum(dP o P))
        for (i64 i = 0; i < a.s; ++i) {
          T rowdot = T(0);
          for (i64 j = 0; j < a.s; ++j) {
            T d = T(0);
            for (i64 e = 0; e < a.dh; ++e) d += gob[i * a.dm + e] * vb[j * a.dm + e];
            dp[i * a.s + j] = d;
            rowdot += d * pb[i * a.s + j];
          }
          for (i64 j = 0; j < a.s; ++j)
            dp[i * a.s + j] = pb[i * a.s + j] * (dp[i * a.s + j] - rowdot);
        }

        // dQ += dA K * scale; dK += dA^T Q * scale
        if (gqb)
          for (i64 i = 0; i < a.s; ++i)
            for (i64 e = 0; e < a.dh; ++e) {
              T acc = T(0);
              for (i64 j = 0; j < a.s; ++j) acc += dp[i * a.s + j] * kb[j * a.dm + e];
              gqb[i * a.dm + e] += acc * scale;
            }
        if (gkb)
          for (i64 j = 0; j < a.s; ++j)
            for (i64 e = 0; e < a.dh; ++e) {
              T acc = T(0);
              for (i64 i = 0; i < a.s; ++i) acc += dp[i * a.s + j] * qb[i * a.dm + e];
              gkb[j * a.dm + e] += acc * scale;
            }
      }
    }
  });
}

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, i64 heads) {
  const char* op = "multi_head_attention";
  detail::OpTimer timer_(op);
  require(q.rank() == k.rank() && q.rank() == v.rank() && (q.rank() == 2 || q.rank() == 3), op,
          "q/k/v must all be [S,D] or [B,S,D]");
  require(q.shape() == k.shape() && q.shape() == v.shape(), op,
          "q/k/v shapes differ: " + shape_of(q) + " " + shape_of(k) + " " + shape_of(v));
  check_dtypes(op, {&q, &k, &v});
  check_finite(op, q);
  check_finite(op, k);
  check_finite(op, v);

  AttnDims a;
  a.b = q.rank() == 3 ? q.dim(0) : 1;
  a.s = q.rank() == 3 ? q.dim(1) : q.dim(0);
  a.dm = q.shape().back();
  a.h = heads;
  require(heads >= 1 && a.dm % heads == 0, op,
          "model dim " + std::to_string(a.dm) + " not divisible by heads " +
              std::to_string(heads));
  a.dh = a.dm / heads;

  Tensor out = Tensor::uninitialized(q.dtype(), q.shape());
  auto probs = std::make_shared<Storage>(
      Storage::uninit(q.dtype(), static_cast<std::size_t>(a.b * a.h * a.s * a.s)));
  if (q.dtype() == Dtype::f32)
    attention_fwd<float>(q.values().f32(), k.values().f32(), v.values().f32(),
                         out.values().f32(), probs->f32(), a);
  else
    attention_fwd<double>(q.values().f64(), k.values().f64(), v.values().f64(),
                          out.values().f64(), probs->f64(), a);

  bool rg = any_grad({&q, &k, &v});
  NodePtr qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
  return finish(op, out, rg, [qn, kn, vn, on, probs, a] {
    if (!reached(on)) return;
    if (qn->requires_grad) ensure_grad(*qn);
    if (kn->requires_grad) ensure_grad(*kn);
    if (vn->requires_grad) ensure_grad(*vn);
    if (on->values.dtype() == Dtype::f32)
      attention_bwd<float>(qn->values.f32(), kn->values.f32(), vn->values.f32(), probs->f32(),
                           on->grad.f32(), qn->requires_grad ? qn->grad.f32() : nullptr,
                           kn->requires_grad ? kn->grad.f32() : nullptr,
                           vn->requires_grad ? vn->grad.f32() : nullptr, a);
    else
      attention_bwd<double>(qn->values.f64(), kn->values.f64(), vn->values.f64(), probs->f64(),
                            on->grad.f64(), qn->requires_grad ? qn->grad.f64() : nullptr,
                            kn->requires_grad ? kn->grad.f64() : nullptr,
                            vn->requires_grad ? vn->grad.f64() : nullptr, a);
  });
}

// ---------------------------------------------------------------------------
// bilinear sampling / upsampling

namespace {

struct Tap {
  i64 x0, x1, y0, y1;
  double fx, fy;
};

inline Tap bilinear_tap(double u, double v, i64 w, i64 h) {
  // Pixel centers at half-integer coordinates; border replication.
  double gx = u - 0.5, gy = v - 0.5;
  double fx0 = std::floor(gx), fy0 = std::floor(gy);
  Tap t;
  t.fx = gx - fx0;
  t.fy = gy - fy0;
  t.x0 = std::clamp<i64>(static_cast<i64>(fx0), 0, w - 1);
  t.x1 = std::clamp<i64>(static_cast<i64>(fx0) + 1, 0, w - 1);
  t.y0 = std::clamp<i64>(static_cast<i64>(fy0), 0, h - 1);
  t.y1 = std::clamp<i64>(static_cast<i64>(fy0) + 1, 0, h - 1);
  return t;
}

}  // namespace

BilinearResult bilinear_sample(const Tensor& map, std::span<const double> uv) {
  const char* op = "bilinear_sample";
  detail::OpTimer timer_(op);
  require(map.rank() == 3, op, "map must be [H,W,C], got " + shape_of(map));
  require(uv.size() % 2 == 0, op, "uv list must hold (u,v) pairs");
  check_finite(op, map);
  for (double c : uv)
    if (!std::isfinite(c)) throw std::runtime_error("bilinear_sample: non-finite uv coordinate");

  i64 h = map.dim(0), w = map.dim(1), c = map.dim(2);
  i64 p = static_cast<i64>(uv.size() / 2);
  Tensor out = Tensor::uninitialized(map.dtype(), {p, c});
  BilinearResult res;
  res.in_bounds.assign(static_cast<std::size_t>(p), 0);

  auto run = [&](const auto* mv, auto* ov) {
    using T = std::remove_cv_t<std::remove_reference_t<decltype(mv[0])>>;
    parallel_for(p, [&](i64 lo, i64 hi) {
      for (i64 i = lo; i < hi; ++i) {
        double u = uv[2 * i], v = uv[2 * i + 1];
        res.in_bounds[i] = (u >= 0.0 && u <= static_cast<double>(w) && v >= 0.0 &&
                            v <= static_cast<double>(h))
                               ? 1
                               : 0;
        Tap t = bilinear_tap(u, v, w, h);
        T w00 = static_cast<T>((1 - t.fx) * (1 - t.fy));
        T w10 = static_cast<T>(t.fx * (1 - t.fy));
        T w01 = static_cast<T>((1 - t.fx) * t.fy);
        T w11 = static_cast<T>(t.fx * t.fy);
        const T* m00 = mv + (t.y0 * w + t.x0) * c;
        const T* m10 = mv + (t.y0 * w + t.x1) * c;
        const T* m01 = mv + (t.y1 * w + t.x0) * c;
        const T* m11 = mv + (t.y1 * w + t.x1) * c;
        T* o = ov + i * c;
        for (i64 ch = 0; ch < c; ++ch)
          o[ch] = w00 * m00[ch] + w10 * m10[ch] + w01 * m01[ch] + w11 * m11[ch];
      }
    });
  };
  if (map.dtype() == Dtype::f32)
    run(map.values().f32(), out.values().f32());
  else
    run(map.values().f64(), out.values().f64());

  bool rg = map.requires_grad();
  NodePtr mn = map.node(), on = out.node();
  std::vector<double> uv_copy(uv.begin(), uv.end());
  res.features = finish(op, out, rg, [mn, on, uv_copy, h, w, c, p] {
    if (!reached(on)) return;
    if (!mn->requires_grad) return;
    ensure_grad(*mn);
    auto run_bwd = [&](auto* gm, const auto* go) {
      using T = std::remove_cv_t<std::remove_reference_t<decltype(gm[0])>>;
      // Channel-partitioned scatter keeps writes disjoint and deterministic.
      parallel_for(c, [&](i64 c0, i64 c1) {
        for (i64 i = 0; i < p; ++i) {
          Tap t = bilinear_tap(uv_copy[2 * i], uv_copy[2 * i + 1], w, h);
          T w00 = static_cast<T>((1 - t.fx) * (1 - t.fy));
          T w10 = static_cast<T>(t.fx * (1 - t.fy));
          T w01 = static_cast<T>((1 - t.fx) * t.fy);
          T w11 = static_cast<T>(t.fx * t.fy);
          const T* g = go + i * c;
          for (i64 ch = c0; ch < c1; ++ch) {
            gm[(t.y0 * w + t.x0) * c + ch] += w00 * g[ch];
            gm[(t.y0 * w + t.x1) * c + ch] += w10 * g[ch];
            gm[(t.y1 * w + t.x0) * c + ch] += w01 * g[ch];
            gm[(t.y1 * w + t.x1) * c + ch] += w11 * g[ch];
          }
        }
      });
    };
    if (on->values.dtype() == Dtype::f32)
      run_bwd(mn->grad.f32(), on->grad.f32());
    else
      run_bwd(mn->grad.f64(), on->grad.f64());
  });
  return res;
}

Tensor upsample2x_w(const Tensor& x) {
  const char* op = "upsample2x_w";
  detail::OpTimer timer_(op);
  require(x.rank() == 3, op, "input must be [H,W,C], got " + shape_of(x));
  i64 h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out = Tensor::uninitialized(x.dtype(), {h, 2 * w, c});
  auto run = [&](const auto* xv, auto* ov) {
    for (i64 y = 0; y < h; ++y)
      for (i64 j = 0; j < w; ++j)
        for (i64 ch = 0; ch < c; ++ch) {
          auto v = xv[(y * w + j) * c + ch];
          ov[(y * 2 * w + 2 * j) * c + ch] = v;
          ov[(y * 2 * w + 2 * j + 1) * c + ch] = v;
        }
  };
  if (x.dtype() == Dtype::f32)
    run(x.values().f32(), out.values().f32());
  else
    run(x.values().f64(), out.values().f64());

  bool rg = x.requires_grad();
  NodePtr xn = x.node(), on = out.node();
  return finish(op, out, rg, [xn, on, h, w, c] {
    if (!reached(on)) return;
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    auto run_bwd = [&](auto* gx, const auto* go) {
      for (i64 y = 0; y < h; ++y)
        for (i64 j = 0; j < w; ++j)
          for (i64 ch = 0; ch < c; ++ch)
            gx[(y * w + j) * c + ch] +=
                go[(y * 2 * w + 2 * j) * c + ch] + go[(y * 2 * w + 2 * j + 1) * c + ch];
    };
    if (on->values.dtype() == Dtype::f32)
      run_bwd(xn->grad.f32(), on->grad.f32());
    else
      run_bwd(xn->grad.f64(), on->grad.f64());
  });
}

// ---------------------------------------------------------------------------
// reductions

namespace {

void check_weights(const char* op, const Tensor& x, i64 axis, const Tensor& w) {
  if (!w.defined()) return;
  require(static_cast<i64>(w.rank()) == axis + 1, op,
          "weights rank must be axis+1; got " + shape_of(w));
  for (i64 i = 0; i <= axis; ++i)
    require(w.dim(i) == x.dim(i), op,
            "weights " + shape_of(w) + " do not match " + shape_of(x));
  require(w.dtype() == x.dtype(), op, "weights dtype mismatch");
}

std::vector<i64> reduced_shape(const Tensor& x, i64 axis) {
  std::vector<i64> s;
  for (i64 i = 0; i < static_cast<i64>(x.rank()); ++i)
    if (i != axis) s.push_back(x.dim(i));
  return s;
}

}  // namespace

Tensor reduce_mean(const Tensor& x, i64 axis, const Tensor& weights) {
  const char* op = "reduce_mean";
  detail::OpTimer timer_(op);
  require(axis >= 0 && axis < static_cast<i64>(x.rank()), op,
          "axis out of range for " + shape_of(x));
  check_weights(op, x, axis, weights);
  check_finite(op, x);
  AxisDims d = axis_dims(x, axis);
  Tensor out = Tensor::zeros(x.dtype(), reduced_shape(x, axis));
  bool weighted = weights.defined();

  auto run = [&](const auto* xv, const auto* wv, auto* ov) {
    using T = std::remove_cv_t<std::remove_reference_t<decltype(xv[0])>>;
    parallel_for(d.outer, [&](i64 o0, i64 o1) {
      for (i64 o = o0; o < o1; ++o)
        for (i64 a = 0; a < d.ax; ++a) {
          T wgt = weighted ? wv[o * d.ax + a] : T(1) / static_cast<T>(d.ax);
          const auto* xr = xv + (o * d.ax + a) * d.inner;
          auto* orow = ov + o * d.inner;
          for (i64 i = 0; i < d.inner; ++i) orow[i] += wgt * xr[i];
        }
    });
  };
  if (x.dtype() == Dtype::f32)
    run(x.values().f32(), weighted ? weights.values().f32() : nullptr, out.values().f32());
  else
    run(x.values().f64(), weighted ? weights.values().f64() : nullptr, out.values().f64());

  bool rg = x.requires_grad() || (weighted && weights.requires_grad());
  NodePtr xn = x.node(), on = out.node();
  NodePtr wn = weighted ? weights.node() : nullptr;
  return finish(op, out, rg, [xn, wn, on, d] {
    if (!reached(on)) return;
    auto run_bwd = [&](const auto* xv, const auto* wv, const auto* go, auto* gx, auto* gw) {
      using T = std::remove_cv_t<std::remove_reference_t<decltype(xv[0])>>;
      for (i64 o = 0; o < d.outer; ++o)
        for (i64 a = 0; a < d.ax; ++a) {
          T wgt = wv ? wv[o * d.ax + a] : T(1) / static_cast<T>(d.ax);
          const auto* gr = go + o * d.inner;
          if (gx) {
            auto* gxr = gx + (o * d.ax + a) * d.inner;
            for (i64 i = 0; i < d.inner; ++i) gxr[i] += wgt * gr[i];
          }
          if (gw) {
            const auto* xr = xv + (o * d.ax + a) * d.inner;
            T s = T(0);
            for (i64 i = 0; i < d.inner; ++i) s += xr[i] * gr[i];
            gw[o * d.ax + a] += s;
          }
        }
    };
    if (xn->requires_grad) ensure_grad(*xn);
    if (wn && wn->requires_grad) ensure_grad(*wn);
    if (on->values.dtype() == Dtype::f32)
      run_bwd(xn->values.f32(), wn ? wn->values.f32() : nullptr, on->grad.f32(),
              xn->requires_grad ? xn->grad.f32() : nullptr,
              (wn && wn->requires_grad) ? wn->grad.f32() : nullptr);
    else
      run_bwd(xn->values.f64(), wn ? wn->values.f64() : nullptr, on->grad.f64(),
              xn->requires_grad ? xn->grad.f64() : nullptr,
              (wn && wn->requires_grad) ? wn->grad.f64() : nullptr);
  });
}

Tensor reduce_var(const Tensor& x, i64 axis, const Tensor& weights) {
  const char* op = "reduce_var";
  detail::OpTimer timer_(op);
  require(axis >= 0 && axis < static_cast<i64>(x.rank()), op,
          "axis out of range for " + shape_of(x));
  check_weights(op, x, axis, weights);
  check_finite(op, x);
  AxisDims d = axis_dims(x, axis);
  Tensor out = Tensor::zeros(x.dtype(), reduced_shape(x, axis));
  bool weighted = weights.defined();

  auto run = [&](const auto* xv, const auto* wv, auto* ov) {
    using T = std::remove_cv_t<std::remove_reference_t<decltype(xv[0])>>;
    std::vector<T> mu(static_cast<std::size_t>(d.inner));
    for (i64 o = 0; o < d.outer; ++o) {
      std::fill(mu.begin(), mu.end(), T(0));
      for (i64 a = 0; a < d.ax; ++a) {
        T wgt = weighted ? wv[o * d.ax + a] : T(1) / static_cast<T>(d.ax);
        const auto* xr = xv + (o * d.ax + a) * d.inner;
        for (i64 i = 0; i < d.inner; ++i) mu[i] += wgt * xr[i];
      }
      auto* orow = ov + o * d.inner;
      for (i64 a = 0; a < d.ax; ++a) {
        T wgt = weighted ? wv[o * d.ax + a] : T(1) / static_cast<T>(d.ax);
        const auto* xr = xv + (o * d.ax + a) * d.inner;
        for (i64 i = 0; i < d.inner; ++i) {
          T dlt = xr[i] - mu[i];
          orow[i] += wgt * dlt * dlt;
        }
      }
    }
  };
  if (x.dtype() == Dtype::f32)
    run(x.values().f32(), weighted ? weights.values().f32() : nullptr, out.values().f32());
  else
    run(x.values().f64(), weighted ? weights.values().f64() : nullptr, out.values().f64());

  bool rg = x.requires_grad() || (weighted && weights.requires_grad());
  NodePtr xn = x.node(), on = out.node();
  NodePtr wn = weighted ? weights.node() : nullptr;
  return finish(op, out, rg, [xn, wn, on, d] {
    if (!reached(on)) return;
    auto run_bwd = [&](const auto* xv, const auto* wv, const auto* go, auto* gx, auto* gw) {
      using T = std::remove_cv_t<std::remove_reference_t<decltype(xv[0])>>;
      std::vector<T> mu(static_cast<std::size_t>(d.inner));
      std::vector<T> sdev(static_cast<std::size_t>(d.inner));  // sum_a w_a (x_a - mu)
      for (i64 o = 0; o < d.outer; ++o) {
        std::fill(mu.begin(), mu.end(), T(0));
        std::fill(sdev.begin(), sdev.end(), T(0));
        for (i64 a = 0; a < d.ax; ++a) {
          T wgt = wv ? wv[o * d.ax + a] : T(1) / static_cast<T>(d.ax);
          const auto* xr = xv + (o * d.ax + a) * d.inner;
          for (i64 i = 0; i < d.inner; ++i) mu[i] += wgt * xr[i];
        }
        for (i64 a = 0; a < d.ax; ++a) {
          T wgt = wv ? wv[o * d.ax + a] : T(1) / static_cast<T>(d.ax);
          const auto* xr = xv + (o * d.ax + a) * d.inner;
          for (i64 i = 0; i < d.inner; ++i) sdev[i] += wgt * (xr[i] - mu[i]);
        }
        const auto* gr = go + o * d.inner;
        for (i64 a = 0; a < d.ax; ++a) {
          T wgt = wv ? wv[o * d.ax + a] : T(1) / static_cast<T>(d.ax);
          const auto* xr = xv + (o * d.ax + a) * d.inner;
          if (gx) {
            auto* gxr = gx + (o * d.ax + a) * d.inner;
            for (i64 i = 0; i < d.inner; ++i)
              gxr[i] += gr[i] * T(2) * wgt * ((xr[i] - mu[i]) - sdev[i]);
          }
          if (gw) {
            T s = T(0);
            for (i64 i = 0; i < d.inner; ++i) {
              T dlt = xr[i] - mu[i];
              s += gr[i] * (dlt * dlt - T(2) * xr[i] * sdev[i]);
            }
            gw[o * d.ax + a] += s;
          }
        }
      }
    };
    if (xn->requires_grad) ensure_grad(*xn);
    if (wn && wn->requires_grad) ensure_grad(*wn);
    if (on->values.dtype() == Dtype::f32)
      run_bwd(xn->values.f32(), wn ? wn->values.f32() : nullptr, on->grad.f32(),
              xn->requires_grad ? xn->grad.f32() : nullptr,
              (wn && wn->requires_grad) ? wn->grad.f32() : nullptr);
    else
      run_bwd(xn->values.f64(), wn ? wn->values.f64() : nullptr, on->grad.f64(),
              xn->requires_grad ? xn->grad.f64() : nullptr,
              (wn && wn->requires_grad) ? wn->grad.f64() : nullptr);
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  const char* op = "mse";
  detail::OpTimer timer_(op);
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_of(a) + " vs " + shape_of(b));
  check_dtypes(op, {&a, &b});
  check_finite(op, a);
  check_finite(op, b);
  i64 n = a.numel();
  require(n >= 1, op, "empty input");
  Tensor out = Tensor::zeros(a.dtype(), {});
  double acc = 0.0;
  if (a.dtype() == Dtype::f32) {
    const float* av = a.values().f32();
    const float* bv = b.values().f32();
    float facc = 0.f;
    for (i64 i = 0; i < n; ++i) {
      float dl = av[i] - bv[i];
      facc += dl * dl;
    }
    out.values().set(0, facc / static_cast<float>(n));
  } else {
    const double* av = a.values().f64();
    const double* bv = b.values().f64();
    for (i64 i = 0; i < n; ++i) {
      double dl = av[i] - bv[i];
      acc += dl * dl;
    }
    out.values().set(0, acc / static_cast<double>(n));
  }

  bool rg = any_grad({&a, &b});
  NodePtr an = a.node(), bn = b.node(), on = out.node();
  return finish(op, out, rg, [an, bn, on, n] {
    if (!reached(on)) return;
    auto run_bwd = [&](const auto* av, const auto* bv, auto* ga, auto* gb, auto g0) {
      using T = decltype(g0);
      T s = g0 * T(2) / static_cast<T>(n);
      for (i64 i = 0; i < n; ++i) {
        T d = s * (av[i] - bv[i]);
        if (ga) ga[i] += d;
        if (gb) gb[i] -= d;
      }
    };
    if (an->requires_grad) ensure_grad(*an);
    if (bn->requires_grad) ensure_grad(*bn);
    if (on->values.dtype() == Dtype::f32)
      run_bwd(an->values.f32(), bn->values.f32(), an->requires_grad ? an->grad.f32() : nullptr,
              bn->requires_grad ? bn->grad.f32() : nullptr, on->grad.f32()[0]);
    else
      run_bwd(an->values.f64(), bn->values.f64(), an->requires_grad ? an->grad.f64() : nullptr,
              bn->requires_grad ? bn->grad.f64() : nullptr, on->grad.f64()[0]);
  });
}

// ---------------------------------------------------------------------------
// volume compositing

CompositeResult composite(const Tensor& colors, const Tensor& densities) {
  const char* op = "composite";
  detail::OpTimer timer_(op);
  require(colors.rank() == 3 && colors.shape().back() == 3, op,
          "colors must be [R,N,3], got " + shape_of(colors));
  require(densities.rank() == 2, op, "densities must be [R,N], got " + shape_of(densities));
  require(colors.dim(0) == densities.dim(0) && colors.dim(1) == densities.dim(1), op,
          "colors " + shape_of(colors) + " vs densities " + shape_of(densities));
  check_dtypes(op, {&colors, &densities});
  check_finite(op, colors);
  check_finite(op, densities);
  for (i64 i = 0; i < densities.numel(); ++i)
    if (densities.value_at(i) < 0.0)
      throw std::runtime_error("composite: negative density at index " + std::to_string(i));

  i64 r = colors.dim(0), n = colors.dim(1);
  CompositeResult res;
  Tensor rgb = Tensor::zeros(colors.dtype(), {r, 3});
  res.alpha = Tensor::zeros(colors.dtype(), {r});
  res.weights = Tensor::zeros(colors.dtype(), {r, n});

  auto run = [&](const auto* cv, const auto* sv, auto* ov, auto* av, auto* wv) {
    using T = std::remove_cv_t<std::remove_reference_t<decltype(cv[0])>>;
    parallel_for(r, [&](i64 r0, i64 r1) {
      for (i64 ri = r0; ri < r1; ++ri) {
        T trans = T(1), acc = T(0);
        for (i64 i = 0; i < n; ++i) {
          T e = std::exp(-sv[ri * n + i]);
          T wgt = trans * (T(1) - e);
          wv[ri * n + i] = wgt;
          acc += wgt;
          for (int ch = 0; ch < 3; ++ch) ov[ri * 3 + ch] += wgt * cv[(ri * n + i) * 3 + ch];
          trans *= e;
        }
        av[ri] = acc;
      }
    });
  };
  if (colors.dtype() == Dtype::f32)
    run(colors.values().f32(), densities.values().f32(), rgb.values().f32(),
        res.alpha.values().f32(), res.weights.values().f32());
  else
    run(colors.values().f64(), densities.values().f64(), rgb.values().f64(),
        res.alpha.values().f64(), res.weights.values().f64());

  bool rg = any_grad({&colors, &densities});
  NodePtr cn = colors.node(), sn = densities.node(), on = rgb.node();
  res.rgb = finish(op, rgb, rg, [cn, sn, on, r, n] {
    if (!reached(on)) return;
    auto run_bwd = [&](const auto* cv, const auto* sv, const auto* go, auto* gc, auto* gs) {
      using T = std::remove_cv_t<std::remove_reference_t<decltype(cv[0])>>;
      parallel_for(r, [&](i64 r0, i64 r1) {
        std::vector<T> wdot(static_cast<std::size_t>(n));
        for (i64 ri = r0; ri < r1; ++ri) {
          // Recompute transmittance and per-sample weights.
          T trans = T(1);
          const auto* g = go + ri * 3;
          for (i64 i = 0; i < n; ++i) {
            T e = std::exp(-sv[ri * n + i]);
            T wgt = trans * (T(1) - e);
            T cdot = T(0);
            for (int ch = 0; ch < 3; ++ch) cdot += g[ch] * cv[(ri * n + i) * 3 + ch];
            wdot[i] = wgt * cdot;
            if (gc)
              for (int ch = 0; ch < 3; ++ch) gc[(ri * n + i) * 3 + ch] += wgt * g[ch];
            trans *= e;
          }
          if (gs) {
            // d/d sigma_j: own-sample term T_j exp(-s_j) (g . c_j)
            // minus every later sample's weighted contribution.
            T suffix = T(0);
            T tj = T(1);
            std::vector<T> tvals(static_cast<std::size_t>(n));
            for (i64 i = 0; i < n; ++i) {
              tvals[i] = tj;
              tj *= std::exp(-sv[ri * n + i]);
            }
            for (i64 j = n - 1; j >= 0; --j) {
              T e = std::exp(-sv[ri * n + j]);
              T cdot = T(0);
              for (int ch = 0; ch < 3; ++ch) cdot += g[ch] * cv[(ri * n + j) * 3 + ch];
              gs[ri * n + j] += tvals[j] * e * cdot - suffix;
              suffix += wdot[j];
            }
          }
        }
      });
    };
    if (cn->requires_grad) ensure_grad(*cn);
    if (sn->requires_grad) ensure_grad(*sn);
    if (on->values.dtype() == Dtype::f32)
      run_bwd(cn->values.f32(), sn->values.f32(), on->grad.f32(),
              cn->requires_grad ? cn->grad.f32() : nullptr,
              sn->requires_grad ? sn->grad.f32() : nullptr);
    else
      run_bwd(cn->values.f64(), sn->values.f64(), on->grad.f64(),
              cn->requires_grad ? cn->grad.f64() : nullptr,
              sn->requires_grad ? sn->grad.f64() : nullptr);
  });
  return res;
}

namespace detail {
namespace {
struct ProfileState {
  bool enabled = std::getenv("LIRF_PROFILE") != nullptr;
  std::map<std::string, double> seconds;
  std::map<std::string, std::int64_t> calls;
};
ProfileState& profile_state() {
  static ProfileState state;
  return state;
}
}  // namespace

bool profiling() { return profile_state().enabled; }

void profile_add(const char* op, double s) {
  profile_state().seconds[op] += s;
  profile_state().calls[op] += 1;
}

}  // namespace detail

void dump_op_profile() {
  auto& st = detail::profile_state();
  std::vector<std::pair<double, std::string>> rows;
  for (auto& [op, sec] : st.seconds) rows.push_back({sec, op});
  std::sort(rows.rbegin(), rows.rend());
  for (auto& [sec, op] : rows)
    std::fprintf(stderr, "%-24s %8.3f s  %8lld calls\n", op.c_str(), sec,
                 static_cast<long long>(st.calls[op]));
  st.seconds.clear();
  st.calls.clear();
}

std::span<const char* const> primitive_names() {
  static const char* const names[] = {
      "matmul",      "conv2d",          "add",          "mul",
      "gather_rows", "concat",          "slice",        "reshape",
      "transpose2d", "elu",             "sigmoid",      "softplus",
      "layer_norm",  "softmax",         "normalize",    "multi_head_attention",
      "bilinear_sample", "upsample2x_w", "reduce_mean", "reduce_var",
      "mse",         "composite",
  };
  return std::span<const char* const>(names, std::size(names));
}

}  // namespace lirf::ops
