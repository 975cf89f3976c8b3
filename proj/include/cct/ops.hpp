#pragma once

// Differentiable kernels. Every op returns a new buffer and, when a tape is
// active and some input requires grad, records its backward rule.
//
// Reductions run in a fixed order per output element (sequential over the
// contraction axis, or inside a single Eigen GEMM call whose blocking depends
// only on the operand sizes), so forward and backward are bitwise reproducible.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cct/parallel.hpp"
#include "cct/tensor.hpp"

namespace cct {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <class T, class Fn>
void record(Tape<T>* tape, std::string name, const Tensor<T>& out,
            std::initializer_list<const Tensor<T>*> inputs, Fn&& fn) {
  std::vector<std::shared_ptr<Storage<T>>> ins;
  ins.reserve(inputs.size());
  for (const auto* t : inputs) ins.push_back(t->impl());
  tape->record(std::move(name), std::move(ins), out.impl(), std::forward<Fn>(fn));
}

inline std::int64_t norm_axis(std::int64_t axis, std::int64_t ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    fail(ErrorKind::dimension, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(ndim));
  return axis;
}

inline Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

/// Right-aligned numpy-style broadcast of two shapes.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t ea = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::int64_t eb = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      fail(ErrorKind::dimension, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

/// Strides of `in` viewed with shape `out` (zero on broadcast axes).
inline Shape broadcast_strides(const Shape& in, const Shape& out) {
  Shape st(out.size(), 0);
  const Shape own = strides_of(in);
  const std::size_t lead = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    st[lead + i] = in[i] == 1 ? 0 : own[i];
  return st;
}

/// Visits every element of `out` in row-major order with the matching offsets
/// into two strided operands.
template <class Fn>
void for_each_strided(const Shape& out, const Shape& sa, const Shape& sb, Fn&& fn) {
  const std::size_t nd = out.size();
  const std::int64_t total = numel_of(out);
  if (nd == 0 || total == 0) {
    if (total == 1) fn(0, 0, 0);
    return;
  }
  const std::int64_t inner = out[nd - 1];
  const std::int64_t ia = sa[nd - 1], ib = sb[nd - 1];
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < total; i += inner) {
    for (std::int64_t j = 0; j < inner; ++j) fn(i + j, oa + j * ia, ob + j * ib);
    for (std::int64_t d = static_cast<std::int64_t>(nd) - 2; d >= 0; --d) {
      oa += sa[d];
      ob += sb[d];
      if (++idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { add, sub, mul };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
  const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shapes(a.shape(), b.shape());
  auto out = Tensor<T>::empty(out_shape);
  T* o = out.ptr();
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  const bool same = a.shape() == b.shape();
  const Shape sa = same ? Shape{} : broadcast_strides(a.shape(), out_shape);
  const Shape sb = same ? Shape{} : broadcast_strides(b.shape(), out_shape);
  auto apply = [op](T x, T y) {
    switch (op) {
      case BinOp::add: return x + y;
      case BinOp::sub: return x - y;
      case BinOp::mul: return x * y;
    }
    return x;
  };
  if (same) {
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) o[i] = apply(pa[i], pb[i]);
  } else {
    for_each_strided(out_shape, sa, sb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
      o[i] = apply(pa[ia], pb[ib]);
    });
  }
  if (auto* tape = recording_tape({&a, &b})) {
    const char* name = op == BinOp::add ? "add" : op == BinOp::sub ? "sub" : "mul";
    record(tape, name, out, {&a, &b},
           [A = a.impl().get(), B = b.impl().get(), O = out.impl().get(), op, same, sa, sb, out_shape]() {
             const T* g = O->grad.data();
             T* ga = A->requires_grad ? A->grad_buffer() : nullptr;
             T* gb = B->requires_grad ? B->grad_buffer() : nullptr;
             const T* va = A->data.data();
             const T* vb = B->data.data();
             const T sign_b = op == BinOp::sub ? T(-1) : T(1);
             auto body = [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
               if (op == BinOp::mul) {
                 if (ga) ga[ia] += g[i] * vb[ib];
                 if (gb) gb[ib] += g[i] * va[ia];
               } else {
                 if (ga) ga[ia] += g[i];
                 if (gb) gb[ib] += sign_b * g[i];
               }
             };
             if (same) {
               const auto n = static_cast<std::int64_t>(O->data.size());
               for (std::int64_t i = 0; i < n; ++i) body(i, i, i);
             } else {
               for_each_strided(out_shape, sa, sb, body);
             }
           });
  }
  return out;
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, const char* name, F f, DF df) {
  auto out = Tensor<T>::empty(x.shape());
  const T* px = x.ptr();
  T* o = out.ptr();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = f(px[i]);
  if (auto* tape = recording_tape({&x})) {
    record(tape, name, out, {&x}, [X = x.impl().get(), O = out.impl().get(), df]() {
      const T* g = O->grad.data();
      T* gx = X->grad_buffer();
      const T* v = X->data.data();
      const auto n = static_cast<std::int64_t>(X->data.size());
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * df(v[i]);
    });
  }
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary(a, b, detail::BinOp::add); }
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary(a, b, detail::BinOp::sub); }
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary(a, b, detail::BinOp::mul); }

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, "scale", [s](T v) { return v * s; }, [s](T) { return s; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v < T(0) ? T(0) : v; }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

/// Exact GELU, x * Phi(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return detail::unary(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, "sum", out, {&x}, [X = x.impl().get(), O = out.impl().get()]() {
      const T g = O->grad[0];
      T* gx = X->grad_buffer();
      for (std::size_t i = 0; i < X->data.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Copy with a new shape; one extent may be -1.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) fail(ErrorKind::dimension, "reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0 && x.numel() % known == 0) shape[infer] = x.numel() / known;
  if (numel_of(shape) != x.numel())
    fail(ErrorKind::dimension, "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = Tensor<T>::from(shape, std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, "reshape", out, {&x}, [X = x.impl().get(), O = out.impl().get()]() {
      T* gx = X->grad_buffer();
      const T* g = O->grad.data();
      for (std::size_t i = 0; i < X->data.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// Reorders axes: out.shape[i] = x.shape[dims[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::int64_t>& dims) {
  const std::int64_t nd = x.ndim();
  if (static_cast<std::int64_t>(dims.size()) != nd) fail(ErrorKind::dimension, "permute: rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(nd), false);
  Shape out_shape(static_cast<std::size_t>(nd));
  const Shape in_strides = detail::strides_of(x.shape());
  Shape src_strides(static_cast<std::size_t>(nd));
  for (std::int64_t i = 0; i < nd; ++i) {
    const auto d = detail::norm_axis(dims[i], nd);
    if (seen[d]) fail(ErrorKind::dimension, "permute: repeated axis");
    seen[d] = true;
    out_shape[i] = x.shape()[d];
    src_strides[i] = in_strides[d];
  }
  auto out = Tensor<T>::empty(out_shape);
  const Shape zero(static_cast<std::size_t>(nd), 0);
  const T* px = x.ptr();
  T* o = out.ptr();
  detail::for_each_strided(out_shape, src_strides, zero,
                           [&](std::int64_t i, std::int64_t src, std::int64_t) { o[i] = px[src]; });
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, "permute", out, {&x},
                   [X = x.impl().get(), O = out.impl().get(), out_shape, src_strides, zero]() {
                     T* gx = X->grad_buffer();
                     const T* g = O->grad.data();
                     detail::for_each_strided(out_shape, src_strides, zero,
                                              [&](std::int64_t i, std::int64_t src, std::int64_t) { gx[src] += g[i]; });
                   });
  }
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::int64_t a0, std::int64_t a1) {
  std::vector<std::int64_t> dims(static_cast<std::size_t>(x.ndim()));
  std::iota(dims.begin(), dims.end(), 0);
  std::swap(dims[detail::norm_axis(a0, x.ndim())], dims[detail::norm_axis(a1, x.ndim())]);
  return permute(x, dims);
}

/// Slice [start, start + length) along one axis.
template <class T>
Tensor<T> narrow(const Tensor<T>& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
  axis = detail::norm_axis(axis, x.ndim());
  const std::int64_t extent = x.size(axis);
  if (start < 0 || length <= 0 || start + length > extent)
    fail(ErrorKind::dimension, "narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                   ") outside axis of extent " + std::to_string(extent));
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.size(i);
  for (std::int64_t i = axis + 1; i < x.ndim(); ++i) inner *= x.size(i);
  auto out = Tensor<T>::empty(out_shape);
  const T* px = x.ptr();
  T* o = out.ptr();
  for (std::int64_t a = 0; a < outer; ++a)
    std::copy_n(px + (a * extent + start) * inner, length * inner, o + a * length * inner);
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, "narrow", out, {&x},
                   [X = x.impl().get(), O = out.impl().get(), outer, inner, extent, start, length]() {
                     T* gx = X->grad_buffer();
                     const T* g = O->grad.data();
                     for (std::int64_t a = 0; a < outer; ++a) {
                       T* dst = gx + (a * extent + start) * inner;
                       const T* src = g + a * length * inner;
                       for (std::int64_t j = 0; j < length * inner; ++j) dst[j] += src[j];
                     }
                   });
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) fail(ErrorKind::dimension, "concat: no inputs");
  axis = detail::norm_axis(axis, parts[0].ndim());
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<std::int64_t>(s.size()) != parts[0].ndim())
      fail(ErrorKind::dimension, "concat: rank mismatch");
    out_shape[axis] += s[axis];
    s[axis] = parts[0].shape()[axis];
    if (s != parts[0].shape())
      fail(ErrorKind::dimension, "concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
  }
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::int64_t i = axis + 1; i < static_cast<std::int64_t>(out_shape.size()); ++i) inner *= out_shape[i];
  auto out = Tensor<T>::empty(out_shape);
  const std::int64_t total_axis = out_shape[axis];
  std::int64_t offset = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::int64_t len = p.size(axis);
    for (std::int64_t a = 0; a < outer; ++a)
      std::copy_n(p.ptr() + a * len * inner, len * inner, out.ptr() + (a * total_axis + offset) * inner);
    offset += len;
  }
  auto* tape = Tape<T>::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape != nullptr && any) {
    std::vector<std::shared_ptr<Storage<T>>> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    std::vector<Storage<T>*> raw;
    for (const auto& p : parts) raw.push_back(p.impl().get());
    tape->record("concat", ins, out.impl(), [raw, O = out.impl().get(), offsets, outer, inner, total_axis, axis]() {
      const T* g = O->grad.data();
      for (std::size_t k = 0; k < raw.size(); ++k) {
        if (!raw[k]->requires_grad) continue;
        const std::int64_t len = raw[k]->shape[axis];
        T* gp = raw[k]->grad_buffer();
        for (std::int64_t a = 0; a < outer; ++a) {
          const T* src = g + (a * total_axis + offsets[k]) * inner;
          T* dst = gp + a * len * inner;
          for (std::int64_t j = 0; j < len * inner; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

/// Materializes a broadcast of x to `shape`; backward sums over the broadcast axes.
template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  if (detail::broadcast_shapes(x.shape(), shape) != shape)
    fail(ErrorKind::dimension, "broadcast_to: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  const Shape sx = detail::broadcast_strides(x.shape(), shape);
  const Shape zero(shape.size(), 0);
  auto out = Tensor<T>::empty(shape);
  const T* px = x.ptr();
  T* o = out.ptr();
  detail::for_each_strided(shape, sx, zero, [&](std::int64_t i, std::int64_t ix, std::int64_t) { o[i] = px[ix]; });
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, "broadcast_to", out, {&x}, [X = x.impl().get(), O = out.impl().get(), shape, sx, zero]() {
      T* gx = X->grad_buffer();
      const T* g = O->grad.data();
      detail::for_each_strided(shape, sx, zero, [&](std::int64_t i, std::int64_t ix, std::int64_t) { gx[ix] += g[i]; });
    });
  }
  return out;
}

/// Batched matrix product a[..., m, k] x b[..., k, p] with broadcastable batch axes.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::CMatMap;
  using detail::MatMap;
  if (a.ndim() < 2 || b.ndim() < 2 || a.size(-1) != b.size(-2))
    fail(ErrorKind::dimension, "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::int64_t m = a.size(-2), k = a.size(-1), p = b.size(-1);
  const Shape ab(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shapes(ab, bb);
  } catch (const Error&) {
    fail(ErrorKind::dimension, "matmul: batch axes of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                   " do not broadcast");
  }
  const std::int64_t nb = numel_of(batch);
  // Matrix-index offsets (in units of whole matrices) for each output batch entry.
  std::vector<std::int64_t> ao(static_cast<std::size_t>(nb)), bo(static_cast<std::size_t>(nb));
  if (batch.empty()) {
    ao[0] = bo[0] = 0;
  } else {
    detail::for_each_strided(batch, detail::broadcast_strides(ab, batch), detail::broadcast_strides(bb, batch),
                             [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                               ao[static_cast<std::size_t>(i)] = ia;
                               bo[static_cast<std::size_t>(i)] = ib;
                             });
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(p);
  auto out = Tensor<T>::empty(out_shape);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  parallel_for(nb, [&](std::int64_t i) {
    MatMap<T>(po + i * m * p, m, p).noalias() =
        CMatMap<T>(pa + ao[i] * m * k, m, k) * CMatMap<T>(pb + bo[i] * k * p, k, p);
  });
  if (auto* tape = detail::recording_tape({&a, &b})) {
    detail::record(tape, "matmul", out, {&a, &b},
                   [A = a.impl().get(), B = b.impl().get(), O = out.impl().get(), ao, bo, m, k, p, nb]() {
                     const T* g = O->grad.data();
                     if (A->requires_grad) {
                       T* ga = A->grad_buffer();
                       for (std::int64_t i = 0; i < nb; ++i)
                         MatMap<T>(ga + ao[i] * m * k, m, k).noalias() +=
                             CMatMap<T>(g + i * m * p, m, p) * CMatMap<T>(B->data.data() + bo[i] * k * p, k, p).transpose();
                     }
                     if (B->requires_grad) {
                       T* gb = B->grad_buffer();
                       for (std::int64_t i = 0; i < nb; ++i)
                         MatMap<T>(gb + bo[i] * k * p, k, p).noalias() +=
                             CMatMap<T>(A->data.data() + ao[i] * m * k, m, k).transpose() * CMatMap<T>(g + i * m * p, m, p);
                     }
                   });
  }
  return out;
}

/// Affine map over the last axis: x[..., in] w[out, in]^T + bias[out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  using detail::CMatMap;
  using detail::MatMap;
  if (w.ndim() != 2 || x.size(-1) != w.size(1))
    fail(ErrorKind::dimension, "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  const std::int64_t in = w.size(1), outf = w.size(0);
  if (bias.defined() && (bias.ndim() != 1 || bias.size(0) != outf))
    fail(ErrorKind::dimension, "linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(outf) + " outputs");
  const std::int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  auto out = Tensor<T>::empty(out_shape);
  MatMap<T> Y(out.ptr(), rows, outf);
  Y.noalias() = CMatMap<T>(x.ptr(), rows, in) * CMatMap<T>(w.ptr(), outf, in).transpose();
  if (bias.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.ptr(), outf);
  if (auto* tape = detail::recording_tape({&x, &w, &bias})) {
    detail::record(tape, "linear", out, {&x, &w, &bias},
                   [X = x.impl().get(), W = w.impl().get(), Bi = bias.defined() ? bias.impl().get() : nullptr,
                    O = out.impl().get(), rows, in, outf]() {
                     CMatMap<T> G(O->grad.data(), rows, outf);
                     if (X->requires_grad)
                       MatMap<T>(X->grad_buffer(), rows, in).noalias() += G * CMatMap<T>(W->data.data(), outf, in);
                     if (W->requires_grad)
                       MatMap<T>(W->grad_buffer(), outf, in).noalias() +=
                           G.transpose() * CMatMap<T>(X->data.data(), rows, in);
                     if (Bi && Bi->requires_grad) {
                       T* gb = Bi->grad_buffer();
                       for (std::int64_t r = 0; r < rows; ++r)
                         for (std::int64_t c = 0; c < outf; ++c) gb[c] += G(r, c);
                     }
                   });
  }
  return out;
}

inline std::int64_t pooled_extent(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

inline void check_window(const char* op, const Shape& xs, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  if (xs.size() != 4) fail(ErrorKind::dimension, std::string(op) + ": expected [b, C, H, W], got " + shape_str(xs));
  if (k < 1 || stride < 1 || pad < 0)
    fail(ErrorKind::dimension, std::string(op) + ": invalid kernel/stride/padding");
  if (k > xs[2] + 2 * pad || k > xs[3] + 2 * pad)
    fail(ErrorKind::dimension, std::string(op) + ": kernel " + std::to_string(k) + " larger than padded input " +
                                   shape_str(xs));
}

// col[(c*k + ky)*k + kx, col0 + oy*Wo + ox] = x[c, oy*s - p + ky, ox*s - p + kx]
template <class T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t k, std::int64_t s,
            std::int64_t p, std::int64_t Ho, std::int64_t Wo, T* col, std::int64_t ld, std::int64_t col0) {
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t ky = 0; ky < k; ++ky)
      for (std::int64_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * ld + col0;
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * s - p + ky;
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill_n(dst, Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + iy) * W;
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            const std::int64_t ix = ox * s - p + kx;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* col, std::int64_t ld, std::int64_t col0, std::int64_t C, std::int64_t H, std::int64_t W,
            std::int64_t k, std::int64_t s, std::int64_t p, std::int64_t Ho, std::int64_t Wo, T* dx) {
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t ky = 0; ky < k; ++ky)
      for (std::int64_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * ld + col0;
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * s - p + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = dx + (c * H + iy) * W;
          const T* src = row + oy * Wo;
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            const std::int64_t ix = ox * s - p + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding, no bias. x[b, C, H, W], w[Co, C, k, k].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::int64_t stride = 1, std::int64_t padding = 0) {
  using detail::CMatMap;
  using detail::MatMap;
  if (w.ndim() != 4 || w.size(2) != w.size(3))
    fail(ErrorKind::dimension, "conv2d: weight must be [Co, C, k, k], got " + shape_str(w.shape()));
  const std::int64_t k = w.size(2);
  detail::check_window("conv2d", x.shape(), k, stride, padding);
  if (x.size(1) != w.size(1))
    fail(ErrorKind::dimension, "conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const std::int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3), Co = w.size(0);
  const std::int64_t Ho = pooled_extent(H, k, stride, padding), Wo = pooled_extent(W, k, stride, padding);
  const std::int64_t HW = Ho * Wo, K = C * k * k;

  // Per-image im2col into a cache-sized scratch buffer, then one GEMM straight
  // into the output slice. Backward rebuilds the columns instead of storing them.
  auto out = Tensor<T>::empty({B, Co, Ho, Wo});
  {
    std::vector<T> col(static_cast<std::size_t>(K * HW));
    const CMatMap<T> Wm(w.ptr(), Co, K);
    for (std::int64_t b = 0; b < B; ++b) {
      detail::im2col(x.ptr() + b * C * H * W, C, H, W, k, stride, padding, Ho, Wo, col.data(), HW, 0);
      MatMap<T>(out.ptr() + b * Co * HW, Co, HW).noalias() = Wm * CMatMap<T>(col.data(), K, HW);
    }
  }

  if (auto* tape = detail::recording_tape({&x, &w})) {
    detail::record(tape, "conv2d", out, {&x, &w},
                   [X = x.impl().get(), Wt = w.impl().get(), O = out.impl().get(), B, C, H, W, Co, k, stride, padding,
                    Ho, Wo, HW, K]() {
                     const T* g = O->grad.data();
                     std::vector<T> col(static_cast<std::size_t>(K * HW));
                     std::vector<T> dcol(static_cast<std::size_t>(K * HW));
                     const CMatMap<T> Wm(Wt->data.data(), Co, K);
                     T* gw = Wt->requires_grad ? Wt->grad_buffer() : nullptr;
                     T* gx = X->requires_grad ? X->grad_buffer() : nullptr;
                     for (std::int64_t b = 0; b < B; ++b) {
                       const CMatMap<T> G(g + b * Co * HW, Co, HW);
                       if (gw) {
                         detail::im2col(X->data.data() + b * C * H * W, C, H, W, k, stride, padding, Ho, Wo,
                                        col.data(), HW, 0);
                         MatMap<T>(gw, Co, K).noalias() += G * CMatMap<T>(col.data(), K, HW).transpose();
                       }
                       if (gx) {
                         MatMap<T>(dcol.data(), K, HW).noalias() = Wm.transpose() * G;
                         detail::col2im(dcol.data(), HW, 0, C, H, W, k, stride, padding, Ho, Wo, gx + b * C * H * W);
                       }
                     }
                   });
  }
  return out;
}

/// Max pooling with implicit -inf padding. Backward routes each window's
/// gradient to its first (lowest index) maximal element.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::int64_t k, std::int64_t stride, std::int64_t padding = 0) {
  detail::check_window("maxpool2d", x.shape(), k, stride, padding);
  const std::int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::int64_t Ho = pooled_extent(H, k, stride, padding), Wo = pooled_extent(W, k, stride, padding);
  auto out = Tensor<T>::empty({B, C, Ho, Wo});
  std::vector<std::int32_t> arg(static_cast<std::size_t>(B * C * Ho * Wo));
  const T* px = x.ptr();
  T* o = out.ptr();
  std::int32_t* pa = arg.data();
  parallel_for(B * C, [=](std::int64_t plane) {
    const T* src = px + plane * H * W;
    T* dst = o + plane * Ho * Wo;
    std::int32_t* da = pa + plane * Ho * Wo;
    for (std::int64_t oy = 0; oy < Ho; ++oy) {
      const std::int64_t y0 = std::max<std::int64_t>(0, oy * stride - padding);
      const std::int64_t y1 = std::min<std::int64_t>(H, oy * stride - padding + k);
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        const std::int64_t x0 = std::max<std::int64_t>(0, ox * stride - padding);
        const std::int64_t x1 = std::min<std::int64_t>(W, ox * stride - padding + k);
        T best = -std::numeric_limits<T>::infinity();
        std::int32_t best_i = -1;
        if (y0 < y1 && x0 < x1) {
          // Row-major scan with strict '>' keeps the first maximal element; a NaN wins so it propagates.
          best = src[y0 * W + x0];
          best_i = static_cast<std::int32_t>(y0 * W + x0);
          for (std::int64_t iy = y0; iy < y1; ++iy)
            for (std::int64_t ix = x0; ix < x1; ++ix) {
              const T v = src[iy * W + ix];
              const bool gt = v > best || (v != v && best == best);
              best = gt ? v : best;
              best_i = gt ? static_cast<std::int32_t>(iy * W + ix) : best_i;
            }
        }
        dst[oy * Wo + ox] = best;
        da[oy * Wo + ox] = best_i;
      }
    }
  });
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, "maxpool2d", out, {&x},
                   [X = x.impl().get(), O = out.impl().get(), arg = std::move(arg), B, C, H, W, Ho, Wo]() {
                     T* gx = X->grad_buffer();
                     const T* g = O->grad.data();
                     parallel_for(B * C, [&](std::int64_t plane) {
                       for (std::int64_t j = 0; j < Ho * Wo; ++j) {
                         const std::int64_t oi = plane * Ho * Wo + j;
                         const auto a = arg[static_cast<std::size_t>(oi)];
                         if (a >= 0) gx[plane * H * W + a] += g[oi];
                       }
                     });
                   });
  }
  return out;
}

/// Numerically stable softmax along `axis` (max-subtracted).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis = -1) {
  axis = detail::norm_axis(axis, x.ndim());
  const std::int64_t n = x.size(axis);
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.size(i);
  for (std::int64_t i = axis + 1; i < x.ndim(); ++i) inner *= x.size(i);
  auto out = Tensor<T>::empty(x.shape());
  const T* px = x.ptr();
  T* o = out.ptr();
  parallel_for(outer, [&](std::int64_t a) {
    for (std::int64_t j = 0; j < inner; ++j) {
      const T* src = px + a * n * inner + j;
      T* dst = o + a * n * inner + j;
      T mx = src[0];
      for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, src[i * inner]);
      T total = T(0);
      for (std::int64_t i = 0; i < n; ++i) {
        dst[i * inner] = std::exp(src[i * inner] - mx);
        total += dst[i * inner];
      }
      const T inv = T(1) / total;
      for (std::int64_t i = 0; i < n; ++i) dst[i * inner] *= inv;
    }
  });
  if (auto* tape = detail::recording_tape({&x})) {
    detail::record(tape, "softmax", out, {&x}, [X = x.impl().get(), O = out.impl().get(), outer, n, inner]() {
      T* gx = X->grad_buffer();
      const T* g = O->grad.data();
      const T* y = O->data.data();
      parallel_for(outer, [&](std::int64_t a) {
        for (std::int64_t j = 0; j < inner; ++j) {
          const std::int64_t base = a * n * inner + j;
          T dot = T(0);
          for (std::int64_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
          for (std::int64_t i = 0; i < n; ++i) gx[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
        }
      });
    });
  }
  return out;
}

/// Per-token normalization over the last axis followed by gamma/beta.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::int64_t d = x.size(-1);
  if (gamma.numel() != d || beta.numel() != d)
    fail(ErrorKind::dimension, "layernorm: affine params must have " + std::to_string(d) + " entries");
  const std::int64_t rows = x.numel() / d;
  auto out = Tensor<T>::empty(x.shape());
  std::vector<T> mean(static_cast<std::size_t>(rows)), rstd(static_cast<std::size_t>(rows));
  const T* px = x.ptr();
  const T* pg = gamma.ptr();
  const T* pb = beta.ptr();
  T* o = out.ptr();
  parallel_for(rows, [&](std::int64_t r) {
    const T* src = px + r * d;
    double mu = 0;
    for (std::int64_t i = 0; i < d; ++i) mu += src[i];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::int64_t i = 0; i < d; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(d);
    const T m = static_cast<T>(mu);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    mean[static_cast<std::size_t>(r)] = m;
    rstd[static_cast<std::size_t>(r)] = rs;
    T* dst = o + r * d;
    for (std::int64_t i = 0; i < d; ++i) dst[i] = (src[i] - m) * rs * pg[i] + pb[i];
  });
  if (auto* tape = detail::recording_tape({&x, &gamma, &beta})) {
    detail::record(tape, "layernorm", out, {&x, &gamma, &beta},
                   [X = x.impl().get(), Gm = gamma.impl().get(), Bt = beta.impl().get(), O = out.impl().get(),
                    mean = std::move(mean), rstd = std::move(rstd), rows, d]() {
                     const T* g = O->grad.data();
                     const T* v = X->data.data();
                     const T* gm = Gm->data.data();
                     if (Gm->requires_grad || Bt->requires_grad) {
                       T* dg = Gm->requires_grad ? Gm->grad_buffer() : nullptr;
                       T* db = Bt->requires_grad ? Bt->grad_buffer() : nullptr;
                       for (std::int64_t r = 0; r < rows; ++r)
                         for (std::int64_t i = 0; i < d; ++i) {
                           const T xhat = (v[r * d + i] - mean[r]) * rstd[r];
                           if (dg) dg[i] += g[r * d + i] * xhat;
                           if (db) db[i] += g[r * d + i];
                         }
                     }
                     if (X->requires_grad) {
                       T* gx = X->grad_buffer();
                       parallel_for(rows, [&](std::int64_t r) {
                         T sum_dxh = T(0), sum_dxh_xh = T(0);
                         for (std::int64_t i = 0; i < d; ++i) {
                           const T xhat = (v[r * d + i] - mean[r]) * rstd[r];
                           const T dxh = g[r * d + i] * gm[i];
                           sum_dxh += dxh;
                           sum_dxh_xh += dxh * xhat;
                         }
                         const T inv_d = T(1) / static_cast<T>(d);
                         for (std::int64_t i = 0; i < d; ++i) {
                           const T xhat = (v[r * d + i] - mean[r]) * rstd[r];
                           const T dxh = g[r * d + i] * gm[i];
                           gx[r * d + i] += rstd[r] * (dxh - inv_d * sum_dxh - xhat * inv_d * sum_dxh_xh);
                         }
                       });
                     }
                   });
  }
  return out;
}

}  // namespace cct
