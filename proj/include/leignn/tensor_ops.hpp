#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "leignn/tensor.hpp"

namespace leignn::ops {

namespace detail {

using leignn::detail::check;
using leignn::detail::ensure_grad;

template <typename Real>
bool recording(Tape<Real>* tape, std::initializer_list<const Tensor<Real>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* t : inputs) {
    if ((*t).requires_grad()) return true;
  }
  return false;
}

template <typename Real>
void check_finite(const Tensor<Real>& t, const char* op) {
  if (!strict_mode()) return;
  for (Real v : t.data()) {
    check(std::isfinite(static_cast<double>(v)),
          std::string(op) + ": non-finite input in strict mode");
  }
}

template <typename Real>
void same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch");
}

inline void check_rank2(std::size_t rank, const char* op) {
  check(rank >= 1 && rank <= 2, std::string(op) + ": rank-1 or rank-2 tensor required");
}

// C[n x m] += A[n x k] * B[k x m], fresh output buffer.
template <typename Real>
void matmul_kernel(const Real* a, const Real* b, Real* out, std::size_t n, std::size_t k,
                   std::size_t m) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n * k * m > 65536)
#endif
  for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    Real* out_row = out + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Real aik = a[i * k + kk];
      const Real* b_row = b + kk * m;
      for (std::size_t j = 0; j < m; ++j) out_row[j] += aik * b_row[j];
    }
  }
}

// dA[n x k] += G[n x m] * B^T, i.e. dA[i,kk] = sum_j G[i,j] B[kk,j].
template <typename Real>
void matmul_grad_a(const Real* g, const Real* b, Real* da, std::size_t n, std::size_t k,
                   std::size_t m) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n * k * m > 65536)
#endif
  for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const Real* g_row = g + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Real* b_row = b + kk * m;
      Real s = 0;
      for (std::size_t j = 0; j < m; ++j) s += g_row[j] * b_row[j];
      da[i * k + kk] += s;
    }
  }
}

// dB[k x m] += A^T * G, i.e. dB[kk,j] = sum_i A[i,kk] G[i,j].
template <typename Real>
void matmul_grad_b(const Real* a, const Real* g, Real* db, std::size_t n, std::size_t k,
                   std::size_t m) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n * k * m > 65536)
#endif
  for (long long kk2 = 0; kk2 < static_cast<long long>(k); ++kk2) {
    const std::size_t kk = static_cast<std::size_t>(kk2);
    Real* db_row = db + kk * m;
    for (std::size_t i = 0; i < n; ++i) {
      const Real aik = a[i * k + kk];
      const Real* g_row = g + i * m;
      for (std::size_t j = 0; j < m; ++j) db_row[j] += aik * g_row[j];
    }
  }
}

}  // namespace detail

/// Matrix product. A is n x k; B is k x m (or a length-k vector, in which
/// case the result is a length-n vector).
template <typename Real>
Tensor<Real> matmul(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_rank2(a.rank(), "matmul");
  detail::check_rank2(b.rank(), "matmul");
  detail::check(a.rank() == 2, "matmul: left operand must be rank-2");
  const std::size_t n = a.rows(), k = a.cols();
  const std::size_t bk = b.rows(), m = b.cols();
  detail::check(k == bk, "matmul: inner dimensions differ (" + std::to_string(k) + " vs " +
                             std::to_string(bk) + ")");
  detail::check_finite(a, "matmul");
  detail::check_finite(b, "matmul");

  std::vector<Real> out_data(n * m, Real(0));
  detail::matmul_kernel(a.data().data(), b.data().data(), out_data.data(), n, k, m);
  Tensor<Real> out = (b.rank() == 1) ? Tensor<Real>({n}, std::move(out_data))
                                     : Tensor<Real>({n, m}, std::move(out_data));

  if (detail::recording(tape, {&a, &b})) {
    auto an = a.impl(), bn = b.impl(), on = out.impl();
    tape->record_op({a, b}, out, [an, bn, on, n, k, m] {
      detail::ensure_grad(*on);
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        detail::matmul_grad_a(on->grad.data(), bn->data.data(), an->grad.data(), n, k, m);
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        detail::matmul_grad_b(an->data.data(), on->grad.data(), bn->grad.data(), n, k, m);
      }
    });
  }
  return out;
}

namespace detail {

/// Shared scaffolding for elementwise binary ops.
template <typename Real, typename Fwd, typename Bwd>
Tensor<Real> binary_elementwise(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b,
                                const char* name, Fwd fwd, Bwd bwd) {
  same_shape(a, b, name);
  check_finite(a, name);
  check_finite(b, name);
  std::vector<Real> out_data(a.size());
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = fwd(ad[i], bd[i]);
  Tensor<Real> out(a.shape(), std::move(out_data));
  if (recording(tape, {&a, &b})) {
    auto an = a.impl(), bn = b.impl(), on = out.impl();
    tape->record_op({a, b}, out, [an, bn, on, bwd] {
      ensure_grad(*on);
      if (an->requires_grad) ensure_grad(*an);
      if (bn->requires_grad) ensure_grad(*bn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        auto [da, db] = bwd(an->data[i], bn->data[i], on->grad[i]);
        if (an->requires_grad) an->grad[i] += da;
        if (bn->requires_grad) bn->grad[i] += db;
      }
    });
  }
  return out;
}

/// Shared scaffolding for elementwise unary ops. The backward callback sees
/// (input value, output value, output grad).
template <typename Real, typename Fwd, typename Bwd>
Tensor<Real> unary_elementwise(Tape<Real>* tape, const Tensor<Real>& a, const char* name,
                               Fwd fwd, Bwd bwd) {
  check_finite(a, name);
  std::vector<Real> out_data(a.size());
  const auto& ad = a.data();
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = fwd(ad[i]);
  Tensor<Real> out(a.shape(), std::move(out_data));
  if (recording(tape, {&a})) {
    auto an = a.impl(), on = out.impl();
    tape->record_op({a}, out, [an, on, bwd] {
      ensure_grad(*on);
      ensure_grad(*an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        an->grad[i] += bwd(an->data[i], on->data[i], on->grad[i]);
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elementwise(
      tape, a, b, "add", [](Real x, Real y) { return x + y; },
      [](Real, Real, Real g) { return std::pair<Real, Real>(g, g); });
}

template <typename Real>
Tensor<Real> sub(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elementwise(
      tape, a, b, "sub", [](Real x, Real y) { return x - y; },
      [](Real, Real, Real g) { return std::pair<Real, Real>(g, -g); });
}

/// Elementwise (Hadamard) product.
template <typename Real>
Tensor<Real> hadamard(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elementwise(
      tape, a, b, "hadamard", [](Real x, Real y) { return x * y; },
      [](Real x, Real y, Real g) { return std::pair<Real, Real>(g * y, g * x); });
}

/// Multiply by a compile-time-constant scalar (no gradient w.r.t. the scalar).
template <typename Real>
Tensor<Real> scale(Tape<Real>* tape, const Tensor<Real>& a, Real factor) {
  return detail::unary_elementwise(
      tape, a, "scale", [factor](Real x) { return x * factor; },
      [factor](Real, Real, Real g) { return g * factor; });
}

template <typename Real>
Tensor<Real> tanh(Tape<Real>* tape, const Tensor<Real>& a) {
  return detail::unary_elementwise(
      tape, a, "tanh", [](Real x) { return std::tanh(x); },
      [](Real, Real y, Real g) { return g * (Real(1) - y * y); });
}

template <typename Real>
Tensor<Real> silu(Tape<Real>* tape, const Tensor<Real>& a) {
  auto sigmoid = [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); };
  return detail::unary_elementwise(
      tape, a, "silu", [sigmoid](Real x) { return x * sigmoid(x); },
      [sigmoid](Real x, Real, Real g) {
        const Real s = sigmoid(x);
        return g * s * (Real(1) + x * (Real(1) - s));
      });
}

template <typename Real>
Tensor<Real> exp(Tape<Real>* tape, const Tensor<Real>& a) {
  return detail::unary_elementwise(
      tape, a, "exp", [](Real x) { return std::exp(x); },
      [](Real, Real y, Real g) { return g * y; });
}

/// Elementwise absolute value; the subgradient at zero is zero.
template <typename Real>
Tensor<Real> abs(Tape<Real>* tape, const Tensor<Real>& a) {
  return detail::unary_elementwise(
      tape, a, "abs", [](Real x) { return std::abs(x); },
      [](Real x, Real, Real g) { return x > 0 ? g : (x < 0 ? -g : Real(0)); });
}

/// Add a length-m row vector to every row of an n x m matrix.
template <typename Real>
Tensor<Real> add_rowvec(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check(a.rank() == 2, "add_rowvec: matrix required");
  detail::check(b.size() == a.cols(), "add_rowvec: row vector length mismatch");
  detail::check_finite(a, "add_rowvec");
  detail::check_finite(b, "add_rowvec");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<Real> out_data(a.data());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out_data[i * m + j] += b.data()[j];
  Tensor<Real> out(a.shape(), std::move(out_data));
  if (detail::recording(tape, {&a, &b})) {
    auto an = a.impl(), bn = b.impl(), on = out.impl();
    tape->record_op({a, b}, out, [an, bn, on, n, m] {
      detail::ensure_grad(*on);
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < n * m; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) bn->grad[j] += on->grad[i * m + j];
      }
    });
  }
  return out;
}

/// Concatenate two matrices with equal row counts along the feature axis.
template <typename Real>
Tensor<Real> concat_cols(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check(a.rank() == 2 && b.rank() == 2, "concat_cols: matrices required");
  detail::check(a.rows() == b.rows(), "concat_cols: row count mismatch");
  detail::check_finite(a, "concat_cols");
  detail::check_finite(b, "concat_cols");
  const std::size_t n = a.rows(), p = a.cols(), q = b.cols();
  std::vector<Real> out_data(n * (p + q));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) out_data[i * (p + q) + j] = a.data()[i * p + j];
    for (std::size_t j = 0; j < q; ++j) out_data[i * (p + q) + p + j] = b.data()[i * q + j];
  }
  Tensor<Real> out({n, p + q}, std::move(out_data));
  if (detail::recording(tape, {&a, &b})) {
    auto an = a.impl(), bn = b.impl(), on = out.impl();
    tape->record_op({a, b}, out, [an, bn, on, n, p, q] {
      detail::ensure_grad(*on);
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < p; ++j)
            an->grad[i * p + j] += on->grad[i * (p + q) + j];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < q; ++j)
            bn->grad[i * q + j] += on->grad[i * (p + q) + p + j];
      }
    });
  }
  return out;
}

/// Copy a contiguous column range [first, last) into a new matrix.
template <typename Real>
Tensor<Real> slice_cols(Tape<Real>* tape, const Tensor<Real>& a, std::size_t first,
                        std::size_t last) {
  detail::check(a.rank() == 2, "slice_cols: matrix required");
  detail::check(first < last && last <= a.cols(), "slice_cols: bad column range");
  const std::size_t n = a.rows(), m = a.cols(), w = last - first;
  std::vector<Real> out_data(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out_data[i * w + j] = a.data()[i * m + first + j];
  Tensor<Real> out({n, w}, std::move(out_data));
  if (detail::recording(tape, {&a})) {
    auto an = a.impl(), on = out.impl();
    tape->record_op({a}, out, [an, on, n, m, w, first] {
      detail::ensure_grad(*on);
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j)
          an->grad[i * m + first + j] += on->grad[i * w + j];
    });
  }
  return out;
}

/// Row-wise Euclidean norm across the three spatial component planes:
/// out = sqrt(x^2 + y^2 + z^2) elementwise. The gradient at an exactly zero
/// norm is taken as zero.
template <typename Real>
Tensor<Real> spatial_norm(Tape<Real>* tape, const Tensor<Real>& x, const Tensor<Real>& y,
                          const Tensor<Real>& z) {
  detail::same_shape(x, y, "spatial_norm");
  detail::same_shape(x, z, "spatial_norm");
  detail::check_finite(x, "spatial_norm");
  detail::check_finite(y, "spatial_norm");
  detail::check_finite(z, "spatial_norm");
  std::vector<Real> out_data(x.size());
  for (std::size_t i = 0; i < out_data.size(); ++i) {
    out_data[i] = std::sqrt(x.data()[i] * x.data()[i] + y.data()[i] * y.data()[i] +
                            z.data()[i] * z.data()[i]);
  }
  Tensor<Real> out(x.shape(), std::move(out_data));
  if (detail::recording(tape, {&x, &y, &z})) {
    auto xn = x.impl(), yn = y.impl(), zn = z.impl(), on = out.impl();
    tape->record_op({x, y, z}, out, [xn, yn, zn, on] {
      detail::ensure_grad(*on);
      if (xn->requires_grad) detail::ensure_grad(*xn);
      if (yn->requires_grad) detail::ensure_grad(*yn);
      if (zn->requires_grad) detail::ensure_grad(*zn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const Real norm = on->data[i];
        if (norm == Real(0)) continue;
        const Real g = on->grad[i] / norm;
        if (xn->requires_grad) xn->grad[i] += g * xn->data[i];
        if (yn->requires_grad) yn->grad[i] += g * yn->data[i];
        if (zn->requires_grad) zn->grad[i] += g * zn->data[i];
      }
    });
  }
  return out;
}

/// Gather rows of a matrix by index; the backward pass scatter-adds.
template <typename Real>
Tensor<Real> gather_rows(Tape<Real>* tape, const Tensor<Real>& a,
                         const std::vector<int>& indices) {
  detail::check(a.rank() == 2, "gather_rows: matrix required");
  detail::check_finite(a, "gather_rows");
  const std::size_t n = a.rows(), m = a.cols(), r = indices.size();
  for (int idx : indices)
    detail::check(idx >= 0 && static_cast<std::size_t>(idx) < n,
                  "gather_rows: index out of bounds");
  std::vector<Real> out_data(r * m);
  for (std::size_t i = 0; i < r; ++i) {
    const Real* src = a.data().data() + static_cast<std::size_t>(indices[i]) * m;
    Real* dst = out_data.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) dst[j] = src[j];
  }
  Tensor<Real> out({r, m}, std::move(out_data));
  if (detail::recording(tape, {&a})) {
    auto an = a.impl(), on = out.impl();
    tape->record_op({a}, out, [an, on, indices, m, r] {
      detail::ensure_grad(*on);
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < r; ++i) {
        Real* dst = an->grad.data() + static_cast<std::size_t>(indices[i]) * m;
        const Real* src = on->grad.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

namespace detail {

template <typename Real>
void check_segments(const std::vector<int>& segments, std::size_t n, std::size_t num_segments,
                    const char* op) {
  check(segments.size() == n, std::string(op) + ": one segment id per row required");
  for (int s : segments)
    check(s >= 0 && static_cast<std::size_t>(s) < num_segments,
          std::string(op) + ": segment id out of range");
}

}  // namespace detail

/// Sum rows into segments. Accumulation runs in ascending row order within
/// each segment so results are bit-reproducible.
template <typename Real>
Tensor<Real> segment_sum(Tape<Real>* tape, const Tensor<Real>& a,
                         const std::vector<int>& segments, std::size_t num_segments) {
  detail::check(a.rank() <= 2, "segment_sum: rank-1 or rank-2 tensor required");
  detail::check_finite(a, "segment_sum");
  const std::size_t n = a.rows(), m = a.cols();
  detail::check_segments<Real>(segments, n, num_segments, "segment_sum");
  std::vector<Real> out_data(num_segments * m, Real(0));
  for (std::size_t i = 0; i < n; ++i) {
    Real* dst = out_data.data() + static_cast<std::size_t>(segments[i]) * m;
    const Real* src = a.data().data() + i * m;
    for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
  }
  Tensor<Real> out = (a.rank() == 1) ? Tensor<Real>({num_segments}, std::move(out_data))
                                     : Tensor<Real>({num_segments, m}, std::move(out_data));
  if (detail::recording(tape, {&a})) {
    auto an = a.impl(), on = out.impl();
    tape->record_op({a}, out, [an, on, segments, n, m] {
      detail::ensure_grad(*on);
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < n; ++i) {
        const Real* src = on->grad.data() + static_cast<std::size_t>(segments[i]) * m;
        Real* dst = an->grad.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

/// Mean of rows per segment; empty segments produce zero rows.
template <typename Real>
Tensor<Real> segment_mean(Tape<Real>* tape, const Tensor<Real>& a,
                          const std::vector<int>& segments, std::size_t num_segments) {
  detail::check(a.rank() <= 2, "segment_mean: rank-1 or rank-2 tensor required");
  detail::check_finite(a, "segment_mean");
  const std::size_t n = a.rows(), m = a.cols();
  detail::check_segments<Real>(segments, n, num_segments, "segment_mean");
  std::vector<Real> counts(num_segments, Real(0));
  for (int s : segments) counts[static_cast<std::size_t>(s)] += Real(1);
  std::vector<Real> out_data(num_segments * m, Real(0));
  for (std::size_t i = 0; i < n; ++i) {
    Real* dst = out_data.data() + static_cast<std::size_t>(segments[i]) * m;
    const Real* src = a.data().data() + i * m;
    for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
  }
  for (std::size_t s = 0; s < num_segments; ++s) {
    if (counts[s] == Real(0)) continue;
    for (std::size_t j = 0; j < m; ++j) out_data[s * m + j] /= counts[s];
  }
  Tensor<Real> out = (a.rank() == 1) ? Tensor<Real>({num_segments}, std::move(out_data))
                                     : Tensor<Real>({num_segments, m}, std::move(out_data));
  if (detail::recording(tape, {&a})) {
    auto an = a.impl(), on = out.impl();
    tape->record_op({a}, out, [an, on, segments, counts, n, m] {
      detail::ensure_grad(*on);
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = static_cast<std::size_t>(segments[i]);
        const Real* src = on->grad.data() + s * m;
        Real* dst = an->grad.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) dst[j] += src[j] / counts[s];
      }
    });
  }
  return out;
}

/// Sum of all elements, returned as a single-element tensor.
template <typename Real>
Tensor<Real> sum_all(Tape<Real>* tape, const Tensor<Real>& a) {
  detail::check_finite(a, "sum_all");
  Real total = 0;
  for (Real v : a.data()) total += v;
  Tensor<Real> out = Tensor<Real>::scalar(total);
  if (detail::recording(tape, {&a})) {
    auto an = a.impl(), on = out.impl();
    tape->record_op({a}, out, [an, on] {
      detail::ensure_grad(*on);
      detail::ensure_grad(*an);
      const Real g = on->grad[0];
      for (Real& v : an->grad) v += g;
    });
  }
  return out;
}

/// Scale row i of a matrix by the constant weights[i]. No gradient flows to
/// the weights; they are per-row constants such as geometric factors.
template <typename Real>
Tensor<Real> row_scale(Tape<Real>* tape, const Tensor<Real>& a,
                       const std::vector<Real>& weights) {
  detail::check(a.rank() <= 2, "row_scale: rank-1 or rank-2 tensor required");
  detail::check(weights.size() == a.rows(), "row_scale: one weight per row required");
  detail::check_finite(a, "row_scale");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<Real> out_data(a.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out_data[i * m + j] = a.data()[i * m + j] * weights[i];
  Tensor<Real> out(a.shape(), std::move(out_data));
  if (detail::recording(tape, {&a})) {
    auto an = a.impl(), on = out.impl();
    tape->record_op({a}, out, [an, on, weights, n, m] {
      detail::ensure_grad(*on);
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += on->grad[i * m + j] * weights[i];
    });
  }
  return out;
}

/// Tile a single-row matrix into n identical rows.
template <typename Real>
Tensor<Real> repeat_row(Tape<Real>* tape, const Tensor<Real>& a, std::size_t n) {
  detail::check(a.rank() == 2 && a.rows() == 1, "repeat_row: single-row matrix required");
  std::vector<int> zeros(n, 0);
  return gather_rows(tape, a, zeros);
}

}  // namespace leignn::ops
