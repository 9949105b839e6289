// Copyright 2025 The depflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <numeric>
#include <utility>
#include <vector>

#include "depflow/common.hpp"

namespace depflow {

/// Dense row-major matrix of 64-bit floats. The one storage type shared by
/// every module; vectors are represented as 1xN or Nx1 matrices.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix from_rows(std::size_t rows, std::size_t cols,
                               std::initializer_list<double> values) {
    if (values.size() != rows * cols) fail("from_rows: need ", rows * cols, " values, got ", values.size());
    DenseMatrix m(rows, cols);
    std::copy(values.begin(), values.end(), m.data_.begin());
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double* row(std::size_t i) { return data_.data() + i * cols_; }
  const double* row(std::size_t i) const { return data_.data() + i * cols_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  const std::vector<double>& storage() const { return data_; }
  std::vector<double>& storage() { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool operator==(const DenseMatrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double max_abs(const DenseMatrix& m) {
  double v = 0.0;
  for (double x : m.storage()) v = std::max(v, std::abs(x));
  return v;
}

inline double frobenius_norm(const DenseMatrix& m) {
  double s = 0.0;
  for (double x : m.storage()) s += x * x;
  return std::sqrt(s);
}

inline bool all_finite(const DenseMatrix& m) {
  for (double x : m.storage()) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline DenseMatrix transpose(const DenseMatrix& m) {
  DenseMatrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Multiplication kernels. Inner loops run over contiguous rows so the
// compiler can vectorize them; these carry the training hot path.
// ---------------------------------------------------------------------------

/// C += A * B.
inline void matmul_acc(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& c) {
  if (a.cols() != b.rows() || c.rows() != a.rows() || c.cols() != b.cols())
    fail("matmul: shape mismatch (", a.rows(), "x", a.cols(), ") * (", b.rows(), "x", b.cols(), ")");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.row(i);
    const double* ai = a.row(i);
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      if (av == 0.0) continue;
      const double* bl = b.row(l);
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix c(a.rows(), b.cols());
  matmul_acc(a, b, c);
  return c;
}

/// C += A * B^T (rows of both operands are contiguous).
inline void matmul_nt_acc(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& c) {
  if (a.cols() != b.cols() || c.rows() != a.rows() || c.cols() != b.rows())
    fail("matmul_nt: shape mismatch");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += ai[l] * bj[l];
      ci[j] += s;
    }
  }
}

inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix c(a.rows(), b.rows());
  matmul_nt_acc(a, b, c);
  return c;
}

/// C += A^T * B via rank-1 updates.
inline void matmul_tn_acc(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& c) {
  if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols())
    fail("matmul_tn: shape mismatch");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t l = 0; l < k; ++l) {
    const double* al = a.row(l);
    const double* bl = b.row(l);
    for (std::size_t i = 0; i < m; ++i) {
      const double av = al[i];
      if (av == 0.0) continue;
      double* ci = c.row(i);
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix c(a.cols(), b.cols());
  matmul_tn_acc(a, b, c);
  return c;
}

/// A * A^T computed on the lower triangle and mirrored.
inline DenseMatrix gram(const DenseMatrix& a) {
  const std::size_t n = a.rows(), k = a.cols();
  DenseMatrix c(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a.row(i);
    for (std::size_t j = 0; j <= i; ++j) {
      const double* aj = a.row(j);
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += ai[l] * aj[l];
      c(i, j) = s;
      c(j, i) = s;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Symmetry helpers
// ---------------------------------------------------------------------------

inline double max_asymmetry(const DenseMatrix& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = i + 1; j < m.cols(); ++j) {
      const double d = std::abs(m(i, j) - m(j, i)) / std::max(1.0, std::abs(m(i, j)));
      worst = std::max(worst, d);
    }
  }
  return worst;
}

inline void require_square(const DenseMatrix& m, const char* who) {
  if (m.rows() != m.cols()) fail(who, ": matrix is ", m.rows(), "x", m.cols(), ", expected square");
}

// ---------------------------------------------------------------------------
// Cholesky
// ---------------------------------------------------------------------------

/// Lower-triangular L with L L^T = M for symmetric positive-definite M.
/// Throws naming the failing pivot when a non-positive pivot is met.
inline DenseMatrix cholesky(const DenseMatrix& m) {
  require_square(m, "cholesky");
  const std::size_t n = m.rows();
  DenseMatrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j);
    const double* lj = l.row(j);
    for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
    if (!(d > 0.0)) fail("cholesky: not positive definite (pivot ", j, " = ", d, ")");
    const double root = std::sqrt(d);
    l(j, j) = root;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      const double* li = l.row(i);
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      l(i, j) = s / root;
    }
  }
  return l;
}

/// Solves L x = b with L lower triangular (in place on a copy of b).
inline std::vector<double> solve_lower(const DenseMatrix& l, std::vector<double> b) {
  const std::size_t n = l.rows();
  if (b.size() != n) fail("solve_lower: size mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    const double* li = l.row(i);
    for (std::size_t k = 0; k < i; ++k) s -= li[k] * b[k];
    b[i] = s / li[i];
  }
  return b;
}

/// Solves L^T x = b with L lower triangular.
inline std::vector<double> solve_lower_transposed(const DenseMatrix& l, std::vector<double> b) {
  const std::size_t n = l.rows();
  if (b.size() != n) fail("solve_lower_transposed: size mismatch");
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * b[k];
    b[ii] = s / l(ii, ii);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition
// ---------------------------------------------------------------------------

/// Counts spectral decompositions; lets tests assert that covariance
/// snapshots reuse a cached decomposition instead of recomputing it.
inline std::atomic<std::uint64_t>& sym_eig_call_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

struct SymEig {
  DenseMatrix q;               // orthogonal, columns are eigenvectors
  std::vector<double> values;  // ascending
};

namespace detail {

// Cyclic Jacobi sweeps. Simple and very accurate; O(n^3) per sweep with a
// large constant, so reserved for small matrices.
inline void jacobi_eig(DenseMatrix a, DenseMatrix& q, std::vector<double>& w) {
  const std::size_t n = a.rows();
  q = DenseMatrix::identity(n);
  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double offsq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) offsq += a(i, j) * a(i, j);
    if (std::sqrt(2.0 * offsq) <= 1e-14 * std::max(1e-300, frobenius_norm(a))) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t r = p + 1; r < n; ++r) {
        const double apr = a(p, r);
        if (std::abs(apr) <= 1e-300) {
          a(p, r) = 0.0;
          a(r, p) = 0.0;
          continue;
        }
        const double app = a(p, p), arr = a(r, r);
        const double tau = (arr - app) / (2.0 * apr);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akr = a(k, r);
          a(k, p) = c * akp - s * akr;
          a(k, r) = s * akp + c * akr;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), ark = a(r, k);
          a(p, k) = c * apk - s * ark;
          a(r, k) = s * apk + c * ark;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double qkp = q(k, p), qkr = q(k, r);
          q(k, p) = c * qkp - s * qkr;
          q(k, r) = s * qkp + c * qkr;
        }
      }
    }
  }
  w.resize(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = a(i, i);
}

// Householder reduction to tridiagonal form with accumulated transform.
// z holds the symmetric input on entry and the accumulated orthogonal
// matrix (rows = eigenvector candidates, i.e. Q^T) on exit.
inline void tridiagonalize(DenseMatrix& z, std::vector<double>& diag, std::vector<double>& sub) {
  const std::size_t n = z.rows();
  diag.assign(n, 0.0);
  sub.assign(n, 0.0);
  for (std::size_t ii = n - 1; ii > 0; --ii) {
    const std::size_t l = ii - 1;
    double h = 0.0;
    if (l > 0) {
      double scale = 0.0;
      for (std::size_t k = 0; k <= l; ++k) scale += std::abs(z(ii, k));
      if (scale == 0.0) {
        sub[ii] = z(ii, l);
      } else {
        for (std::size_t k = 0; k <= l; ++k) {
          z(ii, k) /= scale;
          h += z(ii, k) * z(ii, k);
        }
        double f = z(ii, l);
        double g = f >= 0.0 ? -std::sqrt(h) : std::sqrt(h);
        sub[ii] = scale * g;
        h -= f * g;
        z(ii, l) = f - g;
        f = 0.0;
        for (std::size_t j = 0; j <= l; ++j) {
          z(j, ii) = z(ii, j) / h;
          g = 0.0;
          for (std::size_t k = 0; k <= j; ++k) g += z(j, k) * z(ii, k);
          for (std::size_t k = j + 1; k <= l; ++k) g += z(k, j) * z(ii, k);
          sub[j] = g / h;
          f += sub[j] * z(ii, j);
        }
        const double hh = f / (h + h);
        for (std::size_t j = 0; j <= l; ++j) {
          f = z(ii, j);
          sub[j] = g = sub[j] - hh * f;
          for (std::size_t k = 0; k <= j; ++k) z(j, k) -= f * sub[k] + g * z(ii, k);
        }
      }
    } else {
      sub[ii] = z(ii, l);
    }
    diag[ii] = h;
  }
  diag[0] = 0.0;
  sub[0] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (diag[i] != 0.0) {
      for (std::size_t j = 0; j < i; ++j) {
        double g = 0.0;
        for (std::size_t k = 0; k < i; ++k) g += z(i, k) * z(k, j);
        for (std::size_t k = 0; k < i; ++k) z(k, j) -= g * z(k, i);
      }
    }
    diag[i] = z(i, i);
    z(i, i) = 1.0;
    for (std::size_t j = 0; j < i; ++j) {
      z(j, i) = 0.0;
      z(i, j) = 0.0;
    }
  }
}

inline double hypot2(double a, double b) { return std::sqrt(a * a + b * b); }

// Implicit-shift QL on the tridiagonal (diag, sub), rotations applied to the
// rows of z so the inner loops stay contiguous. z rows end up holding Q^T.
inline void tridiag_ql(std::vector<double>& diag, std::vector<double>& sub, DenseMatrix& z) {
  const std::size_t n = diag.size();
  if (n <= 1) return;
  for (std::size_t i = 1; i < n; ++i) sub[i - 1] = sub[i];
  sub[n - 1] = 0.0;
  // Deflation threshold is relative to the global tridiagonal scale; local
  // tests stall on clusters of near-zero eigenvalues because the rotation
  // chains inject roundoff at the scale of the largest diagonal entries.
  constexpr double kEps = 2.220446049250313e-16;
  double scale = 0.0;
  for (std::size_t l = 0; l < n; ++l) scale = std::max(scale, std::abs(diag[l]) + std::abs(sub[l]));
  const double threshold = std::max(kEps * scale, 1e-300);
  for (std::size_t l = 0; l < n; ++l) {
    int iter = 0;
    std::size_t m;
    do {
      for (m = l; m + 1 < n; ++m) {
        if (std::abs(sub[m]) <= threshold) break;
      }
      if (m != l) {
        if (++iter == 60) fail("sym_eig: QL iteration failed to converge at eigenvalue ", l);
        double g = (diag[l + 1] - diag[l]) / (2.0 * sub[l]);
        double r = hypot2(g, 1.0);
        g = diag[m] - diag[l] + sub[l] / (g + (g >= 0.0 ? std::abs(r) : -std::abs(r)));
        double s = 1.0, c = 1.0, p = 0.0;
        bool underflow = false;
        for (std::size_t ii = m; ii-- > l;) {
          double f = s * sub[ii];
          const double b = c * sub[ii];
          r = hypot2(f, g);
          sub[ii + 1] = r;
          if (r == 0.0) {
            diag[ii + 1] -= p;
            sub[m] = 0.0;
            underflow = true;
            break;
          }
          s = f / r;
          c = g / r;
          g = diag[ii + 1] - p;
          r = (diag[ii] - g) * s + 2.0 * c * b;
          p = s * r;
          diag[ii + 1] = g + p;
          g = c * r - b;
          double* zi = z.row(ii);
          double* zi1 = z.row(ii + 1);
          const std::size_t cols = z.cols();
          for (std::size_t k = 0; k < cols; ++k) {
            f = zi1[k];
            zi1[k] = s * zi[k] + c * f;
            zi[k] = c * zi[k] - s * f;
          }
        }
        if (underflow) continue;
        diag[l] -= p;
        sub[l] = g;
        sub[m] = 0.0;
      }
    } while (m != l);
  }
}

}  // namespace detail

inline constexpr std::size_t kJacobiMaxSize = 128;

/// Spectral decomposition M = Q diag(values) Q^T of a symmetric matrix,
/// eigenvalues ascending. Cyclic Jacobi below kJacobiMaxSize, Householder
/// tridiagonalization plus implicit-shift QL above it. Both O(n^3); the QL
/// path keeps the constant small enough for n in the few-thousands range.
inline SymEig sym_eig(const DenseMatrix& m) {
  require_square(m, "sym_eig");
  const std::size_t n = m.rows();
  if (n == 0) fail("sym_eig: empty matrix");
  const double asym = max_asymmetry(m);
  if (asym > 1e-8) fail("sym_eig: input asymmetric (relative asymmetry ", asym, ")");
  sym_eig_call_count().fetch_add(1, std::memory_order_relaxed);

  // Work on the symmetrized input so tiny asymmetries cannot bias results.
  DenseMatrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (m(i, j) + m(j, i));

  SymEig out;
  std::vector<double> w;
  if (n <= kJacobiMaxSize) {
    detail::jacobi_eig(std::move(a), out.q, w);
  } else {
    std::vector<double> sub;
    detail::tridiagonalize(a, w, sub);
    DenseMatrix zt = transpose(a);  // rows of zt are eigenvector candidates
    detail::tridiag_ql(w, sub, zt);
    out.q = transpose(zt);
  }

  // Sort ascending, permuting eigenvector columns alongside.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return w[i] < w[j]; });
  SymEig sorted;
  sorted.values.resize(n);
  sorted.q = DenseMatrix(n, n);
  for (std::size_t jj = 0; jj < n; ++jj) {
    sorted.values[jj] = w[order[jj]];
    for (std::size_t i = 0; i < n; ++i) sorted.q(i, jj) = out.q(i, order[jj]);
  }
  return sorted;
}

}  // namespace depflow
