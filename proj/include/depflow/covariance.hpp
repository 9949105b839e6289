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

#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "depflow/common.hpp"
#include "depflow/matrix.hpp"

namespace depflow {

/// Structured model of the n x n latent covariance C. Implementations expose
/// the log-determinant, entries of A = C^{-1}, and the quadratic form
/// tr(U^T C^{-1} U) without materializing dense C unless the structure
/// demands it.
class CovarianceModel {
 public:
  virtual ~CovarianceModel() = default;

  virtual std::size_t size() const = 0;
  virtual double log_det() const = 0;
  virtual double inverse_entry(std::size_t i, std::size_t j) const = 0;
  virtual double trace_term(const DenseMatrix& u) const = 0;
  virtual std::string describe() const = 0;

  /// Fills w(a, b) = (C^{-1})_{idx[a], idx[b]} for a mini-batch.
  virtual void inverse_batch(const std::vector<std::size_t>& idx, DenseMatrix& w) const {
    const std::size_t b = idx.size();
    w = DenseMatrix(b, b);
    for (std::size_t a = 0; a < b; ++a) {
      w(a, a) = inverse_entry(idx[a], idx[a]);
      for (std::size_t c = a + 1; c < b; ++c) {
        const double v = inverse_entry(idx[a], idx[c]);
        w(a, c) = v;
        w(c, a) = v;
      }
    }
  }

 protected:
  void check_index(std::size_t i, std::size_t j) const {
    if (i >= size() || j >= size()) fail("inverse_entry: index (", i, ",", j, ") out of range for n=", size());
  }
  void check_rows(const DenseMatrix& u) const {
    if (u.rows() != size()) fail("trace_term: U has ", u.rows(), " rows, covariance is ", size(), "x", size());
  }
};

/// C = I_n; the independence baseline (lambda = 1 / rho = 0 limit).
class IdentityCov final : public CovarianceModel {
 public:
  explicit IdentityCov(std::size_t n) : n_(n) {}

  std::size_t size() const override { return n_; }
  double log_det() const override { return 0.0; }

  double inverse_entry(std::size_t i, std::size_t j) const override {
    check_index(i, j);
    return i == j ? 1.0 : 0.0;
  }

  double trace_term(const DenseMatrix& u) const override {
    check_rows(u);
    double s = 0.0;
    for (double x : u.storage()) s += x * x;
    return s;
  }

  void inverse_batch(const std::vector<std::size_t>& idx, DenseMatrix& w) const override {
    w = DenseMatrix::identity(idx.size());
  }

  std::string describe() const override { return "identity"; }

 private:
  std::size_t n_;
};

/// Spectral decomposition of a relationship matrix G, shared across all
/// lambda snapshots so G is decomposed exactly once.
struct Spectral {
  DenseMatrix q;               // orthogonal
  std::vector<double> values;  // eigenvalues of G, ascending, clipped to >= 0
};

/// C = lambda I + (1 - lambda) G with fixed G and a single mixing weight.
/// All operations run through the cached eigenpairs of G: the eigenvalues of
/// C are lambda + (1 - lambda) Lambda_i with the same eigenvectors.
class FixedMixture final : public CovarianceModel {
 public:
  static constexpr double kPsdTolerance = 1e-8;

  /// Sums the relatedness sources, verifies the sum is PSD within tolerance
  /// (small negative eigenvalues are clipped to zero), and decomposes it
  /// once. lambda = sigmoid(lambda_raw).
  static FixedMixture build(const std::vector<DenseMatrix>& parts, double lambda_raw) {
    return FixedMixture(decompose(sum_parts(parts)), sigmoid(lambda_raw), lambda_raw);
  }

  /// As build() but with lambda given directly; used by grid schedules and
  /// for pinning the model at exact independence (lambda = 1).
  static FixedMixture build_with_value(const std::vector<DenseMatrix>& parts, double lambda) {
    check_lambda(lambda);
    return FixedMixture(decompose(sum_parts(parts)), lambda, std::nullopt);
  }

  FixedMixture(std::shared_ptr<const Spectral> spectral, double lambda, std::optional<double> lambda_raw)
      : spectral_(std::move(spectral)), lambda_(lambda), lambda_raw_(lambda_raw) {
    check_lambda(lambda_);
  }

  /// New snapshot with a different raw parameter; shares the decomposition.
  FixedMixture with_lambda_raw(double lambda_raw) const {
    return FixedMixture(spectral_, sigmoid(lambda_raw), lambda_raw);
  }

  FixedMixture with_lambda(double lambda) const { return FixedMixture(spectral_, lambda, std::nullopt); }

  static std::shared_ptr<const Spectral> decompose(const DenseMatrix& g) {
    require_square(g, "FixedMixture");
    SymEig eig = sym_eig(g);
    if (!eig.values.empty() && eig.values.front() < -kPsdTolerance)
      fail("FixedMixture: G is not PSD (min eigenvalue ", eig.values.front(), ")");
    for (double& v : eig.values) v = std::max(v, 0.0);
    auto sp = std::make_shared<Spectral>();
    sp->q = std::move(eig.q);
    sp->values = std::move(eig.values);
    return sp;
  }

  double lambda() const { return lambda_; }
  std::optional<double> lambda_raw() const { return lambda_raw_; }
  const std::shared_ptr<const Spectral>& spectral() const { return spectral_; }

  /// Eigenvalue of C for eigenpair i: lambda + (1 - lambda) Lambda_i.
  double c_eigenvalue(std::size_t i) const { return lambda_ + (1.0 - lambda_) * spectral_->values[i]; }

  std::size_t size() const override { return spectral_->values.size(); }

  double log_det() const override {
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i) {
      const double d = c_eigenvalue(i);
      if (!(d > 0.0)) fail("FixedMixture::log_det: implied eigenvalue ", d, " at index ", i, " not positive");
      s += std::log(d);
    }
    return s;
  }

  double inverse_entry(std::size_t i, std::size_t j) const override {
    check_index(i, j);
    if (lambda_ == 1.0) return i == j ? 1.0 : 0.0;
    if (dense_inverse_) return (*dense_inverse_)(i, j);
    const DenseMatrix& q = spectral_->q;
    double s = 0.0;
    for (std::size_t k = 0; k < size(); ++k) s += q(i, k) * q(j, k) / c_eigenvalue(k);
    return s;
  }

  double trace_term(const DenseMatrix& u) const override {
    check_rows(u);
    if (lambda_ == 1.0) {
      double s = 0.0;
      for (double x : u.storage()) s += x * x;
      return s;
    }
    DenseMatrix rotated = rotate(u);
    double s = 0.0;
    for (std::size_t i = 0; i < rotated.rows(); ++i) {
      const double* r = rotated.row(i);
      double row = 0.0;
      for (std::size_t j = 0; j < rotated.cols(); ++j) row += r[j] * r[j];
      s += row / c_eigenvalue(i);
    }
    return s;
  }

  /// Q^T U, the rotated latent matrix.
  DenseMatrix rotate(const DenseMatrix& u) const {
    check_rows(u);
    return matmul_tn(spectral_->q, u);
  }

  /// Undoes rotate(): Q (Q^T U) = U.
  DenseMatrix unrotate(const DenseMatrix& u_rot) const { return matmul(spectral_->q, u_rot); }

  /// Materializes dense A = Q diag(1/d) Q^T once so mini-batch lookups become
  /// O(b^2) gathers. Worth it whenever more than a few batches share one
  /// lambda; n is capped by the caller's memory budget.
  void precompute_dense_inverse() {
    if (lambda_ == 1.0 || dense_inverse_) return;
    const std::size_t n = size();
    DenseMatrix m = spectral_->q;
    for (std::size_t k = 0; k < n; ++k) {
      const double scale = 1.0 / std::sqrt(c_eigenvalue(k));
      for (std::size_t i = 0; i < n; ++i) m(i, k) *= scale;
    }
    dense_inverse_ = std::make_shared<DenseMatrix>(gram(m));
  }

  bool has_dense_inverse() const { return dense_inverse_ != nullptr; }

  void inverse_batch(const std::vector<std::size_t>& idx, DenseMatrix& w) const override {
    const std::size_t b = idx.size();
    if (lambda_ == 1.0) {
      w = DenseMatrix::identity(b);
      return;
    }
    if (dense_inverse_) {
      w = DenseMatrix(b, b);
      for (std::size_t a = 0; a < b; ++a)
        for (std::size_t c = 0; c < b; ++c) w(a, c) = (*dense_inverse_)(idx[a], idx[c]);
      return;
    }
    // A[B,B] = M M^T with M = Q[B,:] diag(1/sqrt(d)).
    const std::size_t n = size();
    DenseMatrix m(b, n);
    for (std::size_t a = 0; a < b; ++a) {
      const double* qrow = spectral_->q.row(idx[a]);
      double* dst = m.row(a);
      for (std::size_t k = 0; k < n; ++k) dst[k] = qrow[k] / std::sqrt(c_eigenvalue(k));
    }
    w = gram(m);
  }

  std::string describe() const override { return detail::str("fixed-mixture(lambda=", lambda_, ")"); }

 private:
  static void check_lambda(double lambda) {
    if (!(lambda > 0.0 && lambda <= 1.0)) fail("FixedMixture: lambda ", lambda, " outside (0,1]");
  }

  static DenseMatrix sum_parts(const std::vector<DenseMatrix>& parts) {
    if (parts.empty()) fail("FixedMixture: need at least one relationship matrix");
    DenseMatrix g = parts.front();
    require_square(g, "FixedMixture");
    for (std::size_t p = 1; p < parts.size(); ++p) {
      if (!parts[p].same_shape(g)) fail("FixedMixture: relationship matrices differ in size");
      for (std::size_t i = 0; i < g.size(); ++i) g.storage()[i] += parts[p].storage()[i];
    }
    const double asym = max_asymmetry(g);
    if (asym > 1e-8) fail("FixedMixture: G asymmetric (relative asymmetry ", asym, ")");
    return g;
  }

  std::shared_ptr<const Spectral> spectral_;
  double lambda_;
  std::optional<double> lambda_raw_;
  std::shared_ptr<const DenseMatrix> dense_inverse_;
};

/// Observation-to-block assignment shared by all EquiBlocks snapshots.
struct BlockStructure {
  std::vector<std::size_t> assign;  // block id per observation
  std::vector<std::size_t> sizes;   // per block

  static std::shared_ptr<const BlockStructure> from_assignments(std::vector<std::size_t> assign) {
    auto bs = std::make_shared<BlockStructure>();
    bs->assign = std::move(assign);
    if (bs->assign.empty()) fail("BlockStructure: empty assignment");
    std::size_t n_blocks = 0;
    for (std::size_t id : bs->assign) n_blocks = std::max(n_blocks, id + 1);
    bs->sizes.assign(n_blocks, 0);
    for (std::size_t id : bs->assign) ++bs->sizes[id];
    for (std::size_t k = 0; k < n_blocks; ++k) {
      if (bs->sizes[k] == 0) fail("BlockStructure: block ids not contiguous, block ", k, " is empty");
    }
    return bs;
  }

  std::size_t n_obs() const { return assign.size(); }
  std::size_t n_blocks() const { return sizes.size(); }
};

/// Block-diagonal C with equicorrelated blocks: unit diagonal, constant
/// off-diagonal rho_i per block. Determinant and inverse come from the
/// closed forms
///   det(C_i) = (1 + (n_i - 1) rho)(1 - rho)^(n_i - 1)
///   (C_i^{-1})_{jj} = (1 + (n_i - 2) rho) / ((1 - rho)(1 + (n_i - 1) rho))
///   (C_i^{-1})_{jk} = -rho / ((1 - rho)(1 + (n_i - 1) rho)).
class EquiBlocks final : public CovarianceModel {
 public:
  /// Upper bound of the sigmoid parametrization; keeps 1 - rho away from 0
  /// so the closed-form inverses stay conditioned.
  static constexpr double kRhoMax = 0.995;

  static EquiBlocks from_raw(std::shared_ptr<const BlockStructure> blocks, std::vector<double> rho_raw) {
    if (rho_raw.size() != blocks->n_blocks()) fail("EquiBlocks: need one raw parameter per block");
    std::vector<double> rho(rho_raw.size());
    for (std::size_t k = 0; k < rho.size(); ++k) rho[k] = kRhoMax * sigmoid(rho_raw[k]);
    return EquiBlocks(std::move(blocks), std::move(rho));
  }

  static EquiBlocks from_value(std::shared_ptr<const BlockStructure> blocks, double shared_rho) {
    return EquiBlocks(std::move(blocks), {}, shared_rho);
  }

  static EquiBlocks from_values(std::shared_ptr<const BlockStructure> blocks, std::vector<double> rho) {
    if (rho.size() != blocks->n_blocks()) fail("EquiBlocks: need one rho per block");
    return EquiBlocks(std::move(blocks), std::move(rho));
  }

  EquiBlocks(std::shared_ptr<const BlockStructure> blocks, std::vector<double> rho,
             std::optional<double> shared_rho = std::nullopt)
      : blocks_(std::move(blocks)) {
    if (shared_rho) {
      rho_.assign(blocks_->n_blocks(), *shared_rho);
    } else {
      rho_ = std::move(rho);
    }
    for (double r : rho_) {
      if (!(r >= 0.0 && r < 1.0)) fail("EquiBlocks: rho ", r, " outside [0,1)");
    }
  }

  const std::shared_ptr<const BlockStructure>& blocks() const { return blocks_; }
  const std::vector<double>& rho() const { return rho_; }

  std::size_t size() const override { return blocks_->n_obs(); }

  double log_det() const override {
    double s = 0.0;
    for (std::size_t k = 0; k < rho_.size(); ++k) {
      const double m = static_cast<double>(blocks_->sizes[k]);
      const double head = 1.0 + (m - 1.0) * rho_[k];
      const double tail = 1.0 - rho_[k];
      if (!(head > 0.0) || !(tail > 0.0))
        fail("EquiBlocks::log_det: block ", k, " implies a non-positive eigenvalue");
      s += std::log(head) + (m - 1.0) * std::log(tail);
    }
    return s;
  }

  double diag_coef(std::size_t block) const {
    const double m = static_cast<double>(blocks_->sizes[block]);
    const double r = rho_[block];
    return (1.0 + (m - 2.0) * r) / ((1.0 - r) * (1.0 + (m - 1.0) * r));
  }

  double offdiag_coef(std::size_t block) const {
    const double m = static_cast<double>(blocks_->sizes[block]);
    const double r = rho_[block];
    return -r / ((1.0 - r) * (1.0 + (m - 1.0) * r));
  }

  double inverse_entry(std::size_t i, std::size_t j) const override {
    check_index(i, j);
    const std::size_t bi = blocks_->assign[i];
    if (bi != blocks_->assign[j]) return 0.0;
    return i == j ? diag_coef(bi) : offdiag_coef(bi);
  }

  double trace_term(const DenseMatrix& u) const override {
    check_rows(u);
    if (all_independent()) {
      double s = 0.0;
      for (double x : u.storage()) s += x * x;
      return s;
    }
    const std::size_t n_blocks = blocks_->n_blocks();
    const std::size_t p = u.cols();
    std::vector<double> sumsq(n_blocks, 0.0);
    DenseMatrix rowsum(n_blocks, p);
    for (std::size_t i = 0; i < u.rows(); ++i) {
      const std::size_t k = blocks_->assign[i];
      const double* r = u.row(i);
      double* acc = rowsum.row(k);
      double ss = 0.0;
      for (std::size_t j = 0; j < p; ++j) {
        ss += r[j] * r[j];
        acc[j] += r[j];
      }
      sumsq[k] += ss;
    }
    double total = 0.0;
    for (std::size_t k = 0; k < n_blocks; ++k) {
      const double* acc = rowsum.row(k);
      double normsq = 0.0;
      for (std::size_t j = 0; j < p; ++j) normsq += acc[j] * acc[j];
      total += diag_coef(k) * sumsq[k] + offdiag_coef(k) * (normsq - sumsq[k]);
    }
    return total;
  }

  void inverse_batch(const std::vector<std::size_t>& idx, DenseMatrix& w) const override {
    const std::size_t b = idx.size();
    w = DenseMatrix(b, b);
    for (std::size_t a = 0; a < b; ++a) {
      const std::size_t ba = blocks_->assign[idx[a]];
      w(a, a) = diag_coef(ba);
      for (std::size_t c = a + 1; c < b; ++c) {
        if (blocks_->assign[idx[c]] != ba) continue;
        const double v = offdiag_coef(ba);
        w(a, c) = v;
        w(c, a) = v;
      }
    }
  }

  std::string describe() const override { return detail::str("equi-blocks(", blocks_->n_blocks(), " blocks)"); }

 private:
  bool all_independent() const {
    for (double r : rho_) {
      if (r != 0.0) return false;
    }
    return true;
  }

  std::shared_ptr<const BlockStructure> blocks_;
  std::vector<double> rho_;
};

/// Fully parametrized covariance through the lower-triangular factor M of
/// its inverse, A = C^{-1} = M M^T. O(n^2) parameters; supported only at
/// small n and excluded from mini-batch training.
class FullCholesky final : public CovarianceModel {
 public:
  static constexpr std::size_t kMaxSize = 500;

  explicit FullCholesky(DenseMatrix inverse_factor) : factor_(std::move(inverse_factor)) {
    require_square(factor_, "FullCholesky");
    if (factor_.rows() > kMaxSize)
      fail("FullCholesky: n=", factor_.rows(), " exceeds the supported maximum ", kMaxSize);
    for (std::size_t i = 0; i < factor_.rows(); ++i) {
      if (!(factor_(i, i) > 0.0)) fail("FullCholesky: diagonal entry ", i, " = ", factor_(i, i), " not positive");
      for (std::size_t j = i + 1; j < factor_.cols(); ++j) {
        if (factor_(i, j) != 0.0) fail("FullCholesky: factor must be lower triangular");
      }
    }
  }

  const DenseMatrix& inverse_factor() const { return factor_; }

  std::size_t size() const override { return factor_.rows(); }

  double log_det() const override {
    double s = 0.0;
    for (std::size_t i = 0; i < factor_.rows(); ++i) s += std::log(factor_(i, i));
    return -2.0 * s;
  }

  double inverse_entry(std::size_t i, std::size_t j) const override {
    check_index(i, j);
    const double* ri = factor_.row(i);
    const double* rj = factor_.row(j);
    const std::size_t upto = std::min(i, j) + 1;
    double s = 0.0;
    for (std::size_t k = 0; k < upto; ++k) s += ri[k] * rj[k];
    return s;
  }

  double trace_term(const DenseMatrix& u) const override {
    check_rows(u);
    DenseMatrix v = matmul_tn(factor_, u);  // M^T U
    double s = 0.0;
    for (double x : v.storage()) s += x * x;
    return s;
  }

  std::string describe() const override { return detail::str("full-cholesky(n=", factor_.rows(), ")"); }

 private:
  DenseMatrix factor_;
};

// ---------------------------------------------------------------------------
// Kernel constructors and matrix file I/O
// ---------------------------------------------------------------------------

/// Gaussian time-decay relationship: G_ij = exp(-gamma (t_i - t_j)^2).
inline DenseMatrix time_decay_kernel(const std::vector<double>& times, double gamma) {
  if (!(gamma > 0.0)) fail("time_decay_kernel: gamma must be positive, got ", gamma);
  const std::size_t n = times.size();
  DenseMatrix g(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    g(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = times[i] - times[j];
      const double v = std::exp(-gamma * d * d);
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

/// D^{-1/2} M D^{-1/2} with D = diag(M); unit diagonal by construction.
inline DenseMatrix normalize_to_correlation(const DenseMatrix& m) {
  require_square(m, "normalize_to_correlation");
  const std::size_t n = m.rows();
  std::vector<double> inv_root(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(m(i, i) > 0.0)) fail("normalize_to_correlation: diagonal entry ", i, " = ", m(i, i), " not positive");
    inv_root[i] = 1.0 / std::sqrt(m(i, i));
  }
  DenseMatrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) = m(i, j) * inv_root[i] * inv_root[j];
    out(i, i) = 1.0;
  }
  return out;
}

/// Binary matrix file: magic "DFM1", two uint64 dims, row-major doubles.
inline void save_matrix_binary(const DenseMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("save_matrix_binary: cannot open ", path);
  out.write("DFM1", 4);
  const std::uint64_t dims[2] = {m.rows(), m.cols()};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

inline DenseMatrix load_matrix_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("load_matrix_binary: cannot open ", path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "DFM1") fail("load_matrix_binary: ", path, " is not a matrix file");
  std::uint64_t dims[2];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  DenseMatrix m(dims[0], dims[1]);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) fail("load_matrix_binary: ", path, " truncated");
  return m;
}

inline void save_matrix_csv(const DenseMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("save_matrix_csv: cannot open ", path);
  out.precision(17);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
}

inline DenseMatrix load_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_matrix_csv: cannot open ", path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (start <= line.size()) {
      const std::size_t comma = line.find(',', start);
      const std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail("load_matrix_csv: bad number '", cell, "' in ", path);
      }
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size()) fail("load_matrix_csv: ragged rows in ", path);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) fail("load_matrix_csv: ", path, " is empty");
  DenseMatrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
  return m;
}

/// Relationship matrix loader dispatching on the file extension.
inline DenseMatrix load_matrix(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") return load_matrix_csv(path);
  return load_matrix_binary(path);
}

/// Block assignment file: one integer block id per line.
inline std::vector<std::size_t> load_block_ids(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_block_ids: cannot open ", path);
  std::vector<std::size_t> ids;
  long long v;
  while (in >> v) {
    if (v < 0) fail("load_block_ids: negative block id ", v, " in ", path);
    ids.push_back(static_cast<std::size_t>(v));
  }
  if (ids.empty()) fail("load_block_ids: ", path, " is empty");
  return ids;
}

inline void save_block_ids(const std::vector<std::size_t>& ids, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("save_block_ids: cannot open ", path);
  for (std::size_t id : ids) out << id << '\n';
}

}  // namespace depflow
