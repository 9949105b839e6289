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

// Test-only oracles, independent of the library's own linear algebra:
// dense reference computations go through Eigen, stochastics through
// brute-force enumeration and empirical statistics.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <vector>

#include "depflow/covariance.hpp"
#include "depflow/matrix.hpp"
#include "depflow/rng.hpp"

namespace oracle {

inline Eigen::MatrixXd to_eigen(const depflow::DenseMatrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

inline depflow::DenseMatrix from_eigen(const Eigen::MatrixXd& e) {
  depflow::DenseMatrix m(e.rows(), e.cols());
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index j = 0; j < e.cols(); ++j) m(i, j) = e(i, j);
  return m;
}

/// Dense C materialized from any structured covariance model.
inline Eigen::MatrixXd dense_covariance(const depflow::CovarianceModel& cov) {
  const std::size_t n = cov.size();
  Eigen::MatrixXd a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = cov.inverse_entry(i, j);
  return a.inverse();
}

inline double dense_log_det(const Eigen::MatrixXd& m) {
  return std::log(m.determinant());
}

/// log det via LDLT for better conditioning on larger matrices.
inline double dense_log_det_spd(const Eigen::MatrixXd& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  double s = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) s += std::log(llt.matrixL()(i, i));
  return 2.0 * s;
}

/// tr(U^T C^{-1} U) computed densely.
inline double dense_trace_term(const Eigen::MatrixXd& c, const depflow::DenseMatrix& u) {
  const Eigen::MatrixXd ue = to_eigen(u);
  return (ue.transpose() * c.inverse() * ue).trace();
}

/// Log density of vec(U) under N(0, I_p kron C); columns of U are stacked,
/// which makes the Kronecker covariance block diagonal with p copies of C.
inline double kronecker_mvn_logpdf(const Eigen::MatrixXd& c, const depflow::DenseMatrix& u) {
  const std::size_t n = u.rows(), p = u.cols();
  const Eigen::MatrixXd ue = to_eigen(u);
  const Eigen::LLT<Eigen::MatrixXd> llt(c);
  double quad = 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    const Eigen::VectorXd col = ue.col(j);
    quad += col.dot(llt.solve(col));
  }
  const double logdet_c = dense_log_det_spd(c);
  const double np = static_cast<double>(n * p);
  return -0.5 * np * depflow::kLogTwoPi - 0.5 * static_cast<double>(p) * logdet_c - 0.5 * quad;
}

/// Random symmetric positive-definite matrix with eigenvalues in [0.5, ~2].
inline depflow::DenseMatrix random_spd(std::size_t n, depflow::Rng& rng) {
  depflow::DenseMatrix b = rng.normal_matrix(n, n);
  Eigen::MatrixXd be = to_eigen(b);
  Eigen::MatrixXd spd = be * be.transpose() / static_cast<double>(n) + 0.5 * Eigen::MatrixXd::Identity(n, n);
  return from_eigen(spd);
}

inline depflow::DenseMatrix random_symmetric(std::size_t n, depflow::Rng& rng) {
  depflow::DenseMatrix m = rng.normal_matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m(j, i) = m(i, j);
  return m;
}

/// Enumerates every size-b subset of {0..n-1} and feeds it to `visit`.
inline void for_each_subset(std::size_t n, std::size_t b,
                            const std::function<void(const std::vector<std::size_t>&)>& visit) {
  std::vector<std::size_t> idx(b);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t start, std::size_t depth) {
    if (depth == b) {
      visit(idx);
      return;
    }
    for (std::size_t i = start; i + (b - depth) <= n; ++i) {
      idx[depth] = i;
      rec(i + 1, depth + 1);
    }
  };
  rec(0, 0);
}

/// Two-sided Kolmogorov-Smirnov statistic of samples against a CDF.
inline double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf(samples[i]);
    worst = std::max(worst, std::abs(f - static_cast<double>(i) / n));
    worst = std::max(worst, std::abs(static_cast<double>(i + 1) / n - f));
  }
  return worst;
}

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Central finite difference of a scalar function.
inline double central_difference(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// Relative error with a floor that keeps near-zero comparisons meaningful.
inline double rel_err(double got, double want, double floor_scale = 1e-9) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), floor_scale});
}

}  // namespace oracle
