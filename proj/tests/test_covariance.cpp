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

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "depflow/covariance.hpp"
#include "depflow/data.hpp"
#include "depflow/rng.hpp"
#include "support/oracles.hpp"

using depflow::BlockStructure;
using depflow::DenseMatrix;
using depflow::EquiBlocks;
using depflow::FixedMixture;
using depflow::IdentityCov;
using depflow::Rng;

namespace {

std::shared_ptr<const BlockStructure> blocks_of(const std::vector<std::size_t>& sizes) {
  return BlockStructure::from_assignments(depflow::expand_block_ids(sizes));
}

/// Dense C materialized straight from the structure definition.
Eigen::MatrixXd dense_equi(const std::vector<std::size_t>& sizes, const std::vector<double>& rho) {
  std::size_t n = 0;
  for (std::size_t s : sizes) n += s;
  Eigen::MatrixXd c = Eigen::MatrixXd::Identity(n, n);
  std::size_t at = 0;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    for (std::size_t i = 0; i < sizes[k]; ++i)
      for (std::size_t j = 0; j < sizes[k]; ++j)
        if (i != j) c(at + i, at + j) = rho[k];
    at += sizes[k];
  }
  return c;
}

Eigen::MatrixXd dense_mixture(const DenseMatrix& g, double lambda) {
  const Eigen::MatrixXd ge = oracle::to_eigen(g);
  return lambda * Eigen::MatrixXd::Identity(g.rows(), g.rows()) + (1.0 - lambda) * ge;
}

DenseMatrix random_relationship(std::size_t n, Rng& rng) {
  // PSD with unit diagonal, like an empirical kinship estimate.
  DenseMatrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) l(i, j) = rng.uniform(-0.4, 0.9);
    l(i, i) = 1.0;
  }
  return depflow::normalize_to_correlation(depflow::gram(l));
}

}  // namespace

TEST_CASE("build_fixed_mixture worked examples", "[covariance]") {
  SECTION("G = I makes every operation the identity") {
    const FixedMixture cov = FixedMixture::build({DenseMatrix::identity(3)}, 0.3);
    REQUIRE(cov.log_det() == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(cov.inverse_entry(0, 0) == Catch::Approx(1.0));
    REQUIRE(cov.inverse_entry(0, 1) == Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("G = [[1,1],[1,1]], lambda = 0.5 -> C = [[1,0.5],[0.5,1]]") {
    const DenseMatrix g = DenseMatrix::from_rows(2, 2, {1, 1, 1, 1});
    const FixedMixture cov = FixedMixture::build_with_value({g}, 0.5);
    const Eigen::MatrixXd c = oracle::dense_covariance(cov);
    REQUIRE(c(0, 0) == Catch::Approx(1.0));
    REQUIRE(c(0, 1) == Catch::Approx(0.5));
    // Dense determinant oracle: det [[1,.5],[.5,1]] = 0.75.
    REQUIRE(cov.log_det() == Catch::Approx(std::log(0.75)));
  }

  SECTION("two relatedness sources sum") {
    const DenseMatrix part1 = DenseMatrix::identity(2);
    const DenseMatrix part2 = DenseMatrix::from_rows(2, 2, {0, 0.3, 0.3, 0});
    const FixedMixture cov = FixedMixture::build_with_value({part1, part2}, 0.5);
    // C = 0.5 I + 0.5 G with G = [[1,.3],[.3,1]].
    const Eigen::MatrixXd c = oracle::dense_covariance(cov);
    REQUIRE(c(0, 1) == Catch::Approx(0.15));
  }

  SECTION("non-PSD sum is rejected with the minimum eigenvalue") {
    const DenseMatrix bad = DenseMatrix::from_rows(2, 2, {1, 2, 2, 1});
    REQUIRE_THROWS_WITH(FixedMixture::build({bad}, 0.0),
                        Catch::Matchers::ContainsSubstring("not PSD") &&
                            Catch::Matchers::ContainsSubstring("-1"));
  }

  SECTION("lambda = sigmoid(lambda_raw)") {
    const FixedMixture cov = FixedMixture::build({DenseMatrix::identity(2)}, 0.0);
    REQUIRE(cov.lambda() == Catch::Approx(0.5));
  }
}

TEST_CASE("log_det worked examples", "[covariance]") {
  SECTION("lambda = 1 gives exactly zero for any G") {
    Rng rng(5);
    const FixedMixture cov = FixedMixture::build_with_value({random_relationship(6, rng)}, 1.0);
    REQUIRE(cov.log_det() == 0.0);
  }

  SECTION("equicorrelated pair at rho = 0.5: log det [[1,.5],[.5,1]] = log 0.75") {
    const EquiBlocks cov = EquiBlocks::from_value(blocks_of({2}), 0.5);
    REQUIRE(cov.log_det() == Catch::Approx(std::log(0.75)));
  }
}

TEST_CASE("inverse_entry worked examples", "[covariance]") {
  SECTION("rho = 0 gives identity entries") {
    const EquiBlocks cov = EquiBlocks::from_value(blocks_of({3, 2}), 0.0);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) REQUIRE(cov.inverse_entry(i, j) == (i == j ? 1.0 : 0.0));
  }

  SECTION("block of 2 at rho = 0.5: diagonal 4/3, off-diagonal -2/3") {
    const EquiBlocks cov = EquiBlocks::from_value(blocks_of({2}), 0.5);
    REQUIRE(cov.inverse_entry(0, 0) == Catch::Approx(4.0 / 3.0));
    REQUIRE(cov.inverse_entry(0, 1) == Catch::Approx(-2.0 / 3.0));
  }

  SECTION("random 5x5 mixture matches the dense inverse") {
    Rng rng(9);
    const DenseMatrix g = random_relationship(5, rng);
    const FixedMixture cov = FixedMixture::build_with_value({g}, 0.35);
    const Eigen::MatrixXd dense_inv = dense_mixture(g, 0.35).inverse();
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j)
        REQUIRE(cov.inverse_entry(i, j) == Catch::Approx(dense_inv(i, j)).margin(1e-10));
  }

  SECTION("index out of range") {
    const EquiBlocks cov = EquiBlocks::from_value(blocks_of({2}), 0.1);
    REQUIRE_THROWS_AS(cov.inverse_entry(2, 0), depflow::Error);
  }
}

TEST_CASE("trace_term worked examples", "[covariance]") {
  Rng rng(13);

  SECTION("identity covariance reduces to the squared norm") {
    const IdentityCov cov(4);
    const DenseMatrix u = rng.normal_matrix(4, 2);
    double want = 0.0;
    for (double x : u.storage()) want += x * x;
    REQUIRE(cov.trace_term(u) == Catch::Approx(want));
  }

  SECTION("n=2 p=1 quadratic form against the dense inverse") {
    const EquiBlocks cov = EquiBlocks::from_value(blocks_of({2}), 0.5);
    DenseMatrix u(2, 1);
    u(0, 0) = 1.0;
    u(1, 0) = 2.0;
    // A = [[4/3,-2/3],[-2/3,4/3]]; u^T A u = 4/3(1+4) - 2*2/3*2*... computed densely:
    const Eigen::MatrixXd c = dense_equi({2}, {0.5});
    REQUIRE(cov.trace_term(u) == Catch::Approx(oracle::dense_trace_term(c, u)).margin(1e-12));
  }

  SECTION("block of 3 at rho = 0.3 random U matches the dense computation") {
    const EquiBlocks cov = EquiBlocks::from_value(blocks_of({3}), 0.3);
    const DenseMatrix u = rng.normal_matrix(3, 2);
    const Eigen::MatrixXd c = dense_equi({3}, {0.3});
    REQUIRE(oracle::rel_err(cov.trace_term(u), oracle::dense_trace_term(c, u)) < 1e-10);
  }

  SECTION("shape mismatch") {
    const IdentityCov cov(4);
    REQUIRE_THROWS_AS(cov.trace_term(DenseMatrix(3, 2)), depflow::Error);
  }
}

TEST_CASE("rotate worked examples", "[covariance]") {
  Rng rng(17);

  SECTION("diagonal G rotates by a signed permutation") {
    DenseMatrix g(3, 3);
    g(0, 0) = 0.9;
    g(1, 1) = 0.1;
    g(2, 2) = 0.5;
    const FixedMixture cov = FixedMixture::build_with_value({g}, 0.5);
    const DenseMatrix& q = cov.spectral()->q;
    for (std::size_t j = 0; j < 3; ++j) {
      std::size_t nonzero = 0;
      for (std::size_t i = 0; i < 3; ++i) {
        if (std::abs(q(i, j)) > 1e-9) {
          ++nonzero;
          REQUIRE(std::abs(q(i, j)) == Catch::Approx(1.0));
        }
      }
      REQUIRE(nonzero == 1);
    }
  }

  SECTION("rotation preserves the Frobenius norm and inverts") {
    const DenseMatrix g = random_relationship(10, rng);
    const FixedMixture cov = FixedMixture::build_with_value({g}, 0.7);
    const DenseMatrix u = rng.normal_matrix(10, 2);
    const DenseMatrix rotated = cov.rotate(u);
    REQUIRE(depflow::frobenius_norm(rotated) == Catch::Approx(depflow::frobenius_norm(u)).margin(1e-10));
    const DenseMatrix back = cov.unrotate(rotated);
    REQUIRE((oracle::to_eigen(back) - oracle::to_eigen(u)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("time_decay_kernel", "[covariance]") {
  SECTION("unit diagonal and the hand value exp(-1)") {
    const DenseMatrix g = depflow::time_decay_kernel({0.0, 1.0}, 1.0);
    REQUIRE(g(0, 0) == 1.0);
    REQUIRE(g(1, 1) == 1.0);
    REQUIRE(g(0, 1) == Catch::Approx(std::exp(-1.0)));
  }

  SECTION("PSD on random time points") {
    Rng rng(23);
    std::vector<double> times(20);
    for (double& t : times) t = rng.uniform(0.0, 10.0);
    const DenseMatrix g = depflow::time_decay_kernel(times, 0.7);
    const depflow::SymEig eig = depflow::sym_eig(g);
    REQUIRE(eig.values.front() >= -1e-10);
  }

  SECTION("gamma must be positive") {
    REQUIRE_THROWS_AS(depflow::time_decay_kernel({0.0}, 0.0), depflow::Error);
  }
}

TEST_CASE("normalize_to_correlation", "[covariance]") {
  SECTION("idempotent on a correlation matrix") {
    const DenseMatrix c = DenseMatrix::from_rows(2, 2, {1, 0.4, 0.4, 1});
    const DenseMatrix n = depflow::normalize_to_correlation(c);
    REQUIRE((oracle::to_eigen(n) - oracle::to_eigen(c)).cwiseAbs().maxCoeff() < 1e-15);
  }

  SECTION("hand example [[4,2],[2,1]] -> all ones") {
    const DenseMatrix m = DenseMatrix::from_rows(2, 2, {4, 2, 2, 1});
    const DenseMatrix n = depflow::normalize_to_correlation(m);
    for (double x : n.storage()) REQUIRE(x == Catch::Approx(1.0));
  }

  SECTION("diagonal is exactly one") {
    Rng rng(29);
    const DenseMatrix m = oracle::random_spd(6, rng);
    const DenseMatrix n = depflow::normalize_to_correlation(m);
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(n(i, i) == 1.0);
  }

  SECTION("non-positive diagonal rejected") {
    const DenseMatrix m = DenseMatrix::from_rows(2, 2, {0, 0, 0, 1});
    REQUIRE_THROWS_AS(depflow::normalize_to_correlation(m), depflow::Error);
  }
}

TEST_CASE("dense-oracle equivalence over random structures", "[covariance]") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(49);

    // EquiBlocks with random block partition and per-block rho.
    std::vector<std::size_t> sizes;
    std::size_t left = n;
    while (left > 0) {
      const std::size_t s = 1 + rng.below(std::min<std::size_t>(left, 7));
      sizes.push_back(s);
      left -= s;
    }
    std::vector<double> rho(sizes.size());
    for (double& r : rho) r = rng.uniform(0.0, 0.95);
    const EquiBlocks equi = EquiBlocks::from_values(blocks_of(sizes), rho);
    const Eigen::MatrixXd c_equi = dense_equi(sizes, rho);
    const DenseMatrix u = rng.normal_matrix(n, 2);
    REQUIRE(oracle::rel_err(equi.log_det(), oracle::dense_log_det_spd(c_equi)) < 1e-10);
    REQUIRE(oracle::rel_err(equi.trace_term(u), oracle::dense_trace_term(c_equi, u)) < 1e-10);
    const Eigen::MatrixXd inv_equi = c_equi.inverse();
    for (int probe = 0; probe < 8; ++probe) {
      const std::size_t i = rng.below(n), j = rng.below(n);
      REQUIRE(std::abs(equi.inverse_entry(i, j) - inv_equi(i, j)) < 1e-10);
    }

    // FixedMixture over a random PSD relationship matrix.
    const DenseMatrix g = random_relationship(n, rng);
    const double lambda = rng.uniform(0.05, 1.0);
    const FixedMixture mix = FixedMixture::build_with_value({g}, lambda);
    const Eigen::MatrixXd c_mix = dense_mixture(g, lambda);
    REQUIRE(oracle::rel_err(mix.log_det(), oracle::dense_log_det_spd(c_mix)) < 1e-10);
    REQUIRE(oracle::rel_err(mix.trace_term(u), oracle::dense_trace_term(c_mix, u)) < 1e-10);
    const Eigen::MatrixXd inv_mix = c_mix.inverse();
    for (int probe = 0; probe < 8; ++probe) {
      const std::size_t i = rng.below(n), j = rng.below(n);
      REQUIRE(std::abs(mix.inverse_entry(i, j) - inv_mix(i, j)) < 1e-10);
    }
  }
}

TEST_CASE("independence limits reproduce IdentityCov exactly", "[covariance]") {
  Rng rng(37);
  const std::size_t n = 12;
  const DenseMatrix u = rng.normal_matrix(n, 3);
  const IdentityCov identity(n);

  const EquiBlocks equi = EquiBlocks::from_value(blocks_of({5, 4, 3}), 0.0);
  REQUIRE(equi.log_det() == 0.0);
  REQUIRE(equi.trace_term(u) == identity.trace_term(u));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) REQUIRE(equi.inverse_entry(i, j) == identity.inverse_entry(i, j));

  const FixedMixture mix = FixedMixture::build_with_value({random_relationship(n, rng)}, 1.0);
  REQUIRE(mix.log_det() == 0.0);
  REQUIRE(mix.trace_term(u) == identity.trace_term(u));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) REQUIRE(mix.inverse_entry(i, j) == identity.inverse_entry(i, j));
}

TEST_CASE("inverse_entry symmetry", "[covariance]") {
  Rng rng(41);
  const EquiBlocks equi = EquiBlocks::from_values(blocks_of({3, 4}), {0.4, 0.8});
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) REQUIRE(equi.inverse_entry(i, j) == equi.inverse_entry(j, i));

  const FixedMixture mix = FixedMixture::build_with_value({random_relationship(8, rng)}, 0.4);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      REQUIRE(std::abs(mix.inverse_entry(i, j) - mix.inverse_entry(j, i)) <= 1e-12);
}

TEST_CASE("lambda updates reuse the cached decomposition", "[covariance]") {
  Rng rng(43);
  const DenseMatrix g = random_relationship(10, rng);
  const FixedMixture cov = FixedMixture::build({g}, 0.2);
  const auto count_before = depflow::sym_eig_call_count().load();
  const FixedMixture updated = cov.with_lambda_raw(1.3);
  const FixedMixture updated2 = updated.with_lambda(0.5);
  REQUIRE(updated.lambda() == Catch::Approx(depflow::sigmoid(1.3)));
  REQUIRE(std::isfinite(updated2.log_det()));
  REQUIRE(depflow::sym_eig_call_count().load() == count_before);
}

TEST_CASE("dense-inverse cache and batch gathers agree", "[covariance]") {
  Rng rng(47);
  const DenseMatrix g = random_relationship(12, rng);
  FixedMixture cov = FixedMixture::build_with_value({g}, 0.3);
  const std::vector<std::size_t> batch{1, 4, 7, 11};
  DenseMatrix w_direct;
  cov.inverse_batch(batch, w_direct);
  cov.precompute_dense_inverse();
  REQUIRE(cov.has_dense_inverse());
  DenseMatrix w_cached;
  cov.inverse_batch(batch, w_cached);
  for (std::size_t i = 0; i < w_direct.size(); ++i)
    REQUIRE(w_direct.storage()[i] == Catch::Approx(w_cached.storage()[i]).margin(1e-11));
}

TEST_CASE("FullCholesky against dense oracles", "[covariance]") {
  Rng rng(53);
  const std::size_t n = 6;
  DenseMatrix factor(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) factor(i, j) = 0.3 * rng.normal();
    factor(i, i) = 0.5 + rng.uniform(0.0, 1.0);
  }
  const depflow::FullCholesky cov(factor);
  // A = M M^T, C = A^{-1}.
  const Eigen::MatrixXd me = oracle::to_eigen(factor);
  const Eigen::MatrixXd c = (me * me.transpose()).inverse();
  REQUIRE(oracle::rel_err(cov.log_det(), oracle::dense_log_det_spd(c)) < 1e-10);
  const DenseMatrix u = rng.normal_matrix(n, 2);
  REQUIRE(oracle::rel_err(cov.trace_term(u), oracle::dense_trace_term(c, u)) < 1e-10);
  const Eigen::MatrixXd a = me * me.transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      REQUIRE(cov.inverse_entry(i, j) == Catch::Approx(a(i, j)).margin(1e-12));

  SECTION("guards") {
    DenseMatrix bad = factor;
    bad(0, 0) = -1.0;
    REQUIRE_THROWS_AS(depflow::FullCholesky(bad), depflow::Error);
    REQUIRE_THROWS_AS(depflow::FullCholesky(DenseMatrix(501, 501, 0.0)), depflow::Error);
  }
}

TEST_CASE("matrix and block-id file I/O round-trips", "[covariance]") {
  namespace fs = std::filesystem;
  Rng rng(59);
  const std::string dir = fs::temp_directory_path() / "depflow_cov_io";
  fs::create_directories(dir);
  const DenseMatrix m = rng.normal_matrix(5, 5);
  depflow::save_matrix_binary(m, dir + "/m.bin");
  REQUIRE(depflow::load_matrix(dir + "/m.bin") == m);
  depflow::save_matrix_csv(m, dir + "/m.csv");
  const DenseMatrix csv = depflow::load_matrix(dir + "/m.csv");
  REQUIRE((oracle::to_eigen(csv) - oracle::to_eigen(m)).cwiseAbs().maxCoeff() < 1e-15);
  const std::vector<std::size_t> ids{0, 0, 1, 2, 2, 2};
  depflow::save_block_ids(ids, dir + "/ids.txt");
  REQUIRE(depflow::load_block_ids(dir + "/ids.txt") == ids);
  fs::remove_all(dir);
}
