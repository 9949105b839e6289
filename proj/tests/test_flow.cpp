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
#include <fstream>

#include "depflow/flow.hpp"
#include "support/oracles.hpp"

using depflow::DenseMatrix;
using depflow::FlowModel;
using depflow::Rng;

namespace {

/// Flow with randomized (non-identity) parameters in every layer, small
/// enough that finite differences stay cheap.
FlowModel perturbed_flow(std::size_t dim, std::size_t layers, Rng& rng, double scale = 0.4) {
  FlowModel flow = FlowModel::make(dim, layers, {8, 8}, 5.0, rng);
  for (depflow::CouplingLayer& layer : flow.layers()) {
    depflow::Linear& last = layer.linears.back();
    for (double& x : last.w.storage()) x = scale * rng.normal();
    for (double& x : last.b.storage()) x = scale * rng.normal();
  }
  return flow;
}

}  // namespace

TEST_CASE("freshly initialized flow is the identity with zero logabsdet", "[flow]") {
  Rng rng(1);
  const FlowModel flow = FlowModel::make(2, 6, {16, 16}, 5.0, rng);
  const DenseMatrix u = Rng(2).normal_matrix(32, 2);
  const depflow::FlowPass fwd = flow.forward(u);
  REQUIRE(oracle::to_eigen(fwd.points).isApprox(oracle::to_eigen(u), 1e-15));
  for (double lad : fwd.logabsdet) REQUIRE(lad == 0.0);
  const depflow::FlowPass inv = flow.inverse(u);
  REQUIRE(oracle::to_eigen(inv.points).isApprox(oracle::to_eigen(u), 1e-15));
  for (double lad : inv.logabsdet) REQUIRE(lad == 0.0);
}

TEST_CASE("single layer scaling one dim by e gives logabsdet 1", "[flow]") {
  // Force the conditioner output to s_raw = s_max * atanh(1/s_max) so the
  // clamped log-scale is exactly 1 and the shift is 0.
  Rng rng(3);
  FlowModel flow = FlowModel::make(2, 1, {4}, 5.0, rng);
  depflow::CouplingLayer& layer = flow.layers()[0];
  depflow::Linear& last = layer.linears.back();
  last.w.fill(0.0);
  last.b(0, 0) = 5.0 * std::atanh(1.0 / 5.0);
  last.b(0, 1) = 0.0;
  const DenseMatrix u = DenseMatrix::from_rows(1, 2, {0.7, -0.3});
  const depflow::FlowPass fwd = flow.forward(u);
  REQUIRE(fwd.logabsdet[0] == Catch::Approx(1.0).epsilon(1e-12));
  REQUIRE(fwd.points(0, 0) == Catch::Approx(0.7));
  REQUIRE(fwd.points(0, 1) == Catch::Approx(-0.3 * std::exp(1.0)));
}

TEST_CASE("roundtrip through random flows", "[flow]") {
  Rng rng(17);
  FlowModel flow = perturbed_flow(2, 6, rng);
  const DenseMatrix u = Rng(5).normal_matrix(1000, 2);
  const depflow::FlowPass fwd = flow.forward(u);
  const depflow::FlowPass back = flow.inverse(fwd.points);
  double worst = 0.0, lad_worst = 0.0;
  for (std::size_t i = 0; i < u.rows(); ++i) {
    for (std::size_t j = 0; j < 2; ++j) worst = std::max(worst, std::abs(back.points(i, j) - u(i, j)));
    lad_worst = std::max(lad_worst, std::abs(fwd.logabsdet[i] + back.logabsdet[i]));
  }
  REQUIRE(worst <= 1e-6);
  // Inverse function theorem: log-dets cancel.
  REQUIRE(lad_worst <= 1e-8);
}

TEST_CASE("4-dim masks alternate and roundtrip", "[flow]") {
  Rng rng(23);
  FlowModel flow = perturbed_flow(4, 4, rng);
  REQUIRE(flow.layers()[0].cond == std::vector<std::size_t>{0, 2});
  REQUIRE(flow.layers()[1].cond == std::vector<std::size_t>{1, 3});
  const DenseMatrix u = Rng(6).normal_matrix(50, 4);
  const depflow::FlowPass fwd = flow.forward(u);
  const depflow::FlowPass back = flow.inverse(fwd.points);
  REQUIRE(oracle::to_eigen(back.points).isApprox(oracle::to_eigen(u), 1e-9));
}

TEST_CASE("logabsdet matches the finite-difference Jacobian in 2-D", "[flow]") {
  Rng rng(29);
  FlowModel flow = perturbed_flow(2, 4, rng);
  Rng points_rng(31);
  const double h = 1e-6;
  for (int trial = 0; trial < 100; ++trial) {
    DenseMatrix u(1, 2);
    u(0, 0) = points_rng.normal();
    u(0, 1) = points_rng.normal();
    const depflow::FlowPass fwd = flow.forward(u);
    Eigen::Matrix2d jac;
    for (int c = 0; c < 2; ++c) {
      DenseMatrix up = u, down = u;
      up(0, c) += h;
      down(0, c) -= h;
      const DenseMatrix fu = flow.forward(up).points;
      const DenseMatrix fd = flow.forward(down).points;
      for (int r = 0; r < 2; ++r) jac(r, c) = (fu(0, r) - fd(0, r)) / (2.0 * h);
    }
    const double fd_logabsdet = std::log(std::abs(jac.determinant()));
    REQUIRE(std::abs(fwd.logabsdet[0] - fd_logabsdet) <= 1e-4);
  }
}

TEST_CASE("log_prob_iid analytic values for the identity flow", "[flow]") {
  Rng rng(2);
  const FlowModel flow = FlowModel::make(2, 4, {8}, 5.0, rng);
  DenseMatrix x(2, 2);
  x(1, 0) = 1.0;  // second row (1, 0)
  const std::vector<double> lp = flow.log_prob_iid(x);
  REQUIRE(lp[0] == Catch::Approx(-depflow::kLogTwoPi));          // standard normal at the origin
  REQUIRE(lp[1] == Catch::Approx(-depflow::kLogTwoPi - 0.5));
}

TEST_CASE("identity-flow samples look standard normal and are reproducible", "[flow]") {
  Rng rng(4);
  const FlowModel flow = FlowModel::make(2, 2, {8}, 5.0, rng);
  Rng s1(77), s2(77);
  const DenseMatrix a = flow.sample(10000, s1);
  const DenseMatrix b = flow.sample(10000, s2);
  REQUIRE(a == b);
  std::vector<double> marginal(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) marginal[i] = a(i, 0);
  REQUIRE(oracle::ks_statistic(marginal, oracle::standard_normal_cdf) <= 0.02);
  // Degenerate draw keeps the column count.
  const DenseMatrix empty = flow.sample(0, s1);
  REQUIRE(empty.rows() == 0);
  REQUIRE(empty.cols() == 2);
}

TEST_CASE("tape inverse agrees with the plain inverse bit for bit", "[flow]") {
  Rng rng(41);
  FlowModel flow = perturbed_flow(2, 5, rng);
  const DenseMatrix x = Rng(43).normal_matrix(64, 2);
  const depflow::FlowPass plain = flow.inverse(x);
  depflow::Tape tape;
  std::vector<depflow::Tape::NodeId> params;
  for (const DenseMatrix* p : const_cast<const FlowModel&>(flow).param_values())
    params.push_back(tape.constant(*p));
  const depflow::FlowInverseGraph graph = flow.build_inverse(tape, params, x);
  REQUIRE(tape.value(graph.latent) == plain.points);
  double plain_sum_fwd = 0.0;
  for (double lad : plain.logabsdet) plain_sum_fwd -= lad;  // forward logdet = -inverse logdet
  REQUIRE(tape.value(graph.sum_forward_logdet)(0, 0) == Catch::Approx(plain_sum_fwd).epsilon(1e-12));
}

TEST_CASE("checkpoint roundtrip is byte-stable", "[flow]") {
  namespace fs = std::filesystem;
  Rng rng(47);
  FlowModel flow = perturbed_flow(2, 3, rng);
  const std::string dir = fs::temp_directory_path() / "depflow_flow_ckpt";
  fs::create_directories(dir);
  const std::string p1 = dir + "/a.json", p2 = dir + "/b.json";
  flow.save(p1);
  flow.save(p2);
  std::ifstream f1(p1), f2(p2);
  const std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(s1 == s2);
  const FlowModel loaded = FlowModel::load(p1);
  const DenseMatrix x = Rng(48).normal_matrix(16, 2);
  REQUIRE(loaded.inverse(x).points == flow.inverse(x).points);
  fs::remove_all(dir);
}

TEST_CASE("width mismatch is rejected", "[flow]") {
  Rng rng(51);
  const FlowModel flow = FlowModel::make(2, 2, {8}, 5.0, rng);
  REQUIRE_THROWS_AS(flow.forward(DenseMatrix(4, 3)), depflow::Error);
  REQUIRE_THROWS_AS(flow.inverse(DenseMatrix(4, 1)), depflow::Error);
}
