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
#include <limits>
#include <random>
#include <vector>

#include "depflow/common.hpp"
#include "depflow/matrix.hpp"

namespace depflow {

/// Inverse-CDF map of the Pareto II distribution with minimum 1:
///   x = 1 + (u^(-1/alpha) - 1),   u in (0, 1],
/// so that x follows the survival law P(X > x) = (1/x)^alpha for x >= 1.
/// u = 1 is the boundary of the support and maps to exactly 1. Exposed
/// separately so the mapping can be checked against hand-computed values.
inline double pareto2_inverse_cdf(double u, double alpha) {
  if (!(alpha > 0.0)) fail("pareto2: shape parameter must be positive, got ", alpha);
  if (!(u > 0.0 && u <= 1.0)) fail("pareto2: uniform argument ", u, " outside (0,1]");
  return 1.0 + (std::pow(u, -1.0 / alpha) - 1.0);
}

/// Seeded pseudo-random stream. The engine is std::mt19937_64 (its output
/// sequence is pinned by the standard) and every distribution below is
/// derived from it with fixed arithmetic, so identical (seed, draw sequence)
/// reproduces bit-identical values on any platform.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64";

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  /// Uniform on [0, 1) with 53-bit resolution.
  double uniform() {
    ++draws_;
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) fail("Rng::below: empty range");
    // Rejection sampling keeps the draw unbiased for any n.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      ++draws_;
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller; consumes two uniforms per value.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;  // open interval for the log
    const double radius = std::sqrt(-2.0 * std::log(u1));
    return radius * std::cos(kTwoPi * u2);
  }

  /// Pareto II variate with minimum 1 via inverse CDF; 1 - uniform() keeps
  /// the argument inside (0, 1].
  double pareto2(double alpha) { return pareto2_inverse_cdf(1.0 - uniform(), alpha); }

  DenseMatrix normal_matrix(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) fail("normal_matrix: shape must be nonempty");
    DenseMatrix m(rows, cols);
    for (double& x : m.storage()) x = normal();
    return m;
  }

  std::vector<double> normal_vector(std::size_t n) {
    if (n == 0) fail("normal_vector: shape must be nonempty");
    std::vector<double> v(n);
    for (double& x : v) x = normal();
    return v;
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
  std::mt19937_64 engine_;
};

}  // namespace depflow
