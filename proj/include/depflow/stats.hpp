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

#include <vector>

#include "depflow/common.hpp"

namespace depflow {

namespace detail {

/// Continued-fraction core of the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double md = static_cast<double>(m);
    const double m2 = 2.0 * md;
    double aa = md * (b - md) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + md) * (qab + md) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  fail("incomplete beta: continued fraction did not converge (a=", a, ", b=", b, ", x=", x, ")");
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b), accuracy ~1e-10.
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) fail("incomplete beta: a and b must be positive");
  if (x < 0.0 || x > 1.0) fail("incomplete beta: x=", x, " outside [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// P(T > t) for Student's t with df degrees of freedom.
inline double student_t_upper_tail(double t, double df) {
  if (!(df > 0.0)) fail("student_t_upper_tail: df must be positive");
  const double x = df / (df + t * t);
  const double half = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x);
  return t >= 0.0 ? half : 1.0 - half;
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation (n - 1)
};

inline MeanSd mean_sd(const std::vector<double>& v) {
  if (v.empty()) fail("mean_sd: empty input");
  MeanSd out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return out;
}

/// One-sided paired t-test of "a < b" (method a beats method b), paired by
/// index. With d = b - a and t = mean(d) / (sd(d)/sqrt(k)), returns the
/// Student-t upper tail with k-1 degrees of freedom. Zero-variance
/// differences degenerate to p = 0 if mean(d) > 0 and p = 1 otherwise.
inline double paired_t_test_one_sided(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) fail("paired t-test: length mismatch ", a.size(), " vs ", b.size());
  if (a.size() < 2) fail("paired t-test: need at least 2 pairs, got ", a.size());
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = b[i] - a[i];
  const MeanSd ms = mean_sd(d);
  if (ms.sd == 0.0) return ms.mean > 0.0 ? 0.0 : 1.0;
  const double k = static_cast<double>(d.size());
  const double t = ms.mean / (ms.sd / std::sqrt(k));
  return student_t_upper_tail(t, k - 1.0);
}

}  // namespace depflow
