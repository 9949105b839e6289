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

#include "depflow/data.hpp"
#include "support/oracles.hpp"

using depflow::DenseMatrix;
using depflow::Rng;
using depflow::ShapeName;

namespace fs = std::filesystem;

namespace {

std::string write_csv(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
  return path;
}

}  // namespace

TEST_CASE("block structure sampling", "[data]") {
  SECTION("n_total = 1 gives a single block of one") {
    Rng rng(1);
    const auto sizes = depflow::sample_block_structure(1, 0.5, 1000, rng);
    REQUIRE(sizes == std::vector<std::size_t>{1});
  }

  SECTION("sizes always sum to n_total and stay within [1, cap]") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng rng(seed);
      const std::size_t n = 1 + rng.below(5000);
      const auto sizes = depflow::sample_block_structure(n, 0.5, 1000, rng);
      std::size_t total = 0;
      for (std::size_t s : sizes) {
        REQUIRE(s >= 1);
        REQUIRE(s <= 1000);
        total += s;
      }
      REQUIRE(total == n);
    }
  }

  SECTION("heavy tail: mean largest block over 100 seeds is at least 100") {
    double largest_sum = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      const auto sizes = depflow::sample_block_structure(10000, 0.5, 1000, rng);
      std::size_t largest = 0;
      for (std::size_t s : sizes) largest = std::max(largest, s);
      largest_sum += static_cast<double>(largest);
    }
    REQUIRE(largest_sum / 100.0 >= 100.0);
  }
}

TEST_CASE("equicorrelated gaussian sampling", "[data]") {
  SECTION("rho = 0 entries are i.i.d. standard normal (KS)") {
    Rng rng(3);
    const DenseMatrix u = depflow::sample_equicorrelated_gaussian({5000, 5000}, {0.0, 0.0}, 1, rng);
    std::vector<double> flat(u.storage().begin(), u.storage().end());
    REQUIRE(oracle::ks_statistic(flat, oracle::standard_normal_cdf) <= 0.02);
  }

  SECTION("rho -> 1 makes rows nearly identical") {
    Rng rng(5);
    const DenseMatrix u = depflow::sample_equicorrelated_gaussian({3}, {1.0 - 1e-12}, 2, rng);
    for (std::size_t j = 0; j < 2; ++j) {
      REQUIRE(std::abs(u(0, j) - u(1, j)) <= 1e-5);
      REQUIRE(std::abs(u(1, j) - u(2, j)) <= 1e-5);
    }
  }

  SECTION("block of 500 at rho = 0.7: mean pairwise correlation lands in [0.65, 0.75]") {
    Rng rng(7);
    // Columns are i.i.d. replicates; 400 of them estimate each pairwise
    // correlation to about +-0.05.
    const std::size_t m = 500, reps = 400;
    const DenseMatrix u = depflow::sample_equicorrelated_gaussian({m}, {0.7}, reps, rng);
    double corr_sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < m; i += 7) {
      for (std::size_t j = i + 1; j < m; j += 11) {
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::size_t r = 0; r < reps; ++r) {
          const double x = u(i, r), y = u(j, r);
          sx += x; sy += y; sxx += x * x; syy += y * y; sxy += x * y;
        }
        const double n = static_cast<double>(reps);
        const double cov = sxy / n - sx / n * (sy / n);
        const double vx = sxx / n - (sx / n) * (sx / n);
        const double vy = syy / n - (sy / n) * (sy / n);
        corr_sum += cov / std::sqrt(vx * vy);
        ++pairs;
      }
    }
    const double mean_corr = corr_sum / static_cast<double>(pairs);
    REQUIRE(mean_corr >= 0.65);
    REQUIRE(mean_corr <= 0.75);
  }

  SECTION("rho outside [0,1) rejected") {
    Rng rng(9);
    REQUIRE_THROWS_AS(depflow::sample_equicorrelated_gaussian({2}, {1.0}, 1, rng), depflow::Error);
  }
}

TEST_CASE("fixed covariance gaussian sampling", "[data]") {
  SECTION("lambda = 1 gives i.i.d. standard normal entries regardless of G") {
    Rng rng(11);
    const auto [g, u] = depflow::sample_fixed_cov_gaussian(3000, 1.0, 1, rng);
    std::vector<double> flat(u.storage().begin(), u.storage().end());
    REQUIRE(oracle::ks_statistic(flat, oracle::standard_normal_cdf) <= 0.02);
  }

  SECTION("returned G has unit diagonal exactly") {
    Rng rng(13);
    const auto [g, u] = depflow::sample_fixed_cov_gaussian(40, 0.5, 2, rng);
    for (std::size_t i = 0; i < 40; ++i) REQUIRE((*g)(i, i) == 1.0);
  }

  SECTION("empirical covariance of replicate draws matches lambda I + (1-lambda) G") {
    Rng rng(17);
    const std::size_t n = 50, reps = 10000;
    const auto [g, u] = depflow::sample_fixed_cov_gaussian(n, 0.3, reps, rng);
    // Sample covariance across the replicate columns.
    for (std::size_t i = 0; i < n; i += 9) {
      for (std::size_t j = i; j < n; j += 9) {
        double sx = 0, sy = 0, sxy = 0;
        for (std::size_t r = 0; r < reps; ++r) {
          sx += u(i, r);
          sy += u(j, r);
          sxy += u(i, r) * u(j, r);
        }
        const double nrep = static_cast<double>(reps);
        const double cov = sxy / nrep - (sx / nrep) * (sy / nrep);
        const double want = (i == j ? 0.3 : 0.0) + 0.7 * (*g)(i, j);
        REQUIRE(std::abs(cov - want) < 0.05);
      }
    }
  }
}

TEST_CASE("shape transforms", "[data]") {
  SECTION("plug-in values") {
    DenseMatrix u(3, 2);
    // Abs at (0,0) -> (0, -1).
    const DenseMatrix abs_x = depflow::shape_transform(ShapeName::Abs, u);
    REQUIRE(abs_x(0, 0) == 0.0);
    REQUIRE(abs_x(0, 1) == -1.0);
    // Crescent at (2,0) -> (2, 1).
    u(1, 0) = 2.0;
    const DenseMatrix cres_x = depflow::shape_transform(ShapeName::Crescent, u);
    REQUIRE(cres_x(1, 0) == 2.0);
    REQUIRE(cres_x(1, 1) == Catch::Approx(1.0));
    // Sign at (1,1) -> (1, 2 + s) with s = exp(-1.5).
    u(2, 0) = 1.0;
    u(2, 1) = 1.0;
    const DenseMatrix sign_x = depflow::shape_transform(ShapeName::Sign, u);
    REQUIRE(sign_x(2, 0) == 1.0);
    REQUIRE(sign_x(2, 1) == Catch::Approx(2.0 + std::exp(-1.5)));
  }

  SECTION("unknown shape name is rejected") {
    REQUIRE_THROWS_WITH(depflow::shape_from_string("Spiral"), Catch::Matchers::ContainsSubstring("unknown shape"));
  }

  SECTION("deterministic bit-exact") {
    Rng rng(19);
    const DenseMatrix u = rng.normal_matrix(100, 2);
    const DenseMatrix a = depflow::shape_transform(ShapeName::SineWave, u);
    const DenseMatrix b = depflow::shape_transform(ShapeName::SineWave, u);
    REQUIRE(a == b);
  }

  SECTION("wrong width rejected") {
    REQUIRE_THROWS_AS(depflow::shape_transform(ShapeName::Abs, DenseMatrix(4, 3)), depflow::Error);
  }
}

TEST_CASE("make_synthetic", "[data]") {
  SECTION("zero-width rho interval at zero is effectively i.i.d.") {
    depflow::SyntheticSpec spec;
    spec.n_total = 500;
    spec.rho_lo = 0.0;
    spec.rho_hi = 0.0;
    spec.seed = 3;
    spec.n_val = 100;
    spec.n_test = 100;
    const depflow::SyntheticBundle bundle = depflow::make_synthetic(spec);
    for (double r : bundle.train.true_rho) REQUIRE(r == 0.0);
  }

  SECTION("same seed reproduces the same bundle") {
    depflow::SyntheticSpec spec;
    spec.n_total = 400;
    spec.seed = 11;
    spec.n_val = 50;
    spec.n_test = 50;
    const auto a = depflow::make_synthetic(spec);
    const auto b = depflow::make_synthetic(spec);
    REQUIRE(a.train.x == b.train.x);
    REQUIRE(a.val.x == b.val.x);
    REQUIRE(a.test.x == b.test.x);
    REQUIRE(a.train.block_ids == b.train.block_ids);
    REQUIRE(a.train.true_rho == b.train.true_rho);
  }

  SECTION("paper protocol: n=10000, alpha=0.5, rho ~ Unif[0.5, 0.99]") {
    depflow::SyntheticSpec spec;
    spec.n_total = 10000;
    spec.seed = 1;
    const auto bundle = depflow::make_synthetic(spec);
    REQUIRE(bundle.train.n() == 10000);
    REQUIRE(bundle.train.block_ids.size() == 10000);
    REQUIRE(bundle.val.n() == 2000);
    REQUIRE(bundle.test.n() == 2000);
    REQUIRE(bundle.val.block_ids.empty());  // evaluation splits are i.i.d.
    for (double r : bundle.train.true_rho) {
      REQUIRE(r >= 0.5);
      REQUIRE(r <= 0.99);
    }
    bundle.train.validate();
  }

  SECTION("fixed-cov bundle carries G and the true lambda") {
    depflow::SyntheticSpec spec;
    spec.kind = depflow::DependencyKind::fixedcov;
    spec.n_total = 60;
    spec.seed = 5;
    spec.n_val = 30;
    spec.n_test = 30;
    const auto bundle = depflow::make_synthetic(spec);
    REQUIRE(bundle.train.g != nullptr);
    REQUIRE(bundle.train.true_lambda.has_value());
    REQUIRE(*bundle.train.true_lambda >= 0.0);
    REQUIRE(*bundle.train.true_lambda <= 1.0);
    spec.lambda = 0.25;
    const auto pinned = depflow::make_synthetic(spec);
    REQUIRE(*pinned.train.true_lambda == 0.25);
  }
}

TEST_CASE("stock ingestion", "[data]") {
  const std::string dir = fs::temp_directory_path() / "depflow_stock";
  fs::create_directories(dir);

  SECTION("the worked MA/V rows produce (0.0324, 0.0449)") {
    const auto ma = write_csv(dir + "/ma.csv", "date,close\n2012-06-21,40.737\n2012-06-22,42.080\n");
    const auto v = write_csv(dir + "/v.csv", "date,close\n2012-06-21,28.661\n2012-06-22,29.976\n");
    const auto aapl = write_csv(dir + "/a.csv",
                                "date,close\n2012-06-18,10\n2012-06-19,10.1\n2012-06-20,10.15\n"
                                "2012-06-21,10.2\n2012-06-22,10.25\n2012-06-25,10.3\n"
                                "2012-06-26,10.34\n");
    const auto msft = write_csv(dir + "/m.csv",
                                "date,close\n2012-06-18,20\n2012-06-19,20.1\n2012-06-20,20.25\n"
                                "2012-06-21,20.3\n2012-06-22,20.5\n2012-06-25,20.6\n"
                                "2012-06-26,20.7\n");
    const depflow::StockIngest ingest =
        depflow::ingest_stock_csv({{"AAPL-MSFT", aapl, msft}, {"MA-V", ma, v}});
    bool found = false;
    auto scan = [&](const depflow::Dataset& ds) {
      for (std::size_t i = 0; i < ds.n(); ++i) {
        if (ds.block_ids[i] == 1) {
          REQUIRE(std::round(ds.x(i, 0) * 1e4) / 1e4 == Catch::Approx(0.0324));
          REQUIRE(std::round(ds.x(i, 1) * 1e4) / 1e4 == Catch::Approx(0.0449));
          found = true;
        }
      }
    };
    scan(ingest.train);
    scan(ingest.val);
    scan(ingest.test);
    REQUIRE(found);
  }

  SECTION("constant prices give zero returns") {
    const auto a = write_csv(dir + "/ca.csv", "date,close\n2020-01-01,5\n2020-01-02,5\n2020-01-03,5\n");
    const auto b = write_csv(dir + "/cb.csv", "date,close\n2020-01-01,7\n2020-01-02,7\n2020-01-03,7\n");
    const depflow::StockIngest ingest = depflow::ingest_stock_csv({{"P", a, b}});
    REQUIRE(ingest.train.n() + ingest.val.n() + ingest.test.n() == 2);
    for (const depflow::Dataset* ds : {&ingest.train, &ingest.val, &ingest.test}) {
      for (double x : ds->x.storage()) REQUIRE(x == 0.0);
    }
  }

  SECTION("temporal split ratios and strict date ordering on a long series") {
    std::string ca = "date,close\n", cb = "date,close\n";
    double pa = 100.0, pb = 50.0;
    Rng rng(23);
    for (int day = 0; day < 900; ++day) {
      char date[16];
      // Spread over years; YYYY-MM-DD with months 01..12 and days 01..28.
      std::snprintf(date, sizeof(date), "%04d-%02d-%02d", 2015 + day / 336, 1 + (day / 28) % 12,
                    1 + day % 28);
      pa *= std::exp(0.01 * rng.normal());
      pb *= std::exp(0.01 * rng.normal());
      ca += std::string(date) + "," + std::to_string(pa) + "\n";
      cb += std::string(date) + "," + std::to_string(pb) + "\n";
    }
    const auto a = write_csv(dir + "/la.csv", ca);
    const auto b = write_csv(dir + "/lb.csv", cb);
    const depflow::StockIngest ingest = depflow::ingest_stock_csv({{"L", a, b}});
    const double n = static_cast<double>(ingest.train.n() + ingest.val.n() + ingest.test.n());
    const double train_frac = static_cast<double>(ingest.train.n()) / n;
    REQUIRE(train_frac >= 0.69);
    REQUIRE(train_frac <= 0.71);
    const double val_frac = static_cast<double>(ingest.val.n()) / n;
    REQUIRE(val_frac >= 0.14);
    REQUIRE(val_frac <= 0.16);

    // No look-ahead and exact recomputation: returns rebuilt from the raw
    // prices, in date order, must equal train|val|test concatenated.
    std::vector<std::pair<double, double>> recomputed;
    {
      Rng rng2(23);
      double qa = 100.0, qb = 50.0, prev_a = 0.0, prev_b = 0.0;
      for (int day = 0; day < 900; ++day) {
        qa *= std::exp(0.01 * rng2.normal());
        qb *= std::exp(0.01 * rng2.normal());
        // Prices pass through a decimal text format; reparse for bit equality.
        const double pa2 = std::stod(std::to_string(qa));
        const double pb2 = std::stod(std::to_string(qb));
        if (day > 0) recomputed.push_back({std::log(pa2 / prev_a), std::log(pb2 / prev_b)});
        prev_a = pa2;
        prev_b = pb2;
      }
    }
    std::size_t at = 0;
    for (const depflow::Dataset* ds : {&ingest.train, &ingest.val, &ingest.test}) {
      for (std::size_t i = 0; i < ds->n(); ++i, ++at) {
        REQUIRE(std::abs(ds->x(i, 0) - recomputed[at].first) <= 1e-12);
        REQUIRE(std::abs(ds->x(i, 1) - recomputed[at].second) <= 1e-12);
      }
    }
    REQUIRE(at == recomputed.size());
  }

  SECTION("non-positive price names the date") {
    const auto a = write_csv(dir + "/na.csv", "date,close\n2020-01-01,5\n2020-01-02,-1\n");
    const auto b = write_csv(dir + "/nb.csv", "date,close\n2020-01-01,5\n2020-01-02,5\n");
    REQUIRE_THROWS_WITH(depflow::ingest_stock_csv({{"N", a, b}}),
                        Catch::Matchers::ContainsSubstring("non-positive price") &&
                            Catch::Matchers::ContainsSubstring("2020-01-02"));
  }

  SECTION("misaligned dates are skipped and counted") {
    const auto a = write_csv(dir + "/sa.csv",
                             "date,close\n2020-01-01,5\n2020-01-02,6\n2020-01-03,7\n2020-01-06,8\n");
    const auto b = write_csv(dir + "/sb.csv",
                             "date,close\n2020-01-01,5\n2020-01-02,6\n2020-01-04,7\n2020-01-06,8\n");
    const depflow::StockIngest ingest = depflow::ingest_stock_csv({{"S", a, b}});
    REQUIRE(ingest.skipped_dates == 2);  // 01-03 in A only, 01-04 in B only
    REQUIRE(ingest.train.n() + ingest.val.n() + ingest.test.n() == 2);
  }

  fs::remove_all(dir);
}

TEST_CASE("synthetic latents pass the marginal KS test", "[data]") {
  // Entries within a block are dependent, so subsample one latent per block
  // (blocks are mutually independent) across seeds until 10^4 entries.
  std::vector<double> subsampled;
  for (std::uint64_t seed = 0; subsampled.size() < 10000; ++seed) {
    depflow::SyntheticSpec spec;
    spec.n_total = 10000;
    spec.seed = seed;
    spec.n_val = 1;
    spec.n_test = 1;
    const auto bundle = depflow::make_synthetic(spec);
    // First coordinate of the shape output is the untransformed latent u1.
    std::size_t last_block = static_cast<std::size_t>(-1);
    for (std::size_t i = 0; i < bundle.train.n() && subsampled.size() < 10000; ++i) {
      if (bundle.train.block_ids[i] == last_block) continue;
      last_block = bundle.train.block_ids[i];
      subsampled.push_back(bundle.train.x(i, 0));
    }
  }
  // KS critical value at the 1% level for n = 10^4 is about 0.0163.
  REQUIRE(oracle::ks_statistic(subsampled, oracle::standard_normal_cdf) <= 0.0163);
}

TEST_CASE("within-block correlation tracks the true rho", "[data]") {
  Rng rng(31);
  const std::size_t m = 400;
  const double rho = 0.6;
  // Replicate columns are independent draws of the whole block; the shared
  // block factor makes pair estimates correlate within a column, so the
  // error shrinks with the replicate count, not the pair count.
  const std::size_t reps = 3000;
  const DenseMatrix u = depflow::sample_equicorrelated_gaussian({m}, {rho}, reps, rng);
  double corr_sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; i += 13) {
    for (std::size_t j = i + 1; j < m; j += 17) {
      double sxy = 0;
      for (std::size_t r = 0; r < reps; ++r) sxy += u(i, r) * u(j, r);
      corr_sum += sxy / static_cast<double>(reps);
      ++count;
    }
  }
  REQUIRE(std::abs(corr_sum / static_cast<double>(count) - rho) <= 0.05);
}

TEST_CASE("dataset JSON round-trip with sidecar G", "[data]") {
  const std::string dir = fs::temp_directory_path() / "depflow_dataset_io";
  fs::create_directories(dir);
  depflow::SyntheticSpec spec;
  spec.kind = depflow::DependencyKind::fixedcov;
  spec.n_total = 30;
  spec.seed = 37;
  spec.n_val = 10;
  spec.n_test = 10;
  const auto bundle = depflow::make_synthetic(spec);
  depflow::save_dataset(bundle.train, dir + "/train.json");
  const depflow::Dataset loaded = depflow::load_dataset(dir + "/train.json");
  REQUIRE(loaded.x == bundle.train.x);
  REQUIRE(loaded.true_lambda == bundle.train.true_lambda);
  REQUIRE(*loaded.g == *bundle.train.g);
  fs::remove_all(dir);
}
