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

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "depflow/covariance.hpp"
#include "depflow/matrix.hpp"
#include "depflow/rng.hpp"

namespace depflow {

// ---------------------------------------------------------------------------
// 2-D benchmark shapes
// ---------------------------------------------------------------------------

enum class ShapeName { Abs, Crescent, CrescentCubed, Sign, SineWave };

inline const char* shape_to_string(ShapeName s) {
  switch (s) {
    case ShapeName::Abs: return "Abs";
    case ShapeName::Crescent: return "Crescent";
    case ShapeName::CrescentCubed: return "CrescentCubed";
    case ShapeName::Sign: return "Sign";
    case ShapeName::SineWave: return "SineWave";
  }
  fail("shape_to_string: bad enum");
}

inline ShapeName shape_from_string(const std::string& name) {
  if (name == "Abs") return ShapeName::Abs;
  if (name == "Crescent") return ShapeName::Crescent;
  if (name == "CrescentCubed") return ShapeName::CrescentCubed;
  if (name == "Sign") return ShapeName::Sign;
  if (name == "SineWave") return ShapeName::SineWave;
  fail("unknown shape '", name, "' (expected Abs, Crescent, CrescentCubed, Sign or SineWave)");
}

/// Conditional mean and scale of a shape: x2 = m(x1) + s * u2.
struct ShapeParams {
  double (*mean)(double);
  double scale;
};

inline ShapeParams shape_params(ShapeName name) {
  switch (name) {
    case ShapeName::Abs:
      return {[](double u) { return std::abs(u) - 1.0; }, std::exp(-1.5)};
    case ShapeName::Crescent:
      return {[](double u) { return 0.5 * u * u - 1.0; }, std::exp(-1.0)};
    case ShapeName::CrescentCubed:
      return {[](double u) { return 0.2 * u * u * u; }, 1.0};
    case ShapeName::Sign:
      return {[](double u) { return (u > 0.0 ? 1.0 : (u < 0.0 ? -1.0 : 0.0)) + u; }, std::exp(-1.5)};
    case ShapeName::SineWave:
      return {[](double u) { return std::sin(5.0 * u); }, std::exp(-1.0)};
  }
  fail("shape_params: bad enum");
}

/// Deterministic map (u1, u2) -> (u1, m(u1) + s u2). Applied to i.i.d.
/// standard-normal rows it produces the named 2-D benchmark density.
inline DenseMatrix shape_transform(ShapeName name, const DenseMatrix& u) {
  if (u.cols() != 2) fail("shape_transform: expected 2 columns, got ", u.cols());
  const ShapeParams sp = shape_params(name);
  DenseMatrix x(u.rows(), 2);
  for (std::size_t i = 0; i < u.rows(); ++i) {
    const double u1 = u(i, 0), u2 = u(i, 1);
    x(i, 0) = u1;
    x(i, 1) = sp.mean(u1) + sp.scale * u2;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class Split { train, val, test };

inline const char* split_to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  fail("split_to_string: bad enum");
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  fail("unknown split '", s, "'");
}

/// Observations plus the side information a dependency model needs.
struct Dataset {
  DenseMatrix x;
  std::vector<std::size_t> block_ids;        // empty when absent
  std::shared_ptr<const DenseMatrix> g;      // relationship matrix, optional
  std::vector<double> true_rho;              // per block, synthetic only
  std::optional<double> true_lambda;         // synthetic fixed-cov only
  Split split = Split::train;

  std::size_t n() const { return x.rows(); }
  std::size_t dim() const { return x.cols(); }
  bool has_blocks() const { return !block_ids.empty(); }

  void validate() const {
    if (!block_ids.empty()) {
      if (block_ids.size() != x.rows()) fail("Dataset: ", block_ids.size(), " block ids for ", x.rows(), " rows");
      BlockStructure::from_assignments(block_ids);  // checks contiguity
    }
    if (g && (g->rows() != x.rows() || g->cols() != x.rows()))
      fail("Dataset: G is ", g->rows(), "x", g->cols(), " but data has ", x.rows(), " rows");
  }
};

struct SyntheticBundle {
  Dataset train;
  Dataset val;
  Dataset test;
};

enum class DependencyKind { equiblocks, fixedcov };

inline const char* dependency_to_string(DependencyKind k) {
  return k == DependencyKind::equiblocks ? "equiblocks" : "fixedcov";
}

inline DependencyKind dependency_from_string(const std::string& s) {
  if (s == "equiblocks") return DependencyKind::equiblocks;
  if (s == "fixedcov") return DependencyKind::fixedcov;
  fail("unknown dependency kind '", s, "'");
}

/// Recipe for one synthetic draw.
struct SyntheticSpec {
  ShapeName shape = ShapeName::Crescent;
  std::size_t n_total = 10000;
  DependencyKind kind = DependencyKind::equiblocks;
  double rho_lo = 0.5;                  // equiblocks: rho_i ~ Unif[lo, hi]
  double rho_hi = 0.99;
  std::optional<double> lambda;         // fixedcov: fixed value, else Unif[0,1] per seed
  double pareto_alpha = 0.5;
  std::size_t block_cap = 1000;
  std::uint64_t seed = 0;
  std::size_t n_val = 2000;
  std::size_t n_test = 2000;

  void validate() const {
    if (n_total < 1) fail("SyntheticSpec: n_total must be >= 1");
    if (!(rho_lo >= 0.0 && rho_lo <= rho_hi && rho_hi < 1.0))
      fail("SyntheticSpec: need 0 <= lo <= hi < 1, got [", rho_lo, ",", rho_hi, "]");
    if (!(pareto_alpha > 0.0)) fail("SyntheticSpec: pareto_alpha must be positive");
    if (lambda && !(*lambda >= 0.0 && *lambda <= 1.0)) fail("SyntheticSpec: lambda outside [0,1]");
    if (block_cap < 1) fail("SyntheticSpec: block_cap must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Dependent sampling
// ---------------------------------------------------------------------------

/// Draws Pareto II block sizes (rounded, clipped to `cap`) until they sum to
/// n_total; the final block is truncated to land exactly on n_total.
inline std::vector<std::size_t> sample_block_structure(std::size_t n_total, double alpha,
                                                       std::size_t cap, Rng& rng) {
  if (n_total < 1) fail("sample_block_structure: n_total must be >= 1");
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  while (total < n_total) {
    const double draw = rng.pareto2(alpha);
    std::size_t s = static_cast<std::size_t>(std::llround(std::min(draw, 1e18)));
    s = std::max<std::size_t>(1, std::min(s, cap));
    if (total + s > n_total) s = n_total - total;
    sizes.push_back(s);
    total += s;
  }
  return sizes;
}

inline std::vector<std::size_t> expand_block_ids(const std::vector<std::size_t>& sizes) {
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < sizes.size(); ++k) ids.insert(ids.end(), sizes[k], k);
  return ids;
}

/// Samples U (n x p) with independent columns where entries of block k share
/// correlation rho_k: u = sqrt(rho) z_block + sqrt(1 - rho) z_own. Marginals
/// are exactly N(0,1); blocks are independent. O(n) per column.
inline DenseMatrix sample_equicorrelated_gaussian(const std::vector<std::size_t>& sizes,
                                                  const std::vector<double>& rho, std::size_t p,
                                                  Rng& rng) {
  if (sizes.size() != rho.size()) fail("sample_equicorrelated_gaussian: ", sizes.size(), " blocks vs ",
                                       rho.size(), " correlations");
  std::size_t n = 0;
  for (std::size_t s : sizes) n += s;
  for (double r : rho) {
    if (!(r >= 0.0 && r < 1.0)) fail("sample_equicorrelated_gaussian: rho ", r, " outside [0,1)");
  }
  DenseMatrix u(n, p);
  std::size_t row0 = 0;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    const double shared_w = std::sqrt(rho[k]);
    const double own_w = std::sqrt(1.0 - rho[k]);
    for (std::size_t j = 0; j < p; ++j) {
      const double z_shared = rng.normal();
      for (std::size_t i = 0; i < sizes[k]; ++i)
        u(row0 + i, j) = shared_w * z_shared + own_w * rng.normal();
    }
    row0 += sizes[k];
  }
  return u;
}

/// Builds a random dense relationship matrix G = corr(L L^T) from a unit
/// lower-triangular L with sub-diagonal entries Unif[0.5, 0.99], then samples
/// U columns from N(0, lambda I + (1 - lambda) G).
inline std::pair<std::shared_ptr<const DenseMatrix>, DenseMatrix> sample_fixed_cov_gaussian(
    std::size_t n, double lambda, std::size_t p, Rng& rng) {
  if (n < 2) fail("sample_fixed_cov_gaussian: need n >= 2");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("sample_fixed_cov_gaussian: lambda outside [0,1]");
  auto g = std::make_shared<DenseMatrix>();
  {
    DenseMatrix l(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) l(i, j) = rng.uniform(0.5, 0.99);
      l(i, i) = 1.0;
    }
    *g = normalize_to_correlation(gram(l));
  }
  DenseMatrix chol_c;
  {
    DenseMatrix c = *g;
    for (std::size_t i = 0; i < c.size(); ++i) c.storage()[i] *= (1.0 - lambda);
    for (std::size_t i = 0; i < n; ++i) c(i, i) += lambda;
    chol_c = cholesky(c);
  }
  DenseMatrix u(n, p);
  std::vector<double> z(n), col(n);
  for (std::size_t j = 0; j < p; ++j) {
    for (double& v : z) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      const double* li = chol_c.row(i);
      double s = 0.0;
      for (std::size_t k = 0; k <= i; ++k) s += li[k] * z[k];
      u(i, j) = s;
    }
  }
  return {std::move(g), std::move(u)};
}

/// Dependent train draw plus fresh i.i.d. validation/test draws through the
/// same shape transform. Everything is a pure function of (spec, seed).
inline SyntheticBundle make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticBundle bundle;
  if (spec.kind == DependencyKind::equiblocks) {
    const std::vector<std::size_t> sizes =
        sample_block_structure(spec.n_total, spec.pareto_alpha, spec.block_cap, rng);
    std::vector<double> rho(sizes.size());
    for (double& r : rho) r = rng.uniform(spec.rho_lo, spec.rho_hi);
    const DenseMatrix u = sample_equicorrelated_gaussian(sizes, rho, 2, rng);
    bundle.train.x = shape_transform(spec.shape, u);
    bundle.train.block_ids = expand_block_ids(sizes);
    bundle.train.true_rho = std::move(rho);
  } else {
    const double lambda = spec.lambda ? *spec.lambda : rng.uniform();
    auto [g, u] = sample_fixed_cov_gaussian(spec.n_total, lambda, 2, rng);
    bundle.train.x = shape_transform(spec.shape, u);
    bundle.train.g = std::move(g);
    bundle.train.true_lambda = lambda;
  }
  bundle.train.split = Split::train;

  bundle.val.x = shape_transform(spec.shape, rng.normal_matrix(spec.n_val, 2));
  bundle.val.split = Split::val;
  bundle.test.x = shape_transform(spec.shape, rng.normal_matrix(spec.n_test, 2));
  bundle.test.split = Split::test;
  return bundle;
}

// ---------------------------------------------------------------------------
// Stock-pair ingestion
// ---------------------------------------------------------------------------

struct StockPairSpec {
  std::string name;   // e.g. "MA-V"
  std::string csv_a;  // per-ticker CSV: header then date,close rows
  std::string csv_b;
};

struct StockIngest {
  Dataset train;
  Dataset val;
  Dataset test;
  std::vector<std::string> pair_names;
  std::size_t skipped_dates = 0;  // dates present for only one ticker of a pair
};

namespace detail {

inline void check_iso_date(const std::string& d, const std::string& file) {
  bool ok = d.size() == 10 && d[4] == '-' && d[7] == '-';
  if (ok) {
    for (std::size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u}) ok = ok && d[i] >= '0' && d[i] <= '9';
  }
  if (!ok) fail("stock csv ", file, ": bad date '", d, "' (expected YYYY-MM-DD)");
}

/// Reads a per-ticker CSV with header `date,close` into a date-sorted map.
inline std::map<std::string, double> read_close_series(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("stock csv: cannot open ", path);
  std::string line;
  if (!std::getline(in, line)) fail("stock csv ", path, ": empty file");
  if (line.find("date") == std::string::npos) fail("stock csv ", path, ": missing header row");
  std::map<std::string, double> series;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos) fail("stock csv ", path, ": bad row '", line, "'");
    const std::string date = line.substr(0, comma);
    check_iso_date(date, path);
    double close;
    try {
      close = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      fail("stock csv ", path, ": bad price '", line.substr(comma + 1), "'");
    }
    if (!(close > 0.0)) fail("stock csv ", path, ": non-positive price ", close, " on ", date);
    series[date] = close;
  }
  if (series.size() < 2) fail("stock csv ", path, ": need at least two rows");
  return series;
}

}  // namespace detail

/// Per pair and consecutive aligned trading days (d, d+1) emits the 2-D
/// daily log return row (log A_{d+1}/A_d, log B_{d+1}/B_d) with the pair
/// index as block id, then splits the date-sorted union 70/15/15 in time so
/// every train date precedes every validation date precedes every test date.
inline StockIngest ingest_stock_csv(const std::vector<StockPairSpec>& pairs) {
  if (pairs.empty()) fail("ingest_stock_csv: no pairs given");
  struct Row {
    std::string date;
    std::size_t pair;
    double ra, rb;
  };
  std::vector<Row> rows;
  StockIngest out;
  for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
    out.pair_names.push_back(pairs[pi].name);
    const auto series_a = detail::read_close_series(pairs[pi].csv_a);
    const auto series_b = detail::read_close_series(pairs[pi].csv_b);
    std::vector<std::pair<std::string, std::pair<double, double>>> aligned;
    for (const auto& [date, close_a] : series_a) {
      auto it = series_b.find(date);
      if (it == series_b.end()) {
        ++out.skipped_dates;
        continue;
      }
      aligned.push_back({date, {close_a, it->second}});
    }
    for (const auto& [date, close_b] : series_b) {
      if (series_a.find(date) == series_a.end()) ++out.skipped_dates;
    }
    for (std::size_t i = 1; i < aligned.size(); ++i) {
      rows.push_back(Row{aligned[i].first, pi,
                         std::log(aligned[i].second.first / aligned[i - 1].second.first),
                         std::log(aligned[i].second.second / aligned[i - 1].second.second)});
    }
  }
  if (rows.empty()) fail("ingest_stock_csv: no aligned return rows");
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.date != b.date ? a.date < b.date : a.pair < b.pair;
  });

  // Cut at 70% / 85%, nudged forward so a calendar date never straddles a
  // split boundary.
  const std::size_t n = rows.size();
  auto date_boundary = [&](std::size_t at) {
    while (at < n && at > 0 && rows[at].date == rows[at - 1].date) ++at;
    return at;
  };
  const std::size_t train_end = date_boundary(static_cast<std::size_t>(n * 0.70));
  const std::size_t val_end = date_boundary(std::max(train_end, static_cast<std::size_t>(n * 0.85)));

  auto fill = [&](std::size_t lo, std::size_t hi, Split split) {
    Dataset ds;
    ds.split = split;
    ds.x = DenseMatrix(hi - lo, 2);
    ds.block_ids.resize(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      ds.x(i - lo, 0) = rows[i].ra;
      ds.x(i - lo, 1) = rows[i].rb;
      ds.block_ids[i - lo] = rows[i].pair;
    }
    return ds;
  };
  out.train = fill(0, train_end, Split::train);
  out.val = fill(train_end, val_end, Split::val);
  out.test = fill(val_end, n, Split::test);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset JSON I/O
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& path) {
  nlohmann::json j;
  j["format"] = "depflow-dataset";
  j["version"] = 1;
  j["split"] = split_to_string(ds.split);
  nlohmann::json xs = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.x.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < ds.x.cols(); ++c) row.push_back(ds.x(i, c));
    xs.push_back(std::move(row));
  }
  j["x"] = std::move(xs);
  if (!ds.block_ids.empty()) j["block_ids"] = ds.block_ids;
  nlohmann::json tp;
  if (!ds.true_rho.empty()) tp["rho"] = ds.true_rho;
  if (ds.true_lambda) tp["lambda"] = *ds.true_lambda;
  if (!tp.empty()) j["true_params"] = std::move(tp);
  if (ds.g) {
    const std::string g_path = path + ".g.bin";
    save_matrix_binary(*ds.g, g_path);
    j["g_path"] = g_path;
  }
  std::ofstream outf(path, std::ios::binary);
  if (!outf) fail("save_dataset: cannot open ", path);
  outf << j.dump() << "\n";
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("load_dataset: cannot open ", path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "depflow-dataset") fail("load_dataset: ", path, " is not a dataset file");
  Dataset ds;
  ds.split = split_from_string(j.at("split").get<std::string>());
  const auto& xs = j.at("x");
  const std::size_t n = xs.size();
  const std::size_t p = n > 0 ? xs.at(0).size() : 0;
  ds.x = DenseMatrix(n, p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < p; ++c) ds.x(i, c) = xs.at(i).at(c).get<double>();
  if (j.contains("block_ids")) ds.block_ids = j.at("block_ids").get<std::vector<std::size_t>>();
  if (j.contains("true_params")) {
    const auto& tp = j.at("true_params");
    if (tp.contains("rho")) ds.true_rho = tp.at("rho").get<std::vector<double>>();
    if (tp.contains("lambda")) ds.true_lambda = tp.at("lambda").get<double>();
  }
  if (j.contains("g_path")) ds.g = std::make_shared<DenseMatrix>(load_matrix(j.at("g_path").get<std::string>()));
  ds.validate();
  return ds;
}

}  // namespace depflow
