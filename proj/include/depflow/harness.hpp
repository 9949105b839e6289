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

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "depflow/data.hpp"
#include "depflow/stats.hpp"
#include "depflow/svgplot.hpp"
#include "depflow/training.hpp"

namespace depflow {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

enum class ExperimentKind { synthetic_equiblocks, synthetic_fixedcov, sensitivity_sweep, stock_pairs };

inline const char* kind_to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::synthetic_equiblocks: return "synthetic-equiblocks";
    case ExperimentKind::synthetic_fixedcov: return "synthetic-fixedcov";
    case ExperimentKind::sensitivity_sweep: return "sensitivity-sweep";
    case ExperimentKind::stock_pairs: return "stock-pairs";
  }
  fail("kind_to_string: bad enum");
}

inline ExperimentKind kind_from_string(const std::string& s) {
  if (s == "synthetic-equiblocks") return ExperimentKind::synthetic_equiblocks;
  if (s == "synthetic-fixedcov") return ExperimentKind::synthetic_fixedcov;
  if (s == "sensitivity-sweep") return ExperimentKind::sensitivity_sweep;
  if (s == "stock-pairs") return ExperimentKind::stock_pairs;
  fail("unknown experiment kind '", s, "'");
}

inline const std::vector<std::string>& known_schedules() {
  static const std::vector<std::string> s{"baseline", "grid", "alternating", "joint"};
  return s;
}

/// Full recipe for one experiment: data source, schedules, seeds and the
/// shared training hyperparameters.
struct ExperimentConfig {
  int schema_version = 1;
  std::string name = "experiment";
  ExperimentKind kind = ExperimentKind::synthetic_equiblocks;

  // synthetic data
  std::string shape = "Crescent";
  std::size_t n_total = 10000;
  double rho_lo = 0.5;
  double rho_hi = 0.99;
  std::optional<double> lambda;  // fixed-cov: absent = Unif[0,1] per seed
  double pareto_alpha = 0.5;
  std::size_t block_cap = 1000;
  std::size_t n_val = 2000;
  std::size_t n_test = 2000;

  // sensitivity sweep
  std::vector<std::pair<double, double>> intervals = {
      {0.0, 0.2}, {0.2, 0.4}, {0.4, 0.6}, {0.6, 0.8}, {0.8, 1.0}};

  // stock pairs
  std::vector<StockPairSpec> stock_pairs;

  std::vector<std::string> schedules = {"baseline", "grid"};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  TrainConfig train;
  std::string out_dir = "results";

  void validate() const {
    if (schema_version != 1) fail("config: unsupported schema_version ", schema_version);
    if (seeds.empty()) fail("config: seeds list is empty");
    if (schedules.empty()) fail("config: schedules list is empty");
    for (const std::string& s : schedules) {
      bool known = false;
      for (const std::string& k : known_schedules()) known = known || k == s;
      if (!known) fail("config: unknown schedule '", s, "'");
      if (s == "alternating" && kind != ExperimentKind::synthetic_fixedcov)
        fail("config: the alternating schedule requires the fixed-covariance experiment");
      if (s == "joint" &&
          (kind == ExperimentKind::synthetic_fixedcov || kind == ExperimentKind::sensitivity_sweep))
        fail("config: the joint schedule requires block ids");
    }
    if (kind == ExperimentKind::stock_pairs && stock_pairs.empty()) fail("config: stock_pairs is empty");
    if (kind != ExperimentKind::stock_pairs && !stock_pairs.empty())
      fail("config: stock_pairs given for a non-stock experiment");
    if (!(rho_lo >= 0.0 && rho_lo <= rho_hi && rho_hi <= 1.0))
      fail("config: rho interval [", rho_lo, ",", rho_hi, "] invalid");
    for (auto [lo, hi] : intervals) {
      if (!(lo >= 0.0 && lo <= hi && hi <= 1.0)) fail("config: sweep interval [", lo, ",", hi, "] invalid");
    }
    if (has_schedule("grid") && train.grid.empty()) fail("config: grid schedule needs train.grid values");
    shape_from_string(shape);
  }

  bool has_schedule(const std::string& s) const {
    for (const std::string& k : schedules) {
      if (k == s) return true;
    }
    return false;
  }

  /// Desk-scale shrink: at most 10k training rows, 5 seeds, 6 grid values.
  void apply_fast() {
    n_total = std::min<std::size_t>(n_total, 10000);
    if (seeds.size() > 5) seeds.resize(5);
    if (train.grid.size() > 6) {
      std::vector<double> sub;
      for (std::size_t i = 0; i < 6; ++i) {
        const std::size_t at = i * (train.grid.size() - 1) / 5;
        sub.push_back(train.grid[at]);
      }
      std::sort(sub.begin(), sub.end());
      sub.erase(std::unique(sub.begin(), sub.end()), sub.end());
      train.grid = std::move(sub);
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema_version"] = schema_version;
    j["name"] = name;
    j["kind"] = kind_to_string(kind);
    j["shape"] = shape;
    j["n_total"] = n_total;
    j["rho_interval"] = {rho_lo, rho_hi};
    if (lambda) j["lambda"] = *lambda;
    j["pareto_alpha"] = pareto_alpha;
    j["block_cap"] = block_cap;
    j["n_val"] = n_val;
    j["n_test"] = n_test;
    if (kind == ExperimentKind::sensitivity_sweep) {
      nlohmann::json iv = nlohmann::json::array();
      for (auto [lo, hi] : intervals) iv.push_back({lo, hi});
      j["intervals"] = std::move(iv);
    }
    if (!stock_pairs.empty()) {
      nlohmann::json sp = nlohmann::json::array();
      for (const StockPairSpec& p : stock_pairs)
        sp.push_back({{"name", p.name}, {"a_csv", p.csv_a}, {"b_csv", p.csv_b}});
      j["stock_pairs"] = std::move(sp);
    }
    j["schedules"] = schedules;
    j["seeds"] = seeds;
    j["out_dir"] = out_dir;
    j["train"] = train_to_json(train);
    return j;
  }

  static nlohmann::json train_to_json(const TrainConfig& t) {
    return {{"flow_layers", t.flow_layers},
            {"hidden", t.hidden},
            {"s_max", t.s_max},
            {"batch_size", t.batch_size},
            {"epochs", t.epochs},
            {"learning_rate", t.learning_rate},
            {"lr_decay", t.lr_decay},
            {"weight_decay", t.weight_decay},
            {"grad_clip", t.grad_clip},
            {"patience", t.patience},
            {"grid", t.grid},
            {"alt_flow_stages", t.alt_flow_stages},
            {"alt_flow_epochs", t.alt_flow_epochs},
            {"alt_lambda_stages", t.alt_lambda_stages},
            {"alt_lambda_steps", t.alt_lambda_steps},
            {"alt_lambda_init", t.alt_lambda_init},
            {"lambda_lr", t.lambda_lr},
            {"joint_rho_init", t.joint_rho_init},
            {"dense_inverse_max_n", t.dense_inverse_max_n}};
  }

  static TrainConfig train_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> allowed{
        "flow_layers",    "hidden",          "s_max",           "batch_size",       "epochs",
        "learning_rate",  "lr_decay",        "weight_decay",    "grad_clip",        "patience",
        "grid",           "alt_flow_stages", "alt_flow_epochs", "alt_lambda_stages", "alt_lambda_steps",
        "alt_lambda_init", "lambda_lr",      "joint_rho_init",  "dense_inverse_max_n"};
    reject_unknown_keys(j, allowed, "train");
    TrainConfig t;
    t.flow_layers = j.value("flow_layers", t.flow_layers);
    if (j.contains("hidden")) t.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    t.s_max = j.value("s_max", t.s_max);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.epochs = j.value("epochs", t.epochs);
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.lr_decay = j.value("lr_decay", t.lr_decay);
    t.weight_decay = j.value("weight_decay", t.weight_decay);
    t.grad_clip = j.value("grad_clip", t.grad_clip);
    t.patience = j.value("patience", t.patience);
    if (j.contains("grid")) t.grid = j.at("grid").get<std::vector<double>>();
    t.alt_flow_stages = j.value("alt_flow_stages", t.alt_flow_stages);
    t.alt_flow_epochs = j.value("alt_flow_epochs", t.alt_flow_epochs);
    t.alt_lambda_stages = j.value("alt_lambda_stages", t.alt_lambda_stages);
    t.alt_lambda_steps = j.value("alt_lambda_steps", t.alt_lambda_steps);
    t.alt_lambda_init = j.value("alt_lambda_init", t.alt_lambda_init);
    t.lambda_lr = j.value("lambda_lr", t.lambda_lr);
    t.joint_rho_init = j.value("joint_rho_init", t.joint_rho_init);
    t.dense_inverse_max_n = j.value("dense_inverse_max_n", t.dense_inverse_max_n);
    return t;
  }

  static void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                                  const char* where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool ok = false;
      for (const std::string& k : allowed) ok = ok || k == it.key();
      if (!ok) fail("config: unknown key '", it.key(), "' in ", where);
    }
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    static const std::vector<std::string> allowed{
        "schema_version", "name",     "kind",    "shape",     "n_total",    "rho_interval",
        "lambda",         "pareto_alpha", "block_cap", "n_val", "n_test",   "intervals",
        "stock_pairs",    "schedules", "seeds",  "train",     "out_dir"};
    reject_unknown_keys(j, allowed, "config");
    ExperimentConfig c;
    c.schema_version = j.value("schema_version", 1);
    c.name = j.value("name", c.name);
    c.kind = kind_from_string(j.at("kind").get<std::string>());
    c.shape = j.value("shape", c.shape);
    c.n_total = j.value("n_total", c.n_total);
    if (j.contains("rho_interval")) {
      const auto iv = j.at("rho_interval").get<std::vector<double>>();
      if (iv.size() != 2) fail("config: rho_interval must have two entries");
      c.rho_lo = iv[0];
      c.rho_hi = iv[1];
    }
    if (j.contains("lambda") && !j.at("lambda").is_null()) c.lambda = j.at("lambda").get<double>();
    c.pareto_alpha = j.value("pareto_alpha", c.pareto_alpha);
    c.block_cap = j.value("block_cap", c.block_cap);
    c.n_val = j.value("n_val", c.n_val);
    c.n_test = j.value("n_test", c.n_test);
    if (j.contains("intervals")) {
      c.intervals.clear();
      for (const auto& iv : j.at("intervals")) {
        if (iv.size() != 2) fail("config: each sweep interval needs two entries");
        c.intervals.push_back({iv.at(0).get<double>(), iv.at(1).get<double>()});
      }
    }
    if (j.contains("stock_pairs")) {
      for (const auto& sp : j.at("stock_pairs")) {
        reject_unknown_keys(sp, {"name", "a_csv", "b_csv"}, "stock_pairs");
        c.stock_pairs.push_back(StockPairSpec{sp.at("name").get<std::string>(),
                                              sp.at("a_csv").get<std::string>(),
                                              sp.at("b_csv").get<std::string>()});
      }
    }
    if (j.contains("schedules")) c.schedules = j.at("schedules").get<std::vector<std::string>>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("train")) c.train = train_from_json(j.at("train"));
    c.out_dir = j.value("out_dir", c.out_dir);
    c.validate();
    return c;
  }

  SyntheticSpec synthetic_spec(std::uint64_t seed) const {
    SyntheticSpec spec;
    spec.shape = shape_from_string(shape);
    spec.n_total = n_total;
    spec.kind = kind == ExperimentKind::synthetic_fixedcov ? DependencyKind::fixedcov
                                                           : DependencyKind::equiblocks;
    spec.rho_lo = rho_lo;
    spec.rho_hi = std::min(rho_hi, std::nextafter(1.0, 0.0));
    spec.lambda = lambda;
    spec.pareto_alpha = pareto_alpha;
    spec.block_cap = block_cap;
    spec.seed = seed;
    spec.n_val = n_val;
    spec.n_test = n_test;
    return spec;
  }
};

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& cfg) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(cfg.to_json().dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Cells and results
// ---------------------------------------------------------------------------

struct CellMetrics {
  std::string cell;       // file tag, unique within the experiment
  std::string schedule;
  std::uint64_t seed = 0;
  std::size_t interval_index = static_cast<std::size_t>(-1);  // sweep only
  bool failed = false;
  std::string error;
  double test_nll = std::numeric_limits<double>::quiet_NaN();
  double best_val_nll = std::numeric_limits<double>::quiet_NaN();
  std::size_t best_epoch = 0;
  double grid_value = std::numeric_limits<double>::quiet_NaN();
  double lambda_hat = std::numeric_limits<double>::quiet_NaN();
  double rho_mae = std::numeric_limits<double>::quiet_NaN();
  double lambda_abs_err = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;

  nlohmann::json extra;  // curves, grid points, learned parameters

  // wall_seconds stays out of the JSON: cell files are part of the
  // byte-reproducible artifact set, timings go to timings.csv instead.
  nlohmann::json to_json() const {
    nlohmann::json j{{"cell", cell},       {"schedule", schedule},
                     {"seed", seed},       {"failed", failed},
                     {"test_nll", test_nll}, {"best_val_nll", best_val_nll},
                     {"best_epoch", best_epoch}};
    if (interval_index != static_cast<std::size_t>(-1)) j["interval_index"] = interval_index;
    if (!error.empty()) j["error"] = error;
    if (std::isfinite(grid_value)) j["grid_value"] = grid_value;
    if (std::isfinite(lambda_hat)) j["lambda_hat"] = lambda_hat;
    if (std::isfinite(rho_mae)) j["rho_mae"] = rho_mae;
    if (std::isfinite(lambda_abs_err)) j["lambda_abs_err"] = lambda_abs_err;
    if (!extra.empty()) j["extra"] = extra;
    return j;
  }

  static CellMetrics from_json(const nlohmann::json& j) {
    CellMetrics m;
    m.cell = j.at("cell").get<std::string>();
    m.schedule = j.at("schedule").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.failed = j.value("failed", false);
    m.error = j.value("error", "");
    m.test_nll = j.value("test_nll", std::numeric_limits<double>::quiet_NaN());
    m.best_val_nll = j.value("best_val_nll", std::numeric_limits<double>::quiet_NaN());
    m.best_epoch = j.value("best_epoch", 0u);
    m.interval_index = j.value("interval_index", static_cast<std::size_t>(-1));
    m.grid_value = j.value("grid_value", std::numeric_limits<double>::quiet_NaN());
    m.lambda_hat = j.value("lambda_hat", std::numeric_limits<double>::quiet_NaN());
    m.rho_mae = j.value("rho_mae", std::numeric_limits<double>::quiet_NaN());
    m.lambda_abs_err = j.value("lambda_abs_err", std::numeric_limits<double>::quiet_NaN());
    m.wall_seconds = j.value("wall_seconds", 0.0);
    if (j.contains("extra")) m.extra = j.at("extra");
    return m;
  }
};

struct ExperimentRun {
  ExperimentConfig config;
  std::string out_dir;
  std::vector<CellMetrics> cells;
  int exit_code = 0;

  std::vector<const CellMetrics*> cells_for(const std::string& schedule,
                                            std::size_t interval = static_cast<std::size_t>(-1)) const {
    std::vector<const CellMetrics*> out;
    for (const CellMetrics& c : cells) {
      if (c.schedule == schedule && c.interval_index == interval) out.push_back(&c);
    }
    return out;
  }
};

struct RunOptions {
  std::size_t jobs = 1;
  bool force = false;
  bool fast = false;
};

// ---------------------------------------------------------------------------
// Internals
// ---------------------------------------------------------------------------

namespace harnessdetail {

namespace fs = std::filesystem;

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write ", path);
  out << content;
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

template <typename F>
void parallel_for(std::size_t count, std::size_t jobs, F&& body) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        body(i);
      }
    });
  }
  for (std::thread& t : workers) t.join();
}

/// MAE between an estimated correlation (shared or per block) and the true
/// per-block values, over blocks with at least two members.
inline double rho_mae(const std::vector<double>& true_rho, const std::vector<std::size_t>& sizes,
                      const std::vector<double>& est) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < true_rho.size(); ++k) {
    if (sizes[k] < 2) continue;
    const double e = est.size() == 1 ? est[0] : est.at(k);
    sum += std::abs(e - true_rho[k]);
    ++count;
  }
  if (count == 0) fail("rho_mae: no blocks with two or more members");
  return sum / static_cast<double>(count);
}

inline nlohmann::json curves_json(const TrainResult& r) {
  return {{"train_loss", r.train_loss}, {"val_nll", r.val_nll}};
}

struct CellContext {
  const ExperimentConfig& cfg;
  std::string out_dir;
  std::size_t interval_index = static_cast<std::size_t>(-1);
  std::string tag_prefix;
  std::string config_hash;
};

inline CellMetrics run_schedule_cell(const CellContext& ctx, const std::string& schedule,
                                     std::uint64_t seed, const Dataset& train, const Dataset& val,
                                     const Dataset& test, std::shared_ptr<const Spectral> spectral) {
  CellMetrics m;
  m.cell = ctx.tag_prefix + schedule + "-seed" + std::to_string(seed);
  m.schedule = schedule;
  m.seed = seed;
  m.interval_index = ctx.interval_index;
  TrainConfig tc = ctx.cfg.train;
  tc.seed = seed;
  try {
    TrainResult result;
    if (schedule == "baseline") {
      result = train_baseline(tc, train, val, test);
      if (!train.true_rho.empty()) {
        const auto blocks = BlockStructure::from_assignments(train.block_ids);
        m.rho_mae = rho_mae(train.true_rho, blocks->sizes, {0.0});
      }
    } else if (schedule == "grid") {
      GridOutcome outcome = spectral ? train_grid_fixedcov(tc, train, val, test, spectral)
                                     : train_grid_equiblocks(tc, train, val, test);
      nlohmann::json points = nlohmann::json::array();
      for (const GridPoint& p : outcome.points) {
        nlohmann::json pj{{"value", p.value}, {"failed", p.failed}};
        if (p.failed) {
          pj["error"] = p.error;
        } else {
          pj["best_val_nll"] = p.result.best_val_nll;
          pj["test_nll"] = p.result.test_nll;
        }
        points.push_back(std::move(pj));
      }
      result = outcome.points[outcome.best_index].result;
      m.grid_value = outcome.best_value();
      m.extra["grid_points"] = std::move(points);
      if (!train.true_rho.empty()) {
        const auto blocks = BlockStructure::from_assignments(train.block_ids);
        m.rho_mae = rho_mae(train.true_rho, blocks->sizes, {m.grid_value});
      }
      if (train.true_lambda && result.lambda_hat) m.lambda_abs_err = std::abs(*result.lambda_hat - *train.true_lambda);
    } else if (schedule == "alternating") {
      result = train_alternating(tc, train, val, test, spectral);
      if (train.true_lambda && result.lambda_hat) m.lambda_abs_err = std::abs(*result.lambda_hat - *train.true_lambda);
    } else if (schedule == "joint") {
      result = train_joint(tc, train, val, test);
      if (!train.true_rho.empty()) {
        const auto blocks = BlockStructure::from_assignments(train.block_ids);
        m.rho_mae = rho_mae(train.true_rho, blocks->sizes, result.rho_hat);
        m.extra["rho_hat"] = result.rho_hat;
      }
    } else {
      fail("unknown schedule '", schedule, "'");
    }
    m.test_nll = result.test_nll;
    m.best_val_nll = result.best_val_nll;
    m.best_epoch = result.best_epoch;
    m.wall_seconds = result.wall_seconds;
    if (result.lambda_hat) m.lambda_hat = *result.lambda_hat;
    m.extra["curves"] = curves_json(result);
    result.flow.save(ctx.out_dir + "/checkpoints/" + m.cell + ".flow.json");
  } catch (const std::exception& e) {
    m.failed = true;
    m.error = e.what();
  }
  m.extra["config_hash"] = ctx.config_hash;
  write_text(ctx.out_dir + "/cells/" + m.cell + ".json", m.to_json().dump(2) + "\n");
  return m;
}

inline std::string schedule_label(const std::string& s) {
  if (s == "baseline") return "Baseline";
  if (s == "grid") return "Grid Search";
  if (s == "alternating") return "Alternating";
  if (s == "joint") return "Joint";
  return s;
}

/// table.csv: one row per cell plus aggregate rows; table.md: paper-style
/// summary with one-sided paired t-tests against the baseline.
inline void write_tables(ExperimentRun& run) {
  std::ostringstream csv;
  csv << "interval,schedule,seed,status,test_nll,best_val_nll,grid_value,lambda_hat,rho_mae,"
         "lambda_abs_err\n";
  std::ostringstream timings;
  timings << "cell,wall_seconds\n";
  for (const CellMetrics& c : run.cells) {
    csv << (c.interval_index == static_cast<std::size_t>(-1) ? std::string("-")
                                                             : std::to_string(c.interval_index))
        << ',' << c.schedule << ',' << c.seed << ',' << (c.failed ? "failed" : "ok") << ','
        << format_number(c.test_nll) << ',' << format_number(c.best_val_nll) << ','
        << format_number(c.grid_value) << ',' << format_number(c.lambda_hat) << ','
        << format_number(c.rho_mae) << ',' << format_number(c.lambda_abs_err) << '\n';
    timings << c.cell << ',' << format_number(c.wall_seconds) << '\n';
  }
  // Cell timings are not reproducible, so they live in their own file and
  // are skipped when re-aggregating loaded results.
  bool have_timings = false;
  for (const CellMetrics& c : run.cells) have_timings = have_timings || c.wall_seconds > 0.0;
  if (have_timings) write_text(run.out_dir + "/timings.csv", timings.str());

  std::vector<std::size_t> intervals;
  for (const CellMetrics& c : run.cells) {
    if (std::find(intervals.begin(), intervals.end(), c.interval_index) == intervals.end())
      intervals.push_back(c.interval_index);
  }
  std::sort(intervals.begin(), intervals.end());

  std::ostringstream md;
  md << "# " << run.config.name << "\n\n";
  md << "kind: " << kind_to_string(run.config.kind) << ", seeds: " << run.config.seeds.size()
     << ", hash: " << config_hash(run.config) << "\n\n";
  md << "| interval | schedule | mean test NLL | sd | p vs baseline | mean rho MAE | cells |\n";
  md << "|---|---|---|---|---|---|---|\n";

  for (std::size_t iv : intervals) {
    std::vector<double> baseline_nll;
    std::vector<std::uint64_t> baseline_seeds;
    for (const CellMetrics* c : run.cells_for("baseline", iv)) {
      if (!c->failed) {
        baseline_nll.push_back(c->test_nll);
        baseline_seeds.push_back(c->seed);
      }
    }
    for (const std::string& schedule : run.config.schedules) {
      const auto cells = run.cells_for(schedule, iv);
      if (cells.empty()) continue;
      std::vector<double> nll, mae;
      std::vector<std::uint64_t> seeds_ok;
      std::size_t failed = 0;
      for (const CellMetrics* c : cells) {
        if (c->failed) {
          ++failed;
          continue;
        }
        nll.push_back(c->test_nll);
        seeds_ok.push_back(c->seed);
        if (std::isfinite(c->rho_mae)) mae.push_back(c->rho_mae);
      }
      std::string pval = "-";
      if (schedule != "baseline" && nll.size() >= 2 && nll.size() == baseline_nll.size() &&
          seeds_ok == baseline_seeds) {
        pval = format_number(paired_t_test_one_sided(nll, baseline_nll));
      }
      std::string mean_s = "-", sd_s = "-", mae_s = "-";
      if (!nll.empty()) {
        const MeanSd ms = mean_sd(nll);
        mean_s = format_number(ms.mean);
        sd_s = format_number(ms.sd);
        // Aggregate rows in the CSV as well.
        csv << (iv == static_cast<std::size_t>(-1) ? std::string("-") : std::to_string(iv)) << ','
            << schedule << ",mean,ok," << format_number(ms.mean) << ",,,,"
            << (mae.empty() ? "" : format_number(mean_sd(mae).mean)) << ",,\n";
      }
      if (!mae.empty()) mae_s = format_number(mean_sd(mae).mean);
      md << "| " << (iv == static_cast<std::size_t>(-1) ? std::string("-") : std::to_string(iv)) << " | "
         << schedule_label(schedule) << " | " << mean_s << " | " << sd_s << " | " << pval << " | "
         << mae_s << " | " << (cells.size() - failed) << "/" << cells.size()
         << (failed ? " (failures flagged)" : "") << " |\n";
    }
  }

  write_text(run.out_dir + "/table.csv", csv.str());
  write_text(run.out_dir + "/table.md", md.str());
}

inline void write_failures(const ExperimentRun& run) {
  nlohmann::json failures = nlohmann::json::array();
  for (const CellMetrics& c : run.cells) {
    if (c.failed) failures.push_back({{"cell", c.cell}, {"error", c.error}});
  }
  if (!failures.empty())
    write_text(run.out_dir + "/failures.json", failures.dump(2) + "\n");
}

inline void sort_cells(std::vector<CellMetrics>& cells) {
  std::sort(cells.begin(), cells.end(), [](const CellMetrics& a, const CellMetrics& b) {
    if (a.interval_index != b.interval_index) return a.interval_index < b.interval_index;
    if (a.schedule != b.schedule) return a.schedule < b.schedule;
    return a.seed < b.seed;
  });
}

}  // namespace harnessdetail

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

/// Resolves the output directory: CLI override first, then the config value;
/// relative paths land under $DEPFLOW_OUT when that is set.
inline std::string resolve_out_dir(const std::string& configured, const std::string& override_dir) {
  std::string dir = override_dir.empty() ? configured : override_dir;
  if (!dir.empty() && dir.front() != '/') {
    if (const char* root = std::getenv("DEPFLOW_OUT")) dir = std::string(root) + "/" + dir;
  }
  return dir;
}

/// Executes all (schedule x seed) cells, writes per-cell JSON, checkpoints,
/// and the aggregated tables. Refuses an existing output directory unless
/// forced; a directory holding a different config hash is always refused
/// without --force. Exit code 0 on full success, 2 with failed cells.
inline ExperimentRun run_experiment(ExperimentConfig config, const std::string& out_override,
                                    const RunOptions& options) {
  namespace fs = std::filesystem;
  if (options.fast) config.apply_fast();
  config.validate();
  const std::string out_dir = resolve_out_dir(config.out_dir, out_override);

  if (fs::exists(out_dir)) {
    const std::string existing_cfg = out_dir + "/config.json";
    if (!options.force) {
      if (fs::exists(existing_cfg)) {
        std::ifstream in(existing_cfg);
        nlohmann::json j;
        in >> j;
        if (j.value("hash", "") != config_hash(config))
          fail("output directory ", out_dir, " holds results for a different config (hash mismatch); ",
               "refusing to mix results — use --force to overwrite");
      }
      fail("output directory ", out_dir, " already exists; use --force to overwrite");
    }
    fs::remove_all(out_dir);
  }
  fs::create_directories(out_dir + "/cells");
  fs::create_directories(out_dir + "/checkpoints");

  ExperimentRun run;
  run.config = config;
  run.out_dir = out_dir;
  const std::string cfg_hash = config_hash(config);
  harnessdetail::write_text(out_dir + "/config.json",
                            nlohmann::json{{"config", config.to_json()}, {"hash", cfg_hash}}.dump(2) +
                                "\n");

  std::mutex cells_mutex;
  auto add_cells = [&](std::vector<CellMetrics> batch) {
    std::lock_guard<std::mutex> lock(cells_mutex);
    for (CellMetrics& m : batch) run.cells.push_back(std::move(m));
  };

  if (config.kind == ExperimentKind::sensitivity_sweep) {
    // Cells are (interval x seed); each runs baseline + grid on its own draw.
    struct SweepCell {
      std::size_t interval;
      std::uint64_t seed;
    };
    std::vector<SweepCell> grid_cells;
    for (std::size_t iv = 0; iv < config.intervals.size(); ++iv)
      for (std::uint64_t seed : config.seeds) grid_cells.push_back({iv, seed});
    harnessdetail::parallel_for(grid_cells.size(), options.jobs, [&](std::size_t i) {
      const auto [iv, seed] = grid_cells[i];
      harnessdetail::CellContext ctx{config, out_dir, iv, detail::str("i", iv, "-"), cfg_hash};
      std::vector<CellMetrics> batch;
      try {
        ExperimentConfig variant = config;
        variant.rho_lo = config.intervals[iv].first;
        variant.rho_hi = config.intervals[iv].second;
        const SyntheticBundle bundle = make_synthetic(variant.synthetic_spec(seed));
        for (const std::string& schedule : config.schedules)
          batch.push_back(harnessdetail::run_schedule_cell(ctx, schedule, seed, bundle.train, bundle.val,
                                                           bundle.test, nullptr));
      } catch (const std::exception& e) {
        for (const std::string& schedule : config.schedules) {
          CellMetrics m;
          m.cell = ctx.tag_prefix + schedule + "-seed" + std::to_string(seed);
          m.schedule = schedule;
          m.seed = seed;
          m.interval_index = iv;
          m.failed = true;
          m.error = e.what();
          batch.push_back(std::move(m));
        }
      }
      add_cells(std::move(batch));
    });
  } else if (config.kind == ExperimentKind::stock_pairs) {
    const StockIngest ingest = ingest_stock_csv(config.stock_pairs);
    if (ingest.skipped_dates > 0)
      std::fprintf(stderr, "warning: %zu dates lacked alignment within a pair and were skipped\n",
                   ingest.skipped_dates);
    harnessdetail::parallel_for(config.seeds.size(), options.jobs, [&](std::size_t i) {
      const std::uint64_t seed = config.seeds[i];
      harnessdetail::CellContext ctx{config, out_dir, static_cast<std::size_t>(-1), "", cfg_hash};
      std::vector<CellMetrics> batch;
      for (const std::string& schedule : config.schedules)
        batch.push_back(harnessdetail::run_schedule_cell(ctx, schedule, seed, ingest.train, ingest.val,
                                                         ingest.test, nullptr));
      add_cells(std::move(batch));
    });
  } else {
    // Synthetic experiments: one worker per seed; the data draw and (for the
    // fixed-covariance kind) the spectral decomposition are shared by every
    // schedule of that seed.
    const bool needs_spectral = config.kind == ExperimentKind::synthetic_fixedcov &&
                                (config.has_schedule("grid") || config.has_schedule("alternating"));
    harnessdetail::parallel_for(config.seeds.size(), options.jobs, [&](std::size_t i) {
      const std::uint64_t seed = config.seeds[i];
      harnessdetail::CellContext ctx{config, out_dir, static_cast<std::size_t>(-1), "", cfg_hash};
      std::vector<CellMetrics> batch;
      try {
        const SyntheticBundle bundle = make_synthetic(config.synthetic_spec(seed));
        std::shared_ptr<const Spectral> spectral;
        if (needs_spectral) spectral = FixedMixture::decompose(*bundle.train.g);
        for (const std::string& schedule : config.schedules)
          batch.push_back(harnessdetail::run_schedule_cell(
              ctx, schedule, seed, bundle.train, bundle.val, bundle.test,
              schedule == "grid" || schedule == "alternating" ? spectral : nullptr));
      } catch (const std::exception& e) {
        for (const std::string& schedule : config.schedules) {
          CellMetrics m;
          m.cell = schedule + "-seed" + std::to_string(seed);
          m.schedule = schedule;
          m.seed = seed;
          m.failed = true;
          m.error = e.what();
          batch.push_back(std::move(m));
        }
      }
      add_cells(std::move(batch));
    });
  }

  harnessdetail::sort_cells(run.cells);
  harnessdetail::write_tables(run);
  harnessdetail::write_failures(run);

  if (config.kind == ExperimentKind::sensitivity_sweep) {
    // Per-interval comparison table and the line plot.
    std::ostringstream csv;
    csv << "interval,rho_lo,rho_hi,baseline_mean,adjusted_mean,gap,p_value\n";
    std::vector<std::string> labels;
    LineSeries base_series{"baseline", "#b2383f", {}};
    LineSeries adj_series{"adjusted", "#2c6fbb", {}};
    for (std::size_t iv = 0; iv < config.intervals.size(); ++iv) {
      std::vector<double> base_nll, adj_nll;
      for (const CellMetrics* c : run.cells_for("baseline", iv))
        if (!c->failed) base_nll.push_back(c->test_nll);
      for (const CellMetrics* c : run.cells_for("grid", iv))
        if (!c->failed) adj_nll.push_back(c->test_nll);
      const double bm = base_nll.empty() ? std::numeric_limits<double>::quiet_NaN() : mean_sd(base_nll).mean;
      const double am = adj_nll.empty() ? std::numeric_limits<double>::quiet_NaN() : mean_sd(adj_nll).mean;
      std::string p = "nan";
      if (base_nll.size() == adj_nll.size() && base_nll.size() >= 2)
        p = harnessdetail::format_number(paired_t_test_one_sided(adj_nll, base_nll));
      csv << iv << ',' << config.intervals[iv].first << ',' << config.intervals[iv].second << ','
          << harnessdetail::format_number(bm) << ',' << harnessdetail::format_number(am) << ','
          << harnessdetail::format_number(bm - am) << ',' << p << '\n';
      labels.push_back(detail::str("[", config.intervals[iv].first, ",", config.intervals[iv].second, "]"));
      base_series.values.push_back(bm);
      adj_series.values.push_back(am);
    }
    harnessdetail::write_text(out_dir + "/sweep.csv", csv.str());
    render_line_chart(labels, {base_series, adj_series}, "Test NLL vs dependency strength",
                      out_dir + "/sweep.svg");
  }

  for (const CellMetrics& c : run.cells) {
    if (c.failed) run.exit_code = 2;
  }
  return run;
}

/// Loads a completed experiment directory (used by `depflow table` and to
/// reuse expensive runs).
inline ExperimentRun load_experiment(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream cfg_in(dir + "/config.json");
  if (!cfg_in) fail("load_experiment: no config.json in ", dir);
  nlohmann::json wrapper;
  cfg_in >> wrapper;
  ExperimentRun run;
  run.config = ExperimentConfig::from_json(wrapper.at("config"));
  run.out_dir = dir;
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir + "/cells")) {
    if (entry.path().extension() == ".json") files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  for (const std::string& f : files) {
    std::ifstream in(f);
    nlohmann::json j;
    in >> j;
    run.cells.push_back(CellMetrics::from_json(j));
  }
  harnessdetail::sort_cells(run.cells);
  for (const CellMetrics& c : run.cells) {
    if (c.failed) run.exit_code = 2;
  }
  return run;
}

/// True when `dir` holds a finished run of exactly this config.
inline bool experiment_complete(const std::string& dir, const ExperimentConfig& config) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir + "/config.json") || !fs::exists(dir + "/table.csv")) return false;
  std::ifstream in(dir + "/config.json");
  nlohmann::json wrapper;
  in >> wrapper;
  if (wrapper.value("hash", "") != config_hash(config)) return false;
  std::size_t expected = config.seeds.size() * config.schedules.size();
  if (config.kind == ExperimentKind::sensitivity_sweep) expected *= config.intervals.size();
  std::size_t found = 0;
  for (const auto& entry : fs::directory_iterator(dir + "/cells")) found += entry.path().extension() == ".json";
  return found == expected;
}

/// Reuses a completed directory when the hash matches, otherwise runs fresh.
inline ExperimentRun run_or_load_experiment(const ExperimentConfig& config, const std::string& dir,
                                            const RunOptions& options) {
  ExperimentConfig effective = config;
  if (options.fast) effective.apply_fast();
  if (experiment_complete(dir, effective)) return load_experiment(dir);
  RunOptions opts = options;
  opts.force = true;
  return run_experiment(config, dir, opts);
}

}  // namespace depflow
