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

#include <chrono>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "depflow/data.hpp"
#include "depflow/likelihood.hpp"

namespace depflow {

/// Hyperparameters for one training run. Schedule-specific fields are
/// ignored by schedules that do not use them.
struct TrainConfig {
  // flow architecture
  std::size_t flow_layers = 16;
  std::vector<std::size_t> hidden = {128, 128};
  double s_max = 5.0;

  // optimization
  std::size_t batch_size = 256;
  std::size_t epochs = 100;
  double learning_rate = 0.01;
  double lr_decay = 0.98;         // multiplied in per epoch
  double weight_decay = 0.0;      // flow parameters only, never lambda/rho
  double grad_clip = 100.0;       // global-norm clip per batch
  std::size_t patience = 15;      // early stopping on validation i.i.d. NLL
  std::uint64_t seed = 0;

  // grid schedule
  std::vector<double> grid;       // rho values (equiblocks) or lambda values (fixed cov)

  // alternating schedule
  std::size_t alt_flow_stages = 5;
  std::size_t alt_flow_epochs = 25;
  std::size_t alt_lambda_stages = 4;
  std::size_t alt_lambda_steps = 100;
  // First value of the published init sweep {0.99, 0.9, 0.75, 0.5}. Starting
  // near independence is the robust default: on truly independent data the
  // flow never contracts to justify a smaller lambda, while on dependent
  // data the rotated energies pull lambda down to the truth regardless.
  double alt_lambda_init = 0.99;
  double lambda_lr = 0.1;

  // joint schedule
  double joint_rho_init = 0.25;

  // covariance plumbing
  std::size_t dense_inverse_max_n = 5000;

  // Pins the dependency parameters at independence (lambda = 1 / rho = 0)
  // while keeping the schedule's control flow; every schedule then matches
  // the baseline update-for-update.
  bool pin_dependency = false;

  void validate(bool dependent_cov) const {
    if (flow_layers == 0) fail("TrainConfig: need at least one flow layer");
    if (hidden.empty()) fail("TrainConfig: conditioner needs at least one hidden layer");
    if (epochs == 0 && alt_flow_epochs == 0) fail("TrainConfig: nothing to train");
    if (batch_size < 1) fail("TrainConfig: batch_size must be >= 1");
    if (dependent_cov && batch_size < 2)
      fail("TrainConfig: batch_size must be >= 2 with a non-identity covariance");
    if (!(learning_rate > 0.0)) fail("TrainConfig: learning_rate must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("TrainConfig: lr_decay outside (0,1]");
  }
};

struct TrainResult {
  FlowModel flow;                      // checkpoint with minimal validation NLL
  std::optional<double> lambda_hat;    // alternating / fixed-cov grid
  std::vector<double> rho_hat;         // per block (joint) or single shared value (grid)
  std::vector<double> train_loss;      // mean batch loss per epoch
  std::vector<double> val_nll;         // index 0 is the untrained model
  std::size_t best_epoch = 0;
  double best_val_nll = std::numeric_limits<double>::infinity();
  double test_nll = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string note;
  std::vector<std::vector<double>> lambda_stage_trace;  // alternating: exact objective per accepted step
};

// ---------------------------------------------------------------------------
// Adamax
// ---------------------------------------------------------------------------

struct AdamaxState {
  std::vector<DenseMatrix> m;      // first moment
  std::vector<DenseMatrix> u;      // infinity-norm accumulator
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamaxState init(const std::vector<DenseMatrix*>& params) {
    AdamaxState s;
    s.m.reserve(params.size());
    s.u.reserve(params.size());
    for (const DenseMatrix* p : params) {
      s.m.emplace_back(p->rows(), p->cols());
      s.u.emplace_back(p->rows(), p->cols());
    }
    return s;
  }
};

/// One Adamax update with decoupled weight decay on the masked parameters:
///   m <- b1 m + (1 - b1) g,  u <- max(b2 u, |g|),
///   theta <- theta - lr/(1 - b1^t) * m / (u + eps),
///   theta <- theta * (1 - lr * wd)        (only where decay_mask is set).
inline void adamax_step(const std::vector<DenseMatrix*>& params, const std::vector<DenseMatrix>& grads,
                        AdamaxState& state, double lr, double weight_decay,
                        const std::vector<bool>& decay_mask, const std::vector<std::string>& names) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    fail("adamax_step: parameter/gradient/state size mismatch");
  ++state.step;
  const double correction = lr / (1.0 - std::pow(state.beta1, static_cast<double>(state.step)));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const DenseMatrix& g = grads[k];
    if (!all_finite(g)) fail("adamax_step: non-finite gradient for parameter '",
                             k < names.size() ? names[k] : detail::str("#", k), "'");
    DenseMatrix& theta = *params[k];
    DenseMatrix& m = state.m[k];
    DenseMatrix& u = state.u[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g.storage()[i];
      m.storage()[i] = state.beta1 * m.storage()[i] + (1.0 - state.beta1) * gi;
      u.storage()[i] = std::max(state.beta2 * u.storage()[i], std::abs(gi));
      theta.storage()[i] -= correction * m.storage()[i] / (u.storage()[i] + state.eps);
    }
    if (weight_decay != 0.0 && k < decay_mask.size() && decay_mask[k]) {
      const double keep = 1.0 - lr * weight_decay;
      for (double& x : theta.storage()) x *= keep;
    }
  }
}

// ---------------------------------------------------------------------------
// Shared training session
// ---------------------------------------------------------------------------

namespace traindetail {

/// Epoch batches: shuffled indices partitioned into batch_size chunks; a
/// trailing chunk of size < 2 is dropped (the off-diagonal estimator weight
/// needs two members, and a single leftover row carries negligible signal).
inline std::vector<BatchSelection> make_batches(std::vector<std::size_t>& perm, std::size_t batch_size,
                                                Rng& rng) {
  rng.shuffle(perm);
  std::vector<BatchSelection> batches;
  for (std::size_t start = 0; start < perm.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, perm.size());
    if (end - start < 2) break;
    batches.push_back(BatchSelection{std::vector<std::size_t>(perm.begin() + start, perm.begin() + end)});
  }
  if (batches.empty()) fail("training: dataset too small for batch partitioning");
  return batches;
}

struct Session {
  const TrainConfig& cfg;
  const Dataset& train;
  const Dataset& val;
  const Dataset& test;

  FlowModel flow;
  std::vector<DenseMatrix*> flow_params;
  std::vector<std::string> names;
  std::vector<bool> decay_mask;

  // joint mode
  bool joint = false;
  std::shared_ptr<const BlockStructure> blocks;
  DenseMatrix rho_raw;  // 1 x N

  AdamaxState opt;
  Rng rng;
  std::vector<std::size_t> perm;

  TrainResult result;
  FlowModel best_flow;
  DenseMatrix best_rho_raw;
  std::size_t since_best = 0;
  std::size_t global_epoch = 0;
  bool stopped = false;

  Session(const TrainConfig& cfg_, const Dataset& train_, const Dataset& val_, const Dataset& test_)
      : cfg(cfg_), train(train_), val(val_), test(test_), rng(cfg_.seed) {
    flow = FlowModel::make(train.dim(), cfg.flow_layers, cfg.hidden, cfg.s_max, rng);
    flow_params = flow.param_values();
    names = flow.param_names();
    decay_mask.assign(flow_params.size(), true);
    perm.resize(train.n());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  }

  void enable_joint(std::shared_ptr<const BlockStructure> blocks_, double rho_init) {
    joint = true;
    blocks = std::move(blocks_);
    rho_raw = DenseMatrix(1, blocks->n_blocks(), logit(rho_init / EquiBlocks::kRhoMax));
  }

  std::vector<DenseMatrix*> trainable() {
    std::vector<DenseMatrix*> all = flow_params;
    if (joint) all.push_back(&rho_raw);
    return all;
  }

  void finish_setup() {
    if (joint) {
      names.push_back("rho_raw");
      decay_mask.push_back(false);  // dependency parameters are never decayed
    }
    opt = AdamaxState::init(trainable());
    record_validation();  // epoch 0: the untrained model
  }

  double epoch_lr() const {
    return cfg.learning_rate * std::pow(cfg.lr_decay, static_cast<double>(global_epoch));
  }

  void record_validation() {
    const double v = iid_nll(flow, val.x);
    result.val_nll.push_back(v);
    if (v < result.best_val_nll) {
      result.best_val_nll = v;
      result.best_epoch = result.val_nll.size() - 1;
      best_flow = flow;
      if (joint) best_rho_raw = rho_raw;
      since_best = 0;
    } else {
      ++since_best;
    }
  }

  /// Runs `count` epochs against a frozen covariance (or the learnable
  /// joint-equicorrelated objective when `cov` is null). Returns false once
  /// early stopping has triggered.
  bool run_epochs(std::size_t count, const CovarianceModel* cov) {
    const std::size_t n = train.n();
    std::vector<DenseMatrix*> params = trainable();
    std::vector<DenseMatrix> grads(params.size());
    for (std::size_t e = 0; e < count; ++e) {
      if (stopped) return false;
      const std::vector<BatchSelection> batches = make_batches(perm, cfg.batch_size, rng);
      double loss_sum = 0.0;
      for (const BatchSelection& batch : batches) {
        Tape tape;
        std::vector<Tape::NodeId> pnodes;
        pnodes.reserve(flow_params.size());
        for (DenseMatrix* p : flow_params) pnodes.push_back(tape.parameter(*p));
        Tape::NodeId loss;
        if (cov) {
          loss = build_minibatch_loss_const(tape, flow, pnodes, *cov, batch, train.x, n);
        } else {
          const Tape::NodeId rho_node = tape.parameter(rho_raw);
          pnodes.push_back(rho_node);
          loss = build_minibatch_loss_joint_equi(tape, flow, {pnodes.begin(), pnodes.end() - 1}, *blocks,
                                                 rho_node, batch, train.x, n)
                     .loss;
        }
        const double loss_value = tape.value(loss)(0, 0);
        if (!std::isfinite(loss_value))
          fail("training diverged: loss ", loss_value, " at epoch ", global_epoch, " (", result.note, ")");
        loss_sum += loss_value;
        tape.backward(loss);
        for (std::size_t k = 0; k < pnodes.size(); ++k) grads[k] = tape.grad(pnodes[k]);
        clip_global_norm(grads, cfg.grad_clip);
        adamax_step(params, grads, opt, epoch_lr(), cfg.weight_decay, decay_mask, names);
      }
      result.train_loss.push_back(loss_sum / static_cast<double>(batches.size()));
      ++global_epoch;
      record_validation();
      if (since_best >= cfg.patience) {
        stopped = true;
        return false;
      }
    }
    return true;
  }

  static void clip_global_norm(std::vector<DenseMatrix>& grads, double max_norm) {
    if (!(max_norm > 0.0)) return;
    double sq = 0.0;
    for (const DenseMatrix& g : grads)
      for (double x : g.storage()) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (DenseMatrix& g : grads)
      for (double& x : g.storage()) x *= scale;
  }

  TrainResult finish() {
    result.flow = best_flow;
    result.test_nll = iid_nll(best_flow, test.x);
    result.seed = cfg.seed;
    if (joint) {
      result.rho_hat.resize(best_rho_raw.cols());
      for (std::size_t k = 0; k < best_rho_raw.cols(); ++k)
        result.rho_hat[k] = EquiBlocks::kRhoMax * sigmoid(best_rho_raw(0, k));
    }
    return std::move(result);
  }
};

struct WallTimer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

}  // namespace traindetail

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Mini-batch training against a frozen covariance model. The baseline,
/// every grid point, and the flow stages of the alternating schedule are all
/// this loop with different snapshots.
inline TrainResult train_with_const_cov(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                                        const Dataset& test, const CovarianceModel& cov,
                                        const std::string& note) {
  cfg.validate(dynamic_cast<const IdentityCov*>(&cov) == nullptr);
  if (cov.size() != train.n()) fail("training: covariance size ", cov.size(), " vs ", train.n(), " rows");
  traindetail::WallTimer timer;
  traindetail::Session session(cfg, train, val, test);
  session.result.note = note;
  session.finish_setup();
  session.run_epochs(cfg.epochs, &cov);
  TrainResult result = session.finish();
  result.wall_seconds = timer.seconds();
  return result;
}

/// Independence baseline: the same objective with C = I.
inline TrainResult train_baseline(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                                  const Dataset& test) {
  IdentityCov identity(train.n());
  return train_with_const_cov(cfg, train, val, test, identity, "baseline");
}

struct GridPoint {
  double value = 0.0;
  bool failed = false;
  std::string error;
  TrainResult result;
};

struct GridOutcome {
  std::size_t best_index = 0;
  std::vector<GridPoint> points;

  const TrainResult& best() const { return points[best_index].result; }
  double best_value() const { return points[best_index].value; }
};

namespace traindetail {

/// Runs one full training per grid value and keeps the one with minimal
/// validation NLL; ties break toward independence. `independence_distance`
/// maps the grid value to its distance from the independent model (rho for
/// equicorrelated, 1 - lambda for the fixed mixture). Failed points are
/// recorded and skipped.
template <typename MakeCov, typename Distance>
GridOutcome grid_search(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                        const Dataset& test, const char* tag, MakeCov make_cov, Distance independence_distance) {
  if (cfg.grid.empty()) fail("train_grid: empty grid");
  GridOutcome outcome;
  bool have_best = false;
  for (double value : cfg.grid) {
    GridPoint point;
    point.value = value;
    try {
      const std::unique_ptr<CovarianceModel> cov = make_cov(value);
      point.result =
          train_with_const_cov(cfg, train, val, test, *cov, detail::str(tag, "=", value));
    } catch (const std::exception& e) {
      point.failed = true;
      point.error = e.what();
      outcome.points.push_back(std::move(point));
      continue;
    }
    outcome.points.push_back(std::move(point));
    const GridPoint& just_added = outcome.points.back();
    if (!have_best) {
      outcome.best_index = outcome.points.size() - 1;
      have_best = true;
      continue;
    }
    const GridPoint& incumbent = outcome.points[outcome.best_index];
    const double a = just_added.result.best_val_nll, b = incumbent.result.best_val_nll;
    if (a < b || (a == b && independence_distance(just_added.value) < independence_distance(incumbent.value)))
      outcome.best_index = outcome.points.size() - 1;
  }
  if (!have_best) fail("train_grid: every grid point failed");
  return outcome;
}

}  // namespace traindetail

/// Grid search over a single shared equicorrelation value.
inline GridOutcome train_grid_equiblocks(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                                         const Dataset& test) {
  if (!train.has_blocks()) fail("train_grid_equiblocks: train set has no block ids");
  auto blocks = BlockStructure::from_assignments(train.block_ids);
  GridOutcome outcome = traindetail::grid_search(
      cfg, train, val, test, "rho",
      [&](double rho) -> std::unique_ptr<CovarianceModel> {
        const double pinned = cfg.pin_dependency ? 0.0 : rho;
        return std::make_unique<EquiBlocks>(EquiBlocks::from_value(blocks, pinned));
      },
      [](double rho) { return rho; });
  for (GridPoint& p : outcome.points) {
    if (!p.failed) p.result.rho_hat.assign(1, p.value);
  }
  return outcome;
}

/// Grid search over the mixing weight of a fixed relationship matrix. The
/// spectral decomposition is computed by the caller once and shared by all
/// grid values.
inline GridOutcome train_grid_fixedcov(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                                       const Dataset& test, std::shared_ptr<const Spectral> spectral) {
  GridOutcome outcome = traindetail::grid_search(
      cfg, train, val, test, "lambda",
      [&](double lambda) -> std::unique_ptr<CovarianceModel> {
        auto cov = std::make_unique<FixedMixture>(spectral, cfg.pin_dependency ? 1.0 : lambda, std::nullopt);
        if (cov->size() <= cfg.dense_inverse_max_n) cov->precompute_dense_inverse();
        return cov;
      },
      [](double lambda) { return 1.0 - lambda; });
  for (GridPoint& p : outcome.points) {
    if (!p.failed) p.result.lambda_hat = p.value;
  }
  return outcome;
}

/// Alternating descent for the fixed-covariance model: flow stages train the
/// coupling layers against a frozen lambda snapshot (dense A gathered from
/// the cached eigenpairs), lambda stages freeze the flow, rotate the latents
/// once, and run step-halving gradient descent on the exact objective
///   f(lambda_raw) = (p/2) sum_i log d_i + 1/2 sum_i |u~_i|^2 / d_i,
/// d_i = lambda + (1 - lambda) Lambda_i (constant terms dropped). G is
/// decomposed exactly once, outside the stage loop.
inline TrainResult train_alternating(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                                     const Dataset& test, std::shared_ptr<const Spectral> spectral) {
  cfg.validate(true);
  traindetail::WallTimer timer;
  traindetail::Session session(cfg, train, val, test);
  session.result.note = "alternating";
  session.finish_setup();

  const bool pinned = cfg.pin_dependency;
  double lambda_raw = pinned ? 0.0 : logit(cfg.alt_lambda_init);
  const double p_dim = static_cast<double>(train.dim());
  const std::vector<double>& lam_g = spectral->values;

  for (std::size_t stage = 0; stage < cfg.alt_flow_stages; ++stage) {
    FixedMixture cov = pinned ? FixedMixture(spectral, 1.0, std::nullopt)
                              : FixedMixture(spectral, sigmoid(lambda_raw), lambda_raw);
    if (cov.size() <= cfg.dense_inverse_max_n) cov.precompute_dense_inverse();
    if (!session.run_epochs(cfg.alt_flow_epochs, &cov)) break;

    if (pinned || stage + 1 >= cfg.alt_flow_stages || stage >= cfg.alt_lambda_stages) continue;

    // Lambda stage: exact objective on the rotated latents of the full data.
    const DenseMatrix u = session.flow.inverse(train.x).points;
    const DenseMatrix rotated = matmul_tn(spectral->q, u);
    std::vector<double> energy(rotated.rows());
    for (std::size_t i = 0; i < rotated.rows(); ++i) {
      const double* r = rotated.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < rotated.cols(); ++j) s += r[j] * r[j];
      energy[i] = s;
    }
    auto objective = [&](double raw) {
      const double lam = sigmoid(raw);
      double f = 0.0;
      for (std::size_t i = 0; i < energy.size(); ++i) {
        const double d = lam + (1.0 - lam) * lam_g[i];
        f += 0.5 * p_dim * std::log(d) + 0.5 * energy[i] / d;
      }
      return f;
    };
    auto gradient = [&](double raw) {
      const double lam = sigmoid(raw);
      double df_dlam = 0.0;
      for (std::size_t i = 0; i < energy.size(); ++i) {
        const double d = lam + (1.0 - lam) * lam_g[i];
        df_dlam += (0.5 * p_dim / d - 0.5 * energy[i] / (d * d)) * (1.0 - lam_g[i]);
      }
      return df_dlam * lam * (1.0 - lam);
    };
    std::vector<double> trace;
    double f_now = objective(lambda_raw);
    trace.push_back(f_now);
    for (std::size_t step = 0; step < cfg.alt_lambda_steps; ++step) {
      const double g = gradient(lambda_raw);
      double step_size = cfg.lambda_lr;
      bool accepted = false;
      while (step_size > 1e-18) {
        const double candidate = lambda_raw - step_size * g;
        const double f_candidate = objective(candidate);
        if (f_candidate <= f_now) {
          lambda_raw = candidate;
          f_now = f_candidate;
          accepted = true;
          break;
        }
        step_size *= 0.5;
      }
      if (!accepted) break;
      trace.push_back(f_now);
    }
    session.result.lambda_stage_trace.push_back(std::move(trace));
  }

  TrainResult result = session.finish();
  result.lambda_hat = pinned ? 1.0 : sigmoid(lambda_raw);
  result.wall_seconds = timer.seconds();
  return result;
}

/// Joint optimization over flow parameters and all per-block correlations;
/// weight decay stays masked off the raw dependency parameters.
inline TrainResult train_joint(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                               const Dataset& test) {
  cfg.validate(true);
  if (!train.has_blocks()) fail("train_joint: train set has no block ids");
  auto blocks = BlockStructure::from_assignments(train.block_ids);
  if (cfg.pin_dependency) {
    EquiBlocks cov = EquiBlocks::from_value(blocks, 0.0);
    TrainResult result = train_with_const_cov(cfg, train, val, test, cov, "joint");
    result.rho_hat.assign(blocks->n_blocks(), 0.0);
    return result;
  }
  traindetail::WallTimer timer;
  traindetail::Session session(cfg, train, val, test);
  session.result.note = "joint";
  session.enable_joint(blocks, cfg.joint_rho_init);
  session.finish_setup();
  session.run_epochs(cfg.epochs, nullptr);
  TrainResult result = session.finish();
  result.wall_seconds = timer.seconds();
  return result;
}

}  // namespace depflow
