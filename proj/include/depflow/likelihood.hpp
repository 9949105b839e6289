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

#include <algorithm>
#include <memory>
#include <vector>

#include "depflow/covariance.hpp"
#include "depflow/flow.hpp"
#include "depflow/matrix.hpp"
#include "depflow/tape.hpp"

namespace depflow {

/// A mini-batch as a set of distinct observation indices.
struct BatchSelection {
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }

  void validate(std::size_t n) const {
    if (indices.empty()) fail("BatchSelection: empty batch");
    std::vector<std::size_t> sorted = indices;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t k = 0; k < sorted.size(); ++k) {
      if (sorted[k] >= n) fail("BatchSelection: index ", sorted[k], " out of range for n=", n);
      if (k > 0 && sorted[k] == sorted[k - 1]) fail("BatchSelection: duplicate index ", sorted[k]);
    }
  }
};

inline DenseMatrix take_rows(const DenseMatrix& m, const std::vector<std::size_t>& idx) {
  DenseMatrix out(idx.size(), m.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const double* src = m.row(idx[k]);
    double* dst = out.row(k);
    std::copy(src, src + m.cols(), dst);
  }
  return out;
}

/// Estimator weights of the mini-batch trace surrogate: the diagonal carries
/// n/b, off-diagonal pairs carry n(n-1)/(b(b-1)).
struct TraceWeights {
  double diag;
  double off;  // includes the factor 2 of the i<j sum

  static TraceWeights make(std::size_t n, std::size_t b) {
    if (b < 2) fail("trace_estimate: batch size ", b, " < 2, off-diagonal weight undefined");
    const double nd = static_cast<double>(n), bd = static_cast<double>(b);
    return TraceWeights{nd / bd, 2.0 * nd * (nd - 1.0) / (bd * (bd - 1.0))};
  }
};

/// Unbiased mini-batch estimate of tr(U^T A U):
///   (n/b) sum_{i in B} A_ii u_i.u_i
///   + 2 n(n-1)/(b(b-1)) sum_{i<j in B} A_ij u_i.u_j
/// where `w` holds the A entries over the batch. With b = n and the full
/// index set this collapses to the exact trace. Same arithmetic as
/// Tape::weighted_quad so training losses and reported values agree exactly.
inline double trace_estimate(const DenseMatrix& u_batch, const DenseMatrix& w, std::size_t n,
                             std::size_t b) {
  if (u_batch.rows() != b) fail("trace_estimate: U_batch has ", u_batch.rows(), " rows, expected b=", b);
  if (w.rows() != b || w.cols() != b) fail("trace_estimate: A entries must be ", b, "x", b);
  const TraceWeights tw = TraceWeights::make(n, b);
  const std::size_t p = u_batch.cols();
  double diag_term = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* r = u_batch.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) s += r[j] * r[j];
    diag_term += w(i, i) * s;
  }
  double off_term = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* ri = u_batch.row(i);
    const double* wrow = w.row(i);
    for (std::size_t j = i + 1; j < b; ++j) {
      const double wij = wrow[j];
      if (wij == 0.0) continue;
      const double* rj = u_batch.row(j);
      double s = 0.0;
      for (std::size_t c = 0; c < p; ++c) s += ri[c] * rj[c];
      off_term += wij * s;
    }
  }
  return tw.diag * diag_term + tw.off * off_term;
}

/// Joint log-likelihood of the full data set under the dependency model:
///   -sum_i log|det J_t(u_i)| - (np/2) log(2pi)
///   - (p/2) log det C - 1/2 tr(U^T C^{-1} U)
/// with u_i = t^{-1}(x_i). The first term is the negated inverse-pass
/// log-abs-det.
inline double joint_log_likelihood(const FlowModel& flow, const CovarianceModel& cov,
                                   const DenseMatrix& x) {
  if (x.rows() != cov.size()) fail("joint_log_likelihood: ", x.rows(), " rows vs covariance size ", cov.size());
  const FlowPass inv = flow.inverse(x);
  double inv_lad = 0.0;
  for (double v : inv.logabsdet) inv_lad += v;
  const double n = static_cast<double>(x.rows());
  const double p = static_cast<double>(x.cols());
  return inv_lad - 0.5 * n * p * kLogTwoPi - 0.5 * p * cov.log_det() - 0.5 * cov.trace_term(inv.points);
}

/// Mean i.i.d. negative log-likelihood; the validation/test metric.
inline double iid_nll(const FlowModel& flow, const DenseMatrix& x) {
  if (x.rows() == 0) fail("iid_nll: empty data");
  const std::vector<double> lp = flow.log_prob_iid(x);
  double s = 0.0;
  for (double v : lp) s += v;
  return -s / static_cast<double>(lp.size());
}

// ---------------------------------------------------------------------------
// Training-loss graphs
// ---------------------------------------------------------------------------

/// Loss graph for a batch under a covariance with frozen parameters. The
/// returned node evaluates
///   (1/n) [ (n/b) sum_{i in B} log|det J_t(u_i)| + (np/2) log 2pi
///           + (p/2) log det C + 1/2 trace_estimate ]
/// whose expectation over uniform batches is -(1/n) joint_log_likelihood.
/// The baseline is the IdentityCov instance of the same graph, which keeps
/// every schedule bit-compatible with it at pinned independence.
inline Tape::NodeId build_minibatch_loss_const(Tape& tape, const FlowModel& flow,
                                               const std::vector<Tape::NodeId>& flow_params,
                                               const CovarianceModel& cov, const BatchSelection& batch,
                                               const DenseMatrix& x_full, std::size_t n_total) {
  batch.validate(n_total);
  const std::size_t b = batch.size();
  const TraceWeights tw = TraceWeights::make(n_total, b);
  const DenseMatrix x_batch = take_rows(x_full, batch.indices);
  const FlowInverseGraph inv = flow.build_inverse(tape, flow_params, x_batch);

  auto w = std::make_shared<DenseMatrix>();
  cov.inverse_batch(batch.indices, *w);
  const Tape::NodeId trace = tape.weighted_quad(inv.latent, w, tw.diag, tw.off);

  const double n = static_cast<double>(n_total);
  const double p = static_cast<double>(x_full.cols());
  const double constant = 0.5 * n * p * kLogTwoPi + 0.5 * p * cov.log_det();
  const Tape::NodeId detpart = tape.affine(inv.sum_forward_logdet, n / static_cast<double>(b), constant);
  return tape.affine(tape.add(detpart, tape.affine(trace, 0.5, 0.0)), 1.0 / n, 0.0);
}

/// Joint-optimization loss for equicorrelated blocks: same estimator, but
/// the A entries and log det C are functions of a 1 x N raw-parameter node
/// (rho_k = rho_max * sigmoid(rho_raw_k)), so gradients reach both the flow
/// and the dependency parameters. The log det term covers all blocks, not
/// just those present in the batch, keeping the rho gradient unbiased.
struct JointEquiLoss {
  Tape::NodeId loss;
  Tape::NodeId rho;  // 1 x N derived correlations (for inspection)
};

inline JointEquiLoss build_minibatch_loss_joint_equi(Tape& tape, const FlowModel& flow,
                                                     const std::vector<Tape::NodeId>& flow_params,
                                                     const BlockStructure& blocks, Tape::NodeId rho_raw,
                                                     const BatchSelection& batch, const DenseMatrix& x_full,
                                                     std::size_t n_total) {
  batch.validate(n_total);
  const std::size_t b = batch.size();
  const std::size_t n_blocks = blocks.n_blocks();
  if (tape.value(rho_raw).rows() != 1 || tape.value(rho_raw).cols() != n_blocks)
    fail("joint loss: rho_raw must be 1x", n_blocks);
  const TraceWeights tw = TraceWeights::make(n_total, b);

  const DenseMatrix x_batch = take_rows(x_full, batch.indices);
  const FlowInverseGraph inv = flow.build_inverse(tape, flow_params, x_batch);

  // rho = rho_max * sigmoid(rho_raw), then the closed-form inverse pieces.
  const Tape::NodeId rho = tape.affine(tape.sigmoid_op(rho_raw), EquiBlocks::kRhoMax, 0.0);

  DenseMatrix m_minus1(1, n_blocks), m_minus2(1, n_blocks);
  for (std::size_t k = 0; k < n_blocks; ++k) {
    const double m = static_cast<double>(blocks.sizes[k]);
    m_minus1(0, k) = m - 1.0;
    m_minus2(0, k) = m - 2.0;
  }
  // log det C = sum_k log(1 + (m_k - 1) rho_k) + (m_k - 1) log(1 - rho_k).
  const Tape::NodeId head = tape.affine(tape.mul_const(rho, m_minus1), 1.0, 1.0);
  const Tape::NodeId one_minus = tape.affine(rho, -1.0, 1.0);
  const Tape::NodeId logdet =
      tape.sum(tape.add(tape.log_op(head), tape.mul_const(tape.log_op(one_minus), m_minus1)));

  // Group the batch rows by block.
  std::vector<std::size_t> present;                    // distinct block ids in batch order
  std::vector<std::vector<std::size_t>> groups;        // batch-local row indices per present block
  {
    std::vector<std::ptrdiff_t> slot(n_blocks, -1);
    for (std::size_t r = 0; r < b; ++r) {
      const std::size_t blk = blocks.assign[batch.indices[r]];
      if (slot[blk] < 0) {
        slot[blk] = static_cast<std::ptrdiff_t>(present.size());
        present.push_back(blk);
        groups.emplace_back();
      }
      groups[static_cast<std::size_t>(slot[blk])].push_back(r);
    }
  }

  DenseMatrix mb1(1, present.size()), mb2(1, present.size());
  for (std::size_t k = 0; k < present.size(); ++k) {
    mb1(0, k) = m_minus1(0, present[k]);
    mb2(0, k) = m_minus2(0, present[k]);
  }
  const Tape::NodeId rho_b = tape.select_cols(rho, present);
  const Tape::NodeId head_b = tape.affine(tape.mul_const(rho_b, mb1), 1.0, 1.0);
  const Tape::NodeId denom = tape.mul(tape.affine(rho_b, -1.0, 1.0), head_b);
  const Tape::NodeId diag_coef = tape.div(tape.affine(tape.mul_const(rho_b, mb2), 1.0, 1.0), denom);
  const Tape::NodeId off_coef = tape.div(tape.affine(rho_b, -1.0, 0.0), denom);

  const Tape::NodeId s1 = tape.group_rows_sumsq(inv.latent, groups);
  const Tape::NodeId pair2 = tape.sub(tape.group_rows_sum_normsq(inv.latent, groups), s1);
  // trace = diag_w * sum_k diag_coef_k S1_k + off_w/2 * sum_k off_coef_k (|sum u|^2 - S1_k)
  const Tape::NodeId trace = tape.add(tape.affine(tape.sum(tape.mul(diag_coef, s1)), tw.diag, 0.0),
                                      tape.affine(tape.sum(tape.mul(off_coef, pair2)), 0.5 * tw.off, 0.0));

  const double n = static_cast<double>(n_total);
  const double p = static_cast<double>(x_full.cols());
  const Tape::NodeId detpart = tape.affine(inv.sum_forward_logdet, n / static_cast<double>(b),
                                           0.5 * n * p * kLogTwoPi);
  const Tape::NodeId body =
      tape.add(tape.add(detpart, tape.affine(logdet, 0.5 * p, 0.0)), tape.affine(trace, 0.5, 0.0));
  return JointEquiLoss{tape.affine(body, 1.0 / n, 0.0), rho};
}

/// Value of the mini-batch loss with frozen covariance parameters, computed
/// through the same graph the trainer differentiates.
inline double minibatch_loss(const FlowModel& flow, const CovarianceModel& cov,
                             const BatchSelection& batch, const DenseMatrix& x_full,
                             std::size_t n_total) {
  Tape tape;
  std::vector<Tape::NodeId> params;
  params.reserve(flow.param_count());
  for (const DenseMatrix* p : flow.param_values()) params.push_back(tape.constant(*p));
  const Tape::NodeId loss = build_minibatch_loss_const(tape, flow, params, cov, batch, x_full, n_total);
  return tape.value(loss)(0, 0);
}

}  // namespace depflow
