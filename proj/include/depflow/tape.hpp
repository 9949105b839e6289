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

#include <functional>
#include <memory>
#include <vector>

#include "depflow/matrix.hpp"

namespace depflow {

/// Reverse-mode automatic differentiation over matrix-valued nodes.
///
/// Nodes are appended in construction order, which is a topological order of
/// the computation, so the backward pass is a single reverse scan that visits
/// each node exactly once. Values are computed eagerly; gradients are
/// allocated lazily, so a parameter that never reaches the output keeps an
/// exactly-zero gradient.
class Tape {
 public:
  using NodeId = int;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  NodeId constant(DenseMatrix value) { return push(std::move(value), false, {}); }

  NodeId parameter(const DenseMatrix& value) {
    NodeId id = push(value, true, {});
    return id;
  }

  NodeId scalar(double v) { return constant(DenseMatrix(1, 1, v)); }

  const DenseMatrix& value(NodeId id) const { return nodes_[id].value; }

  /// Gradient of the last backward() output w.r.t. node `id`; zero-shaped to
  /// the node value if the node was never reached.
  DenseMatrix grad(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) return DenseMatrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // -- arithmetic -----------------------------------------------------------

  NodeId matmul(NodeId a, NodeId b) {
    DenseMatrix v = depflow::matmul(value(a), value(b));
    return push(std::move(v), needs(a) || needs(b), [this, a, b](NodeId self) {
      const DenseMatrix& g = nodes_[self].grad;
      if (needs(a)) matmul_nt_acc(g, value(b), grad_buffer(a));
      if (needs(b)) matmul_tn_acc(value(a), g, grad_buffer(b));
    });
  }

  NodeId add(NodeId a, NodeId b) {
    check_same_shape(a, b, "add");
    DenseMatrix v = value(a);
    const DenseMatrix& vb = value(b);
    for (std::size_t i = 0; i < v.size(); ++i) v.storage()[i] += vb.storage()[i];
    return push(std::move(v), needs(a) || needs(b),
                [this, a, b](NodeId self) {
                  const DenseMatrix& g = nodes_[self].grad;
                  if (needs(a)) acc(grad_buffer(a), g, 1.0);
                  if (needs(b)) acc(grad_buffer(b), g, 1.0);
                });
  }

  NodeId sub(NodeId a, NodeId b) {
    check_same_shape(a, b, "sub");
    DenseMatrix v = value(a);
    const DenseMatrix& vb = value(b);
    for (std::size_t i = 0; i < v.size(); ++i) v.storage()[i] -= vb.storage()[i];
    return push(std::move(v), needs(a) || needs(b),
                [this, a, b](NodeId self) {
                  const DenseMatrix& g = nodes_[self].grad;
                  if (needs(a)) acc(grad_buffer(a), g, 1.0);
                  if (needs(b)) acc(grad_buffer(b), g, -1.0);
                });
  }

  NodeId mul(NodeId a, NodeId b) {
    check_same_shape(a, b, "mul");
    DenseMatrix v = value(a);
    const DenseMatrix& vb = value(b);
    for (std::size_t i = 0; i < v.size(); ++i) v.storage()[i] *= vb.storage()[i];
    return push(std::move(v), needs(a) || needs(b), [this, a, b](NodeId self) {
      const DenseMatrix& g = nodes_[self].grad;
      if (needs(a)) acc_mul(grad_buffer(a), g, value(b));
      if (needs(b)) acc_mul(grad_buffer(b), g, value(a));
    });
  }

  NodeId div(NodeId a, NodeId b) {
    check_same_shape(a, b, "div");
    DenseMatrix v = value(a);
    const DenseMatrix& vb = value(b);
    for (std::size_t i = 0; i < v.size(); ++i) v.storage()[i] /= vb.storage()[i];
    return push(std::move(v), needs(a) || needs(b), [this, a, b](NodeId self) {
      const Node& s = nodes_[self];
      const DenseMatrix& g = s.grad;
      const DenseMatrix& denom = value(b);
      if (needs(a)) {
        DenseMatrix& ga = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.storage()[i] += g.storage()[i] / denom.storage()[i];
      }
      if (needs(b)) {
        DenseMatrix& gb = grad_buffer(b);
        const DenseMatrix& out = s.value;
        for (std::size_t i = 0; i < g.size(); ++i)
          gb.storage()[i] -= g.storage()[i] * out.storage()[i] / denom.storage()[i];
      }
    });
  }

  /// k * a + c elementwise.
  NodeId affine(NodeId a, double k, double c) {
    DenseMatrix v = value(a);
    for (double& x : v.storage()) x = k * x + c;
    return push(std::move(v), needs(a), [this, a, k](NodeId self) {
      acc(grad_buffer(a), nodes_[self].grad, k);
    });
  }

  /// Elementwise product with a constant matrix of the same shape.
  NodeId mul_const(NodeId a, DenseMatrix coef) {
    if (!value(a).same_shape(coef)) fail("mul_const: shape mismatch");
    DenseMatrix v = value(a);
    for (std::size_t i = 0; i < v.size(); ++i) v.storage()[i] *= coef.storage()[i];
    auto shared = std::make_shared<DenseMatrix>(std::move(coef));
    return push(std::move(v), needs(a), [this, a, shared](NodeId self) {
      acc_mul(grad_buffer(a), nodes_[self].grad, *shared);
    });
  }

  /// Broadcast-add a 1 x n row vector to every row of an m x n matrix.
  NodeId add_rowvec(NodeId a, NodeId b) {
    const DenseMatrix& va = value(a);
    const DenseMatrix& vb = value(b);
    if (vb.rows() != 1 || vb.cols() != va.cols()) fail("add_rowvec: bias must be 1x", va.cols());
    DenseMatrix v = va;
    for (std::size_t i = 0; i < v.rows(); ++i) {
      double* r = v.row(i);
      const double* brow = vb.row(0);
      for (std::size_t j = 0; j < v.cols(); ++j) r[j] += brow[j];
    }
    return push(std::move(v), needs(a) || needs(b), [this, a, b](NodeId self) {
      const DenseMatrix& g = nodes_[self].grad;
      if (needs(a)) acc(grad_buffer(a), g, 1.0);
      if (needs(b)) {
        DenseMatrix& gb = grad_buffer(b);
        double* acc_row = gb.row(0);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const double* gr = g.row(i);
          for (std::size_t j = 0; j < g.cols(); ++j) acc_row[j] += gr[j];
        }
      }
    });
  }

  // -- elementwise nonlinearities -------------------------------------------

  NodeId sigmoid_op(NodeId a) {
    DenseMatrix v = value(a);
    for (double& x : v.storage()) x = sigmoid(x);
    return push(std::move(v), needs(a), [this, a](NodeId self) {
      const Node& s = nodes_[self];
      DenseMatrix& ga = grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double y = s.value.storage()[i];
        ga.storage()[i] += s.grad.storage()[i] * y * (1.0 - y);
      }
    });
  }

  NodeId tanh_op(NodeId a) {
    DenseMatrix v = value(a);
    for (double& x : v.storage()) x = std::tanh(x);
    return push(std::move(v), needs(a), [this, a](NodeId self) {
      const Node& s = nodes_[self];
      DenseMatrix& ga = grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double y = s.value.storage()[i];
        ga.storage()[i] += s.grad.storage()[i] * (1.0 - y * y);
      }
    });
  }

  /// x * sigmoid(x).
  NodeId swish(NodeId a) {
    DenseMatrix v = value(a);
    for (double& x : v.storage()) x = x * sigmoid(x);
    return push(std::move(v), needs(a), [this, a](NodeId self) {
      const Node& s = nodes_[self];
      const DenseMatrix& va = value(a);
      DenseMatrix& ga = grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double x = va.storage()[i];
        const double sig = sigmoid(x);
        ga.storage()[i] += s.grad.storage()[i] * sig * (1.0 + x * (1.0 - sig));
      }
    });
  }

  NodeId exp_op(NodeId a) {
    DenseMatrix v = value(a);
    for (double& x : v.storage()) x = std::exp(x);
    return push(std::move(v), needs(a), [this, a](NodeId self) {
      const Node& s = nodes_[self];
      DenseMatrix& ga = grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga.storage()[i] += s.grad.storage()[i] * s.value.storage()[i];
    });
  }

  NodeId log_op(NodeId a) {
    DenseMatrix v = value(a);
    for (double& x : v.storage()) x = std::log(x);
    return push(std::move(v), needs(a), [this, a](NodeId self) {
      const DenseMatrix& g = nodes_[self].grad;
      const DenseMatrix& va = value(a);
      DenseMatrix& ga = grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.storage()[i] += g.storage()[i] / va.storage()[i];
    });
  }

  // -- reductions -------------------------------------------------------------

  NodeId sum(NodeId a) {
    double s = 0.0;
    for (double x : value(a).storage()) s += x;
    return push(DenseMatrix(1, 1, s), needs(a), [this, a](NodeId self) {
      const double g = nodes_[self].grad(0, 0);
      DenseMatrix& ga = grad_buffer(a);
      for (double& x : ga.storage()) x += g;
    });
  }

  NodeId sumsq(NodeId a) {
    double s = 0.0;
    for (double x : value(a).storage()) s += x * x;
    return push(DenseMatrix(1, 1, s), needs(a), [this, a](NodeId self) {
      const double g = 2.0 * nodes_[self].grad(0, 0);
      const DenseMatrix& va = value(a);
      DenseMatrix& ga = grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.storage()[i] += g * va.storage()[i];
    });
  }

  // -- structural ops ---------------------------------------------------------

  NodeId select_cols(NodeId a, std::vector<std::size_t> idx) {
    const DenseMatrix& va = value(a);
    for (std::size_t j : idx) {
      if (j >= va.cols()) fail("select_cols: index ", j, " out of range");
    }
    DenseMatrix v(va.rows(), idx.size());
    for (std::size_t i = 0; i < va.rows(); ++i) {
      const double* src = va.row(i);
      double* dst = v.row(i);
      for (std::size_t k = 0; k < idx.size(); ++k) dst[k] = src[idx[k]];
    }
    return push(std::move(v), needs(a), [this, a, idx](NodeId self) {
      const DenseMatrix& g = nodes_[self].grad;
      DenseMatrix& ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const double* gr = g.row(i);
        double* dst = ga.row(i);
        for (std::size_t k = 0; k < idx.size(); ++k) dst[idx[k]] += gr[k];
      }
    });
  }

  /// Builds an m x (|pos_a| + |pos_b|) matrix with the columns of `a` placed
  /// at pos_a and the columns of `b` at pos_b.
  NodeId combine_cols(NodeId a, std::vector<std::size_t> pos_a, NodeId b, std::vector<std::size_t> pos_b) {
    const DenseMatrix& va = value(a);
    const DenseMatrix& vb = value(b);
    if (va.rows() != vb.rows()) fail("combine_cols: row mismatch");
    if (va.cols() != pos_a.size() || vb.cols() != pos_b.size()) fail("combine_cols: position list mismatch");
    const std::size_t total = pos_a.size() + pos_b.size();
    DenseMatrix v(va.rows(), total);
    for (std::size_t i = 0; i < va.rows(); ++i) {
      double* dst = v.row(i);
      const double* ra = va.row(i);
      const double* rb = vb.row(i);
      for (std::size_t k = 0; k < pos_a.size(); ++k) dst[pos_a[k]] = ra[k];
      for (std::size_t k = 0; k < pos_b.size(); ++k) dst[pos_b[k]] = rb[k];
    }
    return push(std::move(v), needs(a) || needs(b), [this, a, b, pos_a, pos_b](NodeId self) {
      const DenseMatrix& g = nodes_[self].grad;
      if (needs(a)) {
        DenseMatrix& ga = grad_buffer(a);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const double* gr = g.row(i);
          double* dst = ga.row(i);
          for (std::size_t k = 0; k < pos_a.size(); ++k) dst[k] += gr[pos_a[k]];
        }
      }
      if (needs(b)) {
        DenseMatrix& gb = grad_buffer(b);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const double* gr = g.row(i);
          double* dst = gb.row(i);
          for (std::size_t k = 0; k < pos_b.size(); ++k) dst[k] += gr[pos_b[k]];
        }
      }
    });
  }

  /// Per-group sum of squared row norms: out(0,k) = sum_{i in group k} |a_i|^2.
  NodeId group_rows_sumsq(NodeId a, std::vector<std::vector<std::size_t>> groups) {
    const DenseMatrix& va = value(a);
    DenseMatrix v(1, groups.size());
    for (std::size_t k = 0; k < groups.size(); ++k) {
      double s = 0.0;
      for (std::size_t i : groups[k]) {
        const double* r = va.row(i);
        for (std::size_t j = 0; j < va.cols(); ++j) s += r[j] * r[j];
      }
      v(0, k) = s;
    }
    return push(std::move(v), needs(a), [this, a, groups](NodeId self) {
      const DenseMatrix& g = nodes_[self].grad;
      const DenseMatrix& va = value(a);
      DenseMatrix& ga = grad_buffer(a);
      for (std::size_t k = 0; k < groups.size(); ++k) {
        const double gk = 2.0 * g(0, k);
        if (gk == 0.0) continue;
        for (std::size_t i : groups[k]) {
          const double* src = va.row(i);
          double* dst = ga.row(i);
          for (std::size_t j = 0; j < va.cols(); ++j) dst[j] += gk * src[j];
        }
      }
    });
  }

  /// Per-group squared norm of the row sum: out(0,k) = |sum_{i in group k} a_i|^2.
  NodeId group_rows_sum_normsq(NodeId a, std::vector<std::vector<std::size_t>> groups) {
    const DenseMatrix& va = value(a);
    auto rowsums = std::make_shared<DenseMatrix>(groups.size(), va.cols());
    DenseMatrix v(1, groups.size());
    for (std::size_t k = 0; k < groups.size(); ++k) {
      double* acc_row = rowsums->row(k);
      for (std::size_t i : groups[k]) {
        const double* r = va.row(i);
        for (std::size_t j = 0; j < va.cols(); ++j) acc_row[j] += r[j];
      }
      double s = 0.0;
      for (std::size_t j = 0; j < va.cols(); ++j) s += acc_row[j] * acc_row[j];
      v(0, k) = s;
    }
    return push(std::move(v), needs(a), [this, a, groups, rowsums](NodeId self) {
      const DenseMatrix& g = nodes_[self].grad;
      DenseMatrix& ga = grad_buffer(a);
      for (std::size_t k = 0; k < groups.size(); ++k) {
        const double gk = 2.0 * g(0, k);
        if (gk == 0.0) continue;
        const double* sum_row = rowsums->row(k);
        for (std::size_t i : groups[k]) {
          double* dst = ga.row(i);
          for (std::size_t j = 0; j < ga.cols(); ++j) dst[j] += gk * sum_row[j];
        }
      }
    });
  }

  /// Weighted quadratic form over batch rows:
  ///   wd * sum_i W(i,i) |u_i|^2 + wo * sum_{i<j} W(i,j) u_i . u_j
  /// with constant symmetric W. Zero off-diagonal entries are skipped, so an
  /// identity W costs O(b p) and reproduces the independent case bit for bit.
  NodeId weighted_quad(NodeId a, std::shared_ptr<const DenseMatrix> w, double wd, double wo) {
    const DenseMatrix& u = value(a);
    const std::size_t b = u.rows(), p = u.cols();
    if (w->rows() != b || w->cols() != b) fail("weighted_quad: weight matrix must be ", b, "x", b);
    double diag_term = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double wii = (*w)(i, i);
      const double* r = u.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) s += r[j] * r[j];
      diag_term += wii * s;
    }
    double off_term = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double* ri = u.row(i);
      const double* wrow = w->row(i);
      for (std::size_t j = i + 1; j < b; ++j) {
        const double wij = wrow[j];
        if (wij == 0.0) continue;
        const double* rj = u.row(j);
        double s = 0.0;
        for (std::size_t c = 0; c < p; ++c) s += ri[c] * rj[c];
        off_term += wij * s;
      }
    }
    return push(DenseMatrix(1, 1, wd * diag_term + wo * off_term), needs(a),
                [this, a, w, wd, wo](NodeId self) {
                  const double g = nodes_[self].grad(0, 0);
                  const DenseMatrix& u = value(a);
                  DenseMatrix& ga = grad_buffer(a);
                  const std::size_t b = u.rows(), p = u.cols();
                  for (std::size_t i = 0; i < b; ++i) {
                    const double c = g * 2.0 * wd * (*w)(i, i);
                    if (c == 0.0) continue;
                    const double* src = u.row(i);
                    double* dst = ga.row(i);
                    for (std::size_t j = 0; j < p; ++j) dst[j] += c * src[j];
                  }
                  for (std::size_t i = 0; i < b; ++i) {
                    const double* wrow = w->row(i);
                    double* gi = ga.row(i);
                    const double* ui = u.row(i);
                    for (std::size_t j = i + 1; j < b; ++j) {
                      const double wij = wrow[j];
                      if (wij == 0.0) continue;
                      const double c = g * wo * wij;
                      const double* uj = u.row(j);
                      double* gj = ga.row(j);
                      for (std::size_t cc = 0; cc < p; ++cc) {
                        gi[cc] += c * uj[cc];
                        gj[cc] += c * ui[cc];
                      }
                    }
                  }
                });
  }

  // -- backward ---------------------------------------------------------------

  /// Backpropagates from a scalar output node.
  void backward(NodeId output) {
    Node& out = nodes_[output];
    if (out.value.rows() != 1 || out.value.cols() != 1)
      fail("backward: output must be scalar, got ", out.value.rows(), "x", out.value.cols());
    grad_buffer(output)(0, 0) += 1.0;
    for (NodeId id = output; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backprop) continue;
      n.backprop(id);
    }
  }

 private:
  struct Node {
    DenseMatrix value;
    DenseMatrix grad;
    bool requires_grad = false;
    std::function<void(NodeId)> backprop;
  };

  bool needs(NodeId id) const { return nodes_[id].requires_grad; }

  DenseMatrix& grad_buffer(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = DenseMatrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void check_same_shape(NodeId a, NodeId b, const char* who) const {
    if (!value(a).same_shape(value(b)))
      fail(who, ": shape mismatch (", value(a).rows(), "x", value(a).cols(), ") vs (", value(b).rows(),
           "x", value(b).cols(), ")");
  }

  static void acc(DenseMatrix& dst, const DenseMatrix& src, double scale) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.storage()[i] += scale * src.storage()[i];
  }

  static void acc_mul(DenseMatrix& dst, const DenseMatrix& g, const DenseMatrix& other) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.storage()[i] += g.storage()[i] * other.storage()[i];
  }

  NodeId push(DenseMatrix value, bool requires_grad, std::function<void(NodeId)> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

}  // namespace depflow
