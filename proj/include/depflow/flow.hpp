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

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "depflow/matrix.hpp"
#include "depflow/rng.hpp"
#include "depflow/tape.hpp"

namespace depflow {

/// Standard normal base density on R^p.
struct BaseDistribution {
  std::size_t dim = 0;

  double log_prob_row(const double* u) const {
    double ss = 0.0;
    for (std::size_t j = 0; j < dim; ++j) ss += u[j] * u[j];
    return -0.5 * static_cast<double>(dim) * kLogTwoPi - 0.5 * ss;
  }
};

/// One fully connected layer of a conditioner network.
struct Linear {
  DenseMatrix w;  // in x out
  DenseMatrix b;  // 1 x out
};

/// Affine coupling layer. The columns listed in `cond` pass through
/// unchanged and feed the conditioner; the columns in `trans` are scaled and
/// shifted by its output. Log-scales are squashed to [-s_max, s_max] through
/// a tanh so the layer stays invertible for any parameter values.
struct CouplingLayer {
  std::vector<std::size_t> cond;
  std::vector<std::size_t> trans;
  std::vector<Linear> linears;  // hidden layers with swish, final layer affine
  double s_max = 5.0;

  std::size_t n_out() const { return trans.size(); }
};

namespace detail {

inline void linear_forward(const DenseMatrix& x, const Linear& lin, DenseMatrix& out) {
  out = DenseMatrix(x.rows(), lin.w.cols());
  matmul_acc(x, lin.w, out);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double* r = out.row(i);
    const double* bias = lin.b.row(0);
    for (std::size_t j = 0; j < out.cols(); ++j) r[j] += bias[j];
  }
}

inline void swish_inplace(DenseMatrix& m) {
  for (double& x : m.storage()) x = x * sigmoid(x);
}

/// Runs the conditioner on the pass-through columns; returns the clamped
/// log-scale s and the shift t, each rows x |trans|.
inline void conditioner_eval(const CouplingLayer& layer, const DenseMatrix& x_cond, DenseMatrix& s,
                             DenseMatrix& t) {
  DenseMatrix h = x_cond;
  DenseMatrix next;
  for (std::size_t li = 0; li + 1 < layer.linears.size(); ++li) {
    linear_forward(h, layer.linears[li], next);
    swish_inplace(next);
    h = std::move(next);
  }
  DenseMatrix out;
  linear_forward(h, layer.linears.back(), out);
  const std::size_t q = layer.n_out();
  s = DenseMatrix(out.rows(), q);
  t = DenseMatrix(out.rows(), q);
  // Same arithmetic as the tape ops in FlowModel::build_inverse so that the
  // evaluation path and the training path agree to the last bit.
  const double inv_s_max = 1.0 / layer.s_max;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double* r = out.row(i);
    double* si = s.row(i);
    double* ti = t.row(i);
    for (std::size_t j = 0; j < q; ++j) {
      si[j] = layer.s_max * std::tanh(r[j] * inv_s_max);
      ti[j] = r[q + j];
    }
  }
}

inline DenseMatrix take_cols(const DenseMatrix& m, const std::vector<std::size_t>& idx) {
  DenseMatrix out(m.rows(), idx.size());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* src = m.row(i);
    double* dst = out.row(i);
    for (std::size_t k = 0; k < idx.size(); ++k) dst[k] = src[idx[k]];
  }
  return out;
}

inline void put_cols(DenseMatrix& m, const std::vector<std::size_t>& idx, const DenseMatrix& part) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double* dst = m.row(i);
    const double* src = part.row(i);
    for (std::size_t k = 0; k < idx.size(); ++k) dst[idx[k]] = src[k];
  }
}

}  // namespace detail

/// Result of a deterministic flow pass: transformed batch plus the
/// per-row log-abs-det of the Jacobian of the direction that was run.
struct FlowPass {
  DenseMatrix points;
  std::vector<double> logabsdet;
};

/// Nodes produced when the inverse pass is recorded on a tape for training.
struct FlowInverseGraph {
  Tape::NodeId latent;             // u = t^{-1}(x), batch rows
  Tape::NodeId sum_forward_logdet; // sum over batch rows of log|det J_t(u_i)|
};

/// Invertible map t: R^p -> R^p built from affine coupling layers with
/// alternating masks. Forward maps latent u to data x.
class FlowModel {
 public:
  FlowModel() = default;

  FlowModel(std::size_t dim, std::vector<CouplingLayer> layers)
      : dim_(dim), layers_(std::move(layers)) {
    for (const CouplingLayer& l : layers_) {
      if (l.cond.size() + l.trans.size() != dim_) fail("FlowModel: layer masks must cover ", dim_, " dims");
      if (l.linears.empty()) fail("FlowModel: conditioner needs at least one linear layer");
    }
  }

  /// Builds a flow of `n_layers` coupling layers with alternating even/odd
  /// masks and `hidden` conditioner widths. Hidden weights are
  /// Xavier-uniform; the final linear layer of every conditioner starts at
  /// zero so the whole flow begins as the identity map.
  static FlowModel make(std::size_t dim, std::size_t n_layers, const std::vector<std::size_t>& hidden,
                        double s_max, Rng& rng) {
    if (dim < 2) fail("FlowModel: need at least 2 dims for coupling masks, got ", dim);
    std::vector<std::size_t> even, odd;
    for (std::size_t j = 0; j < dim; ++j) (j % 2 == 0 ? even : odd).push_back(j);
    std::vector<CouplingLayer> layers;
    layers.reserve(n_layers);
    for (std::size_t k = 0; k < n_layers; ++k) {
      CouplingLayer layer;
      layer.cond = (k % 2 == 0) ? even : odd;
      layer.trans = (k % 2 == 0) ? odd : even;
      layer.s_max = s_max;
      std::size_t in = layer.cond.size();
      for (std::size_t width : hidden) {
        layer.linears.push_back(xavier_linear(in, width, rng));
        in = width;
      }
      Linear last;
      last.w = DenseMatrix(in, 2 * layer.trans.size());
      last.b = DenseMatrix(1, 2 * layer.trans.size());
      layer.linears.push_back(std::move(last));
      layers.push_back(std::move(layer));
    }
    return FlowModel(dim, std::move(layers));
  }

  std::size_t dim() const { return dim_; }
  std::size_t n_layers() const { return layers_.size(); }
  const std::vector<CouplingLayer>& layers() const { return layers_; }
  std::vector<CouplingLayer>& layers() { return layers_; }
  BaseDistribution base() const { return BaseDistribution{dim_}; }

  /// x = t(u) with per-row log|det J_t(u)|.
  FlowPass forward(const DenseMatrix& u) const {
    check_width(u, "forward");
    FlowPass pass{u, std::vector<double>(u.rows(), 0.0)};
    DenseMatrix s, t;
    for (const CouplingLayer& layer : layers_) {
      DenseMatrix xc = detail::take_cols(pass.points, layer.cond);
      DenseMatrix xt = detail::take_cols(pass.points, layer.trans);
      detail::conditioner_eval(layer, xc, s, t);
      for (std::size_t i = 0; i < xt.rows(); ++i) {
        double* r = xt.row(i);
        const double* si = s.row(i);
        const double* ti = t.row(i);
        double lad = 0.0;
        for (std::size_t j = 0; j < xt.cols(); ++j) {
          r[j] = r[j] * std::exp(si[j]) + ti[j];
          lad += si[j];
        }
        pass.logabsdet[i] += lad;
      }
      detail::put_cols(pass.points, layer.trans, xt);
    }
    return pass;
  }

  /// u = t^{-1}(x) with per-row log|det J_{t^{-1}}(x)| = -log|det J_t(u)|.
  FlowPass inverse(const DenseMatrix& x) const {
    check_width(x, "inverse");
    FlowPass pass{x, std::vector<double>(x.rows(), 0.0)};
    DenseMatrix s, t;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      const CouplingLayer& layer = *it;
      DenseMatrix xc = detail::take_cols(pass.points, layer.cond);
      DenseMatrix xt = detail::take_cols(pass.points, layer.trans);
      detail::conditioner_eval(layer, xc, s, t);
      for (std::size_t i = 0; i < xt.rows(); ++i) {
        double* r = xt.row(i);
        const double* si = s.row(i);
        const double* ti = t.row(i);
        double lad = 0.0;
        for (std::size_t j = 0; j < xt.cols(); ++j) {
          r[j] = (r[j] - ti[j]) * std::exp(-si[j]);
          lad += si[j];
        }
        pass.logabsdet[i] -= lad;
      }
      detail::put_cols(pass.points, layer.trans, xt);
    }
    return pass;
  }

  /// Per-row log density under the flow with a standard normal base.
  std::vector<double> log_prob_iid(const DenseMatrix& x) const {
    FlowPass inv = inverse(x);
    const BaseDistribution bd = base();
    std::vector<double> lp(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
      lp[i] = bd.log_prob_row(inv.points.row(i)) + inv.logabsdet[i];
    return lp;
  }

  /// Draws n rows t(u) with u ~ N(0, I_p).
  DenseMatrix sample(std::size_t n, Rng& rng) const {
    if (n == 0) return DenseMatrix(0, dim_);
    DenseMatrix u = rng.normal_matrix(n, dim_);
    return forward(u).points;
  }

  /// Records the inverse pass of a data batch on `tape`. `param_nodes` must
  /// be the tape nodes of params() in order; gradients then flow back into
  /// the conditioner weights through both the latent batch and the log-det.
  FlowInverseGraph build_inverse(Tape& tape, const std::vector<Tape::NodeId>& param_nodes,
                                 const DenseMatrix& x_batch) const {
    check_width(x_batch, "build_inverse");
    if (param_nodes.size() != param_count()) fail("build_inverse: expected ", param_count(), " parameter nodes");
    Tape::NodeId x = tape.constant(x_batch);
    Tape::NodeId total = tape.scalar(0.0);
    std::size_t pi = param_nodes.size();
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      const CouplingLayer& layer = *it;
      pi -= 2 * layer.linears.size();
      std::size_t base_idx = pi;
      Tape::NodeId xc = tape.select_cols(x, layer.cond);
      Tape::NodeId xt = tape.select_cols(x, layer.trans);
      Tape::NodeId h = xc;
      for (std::size_t li = 0; li < layer.linears.size(); ++li) {
        Tape::NodeId lin = tape.add_rowvec(tape.matmul(h, param_nodes[base_idx + 2 * li]),
                                           param_nodes[base_idx + 2 * li + 1]);
        h = (li + 1 < layer.linears.size()) ? tape.swish(lin) : lin;
      }
      const std::size_t q = layer.n_out();
      std::vector<std::size_t> s_idx(q), t_idx(q);
      for (std::size_t j = 0; j < q; ++j) {
        s_idx[j] = j;
        t_idx[j] = q + j;
      }
      Tape::NodeId s_raw = tape.select_cols(h, s_idx);
      Tape::NodeId t_shift = tape.select_cols(h, t_idx);
      Tape::NodeId s = tape.affine(tape.tanh_op(tape.affine(s_raw, 1.0 / layer.s_max, 0.0)), layer.s_max, 0.0);
      Tape::NodeId u_t = tape.mul(tape.sub(xt, t_shift), tape.exp_op(tape.affine(s, -1.0, 0.0)));
      x = tape.combine_cols(xc, layer.cond, u_t, layer.trans);
      total = tape.add(total, tape.sum(s));
    }
    return FlowInverseGraph{x, total};
  }

  std::size_t param_count() const {
    std::size_t c = 0;
    for (const CouplingLayer& l : layers_) c += 2 * l.linears.size();
    return c;
  }

  /// Mutable views of all parameters in a fixed order (layer 0 first, within
  /// a layer W then b per linear). The order matches build_inverse.
  std::vector<DenseMatrix*> param_values() {
    std::vector<DenseMatrix*> out;
    out.reserve(param_count());
    for (CouplingLayer& l : layers_) {
      for (Linear& lin : l.linears) {
        out.push_back(&lin.w);
        out.push_back(&lin.b);
      }
    }
    return out;
  }

  std::vector<const DenseMatrix*> param_values() const {
    std::vector<const DenseMatrix*> out;
    out.reserve(param_count());
    for (const CouplingLayer& l : layers_) {
      for (const Linear& lin : l.linears) {
        out.push_back(&lin.w);
        out.push_back(&lin.b);
      }
    }
    return out;
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      for (std::size_t li = 0; li < layers_[k].linears.size(); ++li) {
        out.push_back(detail::str("layer", k, ".lin", li, ".w"));
        out.push_back(detail::str("layer", k, ".lin", li, ".b"));
      }
    }
    return out;
  }

  // -- checkpoint I/O ---------------------------------------------------------

  nlohmann::json to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const CouplingLayer& l : layers_) {
      nlohmann::json linears = nlohmann::json::array();
      for (const Linear& lin : l.linears) {
        linears.push_back({{"in", lin.w.rows()},
                           {"out", lin.w.cols()},
                           {"w", lin.w.storage()},
                           {"b", lin.b.storage()}});
      }
      layers.push_back({{"cond", l.cond}, {"trans", l.trans}, {"s_max", l.s_max}, {"linears", linears}});
    }
    return {{"format", "depflow-flow"}, {"version", 1}, {"dim", dim_}, {"layers", layers}};
  }

  static FlowModel from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "depflow-flow") fail("flow checkpoint: unknown format");
    if (j.value("version", 0) != 1) fail("flow checkpoint: unsupported version ", j.value("version", 0));
    const std::size_t dim = j.at("dim").get<std::size_t>();
    std::vector<CouplingLayer> layers;
    for (const auto& jl : j.at("layers")) {
      CouplingLayer l;
      l.cond = jl.at("cond").get<std::vector<std::size_t>>();
      l.trans = jl.at("trans").get<std::vector<std::size_t>>();
      l.s_max = jl.at("s_max").get<double>();
      for (const auto& jlin : jl.at("linears")) {
        Linear lin;
        const std::size_t in = jlin.at("in").get<std::size_t>();
        const std::size_t out = jlin.at("out").get<std::size_t>();
        lin.w = DenseMatrix(in, out);
        lin.b = DenseMatrix(1, out);
        const auto wv = jlin.at("w").get<std::vector<double>>();
        const auto bv = jlin.at("b").get<std::vector<double>>();
        if (wv.size() != in * out || bv.size() != out) fail("flow checkpoint: parameter size mismatch");
        lin.w.storage() = wv;
        lin.b.storage() = bv;
        l.linears.push_back(std::move(lin));
      }
      layers.push_back(std::move(l));
    }
    return FlowModel(dim, std::move(layers));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("flow checkpoint: cannot open ", path, " for writing");
    out << to_json().dump() << "\n";
  }

  static FlowModel load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("flow checkpoint: cannot open ", path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }

 private:
  static Linear xavier_linear(std::size_t in, std::size_t out, Rng& rng) {
    Linear lin;
    lin.w = DenseMatrix(in, out);
    lin.b = DenseMatrix(1, out);
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& x : lin.w.storage()) x = rng.uniform(-bound, bound);
    return lin;
  }

  void check_width(const DenseMatrix& m, const char* who) const {
    if (m.cols() != dim_) fail("FlowModel::", who, ": expected width ", dim_, ", got ", m.cols());
  }

  std::size_t dim_ = 0;
  std::vector<CouplingLayer> layers_;
};

}  // namespace depflow
