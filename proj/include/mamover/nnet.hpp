#pragma once

// Small dense networks with exact parameter gradients and exact first and
// second derivatives with respect to selected inputs.
//
// Input derivatives are propagated forward as "jets": for a batch of B points
// every layer carries its values plus d/dx_k and d2/dx_k dx_l for the seeded
// coordinate slots. Parameter gradients of any loss written in terms of an
// output jet come from a reverse sweep over the recorded jets, so a loss that
// depends on the Hessian of the network output is still differentiated
// exactly.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "mamover/common.hpp"

namespace mamover::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Elementwise tanh through the vectorized exponential; absolute error below
/// 1e-15 and several times faster than the scalar libm call per element.
template <class Derived>
Eigen::ArrayXXd fast_tanh(const Eigen::ArrayBase<Derived>& x) {
  Eigen::ArrayXXd e = (-2.0 * x.abs()).exp();
  return ((1.0 - e) / (1.0 + e)) * x.sign();
}

enum class Activation { tanh, identity };

struct DenseLayer {
  MatrixXd W;
  VectorXd b;
  Activation act = Activation::tanh;
};

/// Fully connected net; tanh on hidden layers, identity on the output layer.
class DenseNet {
 public:
  DenseNet() = default;

  /// Glorot-uniform weights, zero biases. With zero_last the output layer is
  /// all zeros, so the net starts out as the constant 0.
  DenseNet(const std::vector<int>& widths, std::mt19937_64& rng, bool zero_last = false) {
    require(widths.size() >= 2, "DenseNet: need at least input and output widths");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      int in = widths[l], out = widths[l + 1];
      require(in > 0 && out > 0, "DenseNet: widths must be positive");
      DenseLayer layer{MatrixXd::Zero(out, in), VectorXd::Zero(out),
                       l + 2 == widths.size() ? Activation::identity : Activation::tanh};
      bool last = l + 2 == widths.size();
      if (!(last && zero_last)) {
        double a = std::sqrt(6.0 / (in + out));
        std::uniform_real_distribution<double> U(-a, a);
        for (Eigen::Index c = 0; c < layer.W.cols(); ++c)
          for (Eigen::Index r = 0; r < layer.W.rows(); ++r) layer.W(r, c) = U(rng);
      }
      layers.push_back(std::move(layer));
    }
  }

  static DenseNet zeros(const std::vector<int>& widths) {
    std::mt19937_64 rng(0);
    DenseNet n(widths, rng);
    for (auto& l : n.layers) {
      l.W.setZero();
      l.b.setZero();
    }
    return n;
  }

  int in_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().W.cols()); }
  int out_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().W.rows()); }

  std::vector<int> widths() const {
    std::vector<int> w{in_dim()};
    for (const auto& l : layers) w.push_back(static_cast<int>(l.W.rows()));
    return w;
  }

  DenseNet zeros_like() const {
    DenseNet g = *this;
    for (auto& l : g.layers) {
      l.W.setZero();
      l.b.setZero();
    }
    return g;
  }

  template <class F>
  void for_each_param(F&& f) {
    for (auto& l : layers) {
      f(l.W);
      f(l.b);
    }
  }
  template <class F>
  void for_each_param(F&& f) const {
    for (const auto& l : layers) {
      f(l.W);
      f(l.b);
    }
  }

  /// Columns are samples.
  MatrixXd forward_batch(const MatrixXd& X) const {
    require(X.rows() == in_dim(), "DenseNet: input dimension mismatch");
    MatrixXd h = X;
    for (const auto& l : layers) {
      MatrixXd a = l.W * h;
      a.colwise() += l.b;
      h = l.act == Activation::tanh ? MatrixXd(fast_tanh(a.array())) : a;
    }
    return h;
  }

  VectorXd forward(const VectorXd& x) const { return forward_batch(x); }

  std::vector<DenseLayer> layers;
};

// ---------------------------------------------------------------------------
// Generic parameter plumbing for anything exposing for_each_param.

template <class M>
std::size_t num_params(const M& m) {
  std::size_t n = 0;
  m.for_each_param([&](const auto& a) { n += static_cast<std::size_t>(a.size()); });
  return n;
}

template <class M>
VectorXd pack_params(const M& m) {
  VectorXd out(static_cast<Eigen::Index>(num_params(m)));
  Eigen::Index o = 0;
  m.for_each_param([&](const auto& a) {
    for (Eigen::Index i = 0; i < a.size(); ++i) out[o + i] = a.data()[i];
    o += a.size();
  });
  return out;
}

template <class M>
void unpack_params(M& m, const VectorXd& flat) {
  require(static_cast<std::size_t>(flat.size()) == num_params(m), "unpack_params: size mismatch");
  Eigen::Index o = 0;
  m.for_each_param([&](auto& a) {
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = flat[o + i];
    o += a.size();
  });
}

template <class M>
void set_zero(M& m) {
  m.for_each_param([](auto& a) { a.setZero(); });
}

template <class M>
bool all_finite(const M& m) {
  bool ok = true;
  m.for_each_param([&](const auto& a) { ok = ok && a.allFinite(); });
  return ok;
}

/// acc += g, parameter by parameter (same shapes).
template <class M>
void accumulate(M& acc, const M& g) {
  VectorXd a = pack_params(acc);
  a += pack_params(g);
  unpack_params(acc, a);
}

// ---------------------------------------------------------------------------
// Jets

inline int num_pairs(int nc) { return nc * (nc + 1) / 2; }

/// Index of the (k, l) second derivative in a jet, k <= l.
inline int pair_index(int k, int l, int nc) {
  if (k > l) std::swap(k, l);
  return k * nc - k * (k - 1) / 2 + (l - k);
}

struct Jet {
  MatrixXd v;               // dims x batch
  std::vector<MatrixXd> d;  // one per coordinate slot
  std::vector<MatrixXd> dd; // one per (k <= l) slot pair; empty for first-order jets

  int slots() const { return static_cast<int>(d.size()); }
  int order() const { return d.empty() ? 0 : (dd.empty() ? 1 : 2); }

  static Jet zeros_like(const Jet& j) {
    Jet z;
    z.v = MatrixXd::Zero(j.v.rows(), j.v.cols());
    for (const auto& m : j.d) z.d.push_back(MatrixXd::Zero(m.rows(), m.cols()));
    for (const auto& m : j.dd) z.dd.push_back(MatrixXd::Zero(m.rows(), m.cols()));
    return z;
  }
};

/// Input jet for samples X (columns), seeding d/dx on the given input rows.
inline Jet seed_jet(const MatrixXd& X, std::span<const int> coord_slots, int order) {
  require(order >= 0 && order <= 2, "seed_jet: order must be 0, 1 or 2");
  Jet j;
  j.v = X;
  if (order == 0) return j;
  int nc = static_cast<int>(coord_slots.size());
  for (int k = 0; k < nc; ++k) {
    require(coord_slots[k] >= 0 && coord_slots[k] < X.rows(), "seed_jet: coordinate slot out of range");
    MatrixXd e = MatrixXd::Zero(X.rows(), X.cols());
    e.row(coord_slots[k]).setOnes();
    j.d.push_back(std::move(e));
  }
  if (order == 2)
    for (int p = 0; p < num_pairs(nc); ++p) j.dd.push_back(MatrixXd::Zero(X.rows(), X.cols()));
  return j;
}

/// Per-layer record of a jet forward pass (inputs and pre-activations).
struct JetTape {
  std::vector<Jet> inputs;
  std::vector<Jet> pre;
};

inline Jet jet_forward(const DenseNet& net, const Jet& x, JetTape* tape = nullptr) {
  require(x.v.rows() == net.in_dim(), "jet_forward: input dimension mismatch");
  const int nc = x.slots();
  const bool second = x.order() == 2;
  Jet h = x;
  if (tape) {
    tape->inputs.clear();
    tape->pre.clear();
  }
  for (const auto& layer : net.layers) {
    Jet a;
    a.v = layer.W * h.v;
    a.v.colwise() += layer.b;
    for (const auto& m : h.d) a.d.push_back(layer.W * m);
    for (const auto& m : h.dd) a.dd.push_back(layer.W * m);
    Jet y;
    if (layer.act == Activation::identity) {
      y = a;
    } else {
      Eigen::ArrayXXd t = fast_tanh(a.v.array());
      Eigen::ArrayXXd s1 = 1.0 - t.square();
      Eigen::ArrayXXd s2 = -2.0 * t * s1;
      y.v = t.matrix();
      for (int k = 0; k < nc; ++k) y.d.push_back((s1 * a.d[k].array()).matrix());
      if (second)
        for (int k = 0; k < nc; ++k)
          for (int l = k; l < nc; ++l) {
            int p = pair_index(k, l, nc);
            y.dd.push_back((s2 * a.d[k].array() * a.d[l].array() + s1 * a.dd[p].array()).matrix());
          }
    }
    if (tape) {
      tape->inputs.push_back(std::move(h));
      tape->pre.push_back(std::move(a));
    }
    h = std::move(y);
  }
  return h;
}

/// Reverse sweep: accumulates parameter gradients of sum(<out_adj, out_jet>)
/// into `grad` and returns the adjoint of the input jet.
inline Jet jet_backward(const DenseNet& net, const JetTape& tape, const Jet& out_adj, DenseNet& grad) {
  require(tape.pre.size() == net.layers.size(), "jet_backward: tape does not match net");
  Jet ybar = out_adj;
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const auto& layer = net.layers[li];
    const Jet& a = tape.pre[li];
    const Jet& h = tape.inputs[li];
    const int nc = a.slots();
    const bool second = !a.dd.empty();
    Jet abar;
    if (layer.act == Activation::identity) {
      abar = ybar;
    } else {
      Eigen::ArrayXXd t = fast_tanh(a.v.array());
      Eigen::ArrayXXd s1 = 1.0 - t.square();
      Eigen::ArrayXXd s2 = -2.0 * t * s1;
      Eigen::ArrayXXd av = ybar.v.array() * s1;
      std::vector<Eigen::ArrayXXd> ad(nc);
      for (int k = 0; k < nc; ++k) {
        ad[k] = ybar.d[k].array() * s1;
        av += ybar.d[k].array() * s2 * a.d[k].array();
      }
      if (second) {
        Eigen::ArrayXXd s3 = -2.0 * s1.square() + 4.0 * t.square() * s1;
        for (int k = 0; k < nc; ++k)
          for (int l = k; l < nc; ++l) {
            int p = pair_index(k, l, nc);
            Eigen::ArrayXXd yb = ybar.dd[p].array();
            av += yb * (s3 * a.d[k].array() * a.d[l].array() + s2 * a.dd[p].array());
            ad[k] += yb * s2 * a.d[l].array();
            ad[l] += yb * s2 * a.d[k].array();
          }
        for (int p = 0; p < num_pairs(nc); ++p) abar.dd.push_back((ybar.dd[p].array() * s1).matrix());
      }
      abar.v = av.matrix();
      for (int k = 0; k < nc; ++k) abar.d.push_back(ad[k].matrix());
    }
    auto& g = grad.layers[li];
    g.W.noalias() += abar.v * h.v.transpose();
    g.b += abar.v.rowwise().sum();
    for (int k = 0; k < nc; ++k) g.W.noalias() += abar.d[k] * h.d[k].transpose();
    for (std::size_t p = 0; p < abar.dd.size(); ++p) g.W.noalias() += abar.dd[p] * h.dd[p].transpose();

    Jet hbar;
    hbar.v = layer.W.transpose() * abar.v;
    for (const auto& m : abar.d) hbar.d.push_back(layer.W.transpose() * m);
    for (const auto& m : abar.dd) hbar.dd.push_back(layer.W.transpose() * m);
    ybar = std::move(hbar);
  }
  return ybar;
}

/// Plain reverse-mode pass for a batch: gradient of sum_b upstream_b . y_b.
/// Returns the input adjoint (in_dim x batch).
inline MatrixXd backprop_batch(const DenseNet& net, const MatrixXd& X, const MatrixXd& upstream, DenseNet& grad) {
  JetTape tape;
  Jet y = jet_forward(net, seed_jet(X, {}, 0), &tape);
  require(upstream.rows() == y.v.rows() && upstream.cols() == y.v.cols(), "backprop: upstream shape mismatch");
  Jet ybar;
  ybar.v = upstream;
  return jet_backward(net, tape, ybar, grad).v;
}

/// Exact gradient of upstream^T net(x) with respect to every parameter.
inline DenseNet param_grads(const DenseNet& net, const VectorXd& x, const VectorXd& upstream) {
  DenseNet g = net.zeros_like();
  backprop_batch(net, x, upstream, g);
  return g;
}

/// d net(x) / d x restricted to coord_slots (out_dim x slots).
inline MatrixXd input_jacobian(const DenseNet& net, const VectorXd& x, std::span<const int> coord_slots) {
  require(x.size() == net.in_dim(), "input_jacobian: input dimension mismatch");
  Jet y = jet_forward(net, seed_jet(x, coord_slots, 1));
  MatrixXd J(net.out_dim(), static_cast<Eigen::Index>(coord_slots.size()));
  for (int k = 0; k < y.slots(); ++k) J.col(k) = y.d[k].col(0);
  return J;
}

/// Second derivatives of a scalar-output net with respect to coord_slots.
inline MatrixXd input_hessian(const DenseNet& net, const VectorXd& x, std::span<const int> coord_slots) {
  require(net.out_dim() == 1, "input_hessian: net output must be scalar");
  require(x.size() == net.in_dim(), "input_hessian: input dimension mismatch");
  const int nc = static_cast<int>(coord_slots.size());
  Jet y = jet_forward(net, seed_jet(x, coord_slots, 2));
  MatrixXd H(nc, nc);
  for (int k = 0; k < nc; ++k)
    for (int l = k; l < nc; ++l) H(k, l) = H(l, k) = y.dd[pair_index(k, l, nc)](0, 0);
  return H;
}

// ---------------------------------------------------------------------------
// Optimizers

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  VectorXd m;
  VectorXd v;
  long step = 0;
};

inline void adam_step(VectorXd& params, const VectorXd& grads, OptimState& st, const AdamConfig& cfg = {}) {
  require(params.size() == grads.size(), "adam_step: shape mismatch");
  if (st.m.size() != params.size()) {
    st.m = VectorXd::Zero(params.size());
    st.v = VectorXd::Zero(params.size());
  }
  ++st.step;
  st.m = cfg.beta1 * st.m + (1 - cfg.beta1) * grads;
  st.v = cfg.beta2 * st.v + (1 - cfg.beta2) * grads.cwiseProduct(grads);
  double c1 = 1 - std::pow(cfg.beta1, static_cast<double>(st.step));
  double c2 = 1 - std::pow(cfg.beta2, static_cast<double>(st.step));
  params.array() -= cfg.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + cfg.eps);
}

/// Adam on a whole model (anything with for_each_param).
template <class M>
void adam_step(M& model, const M& grads, OptimState& st, const AdamConfig& cfg = {}) {
  VectorXd p = pack_params(model);
  adam_step(p, pack_params(grads), st, cfg);
  unpack_params(model, p);
}

struct LossAndGrad {
  double loss = 0.0;
  VectorXd grad;
};

using Objective = std::function<LossAndGrad(const VectorXd&)>;

struct QuasiNewtonResult {
  VectorXd params;
  double initial_loss = 0.0;
  double loss = 0.0;
  int iterations = 0;
  bool line_search_failed = false;
  std::vector<double> history;
};

/// BFGS with an inverse-Hessian approximation and a line search that tries
/// the unit step and the minimizer of the quadratic through f(0), f'(0), f(1).
/// Only accepted (decreasing) steps are kept, so the returned loss never
/// exceeds the starting loss.
inline QuasiNewtonResult bfgs_minimize(const Objective& f, VectorXd x, int max_iters, double grad_tol) {
  const Eigen::Index n = x.size();
  LossAndGrad cur = f(x);
  require(std::isfinite(cur.loss), "bfgs: non-finite initial loss");
  QuasiNewtonResult res;
  res.initial_loss = cur.loss;
  res.history.push_back(cur.loss);
  MatrixXd Hinv = MatrixXd::Identity(n, n);
  bool scaled = false;
  for (int it = 0; it < max_iters; ++it) {
    if (cur.grad.norm() <= grad_tol) break;
    VectorXd d = -Hinv * cur.grad;
    double slope = cur.grad.dot(d);
    if (!(slope < 0)) {
      Hinv.setIdentity();
      d = -cur.grad;
      slope = -cur.grad.squaredNorm();
    }
    // Line search.
    double best_a = 0.0;
    LossAndGrad best = cur;
    double a = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 40 && !accepted; ++ls) {
      LossAndGrad trial = f(x + a * d);
      double curv = trial.loss - cur.loss - slope * a;
      if (std::isfinite(trial.loss) && trial.loss < best.loss) {
        best = trial;
        best_a = a;
      }
      if (std::isfinite(trial.loss) && curv > 0) {
        double astar = -slope * a * a / (2 * curv);
        if (astar > 0 && std::abs(astar - a) > 1e-12 * a) {
          LossAndGrad t2 = f(x + astar * d);
          if (std::isfinite(t2.loss) && t2.loss < best.loss) {
            best = t2;
            best_a = astar;
          }
        }
      }
      if (best_a > 0 && best.loss <= cur.loss + 1e-4 * best_a * slope) {
        accepted = true;
      } else {
        a *= (std::isfinite(trial.loss) && curv > 0) ? std::max(0.1, std::min(0.5, -slope * a / (2 * curv))) : 0.25;
      }
    }
    if (!accepted) {
      if (best_a > 0 && best.loss < cur.loss) {
        // Decrease without sufficient-decrease: take it but stop afterwards.
        x += best_a * d;
        cur = best;
        res.history.push_back(cur.loss);
        ++res.iterations;
      }
      res.line_search_failed = true;
      break;
    }
    VectorXd s = best_a * d;
    VectorXd y = best.grad - cur.grad;
    x += s;
    cur = best;
    res.history.push_back(cur.loss);
    ++res.iterations;
    double sy = s.dot(y);
    if (sy > 1e-300) {
      if (!scaled) {
        Hinv *= sy / y.squaredNorm();
        scaled = true;
      }
      double r = 1.0 / sy;
      VectorXd Hy = Hinv * y;
      Hinv += (r * r * (sy + y.dot(Hy))) * (s * s.transpose()) - r * (Hy * s.transpose() + s * Hy.transpose());
    }
  }
  res.params = std::move(x);
  res.loss = cur.loss;
  return res;
}

/// Parameters of one layer of a net, flattened (W column-major then b).
inline VectorXd pack_layer(const DenseNet& net, std::size_t layer) {
  const auto& l = net.layers.at(layer);
  VectorXd out(l.W.size() + l.b.size());
  out << Eigen::Map<const VectorXd>(l.W.data(), l.W.size()), l.b;
  return out;
}

inline void unpack_layer(DenseNet& net, std::size_t layer, const VectorXd& flat) {
  auto& l = net.layers.at(layer);
  require(flat.size() == l.W.size() + l.b.size(), "unpack_layer: size mismatch");
  Eigen::Map<VectorXd>(l.W.data(), l.W.size()) = flat.head(l.W.size());
  l.b = flat.tail(l.b.size());
}

/// Loss of a whole net together with its full parameter gradient.
struct NetLoss {
  double loss = 0.0;
  DenseNet grad;
};
using NetObjective = std::function<NetLoss(const DenseNet&)>;

struct RefineResult {
  DenseNet net;
  QuasiNewtonResult info;
};

/// BFGS on the parameters of `layer` only; everything else stays frozen. The
/// objective must be deterministic (a fixed evaluation batch).
inline RefineResult quasi_newton_refine(const DenseNet& net, std::size_t layer, const NetObjective& loss_fn,
                                        int max_iters, double grad_tol) {
  require(layer < net.layers.size(), "quasi_newton_refine: layer index out of range");
  DenseNet work = net;
  Objective obj = [&](const VectorXd& theta) {
    unpack_layer(work, layer, theta);
    NetLoss nl = loss_fn(work);
    return LossAndGrad{nl.loss, pack_layer(nl.grad, layer)};
  };
  RefineResult out;
  out.info = bfgs_minimize(obj, pack_layer(net, layer), max_iters, grad_tol);
  out.net = net;
  unpack_layer(out.net, layer, out.info.params);
  return out;
}

}  // namespace mamover::nn
