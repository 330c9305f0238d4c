#pragma once

// MM-PDE: a message-passing evolution net on the original grid (G1) plus a
// second one on the moving mesh (G2), linked by the interpolation framework:
//   M(u) = G1(u) + Itp2(G2(Itp1(u))) + Res(u).
// Both nets predict increments; G2's branch carries the state itself.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mamover/checkpoint.hpp"
#include "mamover/common.hpp"
#include "mamover/dmm.hpp"
#include "mamover/geom.hpp"
#include "mamover/interp.hpp"
#include "mamover/nnet.hpp"

namespace mamover {

using Eigen::RowVectorXd;

// ---------------------------------------------------------------------------
// Message passing

struct MpConfig {
  int layers = 3;
  int width = 32;
  int k = 35;  // neighbours per node

  void validate() const {
    require(layers >= 1, "MpConfig: need at least one message-passing layer");
    require(width >= 1 && k >= 1, "MpConfig: width and k must be positive");
  }
};

inline nlohmann::json to_json(const MpConfig& c) { return {{"layers", c.layers}, {"width", c.width}, {"k", c.k}}; }
inline MpConfig mp_config_from_json(const nlohmann::json& j) { return {j.at("layers"), j.at("width"), j.at("k")}; }

/// One round: edge messages m_ij = W2 tanh(A h_i + B h_j + c (u_i - u_j) + D s(x_i - x_j) + b1) + b2
/// (a two-layer edge net whose first layer is split by input block), then
/// h_i += NU([h_i, sum_j m_ij]).
struct MpLayer {
  MatrixXd A, B, D, W2;
  VectorXd c, b1, b2;
  DenseNet nu;

  template <class F>
  void for_each_param(F&& f) {
    f(A), f(B), f(D), f(W2), f(c), f(b1), f(b2);
    nu.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f(A), f(B), f(D), f(W2), f(c), f(b1), f(b2);
    nu.for_each_param(f);
  }
};

class MessagePassingNet {
 public:
  MessagePassingNet() = default;

  /// Node encoder on [u, x, y, t]; decoder output layer zero, so the net starts
  /// by predicting no change.
  MessagePassingNet(const MpConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    const int H = cfg.width;
    encoder = DenseNet({4, H, H}, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      MpLayer L;
      const int fan_in = 2 * H + 3;
      double a = std::sqrt(6.0 / (fan_in + H));
      std::uniform_real_distribution<double> U(-a, a);
      auto fill = [&](MatrixXd& m, int r, int c) {
        m.resize(r, c);
        for (Eigen::Index q = 0; q < m.size(); ++q) m.data()[q] = U(rng);
      };
      fill(L.A, H, H);
      fill(L.B, H, H);
      fill(L.D, H, 2);
      MatrixXd cm;
      fill(cm, H, 1);
      L.c = cm.col(0);
      L.b1 = VectorXd::Zero(H);
      double a2 = std::sqrt(6.0 / (2.0 * H)) / std::sqrt(static_cast<double>(cfg.k));
      std::uniform_real_distribution<double> U2(-a2, a2);
      L.W2.resize(H, H);
      for (Eigen::Index q = 0; q < L.W2.size(); ++q) L.W2.data()[q] = U2(rng);
      L.b2 = VectorXd::Zero(H);
      L.nu = DenseNet({2 * H, H, H}, rng);
      layers.push_back(std::move(L));
    }
    decoder = DenseNet({H, H, 1}, rng, /*zero_last=*/true);
  }

  const MpConfig& config() const { return cfg_; }

  template <class F>
  void for_each_param(F&& f) {
    encoder.for_each_param(f);
    for (auto& L : layers) L.for_each_param(f);
    decoder.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    encoder.for_each_param(f);
    for (const auto& L : layers) L.for_each_param(f);
    decoder.for_each_param(f);
  }

  DenseNet encoder;
  std::vector<MpLayer> layers;
  DenseNet decoder;

 private:
  MpConfig cfg_;
};

/// Node coordinates plus their k-neighbour lists (self excluded), flattened
/// edge-major: edge i*k + e joins node i to nbr[i][e].
struct MpGraph {
  std::vector<Vec2> coords;
  std::vector<std::vector<std::size_t>> nbr;
  int k = 0;
  std::vector<Eigen::Index> src, dst;  // per edge: i and j
  MatrixXd offsets;                    // 2 x edges, s (x_i - x_j) with s ~ 1/h
};

inline MpGraph make_mp_graph(std::span<const Vec2> coords, int k) {
  require(coords.size() >= static_cast<std::size_t>(k) + 1, "message passing: node count must exceed k");
  MpGraph g;
  g.coords.assign(coords.begin(), coords.end());
  g.nbr = knn_graph(coords, static_cast<std::size_t>(k), false);
  g.k = k;
  const double s = std::sqrt(static_cast<double>(coords.size()));
  const std::size_t E = coords.size() * static_cast<std::size_t>(k);
  g.src.resize(E);
  g.dst.resize(E);
  g.offsets.resize(2, static_cast<Eigen::Index>(E));
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (std::size_t e = 0; e < static_cast<std::size_t>(k); ++e) {
      const std::size_t q = i * static_cast<std::size_t>(k) + e;
      const std::size_t j = g.nbr[i][e];
      g.src[q] = static_cast<Eigen::Index>(i);
      g.dst[q] = static_cast<Eigen::Index>(j);
      Vec2 d = coords[i] - coords[j];
      g.offsets(0, static_cast<Eigen::Index>(q)) = s * d.x;
      g.offsets(1, static_cast<Eigen::Index>(q)) = s * d.y;
    }
  return g;
}

struct MpTape {
  nn::JetTape enc, dec;
  RowVectorXd du;               // u_i - u_j per edge
  std::vector<MatrixXd> h;      // node states entering each layer
  std::vector<MatrixXd> t;      // tanh of edge pre-activations, H x edges
  std::vector<MatrixXd> s;      // per-node sums of t
  std::vector<nn::JetTape> nu;  // node-update tapes
};

namespace mp_detail {

// Sum each node's k consecutive edge columns.
inline MatrixXd sum_edges(const MatrixXd& T, Eigen::Index n, int k) {
  MatrixXd S(T.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) S.col(i) = T.middleCols(i * k, k).rowwise().sum();
  return S;
}

}  // namespace mp_detail

/// Predicted increment at every node.
inline VectorXd mp_forward(const MessagePassingNet& net, const MpGraph& g, const VectorXd& u, double t,
                           MpTape* tape = nullptr) {
  const auto N = static_cast<Eigen::Index>(g.coords.size());
  require(u.size() == N, "mp_forward: state size differs from the graph");
  const int H = net.config().width;
  const auto E = static_cast<Eigen::Index>(g.src.size());
  MatrixXd X(4, N);
  for (Eigen::Index i = 0; i < N; ++i)
    X.col(i) << u[i], 2 * g.coords[static_cast<std::size_t>(i)].x - 1, 2 * g.coords[static_cast<std::size_t>(i)].y - 1,
        2 * t - 1;
  RowVectorXd du(E);
  for (Eigen::Index q = 0; q < E; ++q) du[q] = u[g.src[static_cast<std::size_t>(q)]] - u[g.dst[static_cast<std::size_t>(q)]];
  MatrixXd h = nn::jet_forward(net.encoder, nn::seed_jet(X, {}, 0), tape ? &tape->enc : nullptr).v;
  if (tape) {
    tape->h.clear();
    tape->t.clear();
    tape->s.clear();
    tape->nu.assign(net.layers.size(), {});
  }
  MatrixXd Z(H, E);
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& L = net.layers[l];
    MatrixXd P = L.A * h;
    P.colwise() += L.b1;
    MatrixXd Q = L.B * h;
    Z.noalias() = L.D * g.offsets;
    Z.noalias() += L.c * du;
    for (Eigen::Index q = 0; q < E; ++q)
      Z.col(q) += P.col(g.src[static_cast<std::size_t>(q)]) + Q.col(g.dst[static_cast<std::size_t>(q)]);
    MatrixXd T = nn::fast_tanh(Z.array()).matrix();
    MatrixXd S = mp_detail::sum_edges(T, N, g.k);
    MatrixXd in(2 * H, N);
    in.topRows(H) = h;
    in.bottomRows(H).noalias() = L.W2 * S;
    in.bottomRows(H).colwise() += static_cast<double>(g.k) * L.b2;
    MatrixXd upd = nn::jet_forward(L.nu, nn::seed_jet(in, {}, 0), tape ? &tape->nu[l] : nullptr).v;
    if (tape) {
      tape->h.push_back(h);
      tape->t.push_back(std::move(T));
      tape->s.push_back(std::move(S));
    }
    h += upd;
  }
  if (tape) tape->du = std::move(du);
  return nn::jet_forward(net.decoder, nn::seed_jet(h, {}, 0), tape ? &tape->dec : nullptr).v.row(0).transpose();
}

/// Gradient of out_bar . delta into grad; returns d/du when want_u.
inline VectorXd mp_backward(const MessagePassingNet& net, const MpGraph& g, const MpTape& tape, const VectorXd& out_bar,
                            MessagePassingNet& grad, bool want_u = false) {
  const auto N = static_cast<Eigen::Index>(g.coords.size());
  const auto E = static_cast<Eigen::Index>(g.src.size());
  const int H = net.config().width;
  VectorXd ubar = VectorXd::Zero(N);
  RowVectorXd du_bar = want_u ? RowVectorXd::Zero(E) : RowVectorXd();
  nn::Jet adj;
  adj.v = out_bar.transpose();
  MatrixXd hbar = nn::jet_backward(net.decoder, tape.dec, adj, grad.decoder).v;
  MatrixXd Abar(H, E);
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    const auto& L = net.layers[l];
    auto& G = grad.layers[l];
    const MatrixXd& h = tape.h[l];
    const MatrixXd& T = tape.t[l];
    nn::Jet ua;
    ua.v = hbar;
    MatrixXd inbar = nn::jet_backward(L.nu, tape.nu[l], ua, G.nu).v;
    MatrixXd hprev_bar = hbar + inbar.topRows(H);
    const auto Mbar = inbar.bottomRows(H);
    G.W2.noalias() += Mbar * tape.s[l].transpose();
    G.b2 += static_cast<double>(g.k) * Mbar.rowwise().sum();
    MatrixXd Sbar = L.W2.transpose() * Mbar;
    for (Eigen::Index i = 0; i < N; ++i)
      Abar.middleCols(i * g.k, g.k) =
          (1.0 - T.middleCols(i * g.k, g.k).array().square()).colwise() * Sbar.col(i).array();
    MatrixXd Pbar = mp_detail::sum_edges(Abar, N, g.k);
    MatrixXd Qbar = MatrixXd::Zero(H, N);
    for (Eigen::Index q = 0; q < E; ++q) Qbar.col(g.dst[static_cast<std::size_t>(q)]) += Abar.col(q);
    G.c.noalias() += Abar * tape.du.transpose();
    G.D.noalias() += Abar * g.offsets.transpose();
    if (want_u) du_bar.noalias() += L.c.transpose() * Abar;
    G.A.noalias() += Pbar * h.transpose();
    G.b1 += Pbar.rowwise().sum();
    G.B.noalias() += Qbar * h.transpose();
    hprev_bar.noalias() += L.A.transpose() * Pbar;
    hprev_bar.noalias() += L.B.transpose() * Qbar;
    hbar = std::move(hprev_bar);
  }
  nn::Jet ea;
  ea.v = hbar;
  MatrixXd xbar = nn::jet_backward(net.encoder, tape.enc, ea, grad.encoder).v;
  if (want_u) {
    ubar = xbar.row(0).transpose();
    for (Eigen::Index q = 0; q < E; ++q) {
      ubar[g.src[static_cast<std::size_t>(q)]] += du_bar[q];
      ubar[g.dst[static_cast<std::size_t>(q)]] -= du_bar[q];
    }
  }
  return ubar;
}

// ---------------------------------------------------------------------------
// Variants and the two-branch model

enum class VariantKind { full, no_g1, g1_plus_g2, no_residual, uniform_mesh, blend, g1_only };

struct VariantSpec {
  VariantKind kind = VariantKind::full;
  double lambda = 1.0;  // blend only: nodes at lambda f(x) + (1 - lambda) x

  bool uses_interp() const { return kind != VariantKind::g1_plus_g2 && kind != VariantKind::g1_only; }
  bool uses_g1() const { return kind != VariantKind::no_g1; }
  bool uses_g2() const { return kind != VariantKind::g1_only; }
  bool uses_residual() const { return uses_interp() && kind != VariantKind::no_residual; }
};

inline VariantSpec parse_variant(const std::string& s) {
  VariantSpec v;
  if (s == "full") v.kind = VariantKind::full;
  else if (s == "no_g1") v.kind = VariantKind::no_g1;
  else if (s == "g1_plus_g2") v.kind = VariantKind::g1_plus_g2;
  else if (s == "no_residual") v.kind = VariantKind::no_residual;
  else if (s == "uniform_mesh") v.kind = VariantKind::uniform_mesh;
  else if (s == "g1_only") v.kind = VariantKind::g1_only;
  else if (s.rfind("blend:", 0) == 0) {
    v.kind = VariantKind::blend;
    std::size_t used = 0;
    try {
      v.lambda = std::stod(s.substr(6), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used > 0 && used == s.size() - 6, "invalid blend coefficient in variant: " + s);
    require(v.lambda >= 0 && v.lambda <= 1, "blend coefficient must lie in [0, 1]: " + s);
  } else {
    throw Error("unknown variant: " + s +
                " (expected full, no_g1, g1_plus_g2, no_residual, uniform_mesh, g1_only or blend:<lambda>)");
  }
  return v;
}

inline std::string to_string(const VariantSpec& v) {
  switch (v.kind) {
    case VariantKind::full: return "full";
    case VariantKind::no_g1: return "no_g1";
    case VariantKind::g1_plus_g2: return "g1_plus_g2";
    case VariantKind::no_residual: return "no_residual";
    case VariantKind::uniform_mesh: return "uniform_mesh";
    case VariantKind::g1_only: return "g1_only";
    case VariantKind::blend: {
      std::ostringstream os;
      os << "blend:" << v.lambda;
      return os.str();
    }
  }
  return "full";
}

/// Mesh for the moving branch: the mover's mesh blended towards the identity.
inline MovedMesh blend_mesh(const MovedMesh& moved, double lambda) {
  auto base = moved.base().nodes();
  std::vector<Vec2> out(base.size());
  for (std::size_t k = 0; k < base.size(); ++k) out[k] = lambda * moved.coords()[k] + (1 - lambda) * base[k];
  return {moved.base(), std::move(out)};
}

struct MmPdeModel {
  MessagePassingNet g1, g2;
  InterpFramework interp;
  VariantSpec variant;
  DmmModel mover;  // frozen
  bool identity_mover = false;  // stands in for a DMM (tests, uniform runs)

  template <class F>
  void for_each_param(F&& f) {
    g1.for_each_param(f);
    g2.for_each_param(f);
    interp.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    g1.for_each_param(f);
    g2.for_each_param(f);
    interp.for_each_param(f);
  }

  MmPdeModel zeros_like() const {
    MmPdeModel z = *this;
    nn::set_zero(z);
    return z;
  }
};

inline MmPdeModel make_mmpde(const MpConfig& mp, const InterpFramework& interp, const VariantSpec& v,
                             const DmmModel* mover, std::uint64_t seed) {
  MmPdeModel m;
  std::mt19937_64 rng(seed);
  m.g1 = MessagePassingNet(mp, rng);
  m.g2 = MessagePassingNet(mp, rng);
  m.interp = interp;
  m.variant = v;
  if (mover) m.mover = *mover;
  else m.identity_mover = true;
  return m;
}

/// The moving-branch mesh for a state, per variant.
inline MovedMesh variant_mesh(const MmPdeModel& m, const ScalarField2D& u, double t) {
  const auto& g = u.grid();
  if (m.identity_mover || m.variant.kind == VariantKind::uniform_mesh || !m.variant.uses_interp())
    return MovedMesh::identity(g);
  MovedMesh moved = resolution_transfer(m.mover, u, t, g);
  return m.variant.kind == VariantKind::blend ? blend_mesh(moved, m.variant.lambda) : moved;
}

/// Everything about one input state that does not depend on trainable
/// parameters: graphs, interpolation plans.
struct StepContext {
  const MpGraph* orig = nullptr;  // shared graph of the original grid
  MpGraph moved;
  RoundtripPlans plans;
};

inline StepContext make_step_context(const MmPdeModel& m, const MpGraph& orig, const ScalarField2D& u, double t) {
  StepContext c;
  c.orig = &orig;
  if (m.variant.uses_interp()) {
    MovedMesh mesh = variant_mesh(m, u, t);
    c.moved = make_mp_graph(mesh.coords(), m.g2.config().k);
    c.plans = make_roundtrip_plans(m.interp, mesh);
  }
  return c;
}

namespace solver_detail {

struct StepTape {
  MpTape g1, g2;
  ItpCache c1, c2;
  nn::JetTape res;
  VectorXd v, w;  // state on the moving mesh before / after G2
};

inline VectorXd forward(const MmPdeModel& m, const StepContext& c, const VectorXd& u, double t, StepTape* tape) {
  const auto& V = m.variant;
  VectorXd y;
  if (!V.uses_interp()) {
    y = u + mp_forward(m.g1, *c.orig, u, t, tape ? &tape->g1 : nullptr);
    if (V.uses_g2()) y += mp_forward(m.g2, *c.orig, u, t, tape ? &tape->g2 : nullptr);
    return y;
  }
  VectorXd v = itp_apply(m.interp.itp1, c.plans.to_moved, u, tape ? &tape->c1 : nullptr);
  VectorXd w = v + mp_forward(m.g2, c.moved, v, t, tape ? &tape->g2 : nullptr);
  y = itp_apply(m.interp.itp2, c.plans.to_orig, w, tape ? &tape->c2 : nullptr);
  if (V.uses_residual() && m.interp.config().use_residual) y += residual_cut(m.interp, u, tape ? &tape->res : nullptr);
  if (V.uses_g1()) y += mp_forward(m.g1, *c.orig, u, t, tape ? &tape->g1 : nullptr);
  if (tape) {
    tape->v = std::move(v);
    tape->w = std::move(w);
  }
  return y;
}

inline void backward(const MmPdeModel& m, const StepContext& c, const VectorXd& u, const StepTape& tape,
                     const VectorXd& ybar, MmPdeModel& grad) {
  const auto& V = m.variant;
  if (!V.uses_interp()) {
    mp_backward(m.g1, *c.orig, tape.g1, ybar, grad.g1);
    if (V.uses_g2()) mp_backward(m.g2, *c.orig, tape.g2, ybar, grad.g2);
    return;
  }
  if (V.uses_g1()) mp_backward(m.g1, *c.orig, tape.g1, ybar, grad.g1);
  VectorXd wbar = VectorXd::Zero(tape.w.size());
  itp_backward(m.interp.itp2, c.plans.to_orig, tape.w, tape.c2, ybar, grad.interp.itp2, &wbar);
  VectorXd vbar = wbar + mp_backward(m.g2, c.moved, tape.g2, wbar, grad.g2, true);
  itp_backward(m.interp.itp1, c.plans.to_moved, u, tape.c1, vbar, grad.interp.itp1);
  if (V.uses_residual() && m.interp.config().use_residual) {
    nn::Jet adj;
    adj.v = ybar;
    nn::jet_backward(m.interp.residual, tape.res, adj, grad.interp.residual);
  }
}

}  // namespace solver_detail

/// One step u_t -> u_{t+1}.
inline VectorXd mmpde_forward(const MmPdeModel& m, const StepContext& c, const VectorXd& u, double t) {
  return solver_detail::forward(m, c, u, t, nullptr);
}

inline ScalarField2D mmpde_forward(const MmPdeModel& m, const MpGraph& orig, const ScalarField2D& u, double t) {
  auto c = make_step_context(m, orig, u, t);
  return as_field(u.grid(), mmpde_forward(m, c, as_vector(u), t));
}

/// Autoregressive rollout; frame 0 is u0, time advances by dt_norm per step.
inline std::vector<ScalarField2D> rollout(const MmPdeModel& m, const ScalarField2D& u0, double t0, double dt_norm,
                                          int steps) {
  require(steps >= 1, "rollout: steps must be positive");
  auto orig = make_mp_graph(u0.grid().nodes(), m.g1.config().k);
  std::vector<ScalarField2D> out{u0};
  for (int s = 0; s < steps; ++s) {
    double t = t0 + s * dt_norm;
    auto next = mmpde_forward(m, orig, out.back(), t);
    for (double v : next.values())
      if (!std::isfinite(v)) throw Error("rollout: non-finite state at step " + std::to_string(s + 1));
    out.push_back(std::move(next));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

inline double mse(const std::vector<ScalarField2D>& pred, const std::vector<ScalarField2D>& truth) {
  require(pred.size() == truth.size() && !pred.empty(), "mse: trajectory lengths differ");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t f = 0; f < pred.size(); ++f) {
    require(pred[f].size() == truth[f].size(), "mse: frame shapes differ");
    for (std::size_t k = 0; k < pred[f].size(); ++k) {
      double d = pred[f][k] - truth[f][k];
      s += d * d;
    }
    n += pred[f].size();
  }
  return s / static_cast<double>(n);
}

inline double rmse_relative(const std::vector<ScalarField2D>& pred, const std::vector<ScalarField2D>& truth) {
  require(pred.size() == truth.size() && !pred.empty(), "rmse_relative: trajectory lengths differ");
  double num = 0.0, den = 0.0;
  for (std::size_t f = 0; f < pred.size(); ++f) {
    require(pred[f].size() == truth[f].size(), "rmse_relative: frame shapes differ");
    for (std::size_t k = 0; k < pred[f].size(); ++k) {
      double d = pred[f][k] - truth[f][k];
      num += d * d;
      den += truth[f][k] * truth[f][k];
    }
  }
  require(den > 0, "rmse_relative: reference trajectory is identically zero");
  return num / den;
}

// ---------------------------------------------------------------------------
// Training

struct StepSample {
  ScalarField2D u, next;
  double t = 0.0;  // normalized time of u
};

struct SolverTrainConfig {
  int epochs = 10;
  double lr = 1e-3;
  double lr_final = 1e-4;
  int batch = 4;
  bool freeze_interp = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 0, "SolverTrainConfig: epochs must be non-negative");
    require(lr > 0 && lr_final > 0, "SolverTrainConfig: learning rates must be positive");
    require(batch >= 1, "SolverTrainConfig: batch must be positive");
  }
};

struct SolverTrainResult {
  MmPdeModel model;
  double initial = 0.0;         // mean one-step MSE before training
  std::vector<double> history;  // mean one-step training MSE per epoch
};

/// Loss and (optionally) gradient of the one-step MSE for a prepared sample.
inline double step_loss(const MmPdeModel& m, const StepContext& c, const VectorXd& u, const VectorXd& target, double t,
                        MmPdeModel* grad, double scale) {
  solver_detail::StepTape tape;
  VectorXd y = solver_detail::forward(m, c, u, t, grad ? &tape : nullptr);
  VectorXd e = y - target;
  const double n = static_cast<double>(e.size());
  if (grad) solver_detail::backward(m, c, u, tape, (2.0 * scale / n) * e, *grad);
  return e.squaredNorm() / n;
}

inline SolverTrainResult train_solver(const std::vector<StepSample>& data, const MmPdeModel& init,
                                      const SolverTrainConfig& cfg,
                                      const std::function<void(int, double)>& progress = {}) {
  cfg.validate();
  require(!data.empty(), "train_solver: empty dataset");
  const auto& grid = data[0].u.grid();
  MpGraph orig = make_mp_graph(grid.nodes(), init.g1.config().k);
  struct Prepared {
    StepContext ctx;
    VectorXd u, target;
    double t;
  };
  std::vector<Prepared> prep;
  prep.reserve(data.size());
  for (const auto& s : data) {
    require(s.u.grid().nx() == grid.nx() && s.u.grid().ny() == grid.ny(), "train_solver: mixed grids");
    prep.push_back({make_step_context(init, orig, s.u, s.t), as_vector(s.u), as_vector(s.next), s.t});
  }
  SolverTrainResult res;
  res.model = init;
  MmPdeModel& m = res.model;
  {
    double s = 0.0;
    for (const auto& p : prep) s += step_loss(m, p.ctx, p.u, p.target, p.t, nullptr, 1.0);
    res.initial = s / static_cast<double>(prep.size());
  }
  std::mt19937_64 rng(cfg.seed);
  nn::OptimState opt;
  std::vector<std::size_t> order(prep.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(cfg.batch);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double frac = cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 1.0;
    nn::AdamConfig ac;
    ac.lr = cfg.lr * std::pow(cfg.lr_final / cfg.lr, frac);
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      std::size_t e = std::min(order.size(), b + batch);
      MmPdeModel grad = m.zeros_like();
      for (std::size_t q = b; q < e; ++q) {
        const auto& p = prep[order[q]];
        double l = step_loss(m, p.ctx, p.u, p.target, p.t, &grad, 1.0 / static_cast<double>(e - b));
        if (!std::isfinite(l)) throw Error("train_solver: loss diverged at epoch " + std::to_string(epoch));
        sum += l;
      }
      if (cfg.freeze_interp) nn::set_zero(grad.interp);
      nn::adam_step(m, grad, opt, ac);
    }
    res.history.push_back(sum / static_cast<double>(prep.size()));
    if (progress) progress(epoch, res.history.back());
  }
  return res;
}

/// (u_t, u_{t+1}) pairs from trajectories, with t normalized by `steps`.
inline std::vector<StepSample> step_samples(const std::vector<std::vector<ScalarField2D>>& trajectories, int steps,
                                            int max_step = -1) {
  std::vector<StepSample> out;
  for (const auto& tr : trajectories)
    for (std::size_t f = 0; f + 1 < tr.size(); ++f) {
      if (max_step >= 0 && static_cast<int>(f) >= max_step) break;
      out.push_back({tr[f], tr[f + 1], static_cast<double>(f) / steps});
    }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence (the frozen mover travels with the model)

inline void save_mmpde(const std::string& path, const MmPdeModel& m, const nlohmann::json& info = {}) {
  Checkpoint ck;
  ck.meta["kind"] = "mmpde";
  ck.meta["variant"] = to_string(m.variant);
  ck.meta["mp"] = to_json(m.g1.config());
  ck.meta["interp"] = to_json(m.interp.config());
  ck.meta["nodes"] = m.interp.nodes();
  ck.meta["identity_mover"] = m.identity_mover;
  if (!m.identity_mover) ck.meta["dmm_arch"] = to_json(m.mover.arch());
  ck.meta["info"] = info;
  ck.add_params("model", m);
  if (!m.identity_mover) ck.add_params("dmm", m.mover);
  save_checkpoint(path, ck);
}

inline MmPdeModel load_mmpde(const std::string& path) {
  auto ck = load_checkpoint(path);
  require(ck.meta.value("kind", "") == "mmpde", "load_mmpde: not an MM-PDE checkpoint: " + path);
  InterpFramework fw(interp_config_from_json(ck.meta.at("interp")), ck.meta.at("nodes").get<std::size_t>(), 0);
  const bool ident = ck.meta.at("identity_mover");
  DmmModel dmm;
  if (!ident) dmm = DmmModel(dmm_arch_from_json(ck.meta.at("dmm_arch")), 0);
  auto m = make_mmpde(mp_config_from_json(ck.meta.at("mp")), fw, parse_variant(ck.meta.at("variant")),
                      ident ? nullptr : &dmm, 0);
  ck.load_params("model", m);
  if (!ident) ck.load_params("dmm", m.mover);
  return m;
}

}  // namespace mamover
