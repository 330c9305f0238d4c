#pragma once

// Classical finite-difference Monge-Ampere mesh movement.
//
// The unknown is the residual potential psi (phi = psi + |x|^2/2); nodes move
// to x + grad psi. Boundary stencils reflect psi evenly across each edge, so
// the normal derivative vanishes there and boundary nodes slide along their
// edge (corners stay fixed).

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "mamover/common.hpp"
#include "mamover/geom.hpp"
#include "mamover/monitor.hpp"

namespace mamover {

// ---------------------------------------------------------------------------
// 1-D equidistribution

/// Monotone map f on [0,1] with f(x_i) = P^{-1}(x_i P(1)), P the cumulative
/// integral of the piecewise-linear density through `rho` (uniform samples
/// over [0,1]). Evaluated at n uniform nodes.
inline std::vector<double> solve_ma_1d(std::span<const double> rho, int n) {
  require(rho.size() >= 2, "solve_ma_1d: need at least two density samples");
  require(n >= 2, "solve_ma_1d: need at least two output nodes");
  for (double r : rho) require(r > 0 && std::isfinite(r), "solve_ma_1d: density must be positive");
  const std::size_t m = rho.size();
  const double h = 1.0 / static_cast<double>(m - 1);
  std::vector<double> P(m, 0.0);
  for (std::size_t s = 1; s < m; ++s) P[s] = P[s - 1] + 0.5 * h * (rho[s - 1] + rho[s]);
  std::vector<double> f(static_cast<std::size_t>(n));
  f.front() = 0.0;
  f.back() = 1.0;
  std::size_t s = 0;
  for (int i = 1; i + 1 < n; ++i) {
    double target = (static_cast<double>(i) / (n - 1)) * P.back();
    while (s + 2 < m && P[s + 1] < target) ++s;
    double c = target - P[s];
    double ra = rho[s] * h;
    double q = (rho[s + 1] - rho[s]) * h;  // P(a + t h) - P(a) = ra t + q t^2 / 2
    double t = 2 * c / (ra + std::sqrt(std::max(0.0, ra * ra + 2 * q * c)));
    f[static_cast<std::size_t>(i)] = (static_cast<double>(s) + std::clamp(t, 0.0, 1.0)) * h;
  }
  return f;
}

// ---------------------------------------------------------------------------
// 2-D solver

enum class MaScheme { relaxation, damped_newton };

inline MaScheme parse_scheme(const std::string& s) {
  if (s == "relaxation") return MaScheme::relaxation;
  if (s == "damped_newton" || s == "newton") return MaScheme::damped_newton;
  throw Error("unknown MA scheme: " + s);
}

struct MaSolveConfig {
  int max_iters = 20000;
  double tol = 1e-6;  // relative L2 norm of the equation residual
  double damping = 1.0;
  MaScheme scheme = MaScheme::relaxation;
  int log_every = 0;  // >0: record equidistribution std every n iterations
  int max_stages = 8;  // continuation stages for high-contrast densities

  void validate() const {
    require(tol > 0, "MaSolveConfig: tol must be positive");
    require(damping > 0 && damping <= 1, "MaSolveConfig: damping must lie in (0, 1]");
    require(max_iters >= 0, "MaSolveConfig: max_iters must be non-negative");
    require(max_stages >= 1, "MaSolveConfig: max_stages must be positive");
  }
};

struct PsiGrid {
  ScalarField2D psi;
  const StructuredGrid& grid() const { return psi.grid(); }
};

struct MaSolveResult {
  PsiGrid psi;
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;
  std::vector<double> residual_history;
  std::vector<double> std_history;  // equidistribution std at logged checkpoints
};

/// Node (i, j) moved to x + grad psi (second-order one-sided stencils at the
/// edges). Moved points are clamped to the domain and boundary nodes are kept
/// on their edge.
inline MovedMesh transform_from_psi(const PsiGrid& p) {
  const auto& g = p.grid();
  auto grad = grad_fd(p.psi, Boundary::one_sided);
  const Rect& d = g.domain();
  std::vector<Vec2> coords(g.num_nodes());
  for (int j = 0; j < g.ny(); ++j)
    for (int i = 0; i < g.nx(); ++i) {
      std::size_t k = g.index(i, j);
      Vec2 q = d.clamp(g.node(i, j) + Vec2{grad.gx[k], grad.gy[k]});
      if (i == 0) q.x = d.x0;
      if (i == g.nx() - 1) q.x = d.x1;
      if (j == 0) q.y = d.y0;
      if (j == g.ny() - 1) q.y = d.y1;
      coords[k] = q;
    }
  return {g, std::move(coords)};
}

namespace ma_detail {

inline int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

struct Stencil {
  // Derivatives of psi at a node.
  double px, py, pxx, pyy, pxy;
};

class Discretization {
 public:
  Discretization(const StructuredGrid& g) : g_(g) {}

  double at(const std::vector<double>& psi, int i, int j) const {
    return psi[g_.index(reflect(i, g_.nx()), reflect(j, g_.ny()))];
  }

  Stencil derivs(const std::vector<double>& psi, int i, int j) const {
    const double hx = g_.hx(), hy = g_.hy();
    double c = at(psi, i, j);
    double e = at(psi, i + 1, j), w = at(psi, i - 1, j);
    double n = at(psi, i, j + 1), s = at(psi, i, j - 1);
    double ne = at(psi, i + 1, j + 1), nw = at(psi, i - 1, j + 1);
    double se = at(psi, i + 1, j - 1), sw = at(psi, i - 1, j - 1);
    return {(e - w) / (2 * hx), (n - s) / (2 * hy), (e - 2 * c + w) / (hx * hx), (n - 2 * c + s) / (hy * hy),
            (ne - nw - se + sw) / (4 * hx * hy)};
  }

  // Add coefficient `v` for the (reflected) neighbour (i+di, j+dj) to a row.
  void add(std::vector<Eigen::Triplet<double>>& t, int row, int i, int j, double v) const {
    int col = static_cast<int>(g_.index(reflect(i, g_.nx()), reflect(j, g_.ny())));
    t.emplace_back(row, col, v);
  }

  const StructuredGrid& grid() const { return g_; }

 private:
  StructuredGrid g_;
};

/// Trapezoid weights normalized to sum to one.
inline std::vector<double> trapezoid_weights(const StructuredGrid& g) {
  std::vector<double> w(g.num_nodes());
  double total = 0.0;
  for (int j = 0; j < g.ny(); ++j)
    for (int i = 0; i < g.nx(); ++i) {
      double v = ((i == 0 || i == g.nx() - 1) ? 0.5 : 1.0) * ((j == 0 || j == g.ny() - 1) ? 0.5 : 1.0);
      w[g.index(i, j)] = v;
      total += v;
    }
  for (double& v : w) v /= total;
  return w;
}

struct Evaluation {
  std::vector<double> F;  // rho(x + grad psi) det(I + H psi)
  double theta = 0.0;     // weighted mean of F (discrete sigma / |Omega|)
  double residual = 0.0;  // relative L2 of F / theta - 1
  bool convex = true;
};

inline Evaluation evaluate(const Discretization& D, const MonitorField& mon, const std::vector<double>& psi,
                           const std::vector<double>& w) {
  const auto& g = D.grid();
  Evaluation ev;
  ev.F.resize(g.num_nodes());
  for (int j = 0; j < g.ny(); ++j)
    for (int i = 0; i < g.nx(); ++i) {
      auto s = D.derivs(psi, i, j);
      double a11 = 1 + s.pxx, a22 = 1 + s.pyy;
      double det = a11 * a22 - s.pxy * s.pxy;
      if (!(det > 0 && a11 + a22 > 0)) ev.convex = false;
      double rho = bilinear_sample(mon.rho, g.node(i, j) + Vec2{s.px, s.py});
      ev.F[g.index(i, j)] = rho * det;
    }
  for (std::size_t k = 0; k < ev.F.size(); ++k) ev.theta += w[k] * ev.F[k];
  double r2 = 0.0;
  for (std::size_t k = 0; k < ev.F.size(); ++k) {
    double r = ev.F[k] / ev.theta - 1.0;
    r2 += w[k] * r * r;
  }
  ev.residual = std::sqrt(r2);
  return ev;
}

inline void pin_gauge(std::vector<double>& psi, const StructuredGrid& g) {
  double c = psi[g.index(g.nx() / 2, g.ny() / 2)];
  for (double& v : psi) v -= c;
}

}  // namespace ma_detail

namespace ma_detail {

struct StageOutcome {
  std::vector<double> psi;  // best iterate of the stage
  Evaluation ev;
  int iterations = 0;
};

/// Iterate on one monitor from `psi0` until the residual reaches `tol`, the
/// budget runs out or no admissible step is left. Returns the best iterate.
inline StageOutcome solve_stage(const MonitorField& monitor, std::vector<double> psi, double tol, int budget,
                                const MaSolveConfig& cfg, const std::vector<double>& w,
                                Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>& pre_solver,
                                const std::function<void(const std::vector<double>&, double)>& on_step) {
  const auto& g = monitor.rho.grid();
  const int n = static_cast<int>(g.num_nodes());
  const double hx = g.hx(), hy = g.hy();
  Discretization D(g);
  Evaluation ev = evaluate(D, monitor, psi, w);
  StageOutcome best{psi, ev, 0};

  double tau = cfg.damping;
  const double tau_min = 1e-10;
  int since_best = 0;
  int it = 0;
  for (; it < budget && ev.residual > tol && since_best < 400; ++it) {
    std::vector<double> trial;
    bool accepted = false;
    if (cfg.scheme == MaScheme::damped_newton) {
      // Jacobian of log F with theta frozen; the centre row pins the gauge.
      std::vector<Eigen::Triplet<double>> jt;
      Eigen::VectorXd rhs(n);
      const int centre = static_cast<int>(g.index(g.nx() / 2, g.ny() / 2));
      for (int j = 0; j < g.ny(); ++j)
        for (int i = 0; i < g.nx(); ++i) {
          int row = static_cast<int>(g.index(i, j));
          if (row == centre) {
            jt.emplace_back(row, row, 1.0);
            rhs[row] = 0.0;
            continue;
          }
          auto s = D.derivs(psi, i, j);
          double a11 = 1 + s.pxx, a22 = 1 + s.pyy, a12 = s.pxy;
          double det = a11 * a22 - a12 * a12;
          auto sg = bilinear_sample_grad(monitor.rho, g.node(i, j) + Vec2{s.px, s.py});
          double cx = sg.grad.x / sg.value, cy = sg.grad.y / sg.value;
          double cxx = a22 / det, cyy = a11 / det, cxy = -2 * a12 / det;
          D.add(jt, row, i + 1, j, cxx / (hx * hx) + cx / (2 * hx));
          D.add(jt, row, i - 1, j, cxx / (hx * hx) - cx / (2 * hx));
          D.add(jt, row, i, j + 1, cyy / (hy * hy) + cy / (2 * hy));
          D.add(jt, row, i, j - 1, cyy / (hy * hy) - cy / (2 * hy));
          D.add(jt, row, i, j, -2 * cxx / (hx * hx) - 2 * cyy / (hy * hy));
          double q = cxy / (4 * hx * hy);
          D.add(jt, row, i + 1, j + 1, q);
          D.add(jt, row, i - 1, j - 1, q);
          D.add(jt, row, i + 1, j - 1, -q);
          D.add(jt, row, i - 1, j + 1, -q);
          rhs[row] = -std::log(ev.F[static_cast<std::size_t>(row)] / ev.theta);
        }
      Eigen::SparseMatrix<double> J(n, n);
      J.setFromTriplets(jt.begin(), jt.end());
      Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
      lu.compute(J);
      if (lu.info() == Eigen::Success) {
        Eigen::VectorXd delta = lu.solve(rhs);
        double lam = cfg.damping;
        for (int bt = 0; bt < 12 && !accepted; ++bt, lam *= 0.5) {
          trial = psi;
          for (int k = 0; k < n; ++k) trial[static_cast<std::size_t>(k)] += lam * delta[k];
          Evaluation te = evaluate(D, monitor, trial, w);
          if (te.convex && std::isfinite(te.residual) && te.residual < ev.residual) {
            psi = std::move(trial);
            ev = std::move(te);
            accepted = true;
          }
        }
      }
    }
    while (!accepted && tau >= tau_min) {
      Eigen::VectorXd rhs(n);
      for (int k = 0; k < n; ++k) {
        auto kk = static_cast<std::size_t>(k);
        rhs[k] = w[kk] * tau * std::log(ev.F[kk] / ev.theta);
      }
      Eigen::VectorXd delta = pre_solver.solve(rhs);
      trial = psi;
      for (int k = 0; k < n; ++k) trial[static_cast<std::size_t>(k)] += delta[k];
      Evaluation te = evaluate(D, monitor, trial, w);
      if (te.convex && std::isfinite(te.residual) && te.residual <= 1.5 * ev.residual) {
        bool improved = te.residual < ev.residual;
        psi = std::move(trial);
        ev = std::move(te);
        tau = improved ? std::min(cfg.damping, tau * 1.1) : tau * 0.5;
        accepted = true;
        break;
      }
      tau *= 0.5;
    }
    if (!accepted) break;  // no admissible step left: keep the best iterate
    pin_gauge(psi, g);
    if (ev.residual < best.ev.residual) {
      since_best = best.ev.residual - ev.residual > 1e-3 * best.ev.residual ? 0 : since_best + 1;
      best.psi = psi;
      best.ev = ev;
    } else {
      ++since_best;
    }
    on_step(psi, ev.residual);
  }
  best.iterations = it;
  return best;
}

}  // namespace ma_detail

/// Solve |Omega| rho(x + grad psi) det(I + H psi) = sigma on the monitor's grid.
///
/// relaxation: pseudo-time steps psi += (W - gamma W Lap)^{-1} W tau log(F/theta)
/// with step backoff whenever a step loses convexity or blows up the residual.
/// damped_newton: Newton on log(F/theta) with backtracking; falls back to a
/// relaxation step when backtracking fails.
///
/// High-contrast densities are reached by continuation through rho^s,
/// s = 1/stages, ..., 1. When the final equation admits no further convex
/// step the best iterate is returned with converged == false.
inline MaSolveResult solve_ma_2d(const MonitorField& monitor, const MaSolveConfig& cfg = {}) {
  cfg.validate();
  for (double r : monitor.rho.values()) require(r > 0, "solve_ma_2d: density must be positive");
  using namespace ma_detail;
  const auto& g = monitor.rho.grid();
  const int n = static_cast<int>(g.num_nodes());
  Discretization D(g);
  auto w = trapezoid_weights(g);

  // Weighted Neumann Laplacian (symmetric): W * Lap.
  std::vector<Eigen::Triplet<double>> lt;
  const double hx = g.hx(), hy = g.hy();
  for (int j = 0; j < g.ny(); ++j)
    for (int i = 0; i < g.nx(); ++i) {
      int row = static_cast<int>(g.index(i, j));
      double wr = w[static_cast<std::size_t>(row)];
      D.add(lt, row, i + 1, j, wr / (hx * hx));
      D.add(lt, row, i - 1, j, wr / (hx * hx));
      D.add(lt, row, i, j + 1, wr / (hy * hy));
      D.add(lt, row, i, j - 1, wr / (hy * hy));
      D.add(lt, row, i, j, -wr * (2 / (hx * hx) + 2 / (hy * hy)));
    }
  Eigen::SparseMatrix<double> WLap(n, n);
  WLap.setFromTriplets(lt.begin(), lt.end());
  Eigen::SparseMatrix<double> Wm(n, n);
  for (int k = 0; k < n; ++k) Wm.insert(k, k) = w[static_cast<std::size_t>(k)];
  Eigen::SparseMatrix<double> Pre = Wm - WLap;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> pre_solver(Pre);
  require(pre_solver.info() == Eigen::Success, "solve_ma_2d: preconditioner factorization failed");

  MaSolveResult res;
  std::vector<double> psi(static_cast<std::size_t>(n), 0.0);
  res.residual_history.push_back(evaluate(D, monitor, psi, w).residual);
  auto std_of = [&](const std::vector<double>& p) {
    return equidist_metrics(transform_from_psi(PsiGrid{ScalarField2D(g, p)}), monitor).std;
  };
  if (cfg.log_every > 0) res.std_history.push_back(std_of(psi));

  int used = 0;
  auto on_final_step = [&](const std::vector<double>& p, double r) {
    ++used;
    res.residual_history.push_back(r);
    if (cfg.log_every > 0 && used % cfg.log_every == 0) res.std_history.push_back(std_of(p));
  };
  auto on_stage_step = [&](const std::vector<double>& p, double) {
    ++used;
    if (cfg.log_every > 0 && used % cfg.log_every == 0) res.std_history.push_back(std_of(p));
  };

  double log_max = 0.0;
  for (double r : monitor.rho.values()) log_max = std::max(log_max, std::abs(std::log(r)));
  // One stage per unit of log-contrast, so each stage's density ratio stays below e.
  const int stages = std::max(1, std::min(cfg.max_stages, static_cast<int>(std::ceil(log_max))));
  StageOutcome out{psi, evaluate(D, monitor, psi, w), 0};
  for (int st = 1; st <= stages; ++st) {
    bool last = st == stages;
    double s = static_cast<double>(st) / stages;
    MonitorField m = monitor;
    if (!last)
      for (double& r : m.rho.values()) r = std::pow(r, s);
    int budget = cfg.max_iters - used;
    if (budget <= 0 && !last) continue;
    out = solve_stage(m, out.psi, last ? cfg.tol : std::max(cfg.tol, 1e-3), std::max(budget, 0), cfg, w,
                      pre_solver, last ? std::function(on_final_step) : std::function(on_stage_step));
  }
  res.iterations = used;
  res.residual = out.ev.residual;
  res.converged = out.ev.residual <= cfg.tol;
  res.psi = PsiGrid{ScalarField2D(g, std::move(out.psi))};
  return res;
}

// ---------------------------------------------------------------------------
// Interpolation error vs resolution

struct ErrorRecord {
  std::size_t cells = 0;
  double err_uniform = 0.0;
  double err_adapted = 0.0;
  double bK = 0.0;
};

struct ErrorStudyReport {
  std::vector<ErrorRecord> records;
  double slope_uniform = std::numeric_limits<double>::quiet_NaN();
  double slope_adapted = std::numeric_limits<double>::quiet_NaN();
  bool slopes_defined = false;
};

using AnalyticFn = std::function<double(double, double)>;

/// L2 error of the isoparametric bilinear interpolant of u (sampled at the mesh
/// nodes) on every quad, integrated with 3x3 Gauss points on sub x sub
/// sub-cells of each quad.
inline double interpolation_l2_error(const MovedMesh& mesh, const AnalyticFn& u, int sub = 4) {
  const auto& g = mesh.base();
  static const double gp[3] = {-std::sqrt(0.6), 0.0, std::sqrt(0.6)};
  static const double gw[3] = {5.0 / 9, 8.0 / 9, 5.0 / 9};
  double err2 = 0.0;
  for (int j = 0; j + 1 < g.ny(); ++j)
    for (int i = 0; i + 1 < g.nx(); ++i) {
      Vec2 p00 = mesh.at(i, j), p10 = mesh.at(i + 1, j), p01 = mesh.at(i, j + 1), p11 = mesh.at(i + 1, j + 1);
      double u00 = u(p00.x, p00.y), u10 = u(p10.x, p10.y), u01 = u(p01.x, p01.y), u11 = u(p11.x, p11.y);
      for (int sj = 0; sj < sub; ++sj)
        for (int si = 0; si < sub; ++si)
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              double s = (si + 0.5 * (1 + gp[a])) / sub;
              double t = (sj + 0.5 * (1 + gp[b])) / sub;
              Vec2 x = (1 - s) * (1 - t) * p00 + s * (1 - t) * p10 + (1 - s) * t * p01 + s * t * p11;
              Vec2 xs = (1 - t) * (p10 - p00) + t * (p11 - p01);
              Vec2 xt = (1 - s) * (p01 - p00) + s * (p11 - p10);
              double jac = std::abs(xs.x * xt.y - xs.y * xt.x);
              double ui = (1 - s) * (1 - t) * u00 + s * (1 - t) * u10 + (1 - s) * t * u01 + s * t * u11;
              double e = ui - u(x.x, x.y);
              err2 += gw[a] * gw[b] / (4.0 * sub * sub) * jac * e * e;
            }
    }
  return std::sqrt(err2);
}

/// B(K) with the 2-D exponents for l=1, m=0, p=q=2 (both equal to one):
/// sum_K |K| <u>_{W^{1,2}(K)}, the semi-norm from the corner gradients.
inline double b_functional(const MovedMesh& mesh, const AnalyticFn& u) {
  const auto& g = mesh.base();
  auto vol = cell_volumes(mesh);
  const double e = 1e-6;
  auto grad2 = [&](Vec2 p) {
    double gx = (u(p.x + e, p.y) - u(p.x - e, p.y)) / (2 * e);
    double gy = (u(p.x, p.y + e) - u(p.x, p.y - e)) / (2 * e);
    return gx * gx + gy * gy;
  };
  double s = 0.0;
  std::size_t c = 0;
  for (int j = 0; j + 1 < g.ny(); ++j)
    for (int i = 0; i + 1 < g.nx(); ++i, ++c) {
      double m = (grad2(mesh.at(i, j)) + grad2(mesh.at(i + 1, j)) + grad2(mesh.at(i, j + 1)) +
                  grad2(mesh.at(i + 1, j + 1))) / 4;
      s += vol.area[c] * std::sqrt(m);
    }
  return s;
}

inline double loglog_slope(const std::vector<double>& n, const std::vector<double>& e) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    mx += std::log(n[i]);
    my += std::log(e[i]);
  }
  mx /= static_cast<double>(n.size());
  my /= static_cast<double>(n.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    double dx = std::log(n[i]) - mx;
    sxy += dx * (std::log(e[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// For each resolution (cells per axis) compare interpolation errors on the
/// uniform mesh and on the MA-adapted mesh built from the sampled state.
inline ErrorStudyReport error_scaling_study(const AnalyticFn& u, const std::vector<int>& cells_per_axis,
                                            double alpha_c = kDefaultAlphaC, MaSolveConfig cfg = {}) {
  require(cells_per_axis.size() >= 3, "error_scaling_study: need at least three resolutions");
  ErrorStudyReport rep;
  for (std::size_t r = 0; r < cells_per_axis.size(); ++r) {
    int m = cells_per_axis[r];
    require(m >= 2, "error_scaling_study: need at least two cells per axis");
    if (r > 0) require(m > cells_per_axis[r - 1], "error_scaling_study: resolutions must increase");
    StructuredGrid g(m + 1, m + 1);
    auto state = ScalarField2D::from_function(g, u);
    auto mon = monitor_from_state(state, alpha_c, Boundary::one_sided);
    auto sol = solve_ma_2d(mon, cfg);
    auto adapted = transform_from_psi(sol.psi);
    auto uniform = MovedMesh::identity(g);
    rep.records.push_back({g.num_cells(), interpolation_l2_error(uniform, u), interpolation_l2_error(adapted, u),
                           b_functional(adapted, u)});
  }
  std::vector<double> ns, eu, ea;
  bool ok = true;
  for (const auto& rec : rep.records) {
    ns.push_back(static_cast<double>(rec.cells));
    eu.push_back(rec.err_uniform);
    ea.push_back(rec.err_adapted);
    if (!(rec.err_uniform > 1e-13 && rec.err_adapted > 1e-13)) ok = false;
  }
  rep.slopes_defined = ok;
  if (ok) {
    rep.slope_uniform = loglog_slope(ns, eu);
    rep.slope_adapted = loglog_slope(ns, ea);
  }
  return rep;
}

}  // namespace mamover
