#pragma once

// Mesh density from a discrete state, rho = 1 + |grad u| / alpha, and the
// equidistribution quality of a mesh under it.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mamover/common.hpp"
#include "mamover/geom.hpp"

namespace mamover {

enum class Boundary { periodic, one_sided };

inline Boundary parse_boundary(const std::string& s) {
  if (s == "periodic") return Boundary::periodic;
  if (s == "one_sided") return Boundary::one_sided;
  throw Error("unknown boundary mode: " + s);
}

struct GradientField {
  StructuredGrid grid;
  std::vector<double> gx;
  std::vector<double> gy;

  double norm(std::size_t k) const { return std::hypot(gx[k], gy[k]); }
};

namespace detail {

// Derivative along one lattice line. `at(i)` reads the i-th value of the line.
template <class At>
double line_derivative(At&& at, int i, int n, double h, Boundary b) {
  if (b == Boundary::periodic) {
    // Endpoints duplicate each other: n-1 distinct nodes per period.
    int p = n - 1;
    int im = ((i - 1) % p + p) % p;
    int ip = (i + 1) % p;
    return (at(ip) - at(im)) / (2 * h);
  }
  if (i == 0) return (-3 * at(0) + 4 * at(1) - at(2)) / (2 * h);
  if (i == n - 1) return (3 * at(n - 1) - 4 * at(n - 2) + at(n - 3)) / (2 * h);
  return (at(i + 1) - at(i - 1)) / (2 * h);
}

}  // namespace detail

/// Central differences inside, periodic wrap or second-order one-sided stencils
/// at the edges.
inline GradientField grad_fd(const ScalarField2D& u, Boundary b) {
  const auto& g = u.grid();
  GradientField out{g, std::vector<double>(g.num_nodes()), std::vector<double>(g.num_nodes())};
  for (int j = 0; j < g.ny(); ++j)
    for (int i = 0; i < g.nx(); ++i) {
      std::size_t k = g.index(i, j);
      out.gx[k] = detail::line_derivative([&](int ii) { return u.at(ii, j); }, i, g.nx(), g.hx(), b);
      out.gy[k] = detail::line_derivative([&](int jj) { return u.at(i, jj); }, j, g.ny(), g.hy(), b);
    }
  return out;
}

/// Trapezoid-rule integral of nodal values over the grid's rectangle.
inline double trapezoid(const ScalarField2D& f) {
  const auto& g = f.grid();
  double s = 0.0;
  for (int j = 0; j < g.ny(); ++j) {
    double wy = (j == 0 || j == g.ny() - 1) ? 0.5 : 1.0;
    for (int i = 0; i < g.nx(); ++i) {
      double wx = (i == 0 || i == g.nx() - 1) ? 0.5 : 1.0;
      s += wx * wy * f.at(i, j);
    }
  }
  return s * g.hx() * g.hy();
}

inline constexpr double kAlphaFloor = 1e-8;
inline constexpr double kDefaultAlphaC = 100.0;

/// Scaled W^{1,2} semi-norm per cell: sqrt of the mean squared gradient norm
/// over the cell's four corners.
inline std::vector<double> cell_gradient_seminorm(const GradientField& grad) {
  const auto& g = grad.grid;
  std::vector<double> out;
  out.reserve(g.num_cells());
  for (int j = 0; j + 1 < g.ny(); ++j)
    for (int i = 0; i + 1 < g.nx(); ++i) {
      double s = 0.0;
      for (auto [di, dj] : {std::pair{0, 0}, {1, 0}, {0, 1}, {1, 1}}) {
        double n = grad.norm(g.index(i + di, j + dj));
        s += n * n;
      }
      out.push_back(std::sqrt(s / 4));
    }
  return out;
}

/// alpha = (1 / (C |Omega|)) * sum_K |K| <u>_{W^{1,2}(K)}, floored at
/// kAlphaFloor so that constant (or round-off-level) states give rho ~ 1.
inline double alpha_scale(const ScalarField2D& u, double c = kDefaultAlphaC, Boundary b = Boundary::one_sided) {
  require(c > 0, "alpha_scale: C must be positive");
  const auto& g = u.grid();
  auto semi = cell_gradient_seminorm(grad_fd(u, b));
  double cell = g.hx() * g.hy();
  double s = 0.0;
  for (double v : semi) s += cell * v;
  double alpha = s / (c * g.domain().area());
  return (alpha > kAlphaFloor && std::isfinite(alpha)) ? alpha : kAlphaFloor;
}

struct MonitorField {
  ScalarField2D rho;
  double alpha = 1.0;
  double sigma = 1.0;
};

inline MonitorField density(const ScalarField2D& u, double alpha, Boundary b = Boundary::one_sided) {
  require(alpha > 0, "density: alpha must be positive");
  auto grad = grad_fd(u, b);
  ScalarField2D rho(u.grid());
  for (std::size_t k = 0; k < rho.size(); ++k) rho[k] = 1.0 + grad.norm(k) / alpha;
  double sigma = trapezoid(rho);
  return {std::move(rho), alpha, sigma};
}

/// density() with alpha chosen by alpha_scale().
inline MonitorField monitor_from_state(const ScalarField2D& u, double c = kDefaultAlphaC,
                                       Boundary b = Boundary::one_sided) {
  return density(u, alpha_scale(u, c, b), b);
}

/// Monitor from an explicit density field (sigma by trapezoid rule).
inline MonitorField monitor_from_rho(ScalarField2D rho) {
  for (double v : rho.values()) require(v > 0, "monitor_from_rho: density must be positive");
  double sigma = trapezoid(rho);
  return {std::move(rho), 1.0, sigma};
}

struct EquidistMetrics {
  double std = 0.0;
  double range = 0.0;
};

/// Normalized rho-weighted cell volumes w_K = N v_K / sum v, with
/// v_K = |K| rho(centroid). A perfectly equidistributed mesh has w == 1.
inline std::vector<double> weighted_volumes(const MovedMesh& mesh, const MonitorField& monitor) {
  const auto& g = mesh.base();
  auto vol = cell_volumes(mesh);
  std::vector<double> w;
  w.reserve(g.num_cells());
  double total = 0.0;
  std::size_t c = 0;
  for (int j = 0; j + 1 < g.ny(); ++j)
    for (int i = 0; i + 1 < g.nx(); ++i, ++c) {
      double v = vol.area[c] * bilinear_sample(monitor.rho, cell_centroid(mesh, i, j));
      w.push_back(v);
      total += v;
    }
  double n = static_cast<double>(w.size());
  for (double& v : w) v = n * v / total;
  return w;
}

inline EquidistMetrics equidist_metrics(const MovedMesh& mesh, const MonitorField& monitor) {
  auto w = weighted_volumes(mesh, monitor);
  double n = static_cast<double>(w.size());
  // Shifted by w[0] so equal weights give exactly zero.
  double mean = 0.0;
  for (double v : w) mean += v - w[0];
  mean /= n;
  double var = 0.0;
  for (double v : w) var += (v - w[0] - mean) * (v - w[0] - mean);
  auto [lo, hi] = std::minmax_element(w.begin(), w.end());
  return {std::sqrt(var / n), *hi - *lo};
}

}  // namespace mamover
