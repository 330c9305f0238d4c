#pragma once

// Periodic 2-D scalar viscous Burgers data,
//   u_t + (u^2/2)_x + (u^2/2)_y = nu Lap u  on [0,1]^2,
// integrated on a fine lattice and stored at unit time intervals after strided
// downsampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <fftw3.h>
#include <json.hpp>

#include "mamover/common.hpp"
#include "mamover/geom.hpp"
#include "mamover/mmf.hpp"

namespace mamover {

enum class IcVariant { verbatim, two_bump };

inline IcVariant parse_ic_variant(const std::string& s) {
  if (s == "verbatim") return IcVariant::verbatim;
  if (s == "two_bump") return IcVariant::two_bump;
  throw Error("unknown initial-condition variant: " + s);
}

inline std::string to_string(IcVariant v) { return v == IcVariant::verbatim ? "verbatim" : "two_bump"; }

struct BurgersConfig {
  double nu = 0.1;
  int solve_res = 96;   // fine-grid intervals per axis
  int target_res = 24;  // stored intervals per axis
  int steps = 30;       // stored steps after the initial frame
  double dt = 1.0;      // time between stored frames
  int trajectories = 20;
  std::uint64_t seed = 0;
  IcVariant ic = IcVariant::verbatim;
  double split_step = 0.01;  // largest diffusion/advection splitting step
  int threads = 1;

  void validate() const {
    require(nu >= 0, "BurgersConfig: nu must be non-negative");
    require(solve_res >= 4 && target_res >= 2, "BurgersConfig: resolution too small");
    require(solve_res % target_res == 0, "BurgersConfig: solve resolution must be divisible by the target");
    require(steps >= 0, "BurgersConfig: steps must be non-negative");
    require(dt > 0, "BurgersConfig: dt must be positive");
    require(trajectories >= 1, "BurgersConfig: need at least one trajectory");
    require(split_step > 0 && split_step <= dt, "BurgersConfig: split_step must lie in (0, dt]");
    require(threads >= 1, "BurgersConfig: threads must be positive");
  }
};

struct IcParams {
  double alpha = 0.0;
  double beta = 0.0;
};

namespace burgers_detail {

// Signed distance to the nearest periodic image.
inline double wrap(double d) { return d - std::round(d); }

}  // namespace burgers_detail

/// Initial state on the (res+1)^2 node lattice. Offsets are measured to the
/// nearest periodic image so the state is smooth across the periodic seam.
inline ScalarField2D burgers_initial(int res, IcParams p, IcVariant v) {
  using burgers_detail::wrap;
  StructuredGrid g(res + 1, res + 1);
  return ScalarField2D::from_function(g, [&](double x, double y) {
    double c = 1.0 - p.beta;
    double a = wrap(x - p.alpha), bx = wrap(x - c), by = wrap(y - c);
    if (v == IcVariant::verbatim) return std::exp(-100 * a * a - 100 * (bx * bx + by * by));
    double ay = wrap(y - p.alpha);
    return std::exp(-100 * (a * a + ay * ay)) + std::exp(-100 * (bx * bx + by * by));
  });
}

namespace burgers_detail {

inline double minmod(double a, double b) {
  if (a * b <= 0) return 0.0;
  return std::abs(a) < std::abs(b) ? a : b;
}

// Rusanov flux for f(u) = u^2 / 2.
inline double rusanov(double l, double r) {
  double s = std::max(std::abs(l), std::abs(r));
  return 0.25 * (l * l + r * r) - 0.5 * s * (r - l);
}

// FFTW's planner keeps global state.
inline std::mutex& fftw_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace burgers_detail

/// Periodic state on an n x n torus (no duplicated seam), row-major, i fastest.
///
/// Strang splitting: the 5-point diffusion operator is applied exactly in
/// Fourier space (its symbol is diagonal there); advection uses MUSCL-minmod
/// reconstruction with Rusanov fluxes and SSP-RK3 sub-steps at half the
/// two-dimensional Courant limit, which keeps the scheme extremum-diminishing.
class BurgersIntegrator {
 public:
  BurgersIntegrator(int n, double nu, double max_split_step = 0.01)
      : n_(n), nu_(nu), h_(1.0 / n), max_split_(max_split_step) {
    require(n >= 4, "BurgersIntegrator: need at least 4 intervals");
    require(max_split_step > 0, "BurgersIntegrator: split step must be positive");
    const int nc = n / 2 + 1;
    real_ = fftw_alloc_real(static_cast<std::size_t>(n) * n);
    spec_ = fftw_alloc_complex(static_cast<std::size_t>(n) * nc);
    {
      std::lock_guard lock(burgers_detail::fftw_mutex());
      fwd_ = fftw_plan_dft_r2c_2d(n, n, real_, spec_, FFTW_ESTIMATE);
      bwd_ = fftw_plan_dft_c2r_2d(n, n, spec_, real_, FFTW_ESTIMATE);
    }
    symbol_.resize(static_cast<std::size_t>(n) * nc);
    const double pi = std::acos(-1.0);
    for (int ky = 0; ky < n; ++ky)
      for (int kx = 0; kx < nc; ++kx) {
        double sx = std::sin(pi * kx / n), sy = std::sin(pi * ky / n);
        symbol_[static_cast<std::size_t>(ky) * nc + kx] = -4.0 / (h_ * h_) * (sx * sx + sy * sy);
      }
  }
  BurgersIntegrator(const BurgersIntegrator&) = delete;
  BurgersIntegrator& operator=(const BurgersIntegrator&) = delete;
  ~BurgersIntegrator() {
    std::lock_guard lock(burgers_detail::fftw_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(bwd_);
    fftw_free(real_);
    fftw_free(spec_);
  }

  /// u <- exp(tau * nu * Lap_h) u.
  void diffuse(std::vector<double>& u, double tau) {
    if (nu_ == 0.0 || tau == 0.0) return;
    const std::size_t nn = u.size();
    std::copy(u.begin(), u.end(), real_);
    fftw_execute(fwd_);
    for (std::size_t k = 0; k < symbol_.size(); ++k) {
      double f = std::exp(tau * nu_ * symbol_[k]) / static_cast<double>(nn);
      spec_[k][0] *= f;
      spec_[k][1] *= f;
    }
    fftw_execute(bwd_);
    std::copy(real_, real_ + nn, u.begin());
  }

  /// Conservative advection tendency -div(u^2/2, u^2/2).
  void advection_rhs(const std::vector<double>& u, std::vector<double>& out) const {
    using namespace burgers_detail;
    const int n = n_;
    out.assign(u.size(), 0.0);
    auto at = [&](int i, int j) { return u[idx((i + n) % n, (j + n) % n)]; };
    // Face flux between cell c and its +axis neighbour p, with mm/pp the outer neighbours.
    auto face = [](double m, double c, double p, double pp) {
      double l = c + 0.5 * minmod(c - m, p - c);
      double r = p - 0.5 * minmod(p - c, pp - p);
      return rusanov(l, r);
    };
    const double ih = 1.0 / h_;
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        double c = at(i, j);
        double fx = face(at(i - 1, j), c, at(i + 1, j), at(i + 2, j));
        double fy = face(at(i, j - 1), c, at(i, j + 1), at(i, j + 2));
        // The flux through the +face of (i,j) leaves (i,j) and enters its neighbour.
        out[idx(i, j)] -= (fx + fy) * ih;
        out[idx((i + 1) % n, j)] += fx * ih;
        out[idx(i, (j + 1) % n)] += fy * ih;
      }
  }

  /// SSP-RK3 advection over `tau` with sub-steps at total Courant number 1/2.
  void advect(std::vector<double>& u, double tau) {
    double t = 0.0;
    std::vector<double> k, u1(u.size()), u2(u.size());
    while (t < tau) {
      double umax = 0.0;
      for (double v : u) umax = std::max(umax, std::abs(v));
      double limit = umax > 0 ? 0.25 * h_ / umax : tau;
      int m = static_cast<int>(std::ceil((tau - t) / limit - 1e-12));
      double dt = (tau - t) / std::max(m, 1);
      advection_rhs(u, k);
      for (std::size_t q = 0; q < u.size(); ++q) u1[q] = u[q] + dt * k[q];
      advection_rhs(u1, k);
      for (std::size_t q = 0; q < u.size(); ++q) u2[q] = 0.75 * u[q] + 0.25 * (u1[q] + dt * k[q]);
      advection_rhs(u2, k);
      for (std::size_t q = 0; q < u.size(); ++q) u[q] = u[q] / 3 + 2.0 / 3 * (u2[q] + dt * k[q]);
      t = m <= 1 ? tau : t + dt;
    }
  }

  /// Advance by `span` time units.
  void advance(std::vector<double>& u, double span) {
    auto [lo0, hi0] = std::minmax_element(u.begin(), u.end());
    const double lo = *lo0, hi = *hi0, slack = 1e-9 * std::max(1.0, hi - lo);
    int m = static_cast<int>(std::ceil(span / max_split_ - 1e-12));
    double step = span / m;
    diffuse(u, 0.5 * step);
    for (int s = 0; s < m; ++s) {
      advect(u, step);
      diffuse(u, s + 1 < m ? step : 0.5 * step);
    }
    // The exact solution obeys a maximum principle; growth means the
    // scheme went unstable.
    for (double v : u) {
      if (!std::isfinite(v)) throw Error("gen_burgers: instability (non-finite state)");
      if (v > hi + slack || v < lo - slack) throw Error("gen_burgers: instability (CFL violation detected)");
    }
  }

  std::size_t idx(int i, int j) const { return static_cast<std::size_t>(j) * n_ + i; }
  int n() const { return n_; }

 private:
  int n_;
  double nu_;
  double h_;
  double max_split_;
  double* real_ = nullptr;
  fftw_complex* spec_ = nullptr;
  fftw_plan fwd_{};
  fftw_plan bwd_{};
  std::vector<double> symbol_;
};

/// Strided node subsampling; (nodes - 1) must be divisible by factor on both axes.
inline ScalarField2D downsample(const ScalarField2D& f, int factor) {
  require(factor >= 1, "downsample: factor must be positive");
  const auto& g = f.grid();
  require((g.nx() - 1) % factor == 0 && (g.ny() - 1) % factor == 0, "downsample: grid not node-aligned with factor");
  StructuredGrid out((g.nx() - 1) / factor + 1, (g.ny() - 1) / factor + 1, g.domain());
  ScalarField2D r(out);
  for (int j = 0; j < out.ny(); ++j)
    for (int i = 0; i < out.nx(); ++i) r.at(i, j) = f.at(i * factor, j * factor);
  return r;
}

/// Frames at t = 0, dt, ..., steps*dt on the fine (res+1)^2 lattice.
inline std::vector<ScalarField2D> burgers_trajectory(const ScalarField2D& u0, double nu, int steps, double dt,
                                                     double split_step = 0.01) {
  const auto& g = u0.grid();
  require(g.nx() == g.ny(), "burgers_trajectory: square lattice required");
  const int n = g.nx() - 1;
  BurgersIntegrator integ(n, nu, split_step);
  std::vector<double> u(static_cast<std::size_t>(n) * n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) u[integ.idx(i, j)] = u0.at(i, j);
  auto frame = [&] {
    ScalarField2D f(g);
    for (int j = 0; j <= n; ++j)
      for (int i = 0; i <= n; ++i) f.at(i, j) = u[integ.idx(i % n, j % n)];
    return f;
  };
  std::vector<ScalarField2D> out{frame()};
  for (int s = 0; s < steps; ++s) {
    integ.advance(u, dt);
    out.push_back(frame());
  }
  return out;
}

/// Discrete energy sum u^2 h^2 over the distinct periodic nodes.
inline double periodic_energy(const ScalarField2D& f) {
  const auto& g = f.grid();
  double s = 0.0;
  for (int j = 0; j + 1 < g.ny(); ++j)
    for (int i = 0; i + 1 < g.nx(); ++i) s += f.at(i, j) * f.at(i, j);
  return s * g.hx() * g.hy();
}

struct Dataset {
  BurgersConfig config;
  std::vector<IcParams> ics;
  std::vector<std::vector<ScalarField2D>> trajectories;
  std::vector<std::string> split;  // "train" | "valid" | "test" per trajectory

  const StructuredGrid& grid() const { return trajectories.at(0).at(0).grid(); }

  std::vector<std::size_t> indices(const std::string& tag) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == tag) out.push_back(i);
    return out;
  }
};

/// 80/10/10 by trajectory order; at least one test trajectory once there are two.
inline std::vector<std::string> split_tags(std::size_t n) {
  std::size_t n_test = n >= 2 ? std::max<std::size_t>(1, (n + 5) / 10) : 0;
  std::size_t n_valid = n >= 10 ? (n + 5) / 10 : 0;
  std::vector<std::string> out(n, "train");
  for (std::size_t i = n - n_test - n_valid; i < n - n_test; ++i) out[i] = "valid";
  for (std::size_t i = n - n_test; i < n; ++i) out[i] = "test";
  return out;
}

inline Dataset gen_burgers(const BurgersConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int t = 0; t < cfg.trajectories; ++t) {
    double a = U(rng);
    double b = U(rng);
    ds.ics.push_back({a, b});
  }
  ds.trajectories.resize(static_cast<std::size_t>(cfg.trajectories));
  const int factor = cfg.solve_res / cfg.target_res;
  auto work = [&](std::size_t t) {
    auto fine = burgers_trajectory(burgers_initial(cfg.solve_res, ds.ics[t], cfg.ic), cfg.nu, cfg.steps, cfg.dt,
                                   cfg.split_step);
    std::vector<ScalarField2D> coarse;
    for (const auto& f : fine) coarse.push_back(downsample(f, factor));
    ds.trajectories[t] = std::move(coarse);
  };
  const auto n = static_cast<std::size_t>(cfg.trajectories);
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), n);
  if (workers <= 1) {
    for (std::size_t t = 0; t < n; ++t) work(t);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t t = w; t < n; t += workers) work(t);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  ds.split = split_tags(n);
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/manifest.json and <dir>/trajectories.mmf, one rank-4
// block (trajectory, frame, ny, nx).

inline nlohmann::json to_json(const BurgersConfig& c) {
  return {{"nu", c.nu},       {"solve_res", c.solve_res},     {"target_res", c.target_res},
          {"steps", c.steps}, {"dt", c.dt},                   {"trajectories", c.trajectories},
          {"seed", c.seed},   {"ic_variant", to_string(c.ic)}, {"split_step", c.split_step}};
}

inline BurgersConfig burgers_config_from_json(const nlohmann::json& j) {
  BurgersConfig c;
  c.nu = j.at("nu");
  c.solve_res = j.at("solve_res");
  c.target_res = j.at("target_res");
  c.steps = j.at("steps");
  c.dt = j.at("dt");
  c.trajectories = j.at("trajectories");
  c.seed = j.at("seed");
  c.ic = parse_ic_variant(j.at("ic_variant"));
  c.split_step = j.at("split_step");
  return c;
}

inline void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto& g = ds.grid();
  std::vector<double> all;
  for (const auto& tr : ds.trajectories)
    for (const auto& f : tr) {
      require(f.grid() == g && tr.size() == ds.trajectories[0].size(), "save_dataset: ragged dataset");
      all.insert(all.end(), f.values().begin(), f.values().end());
    }
  std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(ds.trajectories.size()),
                                  static_cast<std::uint32_t>(ds.trajectories[0].size()),
                                  static_cast<std::uint32_t>(g.ny()), static_cast<std::uint32_t>(g.nx())};
  mmf::save_block((fs::path(dir) / "trajectories.mmf").string(), dims, all);
  nlohmann::json m;
  m["config"] = to_json(ds.config);
  m["split"] = ds.split;
  nlohmann::json ics = nlohmann::json::array();
  for (const auto& p : ds.ics) ics.push_back({p.alpha, p.beta});
  m["ics"] = ics;
  m["data"] = "trajectories.mmf";
  std::ofstream os(fs::path(dir) / "manifest.json");
  os << m.dump(2) << "\n";
  if (!os) throw Error("save_dataset: cannot write manifest in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw Error("load_dataset: no manifest.json in " + dir);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("load_dataset: bad manifest: ") + e.what());
  }
  Dataset ds;
  ds.config = burgers_config_from_json(m.at("config"));
  ds.split = m.at("split").get<std::vector<std::string>>();
  for (const auto& p : m.at("ics")) ds.ics.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  auto b = mmf::load_block((fs::path(dir) / m.at("data").get<std::string>()).string());
  require(b.dims.size() == 4, "load_dataset: trajectory block must be rank 4");
  StructuredGrid g(static_cast<int>(b.dims[3]), static_cast<int>(b.dims[2]));
  std::size_t frame = g.num_nodes(), off = 0;
  ds.trajectories.resize(b.dims[0]);
  for (auto& tr : ds.trajectories)
    for (std::uint32_t f = 0; f < b.dims[1]; ++f, off += frame)
      tr.emplace_back(g, std::vector<double>(b.data.begin() + static_cast<std::ptrdiff_t>(off),
                                             b.data.begin() + static_cast<std::ptrdiff_t>(off + frame)));
  require(ds.split.size() == ds.trajectories.size(), "load_dataset: split tags do not match trajectory count");
  return ds;
}

}  // namespace mamover
