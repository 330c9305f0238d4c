#pragma once

// Data-free mesh mover: psi(u, t, x) from a grid-state encoder, a coordinate
// encoder and a decoder, trained only on the Monge-Ampere physics loss
//   l = l_eq + beta l_bound + gamma l_convex.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mamover/checkpoint.hpp"
#include "mamover/common.hpp"
#include "mamover/geom.hpp"
#include "mamover/monitor.hpp"
#include "mamover/nnet.hpp"

namespace mamover {

using nn::DenseNet;
using nn::Jet;
using nn::JetTape;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Grid-state encoder

/// Strided convolution with tanh, zero padding. Weights are (cout, cin*k*k),
/// column index (c*k + dy)*k + dx.
struct ConvLayer {
  int cin = 1, cout = 1, k = 5, stride = 2, pad = 2;
  MatrixXd W;
  VectorXd b;

  int out_size(int n) const { return (n + 2 * pad - k) / stride + 1; }

  // Patch matrix (cin*k*k, ho*wo) of a (cin, h*w) input.
  MatrixXd im2col(const MatrixXd& x, int h, int w) const {
    int ho = out_size(h), wo = out_size(w);
    MatrixXd cols = MatrixXd::Zero(cin * k * k, ho * wo);
    for (int c = 0; c < cin; ++c)
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
          int row = (c * k + dy) * k + dx;
          for (int oy = 0; oy < ho; ++oy) {
            int iy = oy * stride + dy - pad;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              int ix = ox * stride + dx - pad;
              if (ix >= 0 && ix < w) cols(row, oy * wo + ox) = x(c, iy * w + ix);
            }
          }
        }
    return cols;
  }

  MatrixXd col2im(const MatrixXd& cols, int h, int w) const {
    int ho = out_size(h), wo = out_size(w);
    MatrixXd x = MatrixXd::Zero(cin, h * w);
    for (int c = 0; c < cin; ++c)
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
          int row = (c * k + dy) * k + dx;
          for (int oy = 0; oy < ho; ++oy) {
            int iy = oy * stride + dy - pad;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              int ix = ox * stride + dx - pad;
              if (ix >= 0 && ix < w) x(c, iy * w + ix) += cols(row, oy * wo + ox);
            }
          }
        }
    return x;
  }
};

class GridEncoder {
 public:
  GridEncoder() = default;
  GridEncoder(int nx, int ny, const std::vector<int>& channels, int code_dim, std::mt19937_64& rng)
      : nx_(nx), ny_(ny) {
    require(channels.size() >= 2 && channels.front() == 1, "GridEncoder: channels must start at 1");
    int h = ny, w = nx;
    for (std::size_t l = 0; l + 1 < channels.size(); ++l) {
      ConvLayer c;
      c.cin = channels[l];
      c.cout = channels[l + 1];
      int fan_in = c.cin * c.k * c.k, fan_out = c.cout * c.k * c.k;
      double a = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> U(-a, a);
      c.W = MatrixXd::Zero(c.cout, fan_in);
      for (Eigen::Index q = 0; q < c.W.size(); ++q) c.W.data()[q] = U(rng);
      c.b = VectorXd::Zero(c.cout);
      h = c.out_size(h);
      w = c.out_size(w);
      require(h >= 1 && w >= 1, "GridEncoder: input too small for the convolution stack");
      convs.push_back(std::move(c));
    }
    head = DenseNet({channels.back() * h * w, code_dim}, rng);
  }

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  int code_dim() const { return head.out_dim(); }

  template <class F>
  void for_each_param(F&& f) {
    for (auto& c : convs) {
      f(c.W);
      f(c.b);
    }
    head.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    for (const auto& c : convs) {
      f(c.W);
      f(c.b);
    }
    head.for_each_param(f);
  }

  struct Tape {
    std::vector<MatrixXd> cols;  // im2col of each conv input
    std::vector<MatrixXd> out;   // tanh output of each conv
    std::vector<std::pair<int, int>> shape;  // (h, w) of each conv input
    VectorXd flat;
  };

  /// Normalized state values, (1, ny*nx).
  VectorXd encode(const MatrixXd& input, Tape* tape = nullptr) const {
    require(input.rows() == 1 && input.cols() == static_cast<Eigen::Index>(nx_) * ny_,
            "GridEncoder: input does not match the encoder grid");
    MatrixXd x = input;
    int h = ny_, w = nx_;
    for (const auto& c : convs) {
      MatrixXd cols = c.im2col(x, h, w);
      MatrixXd a = c.W * cols;
      a.colwise() += c.b;
      MatrixXd y = nn::fast_tanh(a.array()).matrix();
      if (tape) {
        tape->shape.emplace_back(h, w);
        tape->cols.push_back(std::move(cols));
        tape->out.push_back(y);
      }
      h = c.out_size(h);
      w = c.out_size(w);
      x = std::move(y);
    }
    // Flatten channel-major.
    VectorXd flat(x.size());
    for (Eigen::Index c = 0; c < x.rows(); ++c) flat.segment(c * x.cols(), x.cols()) = x.row(c).transpose();
    if (tape) tape->flat = flat;
    return head.forward(flat);
  }

  /// Accumulate parameter gradients of code_bar . code into grad.
  void backward(const Tape& tape, const VectorXd& code_bar, GridEncoder& grad) const {
    MatrixXd fbar = nn::backprop_batch(head, tape.flat, code_bar, grad.head);
    const auto& last = tape.out.back();
    MatrixXd ybar(last.rows(), last.cols());
    for (Eigen::Index c = 0; c < last.rows(); ++c)
      ybar.row(c) = fbar.col(0).segment(c * last.cols(), last.cols()).transpose();
    for (std::size_t l = convs.size(); l-- > 0;) {
      const auto& c = convs[l];
      MatrixXd abar = (ybar.array() * (1.0 - tape.out[l].array().square())).matrix();
      grad.convs[l].W.noalias() += abar * tape.cols[l].transpose();
      grad.convs[l].b += abar.rowwise().sum();
      if (l == 0) break;
      auto [h, w] = tape.shape[l];
      ybar = c.col2im(c.W.transpose() * abar, h, w);
    }
  }

  std::vector<ConvLayer> convs;
  DenseNet head;

 private:
  int nx_ = 0, ny_ = 0;
};

// ---------------------------------------------------------------------------
// Model

struct DmmArch {
  int grid_nx = 25, grid_ny = 25;  // encoder1 input resolution
  std::vector<int> channels{1, 4, 8};
  int code_dim = 32;
  std::vector<int> coord_hidden{32};
  int coord_dim = 32;
  std::vector<int> decoder_hidden{48, 48};
  double coord_scale = 4.0;  // x enters encoder2 as coord_scale * (2x - 1)
};

inline nlohmann::json to_json(const DmmArch& a) {
  return {{"grid_nx", a.grid_nx},         {"grid_ny", a.grid_ny},   {"channels", a.channels},
          {"code_dim", a.code_dim},       {"coord_hidden", a.coord_hidden}, {"coord_dim", a.coord_dim},
          {"decoder_hidden", a.decoder_hidden}, {"coord_scale", a.coord_scale}};
}

inline DmmArch dmm_arch_from_json(const nlohmann::json& j) {
  DmmArch a;
  a.grid_nx = j.at("grid_nx");
  a.grid_ny = j.at("grid_ny");
  a.channels = j.at("channels").get<std::vector<int>>();
  a.code_dim = j.at("code_dim");
  a.coord_hidden = j.at("coord_hidden").get<std::vector<int>>();
  a.coord_dim = j.at("coord_dim");
  a.decoder_hidden = j.at("decoder_hidden").get<std::vector<int>>();
  a.coord_scale = j.at("coord_scale");
  return a;
}

class DmmModel {
 public:
  DmmModel() = default;

  /// The decoder's output layer starts at zero, so psi == 0 (identity mesh).
  DmmModel(const DmmArch& arch, std::uint64_t seed) : arch_(arch) {
    std::mt19937_64 rng(seed);
    encoder1 = GridEncoder(arch.grid_nx, arch.grid_ny, arch.channels, arch.code_dim, rng);
    std::vector<int> w2{3};
    w2.insert(w2.end(), arch.coord_hidden.begin(), arch.coord_hidden.end());
    w2.push_back(arch.coord_dim);
    encoder2 = DenseNet(w2, rng);
    std::vector<int> wd{arch.coord_dim + arch.code_dim};
    wd.insert(wd.end(), arch.decoder_hidden.begin(), arch.decoder_hidden.end());
    wd.push_back(1);
    decoder = DenseNet(wd, rng, /*zero_last=*/true);
  }

  const DmmArch& arch() const { return arch_; }
  StructuredGrid encoder_grid() const { return StructuredGrid(arch_.grid_nx, arch_.grid_ny); }
  std::size_t designated_layer() const { return decoder.layers.size() - 1; }

  template <class F>
  void for_each_param(F&& f) {
    encoder1.for_each_param(f);
    encoder2.for_each_param(f);
    decoder.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    encoder1.for_each_param(f);
    encoder2.for_each_param(f);
    decoder.for_each_param(f);
  }

  DmmModel zeros_like() const {
    DmmModel z = *this;
    nn::set_zero(z);
    return z;
  }

  GridEncoder encoder1;
  DenseNet encoder2;
  DenseNet decoder;

 private:
  DmmArch arch_;
};

/// Encoder input: the state on the encoder grid, shifted to zero mean and
/// scaled by its largest deviation (floored so round-off is not amplified).
inline MatrixXd dmm_encoder_input(const DmmModel& m, const ScalarField2D& state) {
  auto eg = m.encoder_grid();
  require(state.grid().nx() == eg.nx() && state.grid().ny() == eg.ny(),
          "dmm: state resolution differs from the encoder grid (use resolution_transfer)");
  double mean = 0.0;
  for (double v : state.values()) mean += v;
  mean /= static_cast<double>(state.size());
  double scale = 0.0;
  for (double v : state.values()) scale = std::max(scale, std::abs(v - mean));
  scale = std::max(scale, 1e-7);
  MatrixXd x(1, static_cast<Eigen::Index>(state.size()));
  for (std::size_t k = 0; k < state.size(); ++k) x(0, static_cast<Eigen::Index>(k)) = (state[k] - mean) / scale;
  return x;
}

/// psi and its coordinate derivatives at a batch of points.
struct PsiJet {
  VectorXd psi, px, py, pxx, pxy, pyy;
};

namespace dmm_detail {

// Everything needed to back-propagate one state's batch.
struct Forward {
  VectorXd code;
  GridEncoder::Tape enc1;
  JetTape enc2, dec;
  Jet out;
};

inline Jet decoder_input(const Jet& e2, const VectorXd& code) {
  const Eigen::Index n = e2.v.cols(), d2 = e2.v.rows(), dc = code.size();
  Jet in;
  in.v.resize(d2 + dc, n);
  in.v.topRows(d2) = e2.v;
  in.v.bottomRows(dc) = code.replicate(1, n);
  for (const auto& m : e2.d) {
    MatrixXd z = MatrixXd::Zero(d2 + dc, n);
    z.topRows(d2) = m;
    in.d.push_back(std::move(z));
  }
  for (const auto& m : e2.dd) {
    MatrixXd z = MatrixXd::Zero(d2 + dc, n);
    z.topRows(d2) = m;
    in.dd.push_back(std::move(z));
  }
  return in;
}

// Rows (t, x, y) mapped to [-1, 1] (coordinates further scaled), with the
// derivative seeds carrying the chain-rule factor so jets stay in d/dx.
inline Jet coord_jet(const DmmArch& a, double t, std::span<const Vec2> pts, int order) {
  const double s = a.coord_scale;
  MatrixXd X(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i)
    X.col(static_cast<Eigen::Index>(i)) << 2 * t - 1, s * (2 * pts[i].x - 1), s * (2 * pts[i].y - 1);
  const int slots[2] = {1, 2};
  Jet j = nn::seed_jet(X, slots, order);
  for (auto& d : j.d) d *= 2 * s;
  return j;
}

inline Forward forward(const DmmModel& m, const MatrixXd& enc_in, double t, std::span<const Vec2> pts, int order,
                       bool record) {
  Forward f;
  f.code = m.encoder1.encode(enc_in, record ? &f.enc1 : nullptr);
  Jet e2 = nn::jet_forward(m.encoder2, coord_jet(m.arch(), t, pts, order), record ? &f.enc2 : nullptr);
  f.out = nn::jet_forward(m.decoder, decoder_input(e2, f.code), record ? &f.dec : nullptr);
  return f;
}

inline PsiJet to_psi(const Jet& out) {
  PsiJet p;
  p.psi = out.v.row(0).transpose();
  if (!out.d.empty()) {
    p.px = out.d[0].row(0).transpose();
    p.py = out.d[1].row(0).transpose();
  }
  if (!out.dd.empty()) {
    p.pxx = out.dd[0].row(0).transpose();
    p.pxy = out.dd[1].row(0).transpose();
    p.pyy = out.dd[2].row(0).transpose();
  }
  return p;
}

// Gradients of sum(adj . out) into grad, through all three networks.
inline void backward(const DmmModel& m, const Forward& f, const Jet& adj, DmmModel& grad) {
  Jet in_bar = nn::jet_backward(m.decoder, f.dec, adj, grad.decoder);
  const Eigen::Index d2 = m.encoder2.out_dim();
  Jet e2_bar;
  e2_bar.v = in_bar.v.topRows(d2);
  for (const auto& x : in_bar.d) e2_bar.d.push_back(x.topRows(d2));
  for (const auto& x : in_bar.dd) e2_bar.dd.push_back(x.topRows(d2));
  nn::jet_backward(m.encoder2, f.enc2, e2_bar, grad.encoder2);
  // The code is constant in x, so only the value slot carries its adjoint.
  VectorXd code_bar = in_bar.v.bottomRows(in_bar.v.rows() - d2).rowwise().sum();
  m.encoder1.backward(f.enc1, code_bar, grad.encoder1);
}

}  // namespace dmm_detail

/// psi with first (order >= 1) and second (order 2) coordinate derivatives.
inline PsiJet dmm_psi(const DmmModel& m, const ScalarField2D& state, double t, std::span<const Vec2> pts,
                      int order = 2) {
  auto f = dmm_detail::forward(m, dmm_encoder_input(m, state), t, pts, order, false);
  return dmm_detail::to_psi(f.out);
}

/// Nodes moved to x + grad psi and clamped to the domain; boundary nodes keep
/// their normal coordinate so the mesh still covers the domain.
inline MovedMesh dmm_mesh(const DmmModel& m, const ScalarField2D& state, double t, const StructuredGrid& grid) {
  auto nodes = grid.nodes();
  auto p = dmm_psi(m, state, t, nodes, 1);
  const Rect& d = grid.domain();
  for (int j = 0; j < grid.ny(); ++j)
    for (int i = 0; i < grid.nx(); ++i) {
      auto k = grid.index(i, j);
      Vec2 q = d.clamp(nodes[k] + Vec2{p.px[static_cast<Eigen::Index>(k)], p.py[static_cast<Eigen::Index>(k)]});
      if (i == 0) q.x = d.x0;
      if (i == grid.nx() - 1) q.x = d.x1;
      if (j == 0) q.y = d.y0;
      if (j == grid.ny() - 1) q.y = d.y1;
      nodes[k] = q;
    }
  return {grid, std::move(nodes)};
}

/// Bilinear resampling of a state onto another lattice over the same domain.
inline ScalarField2D resample(const ScalarField2D& f, const StructuredGrid& target) {
  return ScalarField2D::from_function(target, [&](double x, double y) { return bilinear_sample(f, {x, y}); });
}

/// Mesh on any target lattice from a state at any resolution.
inline MovedMesh resolution_transfer(const DmmModel& m, const ScalarField2D& state, double t,
                                     const StructuredGrid& target) {
  auto eg = m.encoder_grid();
  const bool same = state.grid().nx() == eg.nx() && state.grid().ny() == eg.ny();
  return dmm_mesh(m, same ? state : resample(state, eg), t, target);
}

// ---------------------------------------------------------------------------
// Physics loss

struct CollocationPoints {
  std::vector<Vec2> interior;
  std::vector<Vec2> boundary;
};

/// Interior points: a cell drawn with probability proportional to |K| rho(centroid),
/// then a uniform point inside it. Boundary points are uniform on the perimeter.
inline CollocationPoints sample_collocation(const MonitorField& mon, std::size_t n_interior, std::size_t n_boundary,
                                            std::mt19937_64& rng) {
  const auto& g = mon.rho.grid();
  const Rect& d = g.domain();
  std::vector<double> cdf;
  cdf.reserve(g.num_cells());
  double acc = 0.0;
  for (int j = 0; j + 1 < g.ny(); ++j)
    for (int i = 0; i + 1 < g.nx(); ++i) {
      acc += 0.25 * (mon.rho.at(i, j) + mon.rho.at(i + 1, j) + mon.rho.at(i, j + 1) + mon.rho.at(i + 1, j + 1));
      cdf.push_back(acc);
    }
  std::uniform_real_distribution<double> U(0.0, 1.0);
  CollocationPoints out;
  out.interior.reserve(n_interior);
  for (std::size_t s = 0; s < n_interior; ++s) {
    double r = U(rng) * acc;
    auto c = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
    c = std::min(c, cdf.size() - 1);
    int i = static_cast<int>(c % static_cast<std::size_t>(g.nx() - 1));
    int j = static_cast<int>(c / static_cast<std::size_t>(g.nx() - 1));
    Vec2 p0 = g.node(i, j);
    double jx = U(rng), jy = U(rng);
    out.interior.push_back({p0.x + jx * g.hx(), p0.y + jy * g.hy()});
  }
  const double lx = d.x1 - d.x0, ly = d.y1 - d.y0, per = 2 * (lx + ly);
  out.boundary.reserve(n_boundary);
  for (std::size_t s = 0; s < n_boundary; ++s) {
    double r = U(rng) * per;
    if (r < lx) out.boundary.push_back({d.x0 + r, d.y0});
    else if ((r -= lx) < ly) out.boundary.push_back({d.x1, d.y0 + r});
    else if ((r -= ly) < lx) out.boundary.push_back({d.x1 - r, d.y1});
    else out.boundary.push_back({d.x0, d.y1 - (r - lx)});
  }
  return out;
}

inline CollocationPoints sample_collocation(const MonitorField& mon, std::size_t n_interior, std::size_t n_boundary,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_collocation(mon, n_interior, n_boundary, rng);
}

/// Boundary condition imposed through l_bound: `fixed` requires grad psi = 0
/// on the boundary, `sliding` only its normal component (nodes may move along
/// their edge).
enum class BoundaryMode { fixed, sliding };

inline BoundaryMode parse_boundary_mode(const std::string& s) {
  if (s == "fixed") return BoundaryMode::fixed;
  if (s == "sliding") return BoundaryMode::sliding;
  throw Error("unknown boundary mode: " + s + " (expected fixed or sliding)");
}
inline std::string to_string(BoundaryMode b) { return b == BoundaryMode::fixed ? "fixed" : "sliding"; }

struct LossWeights {
  double beta = 1000.0;
  double gamma = 1.0;
  // Divide the equation residual by sigma, making l_eq independent of the
  // monitor's overall scale (rho averages ~C, so raw residuals are O(C)).
  bool relative = true;
  BoundaryMode boundary = BoundaryMode::sliding;
};

struct LossParts {
  double l = 0, l_eq = 0, l_bound = 0, l_convex = 0;

  LossParts& operator+=(const LossParts& o) {
    l += o.l;
    l_eq += o.l_eq;
    l_bound += o.l_bound;
    l_convex += o.l_convex;
    return *this;
  }
  LossParts scaled(double s) const { return {l * s, l_eq * s, l_bound * s, l_convex * s}; }
};

/// Loss parts from psi derivatives at interior and boundary points, and the
/// adjoint of l with respect to each derivative (same layout as the inputs,
/// interior first).
struct PointLoss {
  LossParts parts;
  PsiJet adj;
};

inline PointLoss point_loss(const PsiJet& p, std::size_t n_int, std::span<const Vec2> pts, const MonitorField& mon,
                            LossWeights w) {
  const auto n = static_cast<Eigen::Index>(pts.size());
  const auto ni = static_cast<Eigen::Index>(n_int);
  const Eigen::Index nb = n - ni;
  require(ni >= 1 && nb >= 1, "physics_loss: empty point batch");
  const double area = mon.rho.grid().domain().area();
  PointLoss out;
  auto zero = [&] { return VectorXd::Zero(n); };
  out.adj = {zero(), zero(), zero(), zero(), zero(), zero()};
  for (Eigen::Index q = 0; q < ni; ++q) {
    double a11 = 1 + p.pxx[q], a22 = 1 + p.pyy[q], a12 = p.pxy[q];
    double det = a11 * a22 - a12 * a12;
    Vec2 y = pts[static_cast<std::size_t>(q)] + Vec2{p.px[q], p.py[q]};
    auto s = bilinear_sample_grad(mon.rho, y);
    const double k = w.relative ? 1.0 / mon.sigma : 1.0;
    double R = k * (area * s.value * det - mon.sigma);
    double cx = std::min(0.0, a11), cy = std::min(0.0, a22);
    out.parts.l_eq += R * R;
    out.parts.l_convex += cx * cx + cy * cy;
    double g = 2 * k * R / static_cast<double>(ni);
    out.adj.px[q] = g * area * s.grad.x * det;
    out.adj.py[q] = g * area * s.grad.y * det;
    out.adj.pxx[q] = g * area * s.value * a22 + w.gamma * 2 * cx / static_cast<double>(ni);
    out.adj.pyy[q] = g * area * s.value * a11 + w.gamma * 2 * cy / static_cast<double>(ni);
    out.adj.pxy[q] = -2 * g * area * s.value * a12;
  }
  const Rect& dom = mon.rho.grid().domain();
  for (Eigen::Index q = ni; q < n; ++q) {
    const Vec2& x = pts[static_cast<std::size_t>(q)];
    // Sliding keeps only the normal component; corners pin both.
    const bool fixed = w.boundary == BoundaryMode::fixed;
    const double mx = fixed || x.x == dom.x0 || x.x == dom.x1 ? 1.0 : 0.0;
    const double my = fixed || x.y == dom.y0 || x.y == dom.y1 ? 1.0 : 0.0;
    out.parts.l_bound += mx * p.px[q] * p.px[q] + my * p.py[q] * p.py[q];
    out.adj.px[q] = mx * w.beta * 2 * p.px[q] / static_cast<double>(nb);
    out.adj.py[q] = my * w.beta * 2 * p.py[q] / static_cast<double>(nb);
  }
  out.parts.l_eq /= static_cast<double>(ni);
  out.parts.l_convex /= static_cast<double>(ni);
  out.parts.l_bound /= static_cast<double>(nb);
  out.parts.l = out.parts.l_eq + w.beta * out.parts.l_bound + w.gamma * out.parts.l_convex;
  return out;
}

inline std::vector<Vec2> concat_points(const CollocationPoints& c) {
  std::vector<Vec2> pts = c.interior;
  pts.insert(pts.end(), c.boundary.begin(), c.boundary.end());
  return pts;
}

/// Loss of one state's batch; with grad != nullptr the parameter gradient is
/// accumulated into it (scaled by `scale`).
inline LossParts physics_loss(const DmmModel& m, const ScalarField2D& state, double t, const CollocationPoints& pts,
                              const MonitorField& mon, LossWeights w = {}, DmmModel* grad = nullptr,
                              double scale = 1.0) {
  auto all = concat_points(pts);
  auto f = dmm_detail::forward(m, dmm_encoder_input(m, state), t, all, 2, grad != nullptr);
  auto pl = point_loss(dmm_detail::to_psi(f.out), pts.interior.size(), all, mon, w);
  if (grad) {
    Jet adj;
    auto row = [&](const VectorXd& v) { return MatrixXd((scale * v).transpose()); };
    adj.v = row(pl.adj.psi);
    adj.d = {row(pl.adj.px), row(pl.adj.py)};
    adj.dd = {row(pl.adj.pxx), row(pl.adj.pxy), row(pl.adj.pyy)};
    dmm_detail::backward(m, f, adj, *grad);
  }
  return pl.parts;
}

// ---------------------------------------------------------------------------
// Training

struct DmmSample {
  ScalarField2D state;
  double t = 0.0;  // normalized to [0, 1] over the trajectory
};

struct DmmTrainConfig {
  LossWeights weights;
  std::size_t n_interior = 256;
  std::size_t n_boundary = 64;
  int epochs = 150;
  int states_per_step = 4;
  double lr = 1e-3;
  double lr_final = 1e-4;  // exponential decay from lr over the epochs
  std::size_t eval_interior = 256;  // frozen batch for reporting and the quasi-Newton stage
  std::size_t eval_boundary = 64;
  int qn_iters = 200;
  double qn_grad_tol = 1e-10;
  double uniform_fraction = 0.5;  // share of interior training points drawn uniformly instead of by rho
  double alpha_c = kDefaultAlphaC;
  Boundary boundary = Boundary::periodic;
  std::uint64_t seed = 0;
  DmmArch arch;

  void validate() const {
    require(weights.beta > 0 && weights.gamma > 0, "DmmTrainConfig: beta and gamma must be positive");
    require(n_interior >= 1 && n_boundary >= 1, "DmmTrainConfig: need interior and boundary points");
    require(eval_interior >= 1 && eval_boundary >= 1, "DmmTrainConfig: need evaluation points");
    require(epochs >= 0 && qn_iters >= 0, "DmmTrainConfig: negative iteration count");
    require(states_per_step >= 1, "DmmTrainConfig: states_per_step must be positive");
    require(lr > 0 && lr_final > 0, "DmmTrainConfig: learning rates must be positive");
    require(uniform_fraction >= 0 && uniform_fraction <= 1, "DmmTrainConfig: uniform_fraction must be in [0, 1]");
  }
};

struct DmmEpochRecord {
  int epoch = 0;
  LossParts loss;
};

struct DmmTrainResult {
  DmmModel model;
  std::vector<DmmEpochRecord> history;  // mean training loss per epoch
  LossParts initial;                    // frozen batch, untrained model
  LossParts after_adam;                 // frozen batch, after stage 1
  LossParts after_qn;                   // frozen batch, after stage 2
  int qn_iterations = 0;
  bool qn_line_search_failed = false;
};

/// Monitor used for a training state.
inline MonitorField dmm_monitor(const ScalarField2D& state, double alpha_c, Boundary b) {
  return monitor_from_state(state, alpha_c, b);
}

namespace dmm_detail {

struct FrozenBatch {
  std::vector<MonitorField> monitors;
  std::vector<CollocationPoints> points;
};

inline LossParts frozen_loss(const DmmModel& m, const std::vector<DmmSample>& data, const FrozenBatch& fb,
                             LossWeights w) {
  LossParts total;
  for (std::size_t s = 0; s < data.size(); ++s)
    total += physics_loss(m, data[s].state, data[s].t, fb.points[s], fb.monitors[s], w);
  return total.scaled(1.0 / static_cast<double>(data.size()));
}

/// Monitor-proportional interior points, a `uniform` share of them replaced by
/// uniform draws over the domain.
inline CollocationPoints training_points(const MonitorField& mon, std::size_t n_interior, std::size_t n_boundary,
                                         double uniform, std::mt19937_64& rng) {
  const auto nu = static_cast<std::size_t>(std::llround(uniform * static_cast<double>(n_interior)));
  auto pts = sample_collocation(mon, n_interior - nu, n_boundary, rng);
  const Rect& d = mon.rho.grid().domain();
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (std::size_t k = 0; k < nu; ++k) {
    double a = U(rng), b = U(rng);
    pts.interior.push_back({d.x0 + a * (d.x1 - d.x0), d.y0 + b * (d.y1 - d.y0)});
  }
  return pts;
}

}  // namespace dmm_detail

using DmmProgress = std::function<void(const DmmEpochRecord&)>;

inline DmmTrainResult train_dmm(const std::vector<DmmSample>& data, const DmmTrainConfig& cfg,
                                const DmmProgress& progress = {}) {
  cfg.validate();
  require(!data.empty(), "train_dmm: empty dataset");
  DmmTrainResult res;
  res.model = DmmModel(cfg.arch, cfg.seed);
  DmmModel& m = res.model;

  dmm_detail::FrozenBatch fb;
  for (std::size_t s = 0; s < data.size(); ++s) {
    fb.monitors.push_back(dmm_monitor(data[s].state, cfg.alpha_c, cfg.boundary));
    std::mt19937_64 frng(cfg.seed ^ (0x9e3779b97f4a7c15ULL + s));
    fb.points.push_back(dmm_detail::training_points(fb.monitors.back(), cfg.eval_interior, cfg.eval_boundary,
                                                    cfg.uniform_fraction, frng));
  }
  res.initial = dmm_detail::frozen_loss(m, data, fb, cfg.weights);

  // Stage 1: Adam over shuffled states with fresh points every step.
  std::mt19937_64 rng(cfg.seed + 1);
  nn::OptimState opt;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto per_step = static_cast<std::size_t>(cfg.states_per_step);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double frac = cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 1.0;
    nn::AdamConfig ac;
    ac.lr = cfg.lr * std::pow(cfg.lr_final / cfg.lr, frac);
    std::shuffle(order.begin(), order.end(), rng);
    LossParts sum;
    for (std::size_t b = 0; b < order.size(); b += per_step) {
      std::size_t e = std::min(order.size(), b + per_step);
      DmmModel grad = m.zeros_like();
      for (std::size_t q = b; q < e; ++q) {
        std::size_t s = order[q];
        auto pts = dmm_detail::training_points(fb.monitors[s], cfg.n_interior, cfg.n_boundary,
                                               cfg.uniform_fraction, rng);
        auto lp = physics_loss(m, data[s].state, data[s].t, pts, fb.monitors[s], cfg.weights, &grad,
                               1.0 / static_cast<double>(e - b));
        if (!std::isfinite(lp.l))
          throw Error("train_dmm: loss diverged (non-finite) at epoch " + std::to_string(epoch) + ", state " +
                      std::to_string(s));
        sum += lp;
      }
      nn::adam_step(m, grad, opt, ac);
    }
    DmmEpochRecord rec{epoch, sum.scaled(1.0 / static_cast<double>(data.size()))};
    res.history.push_back(rec);
    if (progress) progress(rec);
  }
  res.after_adam = dmm_detail::frozen_loss(m, data, fb, cfg.weights);

  // Stage 2: quasi-Newton on the decoder's output layer against the frozen
  // batch. Inputs to that layer do not depend on its parameters, so they are
  // computed once.
  if (cfg.qn_iters > 0) {
    const std::size_t last = m.designated_layer();
    DenseNet body = m.decoder;
    body.layers.pop_back();
    std::vector<Jet> hidden;
    std::vector<std::vector<Vec2>> all_pts;
    for (std::size_t s = 0; s < data.size(); ++s) {
      all_pts.push_back(concat_points(fb.points[s]));
      auto enc_in = dmm_encoder_input(m, data[s].state);
      VectorXd code = m.encoder1.encode(enc_in);
      Jet e2 = nn::jet_forward(m.encoder2, dmm_detail::coord_jet(m.arch(), data[s].t, all_pts[s], 2));
      hidden.push_back(nn::jet_forward(body, dmm_detail::decoder_input(e2, code)));
    }
    DenseNet head;
    head.layers.push_back(m.decoder.layers[last]);
    nn::NetObjective obj = [&](const DenseNet& net) {
      nn::NetLoss nl{0.0, net.zeros_like()};
      for (std::size_t s = 0; s < data.size(); ++s) {
        JetTape tape;
        Jet out = nn::jet_forward(net, hidden[s], &tape);
        auto pl = point_loss(dmm_detail::to_psi(out), fb.points[s].interior.size(), all_pts[s], fb.monitors[s],
                             cfg.weights);
        const double sc = 1.0 / static_cast<double>(data.size());
        nl.loss += sc * pl.parts.l;
        Jet adj;
        auto row = [&](const VectorXd& v) { return MatrixXd((sc * v).transpose()); };
        adj.v = row(pl.adj.psi);
        adj.d = {row(pl.adj.px), row(pl.adj.py)};
        adj.dd = {row(pl.adj.pxx), row(pl.adj.pxy), row(pl.adj.pyy)};
        nn::jet_backward(net, tape, adj, nl.grad);
      }
      return nl;
    };
    auto refined = nn::quasi_newton_refine(head, 0, obj, cfg.qn_iters, cfg.qn_grad_tol);
    m.decoder.layers[last] = refined.net.layers[0];
    res.qn_iterations = refined.info.iterations;
    res.qn_line_search_failed = refined.info.line_search_failed;
  }
  res.after_qn = dmm_detail::frozen_loss(m, data, fb, cfg.weights);
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_dmm(const std::string& path, const DmmModel& m, const nlohmann::json& info = {}) {
  Checkpoint ck;
  ck.meta["kind"] = "dmm";
  ck.meta["arch"] = to_json(m.arch());
  ck.meta["info"] = info;
  ck.add_params("dmm", m);
  save_checkpoint(path, ck);
}

inline DmmModel load_dmm(const std::string& path) {
  auto ck = load_checkpoint(path);
  require(ck.meta.value("kind", "") == "dmm", "load_dmm: not a DMM checkpoint: " + path);
  DmmModel m(dmm_arch_from_json(ck.meta.at("arch")), 0);
  ck.load_params("dmm", m);
  return m;
}

}  // namespace mamover
