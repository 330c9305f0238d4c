#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "mamover/common.hpp"

namespace mamover {

struct Rect {
  double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;

  double area() const { return (x1 - x0) * (y1 - y0); }
  Vec2 clamp(Vec2 p) const { return {std::clamp(p.x, x0, x1), std::clamp(p.y, y0, y1)}; }
  bool contains(Vec2 p) const { return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

/// Uniform node lattice over a rectangle. Node (i, j) sits at
/// (x0 + i*hx, y0 + j*hy); storage is row-major with i fastest.
class StructuredGrid {
 public:
  StructuredGrid() : StructuredGrid(3, 3) {}
  StructuredGrid(int nx, int ny, Rect domain = {}) : nx_(nx), ny_(ny), domain_(domain) {
    require(nx >= 3 && ny >= 3, "StructuredGrid: need at least 3 nodes per axis");
    require(domain.x1 > domain.x0 && domain.y1 > domain.y0, "StructuredGrid: empty domain");
  }

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  const Rect& domain() const { return domain_; }
  double hx() const { return (domain_.x1 - domain_.x0) / (nx_ - 1); }
  double hy() const { return (domain_.y1 - domain_.y0) / (ny_ - 1); }
  std::size_t num_nodes() const { return static_cast<std::size_t>(nx_) * ny_; }
  std::size_t num_cells() const { return static_cast<std::size_t>(nx_ - 1) * (ny_ - 1); }
  std::size_t index(int i, int j) const { return static_cast<std::size_t>(j) * nx_ + i; }
  Vec2 node(int i, int j) const { return {domain_.x0 + i * hx(), domain_.y0 + j * hy()}; }
  Vec2 node(std::size_t k) const {
    return node(static_cast<int>(k % nx_), static_cast<int>(k / nx_));
  }
  bool is_boundary(int i, int j) const { return i == 0 || j == 0 || i == nx_ - 1 || j == ny_ - 1; }

  std::vector<Vec2> nodes() const {
    std::vector<Vec2> out;
    out.reserve(num_nodes());
    for (int j = 0; j < ny_; ++j)
      for (int i = 0; i < nx_; ++i) out.push_back(node(i, j));
    return out;
  }

  friend bool operator==(const StructuredGrid&, const StructuredGrid&) = default;

 private:
  int nx_;
  int ny_;
  Rect domain_;
};

class ScalarField2D {
 public:
  ScalarField2D() = default;
  explicit ScalarField2D(StructuredGrid grid, double fill = 0.0)
      : grid_(grid), values_(grid.num_nodes(), fill) {}
  ScalarField2D(StructuredGrid grid, std::vector<double> values)
      : grid_(grid), values_(std::move(values)) {
    require(values_.size() == grid_.num_nodes(), "ScalarField2D: value count != nx*ny");
    for (double v : values_) require(std::isfinite(v), "ScalarField2D: non-finite value");
  }

  template <class F>
  static ScalarField2D from_function(const StructuredGrid& grid, F&& f) {
    ScalarField2D out(grid);
    for (int j = 0; j < grid.ny(); ++j)
      for (int i = 0; i < grid.nx(); ++i) {
        Vec2 p = grid.node(i, j);
        out.at(i, j) = f(p.x, p.y);
      }
    return out;
  }

  const StructuredGrid& grid() const { return grid_; }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  double at(int i, int j) const { return values_[grid_.index(i, j)]; }
  double& at(int i, int j) { return values_[grid_.index(i, j)]; }
  double operator[](std::size_t k) const { return values_[k]; }
  double& operator[](std::size_t k) { return values_[k]; }
  std::size_t size() const { return values_.size(); }

 private:
  StructuredGrid grid_;
  std::vector<double> values_;
};

/// Node positions of a lattice after a coordinate transformation. Cells keep
/// the lattice connectivity (i,j)-(i+1,j)-(i+1,j+1)-(i,j+1).
class MovedMesh {
 public:
  MovedMesh() = default;
  MovedMesh(StructuredGrid base, std::vector<Vec2> coords) : base_(base), coords_(std::move(coords)) {
    require(coords_.size() == base_.num_nodes(), "MovedMesh: coordinate count != nx*ny");
  }
  static MovedMesh identity(const StructuredGrid& grid) { return {grid, grid.nodes()}; }

  const StructuredGrid& base() const { return base_; }
  std::span<const Vec2> coords() const { return coords_; }
  std::span<Vec2> coords() { return coords_; }
  const Vec2& at(int i, int j) const { return coords_[base_.index(i, j)]; }
  Vec2& at(int i, int j) { return coords_[base_.index(i, j)]; }

 private:
  StructuredGrid base_;
  std::vector<Vec2> coords_;
};

struct CellVolumes {
  std::vector<double> signed_area;
  std::vector<double> area;
  std::size_t tangled = 0;  // cells with signed area <= 0

  double total() const {
    double s = 0.0;
    for (double a : area) s += a;
    return s;
  }
};

inline double quad_signed_area(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
  return 0.5 * ((a.x * b.y - b.x * a.y) + (b.x * c.y - c.x * b.y) + (c.x * d.y - d.x * c.y) +
                (d.x * a.y - a.x * d.y));
}

/// Shoelace area of every lattice cell, in cell order (i fastest).
inline CellVolumes cell_volumes(const MovedMesh& mesh) {
  const auto& g = mesh.base();
  CellVolumes out;
  out.signed_area.reserve(g.num_cells());
  out.area.reserve(g.num_cells());
  for (int j = 0; j + 1 < g.ny(); ++j)
    for (int i = 0; i + 1 < g.nx(); ++i) {
      double s = quad_signed_area(mesh.at(i, j), mesh.at(i + 1, j), mesh.at(i + 1, j + 1),
                                  mesh.at(i, j + 1));
      out.signed_area.push_back(s);
      out.area.push_back(std::abs(s));
      if (s <= 0.0) ++out.tangled;
    }
  return out;
}

inline Vec2 cell_centroid(const MovedMesh& mesh, int i, int j) {
  Vec2 c = mesh.at(i, j) + mesh.at(i + 1, j) + mesh.at(i + 1, j + 1) + mesh.at(i, j + 1);
  return 0.25 * c;
}

struct SampleWithGrad {
  double value = 0.0;
  Vec2 grad;  // zero along an axis where the query was clamped
};

/// Bilinear interpolation of nodal values with its spatial derivative. Points
/// outside the domain are clamped first.
inline SampleWithGrad bilinear_sample_grad(const ScalarField2D& f, Vec2 p) {
  const auto& g = f.grid();
  const Rect& d = g.domain();
  bool cx = p.x < d.x0 || p.x > d.x1;
  bool cy = p.y < d.y0 || p.y > d.y1;
  p = d.clamp(p);
  double sx = (p.x - d.x0) / g.hx();
  double sy = (p.y - d.y0) / g.hy();
  int i = std::clamp(static_cast<int>(std::floor(sx)), 0, g.nx() - 2);
  int j = std::clamp(static_cast<int>(std::floor(sy)), 0, g.ny() - 2);
  double tx = sx - i;
  double ty = sy - j;
  double f00 = f.at(i, j), f10 = f.at(i + 1, j), f01 = f.at(i, j + 1), f11 = f.at(i + 1, j + 1);
  SampleWithGrad out;
  out.value = (1 - tx) * (1 - ty) * f00 + tx * (1 - ty) * f10 + (1 - tx) * ty * f01 + tx * ty * f11;
  out.grad.x = cx ? 0.0 : ((1 - ty) * (f10 - f00) + ty * (f11 - f01)) / g.hx();
  out.grad.y = cy ? 0.0 : ((1 - tx) * (f01 - f00) + tx * (f11 - f10)) / g.hy();
  return out;
}

inline double bilinear_sample(const ScalarField2D& f, Vec2 p) { return bilinear_sample_grad(f, p).value; }

struct Neighbor {
  std::size_t index;
  double distance;
};

/// Exhaustive k-nearest search; ascending distance, ties by ascending index.
inline std::vector<Neighbor> knn(std::span<const Vec2> points, Vec2 query, std::size_t k) {
  require(!points.empty(), "knn: empty point set");
  require(k <= points.size(), "knn: k exceeds point count");
  std::vector<std::pair<double, std::size_t>> d2(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    Vec2 e = points[i] - query;
    d2[i] = {dot(e, e), i};
  }
  std::partial_sort(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(k), d2.end());
  std::vector<Neighbor> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({d2[i].second, std::sqrt(d2[i].first)});
  return out;
}

/// knn for every point of a set against the same set; row i lists the
/// neighbours of point i (itself first when included).
inline std::vector<std::vector<std::size_t>> knn_graph(std::span<const Vec2> points, std::size_t k,
                                                       bool include_self) {
  std::vector<std::vector<std::size_t>> out(points.size());
  std::size_t want = include_self ? k : k + 1;
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto nb = knn(points, points[i], want);
    out[i].reserve(k);
    for (const auto& n : nb) {
      if (!include_self && n.index == i) continue;
      if (out[i].size() < k) out[i].push_back(n.index);
    }
  }
  return out;
}

}  // namespace mamover
