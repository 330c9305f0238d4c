#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "mamover/geom.hpp"
#include "mamover/mmf.hpp"

using namespace mamover;

TEST(Grid, NodeCoordinatesAreExactLattice) {
  StructuredGrid g(5, 4, {-1.0, 1.0, 0.0, 3.0});
  EXPECT_DOUBLE_EQ(g.hx(), 0.5);
  EXPECT_DOUBLE_EQ(g.hy(), 1.0);
  EXPECT_EQ(g.node(3, 2), (Vec2{-1.0 + 3 * 0.5, 2.0}));
  EXPECT_EQ(g.num_cells(), 12u);
  EXPECT_THROW(StructuredGrid(2, 5), Error);
}

TEST(Field, RejectsWrongCountAndNonFinite) {
  StructuredGrid g(3, 3);
  EXPECT_THROW(ScalarField2D(g, std::vector<double>(8, 0.0)), Error);
  std::vector<double> v(9, 0.0);
  v[4] = std::nan("");
  EXPECT_THROW(ScalarField2D(g, v), Error);
}

TEST(CellVolumes, IdentityThreeByThree) {
  auto vol = cell_volumes(MovedMesh::identity(StructuredGrid(3, 3)));
  ASSERT_EQ(vol.area.size(), 4u);
  for (double a : vol.area) EXPECT_DOUBLE_EQ(a, 0.25);
  EXPECT_EQ(vol.tangled, 0u);
}

TEST(CellVolumes, InteriorShiftConservesArea) {
  StructuredGrid g(3, 3);
  auto mesh = MovedMesh::identity(g);
  mesh.at(1, 1).x += g.hx() / 2;
  auto vol = cell_volumes(mesh);
  EXPECT_EQ(vol.total(), 1.0);
  EXPECT_DOUBLE_EQ(vol.area[0], 0.25 + 0.0625);
  EXPECT_EQ(vol.tangled, 0u);
}

TEST(CellVolumes, RandomInteriorPerturbationKeepsTotal) {
  StructuredGrid g(17, 17);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> U(-0.4, 0.4);
  for (int trial = 0; trial < 20; ++trial) {
    auto mesh = MovedMesh::identity(g);
    for (int j = 1; j < 16; ++j)
      for (int i = 1; i < 16; ++i) mesh.at(i, j) += Vec2{U(rng) * g.hx(), U(rng) * g.hy()};
    auto vol = cell_volumes(mesh);
    EXPECT_NEAR(vol.total(), 1.0, 1e-12);
    EXPECT_EQ(vol.tangled, 0u);
  }
}

TEST(CellVolumes, FlagsFoldedCell) {
  StructuredGrid g(3, 3);
  auto mesh = MovedMesh::identity(g);
  mesh.at(1, 1) = {1.2, -0.1};
  auto vol = cell_volumes(mesh);
  EXPECT_GT(vol.tangled, 0u);
}

TEST(Bilinear, ConstantAndAffine) {
  StructuredGrid g(33, 33);
  auto c = ScalarField2D(g, 7.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(c, {0.123, 0.987}), 7.0);
  auto f = ScalarField2D::from_function(g, [](double x, double y) { return x + 2 * y; });
  EXPECT_NEAR(bilinear_sample(f, {0.3, 0.4}), 1.1, 1e-12);
}

TEST(Bilinear, ExactOnBilinearFunctionsAndGradient) {
  StructuredGrid g(9, 13);
  auto fn = [](double x, double y) { return 0.3 - 1.5 * x + 2.0 * y + 4.0 * x * y; };
  auto f = ScalarField2D::from_function(g, fn);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int k = 0; k < 200; ++k) {
    Vec2 p{U(rng), U(rng)};
    auto s = bilinear_sample_grad(f, p);
    EXPECT_NEAR(s.value, fn(p.x, p.y), 1e-12);
    EXPECT_NEAR(s.grad.x, -1.5 + 4.0 * p.y, 1e-10);
    EXPECT_NEAR(s.grad.y, 2.0 + 4.0 * p.x, 1e-10);
  }
}

TEST(Bilinear, SmoothFieldSecondOrder) {
  StructuredGrid g(65, 65);
  auto fn = [](double x, double y) { return std::sin(2 * std::numbers::pi * x) * std::cos(2 * std::numbers::pi * y); };
  auto f = ScalarField2D::from_function(g, fn);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int k = 0; k < 100; ++k) {
    Vec2 p{U(rng), U(rng)};
    EXPECT_NEAR(bilinear_sample(f, p), fn(p.x, p.y), 5e-3);
  }
}

TEST(Bilinear, ClampsOutsidePoints) {
  StructuredGrid g(5, 5);
  auto f = ScalarField2D::from_function(g, [](double x, double y) { return x + y; });
  auto s = bilinear_sample_grad(f, {1.2, -0.1});
  EXPECT_NEAR(s.value, 1.0, 1e-14);
  EXPECT_EQ(s.grad.x, 0.0);
  EXPECT_EQ(s.grad.y, 0.0);
}

TEST(Knn, CornersAndLattice) {
  std::vector<Vec2> corners{{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  auto nb = knn(corners, {0, 0}, 1);
  ASSERT_EQ(nb.size(), 1u);
  EXPECT_EQ(nb[0].index, 0u);
  EXPECT_EQ(nb[0].distance, 0.0);

  StructuredGrid g(5, 5);
  auto pts = g.nodes();
  auto five = knn(pts, g.node(2, 2), 5);
  EXPECT_EQ(five[0].index, g.index(2, 2));
  std::vector<std::size_t> rest;
  for (int k = 1; k < 5; ++k) rest.push_back(five[k].index);
  // Equal distances resolve by ascending index.
  std::vector<std::size_t> want{g.index(2, 1), g.index(1, 2), g.index(3, 2), g.index(2, 3)};
  EXPECT_EQ(rest, want);
}

TEST(Knn, MatchesExhaustiveSort) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec2> pts(200);
    for (auto& p : pts) p = {U(rng), U(rng)};
    Vec2 q{U(rng), U(rng)};
    std::vector<std::size_t> order(pts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return distance(pts[a], q) < distance(pts[b], q); });
    auto nb = knn(pts, q, 10);
    for (std::size_t k = 0; k < 10; ++k) {
      EXPECT_EQ(nb[k].index, order[k]);
      EXPECT_NEAR(nb[k].distance, distance(pts[order[k]], q), 1e-15);
    }
  }
}

TEST(Knn, Errors) {
  std::vector<Vec2> none;
  EXPECT_THROW(knn(none, {0, 0}, 0), Error);
  std::vector<Vec2> two{{0, 0}, {1, 1}};
  EXPECT_THROW(knn(two, {0, 0}, 3), Error);
}

TEST(Mmf, FieldAndMeshRoundTrip) {
  StructuredGrid g(6, 4);
  auto f = ScalarField2D::from_function(g, [](double x, double y) { return std::exp(x) - y * y; });
  std::stringstream ss;
  mmf::write_field(ss, f);
  std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "MMF1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 4u);  // ny
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 6u);  // nx
  EXPECT_EQ(bytes.size(), 12u + 8u + 8u * 24u);
  auto back = mmf::field_from_block(mmf::read_block(ss));
  ASSERT_EQ(back.size(), f.size());
  for (std::size_t k = 0; k < f.size(); ++k) EXPECT_EQ(back[k], f[k]);

  auto mesh = MovedMesh::identity(g);
  mesh.at(2, 1).x += 0.01;
  std::string path = ::testing::TempDir() + "/mesh.mmf";
  mmf::save_mesh(path, mesh);
  auto m2 = mmf::load_mesh(path);
  EXPECT_EQ(m2.base().nx(), 6);
  EXPECT_EQ(m2.base().ny(), 4);
  for (std::size_t k = 0; k < g.num_nodes(); ++k) EXPECT_EQ(m2.coords()[k], mesh.coords()[k]);

  std::stringstream bad("MMF2xxxxxxxx");
  EXPECT_THROW(mmf::read_block(bad), Error);
}
