#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "mamover/solver.hpp"

using namespace mamover;
namespace fs = std::filesystem;

namespace {

template <class M>
void randomize(M& m, std::uint64_t seed, double sd) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, sd);
  m.for_each_param([&](auto& a) {
    for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = N(rng);
  });
}

MovedMesh warped(const StructuredGrid& g, double amp) {
  auto nodes = g.nodes();
  for (auto& p : nodes) {
    double b = std::sin(std::numbers::pi * p.x) * std::sin(std::numbers::pi * p.y);
    p = p + Vec2{amp * b * std::cos(3 * p.y), amp * b * std::sin(2 * p.x)};
  }
  return {g, nodes};
}

MpConfig small_mp() {
  MpConfig c;
  c.layers = 2;
  c.width = 5;
  c.k = 4;
  return c;
}

InterpConfig small_interp() {
  InterpConfig c;
  c.itp.k = 4;
  c.itp.hidden = {6};
  c.residual_hidden = {5};
  return c;
}

ScalarField2D bump(const StructuredGrid& g) {
  return ScalarField2D::from_function(g, [](double x, double y) { return std::sin(3 * x) * std::cos(2 * y) + 0.3; });
}

// Straightforward evaluation: the edge net as a plain two-layer MLP applied to
// every (i, j) pair.
VectorXd naive_mp(const MessagePassingNet& net, const MpGraph& g, const VectorXd& u, double t) {
  const auto N = static_cast<Eigen::Index>(g.coords.size());
  const int H = net.config().width;
  MatrixXd h(H, N);
  for (Eigen::Index i = 0; i < N; ++i) {
    auto p = g.coords[static_cast<std::size_t>(i)];
    VectorXd x(4);
    x << u[i], 2 * p.x - 1, 2 * p.y - 1, 2 * t - 1;
    h.col(i) = net.encoder.forward(x);
  }
  const double sc = std::sqrt(static_cast<double>(N));
  for (const auto& L : net.layers) {
    MatrixXd W1(H, 2 * H + 3);
    W1 << L.A, L.B, L.c, L.D;
    MatrixXd next = h;
    for (Eigen::Index i = 0; i < N; ++i) {
      VectorXd agg = VectorXd::Zero(H);
      for (auto j : g.nbr[static_cast<std::size_t>(i)]) {
        auto J = static_cast<Eigen::Index>(j);
        Vec2 d = g.coords[static_cast<std::size_t>(i)] - g.coords[j];
        VectorXd in(2 * H + 3);
        in << h.col(i), h.col(J), u[i] - u[J], sc * d.x, sc * d.y;
        VectorXd z = (W1 * in + L.b1).array().tanh().matrix();
        agg += L.W2 * z + L.b2;
      }
      VectorXd cat(2 * H);
      cat << h.col(i), agg;
      next.col(i) = h.col(i) + L.nu.forward(cat);
    }
    h = next;
  }
  VectorXd out(N);
  for (Eigen::Index i = 0; i < N; ++i) out[i] = net.decoder.forward(VectorXd(h.col(i)))[0];
  return out;
}

MmPdeModel model_for(const VariantSpec& v, const StructuredGrid& g, std::uint64_t seed,
                     const DmmModel* mover = nullptr) {
  InterpFramework fw(small_interp(), g.num_nodes(), seed + 1);
  return make_mmpde(small_mp(), fw, v, mover, seed);
}

}  // namespace

TEST(MessagePassing, MatchesPlainEdgeNetwork) {
  StructuredGrid g(6, 5);
  std::mt19937_64 rng(1);
  MessagePassingNet net(small_mp(), rng);
  randomize(net, 2, 0.4);
  auto graph = make_mp_graph(g.nodes(), 4);
  VectorXd u = as_vector(bump(g));
  VectorXd fast = mp_forward(net, graph, u, 0.3);
  VectorXd slow = naive_mp(net, graph, u, 0.3);
  for (Eigen::Index i = 0; i < u.size(); ++i) EXPECT_NEAR(fast[i], slow[i], 1e-12 * (1 + std::abs(slow[i])));
}

TEST(MessagePassing, FreshNetPredictsNoChange) {
  StructuredGrid g(6, 6);
  std::mt19937_64 rng(3);
  MessagePassingNet net(MpConfig{}, rng);
  auto graph = make_mp_graph(g.nodes(), 35);
  VectorXd d = mp_forward(net, graph, as_vector(bump(g)), 0.5);
  EXPECT_EQ(d.cwiseAbs().maxCoeff(), 0.0);
}

TEST(MessagePassing, StateGradientMatchesFiniteDifferences) {
  StructuredGrid g(5, 5);
  std::mt19937_64 rng(4);
  MessagePassingNet net(small_mp(), rng);
  randomize(net, 5, 0.4);
  auto graph = make_mp_graph(g.nodes(), 4);
  VectorXd u = as_vector(bump(g));
  VectorXd w = VectorXd::LinSpaced(u.size(), -1.0, 1.0);
  MpTape tape;
  mp_forward(net, graph, u, 0.2, &tape);
  MessagePassingNet grad = net;
  nn::set_zero(grad);
  VectorXd ubar = mp_backward(net, graph, tape, w, grad, true);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    VectorXd a = u, b = u;
    a[i] += h;
    b[i] -= h;
    double fd = (w.dot(mp_forward(net, graph, a, 0.2)) - w.dot(mp_forward(net, graph, b, 0.2))) / (2 * h);
    EXPECT_NEAR(ubar[i], fd, 1e-7 * (1 + std::abs(fd)));
  }
}

TEST(Variant, ParsesNamesAndBlend) {
  EXPECT_EQ(parse_variant("no_residual").kind, VariantKind::no_residual);
  auto b = parse_variant("blend:0.25");
  EXPECT_EQ(b.kind, VariantKind::blend);
  EXPECT_EQ(b.lambda, 0.25);
  EXPECT_EQ(to_string(b), "blend:0.25");
  EXPECT_THROW(parse_variant("blend:1.5"), Error);
  EXPECT_THROW(parse_variant("blend:x"), Error);
  EXPECT_THROW(parse_variant("fancy"), Error);
}

TEST(Variant, BlendEndpoints) {
  StructuredGrid g(9, 9);
  DmmModel dmm(DmmArch{}, 3);
  randomize(dmm.decoder, 4, 0.3);
  auto u = bump(g);
  auto full = variant_mesh(model_for(parse_variant("full"), g, 1, &dmm), u, 0.4);
  auto one = variant_mesh(model_for(parse_variant("blend:1"), g, 1, &dmm), u, 0.4);
  auto zero = variant_mesh(model_for(parse_variant("blend:0"), g, 1, &dmm), u, 0.4);
  auto nodes = g.nodes();
  double moved = 0.0;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    EXPECT_EQ(one.coords()[k].x, full.coords()[k].x);
    EXPECT_EQ(one.coords()[k].y, full.coords()[k].y);
    EXPECT_EQ(zero.coords()[k].x, nodes[k].x);
    EXPECT_EQ(zero.coords()[k].y, nodes[k].y);
    moved = std::max(moved, distance(full.coords()[k], nodes[k]));
  }
  EXPECT_GT(moved, 1e-3);  // the comparison is not vacuous
}

TEST(Solver, FreshModelKeepsConstantStateFixed) {
  StructuredGrid g(10, 10);
  DmmModel dmm(DmmArch{}, 2);
  InterpFramework fw(InterpConfig{}, g.num_nodes(), 3);
  auto m = make_mmpde(MpConfig{}, fw, parse_variant("full"), &dmm, 4);
  auto traj = rollout(m, ScalarField2D(g, 0.7), 0.0, 1.0 / 30, 4);
  ASSERT_EQ(traj.size(), 5u);
  for (const auto& f : traj)
    for (double v : f.values()) EXPECT_EQ(v, 0.7);
}

TEST(Solver, UniformMeshReducesToTwoIncrementsOnTheGrid) {
  StructuredGrid g(7, 7);
  auto full = model_for(parse_variant("uniform_mesh"), g, 5);
  randomize(full.g1, 6, 0.3);
  randomize(full.g2, 7, 0.3);
  auto sum = full;
  sum.variant = parse_variant("g1_plus_g2");
  auto graph = make_mp_graph(g.nodes(), small_mp().k);
  auto u = bump(g);
  auto a = mmpde_forward(full, graph, u, 0.1);
  auto b = mmpde_forward(sum, graph, u, 0.1);
  double diff = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    EXPECT_NEAR(a[k], b[k], 1e-13);
    diff = std::max(diff, std::abs(a[k] - u[k]));
  }
  EXPECT_GT(diff, 1e-3);
}

class SolverGradient : public ::testing::TestWithParam<const char*> {};

TEST_P(SolverGradient, MatchesFiniteDifferences) {
  StructuredGrid g(5, 5);
  auto m = model_for(parse_variant(GetParam()), g, 8);
  randomize(m, 9, 0.3);
  auto graph = make_mp_graph(g.nodes(), small_mp().k);
  StepContext c;
  c.orig = &graph;
  if (m.variant.uses_interp()) {
    auto mesh = warped(g, 0.07);
    c.moved = make_mp_graph(mesh.coords(), small_mp().k);
    c.plans = make_roundtrip_plans(m.interp, mesh);
  }
  VectorXd u = as_vector(bump(g));
  VectorXd target = u.array().square().matrix();
  auto grad = m.zeros_like();
  step_loss(m, c, u, target, 0.3, &grad, 1.0);
  VectorXd gv = nn::pack_params(grad), th = nn::pack_params(m);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < th.size(); i += 7) {
    auto a = m, b = m;
    VectorXd ta = th, tb = th;
    ta[i] += h;
    tb[i] -= h;
    nn::unpack_params(a, ta);
    nn::unpack_params(b, tb);
    double fd = (step_loss(a, c, u, target, 0.3, nullptr, 1) - step_loss(b, c, u, target, 0.3, nullptr, 1)) / (2 * h);
    EXPECT_NEAR(gv[i], fd, 1e-6 * (1 + std::abs(fd))) << "param " << i;
  }
}

INSTANTIATE_TEST_SUITE_P(Solver, SolverGradient, ::testing::Values("full", "no_g1", "g1_plus_g2", "g1_only"));

TEST(Solver, ConstantDataStaysFitted) {
  StructuredGrid g(8, 8);
  auto m = model_for(parse_variant("full"), g, 10, nullptr);
  std::vector<StepSample> data;
  for (int s = 0; s < 4; ++s) data.push_back({ScalarField2D(g, 0.2 * s), ScalarField2D(g, 0.2 * s), s / 4.0});
  SolverTrainConfig cfg;
  cfg.epochs = 5;
  auto r = train_solver(data, m, cfg);
  EXPECT_EQ(r.initial, 0.0);
  for (double l : r.history) EXPECT_LE(l, 1e-8);
}

TEST(Solver, TrainingIsDeterministicAndReducesLoss) {
  StructuredGrid g(8, 8);
  DmmModel dmm(DmmArch{}, 11);
  randomize(dmm.decoder, 12, 0.2);
  auto m = model_for(parse_variant("full"), g, 13, &dmm);
  std::vector<StepSample> data;
  for (int s = 0; s < 6; ++s) {
    double c = 0.2 + 0.1 * s;
    auto f = [c](double x, double y) { return std::exp(-10 * ((x - c) * (x - c) + (y - 0.5) * (y - 0.5))); };
    auto f2 = [&](double x, double y) { return 0.9 * f(x - 0.03, y); };
    data.push_back({ScalarField2D::from_function(g, f), ScalarField2D::from_function(g, f2), s / 6.0});
  }
  SolverTrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr = 3e-3;
  cfg.batch = 2;
  cfg.seed = 3;
  auto r = train_solver(data, m, cfg);
  EXPECT_LT(r.history.back(), 0.5 * r.initial);
  auto again = train_solver(data, m, cfg);
  EXPECT_EQ(again.history, r.history);
}

TEST(Solver, FrozenInterpolationDoesNotMove) {
  StructuredGrid g(6, 6);
  auto m = model_for(parse_variant("full"), g, 14);
  std::vector<StepSample> data{{bump(g), ScalarField2D(g, 0.1), 0.0}};
  SolverTrainConfig cfg;
  cfg.epochs = 3;
  cfg.freeze_interp = true;
  auto r = train_solver(data, m, cfg);
  EXPECT_EQ(nn::pack_params(r.model.interp), nn::pack_params(m.interp));
  EXPECT_NE(nn::pack_params(r.model.g1), nn::pack_params(m.g1));
}

TEST(Metrics, MseAndRelative) {
  StructuredGrid g(3, 3);
  std::vector<ScalarField2D> a{ScalarField2D(g, 1.0), ScalarField2D(g, 2.0)};
  std::vector<ScalarField2D> b{ScalarField2D(g, 1.5), ScalarField2D(g, 2.0)};
  EXPECT_DOUBLE_EQ(mse(a, b), 0.125);
  EXPECT_DOUBLE_EQ(rmse_relative(a, b), 0.25 / 6.25);
  EXPECT_THROW(rmse_relative(a, {ScalarField2D(g, 0.0), ScalarField2D(g, 0.0)}), Error);
}

TEST(Solver, CheckpointRoundTrip) {
  StructuredGrid g(6, 6);
  DmmModel dmm(DmmArch{}, 15);
  randomize(dmm, 16, 0.1);
  auto m = model_for(parse_variant("blend:0.5"), g, 17, &dmm);
  randomize(m, 18, 0.2);
  auto path = (fs::temp_directory_path() / "mamover_test_solver.ckpt").string();
  save_mmpde(path, m);
  auto back = load_mmpde(path);
  EXPECT_EQ(nn::pack_params(back), nn::pack_params(m));
  EXPECT_EQ(nn::pack_params(back.mover), nn::pack_params(m.mover));
  EXPECT_EQ(to_string(back.variant), "blend:0.5");
  EXPECT_EQ(back.g1.config().k, 4);
  fs::remove(path);
}
