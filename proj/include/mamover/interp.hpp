#pragma once

// Value transfer between point sets: the global soft nearest-neighbour
// extrapolation, learnable k-neighbour interpolation weights (Itp1/Itp2), the
// residual-cut network and the pretraining of the whole framework.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mamover/checkpoint.hpp"
#include "mamover/common.hpp"
#include "mamover/geom.hpp"
#include "mamover/nnet.hpp"

namespace mamover {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nn::DenseNet;

// ---------------------------------------------------------------------------
// Soft nearest-neighbour extrapolation

inline double soft_knn_default_c(std::size_t n) { return std::floor(std::sqrt(static_cast<double>(n))); }

/// sum_l softmax_l(-C |y - x_l|) u_l over all points. C <= 0 selects floor(sqrt(N)).
inline double soft_knn_extrapolate(std::span<const Vec2> points, std::span<const double> values, Vec2 query,
                                   double c = 0.0) {
  require(!points.empty(), "soft_knn_extrapolate: empty point set");
  require(points.size() == values.size(), "soft_knn_extrapolate: points/values size mismatch");
  if (c <= 0) c = soft_knn_default_c(points.size());
  std::vector<double> logit(points.size());
  for (std::size_t l = 0; l < points.size(); ++l) logit[l] = -c * norm(points[l] - query);
  const double top = *std::max_element(logit.begin(), logit.end());
  double z = 0.0, s = 0.0;
  for (std::size_t l = 0; l < points.size(); ++l) {
    double e = std::exp(logit[l] - top);
    z += e;
    s += e * values[l];
  }
  return s / z;
}

/// Field on `target`'s nodes from scattered samples by soft_knn_extrapolate.
inline ScalarField2D soft_knn_resample(std::span<const Vec2> points, std::span<const double> values,
                                       const StructuredGrid& target, double c = 0.0) {
  ScalarField2D out(target);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = soft_knn_extrapolate(points, values, target.node(k), c);
  return out;
}

// ---------------------------------------------------------------------------
// Learnable interpolation weights

/// Fixed weights the network output is added to.
enum class ItpPrior { none, nearest, shepard };

inline ItpPrior parse_itp_prior(const std::string& s) {
  if (s == "none") return ItpPrior::none;
  if (s == "nearest") return ItpPrior::nearest;
  if (s == "shepard") return ItpPrior::shepard;
  throw Error("unknown interpolation prior: " + s + " (expected none, nearest or shepard)");
}
inline std::string to_string(ItpPrior p) {
  return p == ItpPrior::none ? "none" : p == ItpPrior::nearest ? "nearest" : "shepard";
}

struct ItpConfig {
  int k = 30;
  std::vector<int> hidden{64, 32};
  ItpPrior prior = ItpPrior::nearest;
  bool normalize = false;  // softmax over (output + log prior) instead of raw sums

  void validate() const {
    require(k >= 1, "ItpConfig: k must be positive");
    for (int h : hidden) require(h >= 1, "ItpConfig: hidden widths must be positive");
  }
};

/// Weights for the k nearest source points of a query, from the query position
/// and the neighbour offsets (neighbour minus query, scaled by ~1/h).
class ItpNet {
 public:
  ItpNet() = default;
  ItpNet(const ItpConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    std::vector<int> w{2 * (cfg.k + 1)};
    w.insert(w.end(), cfg.hidden.begin(), cfg.hidden.end());
    w.push_back(cfg.k);
    net = DenseNet(w, rng, /*zero_last=*/true);
  }

  const ItpConfig& config() const { return cfg_; }
  int k() const { return cfg_.k; }

  template <class F>
  void for_each_param(F&& f) {
    net.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    net.for_each_param(f);
  }

  DenseNet net;

 private:
  ItpConfig cfg_;
};

/// Neighbour lists and network inputs for one source set -> query set transfer.
struct ItpPlan {
  int k = 0;
  std::size_t queries = 0;
  std::vector<std::size_t> idx;  // k per query, ascending distance
  MatrixXd X;                    // 2(k+1) x queries
  MatrixXd prior;                // k x queries
};

inline ItpPlan make_itp_plan(const ItpNet& itp, std::span<const Vec2> source, std::span<const Vec2> queries) {
  const int k = itp.k();
  require(source.size() >= static_cast<std::size_t>(k), "interp: fewer source points than k");
  ItpPlan p;
  p.k = k;
  p.queries = queries.size();
  p.idx.resize(static_cast<std::size_t>(k) * queries.size());
  p.X.resize(2 * (k + 1), static_cast<Eigen::Index>(queries.size()));
  p.prior = MatrixXd::Zero(k, static_cast<Eigen::Index>(queries.size()));
  const double scale = std::sqrt(static_cast<double>(source.size()));
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto col = static_cast<Eigen::Index>(q);
    auto nb = knn(source, queries[q], static_cast<std::size_t>(k));
    p.X(0, col) = 2 * queries[q].x - 1;
    p.X(1, col) = 2 * queries[q].y - 1;
    for (int j = 0; j < k; ++j) {
      p.idx[q * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] = nb[static_cast<std::size_t>(j)].index;
      Vec2 off = source[nb[static_cast<std::size_t>(j)].index] - queries[q];
      p.X(2 + 2 * j, col) = scale * off.x;
      p.X(3 + 2 * j, col) = scale * off.y;
    }
    switch (itp.config().prior) {
      case ItpPrior::none:
        break;
      case ItpPrior::nearest:
        p.prior(0, col) = 1.0;
        break;
      case ItpPrior::shepard: {
        if (nb[0].distance < 1e-12) {
          p.prior(0, col) = 1.0;
          break;
        }
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += 1.0 / (nb[static_cast<std::size_t>(j)].distance * nb[static_cast<std::size_t>(j)].distance);
        for (int j = 0; j < k; ++j)
          p.prior(j, col) = 1.0 / (nb[static_cast<std::size_t>(j)].distance * nb[static_cast<std::size_t>(j)].distance * z);
        break;
      }
    }
  }
  return p;
}

/// Forward record for the reverse pass.
struct ItpCache {
  nn::JetTape tape;
  MatrixXd W;  // final weights, k x queries
};

inline VectorXd itp_apply(const ItpNet& itp, const ItpPlan& plan, const VectorXd& values, ItpCache* cache = nullptr) {
  MatrixXd z = nn::jet_forward(itp.net, nn::seed_jet(plan.X, {}, 0), cache ? &cache->tape : nullptr).v;
  MatrixXd W;
  if (itp.config().normalize) {
    MatrixXd logits = z + (plan.prior.array() + 1e-12).log().matrix();
    W.resize(logits.rows(), logits.cols());
    for (Eigen::Index q = 0; q < logits.cols(); ++q) {
      Eigen::ArrayXd e = (logits.col(q).array() - logits.col(q).maxCoeff()).exp();
      W.col(q) = (e / e.sum()).matrix();
    }
  } else {
    W = z + plan.prior;
  }
  VectorXd out(static_cast<Eigen::Index>(plan.queries));
  const auto k = static_cast<std::size_t>(plan.k);
  for (std::size_t q = 0; q < plan.queries; ++q) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      s += W(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(q)) * values[static_cast<Eigen::Index>(plan.idx[q * k + j])];
    out[static_cast<Eigen::Index>(q)] = s;
  }
  if (cache) cache->W = std::move(W);
  return out;
}

/// Gradient of out_bar . out: network parameters into grad, and (optionally)
/// the source values into values_bar.
inline void itp_backward(const ItpNet& itp, const ItpPlan& plan, const VectorXd& values, const ItpCache& cache,
                         const VectorXd& out_bar, ItpNet& grad, VectorXd* values_bar = nullptr) {
  const auto k = static_cast<std::size_t>(plan.k);
  MatrixXd Wbar(plan.k, static_cast<Eigen::Index>(plan.queries));
  for (std::size_t q = 0; q < plan.queries; ++q) {
    const double ob = out_bar[static_cast<Eigen::Index>(q)];
    for (std::size_t j = 0; j < k; ++j) {
      const auto src = static_cast<Eigen::Index>(plan.idx[q * k + j]);
      Wbar(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(q)) = ob * values[src];
      if (values_bar) (*values_bar)[src] += ob * cache.W(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(q));
    }
  }
  MatrixXd zbar = Wbar;
  if (itp.config().normalize) {
    for (Eigen::Index q = 0; q < zbar.cols(); ++q) {
      double d = cache.W.col(q).dot(Wbar.col(q));
      zbar.col(q) = (cache.W.col(q).array() * (Wbar.col(q).array() - d)).matrix();
    }
  }
  nn::Jet adj;
  adj.v = std::move(zbar);
  nn::jet_backward(itp.net, cache.tape, adj, grad.net);
}

/// Single-query convenience: interpolate scattered values at one point.
inline double interp_apply(const ItpNet& itp, std::span<const Vec2> source, std::span<const double> values, Vec2 query) {
  require(source.size() == values.size(), "interp_apply: points/values size mismatch");
  Vec2 qs[1] = {query};
  auto plan = make_itp_plan(itp, source, qs);
  VectorXd v = Eigen::Map<const VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
  return itp_apply(itp, plan, v)[0];
}

// ---------------------------------------------------------------------------
// Framework

struct InterpConfig {
  ItpConfig itp;
  std::vector<int> residual_hidden{256, 256};
  bool use_residual = true;
};

inline nlohmann::json to_json(const InterpConfig& c) {
  return {{"k", c.itp.k},
          {"hidden", c.itp.hidden},
          {"prior", to_string(c.itp.prior)},
          {"normalize", c.itp.normalize},
          {"residual_hidden", c.residual_hidden},
          {"use_residual", c.use_residual}};
}

inline InterpConfig interp_config_from_json(const nlohmann::json& j) {
  InterpConfig c;
  c.itp.k = j.at("k");
  c.itp.hidden = j.at("hidden").get<std::vector<int>>();
  c.itp.prior = parse_itp_prior(j.at("prior"));
  c.itp.normalize = j.at("normalize");
  c.residual_hidden = j.at("residual_hidden").get<std::vector<int>>();
  c.use_residual = j.at("use_residual");
  return c;
}

/// Itp1 (original -> moving), Itp2 (moving -> original) and the residual-cut
/// net on the flattened original-grid state. The residual net's output layer
/// starts at zero.
class InterpFramework {
 public:
  InterpFramework() = default;
  InterpFramework(const InterpConfig& cfg, std::size_t nodes, std::uint64_t seed) : cfg_(cfg), nodes_(nodes) {
    std::mt19937_64 rng(seed);
    itp1 = ItpNet(cfg.itp, rng);
    itp2 = ItpNet(cfg.itp, rng);
    std::vector<int> w{static_cast<int>(nodes)};
    w.insert(w.end(), cfg.residual_hidden.begin(), cfg.residual_hidden.end());
    w.push_back(static_cast<int>(nodes));
    residual = DenseNet(w, rng, /*zero_last=*/true);
  }

  const InterpConfig& config() const { return cfg_; }
  std::size_t nodes() const { return nodes_; }

  template <class F>
  void for_each_param(F&& f) {
    itp1.for_each_param(f);
    itp2.for_each_param(f);
    residual.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    itp1.for_each_param(f);
    itp2.for_each_param(f);
    residual.for_each_param(f);
  }

  InterpFramework zeros_like() const {
    InterpFramework z = *this;
    nn::set_zero(z);
    return z;
  }

  ItpNet itp1, itp2;
  DenseNet residual;

 private:
  InterpConfig cfg_;
  std::size_t nodes_ = 0;
};

/// Plans for both directions between a grid's nodes and a moved mesh.
struct RoundtripPlans {
  ItpPlan to_moved;  // source: original nodes, queries: moved nodes
  ItpPlan to_orig;   // source: moved nodes, queries: original nodes
};

inline RoundtripPlans make_roundtrip_plans(const InterpFramework& fw, const MovedMesh& mesh) {
  auto orig = mesh.base().nodes();
  return {make_itp_plan(fw.itp1, orig, mesh.coords()), make_itp_plan(fw.itp2, mesh.coords(), orig)};
}

inline VectorXd as_vector(const ScalarField2D& f) {
  return Eigen::Map<const VectorXd>(f.values().data(), static_cast<Eigen::Index>(f.size()));
}

inline ScalarField2D as_field(const StructuredGrid& g, const VectorXd& v) {
  return ScalarField2D(g, std::vector<double>(v.data(), v.data() + v.size()));
}

/// Residual-cut output for a state (zero when disabled).
inline VectorXd residual_cut(const InterpFramework& fw, const VectorXd& u, nn::JetTape* tape = nullptr) {
  if (!fw.config().use_residual) return VectorXd::Zero(u.size());
  return nn::jet_forward(fw.residual, nn::seed_jet(u, {}, 0), tape).v.col(0);
}

/// Original -> moving -> original with no evolution, plus the residual cut.
inline ScalarField2D framework_roundtrip(const InterpFramework& fw, const MovedMesh& mesh, const ScalarField2D& state) {
  require(state.size() == fw.nodes(), "framework_roundtrip: state size differs from the framework");
  auto plans = make_roundtrip_plans(fw, mesh);
  VectorXd u = as_vector(state);
  VectorXd v = itp_apply(fw.itp1, plans.to_moved, u);
  VectorXd y = itp_apply(fw.itp2, plans.to_orig, v) + residual_cut(fw, u);
  return as_field(state.grid(), y);
}

// ---------------------------------------------------------------------------
// Pretraining

using MeshMover = std::function<MovedMesh(const ScalarField2D&, double)>;

struct InterpSample {
  ScalarField2D state;
  double t = 0.0;
};

struct PretrainConfig {
  int epochs = 40;
  double lr = 1e-4;
  double lr_final = 1e-5;  // exponential decay from lr over the epochs
  int batch = 4;           // states per optimizer step
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 0, "PretrainConfig: epochs must be non-negative");
    require(lr > 0 && lr_final > 0, "PretrainConfig: learning rates must be positive");
    require(batch >= 1, "PretrainConfig: batch must be positive");
  }
};

struct PretrainResult {
  InterpFramework framework;
  double initial = 0.0;         // l_pre over the whole set before training
  double final = 0.0;           // l_pre of the returned framework
  std::vector<double> history;  // l_pre over the whole set after each epoch
};

namespace interp_detail {

struct Prepared {
  VectorXd u;
  RoundtripPlans plans;
};

// Round trip loss of one state; accumulates scale * gradient when grad != nullptr.
inline double roundtrip_loss(const InterpFramework& fw, const Prepared& p, InterpFramework* grad, double scale) {
  ItpCache c1, c2;
  nn::JetTape rt;
  VectorXd v = itp_apply(fw.itp1, p.plans.to_moved, p.u, grad ? &c1 : nullptr);
  VectorXd y = itp_apply(fw.itp2, p.plans.to_orig, v, grad ? &c2 : nullptr);
  if (fw.config().use_residual) y += residual_cut(fw, p.u, grad ? &rt : nullptr);
  VectorXd e = y - p.u;
  const double n = static_cast<double>(e.size());
  if (grad) {
    VectorXd ybar = (2.0 * scale / n) * e;
    VectorXd vbar = VectorXd::Zero(v.size());
    itp_backward(fw.itp2, p.plans.to_orig, v, c2, ybar, grad->itp2, &vbar);
    itp_backward(fw.itp1, p.plans.to_moved, p.u, c1, vbar, grad->itp1);
    if (fw.config().use_residual) {
      nn::Jet adj;
      adj.v = ybar;
      nn::jet_backward(fw.residual, rt, adj, grad->residual);
    }
  }
  return e.squaredNorm() / n;
}

inline double full_loss(const InterpFramework& fw, const std::vector<Prepared>& prep) {
  double s = 0.0;
  for (const auto& p : prep) s += roundtrip_loss(fw, p, nullptr, 1.0);
  return s / static_cast<double>(prep.size());
}

}  // namespace interp_detail

/// Minimize l_pre = MSE(round trip(u), u) over the samples with Adam; the mover
/// stays frozen. Returns the best framework seen at epoch boundaries, so the
/// final loss never exceeds the initial one.
inline PretrainResult pretrain_interp(const InterpFramework& init, const std::vector<InterpSample>& data,
                                      const MeshMover& mover, const PretrainConfig& cfg,
                                      const std::function<void(int, double)>& progress = {}) {
  cfg.validate();
  require(!data.empty(), "pretrain_interp: empty dataset");
  std::vector<interp_detail::Prepared> prep;
  prep.reserve(data.size());
  for (const auto& s : data) {
    require(s.state.size() == init.nodes(), "pretrain_interp: state size differs from the framework");
    prep.push_back({as_vector(s.state), make_roundtrip_plans(init, mover(s.state, s.t))});
  }
  PretrainResult res;
  InterpFramework fw = init;
  res.initial = interp_detail::full_loss(fw, prep);
  res.framework = fw;
  res.final = res.initial;
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
    for (std::size_t b = 0; b < order.size(); b += batch) {
      std::size_t e = std::min(order.size(), b + batch);
      InterpFramework grad = fw.zeros_like();
      for (std::size_t q = b; q < e; ++q) {
        double l = interp_detail::roundtrip_loss(fw, prep[order[q]], &grad, 1.0 / static_cast<double>(e - b));
        if (!std::isfinite(l)) throw Error("pretrain_interp: loss diverged at epoch " + std::to_string(epoch));
      }
      nn::adam_step(fw, grad, opt, ac);
    }
    double l = interp_detail::full_loss(fw, prep);
    if (!std::isfinite(l)) throw Error("pretrain_interp: loss diverged at epoch " + std::to_string(epoch));
    res.history.push_back(l);
    if (l < res.final) {
      res.final = l;
      res.framework = fw;
    }
    if (progress) progress(epoch, l);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_interp(const std::string& path, const InterpFramework& fw, const nlohmann::json& info = {}) {
  Checkpoint ck;
  ck.meta["kind"] = "interp";
  ck.meta["config"] = to_json(fw.config());
  ck.meta["nodes"] = fw.nodes();
  ck.meta["info"] = info;
  ck.add_params("interp", fw);
  save_checkpoint(path, ck);
}

inline InterpFramework load_interp(const std::string& path) {
  auto ck = load_checkpoint(path);
  require(ck.meta.value("kind", "") == "interp", "load_interp: not an interpolation checkpoint: " + path);
  InterpFramework fw(interp_config_from_json(ck.meta.at("config")), ck.meta.at("nodes").get<std::size_t>(), 0);
  ck.load_params("interp", fw);
  return fw;
}

}  // namespace mamover
