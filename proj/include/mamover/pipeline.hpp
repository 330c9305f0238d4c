#pragma once

// Stage helpers shared by the command-line tool and the acceptance runner,
// and the end-to-end pipeline driven by a flat config file.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mamover/burgers.hpp"
#include "mamover/config.hpp"
#include "mamover/dmm.hpp"
#include "mamover/interp.hpp"
#include "mamover/ma_oracle.hpp"
#include "mamover/mmf.hpp"
#include "mamover/monitor.hpp"
#include "mamover/solver.hpp"

namespace mamover {

using Log = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// CSV

/// Minimal CSV writer: a header row, then rows of already formatted cells.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : os_(path) {
    if (!os_) throw Error("cannot write CSV: " + path);
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
    os_ << "\n";
    if (!os_) throw Error("CSV write failed");
  }

 private:
  std::ofstream os_;
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(int v) { return std::to_string(v); }

// ---------------------------------------------------------------------------
// Dataset views

inline double normalized_time(const Dataset& ds, std::size_t frame) {
  return ds.config.steps > 0 ? static_cast<double>(frame) / ds.config.steps : 0.0;
}

/// States of one split, every `stride`-th frame.
inline std::vector<DmmSample> dmm_samples(const Dataset& ds, const std::string& tag, int stride = 1) {
  require(stride >= 1, "frame stride must be positive");
  std::vector<DmmSample> out;
  for (auto i : ds.indices(tag))
    for (std::size_t f = 0; f < ds.trajectories[i].size(); f += static_cast<std::size_t>(stride))
      out.push_back({ds.trajectories[i][f], normalized_time(ds, f)});
  return out;
}

inline std::vector<std::vector<ScalarField2D>> split_trajectories(const Dataset& ds, const std::string& tag,
                                                                  int limit = 0) {
  std::vector<std::vector<ScalarField2D>> out;
  for (auto i : ds.indices(tag)) {
    if (limit > 0 && static_cast<int>(out.size()) >= limit) break;
    out.push_back(ds.trajectories[i]);
  }
  return out;
}

inline MeshMover dmm_mover(const DmmModel& m) {
  return [&m](const ScalarField2D& s, double t) { return resolution_transfer(m, s, t, s.grid()); };
}

// ---------------------------------------------------------------------------
// Mesh evaluation

struct MeshEvalConfig {
  double alpha_c = kDefaultAlphaC;
  Boundary boundary = Boundary::periodic;
  bool oracle = true;
  std::size_t convex_points = 256;  // held-out collocation points for l_convex
  std::uint64_t seed = 0;
};

struct MeshEvalRow {
  std::size_t trajectory = 0;
  std::size_t frame = 0;
  EquidistMetrics identity, dmm, oracle;
  std::size_t tangled = 0;
  double l_convex = 0.0;
};

struct MeshEvalSummary {
  std::vector<MeshEvalRow> rows;
  EquidistMetrics identity, dmm, oracle;  // means over states
  std::size_t tangled = 0;
  double max_l_convex = 0.0;
  bool has_oracle = false;
};

/// Compare identity, DMM and (optionally) oracle meshes on every state of a split.
inline MeshEvalSummary eval_meshes(const Dataset& ds, const std::string& tag, const DmmModel& dmm,
                                   const MeshEvalConfig& cfg, const Log& log = {}) {
  MeshEvalSummary s;
  s.has_oracle = cfg.oracle;
  const auto& g = ds.grid();
  for (auto i : ds.indices(tag))
    for (std::size_t f = 0; f < ds.trajectories[i].size(); ++f) {
      const auto& u = ds.trajectories[i][f];
      const double t = normalized_time(ds, f);
      auto mon = monitor_from_state(u, cfg.alpha_c, cfg.boundary);
      MeshEvalRow r;
      r.trajectory = i;
      r.frame = f;
      r.identity = equidist_metrics(MovedMesh::identity(g), mon);
      auto mesh = resolution_transfer(dmm, u, t, g);
      r.dmm = equidist_metrics(mesh, mon);
      r.tangled = cell_volumes(mesh).tangled;
      auto pts = sample_collocation(mon, cfg.convex_points, std::max<std::size_t>(1, cfg.convex_points / 4),
                                    cfg.seed ^ (0x51ed270b27e1f7c5ULL + s.rows.size()));
      r.l_convex = physics_loss(dmm, u, t, pts, mon).l_convex;
      if (cfg.oracle) r.oracle = equidist_metrics(transform_from_psi(solve_ma_2d(mon).psi), mon);
      s.rows.push_back(r);
    }
  require(!s.rows.empty(), "eval_meshes: split `" + tag + "` is empty");
  const double n = static_cast<double>(s.rows.size());
  for (const auto& r : s.rows) {
    s.identity.std += r.identity.std / n;
    s.identity.range += r.identity.range / n;
    s.dmm.std += r.dmm.std / n;
    s.dmm.range += r.dmm.range / n;
    s.oracle.std += r.oracle.std / n;
    s.oracle.range += r.oracle.range / n;
    s.tangled += r.tangled;
    s.max_l_convex = std::max(s.max_l_convex, r.l_convex);
  }
  if (log) {
    std::ostringstream os;
    os << "mesh eval on " << s.rows.size() << " states: std identity " << s.identity.std << " dmm " << s.dmm.std;
    if (cfg.oracle) os << " oracle " << s.oracle.std;
    os << ", tangled cells " << s.tangled;
    log(os.str());
  }
  return s;
}

inline void write_mesh_eval_csv(const std::string& path, const MeshEvalSummary& s) {
  CsvWriter w(path, {"trajectory", "frame", "identity_std", "identity_range", "dmm_std", "dmm_range", "oracle_std",
                     "oracle_range", "tangled_cells", "l_convex"});
  auto opt = [&](double v) { return s.has_oracle ? fmt(v) : std::string("nan"); };
  for (const auto& r : s.rows)
    w.row({fmt(r.trajectory), fmt(r.frame), fmt(r.identity.std), fmt(r.identity.range), fmt(r.dmm.std),
           fmt(r.dmm.range), opt(r.oracle.std), opt(r.oracle.range), fmt(r.tangled), fmt(r.l_convex)});
}

struct BlendRow {
  double lambda = 0.0;
  EquidistMetrics metrics;  // means over states
};

/// Equidistribution of lambda f(x) + (1 - lambda) x for each lambda.
inline std::vector<BlendRow> blend_sweep(const std::vector<DmmSample>& states, const DmmModel& dmm,
                                         const std::vector<double>& lambdas, double alpha_c = kDefaultAlphaC,
                                         Boundary b = Boundary::periodic) {
  require(!states.empty(), "blend_sweep: no states");
  std::vector<BlendRow> out;
  for (double l : lambdas) out.push_back({l, {}});
  const double n = static_cast<double>(states.size());
  for (const auto& s : states) {
    auto mon = monitor_from_state(s.state, alpha_c, b);
    auto mesh = resolution_transfer(dmm, s.state, s.t, s.state.grid());
    for (auto& r : out) {
      auto m = equidist_metrics(blend_mesh(mesh, r.lambda), mon);
      r.metrics.std += m.std / n;
      r.metrics.range += m.range / n;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Interpolation pretraining data

inline std::vector<InterpSample> interp_samples(const Dataset& ds, const std::string& tag, int stride = 1) {
  std::vector<InterpSample> out;
  for (const auto& s : dmm_samples(ds, tag, stride)) out.push_back({s.state, s.t});
  return out;
}

// ---------------------------------------------------------------------------
// Solver evaluation and ablation

struct SolverEval {
  double one_step_mse = 0.0;    // all test pairs
  double rollout_mse = 0.0;     // frames 1..steps of rollouts from frame 0
  double persistence_one_step = 0.0;
  double persistence_rollout = 0.0;
};

inline SolverEval eval_solver(const MmPdeModel& m, const Dataset& ds, const std::string& tag, int rollout_steps) {
  auto trajs = split_trajectories(ds, tag);
  require(!trajs.empty(), "eval_solver: split `" + tag + "` is empty");
  const double dt = ds.config.steps > 0 ? 1.0 / ds.config.steps : 1.0;
  auto orig = make_mp_graph(ds.grid().nodes(), m.g1.config().k);
  SolverEval e;
  std::vector<ScalarField2D> pred1, truth1, hold1;
  for (const auto& tr : trajs)
    for (std::size_t f = 0; f + 1 < tr.size(); ++f) {
      pred1.push_back(mmpde_forward(m, orig, tr[f], static_cast<double>(f) * dt));
      truth1.push_back(tr[f + 1]);
      hold1.push_back(tr[f]);
    }
  require(!pred1.empty(), "eval_solver: trajectories need at least two frames");
  e.one_step_mse = mse(pred1, truth1);
  e.persistence_one_step = mse(hold1, truth1);
  const int steps = std::min<int>(rollout_steps, static_cast<int>(trajs[0].size()) - 1);
  std::vector<ScalarField2D> pred, truth, hold;
  for (const auto& tr : trajs) {
    auto r = rollout(m, tr[0], 0.0, dt, steps);
    for (int s = 1; s <= steps; ++s) {
      pred.push_back(r[static_cast<std::size_t>(s)]);
      truth.push_back(tr[static_cast<std::size_t>(s)]);
      hold.push_back(tr[0]);
    }
  }
  e.rollout_mse = mse(pred, truth);
  e.persistence_rollout = mse(hold, truth);
  return e;
}

struct AblationConfig {
  std::vector<std::string> variants{"full", "no_g1", "g1_plus_g2", "no_residual", "uniform_mesh", "g1_only"};
  MpConfig mp;
  SolverTrainConfig train;
  int max_train_trajectories = 0;  // 0: all
  int rollout_steps = 10;
};

struct AblationRow {
  std::string variant;
  double train_initial = 0.0;
  double train_final = 0.0;
  SolverEval test;
  double seconds = 0.0;
};

/// Train every variant from the same seed on the same data and budget.
inline std::vector<AblationRow> run_ablation(const Dataset& ds, const DmmModel& dmm, const InterpFramework& interp,
                                             const AblationConfig& cfg, const Log& log = {}) {
  auto data = step_samples(split_trajectories(ds, "train", cfg.max_train_trajectories), ds.config.steps);
  require(!data.empty(), "run_ablation: no training pairs");
  std::vector<AblationRow> rows;
  for (const auto& name : cfg.variants) {
    auto t0 = std::chrono::steady_clock::now();
    auto model = make_mmpde(cfg.mp, interp, parse_variant(name), &dmm, cfg.train.seed);
    auto res = train_solver(data, model, cfg.train, [&](int e, double l) {
      if (log) log(name + " epoch " + std::to_string(e) + " loss " + fmt(l));
    });
    AblationRow r;
    r.variant = name;
    r.train_initial = res.initial;
    r.train_final = res.history.empty() ? res.initial : res.history.back();
    r.test = eval_solver(res.model, ds, "test", cfg.rollout_steps);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log)
      log(name + ": test one-step " + fmt(r.test.one_step_mse) + ", rollout " + fmt(r.test.rollout_mse) + " (" +
          fmt(r.seconds) + " s)");
    rows.push_back(r);
  }
  return rows;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  CsvWriter w(path, {"variant", "train_initial", "train_final", "test_one_step_mse", "test_rollout_mse",
                     "persistence_one_step_mse", "persistence_rollout_mse"});
  for (const auto& r : rows)
    w.row({r.variant, fmt(r.train_initial), fmt(r.train_final), fmt(r.test.one_step_mse), fmt(r.test.rollout_mse),
           fmt(r.test.persistence_one_step), fmt(r.test.persistence_rollout)});
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineConfig {
  std::string out_dir = "mamover_run";
  std::uint64_t seed = 0;
  int threads = 1;
  BurgersConfig data;
  DmmTrainConfig dmm;
  int dmm_stride = 1;
  bool oracle = true;
  InterpConfig interp;
  PretrainConfig pretrain;
  int interp_stride = 1;
  MpConfig mp;
  SolverTrainConfig solver;
  std::string variant = "full";
  int solver_trajectories = 0;  // 0: every training trajectory
  int rollout_steps = 10;
};

inline const std::set<std::string>& pipeline_keys() {
  static const std::set<std::string> keys{
      "out_dir",          "seed",           "threads",          "trajectories",      "solve_res",
      "target_res",       "steps",          "nu",               "dt",                "ic_variant",
      "split_step",       "alpha_c",        "dmm_epochs",       "dmm_lr",            "dmm_lr_final",
      "dmm_interior",     "dmm_boundary",   "dmm_states_per_step", "dmm_qn_iters",   "dmm_stride",
      "dmm_boundary_mode", "dmm_uniform_fraction", "oracle",        "interp_k",         "interp_prior",      "interp_epochs",
      "interp_lr",        "interp_lr_final", "interp_batch",   "interp_stride",    "interp_residual",   "mp_layers",
      "mp_width",         "mp_k",           "solver_epochs",    "solver_lr",         "solver_lr_final",
      "solver_batch",     "freeze_interp",  "variant",          "solver_trajectories", "rollout_steps"};
  return keys;
}

/// Every key is optional; unknown keys are rejected by name.
inline PipelineConfig pipeline_config_from(const Config& c) {
  c.check_known(pipeline_keys());
  PipelineConfig p;
  p.out_dir = c.get("out_dir", p.out_dir);
  p.seed = static_cast<std::uint64_t>(c.get("seed", static_cast<long long>(p.seed)));
  p.threads = c.get("threads", p.threads);
  auto& d = p.data;
  d.trajectories = c.get("trajectories", d.trajectories);
  d.solve_res = c.get("solve_res", d.solve_res);
  d.target_res = c.get("target_res", d.target_res);
  d.steps = c.get("steps", d.steps);
  d.nu = c.get("nu", d.nu);
  d.dt = c.get("dt", d.dt);
  d.ic = parse_ic_variant(c.get("ic_variant", to_string(d.ic)));
  d.split_step = c.get("split_step", d.split_step);
  auto& m = p.dmm;
  m.alpha_c = c.get("alpha_c", m.alpha_c);
  m.epochs = c.get("dmm_epochs", m.epochs);
  m.lr = c.get("dmm_lr", m.lr);
  m.lr_final = c.get("dmm_lr_final", m.lr_final);
  m.n_interior = static_cast<std::size_t>(c.get("dmm_interior", static_cast<long long>(m.n_interior)));
  m.n_boundary = static_cast<std::size_t>(c.get("dmm_boundary", static_cast<long long>(m.n_boundary)));
  m.states_per_step = c.get("dmm_states_per_step", m.states_per_step);
  m.qn_iters = c.get("dmm_qn_iters", m.qn_iters);
  m.weights.boundary = parse_boundary_mode(c.get("dmm_boundary_mode", to_string(m.weights.boundary)));
  m.uniform_fraction = c.get("dmm_uniform_fraction", m.uniform_fraction);
  p.dmm_stride = c.get("dmm_stride", p.dmm_stride);
  p.oracle = c.get("oracle", p.oracle);
  p.interp.itp.k = c.get("interp_k", p.interp.itp.k);
  p.interp.itp.prior = parse_itp_prior(c.get("interp_prior", to_string(p.interp.itp.prior)));
  p.interp.use_residual = c.get("interp_residual", p.interp.use_residual);
  p.pretrain.epochs = c.get("interp_epochs", p.pretrain.epochs);
  p.pretrain.lr = c.get("interp_lr", p.pretrain.lr);
  p.pretrain.lr_final = c.get("interp_lr_final", p.pretrain.lr_final);
  p.pretrain.batch = c.get("interp_batch", p.pretrain.batch);
  p.interp_stride = c.get("interp_stride", p.interp_stride);
  p.mp.layers = c.get("mp_layers", p.mp.layers);
  p.mp.width = c.get("mp_width", p.mp.width);
  p.mp.k = c.get("mp_k", p.mp.k);
  p.solver.epochs = c.get("solver_epochs", p.solver.epochs);
  p.solver.lr = c.get("solver_lr", p.solver.lr);
  p.solver.lr_final = c.get("solver_lr_final", p.solver.lr_final);
  p.solver.batch = c.get("solver_batch", p.solver.batch);
  p.solver.freeze_interp = c.get("freeze_interp", p.solver.freeze_interp);
  p.variant = c.get("variant", p.variant);
  p.solver_trajectories = c.get("solver_trajectories", p.solver_trajectories);
  p.rollout_steps = c.get("rollout_steps", p.rollout_steps);
  parse_variant(p.variant);
  require(p.rollout_steps >= 1, "rollout_steps must be positive");
  require(p.threads >= 1, "threads must be positive");
  return p;
}

/// Seeds and thread counts fan out from the top-level values.
inline void apply_globals(PipelineConfig& p) {
  p.data.seed = p.seed;
  p.data.threads = p.threads;
  p.dmm.seed = p.seed;
  p.pretrain.seed = p.seed;
  p.solver.seed = p.seed;
}

struct PipelineSummary {
  std::vector<std::pair<std::string, double>> metrics;

  void add(const std::string& k, double v) { metrics.emplace_back(k, v); }
  double at(const std::string& k) const {
    for (const auto& [key, v] : metrics)
      if (key == k) return v;
    throw Error("pipeline summary has no metric " + k);
  }
};

inline void write_dmm_history_csv(const std::string& path, const DmmTrainResult& r) {
  CsvWriter w(path, {"stage", "epoch", "l", "l_eq", "l_bound", "l_convex"});
  auto row = [&](const std::string& stage, int e, const LossParts& p) {
    w.row({stage, fmt(e), fmt(p.l), fmt(p.l_eq), fmt(p.l_bound), fmt(p.l_convex)});
  };
  row("initial", -1, r.initial);
  for (const auto& h : r.history) row("adam_epoch_mean", h.epoch, h.loss);
  row("after_adam", -1, r.after_adam);
  row("after_qn", -1, r.after_qn);
}

inline void write_history_csv(const std::string& path, double initial, const std::vector<double>& history) {
  CsvWriter w(path, {"epoch", "loss"});
  w.row({"-1", fmt(initial)});
  for (std::size_t e = 0; e < history.size(); ++e) w.row({fmt(e), fmt(history[e])});
}

namespace pipeline_detail {

template <class F>
auto stage(const std::string& name, const Log& log, F&& f) {
  if (log) log("stage " + name);
  try {
    return f();
  } catch (const std::exception& e) {
    throw Error("pipeline stage `" + name + "` failed: " + e.what());
  }
}

}  // namespace pipeline_detail

/// gen-data, train-dmm, eval-mesh, pretrain-interp, train-solver, rollout, report.
inline PipelineSummary run_pipeline(PipelineConfig p, const Log& log = {}) {
  namespace fs = std::filesystem;
  using pipeline_detail::stage;
  apply_globals(p);
  fs::create_directories(p.out_dir);
  auto path = [&](const std::string& f) { return (fs::path(p.out_dir) / f).string(); };
  PipelineSummary sum;

  auto ds = stage("gen-data", log, [&] {
    auto d = gen_burgers(p.data);
    save_dataset(path("data"), d);
    return load_dataset(path("data"));
  });

  auto dmm = stage("train-dmm", log, [&] {
    p.dmm.arch.grid_nx = ds.grid().nx();
    p.dmm.arch.grid_ny = ds.grid().ny();
    auto r = train_dmm(dmm_samples(ds, "train", p.dmm_stride), p.dmm, [&](const DmmEpochRecord& e) {
      if (log) log("dmm epoch " + std::to_string(e.epoch) + " loss " + fmt(e.loss.l));
    });
    save_dmm(path("dmm.ckpt"), r.model);
    write_dmm_history_csv(path("dmm_history.csv"), r);
    sum.add("dmm_loss_initial", r.initial.l);
    sum.add("dmm_loss_after_adam", r.after_adam.l);
    sum.add("dmm_loss_after_qn", r.after_qn.l);
    sum.add("dmm_l_bound", r.after_qn.l_bound);
    sum.add("dmm_l_convex", r.after_qn.l_convex);
    return r.model;
  });

  stage("eval-mesh", log, [&] {
    MeshEvalConfig mc;
    mc.alpha_c = p.dmm.alpha_c;
    mc.boundary = p.dmm.boundary;
    mc.oracle = p.oracle;
    mc.seed = p.seed;
    auto s = eval_meshes(ds, "test", dmm, mc, log);
    write_mesh_eval_csv(path("mesh_eval.csv"), s);
    sum.add("identity_std", s.identity.std);
    sum.add("identity_range", s.identity.range);
    sum.add("dmm_std", s.dmm.std);
    sum.add("dmm_range", s.dmm.range);
    if (p.oracle) {
      sum.add("oracle_std", s.oracle.std);
      sum.add("oracle_range", s.oracle.range);
    }
    sum.add("std_reduction", 1.0 - s.dmm.std / s.identity.std);
    sum.add("range_reduction", 1.0 - s.dmm.range / s.identity.range);
    sum.add("tangled_cells", static_cast<double>(s.tangled));
    return 0;
  });

  auto fw = stage("pretrain-interp", log, [&] {
    InterpFramework init(p.interp, ds.grid().num_nodes(), p.seed);
    auto r = pretrain_interp(init, interp_samples(ds, "train", p.interp_stride), dmm_mover(dmm), p.pretrain,
                             [&](int e, double l) {
                               if (log) log("interp epoch " + std::to_string(e) + " loss " + fmt(l));
                             });
    save_interp(path("interp.ckpt"), r.framework);
    write_history_csv(path("interp_history.csv"), r.initial, r.history);
    sum.add("interp_loss_initial", r.initial);
    sum.add("interp_loss_final", r.final);
    return r.framework;
  });

  auto model = stage("train-solver", log, [&] {
    auto data = step_samples(split_trajectories(ds, "train", p.solver_trajectories), ds.config.steps);
    auto init = make_mmpde(p.mp, fw, parse_variant(p.variant), &dmm, p.seed);
    auto r = train_solver(data, init, p.solver, [&](int e, double l) {
      if (log) log("solver epoch " + std::to_string(e) + " loss " + fmt(l));
    });
    save_mmpde(path("solver.ckpt"), r.model);
    write_history_csv(path("solver_history.csv"), r.initial, r.history);
    sum.add("solver_loss_initial", r.initial);
    sum.add("solver_loss_final", r.history.empty() ? r.initial : r.history.back());
    return r.model;
  });

  stage("rollout", log, [&] {
    auto test = ds.indices("test");
    require(!test.empty(), "no test trajectory");
    const auto& tr = ds.trajectories[test[0]];
    const int steps = std::min<int>(p.rollout_steps, static_cast<int>(tr.size()) - 1);
    require(steps >= 1, "test trajectory too short for a rollout");
    auto r = rollout(model, tr[0], 0.0, 1.0 / ds.config.steps, steps);
    mmf::save_stack(path("rollout.mmf"), r);
    auto e = eval_solver(model, ds, "test", p.rollout_steps);
    sum.add("test_one_step_mse", e.one_step_mse);
    sum.add("test_rollout_mse", e.rollout_mse);
    sum.add("persistence_one_step_mse", e.persistence_one_step);
    sum.add("persistence_rollout_mse", e.persistence_rollout);
    return 0;
  });

  stage("report", log, [&] {
    CsvWriter w(path("summary.csv"), {"metric", "value"});
    for (const auto& [k, v] : sum.metrics) w.row({k, fmt(v)});
    return 0;
  });
  return sum;
}

}  // namespace mamover
