// mamover: command-line front end for data generation, mesh movement,
// interpolation pretraining, solver training and evaluation.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mamover/pipeline.hpp"

using namespace mamover;
namespace fs = std::filesystem;

namespace {

void log_line(const std::string& s) { std::cerr << "[mamover] " << s << std::endl; }

std::string with_default(const std::string& v, const std::string& fallback) { return v.empty() ? fallback : v; }

void need(const CLI::Option* o) {
  if (o->count() == 0) throw Error("missing required option " + o->get_name());
}

// Config keys name long options of the active subcommand (dashes or
// underscores). Values apply only where the option was not given explicitly.
void apply_config(CLI::App* sub, const Config& cfg) {
  for (const auto& [key, value] : cfg.values()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    if (name == "seed" || name == "threads") continue;  // handled globally
    CLI::Option* o = sub->get_option_no_throw("--" + name);
    if (!o) throw Error("unknown config key: " + key);
    if (o->count() > 0) continue;
    if (o->get_expected_max() == 0) {
      if (value == "true" || value == "1") o->add_result("true");
      else if (value != "false" && value != "0") throw Error("config key `" + key + "`: expected true/false");
      else continue;
    } else {
      o->add_result(value);
    }
    o->run_callback();
  }
}

struct StateRef {
  std::string file;
  std::string data;
  std::size_t trajectory = 0;
  std::size_t frame = 0;
  CLI::Option* t_opt = nullptr;
  double t = 0.0;

  void add(CLI::App* s) {
    s->add_option("--state", file, "state field (MMF1)");
    s->add_option("--data", data, "dataset directory (alternative to --state)");
    s->add_option("--trajectory", trajectory, "trajectory index within --data");
    s->add_option("--frame", frame, "frame index within the trajectory");
    t_opt = s->add_option("--t", t, "normalized time (default: frame / steps)");
  }

  std::pair<ScalarField2D, double> load() const {
    if (!file.empty()) return {mmf::load_field(file), t};
    require(!data.empty(), "give --state or --data");
    auto ds = load_dataset(data);
    require(trajectory < ds.trajectories.size(), "--trajectory out of range");
    require(frame < ds.trajectories[trajectory].size(), "--frame out of range");
    double tt = t_opt->count() ? t : normalized_time(ds, frame);
    return {ds.trajectories[trajectory][frame], tt};
  }
};

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error("not a number list: " + s);
    }
  }
  return out;
}

std::vector<std::string> parse_names(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees many mid-sized matrices; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 64 << 20);
#endif
  CLI::App app{"Moving-mesh engine: Monge-Ampere oracle, neural mesh mover and MM-PDE solver"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  int threads = 1;
  std::string config_path;
  auto* seed_opt = app.add_option("--seed", seed, "random seed for every stochastic step");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads (data generation)")->check(CLI::PositiveNumber);
  app.add_option("--config", config_path, "flat `key = value` config file");

  // gen-burgers
  auto* gb = app.add_subcommand("gen-burgers", "generate a Burgers trajectory dataset");
  BurgersConfig bc;
  std::string gb_out, gb_ic = "verbatim";
  auto* gb_out_opt = gb->add_option("--out", gb_out, "output directory");
  gb->add_option("--trajectories", bc.trajectories);
  gb->add_option("--solve-res", bc.solve_res, "fine-grid intervals per axis");
  gb->add_option("--target-res", bc.target_res, "stored intervals per axis");
  gb->add_option("--steps", bc.steps);
  gb->add_option("--nu", bc.nu);
  gb->add_option("--dt", bc.dt);
  gb->add_option("--split-step", bc.split_step);
  gb->add_option("--ic-variant", gb_ic, "verbatim | two_bump");

  // solve-ma
  auto* sm = app.add_subcommand("solve-ma", "classical Monge-Ampere mesh for one state");
  StateRef sm_state;
  sm_state.add(sm);
  MaSolveConfig ma;
  double sm_alpha = kDefaultAlphaC;
  std::string sm_scheme = "relaxation", sm_out, sm_report, sm_boundary = "periodic";
  sm->add_option("--alpha-c", sm_alpha, "monitor intensity constant");
  sm->add_option("--boundary", sm_boundary, "gradient stencil at the edges: periodic | one_sided");
  sm->add_option("--scheme", sm_scheme, "relaxation | damped_newton");
  sm->add_option("--tol", ma.tol);
  sm->add_option("--max-iters", ma.max_iters);
  auto* sm_out_opt = sm->add_option("--out", sm_out, "output mesh (MMF1)");
  sm->add_option("--report", sm_report, "metrics CSV");

  // error-study
  auto* es = app.add_subcommand("error-study", "interpolation error of uniform vs adapted meshes across resolutions");
  std::string es_res = "16,32,64", es_out;
  double es_sharp = 40.0, es_alpha = kDefaultAlphaC;
  es->add_option("--resolutions", es_res, "cells per axis, comma separated");
  es->add_option("--sharpness", es_sharp, "front steepness k in tanh(k (x + y - 1))");
  es->add_option("--alpha-c", es_alpha);
  auto* es_out_opt = es->add_option("--out", es_out, "CSV report");

  // train-dmm
  auto* td = app.add_subcommand("train-dmm", "train the neural mesh mover with the physics loss");
  DmmTrainConfig dc;
  std::string td_data, td_out, td_hist, td_bmode = "sliding";
  int td_stride = 1;
  auto* td_data_opt = td->add_option("--data", td_data, "dataset directory");
  auto* td_out_opt = td->add_option("--out", td_out, "checkpoint path");
  td->add_option("--history", td_hist, "loss history CSV (default <out>.history.csv)");
  td->add_option("--epochs", dc.epochs);
  td->add_option("--lr", dc.lr);
  td->add_option("--lr-final", dc.lr_final);
  td->add_option("--interior", dc.n_interior, "interior collocation points per state");
  td->add_option("--boundary", dc.n_boundary, "boundary collocation points per state");
  td->add_option("--states-per-step", dc.states_per_step);
  td->add_option("--qn-iters", dc.qn_iters);
  td->add_option("--alpha-c", dc.alpha_c);
  td->add_option("--beta", dc.weights.beta);
  td->add_option("--gamma", dc.weights.gamma);
  td->add_option("--uniform-fraction", dc.uniform_fraction, "share of interior points drawn uniformly");
  td->add_option("--boundary-mode", td_bmode, "sliding | fixed");
  td->add_option("--stride", td_stride, "use every n-th frame");

  // gen-mesh
  auto* gm = app.add_subcommand("gen-mesh", "moved mesh from a trained mover");
  StateRef gm_state;
  gm_state.add(gm);
  std::string gm_model, gm_out;
  int gm_res = 0;
  auto* gm_model_opt = gm->add_option("--model", gm_model, "mover checkpoint");
  gm->add_option("--res", gm_res, "target intervals per axis (default: the state's grid)");
  auto* gm_out_opt = gm->add_option("--out", gm_out, "output mesh (MMF1)");

  // eval-mesh
  auto* em = app.add_subcommand("eval-mesh", "equidistribution of identity, mover and oracle meshes");
  std::string em_data, em_model, em_split = "test", em_out, em_blend, em_blend_out;
  bool em_no_oracle = false;
  MeshEvalConfig mec;
  auto* em_data_opt = em->add_option("--data", em_data);
  auto* em_model_opt = em->add_option("--model", em_model, "mover checkpoint");
  em->add_option("--split", em_split, "train | valid | test");
  em->add_flag("--no-oracle", em_no_oracle, "skip the classical solve");
  em->add_option("--alpha-c", mec.alpha_c);
  auto* em_out_opt = em->add_option("--out", em_out, "per-state CSV");
  em->add_option("--blend", em_blend, "comma separated lambdas for a blend sweep");
  em->add_option("--blend-out", em_blend_out, "blend sweep CSV");

  // pretrain-interp
  auto* pi = app.add_subcommand("pretrain-interp", "pretrain the interpolation framework on round trips");
  InterpConfig ic;
  PretrainConfig pc;
  std::string pi_data, pi_dmm, pi_out, pi_hist, pi_prior = "nearest";
  bool pi_no_res = false, pi_normalize = false;
  int pi_stride = 1;
  auto* pi_data_opt = pi->add_option("--data", pi_data);
  auto* pi_dmm_opt = pi->add_option("--dmm-checkpoint", pi_dmm);
  auto* pi_out_opt = pi->add_option("--out", pi_out);
  pi->add_option("--history", pi_hist, "loss history CSV (default <out>.history.csv)");
  pi->add_option("--epochs", pc.epochs);
  pi->add_option("--lr", pc.lr);
  pi->add_option("--lr-final", pc.lr_final);
  pi->add_option("--batch", pc.batch);
  pi->add_option("--k", ic.itp.k, "neighbours per query");
  pi->add_option("--prior", pi_prior, "none | nearest | shepard");
  pi->add_flag("--normalize", pi_normalize, "softmax-normalize interpolation weights");
  pi->add_flag("--no-residual", pi_no_res, "drop the residual cut");
  pi->add_option("--stride", pi_stride, "use every n-th frame");

  // train-solver
  auto* ts = app.add_subcommand("train-solver", "train an MM-PDE variant");
  SolverTrainConfig sc;
  MpConfig mp;
  std::string ts_data, ts_dmm, ts_interp, ts_variant = "full", ts_out, ts_hist;
  int ts_max = 0;
  auto* ts_data_opt = ts->add_option("--data", ts_data);
  auto* ts_dmm_opt = ts->add_option("--dmm-checkpoint", ts_dmm);
  auto* ts_interp_opt = ts->add_option("--interp-checkpoint", ts_interp);
  ts->add_option("--variant", ts_variant, "full | no_g1 | g1_plus_g2 | no_residual | uniform_mesh | g1_only | blend:<l>");
  ts->add_option("--epochs", sc.epochs);
  ts->add_option("--lr", sc.lr);
  ts->add_option("--lr-final", sc.lr_final);
  ts->add_option("--batch", sc.batch);
  ts->add_flag("--freeze-interp", sc.freeze_interp, "keep the interpolation framework fixed");
  ts->add_option("--mp-layers", mp.layers);
  ts->add_option("--mp-width", mp.width);
  ts->add_option("--mp-k", mp.k);
  ts->add_option("--max-trajectories", ts_max, "cap on training trajectories (0: all)");
  auto* ts_out_opt = ts->add_option("--out", ts_out);
  ts->add_option("--history", ts_hist, "loss history CSV (default <out>.history.csv)");

  // rollout
  auto* ro = app.add_subcommand("rollout", "autoregressive prediction from an initial state");
  std::string ro_model, ro_init, ro_out;
  int ro_steps = 10;
  double ro_t0 = 0.0, ro_dt = 1.0 / 30;
  auto* ro_model_opt = ro->add_option("--model", ro_model);
  auto* ro_init_opt = ro->add_option("--init-state", ro_init, "initial state (MMF1)");
  ro->add_option("--steps", ro_steps)->check(CLI::PositiveNumber);
  ro->add_option("--t0", ro_t0, "normalized time of the initial state");
  ro->add_option("--dt", ro_dt, "normalized time per step");
  auto* ro_out_opt = ro->add_option("--out-traj", ro_out, "stacked trajectory (MMF1)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train every solver variant with one budget and compare test errors");
  AblationConfig ac;
  std::string ab_data, ab_dmm, ab_interp, ab_out, ab_variants;
  auto* ab_data_opt = ab->add_option("--data", ab_data);
  auto* ab_dmm_opt = ab->add_option("--dmm-checkpoint", ab_dmm);
  auto* ab_interp_opt = ab->add_option("--interp-checkpoint", ab_interp);
  ab->add_option("--variants", ab_variants, "comma separated (default: all)");
  ab->add_option("--epochs", ac.train.epochs);
  ab->add_option("--lr", ac.train.lr);
  ab->add_option("--lr-final", ac.train.lr_final);
  ab->add_option("--batch", ac.train.batch);
  ab->add_flag("--freeze-interp", ac.train.freeze_interp);
  ab->add_option("--mp-layers", ac.mp.layers);
  ab->add_option("--mp-width", ac.mp.width);
  ab->add_option("--mp-k", ac.mp.k);
  ab->add_option("--max-trajectories", ac.max_train_trajectories);
  ab->add_option("--rollout-steps", ac.rollout_steps);
  auto* ab_out_opt = ab->add_option("--out", ab_out, "CSV report");

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "end-to-end run driven by --config");
  std::string pl_out;
  pl->add_option("--out-dir", pl_out, "overrides out_dir from the config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    std::optional<Config> cfg;
    if (!config_path.empty()) cfg = Config::load(config_path);
    if (cfg && sub != pl) {
      apply_config(sub, *cfg);
      if (seed_opt->count() == 0) seed = static_cast<std::uint64_t>(cfg->get("seed", static_cast<long long>(seed)));
      if (threads_opt->count() == 0) threads = cfg->get("threads", threads);
    }
    require(threads >= 1, "--threads must be positive");
    auto t0 = std::chrono::steady_clock::now();

    if (sub == gb) {
      need(gb_out_opt);
      bc.seed = seed;
      bc.threads = threads;
      bc.ic = parse_ic_variant(gb_ic);
      auto ds = gen_burgers(bc);
      save_dataset(gb_out, ds);
      log_line("wrote " + std::to_string(ds.trajectories.size()) + " trajectories to " + gb_out);
    } else if (sub == sm) {
      need(sm_out_opt);
      ma.scheme = parse_scheme(sm_scheme);
      auto [u, t] = sm_state.load();
      (void)t;
      auto mon = monitor_from_state(u, sm_alpha, parse_boundary(sm_boundary));
      auto res = solve_ma_2d(mon, ma);
      auto mesh = transform_from_psi(res.psi);
      mmf::save_mesh(sm_out, mesh);
      auto mi = equidist_metrics(MovedMesh::identity(u.grid()), mon);
      auto mo = equidist_metrics(mesh, mon);
      if (!sm_report.empty()) {
        CsvWriter w(sm_report, {"identity_std", "identity_range", "oracle_std", "oracle_range", "converged",
                                "iterations", "residual", "tangled_cells"});
        w.row({fmt(mi.std), fmt(mi.range), fmt(mo.std), fmt(mo.range), res.converged ? "1" : "0",
               fmt(res.iterations), fmt(res.residual), fmt(cell_volumes(mesh).tangled)});
      }
      log_line("oracle std " + fmt(mo.std) + " (identity " + fmt(mi.std) + "), converged " +
               (res.converged ? "yes" : "no"));
    } else if (sub == es) {
      need(es_out_opt);
      std::vector<int> res;
      for (double r : parse_list(es_res)) res.push_back(static_cast<int>(r));
      const double k = es_sharp;
      auto rep = error_scaling_study([k](double x, double y) { return std::tanh(k * (x + y - 1)); }, res, es_alpha);
      CsvWriter w(es_out, {"cells", "err_uniform", "err_adapted", "b_functional"});
      for (const auto& r : rep.records) w.row({fmt(r.cells), fmt(r.err_uniform), fmt(r.err_adapted), fmt(r.bK)});
      log_line("log-log slope uniform " + fmt(rep.slope_uniform) + ", adapted " + fmt(rep.slope_adapted));
    } else if (sub == td) {
      need(td_data_opt);
      need(td_out_opt);
      dc.seed = seed;
      dc.weights.boundary = parse_boundary_mode(td_bmode);
      auto ds = load_dataset(td_data);
      dc.arch.grid_nx = ds.grid().nx();
      dc.arch.grid_ny = ds.grid().ny();
      auto r = train_dmm(dmm_samples(ds, "train", td_stride), dc, [](const DmmEpochRecord& e) {
        log_line("epoch " + std::to_string(e.epoch) + " loss " + fmt(e.loss.l) + " (eq " + fmt(e.loss.l_eq) +
                 ", bound " + fmt(e.loss.l_bound) + ", convex " + fmt(e.loss.l_convex) + ")");
      });
      save_dmm(td_out, r.model);
      write_dmm_history_csv(with_default(td_hist, td_out + ".history.csv"), r);
      log_line("loss " + fmt(r.initial.l) + " -> " + fmt(r.after_adam.l) + " (Adam) -> " + fmt(r.after_qn.l) +
               " (quasi-Newton)");
    } else if (sub == gm) {
      need(gm_model_opt);
      need(gm_out_opt);
      auto m = load_dmm(gm_model);
      auto [u, t] = gm_state.load();
      StructuredGrid target = gm_res > 0 ? StructuredGrid(gm_res + 1, gm_res + 1) : u.grid();
      mmf::save_mesh(gm_out, resolution_transfer(m, u, t, target));
    } else if (sub == em) {
      need(em_data_opt);
      need(em_model_opt);
      need(em_out_opt);
      auto ds = load_dataset(em_data);
      auto m = load_dmm(em_model);
      mec.oracle = !em_no_oracle;
      mec.seed = seed;
      auto s = eval_meshes(ds, em_split, m, mec, log_line);
      write_mesh_eval_csv(em_out, s);
      if (!em_blend.empty()) {
        require(!em_blend_out.empty(), "--blend needs --blend-out");
        auto rows = blend_sweep(dmm_samples(ds, em_split), m, parse_list(em_blend), mec.alpha_c, mec.boundary);
        CsvWriter w(em_blend_out, {"lambda", "std", "range"});
        for (const auto& r : rows) w.row({fmt(r.lambda), fmt(r.metrics.std), fmt(r.metrics.range)});
      }
    } else if (sub == pi) {
      need(pi_data_opt);
      need(pi_dmm_opt);
      need(pi_out_opt);
      pc.seed = seed;
      ic.itp.prior = parse_itp_prior(pi_prior);
      ic.itp.normalize = pi_normalize;
      ic.use_residual = !pi_no_res;
      auto ds = load_dataset(pi_data);
      auto dmm = load_dmm(pi_dmm);
      InterpFramework init(ic, ds.grid().num_nodes(), seed);
      auto r = pretrain_interp(init, interp_samples(ds, "train", pi_stride), dmm_mover(dmm), pc,
                               [](int e, double l) { log_line("epoch " + std::to_string(e) + " loss " + fmt(l)); });
      save_interp(pi_out, r.framework);
      write_history_csv(with_default(pi_hist, pi_out + ".history.csv"), r.initial, r.history);
      log_line("round-trip loss " + fmt(r.initial) + " -> " + fmt(r.final));
    } else if (sub == ts) {
      need(ts_data_opt);
      need(ts_dmm_opt);
      need(ts_interp_opt);
      need(ts_out_opt);
      sc.seed = seed;
      auto ds = load_dataset(ts_data);
      auto dmm = load_dmm(ts_dmm);
      auto fw = load_interp(ts_interp);
      require(fw.nodes() == ds.grid().num_nodes(), "interpolation checkpoint was built for another grid");
      auto init = make_mmpde(mp, fw, parse_variant(ts_variant), &dmm, seed);
      auto data = step_samples(split_trajectories(ds, "train", ts_max), ds.config.steps);
      auto r = train_solver(data, init, sc,
                            [](int e, double l) { log_line("epoch " + std::to_string(e) + " loss " + fmt(l)); });
      save_mmpde(ts_out, r.model);
      write_history_csv(with_default(ts_hist, ts_out + ".history.csv"), r.initial, r.history);
    } else if (sub == ro) {
      need(ro_model_opt);
      need(ro_init_opt);
      need(ro_out_opt);
      auto m = load_mmpde(ro_model);
      auto u0 = mmf::load_field(ro_init);
      require(u0.size() == m.interp.nodes(), "initial state does not match the model's grid");
      mmf::save_stack(ro_out, rollout(m, u0, ro_t0, ro_dt, ro_steps));
    } else if (sub == ab) {
      need(ab_data_opt);
      need(ab_dmm_opt);
      need(ab_interp_opt);
      need(ab_out_opt);
      ac.train.seed = seed;
      if (!ab_variants.empty()) ac.variants = parse_names(ab_variants);
      for (const auto& v : ac.variants) parse_variant(v);
      auto ds = load_dataset(ab_data);
      auto dmm = load_dmm(ab_dmm);
      auto fw = load_interp(ab_interp);
      write_ablation_csv(ab_out, run_ablation(ds, dmm, fw, ac, log_line));
    } else if (sub == pl) {
      require(cfg.has_value(), "pipeline needs --config");
      auto p = pipeline_config_from(*cfg);
      if (seed_opt->count()) p.seed = seed;
      if (threads_opt->count()) p.threads = threads;
      if (!pl_out.empty()) p.out_dir = pl_out;
      auto s = run_pipeline(p, log_line);
      for (const auto& [k, v] : s.metrics) std::cout << k << " = " << fmt(v) << "\n";
    }
    log_line(sub->get_name() + " finished in " +
             fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
  } catch (const std::exception& e) {
    std::cerr << "mamover: error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
