#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mamover/pipeline.hpp"

using namespace mamover;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mamover_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string first_line(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  return line;
}

const char* kSmoke = R"(# smoke run
trajectories = 2
solve_res = 32
target_res = 8
steps = 4
dmm_epochs = 5
dmm_qn_iters = 10
interp_epochs = 5
solver_epochs = 5
mp_k = 8
interp_k = 8
rollout_steps = 3
)";

std::string cli() {
  const char* p = std::getenv("MAMOVER_CLI");
  return p ? p : "";
}

int run(const std::string& cmd, const fs::path& log) {
  return std::system((cmd + " > " + log.string() + " 2>&1").c_str());
}

}  // namespace

TEST(Config, ParsesCommentsAndBlankLines) {
  auto c = Config::parse_string("# header\n\n a = 1  # trailing\nname = two words\nflag = true\n");
  EXPECT_EQ(c.get("a", 0), 1);
  EXPECT_EQ(c.get("name", std::string()), "two words");
  EXPECT_TRUE(c.get("flag", false));
  EXPECT_EQ(c.get("missing", 2.5), 2.5);
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(Config::parse_string("novalue\n"), Error);
  EXPECT_THROW(Config::parse_string("= 3\n"), Error);
  EXPECT_THROW(Config::parse_string("a = 1\na = 2\n"), Error);
  auto c = Config::parse_string("n = 3x\nb = maybe\n");
  EXPECT_THROW(c.get("n", 0), Error);
  EXPECT_THROW(c.get("b", false), Error);
}

TEST(Config, UnknownKeyIsNamed) {
  auto c = Config::parse_string("trajectories = 2\nsolver_epochz = 4\n");
  try {
    pipeline_config_from(c);
    FAIL() << "unknown key accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("solver_epochz"), std::string::npos) << e.what();
  }
}

TEST(Config, PipelineKeysReachTheStages) {
  auto p = pipeline_config_from(Config::parse_string("dmm_epochs = 7\nvariant = blend:0.4\nmp_k = 9\nseed = 5\n"));
  apply_globals(p);
  EXPECT_EQ(p.dmm.epochs, 7);
  EXPECT_EQ(p.variant, "blend:0.4");
  EXPECT_EQ(p.mp.k, 9);
  EXPECT_EQ(p.dmm.seed, 5u);
  EXPECT_EQ(p.solver.seed, 5u);
  EXPECT_THROW(pipeline_config_from(Config::parse_string("variant = sideways\n")), Error);
}

TEST(Pipeline, SmokeRunCompletesAndOutputsParse) {
  auto dir = scratch("pipeline_smoke");
  auto p = pipeline_config_from(Config::parse_string(kSmoke));
  p.out_dir = (dir / "run").string();
  auto s = run_pipeline(p);
  auto out = dir / "run";
  auto ds = load_dataset((out / "data").string());
  EXPECT_EQ(ds.trajectories.size(), 2u);
  EXPECT_EQ(ds.grid().nx(), 9);
  auto dmm = load_dmm((out / "dmm.ckpt").string());
  auto fw = load_interp((out / "interp.ckpt").string());
  auto model = load_mmpde((out / "solver.ckpt").string());
  EXPECT_EQ(fw.nodes(), 81u);
  EXPECT_EQ(model.interp.nodes(), 81u);
  auto traj = mmf::load_stack((out / "rollout.mmf").string());
  EXPECT_EQ(traj.size(), 4u);
  EXPECT_EQ(first_line(out / "summary.csv"), "metric,value");
  EXPECT_EQ(first_line(out / "dmm_history.csv"), "stage,epoch,l,l_eq,l_bound,l_convex");
  EXPECT_EQ(first_line(out / "mesh_eval.csv").rfind("trajectory,frame,", 0), 0u);
  EXPECT_EQ(first_line(out / "solver_history.csv"), "epoch,loss");
  EXPECT_TRUE(std::isfinite(s.at("test_rollout_mse")));
  EXPECT_LE(s.at("dmm_loss_after_qn"), s.at("dmm_loss_after_adam"));
  fs::remove_all(dir);
}

TEST(Pipeline, StageFailureNamesTheStage) {
  auto dir = scratch("pipeline_fail");
  auto p = pipeline_config_from(Config::parse_string(kSmoke));
  p.data.trajectories = 1;  // no test split
  p.out_dir = (dir / "run").string();
  try {
    run_pipeline(p);
    FAIL() << "pipeline without a test split succeeded";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("stage `eval-mesh`"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Cli, InvalidConfigKeyIsRejectedByName) {
  if (cli().empty()) GTEST_SKIP() << "MAMOVER_CLI not set";
  auto dir = scratch("cli_badkey");
  {
    std::ofstream os(dir / "bad.cfg");
    os << kSmoke << "dmm_epoch = 3\n";
  }
  int rc = run(cli() + " pipeline --config " + (dir / "bad.cfg").string() + " --out-dir " + (dir / "run").string(),
               dir / "log");
  EXPECT_NE(rc, 0);
  EXPECT_NE(slurp(dir / "log").find("dmm_epoch"), std::string::npos) << slurp(dir / "log");
  {
    std::ofstream os(dir / "sub.cfg");
    os << "trajectories = 1\nwrong_key = 2\n";
  }
  rc = run(cli() + " gen-burgers --config " + (dir / "sub.cfg").string() + " --out " + (dir / "d").string(),
           dir / "log2");
  EXPECT_NE(rc, 0);
  EXPECT_NE(slurp(dir / "log2").find("wrong_key"), std::string::npos) << slurp(dir / "log2");
  fs::remove_all(dir);
}

TEST(Cli, ConfigSuppliesSubcommandOptionsAndFlagsOverride) {
  if (cli().empty()) GTEST_SKIP() << "MAMOVER_CLI not set";
  auto dir = scratch("cli_cfg");
  {
    std::ofstream os(dir / "gen.cfg");
    os << "trajectories = 3\nsolve_res = 16\ntarget_res = 8\nsteps = 2\n";
  }
  auto base = cli() + " gen-burgers --config " + (dir / "gen.cfg").string();
  ASSERT_EQ(run(base + " --out " + (dir / "a").string(), dir / "log"), 0) << slurp(dir / "log");
  ASSERT_EQ(run(base + " --trajectories 2 --out " + (dir / "b").string(), dir / "log"), 0) << slurp(dir / "log");
  EXPECT_EQ(load_dataset((dir / "a").string()).trajectories.size(), 3u);
  EXPECT_EQ(load_dataset((dir / "b").string()).trajectories.size(), 2u);
  EXPECT_EQ(load_dataset((dir / "a").string()).grid().nx(), 9);
  fs::remove_all(dir);
}

TEST(Cli, MissingRequiredOptionFails) {
  if (cli().empty()) GTEST_SKIP() << "MAMOVER_CLI not set";
  auto dir = scratch("cli_missing");
  EXPECT_NE(run(cli() + " train-dmm --epochs 1", dir / "log"), 0);
  EXPECT_NE(slurp(dir / "log").find("--data"), std::string::npos);
  fs::remove_all(dir);
}
