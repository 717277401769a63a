#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "bcnf/experiment.hpp"

namespace fs = std::filesystem;
using namespace bcnf;

namespace {

const fs::path kConfigs = fs::path(BCNF_SOURCE_DIR) / "configs";

io::json smoke_json() { return io::read_json(kConfigs / "smoke.json"); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  return out;
}

class ExperimentTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("bcnf_exp_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
};

}  // namespace

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"smoke.json", "desk.json", "desk_scaling.json", "full.json"})
    EXPECT_NO_THROW(load_config(kConfigs / name)) << name;
  const auto desk = load_config(kConfigs / "desk.json");
  EXPECT_EQ(desk.runs, 5u);
  EXPECT_EQ(desk.settings.at(0).mcmc.thin_gap, 10u);
  EXPECT_FALSE(desk.generation.per_bin);
  EXPECT_EQ(desk.generation.size_for(10000), 100000u);
  const auto full = load_config(kConfigs / "full.json");
  EXPECT_EQ(full.settings.size(), 8u);
}

TEST(Config, UnknownKeyIsError) {
  auto j = smoke_json();
  j["data"]["n_trian"] = 5;
  try {
    parse_config(j);
    FAIL() << "no error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("data.n_trian"), std::string::npos);
  }
  auto k = smoke_json();
  k["settings"][0]["adammcmc"]["temperature"] = 1.0;
  EXPECT_THROW(parse_config(k), ConfigError);
  auto m = smoke_json();
  m["extra"] = true;
  EXPECT_THROW(parse_config(m), ConfigError);
}

TEST(Config, WrongTypesAndMethodsRejected) {
  auto j = smoke_json();
  j["data"]["runs"] = "two";
  EXPECT_THROW(parse_config(j), ConfigError);
  auto k = smoke_json();
  k["settings"][0]["method"] = "hmc";
  EXPECT_THROW(parse_config(k), ConfigError);
  auto v = smoke_json();
  v["settings"][1]["adammcmc"] = io::json::object();
  EXPECT_THROW(parse_config(v), ConfigError);
  auto d = smoke_json();
  d["settings"][1]["name"] = "mcmc";
  EXPECT_THROW(parse_config(d), ConfigError);
  auto r = smoke_json();
  r["data"]["runs"] = 1;
  EXPECT_THROW(parse_config(r), ConfigError);
}

TEST(Config, EchoesMcmcDefaults) {
  io::json j{{"settings", {{{"name", "m"}, {"method", "adammcmc"}}}}};
  const auto echoed = config_json(parse_config(j));
  const auto& m = echoed["settings"][0]["adammcmc"];
  EXPECT_EQ(m["sigma"].get<double>(), 0.1);
  EXPECT_EQ(m["sigma_delta"].get<double>(), 50.0);
  EXPECT_EQ(m["lambda"].get<double>(), 1.0);
  EXPECT_EQ(m["learning_rate"].get<double>(), 1e-3);
  EXPECT_EQ(m["thin_gap"].get<std::size_t>(), 100u);
  EXPECT_EQ(m["n_samples"].get<std::size_t>(), 10u);
  EXPECT_EQ(echoed["cfm"]["epochs"].get<std::size_t>(), 2500u);
  EXPECT_EQ(echoed["grids"], io::json({2, 5, 10, 32, 100}));
  EXPECT_EQ(echoed["generation"]["policy"], "fixed");
  EXPECT_EQ(echoed["generation"]["set_size"].get<std::size_t>(), 100000u);
}

TEST(Config, HashTracksContent) {
  const auto a = parse_config(smoke_json());
  auto j = smoke_json();
  j["seed"] = 8;
  EXPECT_NE(config_hash(a), config_hash(parse_config(j)));
  // Spelling out a default does not change the hash.
  auto k = smoke_json();
  k["settings"][0]["adammcmc"]["lambda"] = 1.0;
  EXPECT_EQ(config_hash(a), config_hash(parse_config(k)));
}

TEST_F(ExperimentTest, SmokePipelineProducesEveryFile) {
  const auto cfg = parse_config(smoke_json());
  const auto art = run_pipeline(cfg, dir_);
  const Layout L{dir_};
  EXPECT_TRUE(fs::exists(L.summary()));
  for (std::size_t n : cfg.grids) EXPECT_TRUE(fs::exists(L.grid(n)));
  for (std::size_t r = 0; r < cfg.runs; ++r) {
    EXPECT_TRUE(fs::exists(L.run(r) / "train.csv"));
    EXPECT_TRUE(fs::exists(io::bin_path(L.run(r) / "cfm")));
    EXPECT_TRUE(fs::exists(L.run(r) / "cfm_loss.csv"));
    EXPECT_TRUE(fs::exists(L.setting(r, "mcmc") / "acceptance.csv"));
    EXPECT_TRUE(fs::exists(L.setting(r, "vib") / "vib_loss.csv"));
    EXPECT_TRUE(fs::exists(io::bin_path(L.setting(r, "vib") / "posterior")));
    for (const auto& s : cfg.settings) {
      EXPECT_TRUE(fs::exists(io::bin_path(L.setting(r, s.name) / "ensemble")));
      for (std::size_t n : cfg.grids) EXPECT_TRUE(fs::exists(L.bin_stats(r, s.name, n)));
    }
  }
  std::size_t coverage_files = 0;
  for (const auto& f : art.files) coverage_files += f.filename().string().rfind("coverage_", 0) == 0;
  EXPECT_EQ(coverage_files, cfg.settings.size() * cfg.grids.size());
  for (const auto& s : cfg.settings)
    for (std::size_t r = 0; r < cfg.runs; ++r) {
      EXPECT_TRUE(fs::exists(L.amplification(s.name, r)));
      EXPECT_TRUE(fs::exists(L.closure(s.name, r)));
    }

  const auto manifest = io::read_json(L.manifest());
  EXPECT_EQ(manifest["status"], "complete");
  EXPECT_EQ(manifest["config_hash"], art.config_hash);
  EXPECT_EQ(manifest["config"]["settings"][0]["adammcmc"]["sigma_delta"].get<double>(), 50.0);
  const auto summary = io::read_json(L.summary());
  ASSERT_EQ(summary["settings"].size(), 2u);
  EXPECT_EQ(summary["settings"][0]["calibration"].size(), cfg.grids.size());

  const auto ens = io::load_ensemble(L.setting(0, "mcmc") / "ensemble", &cfg.net);
  EXPECT_EQ(ens.size(), 3u);
  const auto stats = io::read_bin_stats(L.bin_stats(0, "mcmc", 3));
  EXPECT_EQ(stats.set_size, 50u * 9u);
}

TEST_F(ExperimentTest, CompletedRunIsNotOverwrittenWithoutForce) {
  const auto cfg = parse_config(smoke_json());
  run_pipeline(cfg, dir_);
  EXPECT_THROW(run_pipeline(cfg, dir_), ConfigError);
  auto j = smoke_json();
  j["seed"] = 99;
  EXPECT_THROW(run_pipeline(parse_config(j), dir_), ConfigError);
  EXPECT_NO_THROW(run_pipeline(cfg, dir_, {true, nullptr}));
}

TEST_F(ExperimentTest, RerunIsByteIdentical) {
  const auto cfg = parse_config(smoke_json());
  run_pipeline(cfg, dir_ / "a");
  run_pipeline(cfg, dir_ / "b");
  const auto a = tree(dir_ / "a");
  const auto b = tree(dir_ / "b");
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, bytes] : a) {
    ASSERT_TRUE(b.count(name)) << name;
    EXPECT_EQ(bytes, b.at(name)) << name;
  }
}

TEST_F(ExperimentTest, ResumeSkipsCompletedStages) {
  const auto cfg = parse_config(smoke_json());
  run_pipeline(cfg, dir_ / "full");
  const auto reference = tree(dir_ / "full");

  // Simulate an interruption after run 0: drop the later stages from the
  // manifest and delete their outputs.
  run_pipeline(cfg, dir_ / "partial");
  const Layout L{dir_ / "partial"};
  auto manifest = io::read_json(L.manifest());
  io::json kept = io::json::array();
  for (const auto& s : manifest["completed"])
    if (s.get<std::string>().rfind("run1", 0) != 0) kept.push_back(s);
  manifest["completed"] = kept;
  manifest["status"] = "running";
  io::write_json(L.manifest(), manifest);
  fs::remove_all(L.run(1));
  fs::remove_all(dir_ / "partial" / "reports");
  fs::remove(L.summary());

  // A marker in a run 0 output survives only if its stage is skipped.
  const auto loss0 = L.run(0) / "cfm_loss.csv";
  const auto original = slurp(loss0);
  std::ofstream(loss0, std::ios::app) << "marker\n";
  run_pipeline(cfg, dir_ / "partial");
  EXPECT_EQ(slurp(loss0), original + "marker\n");
  std::ofstream(loss0, std::ios::binary | std::ios::trunc) << original;

  const auto resumed = tree(dir_ / "partial");
  ASSERT_EQ(resumed.size(), reference.size());
  for (const auto& [name, bytes] : reference) EXPECT_EQ(resumed.at(name), bytes) << name;
}

TEST_F(ExperimentTest, EmptyGridsOmitCalibration) {
  auto j = smoke_json();
  j["grids"] = io::json::array();
  const auto cfg = parse_config(j);
  const auto art = run_pipeline(cfg, dir_);
  const auto summary = io::read_json(Layout{dir_}.summary());
  for (const auto& s : summary["settings"]) EXPECT_FALSE(s.contains("calibration"));
  EXPECT_FALSE(fs::exists(dir_ / "reports"));
  EXPECT_FALSE(fs::exists(dir_ / "grids"));
  EXPECT_EQ(art.files.size(), 1u);
}

TEST_F(ExperimentTest, FailureIsRecordedInManifest) {
  auto j = smoke_json();
  j["cfm"]["learning_rate"] = 1e300;
  EXPECT_THROW(run_pipeline(parse_config(j), dir_), NumericalFault);
  const auto manifest = io::read_json(Layout{dir_}.manifest());
  EXPECT_EQ(manifest["status"], "failed");
  EXPECT_TRUE(manifest.contains("error"));
}

// -- command-line driver ---------------------------------------------------------

class CliTest : public ExperimentTest {
 protected:
  int run(const std::string& args) {
    const char* cli = std::getenv("BCNF_CLI");
    if (!cli) return -1;
    const std::string cmd = std::string(cli) + " " + args + " >" + (dir_ / "stdout").string() +
                            " 2>" + (dir_ / "stderr").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string smoke() const { return (kConfigs / "smoke.json").string(); }
};

TEST_F(CliTest, ExitCodes) {
  if (!std::getenv("BCNF_CLI")) GTEST_SKIP() << "BCNF_CLI not set";
  const auto out = dir_.string();
  EXPECT_EQ(run("sample-data --config " + smoke() + " --out " + out), 0);
  EXPECT_TRUE(fs::exists(dir_ / "samples.csv"));
  // Refuses to overwrite without --force.
  EXPECT_EQ(run("sample-data --config " + smoke() + " --out " + out), 1);
  EXPECT_EQ(run("sample-data --config " + smoke() + " --out " + out + " --force"), 0);

  auto bad = smoke_json();
  bad["bogus"] = 1;
  io::write_json(dir_ / "bad.json", bad);
  EXPECT_EQ(run("sample-data --config " + (dir_ / "bad.json").string() + " --out " + out), 1);
  EXPECT_NE(slurp(dir_ / "stderr").find("bogus"), std::string::npos);
  EXPECT_EQ(run("no-such-command"), 1);

  auto diverge = smoke_json();
  diverge["cfm"]["learning_rate"] = 1e300;
  io::write_json(dir_ / "diverge.json", diverge);
  EXPECT_EQ(run("train --config " + (dir_ / "diverge.json").string() + " --data " +
                (dir_ / "samples.csv").string() + " --out " + out),
            2);
  EXPECT_EQ(run("train --config " + smoke() + " --data " + (dir_ / "samples.csv").string() +
                " --out " + out),
            0);
  EXPECT_TRUE(fs::exists(io::bin_path(dir_ / "cfm")));
}

TEST_F(CliTest, PipelineSubcommand) {
  if (!std::getenv("BCNF_CLI")) GTEST_SKIP() << "BCNF_CLI not set";
  const auto out = (dir_ / "run").string();
  EXPECT_EQ(run("pipeline --config " + smoke() + " --out " + out), 0);
  EXPECT_TRUE(fs::exists(dir_ / "run" / "summary.json"));
  EXPECT_EQ(run("pipeline --config " + smoke() + " --out " + out), 1);
  EXPECT_EQ(run("pipeline --out " + out), 1);
}
