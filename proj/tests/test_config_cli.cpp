#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fccl/cli.hpp"
#include "fccl/config.hpp"
#include "json.hpp"

using namespace fccl;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(format = fccl-config/1
[experiment]
strategy = fcclplus
seed = 11
epochs = 2
local_rounds = 1
pretrain_epochs = 2
[optimizer]
collab_batch = 20
local_batch = 10
[data]
domains = 3
classes = 3
input_dim = 6
train_sizes = 40, 30, 50
test_size = 30
public_size = 60
[models]
client.0 = 8, 4
client.1 = 10, 5
client.2 = 6
)";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Workspace : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("fccl_test_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    config_ = dir_ / "tiny.cfg";
    std::ofstream(config_) << kTinyConfig;
  }
  void TearDown() override { fs::remove_all(dir_); }

  int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "fccl");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return cli_main(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }

  fs::path write_config(const std::string& name, const std::string& text) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }

  fs::path dir_;
  fs::path config_;
  std::ostringstream out_;
  std::ostringstream err_;
};

}  // namespace

TEST(ConfigText, ParsesSectionsAndComments) {
  const auto t = ConfigText::parse("format = fccl-config/1 # trailing\n\n[loss]\n  omega = 2.5\n");
  ASSERT_EQ(t.entries().size(), 2u);
  EXPECT_EQ(t.entries().at("loss.omega").value, "2.5");
  EXPECT_EQ(t.entries().at("loss.omega").line, 4);
}

TEST(ConfigText, SyntaxErrorsCarryLineNumbers) {
  try {
    ConfigText::parse("[loss]\nomega 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(ConfigText::parse("[loss\n"), ConfigError);
  EXPECT_THROW(ConfigText::parse("[]\n"), ConfigError);
  EXPECT_THROW(ConfigText::parse("[loss]\n= 3\n"), ConfigError);
  EXPECT_THROW(ConfigText::parse("[loss]\ntau = 1\ntau = 2\n"), ConfigError);
}

TEST(ConfigText, KeyResolution) {
  EXPECT_EQ(ConfigText::resolve_key("omega"), "loss.omega");
  EXPECT_EQ(ConfigText::resolve_key("loss.tau"), "loss.tau");
  EXPECT_EQ(ConfigText::resolve_key("seed"), "experiment.seed");
  EXPECT_EQ(ConfigText::resolve_key("models.client.3"), "models.client.3");
  EXPECT_THROW(ConfigText::resolve_key("gamma"), ConfigError);
}

TEST(BuildConfig, ValueErrors) {
  auto build = [](const std::string& s) { return build_config(ConfigText::parse(s)); };
  EXPECT_THROW(build("[loss]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(build("format = fccl-config/2\n"), ConfigError);
  EXPECT_THROW(build("[loss]\nomega = three\n"), ConfigError);
  EXPECT_THROW(build("[experiment]\nepochs = -1\n"), ConfigError);
  EXPECT_THROW(build("[experiment]\nparallel_clients = maybe\n"), ConfigError);
  EXPECT_THROW(build("[experiment]\nstrategy = fedprox\n"), ConfigError);
  EXPECT_THROW(build("[loss]\nfntd_variant = exact\n"), ConfigError);
  EXPECT_THROW(build("[data]\naugment = medium\n"), ConfigError);
  EXPECT_THROW(build("[models]\nactivation = gelu\n"), ConfigError);
  EXPECT_THROW(build("[models]\nclient.0 = 4\nclient.2 = 4\n"), ConfigError);
  EXPECT_THROW(build("[loss]\ntau = 0\n"), ConfigError);
  EXPECT_THROW(build("[data]\ntrain_sizes = 1, , 2\n"), ConfigError);
}

TEST(BuildConfig, DefaultFileMatchesBuiltInDefaults) {
  const FederationConfig f = load_config(std::string(FCCL_SOURCE_DIR) + "/configs/default.cfg");
  const FederationConfig d;
  EXPECT_EQ(f.strategy, Strategy::FcclPlus);
  EXPECT_EQ(f.seed, d.seed);
  EXPECT_EQ(f.epochs, 20u);
  EXPECT_EQ(f.local_rounds, 5u);
  EXPECT_EQ(f.pretrain_epochs, 30u);
  EXPECT_EQ(f.collab_batch, 100u);
  EXPECT_EQ(f.local_batch, 32u);
  EXPECT_EQ(f.lr, d.lr);
  EXPECT_EQ(f.lambda, 0.0051);
  EXPECT_EQ(f.mu, 0.02);
  EXPECT_EQ(f.omega, 3.0);
  EXPECT_EQ(f.tau, 3.0);
  EXPECT_EQ(f.scenario.train_sizes, (std::vector<std::size_t>{150, 80, 500, 300}));
  EXPECT_EQ(f.scenario.shift_strength, 0.5);
  EXPECT_EQ(f.augment, AugmentMode::Weak);
  ASSERT_EQ(f.models.size(), 4u);
  EXPECT_EQ(f.models[1].widths, (std::vector<std::size_t>{48, 12}));
  EXPECT_EQ(f.models[3].activation, Activation::Tanh);
}

TEST(BuildConfig, OverridesApply) {
  ConfigText t = ConfigText::parse(kTinyConfig);
  t.set("omega", "1.5");
  t.set("experiment.seed", "99");
  const FederationConfig c = build_config(t);
  EXPECT_EQ(c.omega, 1.5);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.scenario.seed, 99u);
}

TEST(ContentHash, KnownValues) {
  EXPECT_EQ(content_hash(""), "cbf29ce484222325");
  EXPECT_EQ(content_hash("a"), "af63dc4c8601ec8c");
}

TEST(OutputDir, DefaultsAndEnvironmentRoot) {
  ::unsetenv(kOutputRootEnv);
  EXPECT_EQ(resolve_output_dir(std::nullopt, "configs/default.cfg"), fs::path("runs/default"));
  ::setenv(kOutputRootEnv, "/tmp/root", 1);
  EXPECT_EQ(resolve_output_dir(std::nullopt, "x.cfg"), fs::path("/tmp/root/runs/x"));
  EXPECT_EQ(resolve_output_dir(std::string("out"), "x.cfg"), fs::path("/tmp/root/out"));
  EXPECT_EQ(resolve_output_dir(std::string("/abs"), "x.cfg"), fs::path("/abs"));
  ::unsetenv(kOutputRootEnv);
}

TEST_F(Workspace, RunWritesMetricsAndManifest) {
  const fs::path out = dir_ / "run";
  ASSERT_EQ(cli({"run", config_.string(), "--out", out.string()}), 0) << err_.str();
  ASSERT_TRUE(fs::exists(out / "metrics.csv"));
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(manifest["status"], "complete");
  EXPECT_EQ(manifest["config_hash"], content_hash(kTinyConfig));
  EXPECT_EQ(manifest["hash_algorithm"], "fnv1a-64");
  EXPECT_EQ(manifest["seed"], 11);
  EXPECT_EQ(manifest["strategy"], "fcclplus");
  EXPECT_EQ(manifest["artifact_version"], kArtifactVersion);
  EXPECT_TRUE(manifest["overrides"].empty());
  EXPECT_EQ(manifest["outputs"], nlohmann::json::array({"metrics.csv", "manifest.json"}));
  const std::string csv = slurp(out / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), metrics_csv_header(3));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 1 + 2 * 2);
  EXPECT_FALSE(fs::exists(out / "metrics.csv.tmp"));
}

TEST_F(Workspace, SameSeedSameBytesAndSeedOverrideChangesThem) {
  ASSERT_EQ(cli({"run", config_.string(), "--out", (dir_ / "a").string()}), 0);
  ASSERT_EQ(cli({"run", config_.string(), "--out", (dir_ / "b").string()}), 0);
  ASSERT_EQ(cli({"run", config_.string(), "--out", (dir_ / "c").string(), "--seed", "5"}), 0);
  EXPECT_EQ(slurp(dir_ / "a/metrics.csv"), slurp(dir_ / "b/metrics.csv"));
  EXPECT_NE(slurp(dir_ / "a/metrics.csv"), slurp(dir_ / "c/metrics.csv"));
  const auto manifest = nlohmann::json::parse(slurp(dir_ / "c/manifest.json"));
  EXPECT_EQ(manifest["seed"], 5);
  EXPECT_EQ(manifest["overrides"]["experiment.seed"], "5");
}

TEST_F(Workspace, CorrelationDumpsWhenEnabled) {
  std::string text = kTinyConfig;
  text.replace(text.find("epochs"), 0, "dump_correlation = true\n");
  const fs::path c2 = write_config("corr.cfg", text);
  ASSERT_EQ(cli({"run", c2.string(), "--out", (dir_ / "corr").string()}), 0) << err_.str();
  for (int e = 1; e <= 2; ++e)
    for (int i = 0; i < 3; ++i) {
      const fs::path p = dir_ / "corr" / "corr" / ("epoch_" + std::to_string(e) + "_client_" + std::to_string(i) + ".txt");
      ASSERT_TRUE(fs::exists(p)) << p;
      std::istringstream is(slurp(p));
      const Matrix m = read_correlation_matrix(is);
      EXPECT_EQ(m.rows(), 3u);
      EXPECT_EQ(m.cols(), 3u);
    }
}

TEST_F(Workspace, ExitCodes) {
  EXPECT_EQ(cli({"run", (dir_ / "missing.cfg").string()}), 1);
  EXPECT_EQ(cli({"run"}), 1);
  EXPECT_EQ(cli({"frobnicate"}), 1);
  EXPECT_EQ(cli({"--help"}), 0);
  EXPECT_EQ(cli({"--version"}), 0);
  EXPECT_EQ(out_.str(), std::string(kArtifactVersion) + "\n");
  const fs::path bad = write_config("bad.cfg", "[loss]\nomega = -1\n");
  EXPECT_EQ(cli({"run", bad.string(), "--out", (dir_ / "bad").string()}), 2);
  EXPECT_NE(err_.str().find("omega"), std::string::npos);
  const fs::path typo = write_config("typo.cfg", "[loss]\nomegaa = 1\n");
  EXPECT_EQ(cli({"run", typo.string(), "--out", (dir_ / "typo").string()}), 2);
}

TEST_F(Workspace, NumericAbortRecordedInManifest) {
  // A huge learning rate with identity activations drives logits to overflow.
  std::string text = kTinyConfig;
  text.replace(text.find("collab_batch"), 0, "lr = 1e300\n");
  text += "activation = identity\n";
  const fs::path p = write_config("overflow.cfg", text);
  const int code = cli({"run", p.string(), "--out", (dir_ / "nan").string()});
  EXPECT_EQ(code, 3) << err_.str();
  const auto manifest = nlohmann::json::parse(slurp(dir_ / "nan/manifest.json"));
  EXPECT_EQ(manifest["status"], "numeric_abort");
  EXPECT_TRUE(manifest.contains("diagnostic"));
}

TEST_F(Workspace, SweepSingleValueEqualsRun) {
  ASSERT_EQ(cli({"run", config_.string(), "--out", (dir_ / "run").string()}), 0);
  ASSERT_EQ(cli({"sweep", config_.string(), "--axis", "omega", "--values", "3", "--out", (dir_ / "sw").string()}), 0)
      << err_.str();
  EXPECT_EQ(slurp(dir_ / "run/metrics.csv"), slurp(dir_ / "sw/loss.omega=3/metrics.csv"));
}

TEST_F(Workspace, SweepGridAndSummary) {
  ASSERT_EQ(cli({"sweep", config_.string(), "--axis", "tau", "--values", "1,3", "--out", (dir_ / "sw").string()}), 0);
  std::istringstream is(slurp(dir_ / "sw/summary.csv"));
  std::string header, l1, l2, extra;
  std::getline(is, header);
  std::getline(is, l1);
  std::getline(is, l2);
  EXPECT_FALSE(std::getline(is, extra));
  EXPECT_EQ(header, "axis,value,status,intra_avg_last3,inter_avg_last3,forgetting_gap_mean,run_dir");
  EXPECT_EQ(l1.substr(0, 21), "loss.tau,1,complete,0");
  EXPECT_EQ(l2.substr(0, 20), "loss.tau,3,complete,");
  EXPECT_NE(l1.find(",loss.tau=1"), std::string::npos);
  for (const char* sub : {"loss.tau=1", "loss.tau=3"}) {
    const auto m = nlohmann::json::parse(slurp(dir_ / "sw" / sub / "manifest.json"));
    EXPECT_EQ(m["overrides"]["loss.tau"], std::string(sub).substr(9));
  }
}

TEST_F(Workspace, SweepRejectsBadAxisAndValuesBeforeRunning) {
  EXPECT_EQ(cli({"sweep", config_.string(), "--axis", "gamma", "--values", "1", "--out", (dir_ / "x").string()}), 1);
  EXPECT_EQ(cli({"sweep", config_.string(), "--axis", "format", "--values", "1", "--out", (dir_ / "x").string()}), 1);
  EXPECT_EQ(cli({"sweep", config_.string(), "--axis", "omega", "--values", "1,,2", "--out", (dir_ / "x").string()}), 1);
  EXPECT_EQ(cli({"sweep", config_.string(), "--axis", "tau", "--values", "1,-2", "--out", (dir_ / "x").string()}), 2);
  EXPECT_FALSE(fs::exists(dir_ / "x" / "loss.tau=1"));
}

TEST_F(Workspace, OutputRootEnvironmentVariable) {
  ::setenv(kOutputRootEnv, dir_.c_str(), 1);
  const int code = cli({"run", config_.string()});
  ::unsetenv(kOutputRootEnv);
  ASSERT_EQ(code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "runs" / "tiny" / "metrics.csv"));
}

TEST_F(Workspace, VerifySucceeds) {
  EXPECT_EQ(cli({"verify"}), 0) << out_.str();
  EXPECT_EQ(out_.str().find("FAIL"), std::string::npos);
}

TEST_F(Workspace, BinaryExitCodes) {
  const std::string bin = FCCL_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status(bin + " --help"), 0);
  EXPECT_EQ(status(bin + " run " + (dir_ / "nope.cfg").string()), 1);
  const fs::path bad = write_config("bad.cfg", "[loss]\ntau = 0\n");
  EXPECT_EQ(status(bin + " run " + bad.string() + " --out " + (dir_ / "b").string()), 2);
  EXPECT_EQ(status(bin + " run " + config_.string() + " --out " + (dir_ / "ok").string()), 0);
}
