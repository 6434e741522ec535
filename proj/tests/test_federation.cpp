#include <gtest/gtest.h>

#include <cmath>

#include "fccl/federation.hpp"
#include "fccl/verify.hpp"

using namespace fccl;

namespace {

FederationConfig homogeneous_config(Strategy s = Strategy::FcclPlus) {
  FederationConfig cfg = tiny_config();
  cfg.strategy = s;
  cfg.models = std::vector<ModelSpec>(3, ModelSpec{{7, 4}, Activation::Tanh});
  return cfg;
}

// Two clients, so the server mean of identical outputs is exact ((a + a) / 2 == a).
// With more clients the mean can differ in the last bit, and Adam turns such a
// residual gradient into a full-size step.
FederationConfig identical_pair_config(Strategy s = Strategy::FcclPlus) {
  FederationConfig cfg = homogeneous_config(s);
  cfg.scenario.domains = 2;
  cfg.scenario.train_sizes = {40, 30};
  cfg.models.pop_back();
  return cfg;
}

Scenario scenario_of(const FederationConfig& cfg) {
  ScenarioConfig sc = cfg.scenario;
  sc.seed = cfg.seed;
  return generate_scenario(sc);
}

std::vector<ClientState> identical_clients(const FederationConfig& cfg) {
  auto clients = make_clients(cfg);
  for (auto& c : clients) c.model = clients.front().model;
  return clients;
}

void prime_snapshots(std::vector<ClientState>& clients, int tag = 0) {
  for (auto& c : clients) {
    c.teacher.emplace(c.model, tag);
    c.pretrained.emplace(c.model, tag);
  }
}

}  // namespace

TEST(Strategy, NamesRoundTrip) {
  for (Strategy s : {Strategy::FcclPlus, Strategy::Fccl, Strategy::FedMd, Strategy::FedDf, Strategy::PlainKd,
                     Strategy::Solo, Strategy::Ewc, Strategy::FedAvgHomog})
    EXPECT_EQ(strategy_from_string(to_string(s)), s);
  EXPECT_THROW(strategy_from_string("fedprox"), ConfigError);
}

TEST(Validate, RejectsBadConfigs) {
  EXPECT_NO_THROW(validate(tiny_config()));
  FederationConfig c = tiny_config();
  c.models.pop_back();
  EXPECT_THROW(validate(c), ConfigError);
  c = tiny_config();
  c.lr = 0.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = tiny_config();
  c.tau = -1.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = tiny_config();
  c.collab_batch = 1;
  EXPECT_THROW(validate(c), ConfigError);
  c = tiny_config();
  c.scenario.train_sizes = {40, 0, 50};
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Validate, PretrainedStrategiesNeedPretraining) {
  for (Strategy s : {Strategy::Fccl, Strategy::Ewc}) {
    FederationConfig c = tiny_config();
    c.strategy = s;
    c.pretrain_epochs = 0;
    EXPECT_THROW(validate(c), ConfigError);
    EXPECT_THROW(run_experiment(c), ConfigError);
  }
  FederationConfig c = tiny_config();
  c.pretrain_epochs = 0;
  EXPECT_NO_THROW(validate(c));
}

TEST(Validate, FedAvgNeedsIdenticalArchitectures) {
  FederationConfig c = tiny_config();
  c.strategy = Strategy::FedAvgHomog;
  EXPECT_THROW(validate(c), ConfigError);
  auto clients = make_clients(c);
  EXPECT_THROW(run_strategy_fedavg_homog(clients, c, 1), ConfigError);
}

TEST(CollaborativePhase, SingleClientRejected) {
  FederationConfig cfg = tiny_config();
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  clients.erase(clients.begin() + 1, clients.end());
  EXPECT_THROW(run_collaborative_phase(clients, s.public_pool, cfg, 1), ConfigError);
}

TEST(CollaborativePhase, SoloSkipsPublicData) {
  FederationConfig cfg = tiny_config();
  cfg.strategy = Strategy::Solo;
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  const auto before = clients;
  const auto loss = run_collaborative_phase(clients, s.public_pool, cfg, 1);
  EXPECT_EQ(loss, std::vector<double>(3, 0.0));
  for (std::size_t i = 0; i < clients.size(); ++i) EXPECT_TRUE(clients[i].model == before[i].model);
}

TEST(CollaborativePhase, ChangesModels) {
  FederationConfig cfg = tiny_config();
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  const auto before = clients;
  const auto loss = run_collaborative_phase(clients, s.public_pool, cfg, 1);
  for (std::size_t i = 0; i < clients.size(); ++i) {
    EXPECT_FALSE(clients[i].model == before[i].model);
    EXPECT_TRUE(std::isfinite(loss[i]));
    EXPECT_GT(loss[i], 0.0);
  }
}

TEST(CollaborativePhase, IdenticalClientsHaveZeroSimilarityLoss) {
  // With identical models every S_i equals the average, so adding ω·FISL changes nothing.
  FederationConfig with = identical_pair_config();
  FederationConfig without = with;
  without.use_fisl = false;
  const Scenario s = scenario_of(with);
  auto a = identical_clients(with);
  auto b = identical_clients(without);
  const auto la = run_collaborative_phase(a, s.public_pool, with, 1);
  const auto lb = run_collaborative_phase(b, s.public_pool, without, 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(la[i], lb[i], 1e-12);
  EXPECT_LE(parameter_distance(a, b), 1e-12);
}

TEST(CollaborativePhase, ZeroOmegaMatchesFccmOnly) {
  FederationConfig zero = tiny_config();
  zero.omega = 0.0;
  FederationConfig off = tiny_config();
  off.use_fisl = false;
  const Scenario s = scenario_of(zero);
  auto a = make_clients(zero);
  auto b = make_clients(off);
  run_collaborative_phase(a, s.public_pool, zero, 1);
  run_collaborative_phase(b, s.public_pool, off, 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].model == b[i].model);
}

TEST(CollaborativePhase, SerialAndParallelAgree) {
  for (Strategy st : {Strategy::FcclPlus, Strategy::FedDf, Strategy::FedMd}) {
    FederationConfig cfg = tiny_config();
    cfg.strategy = st;
    const Scenario s = scenario_of(cfg);
    auto a = make_clients(cfg);
    auto b = make_clients(cfg);
    run_collaborative_phase(a, s.public_pool, cfg, 1, Execution::Serial);
    run_collaborative_phase(b, s.public_pool, cfg, 1, Execution::Parallel);
    EXPECT_LE(parameter_distance(a, b), 1e-12) << to_string(st);
  }
}

TEST(CollaborativePhase, ConsensusIsFixedPointForLogitMatching) {
  for (Strategy st : {Strategy::FedDf, Strategy::FedMd}) {
    FederationConfig cfg = identical_pair_config(st);
    const Scenario s = scenario_of(cfg);
    auto clients = identical_clients(cfg);
    const auto before = clients;
    const auto loss = run_collaborative_phase(clients, s.public_pool, cfg, 1);
    for (std::size_t i = 0; i < clients.size(); ++i) {
      EXPECT_NEAR(loss[i], 0.0, 1e-12);
      EXPECT_TRUE(clients[i].model == before[i].model) << to_string(st);
    }
  }
}

TEST(CollaborativePhase, ZeroPassesIsNoOp) {
  FederationConfig cfg = tiny_config();
  cfg.collab_passes = 0;
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  const auto before = clients;
  run_collaborative_phase(clients, s.public_pool, cfg, 1);
  for (std::size_t i = 0; i < clients.size(); ++i) EXPECT_TRUE(clients[i].model == before[i].model);
}

TEST(LocalPhase, ZeroRoundsKeepsModelAndRefreshesTeacher) {
  FederationConfig cfg = tiny_config();
  cfg.local_rounds = 0;
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  prime_snapshots(clients);
  const ClientModel before = clients[0].model;
  EXPECT_EQ(run_local_phase(clients[0], s.domains[0], cfg, 1), 0.0);
  EXPECT_TRUE(clients[0].model == before);
  ASSERT_TRUE(clients[0].teacher.has_value());
  EXPECT_EQ(clients[0].teacher->epoch_tag(), 1);
  EXPECT_TRUE(clients[0].teacher->model() == before);
}

TEST(LocalPhase, TeacherMustComeFromPreviousEpoch) {
  FederationConfig cfg = tiny_config();
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  prime_snapshots(clients, 0);
  EXPECT_THROW(run_local_phase(clients[0], s.domains[0], cfg, 2), StateError);
  EXPECT_NO_THROW(run_local_phase(clients[0], s.domains[0], cfg, 1));
  EXPECT_EQ(clients[0].teacher->epoch_tag(), 1);
  EXPECT_NO_THROW(run_local_phase(clients[0], s.domains[0], cfg, 2));
}

TEST(LocalPhase, TeacherIsFrozenCopy) {
  FederationConfig cfg = tiny_config();
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  prime_snapshots(clients, 0);
  const Snapshot old_teacher = *clients[0].teacher;
  const ClientModel start = clients[0].model;
  run_local_phase(clients[0], s.domains[0], cfg, 1);
  EXPECT_TRUE(old_teacher.model() == start);
  EXPECT_FALSE(clients[0].model == start);
  EXPECT_TRUE(clients[0].teacher->model() == clients[0].model);
}

TEST(LocalPhase, MissingSnapshotsRejected) {
  FederationConfig cfg = tiny_config();
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  EXPECT_THROW(run_local_phase(clients[0], s.domains[0], cfg, 1), ConfigError);
  cfg.strategy = Strategy::Ewc;
  EXPECT_THROW(run_local_phase(clients[0], s.domains[0], cfg, 1), ConfigError);
  cfg.strategy = Strategy::Solo;
  EXPECT_NO_THROW(run_local_phase(clients[0], s.domains[0], cfg, 1));
}

TEST(LocalPhase, EwcEstimatesNonNegativeFisher) {
  FederationConfig cfg = tiny_config();
  cfg.strategy = Strategy::Ewc;
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  prime_snapshots(clients);
  run_local_phase(clients[0], s.domains[0], cfg, 1);
  ASSERT_EQ(clients[0].fisher.size(), clients[0].model.parameters().size());
  double total = 0.0;
  for (const auto& f : clients[0].fisher)
    for (double v : f.data()) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
  EXPECT_GT(total, 0.0);
}

TEST(LocalPhase, NonFiniteLossAborts) {
  FederationConfig cfg = tiny_config();
  const Scenario s = scenario_of(cfg);
  auto clients = make_clients(cfg);
  clients[0].model.mutable_parameters()[0]->data()[0] = NAN;
  prime_snapshots(clients);
  try {
    run_local_phase(clients[0], s.domains[0], cfg, 1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.diagnostic()).find("client 0"), std::string::npos);
  }
  EXPECT_THROW(run_collaborative_phase(clients, s.public_pool, cfg, 1), NumericError);
}

TEST(FedAvg, OppositeParametersAverageToZero) {
  FederationConfig cfg = homogeneous_config(Strategy::FedAvgHomog);
  auto clients = make_clients(cfg);
  clients.erase(clients.begin() + 2, clients.end());
  clients[1].model = clients[0].model;
  for (Matrix* p : clients[1].model.mutable_parameters()) *p *= -1.0;
  run_strategy_fedavg_homog(clients, cfg, 1);
  for (const auto& c : clients)
    for (const Matrix* p : c.model.parameters())
      for (double v : p->data()) EXPECT_EQ(v, 0.0);
}

TEST(FedAvg, IdenticalClientsUnchanged) {
  FederationConfig cfg = homogeneous_config(Strategy::FedAvgHomog);
  cfg.models = std::vector<ModelSpec>(4, ModelSpec{{7, 4}, Activation::Tanh});
  auto clients = identical_clients(cfg);
  const ClientModel before = clients[0].model;
  run_strategy_fedavg_homog(clients, cfg, 1);
  // Four equal addends and a power-of-two divisor are exact.
  for (const auto& c : clients) EXPECT_TRUE(c.model == before);
}

TEST(Experiment, LogLayout) {
  FederationConfig cfg = tiny_config();
  const auto res = run_experiment(cfg);
  ASSERT_EQ(res.log.size(), 1 + 2 * cfg.epochs);
  EXPECT_EQ(res.log[0].epoch, 0);
  EXPECT_EQ(res.log[0].phase, Phase::PostLocal);
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    EXPECT_EQ(res.log[2 * e - 1].epoch, static_cast<int>(e));
    EXPECT_EQ(res.log[2 * e - 1].phase, Phase::PostCollab);
    EXPECT_EQ(res.log[2 * e].phase, Phase::PostLocal);
  }
  for (const auto& r : res.log) {
    ASSERT_EQ(r.intra_acc.size(), 3u);
    for (double a : r.intra_acc) EXPECT_TRUE(a >= 0.0 && a <= 1.0);
  }
  for (const auto& c : res.clients) EXPECT_EQ(c.teacher->epoch_tag(), static_cast<int>(cfg.epochs));
}

TEST(Experiment, ZeroEpochsGivesPretrainMetricsOnly) {
  FederationConfig cfg = tiny_config();
  cfg.epochs = 0;
  const auto res = run_experiment(cfg);
  ASSERT_EQ(res.log.size(), 1u);
  FederationConfig longer = tiny_config();
  const auto full = run_experiment(longer);
  EXPECT_EQ(res.log[0].intra_acc, full.log[0].intra_acc);
  EXPECT_EQ(res.log[0].inter_acc, full.log[0].inter_acc);
}

TEST(Experiment, EveryStrategyIsDeterministic) {
  for (Strategy st : {Strategy::FcclPlus, Strategy::Fccl, Strategy::FedMd, Strategy::FedDf, Strategy::PlainKd,
                      Strategy::Solo, Strategy::Ewc}) {
    FederationConfig cfg = tiny_config();
    cfg.strategy = st;
    const auto a = run_experiment(cfg);
    const auto b = run_experiment(cfg);
    EXPECT_EQ(metrics_csv_string(a), metrics_csv_string(b)) << to_string(st);
  }
}

TEST(Experiment, SerialAndParallelRunsAgree) {
  const CheckResult r = check_determinism();
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Experiment, SeedChangesOutcome) {
  FederationConfig a = tiny_config();
  FederationConfig b = tiny_config();
  b.seed = 12;
  EXPECT_NE(metrics_csv_string(run_experiment(a)), metrics_csv_string(run_experiment(b)));
}

TEST(Experiment, CorrelationDumpPerEpochAndClient) {
  FederationConfig cfg = tiny_config();
  cfg.dump_correlation = true;
  const auto res = run_experiment(cfg);
  ASSERT_EQ(res.correlations.size(), cfg.epochs * 3);
  for (const auto& d : res.correlations) {
    EXPECT_EQ(d.corr.m.rows(), 3u);
    EXPECT_EQ(d.corr.m.cols(), 3u);
    for (double v : d.corr.m.data()) EXPECT_LE(std::abs(v), 1.0 + 1e-9);
  }
}

TEST(Experiment, FedAvgHomogKeepsClientsInSync) {
  FederationConfig cfg = homogeneous_config(Strategy::FedAvgHomog);
  cfg.local_rounds = 0;
  const auto res = run_experiment(cfg);
  for (std::size_t i = 1; i < res.clients.size(); ++i) EXPECT_TRUE(res.clients[i].model == res.clients[0].model);
}
