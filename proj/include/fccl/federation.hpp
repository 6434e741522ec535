#pragma once

// Communication-epoch orchestration: a collaborative phase on unlabeled public
// batches followed by a local phase on each client's private data, with the
// baseline strategies plugged in at both points.

#include <cmath>
#include <exception>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fccl/data.hpp"
#include "fccl/losses.hpp"
#include "fccl/metrics.hpp"
#include "fccl/models.hpp"

namespace fccl {

enum class Strategy { FcclPlus, Fccl, FedMd, FedDf, PlainKd, Solo, Ewc, FedAvgHomog };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::FcclPlus: return "fcclplus";
    case Strategy::Fccl: return "fccl";
    case Strategy::FedMd: return "fedmd";
    case Strategy::FedDf: return "feddf";
    case Strategy::PlainKd: return "plain_kd";
    case Strategy::Solo: return "solo";
    case Strategy::Ewc: return "ewc";
    case Strategy::FedAvgHomog: return "fedavg_homog";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  for (Strategy v : {Strategy::FcclPlus, Strategy::Fccl, Strategy::FedMd, Strategy::FedDf, Strategy::PlainKd,
                     Strategy::Solo, Strategy::Ewc, Strategy::FedAvgHomog}) {
    if (s == to_string(v)) return v;
  }
  throw ConfigError("unknown strategy '" + s + "'");
}

struct FederationConfig {
  Strategy strategy = Strategy::FcclPlus;
  std::uint64_t seed = 7;
  std::size_t epochs = 20;          // E
  std::size_t local_rounds = 5;     // T, passes over private data per epoch
  std::size_t collab_passes = 1;    // passes over the public pool per epoch
  std::size_t pretrain_epochs = 30;
  std::size_t collab_batch = 100;
  std::size_t local_batch = 32;
  double lr = 0.001;

  double lambda = kDefaultLambda;
  double mu = kDefaultMu;
  double omega = kDefaultOmega;
  double tau = kDefaultTau;
  FntdVariant fntd_variant = FntdVariant::Renormalized;
  bool use_fisl = true;
  bool kd_tau_squared = true;
  bool fccl_pretrained_term = true;
  double ewc_lambda = 0.7;

  AugmentMode augment = AugmentMode::Weak;
  bool parallel_clients = false;
  bool dump_correlation = false;

  ScenarioConfig scenario;
  std::vector<ModelSpec> models{{{32, 8}}, {{48, 12}}, {{24, 10}}, {{40, 16}}};
};

inline void validate(const FederationConfig& cfg) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (cfg.models.size() != cfg.scenario.domains) {
    fail("models: " + std::to_string(cfg.models.size()) + " client specs for " + std::to_string(cfg.scenario.domains) +
         " domains");
  }
  if (cfg.scenario.domains < 2) fail("data.domains: need at least 2 clients");
  if (cfg.collab_batch < 2 || cfg.local_batch < 2) fail("optimizer: batch sizes must be at least 2");
  if (!(cfg.lr > 0.0)) fail("optimizer.lr must be positive");
  if (!(cfg.lambda > 0.0)) fail("loss.lambda must be positive");
  if (!(cfg.mu > 0.0)) fail("loss.mu must be positive");
  if (!(cfg.tau > 0.0)) fail("loss.tau must be positive");
  if (cfg.omega < 0.0) fail("loss.omega must be non-negative");
  if (cfg.ewc_lambda < 0.0) fail("loss.ewc_lambda must be non-negative");
  if ((cfg.strategy == Strategy::Fccl || cfg.strategy == Strategy::Ewc) && cfg.pretrain_epochs == 0) {
    fail(std::string("experiment.pretrain_epochs must be > 0 for strategy ") + to_string(cfg.strategy));
  }
  for (const auto& m : cfg.models) {
    if (m.widths.empty()) fail("models: empty layer list");
    for (std::size_t w : m.widths)
      if (w == 0) fail("models: layer widths must be positive");
  }
  if (cfg.strategy == Strategy::FedAvgHomog) {
    for (const auto& m : cfg.models) {
      if (m.widths != cfg.models.front().widths || m.activation != cfg.models.front().activation) {
        fail("fedavg_homog requires structurally identical client models");
      }
    }
  }
  try {
    validate(cfg.scenario);
  } catch (const ParameterError& e) {
    fail(std::string("data: ") + e.what());
  }
}

struct ClientState {
  std::size_t client_id = 0;
  std::size_t domain_id = 0;
  ClientModel model;
  AdamState adam_collab;
  AdamState adam_local;
  std::optional<Snapshot> teacher;     // θ^{e−1}
  std::optional<Snapshot> pretrained;  // θ*
  std::vector<Matrix> fisher;          // diagonal Fisher at θ*, EWC only
};

enum class Execution { Serial, Parallel };

namespace detail {

/// Runs fn(i) for i in [0, n); on Parallel each index gets its own thread.
/// The first exception (lowest index) is rethrown after all work finishes.
inline void for_each_client(std::size_t n, Execution mode, const std::function<void(std::size_t)>& fn) {
  if (mode == Execution::Serial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> workers;
  workers.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    workers.emplace_back([&, i] {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline void require_finite(const LossWithGrad& loss, const std::string& where) {
  bool ok = std::isfinite(loss.value);
  for (const auto& [name, g] : loss.grads) ok = ok && g.all_finite();
  if (!ok) {
    std::ostringstream diag;
    diag << where << ": loss=" << loss.value;
    for (const auto& [name, g] : loss.grads) diag << " grad[" << name << "].finite=" << g.all_finite();
    throw NumericError("non-finite loss in " + where, diag.str());
  }
}

inline std::string where(const char* phase, Strategy s, std::size_t epoch, std::size_t client) {
  return std::string(phase) + " phase, strategy " + to_string(s) + ", epoch " + std::to_string(epoch) + ", client " +
         std::to_string(client);
}

enum class PublicObjective { Collaborative, FedDf, FedMd };

inline Execution execution_of(const FederationConfig& cfg) {
  return cfg.parallel_clients ? Execution::Parallel : Execution::Serial;
}

/// One public-data phase. For every batch, all clients run forward first; the
/// server averages Z (and S) from those pre-step outputs; only then does each
/// client take its Adam step. Returns the mean loss per client.
inline std::vector<double> run_public_phase(std::vector<ClientState>& clients, const PublicPool& pool,
                                            const FederationConfig& cfg, std::size_t epoch, PublicObjective objective,
                                            Execution mode) {
  const std::size_t k = clients.size();
  if (k < 2) throw ConfigError("collaborative phase needs at least 2 clients");
  const bool need_similarity = objective == PublicObjective::Collaborative && cfg.use_fisl && cfg.omega > 0.0;
  std::vector<double> loss_sum(k, 0.0);
  std::size_t steps = 0;

  for (std::size_t pass = 0; pass < cfg.collab_passes; ++pass) {
    const std::uint64_t pass_index = epoch * cfg.collab_passes + pass;
    const auto plan = batch_indices(pool.x.rows(), cfg.collab_batch, derive_seed(cfg.seed, "batch/collab"), pass_index);
    for (std::size_t bi = 0; bi < plan.size(); ++bi) {
      const Matrix xb =
          augment(select_rows(pool.x, plan[bi]), cfg.augment, derive_seed(cfg.seed, "augment", pass_index * 100003 + bi));

      std::vector<ForwardResult> fwd(k);
      std::vector<SimilarityMatrix> sims(need_similarity ? k : 0);
      for_each_client(k, mode, [&](std::size_t i) {
        fwd[i] = forward(clients[i].model, xb);
        if (need_similarity) sims[i] = instance_similarity(fwd[i].h, cfg.mu);
      });

      std::vector<Matrix> logits;
      logits.reserve(k);
      for (const auto& f : fwd) logits.push_back(f.z);
      const Matrix z_avg = mean_of(logits);
      const SimilarityMatrix s_avg = need_similarity ? average_similarity(sims) : SimilarityMatrix{};

      for_each_client(k, mode, [&](std::size_t i) {
        LossWithGrad loss;
        const Matrix* grad_h = nullptr;
        switch (objective) {
          case PublicObjective::Collaborative:
            if (need_similarity) {
              loss = fccm_loss(cross_correlation_matrix(fwd[i].z, z_avg), cfg.lambda);
              LossWithGrad fisl = fisl_loss(sims[i], s_avg);
              fisl.grads.erase("s_local");
              loss.accumulate(fisl, cfg.omega);
              grad_h = &loss.grads.at("h_local");
            } else {
              loss = fccm_loss(cross_correlation_matrix(fwd[i].z, z_avg), cfg.lambda);
            }
            break;
          case PublicObjective::FedDf:
            loss = feddf_loss(fwd[i].z, z_avg);
            break;
          case PublicObjective::FedMd:
            loss = fedmd_loss(fwd[i].z, z_avg);
            break;
        }
        require_finite(loss, where("collaborative", cfg.strategy, epoch, clients[i].client_id));
        const ModelGrads g = backward(clients[i].model, fwd[i].cache, loss.grad("z_local"), grad_h);
        adam_step(clients[i].adam_collab, clients[i].model, g);
        loss_sum[i] += loss.value;
      });
      ++steps;
    }
  }
  if (steps > 0)
    for (double& v : loss_sum) v /= static_cast<double>(steps);
  return loss_sum;
}

inline void add_ewc_penalty(const ClientState& client, double weight, ModelGrads& grads, double& value) {
  const auto params = client.model.parameters();
  const auto anchor = client.pretrained->model().parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& theta = params[p]->data();
    const auto& star = anchor[p]->data();
    const auto& f = client.fisher[p].data();
    auto& g = grads.params[p].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double d = theta[j] - star[j];
      value += weight * f[j] * d * d;
      g[j] += 2.0 * weight * f[j] * d;
    }
  }
}

}  // namespace detail

/// Collaborative phase for the configured strategy: FCCM + ω·FISL for the
/// FCCL family, the logit-matching objectives for FedDF / FedMD, none for SOLO.
inline std::vector<double> run_collaborative_phase(std::vector<ClientState>& clients, const PublicPool& pool,
                                                   const FederationConfig& cfg, std::size_t epoch,
                                                   std::optional<Execution> mode = std::nullopt) {
  const Execution m = mode.value_or(detail::execution_of(cfg));
  switch (cfg.strategy) {
    case Strategy::Solo:
      return std::vector<double>(clients.size(), 0.0);
    case Strategy::FedDf:
      return detail::run_public_phase(clients, pool, cfg, epoch, detail::PublicObjective::FedDf, m);
    case Strategy::FedMd:
      return detail::run_public_phase(clients, pool, cfg, epoch, detail::PublicObjective::FedMd, m);
    default:
      return detail::run_public_phase(clients, pool, cfg, epoch, detail::PublicObjective::Collaborative, m);
  }
}

/// Clients match softmax(Z̄) row-wise on public batches (no FCCM, no FISL).
inline std::vector<double> run_strategy_feddf(std::vector<ClientState>& clients, const PublicPool& pool,
                                              const FederationConfig& cfg, std::size_t epoch) {
  return detail::run_public_phase(clients, pool, cfg, epoch, detail::PublicObjective::FedDf, detail::execution_of(cfg));
}

/// Clients regress Z_i onto Z̄ with mean squared error on public batches.
inline std::vector<double> run_strategy_fedmd(std::vector<ClientState>& clients, const PublicPool& pool,
                                              const FederationConfig& cfg, std::size_t epoch) {
  return detail::run_public_phase(clients, pool, cfg, epoch, detail::PublicObjective::FedMd, detail::execution_of(cfg));
}

/// Broadcasts the element-wise parameter mean to every client.
inline void run_strategy_fedavg_homog(std::vector<ClientState>& clients, const FederationConfig& /*cfg*/,
                                      std::size_t /*epoch*/) {
  if (clients.empty()) return;
  for (const auto& c : clients) {
    if (!c.model.same_architecture(clients.front().model)) {
      throw ConfigError("fedavg_homog: client models are not structurally identical");
    }
  }
  const auto first = clients.front().model.parameters();
  std::vector<Matrix> avg;
  for (const Matrix* p : first) avg.emplace_back(p->rows(), p->cols());
  for (const auto& c : clients) {
    const auto ps = c.model.parameters();
    for (std::size_t p = 0; p < ps.size(); ++p) avg[p] += *ps[p];
  }
  const double inv = 1.0 / static_cast<double>(clients.size());
  for (auto& m : avg) m *= inv;
  for (auto& c : clients) {
    auto ps = c.model.mutable_parameters();
    for (std::size_t p = 0; p < ps.size(); ++p) *ps[p] = avg[p];
  }
}

/// Diagonal empirical Fisher of the CE loss, averaged over single samples.
inline std::vector<Matrix> estimate_fisher(const ClientModel& model, const Matrix& x, std::span<const int> y) {
  std::vector<Matrix> fisher;
  for (const Matrix* p : model.parameters()) fisher.emplace_back(p->rows(), p->cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t idx[] = {r};
    const Matrix xr = select_rows(x, idx);
    const auto fwd = forward(model, xr);
    const LossWithGrad ce = ce_loss(fwd.z, y.subspan(r, 1));
    const ModelGrads g = backward(model, fwd.cache, ce.grad("z"));
    for (std::size_t p = 0; p < fisher.size(); ++p)
      for (std::size_t j = 0; j < fisher[p].size(); ++j) fisher[p].data()[j] += g.params[p].data()[j] * g.params[p].data()[j];
  }
  const double inv = 1.0 / static_cast<double>(x.rows());
  for (auto& f : fisher) f *= inv;
  return fisher;
}

/// Cross-entropy training on private data, used for SOLO pretraining.
inline double train_ce_epochs(ClientState& client, const DomainDataset& data, const FederationConfig& cfg,
                              std::size_t epochs, const std::string& stream) {
  double loss_sum = 0.0;
  std::size_t steps = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto plan = batches(data.train_x, data.train_y, cfg.local_batch, derive_seed(cfg.seed, stream, client.client_id), e);
    for (const auto& b : plan) {
      const auto fwd = forward(client.model, b.x);
      const LossWithGrad ce = ce_loss(fwd.z, b.y);
      detail::require_finite(ce, detail::where("pretrain", cfg.strategy, 0, client.client_id));
      adam_step(client.adam_local, client.model, backward(client.model, fwd.cache, ce.grad("z")));
      loss_sum += ce.value;
      ++steps;
    }
  }
  return steps ? loss_sum / static_cast<double>(steps) : 0.0;
}

/// T rounds over private data with the strategy's local objective, then the
/// teacher snapshot is refreshed to the updated model. Returns the mean loss.
inline double run_local_phase(ClientState& client, const DomainDataset& data, const FederationConfig& cfg,
                              std::size_t epoch) {
  const bool needs_teacher = cfg.strategy == Strategy::FcclPlus || cfg.strategy == Strategy::PlainKd ||
                             cfg.strategy == Strategy::Fccl || cfg.strategy == Strategy::FedAvgHomog;
  const bool needs_pretrained = cfg.strategy == Strategy::Fccl || cfg.strategy == Strategy::Ewc;
  if (needs_teacher && !client.teacher) throw ConfigError("local phase: no teacher snapshot");
  if (needs_pretrained && !client.pretrained) {
    throw ConfigError(std::string("local phase: strategy ") + to_string(cfg.strategy) + " needs a pretrained snapshot");
  }
  if (needs_teacher && client.teacher->epoch_tag() != static_cast<int>(epoch) - 1) {
    throw StateError("local phase: teacher from epoch " + std::to_string(client.teacher->epoch_tag()) +
                     " used in epoch " + std::to_string(epoch));
  }
  if (cfg.strategy == Strategy::Ewc && client.fisher.empty()) {
    client.fisher = estimate_fisher(client.pretrained->model(), data.train_x, data.train_y);
  }

  double loss_sum = 0.0;
  std::size_t steps = 0;
  for (std::size_t t = 0; t < cfg.local_rounds; ++t) {
    const auto plan = batches(data.train_x, data.train_y, cfg.local_batch,
                              derive_seed(cfg.seed, "batch/local", client.client_id), epoch * cfg.local_rounds + t);
    for (const auto& b : plan) {
      const auto fwd = forward(client.model, b.x);
      LossWithGrad loss;
      switch (cfg.strategy) {
        case Strategy::FcclPlus:
        case Strategy::FedAvgHomog:
          loss = local_loss_fcclplus(fwd.z, b.y, forward(*client.teacher, b.x).z, cfg.tau, cfg.fntd_variant);
          break;
        case Strategy::PlainKd:
          loss = local_loss_plain_kd(fwd.z, b.y, forward(*client.teacher, b.x).z, cfg.tau, cfg.kd_tau_squared);
          break;
        case Strategy::Fccl:
          loss = local_loss_fccl_conference(fwd.z, b.y, forward(*client.teacher, b.x).z,
                                            forward(*client.pretrained, b.x).z, cfg.tau, cfg.fccl_pretrained_term);
          break;
        default: {
          LossWithGrad ce = ce_loss(fwd.z, b.y);
          loss.value = ce.value;
          loss.grads.emplace("z_student", std::move(ce.grads.at("z")));
        }
      }
      ModelGrads g = backward(client.model, fwd.cache, loss.grad("z_student"));
      if (cfg.strategy == Strategy::Ewc) detail::add_ewc_penalty(client, cfg.ewc_lambda, g, loss.value);
      detail::require_finite(loss, detail::where("local", cfg.strategy, epoch, client.client_id));
      adam_step(client.adam_local, client.model, g);
      loss_sum += loss.value;
      ++steps;
    }
  }
  client.teacher.emplace(client.model, static_cast<int>(epoch));
  return steps ? loss_sum / static_cast<double>(steps) : 0.0;
}

/// Builds models and optimizer state for every client (before pretraining).
inline std::vector<ClientState> make_clients(const FederationConfig& cfg) {
  auto models = build_scenario_models(cfg.models, cfg.scenario.input_dim, cfg.scenario.classes, cfg.seed);
  std::vector<ClientState> clients;
  for (std::size_t i = 0; i < models.size(); ++i) {
    clients.push_back(ClientState{i, i, std::move(models[i]), make_adam(cfg.lr), make_adam(cfg.lr), {}, {}, {}});
  }
  return clients;
}

struct CorrelationDump {
  int epoch = 0;
  std::size_t client = 0;
  CorrelationMatrix corr;
};

struct ExperimentResult {
  MetricsLog log;
  std::vector<ClientState> clients;
  std::vector<CorrelationDump> correlations;
};

/// Per-client correlation of logits with the client-average over the whole pool.
inline std::vector<CorrelationMatrix> pool_correlations(const std::vector<ClientState>& clients, const PublicPool& pool) {
  std::vector<Matrix> logits;
  for (const auto& c : clients) logits.push_back(forward(c.model, pool.x).z);
  const Matrix avg = mean_of(logits);
  std::vector<CorrelationMatrix> out;
  for (const auto& z : logits) out.push_back(cross_correlation_matrix(z, avg));
  return out;
}

/// SOLO pretraining, then E communication epochs. Metrics are recorded after
/// pretraining (epoch 0, post-local) and after both phases of every epoch.
inline ExperimentResult run_experiment(const FederationConfig& cfg, const Scenario& scenario) {
  validate(cfg);
  ExperimentResult res;
  res.clients = make_clients(cfg);
  auto& clients = res.clients;
  const Execution mode = detail::execution_of(cfg);

  auto record = [&](int epoch, Phase phase, std::vector<double> loss) {
    std::vector<const ClientModel*> ms;
    for (const auto& c : clients) ms.push_back(&c.model);
    res.log.push_back(evaluate(ms, scenario.domains, epoch, phase, std::move(loss)));
  };

  std::vector<double> pre_loss(clients.size(), 0.0);
  detail::for_each_client(clients.size(), mode, [&](std::size_t i) {
    pre_loss[i] = train_ce_epochs(clients[i], scenario.domains[i], cfg, cfg.pretrain_epochs, "batch/pretrain");
    clients[i].teacher.emplace(clients[i].model, 0);
    clients[i].pretrained.emplace(clients[i].model, 0);
  });
  record(0, Phase::PostLocal, pre_loss);

  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    std::vector<double> collab_loss = run_collaborative_phase(clients, scenario.public_pool, cfg, e, mode);
    if (cfg.strategy == Strategy::FedAvgHomog) run_strategy_fedavg_homog(clients, cfg, e);
    if (cfg.dump_correlation) {
      auto corrs = pool_correlations(clients, scenario.public_pool);
      for (std::size_t i = 0; i < corrs.size(); ++i) res.correlations.push_back({static_cast<int>(e), i, std::move(corrs[i])});
    }
    record(static_cast<int>(e), Phase::PostCollab, std::move(collab_loss));

    std::vector<double> local_loss(clients.size(), 0.0);
    detail::for_each_client(clients.size(), mode, [&](std::size_t i) {
      local_loss[i] = run_local_phase(clients[i], scenario.domains[i], cfg, e);
    });
    record(static_cast<int>(e), Phase::PostLocal, std::move(local_loss));
  }
  return res;
}

inline ExperimentResult run_experiment(const FederationConfig& cfg) {
  validate(cfg);
  ScenarioConfig sc = cfg.scenario;
  sc.seed = cfg.seed;
  return run_experiment(cfg, generate_scenario(sc));
}

}  // namespace fccl
