#pragma once

// Built-in invariant battery: gradient checks against finite differences,
// algebraic identities, hand values and determinism. Used by `fccl verify`
// and by the acceptance tests.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fccl/federation.hpp"
#include "fccl/gradcheck.hpp"
#include "fccl/losses.hpp"
#include "fccl/metrics.hpp"

namespace fccl {

inline constexpr std::size_t kGradSeeds = 20;
inline constexpr std::size_t kDecompositionBatches = 100;
inline constexpr double kDecompositionTolerance = 1e-12;
inline constexpr double kTargetGradTolerance = 1e-10;
inline constexpr double kFccmAffineTolerance = 1e-9;
inline constexpr double kFislScaleTolerance = 1e-10;
inline constexpr double kSoftmaxTemperatureTolerance = 1e-12;
inline constexpr std::size_t kKlPairs = 10000;
inline constexpr double kHandTolerance = 1e-12;
inline constexpr double kParallelRowsTolerance = 1e-10;
inline constexpr double kParallelTolerance = 1e-12;

/// Loss kernels the battery exercises. Replacing one lets tests confirm the
/// battery notices a broken implementation.
struct Kernels {
  std::function<LossWithGrad(const Matrix&, const Matrix&, double, std::span<const int>, FntdVariant)> fntd =
      [](const Matrix& zt, const Matrix& zs, double tau, std::span<const int> y, FntdVariant v) {
        return fntd_loss(zt, zs, tau, y, v);
      };
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

template <class F>
CheckResult timed(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r{name, false, "", 0.0};
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Runs `one(seed) -> worst relative error` over kGradSeeds seeds.
inline CheckResult gradient_check(const std::string& name, const std::function<double(std::uint64_t)>& one) {
  return timed(name, [&](CheckResult& r) {
    double worst = 0.0;
    for (std::size_t s = 0; s < kGradSeeds; ++s) worst = std::max(worst, one(derive_seed(1234, name, s)));
    r.passed = worst <= kFdTolerance;
    r.detail = "max rel err " + sci(worst) + " over " + std::to_string(kGradSeeds) + " seeds (tol " + sci(kFdTolerance) + ")";
  });
}

struct LogitCase {
  Matrix zs, zt, z2;
  std::vector<int> y;
  double tau;
};

inline LogitCase logit_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t b = 3 + rng.index(6);
  const std::size_t c = 2 + rng.index(6);
  const double taus[] = {1.0, 2.0, 3.0, 5.0};
  LogitCase lc{random_matrix(b, c, rng, 2.0), random_matrix(b, c, rng, 2.0), random_matrix(b, c, rng, 2.0),
               random_labels(b, c, rng), taus[rng.index(4)]};
  return lc;
}

inline SimilarityMatrix random_similarity(std::size_t b, std::size_t d, double mu, Rng& rng) {
  return instance_similarity(random_matrix(b, d, rng), mu);
}

}  // namespace detail

inline CheckResult check_grad_fccm() {
  return detail::gradient_check("grad/fccm", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t b = 4 + rng.index(8), c = 2 + rng.index(5);
    const Matrix zl = random_matrix(b, c, rng), za = random_matrix(b, c, rng);
    const auto f = [&](const Matrix& z) { return fccm_loss(cross_correlation_matrix(z, za), kDefaultLambda).value; };
    return gradient_error(f, zl, fccm_loss(cross_correlation_matrix(zl, za), kDefaultLambda).grad("z_local"));
  });
}

inline CheckResult check_grad_fisl() {
  return detail::gradient_check("grad/fisl", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t b = 3 + rng.index(6), d = 2 + rng.index(6);
    const Matrix h = random_matrix(b, d, rng);
    const SimilarityMatrix avg = detail::random_similarity(b, d, kDefaultMu, rng);
    const auto f = [&](const Matrix& x) { return fisl_loss(instance_similarity(x, kDefaultMu), avg).value; };
    const auto loss = fisl_loss(instance_similarity(h, kDefaultMu), avg);
    const auto fs = [&](const Matrix& s) { return fisl_loss(SimilarityMatrix{s, kDefaultMu, {}}, avg).value; };
    return std::max(gradient_error(f, h, loss.grad("h_local")),
                    gradient_error(fs, instance_similarity(h, kDefaultMu).s, loss.grad("s_local")));
  });
}

inline CheckResult check_grad_collaborative() {
  return detail::gradient_check("grad/collaborative", [](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t b = 4 + rng.index(6), c = 2 + rng.index(4), d = 2 + rng.index(5);
    const Matrix zl = random_matrix(b, c, rng), za = random_matrix(b, c, rng), h = random_matrix(b, d, rng);
    const SimilarityMatrix avg = detail::random_similarity(b, d, kDefaultMu, rng);
    const auto loss = collaborative_loss(zl, za, h, avg, kDefaultLambda, kDefaultOmega, kDefaultMu);
    const auto fz = [&](const Matrix& z) {
      return collaborative_loss(z, za, h, avg, kDefaultLambda, kDefaultOmega, kDefaultMu).value;
    };
    const auto fh = [&](const Matrix& x) {
      return collaborative_loss(zl, za, x, avg, kDefaultLambda, kDefaultOmega, kDefaultMu).value;
    };
    return std::max(gradient_error(fz, zl, loss.grad("z_local")), gradient_error(fh, h, loss.grad("h_local")));
  });
}

inline CheckResult check_grad_ce() {
  return detail::gradient_check("grad/ce", [](std::uint64_t seed) {
    const auto lc = detail::logit_case(seed);
    const auto f = [&](const Matrix& z) { return ce_loss(z, lc.y).value; };
    return gradient_error(f, lc.zs, ce_loss(lc.zs, lc.y).grad("z"));
  });
}

inline CheckResult check_grad_kd() {
  return detail::gradient_check("grad/kd", [](std::uint64_t seed) {
    const auto lc = detail::logit_case(seed);
    double worst = 0.0;
    for (bool sq : {false, true}) {
      const auto f = [&](const Matrix& z) { return kd_loss(lc.zt, z, lc.tau, sq).value; };
      worst = std::max(worst, gradient_error(f, lc.zs, kd_loss(lc.zt, lc.zs, lc.tau, sq).grad("z_student")));
    }
    return worst;
  });
}

inline CheckResult check_grad_fntd(const Kernels& k, FntdVariant variant) {
  return detail::gradient_check(std::string("grad/fntd_") + to_string(variant), [&](std::uint64_t seed) {
    const auto lc = detail::logit_case(seed);
    const auto f = [&](const Matrix& z) { return fntd_loss(lc.zt, z, lc.tau, lc.y, variant).value; };
    return gradient_error(f, lc.zs, k.fntd(lc.zt, lc.zs, lc.tau, lc.y, variant).grad("z_student"));
  });
}

inline CheckResult check_grad_plain_kd() {
  return detail::gradient_check("grad/plain_kd", [](std::uint64_t seed) {
    const auto lc = detail::logit_case(seed);
    const auto f = [&](const Matrix& z) { return local_loss_plain_kd(z, lc.y, lc.zt, lc.tau).value; };
    return gradient_error(f, lc.zs, local_loss_plain_kd(lc.zs, lc.y, lc.zt, lc.tau).grad("z_student"));
  });
}

inline CheckResult check_grad_fcclplus() {
  return detail::gradient_check("grad/fcclplus_local", [](std::uint64_t seed) {
    const auto lc = detail::logit_case(seed);
    double worst = 0.0;
    for (auto v : {FntdVariant::Renormalized, FntdVariant::Literal}) {
      const auto f = [&](const Matrix& z) { return local_loss_fcclplus(z, lc.y, lc.zt, lc.tau, v).value; };
      worst = std::max(worst, gradient_error(f, lc.zs, local_loss_fcclplus(lc.zs, lc.y, lc.zt, lc.tau, v).grad("z_student")));
    }
    return worst;
  });
}

inline CheckResult check_grad_conference() {
  return detail::gradient_check("grad/fccl_local", [](std::uint64_t seed) {
    const auto lc = detail::logit_case(seed);
    const auto f = [&](const Matrix& z) { return local_loss_fccl_conference(z, lc.y, lc.zt, lc.z2, lc.tau).value; };
    return gradient_error(f, lc.zs, local_loss_fccl_conference(lc.zs, lc.y, lc.zt, lc.z2, lc.tau).grad("z_student"));
  });
}

inline CheckResult check_grad_feddf_fedmd() {
  return detail::gradient_check("grad/feddf_fedmd", [](std::uint64_t seed) {
    const auto lc = detail::logit_case(seed);
    const auto fd = [&](const Matrix& z) { return feddf_loss(z, lc.zt).value; };
    const auto fm = [&](const Matrix& z) { return fedmd_loss(z, lc.zt).value; };
    return std::max(gradient_error(fd, lc.zs, feddf_loss(lc.zs, lc.zt).grad("z_local")),
                    gradient_error(fm, lc.zs, fedmd_loss(lc.zs, lc.zt).grad("z_local")));
  });
}

/// Whole-network backward through the collaborative objective, so both the
/// logit path and the feature path into the extractor are exercised.
inline CheckResult check_grad_network() {
  return detail::gradient_check("grad/network", [](std::uint64_t seed) {
    Rng rng(seed);
    const Activation acts[] = {Activation::Tanh, Activation::Relu, Activation::Identity};
    const ModelSpec spec{{6, 5}, acts[rng.index(3)]};
    const ClientModel model = init_model(spec, 4, 3, seed);
    const std::size_t b = 6;
    const Matrix x = random_matrix(b, 4, rng);
    const Matrix za = random_matrix(b, 3, rng);
    const SimilarityMatrix avg = detail::random_similarity(b, 5, kDefaultMu, rng);
    const auto objective = [&](const ClientModel& m) {
      const auto fwd = forward(m, x);
      return collaborative_loss(fwd.z, za, fwd.h, avg, kDefaultLambda, kDefaultOmega, kDefaultMu);
    };
    const auto fwd = forward(model, x);
    const auto loss = collaborative_loss(fwd.z, za, fwd.h, avg, kDefaultLambda, kDefaultOmega, kDefaultMu);
    const ModelGrads g = backward(model, fwd.cache, loss.grad("z_local"), &loss.grad("h_local"));
    return model_gradient_error([&](const ClientModel& m) { return objective(m).value; }, model, g);
  });
}

inline CheckResult check_kd_decomposition() {
  return detail::timed("identity/kd_decomposition", [](CheckResult& r) {
    double worst = 0.0;
    for (std::size_t i = 0; i < kDecompositionBatches; ++i) {
      const auto lc = detail::logit_case(derive_seed(99, "decomposition", i));
      const KdParts p = decompose_kd(lc.zt, lc.zs, lc.tau, lc.y);
      worst = std::max(worst, std::abs(kd_loss(lc.zt, lc.zs, lc.tau).value - (p.td + p.ntd)));
    }
    r.passed = worst <= kDecompositionTolerance;
    r.detail = "max |kd - (td + ntd)| " + detail::sci(worst) + " over " + std::to_string(kDecompositionBatches) + " batches";
  });
}

/// Target-logit gradient of CE + τ²·KD against its closed form, FNTD's zero
/// target gradient, and a constructed conflict with CE.
inline CheckResult check_target_gradient(const Kernels& k) {
  return detail::timed("identity/target_gradient", [&](CheckResult& r) {
    double worst = 0.0;
    double fntd_max = 0.0;
    for (std::size_t i = 0; i < kGradSeeds; ++i) {
      const auto lc = detail::logit_case(derive_seed(77, "target_gradient", i));
      const Matrix g = local_loss_plain_kd(lc.zs, lc.y, lc.zt, lc.tau, true).grad("z_student");
      const Matrix ps1 = softmax_rows(lc.zs);
      const Matrix ps = softmax_rows(lc.zs, lc.tau);
      const Matrix pt = softmax_rows(lc.zt, lc.tau);
      const Matrix gf = k.fntd(lc.zt, lc.zs, lc.tau, lc.y, FntdVariant::Renormalized).grad("z_student");
      const auto b = static_cast<double>(lc.zs.rows());
      for (std::size_t row = 0; row < lc.zs.rows(); ++row) {
        const auto t = static_cast<std::size_t>(lc.y[row]);
        const double expected = (ps1(row, t) - 1.0) + lc.tau * (ps(row, t) - pt(row, t));
        worst = std::max(worst, std::abs(b * g(row, t) - expected));
        fntd_max = std::max(fntd_max, std::abs(gf(row, t)));
      }
    }
    // Teacher less confident on the target than the student: KD pushes the
    // target logit down while CE pushes it up.
    const Matrix zs{{3.0, 0.0, 0.0}};
    const Matrix zt{{0.0, 1.0, 1.0}};
    const std::vector<int> y{0};
    const double kd_t = kd_loss(zt, zs, 3.0, true).grad("z_student")(0, 0);
    const double ce_t = ce_loss(zs, y).grad("z")(0, 0);
    const bool conflict = kd_t > 0.0 && ce_t < 0.0;
    r.passed = worst <= kTargetGradTolerance && fntd_max == 0.0 && conflict;
    r.detail = "closed-form err " + detail::sci(worst) + ", fntd target grad max " + detail::sci(fntd_max) +
               ", conflict kd " + detail::sci(kd_t) + " vs ce " + detail::sci(ce_t);
  });
}

inline CheckResult check_invariances() {
  return detail::timed("identity/invariances", [](CheckResult& r) {
    double fccm = 0.0, fisl = 0.0, temp = 0.0, kl_min = INFINITY;
    for (std::size_t i = 0; i < kGradSeeds; ++i) {
      Rng rng(derive_seed(55, "invariance", i));
      const std::size_t b = 5 + rng.index(6), c = 2 + rng.index(5), d = 2 + rng.index(5);
      const Matrix zl = random_matrix(b, c, rng), za = random_matrix(b, c, rng);
      Matrix zl2 = zl, za2 = za;
      for (std::size_t col = 0; col < c; ++col) {
        const double a1 = rng.uniform(0.1, 10.0), c1 = rng.uniform(-5.0, 5.0);
        const double a2 = rng.uniform(0.1, 10.0), c2 = rng.uniform(-5.0, 5.0);
        for (std::size_t row = 0; row < b; ++row) {
          zl2(row, col) = a1 * zl(row, col) + c1;
          za2(row, col) = a2 * za(row, col) + c2;
        }
      }
      fccm = std::max(fccm, max_abs_diff(cross_correlation_matrix(zl, za).m, cross_correlation_matrix(zl2, za2).m));
      fccm = std::max(fccm, std::abs(fccm_loss(cross_correlation_matrix(zl, za), kDefaultLambda).value -
                                     fccm_loss(cross_correlation_matrix(zl2, za2), kDefaultLambda).value));

      const Matrix h = random_matrix(b, d, rng);
      const double alpha = rng.uniform(0.01, 100.0);
      const SimilarityMatrix avg = detail::random_similarity(b, d, kDefaultMu, rng);
      fisl = std::max(fisl, max_abs_diff(instance_similarity(h, kDefaultMu).s, instance_similarity(h * alpha, kDefaultMu).s));
      fisl = std::max(fisl, std::abs(fisl_loss(instance_similarity(h, kDefaultMu), avg).value -
                                     fisl_loss(instance_similarity(h * alpha, kDefaultMu), avg).value));

      const double tau = rng.uniform(0.5, 10.0);
      temp = std::max(temp, max_abs_diff(softmax_rows(zl, tau), softmax_rows(zl * (1.0 / tau), 1.0)));
    }
    Rng rng(derive_seed(55, "kl"));
    for (std::size_t i = 0; i < kKlPairs; ++i) {
      const std::size_t c = 2 + rng.index(9);
      const double scale = rng.uniform(0.1, 5.0);
      kl_min = std::min(kl_min, kl_divergence_rows(softmax_rows(random_matrix(1, c, rng, scale)),
                                                   softmax_rows(random_matrix(1, c, rng, scale))));
    }
    r.passed = fccm <= kFccmAffineTolerance && fisl <= kFislScaleTolerance && temp <= kSoftmaxTemperatureTolerance &&
               kl_min >= 0.0;
    r.detail = "fccm affine " + detail::sci(fccm) + ", fisl scale " + detail::sci(fisl) + ", softmax temperature " +
               detail::sci(temp) + ", min KL " + detail::sci(kl_min) + " over " + std::to_string(kKlPairs) + " pairs";
  });
}

inline CheckResult check_hand_values() {
  return detail::timed("oracle/hand_values", [](CheckResult& r) {
    const Matrix z{{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}};
    const Matrix m = cross_correlation_matrix(z, z).m;
    const double m_err = max_abs_diff(m, target_correlation(2));
    const double ones = fccm_value(Matrix(2, 2, 1.0), kDefaultLambda);
    const double ones_err = std::abs(ones - 0.0408);
    const Matrix s = instance_similarity(Matrix{{1.0, 1.0}, {2.0, 2.0}}, kDefaultMu).s;
    // Relative to 1/μ so the tolerance does not scale with μ.
    const double s_err = std::max(std::abs(s(0, 0) * kDefaultMu - 1.0), std::abs(s(1, 0) * kDefaultMu - 1.0));
    r.passed = m_err <= kHandTolerance && ones_err <= kHandTolerance && s_err <= kParallelRowsTolerance;
    r.detail = "anti-symmetric M err " + detail::sci(m_err) + ", all-ones loss " + detail::sci(ones) + " (err " +
               detail::sci(ones_err) + "), parallel-rows S err " + detail::sci(s_err);
  });
}

/// A config small enough to run in well under a second.
inline FederationConfig tiny_config() {
  FederationConfig cfg;
  cfg.seed = 11;
  cfg.epochs = 2;
  cfg.local_rounds = 1;
  cfg.pretrain_epochs = 2;
  cfg.collab_batch = 20;
  cfg.local_batch = 10;
  cfg.scenario.domains = 3;
  cfg.scenario.classes = 3;
  cfg.scenario.input_dim = 6;
  cfg.scenario.train_sizes = {40, 30, 50};
  cfg.scenario.test_size = 30;
  cfg.scenario.public_size = 60;
  cfg.models = {{{8, 4}, Activation::Tanh}, {{10, 5}, Activation::Tanh}, {{6}, Activation::Tanh}};
  return cfg;
}

inline std::string metrics_csv_string(const ExperimentResult& res) {
  std::ostringstream os;
  write_metrics_csv(res.log, os, res.clients.size());
  return os.str();
}

inline double parameter_distance(const std::vector<ClientState>& a, const std::vector<ClientState>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto pa = a[i].model.parameters();
    const auto pb = b[i].model.parameters();
    for (std::size_t p = 0; p < pa.size(); ++p) worst = std::max(worst, frobenius_distance(*pa[p], *pb[p]));
  }
  return worst;
}

/// Two runs of one config give identical CSV bytes; serial and parallel
/// client execution agree on every parameter.
inline CheckResult check_determinism(const FederationConfig& base = tiny_config()) {
  return detail::timed("determinism", [&](CheckResult& r) {
    FederationConfig serial = base;
    serial.parallel_clients = false;
    FederationConfig parallel = base;
    parallel.parallel_clients = true;
    const auto a = run_experiment(serial);
    const auto b = run_experiment(serial);
    const auto c = run_experiment(parallel);
    const bool same_csv = metrics_csv_string(a) == metrics_csv_string(b);
    const double dist = parameter_distance(a.clients, c.clients);
    r.passed = same_csv && dist <= kParallelTolerance;
    r.detail = std::string("csv ") + (same_csv ? "identical" : "differs") + ", serial/parallel distance " + detail::sci(dist);
  });
}

/// Parameter averaging equals an element-wise mean oracle exactly, and an
/// epoch with no training is a fixed point once models are averaged.
inline CheckResult check_fedavg_homog() {
  return detail::timed("homogeneous/fedavg", [](CheckResult& r) {
    FederationConfig cfg = tiny_config();
    cfg.strategy = Strategy::FedAvgHomog;
    cfg.models = std::vector<ModelSpec>(3, ModelSpec{{7, 4}, Activation::Tanh});
    auto clients = make_clients(cfg);
    std::vector<std::vector<Matrix>> before;
    for (const auto& c : clients) {
      std::vector<Matrix> ps;
      for (const Matrix* p : c.model.parameters()) ps.push_back(*p);
      before.push_back(std::move(ps));
    }
    run_strategy_fedavg_homog(clients, cfg, 1);
    bool exact = true;
    for (std::size_t p = 0; p < before.front().size(); ++p) {
      for (std::size_t j = 0; j < before.front()[p].size(); ++j) {
        double s = 0.0;
        for (const auto& ps : before) s += ps[p].data()[j];
        const double expected = s * (1.0 / static_cast<double>(before.size()));
        for (const auto& c : clients) exact = exact && c.model.parameters()[p]->data()[j] == expected;
      }
    }

    cfg.collab_passes = 0;
    cfg.local_rounds = 0;
    cfg.epochs = 2;
    const auto res = run_experiment(cfg);
    bool fixed = true;
    for (std::size_t i = 1; i < res.clients.size(); ++i) fixed = fixed && res.clients[i].model == res.clients[0].model;
    const auto& last = res.log.back();
    const auto& prev = res.log[res.log.size() - 3];
    fixed = fixed && last.intra_acc == prev.intra_acc && last.inter_acc == prev.inter_acc;
    r.passed = exact && fixed;
    r.detail = std::string("mean oracle ") + (exact ? "exact" : "differs") + ", fixed point " + (fixed ? "holds" : "broken");
  });
}

inline std::vector<CheckResult> run_gradient_checks(const Kernels& k = {}) {
  return {check_grad_fccm(),     check_grad_fisl(),
          check_grad_collaborative(),
          check_grad_ce(),       check_grad_kd(),
          check_grad_fntd(k, FntdVariant::Renormalized),
          check_grad_fntd(k, FntdVariant::Literal),
          check_grad_plain_kd(), check_grad_fcclplus(),
          check_grad_conference(), check_grad_feddf_fedmd(),
          check_grad_network()};
}

inline std::vector<CheckResult> run_verification(const Kernels& k = {}) {
  std::vector<CheckResult> all = run_gradient_checks(k);
  all.push_back(check_kd_decomposition());
  all.push_back(check_target_gradient(k));
  all.push_back(check_invariances());
  all.push_back(check_hand_values());
  all.push_back(check_determinism());
  all.push_back(check_fedavg_homog());
  return all;
}

inline bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return true;
}

inline void print_results(const std::vector<CheckResult>& results, std::ostream& os) {
  char buf[512];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-4s %-28s %7.3fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds,
                  r.detail.c_str());
    os << buf;
  }
}

}  // namespace fccl
