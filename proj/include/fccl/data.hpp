#pragma once

// Synthetic multi-domain classification scenarios.
//
// All domains share one latent class geometry (class means plus isotropic
// noise). Domain k observes a latent sample l as
//
//   x = R_k (s_k ⊙ l) + b_k
//
// with R_k an orthogonal rotation by angle shift·π/2 in random planes, s_k a
// positive per-dimension scaling and b_k a bias; shift_strength = 0 makes every
// transform the identity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fccl/numerics.hpp"
#include "fccl/rng.hpp"

namespace fccl {

struct DomainTransform {
  Matrix rotation;            // dim × dim, orthogonal
  std::vector<double> scale;  // dim, positive
  std::vector<double> bias;   // dim

  Matrix apply(const Matrix& latent) const {
    Matrix scaled = latent;
    for (std::size_t r = 0; r < scaled.rows(); ++r)
      for (std::size_t c = 0; c < scaled.cols(); ++c) scaled(r, c) *= scale[c];
    Matrix out = matmul_nt(scaled, rotation);  // rows are R·(s⊙l)
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bias[c];
    return out;
  }
};

struct DomainDataset {
  std::size_t domain_id = 0;
  Matrix train_x;
  std::vector<int> train_y;
  Matrix test_x;
  std::vector<int> test_y;
  DomainTransform transform;
  std::uint64_t train_seed = 0;
  std::uint64_t test_seed = 0;
};

/// Unlabeled shared data. Deliberately has no label field.
struct PublicPool {
  Matrix x;
  std::string provenance;  // "mixture" or "heldout"
};

enum class PublicSource { Mixture, Heldout };

struct ScenarioConfig {
  std::size_t domains = 4;
  std::size_t classes = 5;
  std::size_t input_dim = 16;
  std::vector<std::size_t> train_sizes{150, 80, 500, 300};
  std::size_t test_size = 200;
  std::size_t public_size = 1000;
  double shift_strength = 0.5;
  double class_separation = 1.5;  // std of the latent class means
  double noise_std = 1.0;
  double scale_spread = 0.3;      // log-std of per-dim scaling at shift 1
  double bias_magnitude = 1.0;    // std of per-dim bias at shift 1
  PublicSource public_source = PublicSource::Mixture;
  std::uint64_t seed = 7;
};

struct Scenario {
  ScenarioConfig config;
  Matrix class_means;  // classes × input_dim, latent space
  std::vector<DomainDataset> domains;
  PublicPool public_pool;
};

inline Matrix select_rows(const Matrix& x, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = x.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

namespace detail {

/// Gram–Schmidt on a Gaussian matrix; rows form an orthonormal basis.
inline Matrix random_orthonormal(std::size_t dim, Rng& rng) {
  Matrix q(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) {
    for (;;) {
      for (std::size_t j = 0; j < dim; ++j) q(i, j) = rng.normal();
      for (std::size_t k = 0; k < i; ++k) {
        double d = 0.0;
        for (std::size_t j = 0; j < dim; ++j) d += q(i, j) * q(k, j);
        for (std::size_t j = 0; j < dim; ++j) q(i, j) -= d * q(k, j);
      }
      double n = 0.0;
      for (std::size_t j = 0; j < dim; ++j) n += q(i, j) * q(i, j);
      n = std::sqrt(n);
      if (n < 1e-8) continue;
      for (std::size_t j = 0; j < dim; ++j) q(i, j) /= n;
      break;
    }
  }
  return q;
}

/// Rotation by `angle` in the planes spanned by consecutive basis pairs.
inline Matrix plane_rotation(std::size_t dim, double angle, Rng& rng) {
  const Matrix basis = random_orthonormal(dim, rng);  // rows q_i
  Matrix block = Matrix::identity(dim);
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  for (std::size_t i = 0; i + 1 < dim; i += 2) {
    block(i, i) = c;
    block(i, i + 1) = -s;
    block(i + 1, i) = s;
    block(i + 1, i + 1) = c;
  }
  // R = Qᵀ · block · Q with Q holding basis rows.
  return matmul_tn(basis, matmul(block, basis));
}

inline DomainTransform make_transform(const ScenarioConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const double shift = cfg.shift_strength;
  DomainTransform t;
  t.rotation = plane_rotation(cfg.input_dim, shift * M_PI / 2.0, rng);
  t.scale.resize(cfg.input_dim);
  t.bias.resize(cfg.input_dim);
  for (double& s : t.scale) s = std::exp(shift * cfg.scale_spread * rng.normal());
  for (double& b : t.bias) b = shift * cfg.bias_magnitude * rng.normal();
  return t;
}

/// Latent draws l = mean[y] + noise for the given labels.
inline Matrix sample_latent(const Matrix& class_means, std::span<const int> labels, double noise_std, Rng& rng) {
  Matrix l(labels.size(), class_means.cols());
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < l.cols(); ++j)
      l(i, j) = class_means(static_cast<std::size_t>(labels[i]), j) + noise_std * rng.normal();
  return l;
}

struct LabeledSample {
  Matrix x;
  std::vector<int> y;
};

/// Public-pool draw together with the latent classes used to generate it.
/// The classes never leave this function through PublicPool; tests use them
/// to check that the pool shares the private class geometry.
inline LabeledSample sample_public(const Scenario& s, std::uint64_t seed) {
  const auto& cfg = s.config;
  Rng rng(seed);
  LabeledSample out{Matrix(cfg.public_size, cfg.input_dim), std::vector<int>(cfg.public_size)};
  for (auto& y : out.y) y = static_cast<int>(rng.index(cfg.classes));
  const Matrix latent = sample_latent(s.class_means, out.y, cfg.noise_std, rng);
  if (cfg.public_source == PublicSource::Heldout) {
    out.x = make_transform(cfg, derive_seed(cfg.seed, "data/public_transform")).apply(latent);
    return out;
  }
  // Equal mixture: sample i is observed through domain i mod K.
  for (std::size_t k = 0; k < cfg.domains; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = k; i < cfg.public_size; i += cfg.domains) idx.push_back(i);
    const Matrix xk = s.domains[k].transform.apply(select_rows(latent, idx));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto src = xk.row(r);
      std::copy(src.begin(), src.end(), out.x.row(idx[r]).begin());
    }
  }
  return out;
}

}  // namespace detail

/// Labels are assigned round-robin (balanced), then latent draws are transformed.
inline detail::LabeledSample sample_domain(const Matrix& class_means, const DomainTransform& transform, std::size_t n,
                                           double noise_std, std::uint64_t seed) {
  Rng rng(seed);
  detail::LabeledSample out;
  out.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.y[i] = static_cast<int>(i % class_means.rows());
  out.x = transform.apply(detail::sample_latent(class_means, out.y, noise_std, rng));
  return out;
}

inline void validate(const ScenarioConfig& cfg) {
  if (cfg.domains < 2) throw ParameterError("scenario: need at least 2 domains");
  if (cfg.classes < 2) throw ParameterError("scenario: need at least 2 classes");
  if (cfg.input_dim < 1) throw ParameterError("scenario: input_dim must be positive");
  if (cfg.train_sizes.size() != cfg.domains) {
    throw ParameterError("scenario: " + std::to_string(cfg.train_sizes.size()) + " train sizes for " +
                         std::to_string(cfg.domains) + " domains");
  }
  for (std::size_t n : cfg.train_sizes)
    if (n == 0) throw ParameterError("scenario: train sizes must be positive");
  if (cfg.test_size == 0 || cfg.public_size == 0) throw ParameterError("scenario: test and public sizes must be positive");
  if (cfg.shift_strength < 0.0 || cfg.noise_std < 0.0 || cfg.class_separation <= 0.0) {
    throw ParameterError("scenario: shift, noise and separation must be non-negative (separation positive)");
  }
}

inline Scenario generate_scenario(const ScenarioConfig& cfg) {
  validate(cfg);
  Scenario s;
  s.config = cfg;
  {
    Rng rng(derive_seed(cfg.seed, "data/class_means"));
    s.class_means = Matrix(cfg.classes, cfg.input_dim);
    for (double& v : s.class_means.data()) v = cfg.class_separation * rng.normal();
  }
  for (std::size_t k = 0; k < cfg.domains; ++k) {
    DomainDataset d;
    d.domain_id = k;
    d.transform = detail::make_transform(cfg, derive_seed(cfg.seed, "data/transform", k));
    d.train_seed = derive_seed(cfg.seed, "data/train", k);
    d.test_seed = derive_seed(cfg.seed, "data/test", k);
    auto train = sample_domain(s.class_means, d.transform, cfg.train_sizes[k], cfg.noise_std, d.train_seed);
    auto test = sample_domain(s.class_means, d.transform, cfg.test_size, cfg.noise_std, d.test_seed);
    d.train_x = std::move(train.x);
    d.train_y = std::move(train.y);
    d.test_x = std::move(test.x);
    d.test_y = std::move(test.y);
    s.domains.push_back(std::move(d));
  }
  s.public_pool.x = detail::sample_public(s, derive_seed(cfg.seed, "data/public")).x;
  s.public_pool.provenance = cfg.public_source == PublicSource::Mixture ? "mixture" : "heldout";
  return s;
}

enum class AugmentMode { Off, Weak, Strong };

inline const char* to_string(AugmentMode m) {
  switch (m) {
    case AugmentMode::Off: return "off";
    case AugmentMode::Weak: return "weak";
    case AugmentMode::Strong: return "strong";
  }
  return "?";
}

inline AugmentMode augment_mode_from_string(const std::string& s) {
  if (s == "off") return AugmentMode::Off;
  if (s == "weak") return AugmentMode::Weak;
  if (s == "strong") return AugmentMode::Strong;
  throw ParameterError("unknown augmentation mode '" + s + "'");
}

inline constexpr double kMaskProbability = 0.1;
inline constexpr double kWeakJitter = 0.05;
inline constexpr double kStrongJitter = 0.2;

/// Vector-space analog of image augmentation.
/// weak: Gaussian jitter (σ = 0.05·column std) then coordinate masking (p = 0.1).
/// strong: per-entry scaling in [0.6, 1.4], jitter σ = 0.2·column std, masking.
inline Matrix augment(const Matrix& x, AugmentMode mode, std::uint64_t seed) {
  if (mode == AugmentMode::Off) return x;
  Rng rng(seed);
  std::vector<double> stdev(x.cols(), 0.0);
  if (x.rows() > 1) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) mean += x(r, c);
      mean /= static_cast<double>(x.rows());
      double ss = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) ss += (x(r, c) - mean) * (x(r, c) - mean);
      stdev[c] = std::sqrt(ss / static_cast<double>(x.rows()));
    }
  }
  const double jitter = mode == AugmentMode::Strong ? kStrongJitter : kWeakJitter;
  Matrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      double v = out(r, c);
      if (mode == AugmentMode::Strong) v *= rng.uniform(0.6, 1.4);
      v += jitter * stdev[c] * rng.normal();
      if (rng.uniform() < kMaskProbability) v = 0.0;
      out(r, c) = v;
    }
  }
  return out;
}

struct Batch {
  std::vector<std::size_t> indices;
  Matrix x;
  std::vector<int> y;  // empty for unlabeled data
};

/// Shuffled index partition for one pass. The permutation depends only on
/// (seed, epoch); a trailing batch with fewer than 2 rows is dropped.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::uint64_t epoch) {
  if (batch_size < 2) throw ParameterError("batches: batch size must be at least 2");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "batches", epoch));
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < 2) break;
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start), perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline std::vector<Batch> batches(const Matrix& x, std::span<const int> y, std::size_t batch_size, std::uint64_t seed,
                                  std::uint64_t epoch) {
  if (!y.empty() && y.size() != x.rows()) throw ShapeError("batches: label count does not match rows");
  std::vector<Batch> out;
  for (auto& idx : batch_indices(x.rows(), batch_size, seed, epoch)) {
    Batch b;
    b.x = select_rows(x, idx);
    if (!y.empty()) {
      b.y.reserve(idx.size());
      for (std::size_t i : idx) b.y.push_back(y[i]);
    }
    b.indices = std::move(idx);
    out.push_back(std::move(b));
  }
  return out;
}

// Scenario dump format, text, version 1:
//
//   FCCL-DATA 1
//   config domains C input_dim test_size public_size seed shift sep noise spread bias public_source
//   train_sizes n_0 ... n_{K-1}
//   matrix class_means <rows> <cols>, then rows
//   domain <k> train_seed test_seed
//     matrix rotation / scale / bias / train_x / test_x, vector train_y / test_y
//   matrix public_x ...
//   end
//
// Reals are written with %.17g so a reload is bit-exact.
namespace detail {

inline void dump_matrix(std::ostream& os, const char* name, const Matrix& m) {
  os << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  char buf[32];
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", m(r, c));
      os << (c ? " " : "") << buf;
    }
    os << '\n';
  }
}

inline void dump_labels(std::ostream& os, const char* name, const std::vector<int>& y) {
  os << "labels " << name << ' ' << y.size() << '\n';
  for (std::size_t i = 0; i < y.size(); ++i) os << (i ? " " : "") << y[i];
  os << '\n';
}

inline void expect_token(std::istream& is, const std::string& want) {
  std::string got;
  if (!(is >> got) || got != want) throw ParameterError("dataset file: expected '" + want + "', got '" + got + "'");
}

inline Matrix load_matrix(std::istream& is, const char* name) {
  expect_token(is, "matrix");
  expect_token(is, name);
  std::size_t r = 0, c = 0;
  if (!(is >> r >> c)) throw ParameterError(std::string("dataset file: bad shape for ") + name);
  Matrix m(r, c);
  std::string tok;
  for (double& v : m.data()) {
    if (!(is >> tok)) throw ParameterError(std::string("dataset file: truncated ") + name);
    v = std::strtod(tok.c_str(), nullptr);
  }
  return m;
}

inline std::vector<int> load_labels(std::istream& is, const char* name) {
  expect_token(is, "labels");
  expect_token(is, name);
  std::size_t n = 0;
  if (!(is >> n)) throw ParameterError(std::string("dataset file: bad count for ") + name);
  std::vector<int> y(n);
  for (int& v : y)
    if (!(is >> v)) throw ParameterError(std::string("dataset file: truncated ") + name);
  return y;
}

inline Matrix vector_row(const std::vector<double>& v) { return Matrix(1, v.size(), v); }

}  // namespace detail

inline void dump_scenario(const Scenario& s, std::ostream& os) {
  const auto& c = s.config;
  char buf[512];
  std::snprintf(buf, sizeof buf, "config %zu %zu %zu %zu %zu %llu %.17g %.17g %.17g %.17g %.17g %s\n", c.domains,
                c.classes, c.input_dim, c.test_size, c.public_size, static_cast<unsigned long long>(c.seed),
                c.shift_strength, c.class_separation, c.noise_std, c.scale_spread, c.bias_magnitude,
                c.public_source == PublicSource::Mixture ? "mixture" : "heldout");
  os << "FCCL-DATA 1\n" << buf << "train_sizes";
  for (std::size_t n : c.train_sizes) os << ' ' << n;
  os << '\n';
  detail::dump_matrix(os, "class_means", s.class_means);
  for (const auto& d : s.domains) {
    os << "domain " << d.domain_id << ' ' << d.train_seed << ' ' << d.test_seed << '\n';
    detail::dump_matrix(os, "rotation", d.transform.rotation);
    detail::dump_matrix(os, "scale", detail::vector_row(d.transform.scale));
    detail::dump_matrix(os, "bias", detail::vector_row(d.transform.bias));
    detail::dump_matrix(os, "train_x", d.train_x);
    detail::dump_labels(os, "train_y", d.train_y);
    detail::dump_matrix(os, "test_x", d.test_x);
    detail::dump_labels(os, "test_y", d.test_y);
  }
  detail::dump_matrix(os, "public_x", s.public_pool.x);
  os << "end\n";
}

inline Scenario load_scenario(std::istream& is) {
  detail::expect_token(is, "FCCL-DATA");
  int version = 0;
  if (!(is >> version) || version != 1) throw ParameterError("dataset file: unsupported version");
  Scenario s;
  auto& c = s.config;
  detail::expect_token(is, "config");
  std::string src;
  unsigned long long seed = 0;
  if (!(is >> c.domains >> c.classes >> c.input_dim >> c.test_size >> c.public_size >> seed)) {
    throw ParameterError("dataset file: bad config line");
  }
  c.seed = seed;
  std::string tok;
  for (double* v : {&c.shift_strength, &c.class_separation, &c.noise_std, &c.scale_spread, &c.bias_magnitude}) {
    if (!(is >> tok)) throw ParameterError("dataset file: bad config line");
    *v = std::strtod(tok.c_str(), nullptr);
  }
  if (!(is >> src)) throw ParameterError("dataset file: bad config line");
  c.public_source = src == "heldout" ? PublicSource::Heldout : PublicSource::Mixture;
  detail::expect_token(is, "train_sizes");
  c.train_sizes.resize(c.domains);
  for (auto& n : c.train_sizes)
    if (!(is >> n)) throw ParameterError("dataset file: bad train_sizes");
  s.class_means = detail::load_matrix(is, "class_means");
  for (std::size_t k = 0; k < c.domains; ++k) {
    DomainDataset d;
    detail::expect_token(is, "domain");
    if (!(is >> d.domain_id >> d.train_seed >> d.test_seed)) throw ParameterError("dataset file: bad domain header");
    d.transform.rotation = detail::load_matrix(is, "rotation");
    d.transform.scale = detail::load_matrix(is, "scale").data();
    d.transform.bias = detail::load_matrix(is, "bias").data();
    d.train_x = detail::load_matrix(is, "train_x");
    d.train_y = detail::load_labels(is, "train_y");
    d.test_x = detail::load_matrix(is, "test_x");
    d.test_y = detail::load_labels(is, "test_y");
    s.domains.push_back(std::move(d));
  }
  s.public_pool.x = detail::load_matrix(is, "public_x");
  s.public_pool.provenance = c.public_source == PublicSource::Mixture ? "mixture" : "heldout";
  detail::expect_token(is, "end");
  return s;
}

}  // namespace fccl
