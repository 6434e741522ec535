#pragma once

// Collaborative and local training objectives with analytic gradients.
//
// Every loss returns a LossWithGrad whose gradient matrices are keyed by the
// name of the input they differentiate and have that input's exact shape.
// Averaged server-side targets (logits and similarity) are constants: no
// gradient is produced for them.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fccl/numerics.hpp"

namespace fccl {

inline constexpr double kDefaultLambda = 0.0051;
inline constexpr double kDefaultMu = 0.02;
inline constexpr double kDefaultOmega = 3.0;
inline constexpr double kDefaultTau = 3.0;

struct LossWithGrad {
  double value = 0.0;
  std::map<std::string, Matrix> grads;

  const Matrix& grad(const std::string& name) const {
    auto it = grads.find(name);
    if (it == grads.end()) throw StateError("LossWithGrad: no gradient named '" + name + "'");
    return it->second;
  }

  /// Adds `other` into this loss, scaling its value and gradients by `weight`.
  LossWithGrad& accumulate(const LossWithGrad& other, double weight = 1.0) {
    value += weight * other.value;
    for (const auto& [name, g] : other.grads) {
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, g * weight);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) it->second.data()[i] += weight * g.data()[i];
      }
    }
    return *this;
  }
};

/// Batch cross-correlation between local logits and the averaged logits.
/// The inputs are retained so the loss can backpropagate into z_local.
struct CorrelationMatrix {
  Matrix m;
  Matrix z_local;
  Matrix z_avg;
};

/// Cosine similarities between instances of one batch, divided by mu, with the
/// self-similarity removed by index. `features` holds the source rows when the
/// matrix was computed from a model (empty for server averages).
struct SimilarityMatrix {
  Matrix s;
  double mu = kDefaultMu;
  Matrix features;
};

enum class FntdVariant { Renormalized, Literal };

inline const char* to_string(FntdVariant v) {
  return v == FntdVariant::Renormalized ? "renormalized" : "literal";
}

/// Diagonal +1, off-diagonal -1.
inline Matrix target_correlation(std::size_t classes) {
  Matrix t(classes, classes, -1.0);
  for (std::size_t i = 0; i < classes; ++i) t(i, i) = 1.0;
  return t;
}

/// Element-wise mean of equally shaped matrices.
inline Matrix mean_of(std::span<const Matrix> ms) {
  if (ms.empty()) throw ParameterError("mean_of: empty input");
  Matrix out(ms.front().rows(), ms.front().cols());
  for (const auto& m : ms) out += m;
  out *= 1.0 / static_cast<double>(ms.size());
  return out;
}

namespace detail {

inline void require_labels(std::span<const int> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) {
    throw ShapeError("labels: expected " + std::to_string(rows) + " labels, got " + std::to_string(labels.size()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ParameterError("labels: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": " + a.shape_string() + " vs " + b.shape_string());
}

struct CorrelationParts {
  Standardized local;
  Matrix avg_std;
  std::vector<double> local_norm;  // ‖Φ(z_local)[:,u]‖
  std::vector<double> avg_norm;    // ‖Φ(z_avg)[:,v]‖
  Matrix inner;                    // Φ(z_local)ᵀ Φ(z_avg)
  Matrix m;
};

inline std::vector<double> column_norms(const Matrix& a) {
  std::vector<double> n(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) n[j] += a(i, j) * a(i, j);
  for (double& v : n) v = std::sqrt(v);
  return n;
}

inline CorrelationParts correlation_parts(const Matrix& z_local, const Matrix& z_avg) {
  require_same_shape(z_local, z_avg, "cross_correlation_matrix");
  if (z_local.rows() < 2) throw ParameterError("cross_correlation_matrix: batch must have at least 2 rows");
  CorrelationParts p;
  p.local = batch_standardize_forward(z_local);
  p.avg_std = batch_standardize(z_avg);
  p.local_norm = column_norms(p.local.value);
  p.avg_norm = column_norms(p.avg_std);
  p.inner = matmul_tn(p.local.value, p.avg_std);
  const std::size_t c = z_local.cols();
  p.m = Matrix(c, c);
  for (std::size_t u = 0; u < c; ++u)
    for (std::size_t v = 0; v < c; ++v) p.m(u, v) = p.inner(u, v) / (p.local_norm[u] * p.avg_norm[v] + kEps);
  return p;
}

/// Backpropagates dL/dM through the correlation into z_local.
inline Matrix correlation_backward(const CorrelationParts& p, const Matrix& grad_m) {
  const std::size_t c = grad_m.rows();
  const std::size_t b = p.avg_std.rows();
  Matrix grad_inner(c, c);
  std::vector<double> grad_norm(c, 0.0);
  for (std::size_t u = 0; u < c; ++u) {
    for (std::size_t v = 0; v < c; ++v) {
      const double denom = p.local_norm[u] * p.avg_norm[v] + kEps;
      grad_inner(u, v) = grad_m(u, v) / denom;
      grad_norm[u] -= grad_m(u, v) * p.inner(u, v) * p.avg_norm[v] / (denom * denom);
    }
  }
  // Φ_local gradient: from the inner product and from its own column norm.
  Matrix grad_std = matmul_nt(p.avg_std, grad_inner);  // B×C
  for (std::size_t u = 0; u < c; ++u) {
    if (p.local_norm[u] <= 0.0) continue;
    const double k = grad_norm[u] / p.local_norm[u];
    for (std::size_t i = 0; i < b; ++i) grad_std(i, u) += k * p.local.value(i, u);
  }
  return batch_standardize_backward(p.local, grad_std);
}

struct SimilarityParts {
  Matrix unit;               // rows scaled to unit norm
  std::vector<double> norm;  // original row norms
  Matrix full;               // B×B cosine / mu
};

inline SimilarityParts similarity_parts(const Matrix& h, double mu) {
  if (h.rows() < 2) throw ParameterError("instance_similarity: batch must have at least 2 rows");
  if (!(mu > 0.0)) throw ParameterError("instance_similarity: mu must be positive");
  SimilarityParts p{Matrix(h.rows(), h.cols()), std::vector<double>(h.rows(), 0.0), {}};
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double ss = 0.0;
    for (double v : h.row(i)) ss += v * v;
    p.norm[i] = std::sqrt(ss);
    const double denom = std::max(p.norm[i], kEps);  // guard only bites on (near) zero rows
    for (std::size_t j = 0; j < h.cols(); ++j) p.unit(i, j) = h(i, j) / denom;
  }
  p.full = matmul_nt(p.unit, p.unit);
  p.full *= 1.0 / mu;
  return p;
}

inline Matrix drop_diagonal(const Matrix& full) {
  const std::size_t b = full.rows();
  Matrix out(b, b - 1);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t k = 0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j != i) out(i, k++) = full(i, j);
    }
  }
  return out;
}

/// Backpropagates dL/dS (B×(B−1)) into the source features.
inline Matrix similarity_backward(const Matrix& h, double mu, const Matrix& grad_s) {
  const SimilarityParts p = similarity_parts(h, mu);
  const std::size_t b = h.rows();
  Matrix g_full(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t k = 0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j != i) g_full(i, j) = grad_s(i, k++) / mu;
    }
  }
  Matrix g_sym = g_full + transpose(g_full);
  Matrix g_unit = matmul(g_sym, p.unit);
  Matrix grad(b, h.cols());
  for (std::size_t i = 0; i < b; ++i) {
    const double r = p.norm[i];
    const double denom = std::max(r, kEps);
    double dot = 0.0;
    for (std::size_t j = 0; j < h.cols(); ++j) dot += g_unit(i, j) * h(i, j);
    const double radial = r > kEps ? dot / (r * r * r) : 0.0;
    for (std::size_t j = 0; j < h.cols(); ++j) grad(i, j) = g_unit(i, j) / denom - radial * h(i, j);
  }
  return grad;
}

/// Mean-over-rows KL(softmax(target) || softmax(student)) with gradient wrt the
/// student logits. Both are divided by tau before the softmax.
inline LossWithGrad softmax_kl(const Matrix& target, const Matrix& student, double tau, const std::string& key) {
  require_same_shape(target, student, "softmax_kl");
  const Matrix log_t = log_softmax_rows(target, tau);
  const Matrix log_s = log_softmax_rows(student, tau);
  const double inv_b = 1.0 / static_cast<double>(student.rows());
  LossWithGrad out;
  Matrix g(student.rows(), student.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < student.rows(); ++r) {
    for (std::size_t c = 0; c < student.cols(); ++c) {
      const double pt = std::exp(log_t(r, c));
      if (pt > 0.0) total += pt * (log_t(r, c) - log_s(r, c));
      g(r, c) = (std::exp(log_s(r, c)) - pt) * inv_b / tau;
    }
  }
  out.value = total * inv_b;
  out.grads.emplace(key, std::move(g));
  return out;
}

}  // namespace detail

inline CorrelationMatrix cross_correlation_matrix(const Matrix& z_local, const Matrix& z_avg) {
  auto parts = detail::correlation_parts(z_local, z_avg);
  return {std::move(parts.m), z_local, z_avg};
}

/// Σ_u (1−M_uu)² + λ Σ_{u≠v} (1+M_uv)² for a given correlation matrix.
inline double fccm_value(const Matrix& m, double lambda) {
  if (m.rows() != m.cols()) throw ShapeError("fccm_value: correlation matrix must be square, got " + m.shape_string());
  double value = 0.0;
  for (std::size_t u = 0; u < m.rows(); ++u) {
    for (std::size_t v = 0; v < m.cols(); ++v) {
      const double d = u == v ? 1.0 - m(u, v) : 1.0 + m(u, v);
      value += (u == v ? 1.0 : lambda) * d * d;
    }
  }
  return value;
}

/// fccm_value of the correlation, differentiated into z_local.
inline LossWithGrad fccm_loss(const CorrelationMatrix& corr, double lambda) {
  if (!(lambda > 0.0)) throw ParameterError("fccm_loss: lambda must be positive");
  const auto parts = detail::correlation_parts(corr.z_local, corr.z_avg);
  const Matrix& m = parts.m;
  const std::size_t c = m.rows();
  Matrix grad_m(c, c);
  double value = 0.0;
  for (std::size_t u = 0; u < c; ++u) {
    for (std::size_t v = 0; v < c; ++v) {
      if (u == v) {
        const double d = 1.0 - m(u, u);
        value += d * d;
        grad_m(u, u) = -2.0 * d;
      } else {
        const double d = 1.0 + m(u, v);
        value += lambda * d * d;
        grad_m(u, v) = 2.0 * lambda * d;
      }
    }
  }
  LossWithGrad out;
  out.value = value;
  out.grads.emplace("z_local", detail::correlation_backward(parts, grad_m));
  return out;
}

inline SimilarityMatrix instance_similarity(const Matrix& h, double mu) {
  const auto parts = detail::similarity_parts(h, mu);
  return {detail::drop_diagonal(parts.full), mu, h};
}

/// Server-side mean of client similarity matrices; carries no source features.
inline SimilarityMatrix average_similarity(std::span<const SimilarityMatrix> sims) {
  if (sims.empty()) throw ParameterError("average_similarity: empty input");
  std::vector<Matrix> ss;
  ss.reserve(sims.size());
  for (const auto& s : sims) {
    if (s.mu != sims.front().mu) throw ParameterError("average_similarity: mu differs between clients");
    ss.push_back(s.s);
  }
  return {mean_of(ss), sims.front().mu, {}};
}

/// Mean over anchor rows of KL(softmax(S̄) || softmax(S_local)).
/// Gradients: "s_local" always; "h_local" when s_local carries its features.
inline LossWithGrad fisl_loss(const SimilarityMatrix& s_local, const SimilarityMatrix& s_avg) {
  detail::require_same_shape(s_local.s, s_avg.s, "fisl_loss");
  if (s_local.mu != s_avg.mu) throw ParameterError("fisl_loss: mu differs between local and average");
  LossWithGrad out = detail::softmax_kl(s_avg.s, s_local.s, 1.0, "s_local");
  if (!s_local.features.empty()) {
    out.grads.emplace("h_local", detail::similarity_backward(s_local.features, s_local.mu, out.grads.at("s_local")));
  }
  return out;
}

/// FCCM + ω·FISL. Gradients "z_local" and "h_local".
inline LossWithGrad collaborative_loss(const Matrix& z_local, const Matrix& z_avg, const Matrix& h_local,
                                       const SimilarityMatrix& s_avg, double lambda, double omega, double mu) {
  if (omega < 0.0) throw ParameterError("collaborative_loss: omega must be non-negative");
  LossWithGrad out = fccm_loss(cross_correlation_matrix(z_local, z_avg), lambda);
  if (omega == 0.0) {
    out.grads.emplace("h_local", Matrix(h_local.rows(), h_local.cols()));
    return out;
  }
  LossWithGrad fisl = fisl_loss(instance_similarity(h_local, mu), s_avg);
  fisl.grads.erase("s_local");
  out.accumulate(fisl, omega);
  return out;
}

/// Mean negative log-likelihood of the labels under softmax(z).
inline LossWithGrad ce_loss(const Matrix& z, std::span<const int> labels) {
  detail::require_labels(labels, z.rows(), z.cols());
  const Matrix log_p = log_softmax_rows(z);
  const double inv_b = 1.0 / static_cast<double>(z.rows());
  Matrix g(z.rows(), z.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const auto t = static_cast<std::size_t>(labels[r]);
    total -= log_p(r, t);
    for (std::size_t c = 0; c < z.cols(); ++c) g(r, c) = std::exp(log_p(r, c)) * inv_b;
    g(r, t) -= inv_b;
  }
  LossWithGrad out;
  out.value = total * inv_b;
  out.grads.emplace("z", std::move(g));
  return out;
}

/// Mean KL(softmax(z_t/τ) || softmax(z_s/τ)); optionally scaled by τ².
inline LossWithGrad kd_loss(const Matrix& z_teacher, const Matrix& z_student, double tau, bool scale_tau_sq = false) {
  require_temperature(tau);
  LossWithGrad out = detail::softmax_kl(z_teacher, z_student, tau, "z_student");
  if (scale_tau_sq) {
    out.value *= tau * tau;
    out.grads.at("z_student") *= tau * tau;
  }
  return out;
}

struct KdParts {
  double td = 0.0;
  double ntd = 0.0;
};

/// Splits the KD value into its target-class and non-target-class terms.
inline KdParts decompose_kd(const Matrix& z_teacher, const Matrix& z_student, double tau,
                            std::span<const int> target_labels) {
  require_temperature(tau);
  detail::require_same_shape(z_teacher, z_student, "decompose_kd");
  detail::require_labels(target_labels, z_student.rows(), z_student.cols());
  const Matrix log_t = log_softmax_rows(z_teacher, tau);
  const Matrix log_s = log_softmax_rows(z_student, tau);
  KdParts parts;
  for (std::size_t r = 0; r < z_student.rows(); ++r) {
    const auto t = static_cast<std::size_t>(target_labels[r]);
    for (std::size_t c = 0; c < z_student.cols(); ++c) {
      const double pt = std::exp(log_t(r, c));
      if (pt <= 0.0) continue;
      const double term = pt * (log_t(r, c) - log_s(r, c));
      (c == t ? parts.td : parts.ntd) += term;
    }
  }
  const double inv_b = 1.0 / static_cast<double>(z_student.rows());
  parts.td *= inv_b;
  parts.ntd *= inv_b;
  return parts;
}

/// Non-target distillation from a frozen teacher.
///
/// Renormalized: KL between the softmax over non-target logits only, so the
/// student's target logit receives exactly zero gradient. Literal: the
/// non-target summands of the full-softmax KL.
inline LossWithGrad fntd_loss(const Matrix& z_teacher, const Matrix& z_student, double tau,
                              std::span<const int> target_labels,
                              FntdVariant variant = FntdVariant::Renormalized) {
  require_temperature(tau);
  detail::require_same_shape(z_teacher, z_student, "fntd_loss");
  const std::size_t classes = z_student.cols();
  if (classes < 2) throw ParameterError("fntd_loss: need at least 2 classes");
  detail::require_labels(target_labels, z_student.rows(), classes);
  const double inv_b = 1.0 / static_cast<double>(z_student.rows());
  Matrix g(z_student.rows(), classes);
  double total = 0.0;

  if (variant == FntdVariant::Literal) {
    const Matrix log_t = log_softmax_rows(z_teacher, tau);
    const Matrix log_s = log_softmax_rows(z_student, tau);
    for (std::size_t r = 0; r < z_student.rows(); ++r) {
      const auto t = static_cast<std::size_t>(target_labels[r]);
      const double pt_target = std::exp(log_t(r, t));
      for (std::size_t c = 0; c < classes; ++c) {
        const double pt = std::exp(log_t(r, c));
        const double ps = std::exp(log_s(r, c));
        if (c != t && pt > 0.0) total += pt * (log_t(r, c) - log_s(r, c));
        // d/dz_c of −Σ_{u≠t} pT_u log pS_u = (pS_c (1 − pT_t) − [c≠t] pT_c) / τ
        g(r, c) = (ps * (1.0 - pt_target) - (c != t ? pt : 0.0)) * inv_b / tau;
      }
    }
  } else {
    std::vector<double> lt(classes), ls(classes);
    for (std::size_t r = 0; r < z_student.rows(); ++r) {
      const auto t = static_cast<std::size_t>(target_labels[r]);
      auto log_renorm = [&](std::span<const double> z, std::vector<double>& out) {
        double mx = -INFINITY;
        for (std::size_t c = 0; c < classes; ++c)
          if (c != t) mx = std::max(mx, z[c] / tau);
        double s = 0.0;
        for (std::size_t c = 0; c < classes; ++c)
          if (c != t) s += std::exp(z[c] / tau - mx);
        const double ls_ = std::log(s);
        for (std::size_t c = 0; c < classes; ++c) out[c] = c == t ? 0.0 : z[c] / tau - mx - ls_;
      };
      log_renorm(z_teacher.row(r), lt);
      log_renorm(z_student.row(r), ls);
      for (std::size_t c = 0; c < classes; ++c) {
        if (c == t) {
          g(r, c) = 0.0;
          continue;
        }
        const double pt = std::exp(lt[c]);
        if (pt > 0.0) total += pt * (lt[c] - ls[c]);
        g(r, c) = (std::exp(ls[c]) - pt) * inv_b / tau;
      }
    }
  }
  LossWithGrad out;
  out.value = total * inv_b;
  out.grads.emplace("z_student", std::move(g));
  return out;
}

/// CE + FNTD against the previous-epoch snapshot.
inline LossWithGrad local_loss_fcclplus(const Matrix& z_student, std::span<const int> labels, const Matrix& z_teacher,
                                        double tau, FntdVariant variant = FntdVariant::Renormalized) {
  LossWithGrad ce = ce_loss(z_student, labels);
  LossWithGrad out;
  out.value = ce.value;
  out.grads.emplace("z_student", std::move(ce.grads.at("z")));
  out.accumulate(fntd_loss(z_teacher, z_student, tau, labels, variant));
  return out;
}

/// CE + τ²·KD against the previous-epoch snapshot.
inline LossWithGrad local_loss_plain_kd(const Matrix& z_student, std::span<const int> labels, const Matrix& z_teacher,
                                        double tau, bool scale_tau_sq = true) {
  LossWithGrad ce = ce_loss(z_student, labels);
  LossWithGrad out;
  out.value = ce.value;
  out.grads.emplace("z_student", std::move(ce.grads.at("z")));
  out.accumulate(kd_loss(z_teacher, z_student, tau, scale_tau_sq));
  return out;
}

/// CE + KD(previous snapshot) + KD(pretrained snapshot).
inline LossWithGrad local_loss_fccl_conference(const Matrix& z_student, std::span<const int> labels,
                                               const Matrix& z_prev, const Matrix& z_pretrained, double tau,
                                               bool include_pretrained = true) {
  LossWithGrad out = local_loss_plain_kd(z_student, labels, z_prev, tau, false);
  if (include_pretrained) out.accumulate(kd_loss(z_pretrained, z_student, tau));
  return out;
}

/// Row-wise KL(softmax(Z̄) || softmax(Z_i)) on public logits (FedDF-style).
inline LossWithGrad feddf_loss(const Matrix& z_local, const Matrix& z_avg, double tau = 1.0) {
  return detail::softmax_kl(z_avg, z_local, tau, "z_local");
}

/// Mean squared error between Z_i and Z̄ over all entries (FedMD-style).
inline LossWithGrad fedmd_loss(const Matrix& z_local, const Matrix& z_avg) {
  detail::require_same_shape(z_local, z_avg, "fedmd_loss");
  const double inv_n = 1.0 / static_cast<double>(z_local.size());
  Matrix g(z_local.rows(), z_local.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < z_local.size(); ++i) {
    const double d = z_local.data()[i] - z_avg.data()[i];
    total += d * d;
    g.data()[i] = 2.0 * d * inv_n;
  }
  LossWithGrad out;
  out.value = total * inv_n;
  out.grads.emplace("z_local", std::move(g));
  return out;
}

}  // namespace fccl
