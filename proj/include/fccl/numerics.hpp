#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fccl/errors.hpp"

namespace fccl {

/// Guard added to every normalization denominator and log argument.
inline constexpr double kEps = 1e-12;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix& operator+=(const Matrix& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }

  bool operator==(const Matrix&) const = default;

 private:
  void require_same(const Matrix& o, const char* op) const {
    if (!same_shape(o)) {
      throw ShapeError(std::string("Matrix ") + op + ": " + shape_string() + " vs " + o.shape_string());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// Aᵀ·B without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + a.shape_string() + "ᵀ x " + b.shape_string());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

/// A·Bᵀ without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_string() + " x " + b.shape_string() + "ᵀ");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      out(i, j) = s;
    }
  }
  return out;
}

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("frobenius_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline void require_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("temperature must be positive, got " + std::to_string(temperature));
  }
}

/// Row-wise log-softmax of z / temperature, max-shifted.
inline Matrix log_softmax_rows(const Matrix& z, double temperature = 1.0) {
  require_temperature(temperature);
  Matrix out(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto in = z.row(r);
    auto o = out.row(r);
    double mx = -INFINITY;
    for (double v : in) mx = std::max(mx, v / temperature);
    double s = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = in[c] / temperature - mx;
      s += std::exp(o[c]);
    }
    const double ls = std::log(s);
    for (double& v : o) v -= ls;
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& z, double temperature = 1.0) {
  require_temperature(temperature);
  Matrix out(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto in = z.row(r);
    auto o = out.row(r);
    double mx = -INFINITY;
    for (double v : in) mx = std::max(mx, v / temperature);
    double s = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] / temperature - mx);
      s += o[c];
    }
    for (double& v : o) v /= s;
  }
  return out;
}

/// Intermediates of batch standardization, kept for the backward pass.
struct Standardized {
  Matrix centered;            // z minus its column means
  std::vector<double> norms;  // root-sum-of-squares of each centered column
  Matrix value;               // centered / (norm + eps)
};

/// Column-wise mean subtraction then division by the column's norm plus eps.
/// Constant columns map to the zero column.
inline Standardized batch_standardize_forward(const Matrix& z) {
  if (z.rows() < 2) throw ShapeError("batch_standardize: need at least 2 rows, got " + z.shape_string());
  const std::size_t n = z.rows();
  const std::size_t c = z.cols();
  Standardized s{Matrix(n, c), std::vector<double>(c, 0.0), Matrix(n, c)};
  for (std::size_t j = 0; j < c; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += z(i, j);
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = z(i, j) - mean;
      s.centered(i, j) = d;
      ss += d * d;
    }
    s.norms[j] = std::sqrt(ss);
    const double denom = s.norms[j] + kEps;
    for (std::size_t i = 0; i < n; ++i) s.value(i, j) = s.centered(i, j) / denom;
  }
  return s;
}

inline Matrix batch_standardize(const Matrix& z) { return batch_standardize_forward(z).value; }

/// Vector-Jacobian product of batch_standardize.
inline Matrix batch_standardize_backward(const Standardized& s, const Matrix& grad_out) {
  if (!grad_out.same_shape(s.value)) throw ShapeError("batch_standardize_backward: shape mismatch");
  const std::size_t n = grad_out.rows();
  const std::size_t c = grad_out.cols();
  Matrix grad(n, c);
  for (std::size_t j = 0; j < c; ++j) {
    const double norm = s.norms[j];
    const double denom = norm + kEps;
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += grad_out(i, j) * s.centered(i, j);
    // d norm / d centered = centered / norm; undefined at norm == 0 where centered is 0 anyway.
    const double dnorm = norm > 0.0 ? -dot / (denom * denom) / norm : 0.0;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      grad(i, j) = grad_out(i, j) / denom + dnorm * s.centered(i, j);
      mean += grad(i, j);
    }
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) grad(i, j) -= mean;
  }
  return grad;
}

/// Sum over rows of KL(p_row || q_row); q is clamped to eps inside the log.
inline double kl_divergence_rows(const Matrix& p, const Matrix& q) {
  if (!p.same_shape(q)) {
    throw ShapeError("kl_divergence_rows: " + p.shape_string() + " vs " + q.shape_string());
  }
  auto check_row = [](std::span<const double> row, const char* name) {
    double s = 0.0;
    for (double v : row) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError(std::string("kl_divergence_rows: negative entry in ") + name);
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ParameterError(std::string("kl_divergence_rows: row of ") + name + " is not a distribution");
  };
  double total = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto pr = p.row(r);
    auto qr = q.row(r);
    check_row(pr, "p");
    check_row(qr, "q");
    for (std::size_t c = 0; c < pr.size(); ++c) {
      if (pr[c] == 0.0) continue;
      total += pr[c] * std::log(pr[c] / std::max(qr[c], kEps));
    }
  }
  return total;
}

}  // namespace fccl
