#pragma once

// Central finite differences, used as the independent oracle for every
// analytic gradient in the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "fccl/models.hpp"
#include "fccl/numerics.hpp"
#include "fccl/rng.hpp"

namespace fccl {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;
/// Below this magnitude, relative error is measured against the floor instead.
inline constexpr double kFdFloor = 1e-3;

inline double relative_error(double analytic, double numeric, double floor = kFdFloor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double step = kFdStep) {
  Matrix g(x.rows(), x.cols());
  Matrix probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + step;
    const double up = f(probe);
    probe.data()[i] = orig - step;
    const double down = f(probe);
    probe.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// Largest element-wise relative error between `analytic` and central differences of f at x.
inline double gradient_error(const std::function<double(const Matrix&)>& f, const Matrix& x, const Matrix& analytic,
                             double step = kFdStep) {
  if (!analytic.same_shape(x)) throw ShapeError("gradient_error: gradient shape " + analytic.shape_string() +
                                                " does not match input " + x.shape_string());
  const Matrix numeric = numeric_gradient(f, x, step);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    worst = std::max(worst, relative_error(analytic.data()[i], numeric.data()[i]));
  return worst;
}

/// Same check over every parameter of a model, with f evaluated on perturbed copies.
inline double model_gradient_error(const std::function<double(const ClientModel&)>& f, const ClientModel& model,
                                   const ModelGrads& analytic, double step = kFdStep) {
  ClientModel probe = model;
  double worst = 0.0;
  for (std::size_t p = 0; p < analytic.params.size(); ++p) {
    for (std::size_t j = 0; j < analytic.params[p].size(); ++j) {
      auto params = probe.mutable_parameters();
      double& v = params[p]->data()[j];
      const double orig = v;
      v = orig + step;
      const double up = f(probe);
      v = orig - step;
      const double down = f(probe);
      v = orig;
      worst = std::max(worst, relative_error(analytic.params[p].data()[j], (up - down) / (2.0 * step)));
    }
  }
  return worst;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng.index(classes));
  return y;
}

}  // namespace fccl
