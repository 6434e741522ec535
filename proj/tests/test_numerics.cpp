#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fccl/gradcheck.hpp"
#include "fccl/numerics.hpp"
#include "fccl/rng.hpp"

using namespace fccl;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

}  // namespace

TEST(Matrix, ConstructionChecksLength) {
  EXPECT_THROW(Matrix(2, 3, std::vector<double>(5)), ShapeError);
  EXPECT_THROW((Matrix{{1.0, 2.0}, {3.0}}), ShapeError);
  const Matrix m(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.size(), m.rows() * m.cols());
  EXPECT_EQ(m(1, 0), 4.0);
  EXPECT_EQ(m.shape_string(), "2x3");
}

TEST(Matrix, ElementwiseOpsRejectShapeMismatch) {
  Matrix a(2, 2, 1.0);
  EXPECT_THROW(a += Matrix(2, 3), ShapeError);
  EXPECT_THROW(a -= Matrix(3, 2), ShapeError);
  EXPECT_EQ((a + a)(1, 1), 2.0);
  EXPECT_EQ((a * 3.0)(0, 1), 3.0);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  const Matrix a = random_matrix(2, 4, rng);
  EXPECT_EQ(matmul(Matrix::identity(2), a), a);
}

TEST(Matmul, HandArithmetic) {
  const Matrix out = matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{0}, {1}});
  EXPECT_EQ(out, (Matrix{{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(2);
  const Matrix a = random_matrix(5, 7, rng), b = random_matrix(7, 3, rng);
  EXPECT_LE(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, TransposedVariantsMatchExplicitTranspose) {
  Rng rng(3);
  const Matrix a = random_matrix(6, 4, rng), b = random_matrix(6, 3, rng), c = random_matrix(5, 4, rng);
  EXPECT_LE(max_abs_diff(matmul_tn(a, b), naive_matmul(transpose(a), b)), 1e-12);
  EXPECT_LE(max_abs_diff(matmul_nt(a, c), naive_matmul(a, transpose(c))), 1e-12);
}

TEST(Matmul, DimensionMismatchIsShapeError) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(matmul_tn(Matrix(2, 3), Matrix(3, 3)), ShapeError);
  EXPECT_THROW(matmul_nt(Matrix(2, 3), Matrix(2, 4)), ShapeError);
}

TEST(Matmul, AssociativeOnSeededTriples) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(derive_seed(4, "assoc", s));
    const Matrix a = random_matrix(4, 5, rng), b = random_matrix(5, 6, rng), c = random_matrix(6, 3, rng);
    const Matrix l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < l.size(); ++i)
      EXPECT_LE(relative_error(l.data()[i], r.data()[i], 1e-300), 1e-9);
  }
}

TEST(Softmax, UniformRow) {
  const Matrix p = softmax_rows(Matrix{{0, 0, 0}});
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ClosedFormTwoClass) {
  const Matrix p = softmax_rows(Matrix{{std::log(2.0), 0.0}});
  EXPECT_NEAR(p(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p(0, 1), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  const Matrix p = softmax_rows(Matrix{{1000.0, 0.0}});
  EXPECT_TRUE(p.all_finite());
  EXPECT_EQ(p(0, 0), 1.0);
  EXPECT_EQ(p(0, 1), 0.0);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(5);
  const Matrix p = softmax_rows(random_matrix(10, 7, rng, 5.0), 2.5);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, NonPositiveTemperatureRejected) {
  EXPECT_THROW(softmax_rows(Matrix(1, 2), 0.0), ParameterError);
  EXPECT_THROW(softmax_rows(Matrix(1, 2), -1.0), ParameterError);
  EXPECT_THROW(log_softmax_rows(Matrix(1, 2), 0.0), ParameterError);
}

TEST(Softmax, PermutationEquivariant) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const Matrix z = random_matrix(1, 6, rng, 3.0);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Matrix zp(1, 6);
    for (std::size_t c = 0; c < 6; ++c) zp(0, c) = z(0, perm[c]);
    const Matrix p = softmax_rows(z), pp = softmax_rows(zp);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(pp(0, c), p(0, perm[c]), 1e-15);
  }
}

TEST(Softmax, TemperatureReparameterization) {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const Matrix z = random_matrix(4, 5, rng, 4.0);
    const double tau = rng.uniform(0.2, 10.0);
    EXPECT_LE(max_abs_diff(softmax_rows(z, tau), softmax_rows(z * (1.0 / tau), 1.0)), 1e-12);
  }
}

TEST(Softmax, LogSoftmaxConsistent) {
  Rng rng(8);
  const Matrix z = random_matrix(3, 4, rng, 2.0);
  const Matrix lp = log_softmax_rows(z, 3.0), p = softmax_rows(z, 3.0);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(std::exp(lp.data()[i]), p.data()[i], 1e-15);
}

TEST(BatchStandardize, HandColumn) {
  const Matrix s = batch_standardize(Matrix{{1}, {0}, {1}});
  const double norm = std::sqrt(6.0 / 9.0);
  EXPECT_NEAR(s(0, 0), (1.0 / 3.0) / norm, 1e-11);
  EXPECT_NEAR(s(1, 0), (-2.0 / 3.0) / norm, 1e-11);
  EXPECT_NEAR(s(2, 0), (1.0 / 3.0) / norm, 1e-11);
}

TEST(BatchStandardize, ConstantColumnMapsToZero) {
  const Matrix s = batch_standardize(Matrix{{5, 1}, {5, 2}, {5, 3}});
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(s(r, 0), 0.0);
  EXPECT_TRUE(s.all_finite());
}

TEST(BatchStandardize, SeededColumnsHaveZeroMeanUnitNorm) {
  Rng rng(9);
  const Matrix s = batch_standardize(random_matrix(12, 4, rng, 3.0));
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0, ss = 0.0;
    for (std::size_t r = 0; r < 12; ++r) {
      mean += s(r, c);
      ss += s(r, c) * s(r, c);
    }
    EXPECT_NEAR(mean / 12.0, 0.0, 1e-10);
    EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-10);
  }
}

TEST(BatchStandardize, NearlyIdempotent) {
  Rng rng(10);
  const Matrix s = batch_standardize(random_matrix(8, 3, rng));
  EXPECT_LT(max_abs_diff(batch_standardize(s), s), 1e-9);
}

TEST(BatchStandardize, SingleRowIsShapeError) { EXPECT_THROW(batch_standardize(Matrix(1, 3)), ShapeError); }

TEST(BatchStandardize, BackwardMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(derive_seed(11, "bs", s));
    const Matrix z = random_matrix(6, 3, rng), w = random_matrix(6, 3, rng);
    const auto f = [&](const Matrix& x) {
      const Matrix v = batch_standardize(x);
      double t = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) t += v.data()[i] * w.data()[i];
      return t;
    };
    const Matrix g = batch_standardize_backward(batch_standardize_forward(z), w);
    EXPECT_LE(gradient_error(f, z, g), kFdTolerance);
  }
}

TEST(KlDivergence, IdenticalRowsGiveZero) {
  const Matrix p{{0.2, 0.3, 0.5}, {0.1, 0.1, 0.8}};
  EXPECT_EQ(kl_divergence_rows(p, p), 0.0);
}

TEST(KlDivergence, ClosedForm) {
  EXPECT_NEAR(kl_divergence_rows(Matrix{{1.0, 0.0}}, Matrix{{0.5, 0.5}}), std::log(2.0), 1e-15);
}

TEST(KlDivergence, MatchesElementwiseOracle) {
  Rng rng(12);
  const Matrix p = softmax_rows(random_matrix(5, 4, rng, 2.0)), q = softmax_rows(random_matrix(5, 4, rng, 2.0));
  double oracle = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) oracle += p.data()[i] * (std::log(p.data()[i]) - std::log(q.data()[i]));
  EXPECT_NEAR(kl_divergence_rows(p, q), oracle, 1e-12);
}

TEST(KlDivergence, ZeroTargetMassIsIgnoredAndZeroStudentMassClamped) {
  const double v = kl_divergence_rows(Matrix{{0.5, 0.5, 0.0}}, Matrix{{1.0, 0.0, 0.0}});
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / kEps), 1e-9);
}

TEST(KlDivergence, NonNegativeOnRandomPairs) {
  Rng rng(13);
  for (int i = 0; i < 2000; ++i) {
    const std::size_t c = 2 + rng.index(8);
    const Matrix p = softmax_rows(random_matrix(1, c, rng, 3.0)), q = softmax_rows(random_matrix(1, c, rng, 3.0));
    EXPECT_GE(kl_divergence_rows(p, q), -1e-12);
  }
}

TEST(KlDivergence, Errors) {
  EXPECT_THROW(kl_divergence_rows(Matrix{{0.5, 0.5}}, Matrix{{1.0}}), ShapeError);
  EXPECT_THROW(kl_divergence_rows(Matrix{{0.5, 0.6}}, Matrix{{0.5, 0.5}}), ParameterError);
  EXPECT_THROW(kl_divergence_rows(Matrix{{1.5, -0.5}}, Matrix{{0.5, 0.5}}), ParameterError);
}

TEST(Rng, DerivedSeedsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(7, "data"), derive_seed(7, "data"));
  EXPECT_NE(derive_seed(7, "data"), derive_seed(7, "init"));
  EXPECT_NE(derive_seed(7, "init", 0), derive_seed(7, "init", 1));
  EXPECT_NE(derive_seed(7, "data"), derive_seed(8, "data"));
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.normal(), b.normal());
}
