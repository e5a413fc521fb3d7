#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace mcr;
using namespace mcr::testutil;

namespace {

// Direct evaluation of symmetric InfoNCE from its definition, without max subtraction.
double naive_info_nce(const Matrix& x, const Matrix& z, double tau) {
  const auto n = x.rows();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double row = 0.0, col = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      row += std::exp(x.row(i).dot(z.row(j)) / tau);
      col += std::exp(x.row(j).dot(z.row(i)) / tau);
    }
    const double pos = std::exp(x.row(i).dot(z.row(i)) / tau);
    loss -= std::log(pos / row) + std::log(pos / col);
  }
  return loss / (2.0 * static_cast<double>(n));
}

Matrix unit_rows(Matrix m) {
  normalize_rows_inplace(m);
  return m;
}

}  // namespace

TEST(IntraLoss, ZeroWhenOutputMatchesTarget) {
  Rng rng(1);
  const Matrix a = random_matrix(rng, 5, 3);
  EXPECT_EQ(intra_mcr_loss(a, a).value, 0.0);
  EXPECT_EQ(intra_mcr_loss(a, a).grad_x.cwiseAbs().maxCoeff(), 0.0);
}

TEST(IntraLoss, ThreeFourFiveUnderBothForms) {
  Matrix out(1, 2), target(1, 2);
  out << 3.0, 4.0;
  target << 0.0, 0.0;
  EXPECT_DOUBLE_EQ(intra_mcr_loss(out, target, IntraForm::squared).value, 12.5);
  EXPECT_DOUBLE_EQ(intra_mcr_loss(out, target, IntraForm::norm).value, 2.5);
}

TEST(IntraLoss, MatchesScalarLoopOracle) {
  Rng rng(2);
  const Matrix a = random_matrix(rng, 4, 3);
  const Matrix b = random_matrix(rng, 4, 3);
  double sq = 0.0, nrm = 0.0;
  for (int i = 0; i < 4; ++i) {
    double r = 0.0;
    for (int k = 0; k < 3; ++k) r += (a(i, k) - b(i, k)) * (a(i, k) - b(i, k));
    sq += r;
    nrm += std::sqrt(r);
  }
  EXPECT_NEAR(intra_mcr_loss(a, b).value, 0.5 * sq / 4.0, 1e-7);
  EXPECT_NEAR(intra_mcr_loss(a, b, IntraForm::norm).value, 0.5 * nrm / 4.0, 1e-7);
  EXPECT_THROW(intra_mcr_loss(a, random_matrix(rng, 3, 3)), ShapeError);
}

TEST(IntraLoss, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  const Matrix b = random_matrix(rng, 4, 3);
  for (auto form : {IntraForm::squared, IntraForm::norm}) {
    Matrix a = random_matrix(rng, 4, 3);
    const Matrix g = intra_mcr_loss(a, b, form).grad_x;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      const double orig = a.data()[i];
      a.data()[i] = orig + 1e-6;
      const double up = intra_mcr_loss(a, b, form).value;
      a.data()[i] = orig - 1e-6;
      const double down = intra_mcr_loss(a, b, form).value;
      a.data()[i] = orig;
      EXPECT_NEAR(g.data()[i], (up - down) / 2e-6, 1e-7);
    }
  }
}

TEST(IntraLoss, NormFormIsFiniteAtZeroResidual) {
  Matrix a = Matrix::Zero(2, 2);
  const auto r = intra_mcr_loss(a, a, IntraForm::norm);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.grad_x.allFinite());
}

TEST(InfoNce, SingleRowIsZero) {
  Matrix x(1, 3);
  x << 0.0, 0.6, 0.8;
  EXPECT_EQ(info_nce(x, x, 0.05).value, 0.0);
}

TEST(InfoNce, UniformSimilaritiesGiveLogB) {
  for (Eigen::Index b : {2, 5, 17}) {
    Matrix x = Matrix::Zero(b, 3);
    Matrix z = Matrix::Zero(b, 3);
    x.col(0).setOnes();
    z.col(1).setOnes();
    EXPECT_NEAR(info_nce(x, z, 0.05).value, std::log(static_cast<double>(b)), 1e-6);
    x.col(0).setConstant(std::sqrt(0.5));
    x.col(1).setConstant(std::sqrt(0.5));
    EXPECT_NEAR(info_nce(x, x, 0.05).value, std::log(static_cast<double>(b)), 1e-6);
  }
}

TEST(InfoNce, TwoByTwoIdentityMatchesHandFormula) {
  const Matrix x = Matrix::Identity(2, 2);
  // Each of the four softmaxes is e^20 / (e^20 + e^0).
  const double expected = std::log1p(std::exp(-20.0));
  EXPECT_NEAR(info_nce(x, x, 0.05).value, expected, 1e-15);
  EXPECT_NEAR(naive_info_nce(x, x, 0.05), expected, 1e-15);
}

TEST(InfoNce, MatchesDirectDefinitionOnRandomInputs) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = random_unit_rows(rng, 9, 6);
    const Matrix z = random_unit_rows(rng, 9, 6);
    EXPECT_NEAR(info_nce(x, z, 0.5).value, naive_info_nce(x, z, 0.5), 1e-10);
  }
}

TEST(InfoNce, NonNegativeAndBelowLogBWhenDiagonalDominates) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = random_unit_rows(rng, 8, 16);
    const Matrix z = unit_rows(x + 0.05 * random_matrix(rng, 8, 16));
    const Matrix s = x * z.transpose();
    bool dominant = true;
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j)
        if (i != j) dominant = dominant && s(i, i) > s(i, j) && s(i, i) > s(j, i);
    ASSERT_TRUE(dominant);
    const double l = info_nce(x, z, 0.05).value;
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, std::log(8.0));
  }
}

TEST(InfoNce, PermutationEquivariant) {
  Rng rng(6);
  const Matrix x = random_unit_rows(rng, 10, 5);
  const Matrix z = random_unit_rows(rng, 10, 5);
  std::vector<Eigen::Index> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const Matrix xp = x(perm, Eigen::all);
  const Matrix zp = z(perm, Eigen::all);
  EXPECT_NEAR(info_nce(x, z, 0.05).value, info_nce(xp, zp, 0.05).value, 1e-6);
}

TEST(InfoNce, RejectsBadInputs) {
  Rng rng(7);
  const Matrix x = random_unit_rows(rng, 4, 3);
  EXPECT_THROW(info_nce(x, random_unit_rows(rng, 5, 3), 0.05), ShapeError);
  EXPECT_THROW(info_nce(x, 2.0 * x, 0.05), Error);
  EXPECT_THROW(info_nce(x, x, 0.0), ConfigError);
}

TEST(InfoNce, GradientsThroughNormalizationMatchFiniteDifferences) {
  Rng rng(8);
  Matrix u = random_matrix(rng, 6, 4);
  Matrix v = random_matrix(rng, 6, 4);
  auto loss = [&](const Matrix& a, const Matrix& b) { return info_nce(unit_rows(a), unit_rows(b), 0.3).value; };
  Matrix x = u, z = v;
  const Vector nx = normalize_rows_inplace(x);
  const Vector nz = normalize_rows_inplace(z);
  const auto lg = info_nce(x, z, 0.3, true);
  const Matrix gu = normalize_rows_backward(x, nx, lg.grad_x);
  const Matrix gv = normalize_rows_backward(z, nz, lg.grad_z);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double ou = u.data()[i];
    u.data()[i] = ou + h;
    const double up = loss(u, v);
    u.data()[i] = ou - h;
    const double down = loss(u, v);
    u.data()[i] = ou;
    EXPECT_NEAR(gu.data()[i], (up - down) / (2 * h), 1e-7);

    const double ov = v.data()[i];
    v.data()[i] = ov + h;
    const double up2 = loss(u, v);
    v.data()[i] = ov - h;
    const double down2 = loss(u, v);
    v.data()[i] = ov;
    EXPECT_NEAR(gv.data()[i], (up2 - down2) / (2 * h), 1e-7);
  }
}
