#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace vcee;
using testutil::random_fh;
using testutil::random_ner;

TEST(BuildSigma, FayHerriotHandValue) {
  const LmmSpec spec = make_fay_herriot(Vector::Ones(2));
  const Matrix S = build_sigma(spec, Vector::Constant(1, 1.0));
  EXPECT_TRUE(S.isApprox(2.0 * Matrix::Identity(2, 2)));
}

TEST(BuildSigma, NestedErrorZeroEffectVariance) {
  const LmmSpec spec = make_nested_error({1, 1}, Matrix::Ones(2, 1));
  Vector psi(2);
  psi << 0.0, 1.0;
  EXPECT_TRUE(build_sigma(spec, psi).isApprox(Matrix::Identity(2, 2)));
}

TEST(BuildSigma, NestedErrorSingleCluster) {
  const LmmSpec spec = make_nested_error({2}, Matrix::Ones(2, 1));
  Matrix expected(2, 2);
  expected << 2, 1, 1, 2;
  EXPECT_TRUE(build_sigma(spec, Vector::Ones(2)).isApprox(expected));
}

TEST(BuildSigma, NotPositiveDefiniteThrows) {
  const LmmSpec spec = make_fay_herriot(Vector::Ones(3));
  EXPECT_THROW(build_sigma(spec, Vector::Constant(1, -2.0)), NotPositiveDefinite);
}

TEST(BuildSigma, BoundaryPsiGivesD) {
  const Vector D = Vector::Ones(2);
  const LmmSpec spec = make_fay_herriot(D);
  EXPECT_TRUE(build_sigma(spec, Vector::Zero(1)).isApprox(Matrix(D.asDiagonal())));
}

TEST(SigmaDerivs, BundledModels) {
  const LmmSpec fh = make_fay_herriot(Vector::Constant(4, 0.5));
  const auto d = sigma_derivs(fh, Vector::Constant(1, 0.7));
  EXPECT_TRUE(d.first[0].isApprox(Matrix::Identity(4, 4)));
  EXPECT_TRUE(d.second_is_zero);

  const LmmSpec ner = make_nested_error({2, 3}, Matrix::Ones(5, 1));
  const auto dn = sigma_derivs(ner, Vector::Ones(2));
  const Matrix G = ner.Z * ner.Z.transpose();
  EXPECT_TRUE(dn.first[0].isApprox(G));
  EXPECT_TRUE(dn.first[1].isApprox(Matrix::Identity(5, 5)));
  const auto table = sigma_second_table(ner, dn);
  ASSERT_TRUE(table.has_value());
  for (const auto& row : *table)
    for (const auto& M : row) EXPECT_EQ(M.norm(), 0.0);
}

TEST(SigmaDerivs, CentralDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const LmmSpec spec = trial % 2 ? random_fh(rng, 7) : random_ner(rng, 5);
    const Vector psi = testutil::random_psi(rng, spec);
    const auto d = sigma_derivs(spec, psi);
    const double h = 1e-5;
    for (int a = 0; a < spec.k; ++a) {
      Vector up = psi, dn = psi;
      up(a) += h;
      dn(a) -= h;
      const Matrix fd = (build_sigma(spec, up) - build_sigma(spec, dn)) / (2 * h);
      EXPECT_LE((fd - d.first[a]).norm(), 1e-6 * (1 + d.first[a].norm()));
    }
  }
}

TEST(SigmaDerivs, LinearityExact) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const LmmSpec spec = trial % 2 ? random_fh(rng, 6) : random_ner(rng, 4);
    const Vector p1 = testutil::random_psi(rng, spec), p2 = testutil::random_psi(rng, spec);
    const auto d = sigma_derivs(spec, p1);
    Matrix diff = sigma_unchecked(spec, p1) - sigma_unchecked(spec, p2);
    for (int a = 0; a < spec.k; ++a) diff -= (p1(a) - p2(a)) * d.first[a];
    EXPECT_LE(diff.norm(), 1e-13);
  }
}

TEST(Builders, FayHerriotDefaults) {
  const LmmSpec spec = make_fay_herriot(fh_design_variances(3));
  EXPECT_EQ(spec.N(), 15);
  EXPECT_EQ(spec.k, 1);
  EXPECT_TRUE(spec.sigma_linear);
  EXPECT_TRUE(spec.X.isApprox(Matrix::Ones(15, 1)));
  EXPECT_TRUE(spec.Z.isApprox(Matrix::Identity(15, 15)));
  EXPECT_DOUBLE_EQ(spec.D(0), 0.7);
  EXPECT_DOUBLE_EQ(spec.D(14), 0.3);
}

TEST(Builders, FayHerriotRejectsBadD) {
  Vector D(2);
  D << 1.0, 0.0;
  EXPECT_THROW(make_fay_herriot(D), NonPositiveD);
  EXPECT_THROW(make_fay_herriot(Vector::Ones(3), Matrix::Ones(2, 1)), DimensionMismatch);
}

TEST(Builders, OneAreaRejectedDownstream) {
  const LmmSpec spec = make_fay_herriot(Vector::Ones(1));
  EXPECT_THROW(validate_design(spec), DimensionMismatch);
}

TEST(Builders, NestedErrorSimulationDesign) {
  const auto n = ner_design_sizes(3);
  EXPECT_EQ(n.size(), 15u);
  const LmmSpec spec = make_nested_error(n, ner_design_covariates(87, 7));
  EXPECT_EQ(spec.N(), 87);
  EXPECT_EQ(spec.k, 2);
  EXPECT_TRUE(spec.sigma_linear);
}

TEST(Builders, NestedErrorStructure) {
  const LmmSpec single = make_nested_error({2}, Matrix::Ones(2, 1));
  EXPECT_TRUE((single.Z * single.Z.transpose()).isApprox(Matrix::Ones(2, 2)));
  const LmmSpec ones = make_nested_error({1, 1, 1}, Matrix::Ones(3, 1));
  EXPECT_TRUE((ones.Z * ones.Z.transpose()).isApprox(Matrix::Identity(3, 3)));
  EXPECT_THROW(make_nested_error({2, 2}, Matrix::Ones(3, 1)), DimensionMismatch);
  EXPECT_THROW(make_nested_error({2, 0}, Matrix::Ones(2, 1)), DimensionMismatch);
}

TEST(Builders, RankDeficientX) {
  Matrix X(4, 2);
  X << 1, 2, 1, 2, 1, 2, 1, 2;
  const LmmSpec spec = make_fay_herriot(Vector::Ones(4), X);
  EXPECT_THROW(validate_design(spec), RankDeficientX);
}

TEST(FeasibleRegionTest, Contains) {
  const auto box = FeasibleRegion::positive(2);
  EXPECT_TRUE(box.contains(Vector::Ones(2)));
  EXPECT_FALSE(box.contains(Vector::Zero(2)));
  EXPECT_TRUE(FeasibleRegion::unbounded(1).contains(Vector::Constant(1, -5.0)));
}

TEST(SymmetricSqrt, ClampsRoundingNoise) {
  Matrix M = Matrix::Zero(2, 2);
  M(0, 0) = 4.0;
  M(1, 1) = -1e-14;
  const Matrix R = symmetric_sqrt(M);
  EXPECT_NEAR(R(0, 0), 2.0, 1e-14);
  EXPECT_EQ(R(1, 1), 0.0);
  M(1, 1) = -1.0;
  EXPECT_THROW(symmetric_sqrt(M), NotPositiveDefinite);
}
