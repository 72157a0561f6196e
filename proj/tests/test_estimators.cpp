#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace vcee;
using testutil::random_fh;
using testutil::random_ner;

namespace {

const Method kIterative[] = {Method::RE, Method::ORE, Method::FH, Method::OFH, Method::Q};

EstimationResult solve_method(const LmmSpec& spec, Method m, const Vector& y,
                              const EstimationOptions& opt = {}) {
  const auto [kind, map] = method_definition(m);
  return solve_ee(spec, WeightScheme{kind, {}}, map, y, opt);
}

} // namespace

TEST(EeValue, ColumnSpaceResponse) {
  // y in col(X), OLS, Sigma = I, W = I: value is -tr(Q) = -1.
  LmmSpec spec = make_nested_error({1, 1}, Matrix::Ones(2, 1));
  Vector psi(2);
  psi << 0.0, 1.0;
  const WeightScheme w = WeightScheme::fixed({Matrix::Identity(2, 2), Matrix::Identity(2, 2)});
  const Vector f = ee_value(spec, w, CoefficientMap::OLS, psi, Vector::Constant(2, 3.0));
  EXPECT_NEAR(f(0), -1.0, 1e-14);
}

TEST(EeValue, FayHerriotRemlForm) {
  std::mt19937_64 rng(31);
  const LmmSpec spec = random_fh(rng, 8);
  const Vector psi = Vector::Constant(1, 0.9);
  const Vector y = testutil::draw(rng, spec, psi);
  const Matrix sigma = build_sigma(spec, psi);
  const Matrix S = sigma.inverse();
  const Vector beta = (spec.X.transpose() * S * spec.X).ldlt().solve(spec.X.transpose() * S * y);
  const Vector r = y - spec.X * beta;
  const Matrix P = S - S * spec.X * (spec.X.transpose() * S * spec.X).inverse() *
                           spec.X.transpose() * S;
  const double expected = r.dot(S * S * r) - P.trace();
  const double got = ee_value(spec, WeightScheme::re(), CoefficientMap::GLS, psi, y)(0);
  EXPECT_LE(testutil::rel_diff(got, expected), 1e-12);
}

TEST(EeValue, UnbiasedAtTruePsi) {
  std::mt19937_64 rng(32);
  const LmmSpec spec = random_fh(rng, 5, 1);
  const Vector psi = Vector::Constant(1, 1.0);
  const int draws = 100000;
  for (Method m : kIterative) {
    const auto [kind, map] = method_definition(m);
    double sum = 0, sum2 = 0;
    for (int i = 0; i < draws; ++i) {
      const double f = ee_value(spec, WeightScheme{kind, {}}, map, psi,
                                testutil::draw(rng, spec, psi))(0);
      sum += f;
      sum2 += f * f;
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sum2 / draws - mean * mean) / draws);
    EXPECT_LE(std::abs(mean), 3.0 * se) << to_string(m);
  }
}

TEST(SolveEe, PrasadRaoToyIsZero) {
  const LmmSpec spec = make_fay_herriot(Vector::Ones(3));
  Vector y(3);
  y << 0, 1, 2;
  const EstimationResult r = solve_ee(spec, WeightScheme::q(), CoefficientMap::OLS, y);
  EXPECT_NEAR(r.psi_raw(0), 0.0, 1e-14);
  EXPECT_NEAR(r.psi_hat(0), 0.0, 1e-14);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.method, Method::Q);
}

TEST(SolveEe, RemlMatchesBisection) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 10; ++trial) {
    const LmmSpec spec = random_fh(rng, 12);
    const Vector y = testutil::draw(rng, spec, Vector::Constant(1, 1.5));
    auto f = [&](double x) {
      return ee_value(spec, WeightScheme::re(), CoefficientMap::GLS, Vector::Constant(1, x), y)(0);
    };
    EstimationResult r;
    try {
      r = solve_ee(spec, WeightScheme::re(), CoefficientMap::GLS, y);
    } catch (const NoSolutionInRegion&) {
      continue;
    }
    // independent bisection on a bracket around the reported root
    double lo = r.psi_raw(0) - 0.5, hi = r.psi_raw(0) + 0.5;
    lo = std::max(lo, -spec.D.minCoeff() + 1e-9);
    ASSERT_LE(f(lo) * f(hi), 0.0);
    for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
      const double mid = 0.5 * (lo + hi);
      (f(mid) > 0) == (f(lo) > 0) ? lo = mid : hi = mid;
    }
    EXPECT_NEAR(r.psi_raw(0), 0.5 * (lo + hi), 1e-8);
  }
}

TEST(SolveEe, RootConsistencyAndBeta) {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 6; ++trial) {
    const LmmSpec spec = trial % 2 ? random_fh(rng, 15) : random_ner(rng, 10, 5);
    const Vector psi = testutil::random_psi(rng, spec);
    const Vector y = testutil::draw(rng, spec, psi);
    for (Method m : kIterative) {
      const auto [kind, map] = method_definition(m);
      const EstimationResult r = try_solve_ee(spec, WeightScheme{kind, {}}, map, y);
      if (!r.converged) continue;
      EXPECT_LE(ee_value(spec, WeightScheme{kind, {}}, map, r.psi_raw, y).norm(), 1e-9);
      EXPECT_LE(r.residual_norm, 1e-9);
      EXPECT_EQ(r.method, m);
      EXPECT_TRUE(r.psi_hat.isApprox(r.psi_raw.cwiseMax(0.0)));
      if (build_sigma(spec, r.psi_hat).allFinite()) {
        const Vector beta = coefficient_matrix(map, spec, r.psi_hat) * y;
        EXPECT_LE((beta - r.beta_hat).norm(), 1e-10 * (1 + beta.norm()));
      }
    }
  }
}

TEST(SolveEe, LinearShortcutMatchesNewton) {
  std::mt19937_64 rng(35);
  for (int trial = 0; trial < 6; ++trial) {
    const LmmSpec spec = trial % 2 ? random_fh(rng, 10) : random_ner(rng, 8, 4);
    const Vector y = testutil::draw(rng, spec, testutil::random_psi(rng, spec));
    const EstimationResult direct = solve_ee(spec, WeightScheme::q(), CoefficientMap::OLS, y);
    EstimationOptions opt;
    opt.region = FeasibleRegion::unbounded(spec.k);
    const EstimationResult newton = solve_ee(spec, WeightScheme::q(), CoefficientMap::OLS, y, opt);
    EXPECT_LE((direct.psi_raw - newton.psi_raw).norm(), 1e-12 * (1 + direct.psi_raw.norm()));
  }
}

TEST(SolveEe, LocationInvariance) {
  std::mt19937_64 rng(36);
  for (int trial = 0; trial < 4; ++trial) {
    const LmmSpec spec = trial % 2 ? random_fh(rng, 12) : random_ner(rng, 8, 4);
    const Vector y = testutil::draw(rng, spec, testutil::random_psi(rng, spec));
    const Vector shifted = y + spec.X * Vector::LinSpaced(spec.p(), -3.0, 5.0);
    for (Method m : kIterative) {
      const auto [kind, map] = method_definition(m);
      const auto a = try_solve_ee(spec, WeightScheme{kind, {}}, map, y);
      const auto b = try_solve_ee(spec, WeightScheme{kind, {}}, map, shifted);
      ASSERT_EQ(a.converged, b.converged);
      if (a.converged) EXPECT_LE((a.psi_raw - b.psi_raw).norm(), 1e-10 * (1 + a.psi_raw.norm()));
    }
  }
}

TEST(SolveEe, NestedErrorScaleEquivariance) {
  std::mt19937_64 rng(37);
  const LmmSpec spec = random_ner(rng, 10, 5);
  const Vector y = testutil::draw(rng, spec, Vector::Ones(2));
  const double c = 1.7;
  for (Method m : kIterative) {
    const auto [kind, map] = method_definition(m);
    const auto a = try_solve_ee(spec, WeightScheme{kind, {}}, map, y);
    const auto b = try_solve_ee(spec, WeightScheme{kind, {}}, map, c * y);
    ASSERT_TRUE(a.converged && b.converged) << to_string(m);
    EXPECT_LE((c * c * a.psi_raw - b.psi_raw).norm(), 1e-9 * (1 + b.psi_raw.norm()));
  }
}

TEST(SolveEe, NoSolutionReported) {
  // Constant response with an intercept: residuals vanish, so the REML
  // equation is -tr(P) < 0 on the whole admissible range.
  const LmmSpec spec = make_fay_herriot(Vector::Ones(4));
  const Vector y = Vector::Constant(4, 2.0);
  EXPECT_THROW(solve_ee(spec, WeightScheme::re(), CoefficientMap::GLS, y), NoSolutionInRegion);
  const auto r = try_solve_ee(spec, WeightScheme::re(), CoefficientMap::GLS, y);
  EXPECT_EQ(r.status, SolveStatus::NoSolution);
  EXPECT_FALSE(r.converged);
}

TEST(SolveEe, PositiveRegionOption) {
  std::mt19937_64 rng(38);
  const LmmSpec spec = random_fh(rng, 10);
  const Vector y = testutil::draw(rng, spec, Vector::Constant(1, 2.0));
  EstimationOptions opt;
  opt.region = FeasibleRegion::positive(1);
  const auto r = try_solve_ee(spec, WeightScheme::fh(), CoefficientMap::GLS, y, opt);
  if (r.converged) EXPECT_GE(r.psi_raw(0), 1e-10);
}

TEST(SolveEe, DimensionChecks) {
  const LmmSpec spec = make_fay_herriot(Vector::Ones(4));
  EXPECT_THROW(solve_ee(spec, WeightScheme::re(), CoefficientMap::GLS, Vector::Ones(3)),
               DimensionMismatch);
  EXPECT_THROW(ee_value(spec, WeightScheme::re(), CoefficientMap::GLS, Vector::Ones(2),
                        Vector::Ones(4)),
               DimensionMismatch);
}

TEST(Methods, NamesRoundTrip) {
  for (Method m : {Method::RE, Method::ORE, Method::FH, Method::OFH, Method::Q, Method::PR}) {
    ASSERT_TRUE(method_from_string(to_string(m)).has_value());
    EXPECT_EQ(*method_from_string(to_string(m)), m);
  }
  EXPECT_FALSE(method_from_string("XYZ").has_value());
  EXPECT_THROW(method_definition(Method::PR), Error);
}
