#pragma once

// Closed-form estimators and model-specialized moment equations for the
// Fay-Herriot and nested-error regression models. They are written directly
// in terms of per-area / per-cluster sums and serve as independent checks on
// the generic estimating-equation engine.

#include "vcee/estimators.hpp"

namespace vcee {

namespace detail {

/// Per-cluster sizes and means of y and of the rows of X.
struct ClusterMeans {
  std::vector<int> n;
  Matrix xbar; ///< m x p
  Vector ybar; ///< m
};

inline std::vector<int> cluster_sizes_of(const LmmSpec& spec) {
  if (spec.family == ModelFamily::NestedError) return spec.cluster_sizes;
  return std::vector<int>(static_cast<std::size_t>(spec.N()), 1);
}

inline ClusterMeans cluster_means(const LmmSpec& spec, const Vector& y) {
  ClusterMeans c;
  c.n = cluster_sizes_of(spec);
  const auto m = static_cast<Eigen::Index>(c.n.size());
  c.xbar.resize(m, spec.p());
  c.ybar.resize(m);
  Eigen::Index row = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const int ni = c.n[i];
    c.xbar.row(i) = spec.X.middleRows(row, ni).colwise().mean();
    c.ybar(i) = y.segment(row, ni).mean();
    row += ni;
  }
  return c;
}

inline void require_family(const LmmSpec& spec, ModelFamily family, const char* what) {
  if (spec.family != family) {
    throw Error(std::string(what) + " requires a " +
                (family == ModelFamily::FayHerriot ? "Fay-Herriot" : "nested-error") +
                " model");
  }
}

inline void require_length(const LmmSpec& spec, const Vector& y) {
  if (y.size() != spec.N()) {
    throw DimensionMismatch("y has length " + std::to_string(y.size()) + ", expected N=" +
                            std::to_string(spec.N()));
  }
}

inline Matrix gram_inverse(const Matrix& X) {
  return solve_normal(X.transpose() * X, Matrix::Identity(X.cols(), X.cols()));
}

// sum_i n_i^2 xbar_i xbar_i' = X'GX
inline Matrix between_gram(const ClusterMeans& c, const Vector& weights) {
  Matrix out = Matrix::Zero(c.xbar.cols(), c.xbar.cols());
  for (Eigen::Index i = 0; i < c.xbar.rows(); ++i) {
    const double n = c.n[i];
    out.noalias() += weights(i) * n * n * c.xbar.row(i).transpose() * c.xbar.row(i);
  }
  return out;
}

} // namespace detail

/// Prasad-Rao moment estimator in the Fay-Herriot model (raw, may be negative):
/// [y'P y - tr(D) + tr{(X'X)^{-1} X'DX}] / (m - p), P the OLS residual projector.
inline double closed_form_pr_fh(const LmmSpec& spec, const Vector& y) {
  detail::require_family(spec, ModelFamily::FayHerriot, "closed_form_pr_fh");
  detail::require_length(spec, y);
  const Eigen::Index m = spec.N(), p = spec.p();
  if (m <= p) throw DimensionMismatch("Prasad-Rao estimator needs m > p");
  const Matrix& X = spec.X;
  const Matrix U = detail::gram_inverse(X);
  const Vector r = y - X * (U * (X.transpose() * y));
  const Matrix XtDX = X.transpose() * spec.D.asDiagonal() * X;
  return (r.squaredNorm() - spec.D.sum() + (U * XtDX).trace()) / static_cast<double>(m - p);
}

/// Q-weight (W_1 = G, W_2 = I) estimators in the nested-error model with the
/// OLS map, solved in closed form. Raw values.
inline Vector closed_form_q_ner(const LmmSpec& spec, const Vector& y) {
  detail::require_family(spec, ModelFamily::NestedError, "closed_form_q_ner");
  detail::require_length(spec, y);
  const Matrix& X = spec.X;
  const double N = static_cast<double>(spec.N());
  const double p = static_cast<double>(spec.p());
  const Matrix U = detail::gram_inverse(X);
  const Vector r = y - X * (U * (X.transpose() * y));
  const auto c = detail::cluster_means(spec, r);
  const auto m = static_cast<Eigen::Index>(c.n.size());

  double between_ss = 0.0; // sum_i n_i^2 rbar_i^2 = r'Gr
  double trace_P_G = N;    // tr(PG) = N - sum_i n_i^2 xbar_i' U xbar_i
  double sum_n2 = 0.0, trace_HG2 = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double n = c.n[i];
    const double h = c.xbar.row(i) * U * c.xbar.row(i).transpose();
    between_ss += n * n * c.ybar(i) * c.ybar(i);
    trace_P_G -= n * n * h;
    sum_n2 += n * n;
    trace_HG2 += n * n * n * h;
  }
  const Matrix UC = U * detail::between_gram(c, Vector::Ones(m));
  // tr{(PG)^2} = tr(G^2) - 2 tr(HG^2) + tr(HGHG)
  const double trace_PG2 = sum_n2 - 2.0 * trace_HG2 + (UC * UC).trace();
  const double denom = N - p - trace_P_G * trace_P_G / trace_PG2;
  if (!(denom > 0.0) || !(trace_PG2 > 0.0)) {
    throw DegenerateDesign("N - p - tr(PG)^2 / tr((PG)^2) is not positive");
  }
  Vector psi(2);
  psi(1) = (r.squaredNorm() - trace_P_G / trace_PG2 * between_ss) / denom;
  psi(0) = (between_ss - psi(1) * trace_P_G) / trace_PG2;
  return psi;
}

/// Prasad-Rao estimators in the nested-error model. psi_2 comes from the
/// within-cluster regression, psi_1 from the OLS residual sum of squares.
/// The within regression uses a pseudo-inverse so that cluster-constant
/// columns of X (such as an intercept) are allowed; its degrees of freedom
/// are N - m - rank(EX).
inline Vector closed_form_pr_ner(const LmmSpec& spec, const Vector& y) {
  detail::require_family(spec, ModelFamily::NestedError, "closed_form_pr_ner");
  detail::require_length(spec, y);
  const Matrix& X = spec.X;
  const auto& sizes = spec.cluster_sizes;
  const auto m = static_cast<Eigen::Index>(sizes.size());
  const Eigen::Index N = spec.N(), p = spec.p();

  Matrix EX = X;
  Vector Ey = y;
  Eigen::Index row = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const int ni = sizes[i];
    EX.middleRows(row, ni).rowwise() -= X.middleRows(row, ni).colwise().mean();
    Ey.segment(row, ni).array() -= y.segment(row, ni).mean();
    row += ni;
  }
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(EX);
  cod.setThreshold(1e-10);
  const Eigen::Index rank = cod.rank();
  if (rank == 0) {
    throw SingularWithinDesign("X is constant within every cluster; X'EX is singular");
  }
  const Eigen::Index df = N - m - rank;
  if (df <= 0) throw DegenerateDesign("no within-cluster degrees of freedom left");
  const Vector within_resid = Ey - EX * cod.solve(Ey);

  const Matrix U = detail::gram_inverse(X);
  const Vector r = y - X * (U * (X.transpose() * y));
  const auto c = detail::cluster_means(spec, y);
  double trace_P_G = static_cast<double>(N);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double n = c.n[i];
    trace_P_G -= n * n * (c.xbar.row(i) * U * c.xbar.row(i).transpose())(0, 0);
  }

  Vector psi(2);
  psi(1) = within_resid.squaredNorm() / static_cast<double>(df);
  psi(0) = (r.squaredNorm() - static_cast<double>(N - p) * psi(1)) / trace_P_G;
  return psi;
}

/// Fay-Herriot-type moment equations (W_a = Sigma^{-1} Sigma_(a), symmetrized)
/// written in per-cluster form. Each component equals the generic ee_value
/// with FH weights.
inline Vector fh_moment_equations(const LmmSpec& spec, CoefficientMap map, const Vector& psi,
                                  const Vector& y) {
  detail::require_length(spec, y);
  check_psi(spec, psi);
  const Matrix& X = spec.X;
  const double N = static_cast<double>(spec.N());
  const double p = static_cast<double>(spec.p());
  const Matrix U = detail::gram_inverse(X);

  if (spec.family == ModelFamily::FayHerriot) {
    const Vector s = spec.D.array() + psi(0);
    const Vector inv = s.cwiseInverse();
    const Matrix XtSiX = X.transpose() * inv.asDiagonal() * X;
    Vector beta;
    double rhs;
    if (map == CoefficientMap::GLS) {
      beta = detail::solve_normal(XtSiX, X.transpose() * inv.asDiagonal() * y);
      rhs = N - p;
    } else {
      beta = U * (X.transpose() * y);
      const Matrix XtSX = X.transpose() * s.asDiagonal() * X;
      rhs = N - 2.0 * p + (U * XtSX * U * XtSiX).trace();
    }
    const Vector r = y - X * beta;
    return Vector::Constant(1, (r.array().square() * inv.array()).sum() - rhs);
  }

  detail::require_family(spec, ModelFamily::NestedError, "fh_moment_equations");
  const double psi1 = psi(0), psi2 = psi(1);
  const auto c = detail::cluster_means(spec, y);
  const auto m = static_cast<Eigen::Index>(c.n.size());
  Vector gamma(m);
  for (Eigen::Index i = 0; i < m; ++i) gamma(i) = 1.0 / (psi2 + c.n[i] * psi1);

  const Matrix XtX = X.transpose() * X;
  const Matrix XtGX = detail::between_gram(c, Vector::Ones(m));
  const Matrix XtSiGX = detail::between_gram(c, gamma); // X' Sigma^{-1} G X
  const Matrix XtSiX = (XtX - psi1 * XtSiGX) / psi2;
  const Matrix XtSX = psi2 * XtX + psi1 * XtGX;

  Vector beta;
  if (map == CoefficientMap::GLS) {
    Vector Xty = X.transpose() * y;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double n = c.n[i];
      Xty -= psi1 * gamma(i) * n * n * c.ybar(i) * c.xbar.row(i).transpose();
    }
    beta = detail::solve_normal(XtSiX, Xty / psi2);
  } else {
    beta = U * (X.transpose() * y);
  }
  const Vector r = y - X * beta;
  const Vector rbar = c.ybar - c.xbar * beta;

  double weighted_between = 0.0; // sum_i n_i^2 rbar_i^2 / (n_i psi1 + psi2)
  for (Eigen::Index i = 0; i < m; ++i) {
    const double n = c.n[i];
    weighted_between += n * n * gamma(i) * rbar(i) * rbar(i);
  }

  Vector out(2);
  if (map == CoefficientMap::GLS) {
    const Matrix V = detail::solve_normal(XtSiX, Matrix::Identity(X.cols(), X.cols()));
    double correction = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double n = c.n[i];
      correction += gamma(i) * n * n * (c.xbar.row(i) * V * c.xbar.row(i).transpose())(0, 0);
    }
    out(0) = weighted_between - (N - correction);
    out(1) = (r.squaredNorm() - psi1 * weighted_between) / psi2 - (N - p);
  } else {
    double leverage = 0.0, correction = 0.0;
    const Matrix UXtSXU = U * XtSX * U;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double n = c.n[i];
      leverage += n * n * (c.xbar.row(i) * U * c.xbar.row(i).transpose())(0, 0);
      correction +=
          gamma(i) * n * n * (c.xbar.row(i) * UXtSXU * c.xbar.row(i).transpose())(0, 0);
    }
    out(0) = weighted_between - (N - 2.0 * leverage + correction);
    const double trace_PSPSi = N - 2.0 * p + (U * XtSiX * U * XtSX).trace();
    out(1) = (r.squaredNorm() - psi1 * weighted_between) / psi2 - trace_PSPSi;
  }
  return out;
}

} // namespace vcee
