#pragma once

// Linear mixed model y = X beta + Z v + e with covariance parameters psi.
//
//   Cov(v) = Rv(psi)  (m x m),   Cov(e) = Re(psi)  (N x N),
//   Sigma(psi) = Re(psi) + Z Rv(psi) Z'.
//
// Covariance structures are supplied as callbacks returning dense matrices
// together with their first (and optionally second) partial derivatives.

#include "vcee/core.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>

namespace vcee {

struct CovarianceCallbacks {
  std::function<Matrix(const Vector&)> value;
  /// d/dpsi_a for a = 1..k.
  std::function<std::vector<Matrix>(const Vector&)> first;
  /// d2/dpsi_a dpsi_b; may be left empty when the structure is linear in psi.
  std::function<MatrixTable(const Vector&)> second;
};

enum class ModelFamily { Generic, FayHerriot, NestedError };

struct LmmSpec {
  Matrix X;
  Matrix Z;
  CovarianceCallbacks Rv;
  CovarianceCallbacks Re;
  int k = 0;
  double Ke = 0.0; ///< excess kurtosis of the standardized errors
  double Kv = 0.0; ///< excess kurtosis of the standardized random effects
  bool sigma_linear = false;

  // Structural metadata used by the model-specialized code paths.
  ModelFamily family = ModelFamily::Generic;
  Vector D;                       ///< Fay-Herriot sampling variances
  std::vector<int> cluster_sizes; ///< nested-error cluster sizes n_i

  Eigen::Index N() const { return X.rows(); }
  Eigen::Index p() const { return X.cols(); }
  Eigen::Index m() const { return Z.cols(); }
};

/// Box of admissible parameter values. Lower bounds may be -inf, in which case
/// admissibility is decided by positive definiteness of Sigma alone.
struct FeasibleRegion {
  Vector lower;
  Vector upper;

  static FeasibleRegion positive(int k, double floor = 1e-10) {
    return {Vector::Constant(k, floor),
            Vector::Constant(k, std::numeric_limits<double>::infinity())};
  }
  static FeasibleRegion unbounded(int k) {
    return {Vector::Constant(k, -std::numeric_limits<double>::infinity()),
            Vector::Constant(k, std::numeric_limits<double>::infinity())};
  }

  bool contains(const Vector& psi) const {
    return psi.size() == lower.size() && (psi.array() >= lower.array()).all() &&
           (psi.array() <= upper.array()).all();
  }
};

inline void check_psi(const LmmSpec& spec, const Vector& psi) {
  if (psi.size() != spec.k) {
    throw DimensionMismatch("psi has length " + std::to_string(psi.size()) +
                            ", model has k=" + std::to_string(spec.k));
  }
}

/// Sigma(psi) without any definiteness check.
inline Matrix sigma_unchecked(const LmmSpec& spec, const Vector& psi) {
  check_psi(spec, psi);
  Matrix sigma = spec.Re.value(psi);
  sigma.noalias() += spec.Z * spec.Rv.value(psi) * spec.Z.transpose();
  return symmetrize(sigma);
}

/// Sigma(psi); throws NotPositiveDefinite when the Cholesky factorization fails.
inline Matrix build_sigma(const LmmSpec& spec, const Vector& psi) {
  Matrix sigma = sigma_unchecked(spec, psi);
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw NotPositiveDefinite("Sigma(psi) is not positive definite");
  }
  return sigma;
}

struct SigmaDerivatives {
  std::vector<Matrix> first;
  /// Empty when Sigma is linear in psi (all second derivatives vanish) or when
  /// the model does not provide them; see `second_is_zero`.
  std::optional<MatrixTable> second;
  bool second_is_zero = false;
};

inline SigmaDerivatives sigma_derivs(const LmmSpec& spec, const Vector& psi) {
  check_psi(spec, psi);
  SigmaDerivatives out;
  const auto rv = spec.Rv.first(psi);
  const auto re = spec.Re.first(psi);
  out.first.reserve(spec.k);
  for (int a = 0; a < spec.k; ++a) {
    out.first.push_back(symmetrize(re[a] + spec.Z * rv[a] * spec.Z.transpose()));
  }
  if (spec.sigma_linear) {
    out.second_is_zero = true;
  } else if (spec.Rv.second && spec.Re.second) {
    const auto rv2 = spec.Rv.second(psi);
    const auto re2 = spec.Re.second(psi);
    MatrixTable table(spec.k, std::vector<Matrix>(spec.k));
    for (int a = 0; a < spec.k; ++a) {
      for (int b = 0; b < spec.k; ++b) {
        table[a][b] = symmetrize(re2[a][b] + spec.Z * rv2[a][b] * spec.Z.transpose());
      }
    }
    out.second = std::move(table);
  }
  return out;
}

/// Second derivatives as a dense table, zero-filled for linear models.
inline std::optional<MatrixTable> sigma_second_table(const LmmSpec& spec,
                                                     const SigmaDerivatives& d) {
  if (d.second) return d.second;
  if (!d.second_is_zero) return std::nullopt;
  const Eigen::Index n = spec.N();
  return MatrixTable(spec.k, std::vector<Matrix>(spec.k, Matrix::Zero(n, n)));
}

/// Throws unless X has full column rank and N > p.
inline void validate_design(const LmmSpec& spec) {
  if (spec.N() <= spec.p()) {
    throw DimensionMismatch("need N > p (N=" + std::to_string(spec.N()) +
                            ", p=" + std::to_string(spec.p()) + ")");
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(spec.X);
  if (qr.rank() < spec.p()) {
    throw RankDeficientX("X does not have full column rank");
  }
}

inline LmmSpec with_kurtosis(LmmSpec spec, double Ke, double Kv) {
  spec.Ke = Ke;
  spec.Kv = Kv;
  return spec;
}

/// Fay-Herriot area-level model: Rv = psi_1 I_m, Re = diag(D), Z = I_m.
/// X defaults to an intercept column.
inline LmmSpec make_fay_herriot(const Vector& D, std::optional<Matrix> X = std::nullopt) {
  const Eigen::Index m = D.size();
  if (m == 0) throw DimensionMismatch("D is empty");
  for (Eigen::Index i = 0; i < m; ++i) {
    if (!(D(i) > 0.0)) {
      throw NonPositiveD("D[" + std::to_string(i) + "] must be positive");
    }
  }
  LmmSpec spec;
  spec.X = X ? *X : Matrix::Ones(m, 1);
  if (spec.X.rows() != m) {
    throw DimensionMismatch("X has " + std::to_string(spec.X.rows()) + " rows, D has " +
                            std::to_string(m));
  }
  spec.Z = Matrix::Identity(m, m);
  spec.k = 1;
  spec.sigma_linear = true;
  spec.family = ModelFamily::FayHerriot;
  spec.D = D;
  spec.Rv.value = [m](const Vector& psi) -> Matrix { return psi(0) * Matrix::Identity(m, m); };
  spec.Rv.first = [m](const Vector&) { return std::vector<Matrix>{Matrix::Identity(m, m)}; };
  spec.Re.value = [D](const Vector&) -> Matrix { return D.asDiagonal(); };
  spec.Re.first = [m](const Vector&) { return std::vector<Matrix>{Matrix::Zero(m, m)}; };
  return spec;
}

/// Block-diagonal matrix of all-ones vectors j_{n_i}: the N x m random-effect design.
inline Matrix cluster_indicator(const std::vector<int>& sizes) {
  Eigen::Index total = 0;
  for (int n : sizes) total += n;
  Matrix Z = Matrix::Zero(total, static_cast<Eigen::Index>(sizes.size()));
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    Z.block(row, static_cast<Eigen::Index>(i), sizes[i], 1).setOnes();
    row += sizes[i];
  }
  return Z;
}

/// Nested error regression model: y_ij = x_ij'beta + v_i + e_ij with
/// Sigma = psi_1 G + psi_2 I_N and G = blockdiag(J_{n_i}).
inline LmmSpec make_nested_error(const std::vector<int>& sizes, const Matrix& X) {
  if (sizes.empty()) throw DimensionMismatch("no clusters given");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] < 1) {
      throw DimensionMismatch("cluster " + std::to_string(i) + " has size " +
                              std::to_string(sizes[i]));
    }
  }
  LmmSpec spec;
  spec.Z = cluster_indicator(sizes);
  const Eigen::Index N = spec.Z.rows();
  const Eigen::Index m = spec.Z.cols();
  if (X.rows() != N) {
    throw DimensionMismatch("X has " + std::to_string(X.rows()) + " rows, expected N=" +
                            std::to_string(N));
  }
  spec.X = X;
  spec.k = 2;
  spec.sigma_linear = true;
  spec.family = ModelFamily::NestedError;
  spec.cluster_sizes = sizes;
  spec.Rv.value = [m](const Vector& psi) -> Matrix { return psi(0) * Matrix::Identity(m, m); };
  spec.Rv.first = [m](const Vector&) {
    return std::vector<Matrix>{Matrix::Identity(m, m), Matrix::Zero(m, m)};
  };
  spec.Re.value = [N](const Vector& psi) -> Matrix { return psi(1) * Matrix::Identity(N, N); };
  spec.Re.first = [N](const Vector&) {
    return std::vector<Matrix>{Matrix::Zero(N, N), Matrix::Identity(N, N)};
  };
  return spec;
}

} // namespace vcee
