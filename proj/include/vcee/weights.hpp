#pragma once

// Weight matrices W_a(psi) that define an estimating equation, and the
// coefficient map L(psi) with residual projector Q = I - X L.

#include "vcee/model.hpp"

#include <string>

namespace vcee {

enum class WeightKind { RE, FH, Q, Custom };

inline std::string to_string(WeightKind kind) {
  switch (kind) {
  case WeightKind::RE: return "RE";
  case WeightKind::FH: return "FH";
  case WeightKind::Q: return "Q";
  case WeightKind::Custom: return "Custom";
  }
  return "?";
}

struct WeightValues {
  std::vector<Matrix> W; ///< W[a]
  MatrixTable dW;        ///< dW[a][b] = d W_a / d psi_b
  /// d2W[a][b][c] = d2 W_a / d psi_b d psi_c, when available.
  std::optional<std::vector<MatrixTable>> d2W;
};

struct WeightScheme {
  WeightKind kind = WeightKind::RE;
  /// Only used for WeightKind::Custom. Must return analytic derivatives.
  std::function<WeightValues(const LmmSpec&, const Vector&)> custom;

  static WeightScheme re() { return {WeightKind::RE, {}}; }
  static WeightScheme fh() { return {WeightKind::FH, {}}; }
  static WeightScheme q() { return {WeightKind::Q, {}}; }

  /// psi-independent symmetric weights (all derivatives zero).
  static WeightScheme fixed(std::vector<Matrix> weights) {
    WeightScheme scheme;
    scheme.kind = WeightKind::Custom;
    scheme.custom = [weights = std::move(weights)](const LmmSpec& spec, const Vector&) {
      const auto k = static_cast<std::size_t>(spec.k);
      const Eigen::Index n = spec.N();
      WeightValues out;
      out.W = weights;
      out.dW.assign(k, std::vector<Matrix>(k, Matrix::Zero(n, n)));
      out.d2W = std::vector<MatrixTable>(
          k, MatrixTable(k, std::vector<Matrix>(k, Matrix::Zero(n, n))));
      return out;
    };
    return scheme;
  }
};

namespace detail {

inline Matrix inverse_spd(const Matrix& sigma) {
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw NotPositiveDefinite("Sigma(psi) is not positive definite");
  }
  return llt.solve(Matrix::Identity(sigma.rows(), sigma.cols()));
}

} // namespace detail

/// W_a, W_{a(b)} and (for linear Sigma) W_{a(bc)} at psi.
inline WeightValues weights_at(const WeightScheme& scheme, const LmmSpec& spec,
                               const Vector& psi) {
  check_psi(spec, psi);
  if (scheme.kind == WeightKind::Custom) {
    if (!scheme.custom) throw Error("custom weight scheme has no callback");
    return scheme.custom(spec, psi);
  }

  const int k = spec.k;
  const Eigen::Index n = spec.N();
  const SigmaDerivatives derivs = sigma_derivs(spec, psi);
  const std::vector<Matrix>& d1 = derivs.first;
  const auto d2 = sigma_second_table(spec, derivs);

  WeightValues out;
  out.dW.assign(k, std::vector<Matrix>(k));

  if (scheme.kind == WeightKind::Q) {
    out.W = d1;
    if (!d2) throw MissingSecondDerivatives("Q weights need Sigma_(ab) for a nonlinear model");
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) out.dW[a][b] = (*d2)[a][b];
    }
    if (spec.sigma_linear) {
      out.d2W = std::vector<MatrixTable>(
          k, MatrixTable(k, std::vector<Matrix>(k, Matrix::Zero(n, n))));
    }
    return out;
  }

  if (!d2) {
    throw MissingSecondDerivatives("weight derivatives need Sigma_(ab) for a nonlinear model");
  }
  const Matrix S = detail::inverse_spd(build_sigma(spec, psi));
  std::vector<Matrix> T(k); // T_a = Sigma^{-1} Sigma_(a)
  for (int a = 0; a < k; ++a) T[a] = S * d1[a];

  out.W.resize(k);
  for (int a = 0; a < k; ++a) {
    if (scheme.kind == WeightKind::RE) {
      out.W[a] = symmetrize(T[a] * S);
    } else {
      out.W[a] = symmetrize(T[a]);
    }
  }

  // d Sigma^{-1} / d psi_b = -T_b S.
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) {
      Matrix d;
      if (scheme.kind == WeightKind::RE) {
        d = -(T[b] * T[a] + T[a] * T[b]) * S + S * (*d2)[a][b] * S;
      } else {
        d = -T[b] * T[a] + S * (*d2)[a][b];
      }
      out.dW[a][b] = symmetrize(d);
    }
  }

  if (spec.sigma_linear) {
    std::vector<MatrixTable> d2W(k, MatrixTable(k, std::vector<Matrix>(k)));
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) {
        for (int c = 0; c < k; ++c) {
          const Matrix Sbc = T[c] * T[b] + T[b] * T[c]; // times S on the right
          Matrix d;
          if (scheme.kind == WeightKind::RE) {
            d = (Sbc * T[a] + T[b] * T[a] * T[c] + T[c] * T[a] * T[b] + T[a] * Sbc) * S;
          } else {
            d = Sbc * T[a];
          }
          d2W[a][b][c] = symmetrize(d);
        }
      }
    }
    out.d2W = std::move(d2W);
  }
  return out;
}

/// W_a(psi) only, without derivatives.
inline std::vector<Matrix> weight_matrices(const WeightScheme& scheme, const LmmSpec& spec,
                                           const Vector& psi) {
  check_psi(spec, psi);
  if (scheme.kind == WeightKind::Custom) return weights_at(scheme, spec, psi).W;
  const SigmaDerivatives derivs = sigma_derivs(spec, psi);
  if (scheme.kind == WeightKind::Q) return derivs.first;
  const Matrix S = detail::inverse_spd(build_sigma(spec, psi));
  std::vector<Matrix> W;
  W.reserve(spec.k);
  for (const Matrix& d : derivs.first) {
    const Matrix T = S * d;
    W.push_back(scheme.kind == WeightKind::RE ? symmetrize(T * S) : symmetrize(T));
  }
  return W;
}

enum class CoefficientMap { GLS, OLS };

inline std::string to_string(CoefficientMap map) {
  return map == CoefficientMap::GLS ? "GLS" : "OLS";
}

namespace detail {

inline Matrix solve_normal(const Matrix& gram, const Matrix& rhs) {
  // Equilibrate first so the conditioning check ignores column scaling.
  const Vector d = gram.diagonal();
  if (!(d.array() > 0.0).all()) {
    throw RankDeficientX("X'WX is singular; X does not have full column rank");
  }
  const Vector s = d.cwiseSqrt().cwiseInverse();
  const Matrix scaled = s.asDiagonal() * gram * s.asDiagonal();
  Eigen::LDLT<Matrix> ldlt(scaled);
  const Vector pivots = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      !(pivots.minCoeff() > 1e-13 * pivots.maxCoeff()) || !(ldlt.rcond() >= 1e-13)) {
    throw RankDeficientX("X'WX is singular; X does not have full column rank");
  }
  return s.asDiagonal() * ldlt.solve(s.asDiagonal() * rhs);
}

} // namespace detail

/// L(psi), the p x N matrix with beta_hat = L y and L X = I_p.
inline Matrix coefficient_matrix(CoefficientMap map, const LmmSpec& spec, const Vector& psi) {
  const Matrix& X = spec.X;
  if (map == CoefficientMap::OLS) {
    return detail::solve_normal(X.transpose() * X, X.transpose());
  }
  const Matrix S = detail::inverse_spd(build_sigma(spec, psi));
  const Matrix XtS = X.transpose() * S;
  return detail::solve_normal(XtS * X, XtS);
}

/// Q = I - X L(psi); annihilates the column space of X.
inline Matrix projector(CoefficientMap map, const LmmSpec& spec, const Vector& psi) {
  if (spec.N() <= spec.p()) {
    throw RankDeficientX("need N > p for a nontrivial residual projector");
  }
  const Matrix L = coefficient_matrix(map, spec, psi);
  return Matrix::Identity(spec.N(), spec.N()) - spec.X * L;
}

} // namespace vcee
