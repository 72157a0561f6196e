#pragma once

// Asymptotic covariance and second-order bias of the estimating-equation
// estimator, the second-order unbiasedness condition, the efficiency gap
// relative to the REML weights, and the fourth-moment identity for
// quadratic forms u'Cu, u = Zv + e.
//
//   A_ab = tr(W_a Sigma_(b))
//   B_ab = tr(W_a Sigma W_b Sigma)
//   Bt_ab = Ke h_e(W_a, W_b) + Kv h_v(W_a, W_b)
//   (K_a)_bc  = tr(W_a(b) Sigma W_c Sigma)
//   (H_a)_bc  = tr(W_a(b) Sigma_(c)) + tr(W_a Sigma_(bc)) / 2
//   (Kt_a)_bc = Ke h_e(W_a(b), W_c) + Kv h_v(W_a(b), W_c)
//
// A need not be symmetric for custom weights, so transposes are kept
// explicit (A^{-1} B A^{-T}); for symmetric A this is the usual form.

#include "vcee/estimators.hpp"

#include <optional>
#include <string>

namespace vcee {

struct HForms {
  double he = 0.0;
  double hv = 0.0;
};

/// Symmetric roots Re^{1/2} and Rv^{1/2} Z' at psi.
struct KurtosisRoots {
  Matrix re_half; ///< N x N
  Matrix rv_half_zt; ///< m x N, Rv^{1/2} Z'

  KurtosisRoots(const LmmSpec& spec, const Vector& psi)
      : re_half(symmetric_sqrt(spec.Re.value(psi))),
        rv_half_zt(symmetric_sqrt(spec.Rv.value(psi)) * spec.Z.transpose()) {}

  Vector diag_e(const Matrix& C) const { return (re_half * C * re_half).diagonal(); }
  Vector diag_v(const Matrix& C) const {
    return (rv_half_zt * C * rv_half_zt.transpose()).diagonal();
  }
};

inline HForms h_forms(const LmmSpec& spec, const Matrix& C, const Matrix& D, const Vector& psi) {
  check_psi(spec, psi);
  const KurtosisRoots roots(spec, psi);
  return {roots.diag_e(C).dot(roots.diag_e(D)), roots.diag_v(C).dot(roots.diag_v(D))};
}

/// E[(u'Cu)(u'Du)] for u = Zv + e with the model's kurtosis.
inline double fourth_moment_oracle(const LmmSpec& spec, const Matrix& C, const Matrix& D,
                                   const Vector& psi) {
  const Matrix sigma = sigma_unchecked(spec, psi);
  const Matrix CS = C * sigma, DS = D * sigma;
  const HForms h = h_forms(spec, C, D, psi);
  return 2.0 * trace_product(CS, DS) + CS.trace() * DS.trace() + spec.Ke * h.he + spec.Kv * h.hv;
}

struct CoreMatrices {
  Matrix A, B, Btilde;
};

struct CorrectionMatrices {
  std::vector<Matrix> K, H, Ktilde;
};

namespace detail {

inline void require_nonsingular(const Matrix& A) {
  Eigen::FullPivLU<Matrix> lu(A);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) {
    throw SingularA("A is numerically singular; psi is not identified by these weights");
  }
}

inline CoreMatrices core_from(const LmmSpec& spec, const std::vector<Matrix>& W,
                              const Matrix& sigma, const std::vector<Matrix>& d1,
                              const KurtosisRoots& roots) {
  const int k = spec.k;
  CoreMatrices c{Matrix(k, k), Matrix(k, k), Matrix::Zero(k, k)};
  std::vector<Matrix> WS(k);
  std::vector<Vector> de(k), dv(k);
  for (int a = 0; a < k; ++a) {
    WS[a] = W[a] * sigma;
    de[a] = roots.diag_e(W[a]);
    dv[a] = roots.diag_v(W[a]);
  }
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) {
      c.A(a, b) = trace_product(W[a], d1[b]);
      c.B(a, b) = trace_product(WS[a], WS[b]);
      c.Btilde(a, b) = spec.Ke * de[a].dot(de[b]) + spec.Kv * dv[a].dot(dv[b]);
    }
  }
  return c;
}

} // namespace detail

inline CoreMatrices core_matrices(const LmmSpec& spec, const WeightScheme& scheme,
                                  const Vector& psi) {
  const Matrix sigma = build_sigma(spec, psi);
  const auto W = weight_matrices(scheme, spec, psi);
  const KurtosisRoots roots(spec, psi);
  CoreMatrices c = detail::core_from(spec, W, sigma, sigma_derivs(spec, psi).first, roots);
  detail::require_nonsingular(c.A);
  return c;
}

inline CorrectionMatrices correction_matrices(const LmmSpec& spec, const WeightScheme& scheme,
                                              const Vector& psi) {
  const int k = spec.k;
  const Matrix sigma = build_sigma(spec, psi);
  const SigmaDerivatives derivs = sigma_derivs(spec, psi);
  const auto d2 = sigma_second_table(spec, derivs);
  if (!d2) throw MissingSecondDerivatives("H_a needs Sigma_(bc); the model does not supply it");
  const WeightValues wv = weights_at(scheme, spec, psi);
  const KurtosisRoots roots(spec, psi);

  std::vector<Matrix> WS(k);
  std::vector<Vector> de(k), dv(k);
  for (int c = 0; c < k; ++c) {
    WS[c] = wv.W[c] * sigma;
    de[c] = roots.diag_e(wv.W[c]);
    dv[c] = roots.diag_v(wv.W[c]);
  }
  CorrectionMatrices out;
  for (int a = 0; a < k; ++a) {
    Matrix K(k, k), H(k, k), Kt(k, k);
    for (int b = 0; b < k; ++b) {
      const Matrix& dW = wv.dW[a][b];
      const Matrix dWS = dW * sigma;
      const Vector dWe = roots.diag_e(dW), dWv = roots.diag_v(dW);
      for (int c = 0; c < k; ++c) {
        K(b, c) = trace_product(dWS, WS[c]);
        H(b, c) = trace_product(dW, derivs.first[c]) + 0.5 * trace_product(wv.W[a], (*d2)[b][c]);
        Kt(b, c) = spec.Ke * dWe.dot(de[c]) + spec.Kv * dWv.dot(dv[c]);
      }
    }
    out.K.push_back(std::move(K));
    out.H.push_back(std::move(H));
    out.Ktilde.push_back(std::move(Kt));
  }
  return out;
}

/// Covariance A^{-1} (2B + Bt) A^{-T}.
inline Matrix covariance_from(const CoreMatrices& c) {
  detail::require_nonsingular(c.A);
  const Matrix Ainv = c.A.inverse();
  return symmetrize(Ainv * (2.0 * c.B + c.Btilde) * Ainv.transpose());
}

/// Second-order bias from the core and correction matrices.
inline Vector bias_from(const CoreMatrices& c, const CorrectionMatrices& corr) {
  detail::require_nonsingular(c.A);
  const Matrix Ainv = c.A.inverse();
  const Matrix AinvT = Ainv.transpose();
  const Matrix middle = Ainv * c.B * AinvT;
  const Matrix middle_t = Ainv * c.Btilde * AinvT;
  const auto k = c.A.rows();
  Vector first(k), second(k);
  for (Eigen::Index a = 0; a < k; ++a) {
    first(a) = trace_product(corr.K[a], AinvT) - trace_product(corr.H[a], middle);
    second(a) = trace_product(corr.Ktilde[a], AinvT) - trace_product(corr.H[a], middle_t);
  }
  return 2.0 * Ainv * first + Ainv * second;
}

inline Matrix asymptotic_covariance(const LmmSpec& spec, const WeightScheme& scheme,
                                    const Vector& psi) {
  return covariance_from(core_matrices(spec, scheme, psi));
}

inline Vector second_order_bias(const LmmSpec& spec, const WeightScheme& scheme,
                                const Vector& psi) {
  return bias_from(core_matrices(spec, scheme, psi), correction_matrices(spec, scheme, psi));
}

/// max_a ||K_a - H_a A^{-1} B|| <= tol (1 + ||B||), Frobenius norms.
inline bool unbiasedness_holds(const CoreMatrices& c, const CorrectionMatrices& corr,
                               double tol) {
  detail::require_nonsingular(c.A);
  const Matrix AinvB = c.A.lu().solve(c.B);
  const double bound = tol * (1.0 + c.B.norm());
  for (std::size_t a = 0; a < corr.K.size(); ++a) {
    if ((corr.K[a] - corr.H[a] * AinvB).norm() > bound) return false;
  }
  return true;
}

inline bool check_unbiasedness_condition(const LmmSpec& spec, const WeightScheme& scheme,
                                         const Vector& psi, double tol = 1e-8) {
  return unbiasedness_holds(core_matrices(spec, scheme, psi),
                            correction_matrices(spec, scheme, psi), tol);
}

struct EfficiencyGap {
  Matrix lhs;  ///< A^{-1} B A^{-T}
  Matrix rhs;  ///< [tr(Sigma^{-1} Sigma_(a) Sigma^{-1} Sigma_(b))]^{-1}
  Matrix gap;  ///< lhs - rhs
  double min_eigenvalue = 0.0;
  bool psd = true; ///< min_eigenvalue >= -1e-10 ||lhs||_F
};

inline EfficiencyGap efficiency_gap_report(const LmmSpec& spec, const WeightScheme& scheme,
                                           const Vector& psi) {
  const CoreMatrices c = core_matrices(spec, scheme, psi);
  const Matrix Ainv = c.A.inverse();
  const Matrix S = detail::inverse_spd(build_sigma(spec, psi));
  const auto d1 = sigma_derivs(spec, psi).first;
  const int k = spec.k;
  std::vector<Matrix> T(k);
  for (int a = 0; a < k; ++a) T[a] = S * d1[a];
  Matrix info(k, k);
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) info(a, b) = trace_product(T[a], T[b]);
  }
  EfficiencyGap g;
  g.lhs = symmetrize(Ainv * c.B * Ainv.transpose());
  g.rhs = symmetrize(info.inverse());
  g.gap = g.lhs - g.rhs;
  g.min_eigenvalue = Eigen::SelfAdjointEigenSolver<Matrix>(g.gap).eigenvalues().minCoeff();
  g.psd = g.min_eigenvalue >= -1e-10 * g.lhs.norm();
  return g;
}

inline Matrix efficiency_gap(const LmmSpec& spec, const WeightScheme& scheme, const Vector& psi) {
  return efficiency_gap_report(spec, scheme, psi).gap;
}

struct AsymptoticsReport {
  std::string method;
  Vector psi;
  Matrix A, B, Btilde;
  std::vector<Matrix> K, H, Ktilde;
  Matrix cov;
  Vector bias;
  bool unbiased = false;
  double efficiency_gap_min_eigenvalue = 0.0;
};

/// Everything at once. `unbiased` evaluates the condition with the kurtosis
/// terms switched off, as the condition itself assumes.
inline AsymptoticsReport asymptotics_report(const LmmSpec& spec, const WeightScheme& scheme,
                                            const Vector& psi, std::string method,
                                            double tol = 1e-8) {
  AsymptoticsReport r;
  r.method = std::move(method);
  r.psi = psi;
  const CoreMatrices c = core_matrices(spec, scheme, psi);
  const CorrectionMatrices corr = correction_matrices(spec, scheme, psi);
  r.A = c.A;
  r.B = c.B;
  r.Btilde = c.Btilde;
  r.K = corr.K;
  r.H = corr.H;
  r.Ktilde = corr.Ktilde;
  r.cov = covariance_from(c);
  r.bias = bias_from(c, corr);
  r.unbiased = unbiasedness_holds(c, corr, tol);
  r.efficiency_gap_min_eigenvalue = efficiency_gap_report(spec, scheme, psi).min_eigenvalue;
  return r;
}

} // namespace vcee
