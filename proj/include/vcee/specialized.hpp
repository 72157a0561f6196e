#pragma once

// Closed-form asymptotic variances and biases for the Fay-Herriot and
// nested-error models. These are written out per model rather than going
// through the generic traces, and are used to cross-check that engine.

#include "vcee/core.hpp"

#include <vector>

namespace vcee {

struct ScalarAsymptotics {
  double variance = 0.0;
  double bias = 0.0;
};

/// Fay-Herriot model with a diagonal weight W_1 = diag(w) and
/// W_1(1) = diag(dw): variance and second-order bias.
///
/// With A = tr(W_1), B = tr(W_1 Sigma W_1 Sigma), K = tr(W_1(1) Sigma W_1 Sigma),
/// H = tr(W_1(1)):
///   bias = 2 (K - H B / A) / A^2 + Kt / A^2 - H Bt / A^3.
inline ScalarAsymptotics fh_diagonal_weight(const Vector& D, double psi, const Vector& w,
                                            const Vector& dw, double Ke, double Kv) {
  const Vector s = D.array() + psi;
  const Vector D2 = D.cwiseAbs2();
  const double A = w.sum();
  const double B = (w.array() * s.array()).square().sum();
  const double K = (dw.array() * w.array() * s.array().square()).sum();
  const double H = dw.sum();
  const double Bt = Ke * (w.array().square() * D2.array()).sum() +
                    psi * psi * Kv * w.array().square().sum();
  const double Kt = Ke * (dw.array() * w.array() * D2.array()).sum() +
                    psi * psi * Kv * (dw.array() * w.array()).sum();
  ScalarAsymptotics out;
  out.variance = (2.0 * B + Bt) / (A * A);
  out.bias = 2.0 * (K - H * B / A) / (A * A) + Kt / (A * A) - H * Bt / (A * A * A);
  return out;
}

namespace detail {

inline double inv_power_trace(const Vector& s, int k, const Vector* weight = nullptr) {
  double out = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    out += std::pow(s(i), -k) * (weight ? (*weight)(i) : 1.0);
  }
  return out;
}

} // namespace detail

/// REML (and OLS-based REML) in the Fay-Herriot model.
inline ScalarAsymptotics fh_reml_asymptotics(const Vector& D, double psi, double Ke, double Kv) {
  const Vector s = D.array() + psi;
  const Vector D2 = D.cwiseAbs2();
  const double t2 = detail::inv_power_trace(s, 2);
  const double t3 = detail::inv_power_trace(s, 3);
  const double kurt4 = Ke * detail::inv_power_trace(s, 4, &D2) +
                       psi * psi * Kv * detail::inv_power_trace(s, 4);
  const double kurt5 = Ke * detail::inv_power_trace(s, 5, &D2) +
                       psi * psi * Kv * detail::inv_power_trace(s, 5);
  ScalarAsymptotics out;
  out.variance = 2.0 / t2 + kurt4 / (t2 * t2);
  out.bias = -2.0 * kurt5 / (t2 * t2) + 2.0 * t3 * kurt4 / (t2 * t2 * t2);
  return out;
}

/// Fay-Herriot moment estimator (GLS or OLS map) in the Fay-Herriot model.
inline ScalarAsymptotics fh_moment_asymptotics(const Vector& D, double psi, double Ke,
                                               double Kv) {
  const Vector s = D.array() + psi;
  const Vector D2 = D.cwiseAbs2();
  const double m = static_cast<double>(D.size());
  const double t1 = detail::inv_power_trace(s, 1);
  const double t2 = detail::inv_power_trace(s, 2);
  const double kurt2 = Ke * detail::inv_power_trace(s, 2, &D2) +
                       psi * psi * Kv * detail::inv_power_trace(s, 2);
  const double kurt3 = Ke * detail::inv_power_trace(s, 3, &D2) +
                       psi * psi * Kv * detail::inv_power_trace(s, 3);
  ScalarAsymptotics out;
  out.variance = 2.0 * m / (t1 * t1) + kurt2 / (t1 * t1);
  out.bias = 2.0 * (m * t2 - t1 * t1) / (t1 * t1 * t1) - kurt3 / (t1 * t1) +
             t2 * kurt2 / (t1 * t1 * t1);
  return out;
}

/// Prasad-Rao (Q-weight) estimator in the Fay-Herriot model; its bias is zero.
inline ScalarAsymptotics fh_prasad_rao_asymptotics(const Vector& D, double psi, double Ke,
                                                   double Kv) {
  const Vector s = D.array() + psi;
  const double m = static_cast<double>(D.size());
  ScalarAsymptotics out;
  out.variance = (2.0 * s.squaredNorm() + Ke * D.squaredNorm() + m * psi * psi * Kv) / (m * m);
  return out;
}

/// Nested-error closed forms with gamma_i = 1 / (psi_2 + n_i psi_1), Gaussian case.
struct NerClosedForms {
  Matrix re_cov;        ///< REML covariance
  Matrix A_fh, B_fh;    ///< FH-type A and B
  Matrix K1, K2, H1, H2; ///< FH-type correction matrices
  Matrix A_q, B_q;      ///< Q-type A and B
};

inline NerClosedForms ner_closed_forms(const std::vector<int>& sizes, double psi1, double psi2) {
  double N = 0.0, m = static_cast<double>(sizes.size());
  double n2g2 = 0, ng2 = 0, g2 = 0, n2g = 0, ng = 0, g = 0, n3g = 0, n3g2 = 0, n2 = 0;
  double n2_ig2 = 0, n_ig2 = 0, ig2 = 0;
  for (int ni : sizes) {
    const double n = ni;
    const double gam = 1.0 / (psi2 + n * psi1);
    N += n;
    n2 += n * n;
    g += gam;
    ng += n * gam;
    n2g += n * n * gam;
    n3g += n * n * n * gam;
    g2 += gam * gam;
    ng2 += n * gam * gam;
    n2g2 += n * n * gam * gam;
    n3g2 += n * n * n * gam * gam;
    ig2 += 1.0 / (gam * gam);
    n_ig2 += n / (gam * gam);
    n2_ig2 += n * n / (gam * gam);
  }
  auto sym2 = [](double a, double b, double c) {
    Matrix M(2, 2);
    M << a, b, b, c;
    return M;
  };
  NerClosedForms f;
  f.re_cov = 2.0 * sym2(n2g2, ng2, (N - m) / (psi2 * psi2) + g2).inverse();
  f.A_fh = sym2(n2g, ng, (N - m) / psi2 + g);
  f.B_fh = sym2(n2, N, N);
  f.K1 = -sym2(n3g, n2g, ng);
  f.K2 = -sym2(n2g, ng, (N - m) / psi2 + g);
  f.H1 = -sym2(n3g2, n2g2, ng2);
  f.H2 = -sym2(n2g2, ng2, (N - m) / (psi2 * psi2) + g2);
  f.A_q = sym2(n2, N, N);
  f.B_q = sym2(n2_ig2, n_ig2, (N - m) * psi2 * psi2 + ig2);
  return f;
}

} // namespace vcee
