#pragma once

// General unbiased estimating equations
//
//   f_a(psi) = y'Q'W_a Q y - tr(Q'W_a Q Sigma),   a = 1..k,
//
// with Q = I - X L(psi), and their solution psi_hat.

#include "vcee/solver.hpp"
#include "vcee/weights.hpp"

#include <optional>
#include <string>

namespace vcee {

enum class Method { RE, ORE, FH, OFH, Q, PR, Custom };

inline std::string to_string(Method m) {
  switch (m) {
  case Method::RE: return "RE";
  case Method::ORE: return "ORE";
  case Method::FH: return "FH";
  case Method::OFH: return "OFH";
  case Method::Q: return "Q";
  case Method::PR: return "PR";
  case Method::Custom: return "Custom";
  }
  return "?";
}

inline std::optional<Method> method_from_string(const std::string& s) {
  for (Method m : {Method::RE, Method::ORE, Method::FH, Method::OFH, Method::Q, Method::PR}) {
    if (to_string(m) == s) return m;
  }
  return std::nullopt;
}

inline Method method_tag(WeightKind kind, CoefficientMap map) {
  const bool gls = map == CoefficientMap::GLS;
  switch (kind) {
  case WeightKind::RE: return gls ? Method::RE : Method::ORE;
  case WeightKind::FH: return gls ? Method::FH : Method::OFH;
  case WeightKind::Q: return gls ? Method::Custom : Method::Q;
  case WeightKind::Custom: return Method::Custom;
  }
  return Method::Custom;
}

/// Weight kind and coefficient map behind an iterative method tag.
inline std::pair<WeightKind, CoefficientMap> method_definition(Method m) {
  switch (m) {
  case Method::RE: return {WeightKind::RE, CoefficientMap::GLS};
  case Method::ORE: return {WeightKind::RE, CoefficientMap::OLS};
  case Method::FH: return {WeightKind::FH, CoefficientMap::GLS};
  case Method::OFH: return {WeightKind::FH, CoefficientMap::OLS};
  case Method::Q: return {WeightKind::Q, CoefficientMap::OLS};
  default: throw Error("method " + to_string(m) + " is not an estimating-equation method");
  }
}

struct EstimationResult {
  Method method = Method::Custom;
  Vector psi_raw;              ///< root of the estimating equations
  Vector psi_hat;              ///< max(psi_raw, 0) componentwise
  std::vector<bool> truncated; ///< psi_raw[a] < 0
  Vector beta_hat;             ///< L(psi_hat) y
  int iterations = 0;
  bool converged = false;
  double residual_norm = 0.0;
  SolveStatus status = SolveStatus::NoSolution;
  std::string message;
};

/// Solver failure carrying the partial result.
class SolveError : public Error {
public:
  SolveError(const std::string& what, EstimationResult result)
      : Error(what), result_(std::move(result)) {}
  const EstimationResult& result() const { return result_; }

private:
  EstimationResult result_;
};

class NoSolutionInRegion : public SolveError {
public:
  using SolveError::SolveError;
};
class MaxIterations : public SolveError {
public:
  using SolveError::SolveError;
};
class SingularJacobian : public SolveError {
public:
  using SolveError::SolveError;
};

struct EstimationOptions {
  SolverOptions solver;
  std::optional<Vector> start;
  /// Search box; defaults to the region where Sigma(psi) is positive definite.
  std::optional<FeasibleRegion> region;
};

inline bool needs_inverse(WeightKind kind, CoefficientMap map) {
  return map == CoefficientMap::GLS || kind == WeightKind::RE || kind == WeightKind::FH;
}

/// Value of the estimating equations at psi.
inline Vector ee_value(const LmmSpec& spec, const WeightScheme& scheme, CoefficientMap map,
                       const Vector& psi, const Vector& y) {
  check_psi(spec, psi);
  if (y.size() != spec.N()) {
    throw DimensionMismatch("y has length " + std::to_string(y.size()) + ", expected N=" +
                            std::to_string(spec.N()));
  }
  const Matrix sigma = needs_inverse(scheme.kind, map) ? build_sigma(spec, psi)
                                                       : sigma_unchecked(spec, psi);
  const std::vector<Matrix> W = weight_matrices(scheme, spec, psi);
  const Matrix Q = projector(map, spec, psi);
  const Vector r = Q * y;
  const Matrix M = Q * sigma * Q.transpose();
  Vector out(spec.k);
  for (int a = 0; a < spec.k; ++a) {
    out(a) = r.dot(W[a] * r) - trace_product(W[a], M);
  }
  return out;
}

namespace detail {

inline Vector ols_residuals(const LmmSpec& spec, const Vector& y) {
  const Matrix& X = spec.X;
  const Vector beta = X.colPivHouseholderQr().solve(y);
  return y - X * beta;
}

} // namespace detail

/// Data-driven starting value for the iterative solvers.
inline Vector default_start(const LmmSpec& spec, const Vector& y) {
  const Vector r = detail::ols_residuals(spec, y);
  const double df = static_cast<double>(spec.N() - spec.p());
  const double resid_var = r.squaredNorm() / std::max(df, 1.0);

  if (spec.family == ModelFamily::FayHerriot) {
    return Vector::Constant(1, std::max(resid_var - spec.D.mean(), 0.1));
  }
  if (spec.family == ModelFamily::NestedError) {
    const auto& n = spec.cluster_sizes;
    const auto m = static_cast<Eigen::Index>(n.size());
    double within = 0.0, mean_sq = 0.0, inv_n = 0.0;
    Eigen::Index row = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto seg = r.segment(row, n[i]);
      const double mean = seg.mean();
      within += (seg.array() - mean).square().sum();
      mean_sq += mean * mean;
      inv_n += 1.0 / n[i];
      row += n[i];
    }
    const Eigen::Index within_df = spec.N() - m;
    if (within_df <= 0 || within <= 0.0) {
      return Vector::Constant(2, 0.5 * resid_var);
    }
    const double psi2 = within / static_cast<double>(within_df);
    const double psi1 = std::max(mean_sq / m - psi2 * inv_n / m, 0.1 * psi2);
    Vector s(2);
    s << psi1, psi2;
    return s;
  }
  return Vector::Constant(spec.k, std::max(resid_var / spec.k, 1e-8));
}

namespace detail {

inline EstimationResult finalize(const LmmSpec& spec, CoefficientMap map, Method method,
                                 const RootResult& root, const Vector& y) {
  EstimationResult res;
  res.method = method;
  res.psi_raw = root.x;
  res.psi_hat = root.x.cwiseMax(0.0);
  res.truncated.resize(root.x.size());
  for (Eigen::Index a = 0; a < root.x.size(); ++a) res.truncated[a] = root.x(a) < 0.0;
  res.iterations = root.iterations;
  res.residual_norm = root.residual_norm;
  res.status = root.status;
  res.converged = root.status == SolveStatus::Converged;
  res.message = root.message;
  if (res.converged) {
    try {
      res.beta_hat = coefficient_matrix(map, spec, res.psi_hat) * y;
    } catch (const NotPositiveDefinite&) {
      res.beta_hat = coefficient_matrix(map, spec, res.psi_raw) * y;
    }
  }
  return res;
}

inline void throw_on_failure(const EstimationResult& res) {
  switch (res.status) {
  case SolveStatus::Converged: return;
  case SolveStatus::NoSolution: throw NoSolutionInRegion(res.message, res);
  case SolveStatus::MaxIterations: throw MaxIterations(res.message, res);
  case SolveStatus::SingularJacobian: throw SingularJacobian(res.message, res);
  }
}

} // namespace detail

/// Direct solve for Q weights with an OLS map when Sigma is linear in psi:
/// sum_b tr(W_a Q Sigma_(b) Q') psi_b = r'W_a r - tr(W_a Q Sigma(0) Q').
inline RootResult solve_linear_q(const LmmSpec& spec, const Vector& y) {
  const int k = spec.k;
  const Vector zero = Vector::Zero(k);
  const Matrix Q = projector(CoefficientMap::OLS, spec, zero);
  const std::vector<Matrix> d1 = sigma_derivs(spec, zero).first;
  const Matrix base = Q * sigma_unchecked(spec, zero) * Q.transpose();
  const Vector r = Q * y;
  Matrix M(k, k);
  Vector c(k);
  for (int a = 0; a < k; ++a) {
    const Matrix& W = d1[a];
    c(a) = r.dot(W * r) - trace_product(W, base);
    for (int b = 0; b < k; ++b) M(a, b) = trace_product(W, Q * d1[b] * Q.transpose());
  }
  RootResult root;
  Eigen::FullPivLU<Matrix> lu(M);
  if (!lu.isInvertible()) {
    root.x = Vector::Zero(k);
    root.status = SolveStatus::SingularJacobian;
    root.message = "Q-weight system is singular";
    return root;
  }
  root.x = lu.solve(c);
  root.fx = ee_value(spec, WeightScheme::q(), CoefficientMap::OLS, root.x, y);
  root.residual_norm = root.fx.norm();
  root.status = SolveStatus::Converged;
  return root;
}

/// Solve the estimating equations; solver failures are reported in the
/// result's status rather than thrown.
inline EstimationResult try_solve_ee(const LmmSpec& spec, const WeightScheme& scheme,
                                     CoefficientMap map, const Vector& y,
                                     const EstimationOptions& options = {}) {
  validate_design(spec);
  if (y.size() != spec.N()) {
    throw DimensionMismatch("y has length " + std::to_string(y.size()) + ", expected N=" +
                            std::to_string(spec.N()));
  }
  const Method method = method_tag(scheme.kind, map);
  if (scheme.kind == WeightKind::Q && map == CoefficientMap::OLS && spec.sigma_linear &&
      !options.region) {
    return detail::finalize(spec, map, method, solve_linear_q(spec, y), y);
  }
  const Vector start = options.start ? *options.start : default_start(spec, y);
  check_psi(spec, start);
  const FeasibleRegion region =
      options.region ? *options.region : FeasibleRegion::unbounded(spec.k);
  auto equation = [&](const Vector& psi) -> std::optional<Vector> {
    try {
      return ee_value(spec, scheme, map, psi, y);
    } catch (const NotPositiveDefinite&) {
      return std::nullopt;
    }
  };
  const RootResult root = find_root(equation, start, region, options.solver);
  return detail::finalize(spec, map, method, root, y);
}

/// As try_solve_ee, but throws NoSolutionInRegion / MaxIterations /
/// SingularJacobian when no root is found.
inline EstimationResult solve_ee(const LmmSpec& spec, const WeightScheme& scheme,
                                 CoefficientMap map, const Vector& y,
                                 const EstimationOptions& options = {}) {
  EstimationResult res = try_solve_ee(spec, scheme, map, y, options);
  detail::throw_on_failure(res);
  return res;
}

} // namespace vcee
