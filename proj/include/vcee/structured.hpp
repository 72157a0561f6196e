#pragma once

// Cluster-block engine for the Fay-Herriot and nested-error models.
//
// In both models every matrix that appears (Sigma, Sigma_(a), the bundled
// weights and their derivatives) is block diagonal with blocks a_i I + b_i J
// of size n_i. Such blocks form a commutative algebra, so everything reduces
// to per-cluster scalars plus the per-cluster sums X_i'X_i, X_i'1, X_i'y_i,
// 1'y_i and y_i'y_i. One equation evaluation costs O(m p^2) instead of O(N^3).
// The Fay-Herriot model is the case n_i = 1.

#include "vcee/asymptotics.hpp"

namespace vcee {

/// Per-cluster coefficients of a_i I + b_i J_{n_i}.
struct Blocks {
  Vector a;
  Vector b;
};

namespace blocks {

inline Blocks constant(Eigen::Index m, double a, double b) {
  return {Vector::Constant(m, a), Vector::Constant(m, b)};
}

inline Blocks mul(const Vector& n, const Blocks& x, const Blocks& y) {
  return {x.a.cwiseProduct(y.a),
          (x.a.cwiseProduct(y.b) + x.b.cwiseProduct(y.a) +
           n.cwiseProduct(x.b).cwiseProduct(y.b))
              .eval()};
}

inline Blocks inv(const Vector& n, const Blocks& x) {
  const Vector whole = x.a + n.cwiseProduct(x.b);
  return {x.a.cwiseInverse(), (-x.b.array() / (x.a.array() * whole.array())).matrix()};
}

inline Blocks scaled(const Blocks& x, double c) { return {c * x.a, c * x.b}; }

inline double trace(const Vector& n, const Blocks& x) { return n.dot(x.a + x.b); }

inline double trace_product(const Vector& n, const Blocks& x, const Blocks& y) {
  return trace(n, mul(n, x, y));
}

/// Diagonal entry shared by all rows of cluster i.
inline Vector diag(const Blocks& x) { return x.a + x.b; }

/// (Z' X Z)_ii = n_i a_i + n_i^2 b_i.
inline Vector zt_z(const Vector& n, const Blocks& x) {
  return n.cwiseProduct(x.a) + n.cwiseProduct(n).cwiseProduct(x.b);
}

} // namespace blocks

/// Fixed part of a Fay-Herriot or nested-error model in block form.
struct BlockModel {
  ModelFamily family = ModelFamily::Generic;
  int k = 0;
  Vector n;                 ///< cluster sizes
  Vector D;                 ///< Fay-Herriot sampling variances
  std::vector<Matrix> XtX;  ///< X_i'X_i
  Matrix s;                 ///< row i: (X_i'1)'
  Matrix U;                 ///< (X'X)^{-1}
  Eigen::Index N = 0, p = 0;
  double Ke = 0.0, Kv = 0.0;

  static BlockModel from_spec(const LmmSpec& spec) {
    if (spec.family == ModelFamily::Generic) {
      throw Error("block engine needs a Fay-Herriot or nested-error model");
    }
    validate_design(spec);
    BlockModel bm;
    bm.family = spec.family;
    bm.k = spec.k;
    bm.N = spec.N();
    bm.p = spec.p();
    bm.Ke = spec.Ke;
    bm.Kv = spec.Kv;
    std::vector<int> sizes = spec.family == ModelFamily::NestedError
                                 ? spec.cluster_sizes
                                 : std::vector<int>(static_cast<std::size_t>(spec.N()), 1);
    const auto m = static_cast<Eigen::Index>(sizes.size());
    bm.n.resize(m);
    bm.s.resize(m, bm.p);
    bm.XtX.reserve(m);
    Eigen::Index row = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto Xi = spec.X.middleRows(row, sizes[i]);
      bm.n(i) = sizes[i];
      bm.XtX.push_back(Xi.transpose() * Xi);
      bm.s.row(i) = Xi.colwise().sum();
      row += sizes[i];
    }
    if (spec.family == ModelFamily::FayHerriot) bm.D = spec.D;
    bm.U = detail::solve_normal(spec.X.transpose() * spec.X, Matrix::Identity(bm.p, bm.p));
    return bm;
  }

  Eigen::Index m() const { return n.size(); }

  Blocks sigma(const Vector& psi) const {
    if (family == ModelFamily::FayHerriot) {
      return {(D.array() + psi(0)).matrix(), Vector::Zero(m())};
    }
    return blocks::constant(m(), psi(1), psi(0));
  }

  std::vector<Blocks> sigma_first() const {
    if (family == ModelFamily::FayHerriot) return {blocks::constant(m(), 1.0, 0.0)};
    return {blocks::constant(m(), 0.0, 1.0), blocks::constant(m(), 1.0, 0.0)};
  }

  /// Per-cluster error variance (Re is diagonal) and random-effect variance.
  Vector error_var(const Vector& psi) const {
    return family == ModelFamily::FayHerriot ? D : Vector::Constant(m(), psi(1));
  }
  Vector effect_var(const Vector& psi) const { return Vector::Constant(m(), psi(0)); }

  bool positive_definite(const Vector& psi) const {
    const Blocks S = sigma(psi);
    return (S.a.array() > 0.0).all() && ((S.a + n.cwiseProduct(S.b)).array() > 0.0).all();
  }

  /// X' M X for a block matrix M.
  Matrix xt_x(const Blocks& M) const {
    Matrix out = Matrix::Zero(p, p);
    for (Eigen::Index i = 0; i < m(); ++i) {
      out.noalias() += M.a(i) * XtX[i];
      out.noalias() += M.b(i) * s.row(i).transpose() * s.row(i);
    }
    return out;
  }
};

/// Per-cluster sums of one response vector.
struct BlockResponse {
  Matrix Xty; ///< row i: (X_i'y_i)'
  Vector sy;  ///< 1'y_i
  Vector yty; ///< y_i'y_i

  BlockResponse(const LmmSpec& spec, const BlockModel& bm, const Vector& y) {
    if (y.size() != bm.N) {
      throw DimensionMismatch("y has length " + std::to_string(y.size()) + ", expected N=" +
                              std::to_string(bm.N));
    }
    const auto m = bm.m();
    Xty.resize(m, bm.p);
    sy.resize(m);
    yty.resize(m);
    Eigen::Index row = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto ni = static_cast<Eigen::Index>(bm.n(i));
      const auto yi = y.segment(row, ni);
      Xty.row(i) = (spec.X.middleRows(row, ni).transpose() * yi).transpose();
      sy(i) = yi.sum();
      yty(i) = yi.squaredNorm();
      row += ni;
    }
  }

  Vector xt_y(const BlockModel& bm, const Blocks& M) const {
    Vector out = Vector::Zero(bm.p);
    for (Eigen::Index i = 0; i < bm.m(); ++i) {
      out += M.a(i) * Xty.row(i).transpose() + M.b(i) * sy(i) * bm.s.row(i).transpose();
    }
    return out;
  }

  /// r'Mr with r = y - X beta.
  double quad(const BlockModel& bm, const Blocks& M, const Vector& beta) const {
    double out = 0.0;
    for (Eigen::Index i = 0; i < bm.m(); ++i) {
      const double rr = yty(i) - 2.0 * Xty.row(i).dot(beta) + beta.dot(bm.XtX[i] * beta);
      const double r1 = sy(i) - bm.s.row(i).dot(beta);
      out += M.a(i) * rr + M.b(i) * r1 * r1;
    }
    return out;
  }
};

/// W_a and W_a(b) in block form. dW is empty for weight kinds whose
/// derivatives vanish.
struct BlockWeights {
  std::vector<Blocks> W;
  std::vector<std::vector<Blocks>> dW;
};

inline BlockWeights block_weights(const BlockModel& bm, WeightKind kind, const Vector& psi) {
  const int k = bm.k;
  const auto d1 = bm.sigma_first();
  BlockWeights out;
  out.W.resize(k);
  out.dW.assign(k, std::vector<Blocks>(k));
  if (kind == WeightKind::Q) {
    out.W = d1;
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) out.dW[a][b] = blocks::constant(bm.m(), 0.0, 0.0);
    }
    return out;
  }
  if (kind != WeightKind::RE && kind != WeightKind::FH) {
    throw Error("block engine supports the RE, FH and Q weight kinds");
  }
  const Blocks S = blocks::inv(bm.n, bm.sigma(psi));
  const Blocks S2 = blocks::mul(bm.n, S, S);
  const Blocks S3 = blocks::mul(bm.n, S2, S);
  for (int a = 0; a < k; ++a) {
    // RE: S Sigma_a S, FH: S Sigma_a (the algebra is commutative).
    out.W[a] = blocks::mul(bm.n, kind == WeightKind::RE ? S2 : S, d1[a]);
    for (int b = 0; b < k; ++b) {
      const Blocks ab = blocks::mul(bm.n, d1[a], d1[b]);
      out.dW[a][b] = kind == WeightKind::RE ? blocks::scaled(blocks::mul(bm.n, S3, ab), -2.0)
                                            : blocks::scaled(blocks::mul(bm.n, S2, ab), -1.0);
    }
  }
  return out;
}

namespace detail {

inline Vector block_beta(const BlockModel& bm, const BlockResponse& r, CoefficientMap map,
                         const Blocks* S) {
  if (map == CoefficientMap::OLS) {
    return bm.U * r.xt_y(bm, blocks::constant(bm.m(), 1.0, 0.0));
  }
  return solve_normal(bm.xt_x(*S), r.xt_y(bm, *S));
}

} // namespace detail

/// ee_value evaluated with the block engine.
inline Vector block_ee_value(const BlockModel& bm, const BlockResponse& r, WeightKind kind,
                             CoefficientMap map, const Vector& psi) {
  if (psi.size() != bm.k) {
    throw DimensionMismatch("psi has length " + std::to_string(psi.size()) +
                            ", model has k=" + std::to_string(bm.k));
  }
  const Blocks sigma = bm.sigma(psi);
  const bool inverse_needed = needs_inverse(kind, map);
  if (inverse_needed && !bm.positive_definite(psi)) {
    throw NotPositiveDefinite("Sigma(psi) is not positive definite");
  }
  std::optional<Blocks> S;
  if (inverse_needed) S = blocks::inv(bm.n, sigma);

  std::vector<Blocks> W;
  if (kind == WeightKind::Q) {
    W = bm.sigma_first();
  } else {
    W = block_weights(bm, kind, psi).W;
  }

  const Vector beta = detail::block_beta(bm, r, map, S ? &*S : nullptr);
  Vector out(bm.k);
  if (map == CoefficientMap::GLS) {
    const Matrix V = detail::solve_normal(bm.xt_x(*S), Matrix::Identity(bm.p, bm.p));
    for (int a = 0; a < bm.k; ++a) {
      const double tr = blocks::trace_product(bm.n, W[a], sigma) -
                        trace_product(bm.xt_x(W[a]), V);
      out(a) = r.quad(bm, W[a], beta) - tr;
    }
  } else {
    const Matrix UXSXU = bm.U * bm.xt_x(sigma) * bm.U;
    for (int a = 0; a < bm.k; ++a) {
      const Blocks WS = blocks::mul(bm.n, W[a], sigma);
      const double tr = blocks::trace(bm.n, WS) - 2.0 * trace_product(bm.U, bm.xt_x(WS)) +
                        trace_product(UXSXU, bm.xt_x(W[a]));
      out(a) = r.quad(bm, W[a], beta) - tr;
    }
  }
  return out;
}

/// solve_ee via the block engine; same solver, options and result semantics.
inline EstimationResult block_try_solve(const LmmSpec& spec, const BlockModel& bm,
                                        WeightKind kind, CoefficientMap map, const Vector& y,
                                        const EstimationOptions& options = {}) {
  const BlockResponse r(spec, bm, y);
  const Method method = method_tag(kind, map);
  RootResult root;
  if (kind == WeightKind::Q && map == CoefficientMap::OLS && !options.region) {
    // Linear in psi: f(psi) = f(0) + M psi.
    const Vector zero = Vector::Zero(bm.k);
    const Vector f0 = block_ee_value(bm, r, kind, map, zero);
    Matrix M(bm.k, bm.k);
    for (int b = 0; b < bm.k; ++b) {
      M.col(b) = block_ee_value(bm, r, kind, map, Vector::Unit(bm.k, b)) - f0;
    }
    Eigen::FullPivLU<Matrix> lu(M);
    if (!lu.isInvertible()) {
      root.x = zero;
      root.status = SolveStatus::SingularJacobian;
      root.message = "Q-weight system is singular";
    } else {
      root.x = lu.solve(-f0);
      root.fx = block_ee_value(bm, r, kind, map, root.x);
      root.residual_norm = root.fx.norm();
      root.status = SolveStatus::Converged;
    }
  } else {
    const Vector start = options.start ? *options.start : default_start(spec, y);
    const FeasibleRegion region =
        options.region ? *options.region : FeasibleRegion::unbounded(bm.k);
    auto equation = [&](const Vector& psi) -> std::optional<Vector> {
      if (needs_inverse(kind, map) && !bm.positive_definite(psi)) return std::nullopt;
      return block_ee_value(bm, r, kind, map, psi);
    };
    root = find_root(equation, start, region, options.solver);
  }

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
    const Vector& at = bm.positive_definite(res.psi_hat) ? res.psi_hat : res.psi_raw;
    const Blocks S = blocks::inv(bm.n, bm.sigma(at));
    res.beta_hat = detail::block_beta(bm, r, map, &S);
  }
  return res;
}

/// A, B, Bt in block form with Re, Rv diagonal:
///   Bt_ab = sum_j e_j^2 (W_a)_jj (W_b)_jj Ke + sum_i r_i^2 (Z'W_aZ)_ii (Z'W_bZ)_ii Kv.
inline CoreMatrices block_core(const BlockModel& bm, const BlockWeights& w, const Vector& psi) {
  const int k = bm.k;
  const Blocks sigma = bm.sigma(psi);
  const auto d1 = bm.sigma_first();
  const Vector e2 = bm.error_var(psi).cwiseAbs2().cwiseProduct(bm.n);
  const Vector r2 = bm.effect_var(psi).cwiseAbs2();
  CoreMatrices c{Matrix(k, k), Matrix(k, k), Matrix(k, k)};
  std::vector<Blocks> WS(k);
  for (int a = 0; a < k; ++a) WS[a] = blocks::mul(bm.n, w.W[a], sigma);
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) {
      c.A(a, b) = blocks::trace_product(bm.n, w.W[a], d1[b]);
      c.B(a, b) = blocks::trace_product(bm.n, WS[a], WS[b]);
      c.Btilde(a, b) =
          bm.Ke * e2.dot(blocks::diag(w.W[a]).cwiseProduct(blocks::diag(w.W[b]))) +
          bm.Kv * r2.dot(blocks::zt_z(bm.n, w.W[a]).cwiseProduct(blocks::zt_z(bm.n, w.W[b])));
    }
  }
  detail::require_nonsingular(c.A);
  return c;
}

inline CorrectionMatrices block_corrections(const BlockModel& bm, const BlockWeights& w,
                                            const Vector& psi) {
  const int k = bm.k;
  const Blocks sigma = bm.sigma(psi);
  const auto d1 = bm.sigma_first();
  const Vector e2 = bm.error_var(psi).cwiseAbs2().cwiseProduct(bm.n);
  const Vector r2 = bm.effect_var(psi).cwiseAbs2();
  CorrectionMatrices out;
  for (int a = 0; a < k; ++a) {
    Matrix K(k, k), H(k, k), Kt(k, k);
    for (int b = 0; b < k; ++b) {
      const Blocks& dW = w.dW[a][b];
      const Blocks dWS = blocks::mul(bm.n, dW, sigma);
      for (int c = 0; c < k; ++c) {
        const Blocks WcS = blocks::mul(bm.n, w.W[c], sigma);
        K(b, c) = blocks::trace_product(bm.n, dWS, WcS);
        H(b, c) = blocks::trace_product(bm.n, dW, d1[c]);
        Kt(b, c) =
            bm.Ke * e2.dot(blocks::diag(dW).cwiseProduct(blocks::diag(w.W[c]))) +
            bm.Kv * r2.dot(blocks::zt_z(bm.n, dW).cwiseProduct(blocks::zt_z(bm.n, w.W[c])));
      }
    }
    out.K.push_back(std::move(K));
    out.H.push_back(std::move(H));
    out.Ktilde.push_back(std::move(Kt));
  }
  return out;
}

inline Matrix block_covariance(const BlockModel& bm, WeightKind kind, const Vector& psi) {
  return covariance_from(block_core(bm, block_weights(bm, kind, psi), psi));
}

inline Vector block_bias(const BlockModel& bm, WeightKind kind, const Vector& psi) {
  const BlockWeights w = block_weights(bm, kind, psi);
  return bias_from(block_core(bm, w, psi), block_corrections(bm, w, psi));
}

} // namespace vcee
