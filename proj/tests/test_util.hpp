#pragma once

#include "vcee/vcee.hpp"

#include <random>

namespace testutil {

using vcee::Matrix;
using vcee::Vector;

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> z(0.0, 1.0);
  Matrix M(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) M(i, j) = z(rng);
  return M;
}

inline Matrix random_symmetric(std::mt19937_64& rng, Eigen::Index n) {
  const Matrix M = random_matrix(rng, n, n);
  return 0.5 * (M + M.transpose());
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Fay-Herriot model with random D in [0.2, 2] and covariates (1, z).
inline vcee::LmmSpec random_fh(std::mt19937_64& rng, int m, int p = 2) {
  Vector D(m);
  for (int i = 0; i < m; ++i) D(i) = uniform(rng, 0.2, 2.0);
  Matrix X = random_matrix(rng, m, p);
  X.col(0).setOnes();
  return vcee::make_fay_herriot(D, X);
}

/// Nested-error model with cluster sizes in [1, nmax] and covariates (1, z...).
inline vcee::LmmSpec random_ner(std::mt19937_64& rng, int m, int nmax = 4, int p = 2) {
  std::vector<int> n(m);
  std::uniform_int_distribution<int> size(1, nmax);
  int N = 0;
  for (int i = 0; i < m; ++i) {
    n[i] = size(rng);
    N += n[i];
  }
  n[0] = std::max(n[0], 2); // at least one cluster with within-cluster variation
  N = 0;
  for (int v : n) N += v;
  Matrix X = random_matrix(rng, N, p);
  X.col(0).setOnes();
  return vcee::make_nested_error(n, X);
}

inline Vector random_psi(std::mt19937_64& rng, const vcee::LmmSpec& spec) {
  Vector psi(spec.k);
  for (int a = 0; a < spec.k; ++a) psi(a) = uniform(rng, 0.3, 2.5);
  return psi;
}

inline Vector draw(std::mt19937_64& rng, const vcee::LmmSpec& spec, const Vector& psi) {
  return vcee::generate(spec, psi, Vector::Ones(spec.p()), rng);
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / (1.0 + std::abs(b)); }

inline double rel_diff(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / (1.0 + b.norm());
}

} // namespace testutil
