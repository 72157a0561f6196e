#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace vcee {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

#define VCEE_DEFINE_ERROR(Name)                                               \
  class Name : public Error {                                                 \
  public:                                                                     \
    using Error::Error;                                                       \
  };

VCEE_DEFINE_ERROR(NotPositiveDefinite)
VCEE_DEFINE_ERROR(NonPositiveD)
VCEE_DEFINE_ERROR(DimensionMismatch)
VCEE_DEFINE_ERROR(RankDeficientX)
VCEE_DEFINE_ERROR(SingularA)
VCEE_DEFINE_ERROR(MissingSecondDerivatives)
VCEE_DEFINE_ERROR(DegenerateDesign)
VCEE_DEFINE_ERROR(SingularWithinDesign)

#undef VCEE_DEFINE_ERROR

// Symmetric k-by-k tables of matrices, indexed [a][b].
using MatrixTable = std::vector<std::vector<Matrix>>;

inline double trace_product(const Matrix& a, const Matrix& b) {
  // tr(AB) without forming the product.
  return (a.array() * b.transpose().array()).sum();
}

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

} // namespace vcee

namespace vcee {

/// Symmetric square root of a positive semidefinite matrix. Eigenvalues below
/// 1e-12 * lambda_max (including small negative rounding noise) are clamped to
/// zero; a clearly negative eigenvalue is an error.
inline Matrix symmetric_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(m));
  if (eig.info() != Eigen::Success) {
    throw NotPositiveDefinite("eigendecomposition failed in symmetric_sqrt");
  }
  Vector values = eig.eigenvalues();
  const double lambda_max = values.size() ? values.cwiseAbs().maxCoeff() : 0.0;
  const double floor = 1e-12 * lambda_max;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values(i) < -1e-8 * std::max(lambda_max, 1.0)) {
      throw NotPositiveDefinite("matrix is not positive semidefinite");
    }
    values(i) = values(i) <= floor ? 0.0 : std::sqrt(values(i));
  }
  return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

} // namespace vcee
