#pragma once

#include <Eigen/Dense>
#include <stdexcept>

namespace emgps {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) {
  return 0.5 * (m + m.transpose());
}

/// Adds jitter*I until the Cholesky factorization succeeds. At most
/// `escalations` retries with the jitter scaled by 10 each time.
/// Returns the jitter actually applied (0 if none was needed).
double make_psd(Eigen::MatrixXd& m, double jitter = 1e-6, int escalations = 3);

/// Cholesky-based log-determinant of a symmetric PD matrix.
double log_det_pd(const Eigen::MatrixXd& m);

/// Symmetric PSD square root via eigendecomposition (negative eigenvalues
/// clamped to zero).
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);

/// Eigenvalue floor: clamps eigenvalues of a symmetric matrix to >= floor.
Eigen::MatrixXd floor_eigenvalues(const Eigen::MatrixXd& m, double floor);

/// Solve A x = b for symmetric A with LDLT; adds an escalating ridge if the
/// factorization is unreliable.
Eigen::MatrixXd solve_sym(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

bool is_finite(const Eigen::MatrixXd& m);

}  // namespace emgps
