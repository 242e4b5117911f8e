#include "emgps/linalg.hpp"

#include <cmath>

namespace emgps {

double make_psd(Eigen::MatrixXd& m, double jitter, int escalations) {
  m = symmetrized(m);
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) return 0.0;
  double j = jitter;
  for (int i = 0; i <= escalations; ++i) {
    Eigen::MatrixXd trial = m + j * Eigen::MatrixXd::Identity(m.rows(), m.cols());
    llt.compute(trial);
    if (llt.info() == Eigen::Success) {
      m = trial;
      return j;
    }
    j *= 10.0;
  }
  throw NumericalError("make_psd: Cholesky failed after jitter escalation");
}

double log_det_pd(const Eigen::MatrixXd& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success)
    throw NumericalError("log_det_pd: matrix not positive definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrized(m));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd floor_eigenvalues(const Eigen::MatrixXd& m, double floor) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrized(m));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd solve_sym(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-300);
  double ridge = 0.0;
  for (int attempt = 0; attempt < 4; ++attempt) {
    Eigen::MatrixXd m = symmetrized(a);
    if (ridge > 0.0) m += ridge * Eigen::MatrixXd::Identity(a.rows(), a.cols());
    Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
    if (ldlt.info() == Eigen::Success) {
      Eigen::MatrixXd x = ldlt.solve(b);
      if (is_finite(x)) return x;
    }
    ridge = (ridge == 0.0) ? 1e-12 * scale : ridge * 100.0;
  }
  throw NumericalError("solve_sym: LDLT failed");
}

bool is_finite(const Eigen::MatrixXd& m) {
  return m.allFinite();
}

}  // namespace emgps
