#pragma once

#include "dfl/autodiff.hpp"

#include <Eigen/Sparse>

#include <iosfwd>
#include <string>
#include <vector>

namespace dfl::qp {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// min 0.5 v'Hv + k'v  subject to  A v <= b.
struct QPStandardForm {
  SparseMatrix H;
  Vector k;
  SparseMatrix A;
  Vector b;

  Eigen::Index num_variables() const { return k.size(); }
  Eigen::Index num_constraints() const { return b.size(); }

  /// Throws DimensionError on inconsistent shapes and ContractError when H is
  /// not symmetric to 1e-12.
  void validate() const;

  static QPStandardForm from_dense(const Matrix& H, const Vector& k, const Matrix& A, const Vector& b);
};

enum class QPStatus { optimal, max_iter, infeasible };

std::string to_string(QPStatus status);

struct QPSolution {
  Vector v_star;
  Vector lambda_star;
  Vector slack;  // b - A v_star at the returned iterate (clipped at 0)
  QPStatus status = QPStatus::max_iter;
  int iterations = 0;
  double duality_gap = 0.0;
  std::vector<double> gap_history;
  bool polished = false;
};

struct SolverOptions {
  double tol = 1e-8;
  int max_iter = 50;
  /// Static regularization on the reduced KKT block.
  double regularization = 1e-9;
  /// Re-solve the equality system on the identified active set after
  /// convergence. Gives solutions accurate to rounding.
  bool polish = true;
};

QPSolution solve_qp(const QPStandardForm& qp, const SolverOptions& options = {});

/// Largest violation among the four KKT residuals; used to certify solves.
struct KktResiduals {
  double primal = 0.0;          // max(Av - b)_+
  double dual = 0.0;            // max(-lambda)_+
  double complementarity = 0.0; // max |lambda_i (Av - b)_i|
  double stationarity = 0.0;    // ||Hv + k + A'lambda||_inf
};

KktResiduals kkt_residuals(const QPStandardForm& qp, const QPSolution& sol);

/// Objective value 0.5 v'Hv + k'v.
double objective(const QPStandardForm& qp, const Vector& v);

class KktError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Solution of the adjoint KKT system at an optimum. Gradients with respect
/// to any QP datum are read off lazily, so callers that only need a few
/// entries of dA never materialize the dense block.
struct KktAdjoint {
  Vector dv;             // adjoint of the primal variables
  Vector scaled_dlambda; // diag(lambda) times the dual adjoint
  Vector v;
  Vector lambda;

  double dk(Eigen::Index i) const { return dv[i]; }
  double db(Eigen::Index r) const { return -scaled_dlambda[r]; }
  double dA(Eigen::Index r, Eigen::Index c) const { return scaled_dlambda[r] * v[c] + lambda[r] * dv[c]; }
  double dH(Eigen::Index i, Eigen::Index j) const { return 0.5 * (dv[i] * v[j] + v[i] * dv[j]); }
};

/// Duals below this are clamped before forming the adjoint system.
inline constexpr double kDualClamp = 1e-10;

KktAdjoint kkt_adjoint(const QPStandardForm& qp, const QPSolution& sol, const Vector& dL_dv);

struct QPGradients {
  Matrix dH;
  Vector dk;
  Matrix dA;
  Vector db;
};

QPGradients backward_kkt(const QPStandardForm& qp, const QPSolution& sol, const Vector& dL_dv);

/// Linear program min c'v s.t. Av <= b regularized into a QP with H = 2 eps I.
QPStandardForm lp_to_qp(const Vector& linear_objective, const SparseMatrix& A, const Vector& b, double eps);

/// Differentiable argmin node: inputs H (n x n), k (n x 1), A (m x n),
/// b (m x 1) on a tape; output v* (n x 1).
ad::Var qp_layer(const ad::Var& H, const ad::Var& k, const ad::Var& A, const ad::Var& b,
                 const SolverOptions& options = {});

/// Text dump of a QP for triage of failing solves.
void write_qp_dump(std::ostream& os, const QPStandardForm& qp);
QPStandardForm read_qp_dump(std::istream& is);

}  // namespace dfl::qp
