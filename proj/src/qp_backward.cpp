#include "dfl/qp.hpp"

#include <Eigen/SparseLU>

#include <memory>

namespace dfl::qp {

// Adjoint of the KKT conditions at (v*, lambda*). With d~ = diag(lambda) dlambda
// the system is symmetric:
//   [ H   A'           ] [dv]   [-dL/dv]
//   [ A  -diag(s/lam)  ] [d~] = [   0  ]
// which stays well conditioned as active slacks go to zero.
KktAdjoint kkt_adjoint(const QPStandardForm& qp, const QPSolution& sol, const Vector& dL_dv) {
  if (sol.status != QPStatus::optimal) throw ContractError("kkt_adjoint: solution is not optimal");
  const Eigen::Index n = qp.num_variables();
  const Eigen::Index m = qp.num_constraints();
  if (dL_dv.size() != n) throw DimensionError("kkt_adjoint: dL/dv has wrong length");

  const Vector lambda = sol.lambda_star.cwiseMax(kDualClamp);
  const Vector slack = (qp.b - qp.A * sol.v_star).cwiseMax(0.0);

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(qp.H.nonZeros() + 2 * qp.A.nonZeros() + m));
  for (int c = 0; c < qp.H.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(qp.H, c); it; ++it) trip.emplace_back(it.row(), it.col(), it.value());
  for (int c = 0; c < qp.A.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(qp.A, c); it; ++it) {
      trip.emplace_back(n + it.row(), it.col(), it.value());
      trip.emplace_back(it.col(), n + it.row(), it.value());
    }
  for (Eigen::Index r = 0; r < m; ++r) trip.emplace_back(n + r, n + r, -slack[r] / lambda[r]);
  SparseMatrix K(n + m, n + m);
  K.setFromTriplets(trip.begin(), trip.end());

  Eigen::SparseLU<SparseMatrix> lu;
  lu.compute(K);
  if (lu.info() != Eigen::Success) throw KktError("kkt_adjoint: singular KKT system");
  Vector rhs = Vector::Zero(n + m);
  rhs.head(n) = -dL_dv;
  Vector x = lu.solve(rhs);
  // One step of refinement; the diagonal spans many orders of magnitude.
  x += lu.solve(Vector(rhs - K * x));
  if (!x.allFinite()) throw KktError("kkt_adjoint: non-finite adjoint");

  KktAdjoint adj;
  adj.dv = x.head(n);
  adj.scaled_dlambda = x.tail(m);
  adj.v = sol.v_star;
  adj.lambda = lambda;
  return adj;
}

QPGradients backward_kkt(const QPStandardForm& qp, const QPSolution& sol, const Vector& dL_dv) {
  const KktAdjoint adj = kkt_adjoint(qp, sol, dL_dv);
  QPGradients g;
  g.dH = 0.5 * (adj.dv * adj.v.transpose() + adj.v * adj.dv.transpose());
  g.dk = adj.dv;
  g.dA = adj.scaled_dlambda * adj.v.transpose() + adj.lambda * adj.dv.transpose();
  g.db = -adj.scaled_dlambda;
  return g;
}

ad::Var qp_layer(const ad::Var& H, const ad::Var& k, const ad::Var& A, const ad::Var& b,
                 const SolverOptions& options) {
  if (k.cols() != 1 || b.cols() != 1) throw DimensionError("qp_layer: k and b must be column vectors");
  auto qp = std::make_shared<QPStandardForm>(
      QPStandardForm::from_dense(0.5 * (H.value() + H.value().transpose()), k.value(), A.value(), b.value()));
  auto sol = std::make_shared<QPSolution>(solve_qp(*qp, options));
  if (sol->status != QPStatus::optimal) throw NumericError("qp_layer: solver status " + to_string(sol->status));
  ad::Tape* t = H.tape();
  return t->record(
      {H, k, A, b}, sol->v_star,
      [qp, sol](const Matrix& g) {
        QPGradients grads = backward_kkt(*qp, *sol, g.col(0));
        return std::vector<Matrix>{std::move(grads.dH), Matrix(grads.dk), std::move(grads.dA), Matrix(grads.db)};
      },
      "qp_layer");
}

}  // namespace dfl::qp
