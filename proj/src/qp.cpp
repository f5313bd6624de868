#include "dfl/qp.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

namespace dfl::qp {

namespace {

double inf_norm(const Vector& x) { return x.size() ? x.cwiseAbs().maxCoeff() : 0.0; }

// Largest alpha in (0, 1] keeping x + alpha dx >= 0.
double max_step(const Vector& x, const Vector& dx) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (dx[i] < 0.0) alpha = std::min(alpha, -x[i] / dx[i]);
  }
  return alpha;
}

SparseMatrix sparse_identity(Eigen::Index n, double value) {
  SparseMatrix I(n, n);
  I.setIdentity();
  return I * value;
}

// Equality-constrained re-solve on the active set. Returns false when the
// candidate fails primal or dual feasibility.
bool polish(const QPStandardForm& qp, const SparseMatrix& H, QPSolution& sol, double tol) {
  const Eigen::Index n = qp.num_variables();
  const Eigen::Index m = qp.num_constraints();
  std::vector<Eigen::Index> active;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (sol.lambda_star[i] > sol.slack[i]) active.push_back(i);
  }
  const auto na = static_cast<Eigen::Index>(active.size());

  // Row-major copy for cheap row extraction.
  Eigen::SparseMatrix<double, Eigen::RowMajor> Arow = qp.A;
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(H.nonZeros() + 2 * qp.A.nonZeros() + n + na));
  const double delta = 1e-11;
  for (int c = 0; c < H.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(H, c); it; ++it) trip.emplace_back(it.row(), it.col(), it.value());
  for (Eigen::Index i = 0; i < n; ++i) trip.emplace_back(i, i, delta);
  for (Eigen::Index a = 0; a < na; ++a) {
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(Arow, active[static_cast<std::size_t>(a)]); it;
         ++it) {
      trip.emplace_back(n + a, it.col(), it.value());
      trip.emplace_back(it.col(), n + a, it.value());
    }
    trip.emplace_back(n + a, n + a, -delta);
  }
  SparseMatrix K(n + na, n + na);
  K.setFromTriplets(trip.begin(), trip.end());
  SparseMatrix Kexact = K;
  for (Eigen::Index i = 0; i < n; ++i) Kexact.coeffRef(i, i) -= delta;
  for (Eigen::Index a = 0; a < na; ++a) Kexact.coeffRef(n + a, n + a) += delta;

  Vector rhs(n + na);
  rhs.head(n) = -qp.k;
  for (Eigen::Index a = 0; a < na; ++a) rhs[n + a] = qp.b[active[static_cast<std::size_t>(a)]];

  Eigen::SparseLU<SparseMatrix> lu;
  lu.compute(K);
  if (lu.info() != Eigen::Success) return false;
  Vector x = lu.solve(rhs);
  for (int refine = 0; refine < 3; ++refine) {
    Vector r = rhs - Kexact * x;
    x += lu.solve(r);
  }
  if (!x.allFinite()) return false;

  Vector v = x.head(n);
  Vector lambda = Vector::Zero(m);
  for (Eigen::Index a = 0; a < na; ++a) lambda[active[static_cast<std::size_t>(a)]] = x[n + a];

  const Vector Av = qp.A * v;
  const double scale_p = 1.0 + inf_norm(qp.b);
  const double scale_d = 1.0 + inf_norm(qp.k);
  if (m > 0 && (Av - qp.b).maxCoeff() > tol * scale_p) return false;
  if (m > 0 && lambda.minCoeff() < -tol * scale_d) return false;
  const Vector rd = H * v + qp.k + qp.A.transpose() * lambda;
  if (inf_norm(rd) > tol * scale_d) return false;

  sol.v_star = std::move(v);
  sol.lambda_star = lambda.cwiseMax(0.0);
  sol.slack = (qp.b - Av).cwiseMax(0.0);
  sol.polished = true;
  return true;
}

}  // namespace

std::string to_string(QPStatus status) {
  switch (status) {
    case QPStatus::optimal: return "optimal";
    case QPStatus::max_iter: return "max_iter";
    case QPStatus::infeasible: return "infeasible";
  }
  return "unknown";
}

void QPStandardForm::validate() const {
  const Eigen::Index n = k.size();
  if (H.rows() != n || H.cols() != n) throw DimensionError("QP: H must be n x n with n = len(k)");
  if (A.cols() != n) throw DimensionError("QP: A must have n columns");
  if (A.rows() != b.size()) throw DimensionError("QP: A rows must equal len(b)");
  SparseMatrix asym = SparseMatrix(H.transpose()) - H;
  for (int c = 0; c < asym.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(asym, c); it; ++it)
      if (std::abs(it.value()) > 1e-12) throw ContractError("QP: H is not symmetric");
}

QPStandardForm QPStandardForm::from_dense(const Matrix& H, const Vector& k, const Matrix& A, const Vector& b) {
  QPStandardForm qp;
  qp.H = H.sparseView();
  qp.k = k;
  qp.A = A.sparseView();
  qp.b = b;
  qp.validate();
  return qp;
}

double objective(const QPStandardForm& qp, const Vector& v) { return 0.5 * v.dot(qp.H * v) + qp.k.dot(v); }

KktResiduals kkt_residuals(const QPStandardForm& qp, const QPSolution& sol) {
  KktResiduals r;
  const Vector Av_b = qp.A * sol.v_star - qp.b;
  if (Av_b.size()) {
    r.primal = std::max(0.0, Av_b.maxCoeff());
    r.dual = std::max(0.0, -sol.lambda_star.minCoeff());
    r.complementarity = sol.lambda_star.cwiseProduct(Av_b).cwiseAbs().maxCoeff();
  }
  r.stationarity = inf_norm(qp.H * sol.v_star + qp.k + qp.A.transpose() * sol.lambda_star);
  return r;
}

QPSolution solve_qp(const QPStandardForm& qp, const SolverOptions& options) {
  qp.validate();
  const Eigen::Index n = qp.num_variables();
  const Eigen::Index m = qp.num_constraints();
  const SparseMatrix& H = qp.H;
  const SparseMatrix& A = qp.A;
  const SparseMatrix At = A.transpose();
  const SparseMatrix reg = sparse_identity(n, options.regularization);

  QPSolution sol;
  Vector v = Vector::Zero(n);
  Vector s = Vector::Ones(m);
  Vector lambda = Vector::Ones(m);
  if (m > 0) {
    // Least-squares start: min 0.5 v'Hv + k'v + 0.5 ||Av - b||^2, then shift
    // slacks and duals into the positive orthant.
    Eigen::SimplicialLDLT<SparseMatrix> init(H + reg + SparseMatrix(At * A));
    if (init.info() == Eigen::Success) {
      const Vector v0 = init.solve(Vector(-qp.k + At * qp.b));
      if (v0.allFinite()) {
        v = v0;
        const Vector r = A * v - qp.b;
        const double shift_s = -(-r).minCoeff();
        s = shift_s < 0.0 ? Vector(-r) : Vector((-r).array() + 1.0 + shift_s);
        const double shift_l = -r.minCoeff();
        lambda = shift_l < 0.0 ? r : Vector(r.array() + 1.0 + shift_l);
      }
    }
  }

  const double scale_p = 1.0 + inf_norm(qp.b);
  const double scale_d = 1.0 + inf_norm(qp.k);

  auto finish = [&](QPStatus status) {
    sol.v_star = v;
    sol.lambda_star = lambda;
    sol.slack = (qp.b - A * v).cwiseMax(0.0);
    sol.status = status;
    sol.duality_gap = s.dot(lambda);
    if (status == QPStatus::optimal && options.polish && m > 0) polish(qp, H, sol, std::sqrt(options.tol) * 1e-2);
    return sol;
  };

  if (m == 0) {
    Eigen::SimplicialLDLT<SparseMatrix> ldlt(H + reg);
    if (ldlt.info() != Eigen::Success) return finish(QPStatus::max_iter);
    v = ldlt.solve(-qp.k);
    sol.iterations = 1;
    return finish(QPStatus::optimal);
  }

  Eigen::SimplicialLDLT<SparseMatrix> ldlt;
  bool analyzed = false;
  double best_rp = std::numeric_limits<double>::infinity();
  int stalled = 0;

  for (int iter = 0; iter < options.max_iter; ++iter) {
    const Vector rd = H * v + qp.k + At * lambda;
    const Vector rp = A * v + s - qp.b;
    const double gap = s.dot(lambda);
    const double mu = gap / static_cast<double>(m);
    sol.gap_history.push_back(gap);
    sol.iterations = iter;

    const double pobj = objective(qp, v);
    if (inf_norm(rd) <= options.tol * scale_d && inf_norm(rp) <= options.tol * scale_p &&
        mu <= options.tol * (1.0 + std::abs(pobj))) {
      return finish(QPStatus::optimal);
    }

    // Diverging duals with a primal residual that no longer shrinks.
    const double nrp = inf_norm(rp);
    if (nrp < 0.9 * best_rp) {
      best_rp = nrp;
      stalled = 0;
    } else {
      ++stalled;
    }
    if (lambda.maxCoeff() > 1e12 * scale_d && nrp > std::sqrt(options.tol) * scale_p && stalled >= 3) {
      return finish(QPStatus::infeasible);
    }

    const Vector w = lambda.cwiseQuotient(s);
    SparseMatrix K = H + reg + SparseMatrix(At * w.asDiagonal() * A);
    if (!analyzed) {
      ldlt.analyzePattern(K);
      analyzed = true;
    }
    ldlt.factorize(K);
    if (ldlt.info() != Eigen::Success) return finish(QPStatus::max_iter);

    auto direction = [&](const Vector& rc, Vector& dv, Vector& ds, Vector& dl) {
      const Vector t = (lambda.cwiseProduct(rp) - rc).cwiseQuotient(s);
      dv = ldlt.solve(Vector(-rd - At * t));
      const Vector Adv = A * dv;
      ds = -rp - Adv;
      dl = w.cwiseProduct(Adv) + t;
    };

    // Predictor.
    Vector dv, ds, dl;
    Vector rc = s.cwiseProduct(lambda);
    direction(rc, dv, ds, dl);
    const double a_aff = std::min(max_step(s, ds), max_step(lambda, dl));
    const double mu_aff = (s + a_aff * ds).dot(lambda + a_aff * dl) / static_cast<double>(m);
    const double sigma = std::pow(mu_aff / mu, 3);

    // Corrector.
    const Vector rc_center = rc - Vector::Constant(m, std::min(sigma, 0.9) * mu);
    rc += ds.cwiseProduct(dl) - Vector::Constant(m, sigma * mu);
    direction(rc, dv, ds, dl);
    if (!dv.allFinite() || !ds.allFinite() || !dl.allFinite()) return finish(QPStatus::max_iter);

    // Step with a backtrack that keeps the complementarity gap non-increasing.
    auto gap_step = [&](int halvings, double& alpha) {
      double trial = std::min(1.0, 0.99 * std::min(max_step(s, ds), max_step(lambda, dl)));
      for (int bt = 0; bt <= halvings; ++bt) {
        if ((s + trial * ds).dot(lambda + trial * dl) <= gap) {
          alpha = trial;
          return true;
        }
        trial *= 0.5;
      }
      alpha = trial;
      return false;
    };
    double alpha = 0.0;
    if (!gap_step(8, alpha)) {
      // The second-order term can make the gap grow along any corrector step;
      // a plain centering direction decreases it to first order.
      direction(rc_center, dv, ds, dl);
      if (!dv.allFinite() || !ds.allFinite() || !dl.allFinite()) return finish(QPStatus::max_iter);
      gap_step(40, alpha);
    }

    v += alpha * dv;
    s += alpha * ds;
    lambda += alpha * dl;
    s = s.cwiseMax(1e-300);
    lambda = lambda.cwiseMax(1e-300);
  }

  sol.iterations = options.max_iter;
  const Vector rp = A * v + s - qp.b;
  if (inf_norm(rp) > std::sqrt(options.tol) * scale_p && lambda.maxCoeff() > 1e8 * scale_d) {
    return finish(QPStatus::infeasible);
  }
  return finish(QPStatus::max_iter);
}

QPStandardForm lp_to_qp(const Vector& linear_objective, const SparseMatrix& A, const Vector& b, double eps) {
  if (!(eps > 0.0)) throw ContractError("lp_to_qp: eps must be positive");
  QPStandardForm qp;
  qp.H = sparse_identity(linear_objective.size(), 2.0 * eps);
  qp.k = linear_objective;
  qp.A = A;
  qp.b = b;
  qp.validate();
  return qp;
}

void write_qp_dump(std::ostream& os, const QPStandardForm& qp) {
  const Matrix H(qp.H), A(qp.A);
  os.precision(17);
  os << "qp " << qp.num_variables() << " " << qp.num_constraints() << "\n";
  os << "H\n" << H << "\nk\n" << qp.k.transpose() << "\nA\n" << A << "\nb\n" << qp.b.transpose() << "\n";
}

QPStandardForm read_qp_dump(std::istream& is) {
  std::string tag;
  Eigen::Index n = 0, m = 0;
  is >> tag >> n >> m;
  if (tag != "qp" || !is) throw ContractError("qp dump: bad header");
  auto read = [&](const char* name, Eigen::Index rows, Eigen::Index cols) {
    std::string t;
    is >> t;
    if (t != name) throw ContractError(std::string("qp dump: expected section ") + name);
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) is >> out(i, j);
    if (!is) throw ContractError(std::string("qp dump: truncated section ") + name);
    return out;
  };
  const Matrix H = read("H", n, n);
  const Matrix k = read("k", 1, n);
  const Matrix A = read("A", m, n);
  const Matrix b = read("b", 1, m);
  return QPStandardForm::from_dense(H, k.transpose(), A, b.transpose());
}

}  // namespace dfl::qp
