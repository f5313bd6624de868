#pragma once

// Random QP generator and the active-set enumeration oracle.

#include "dfl/qp.hpp"

#include <Eigen/Dense>

#include <limits>
#include <random>
#include <vector>

namespace dfl::testing {

struct DenseQP {
  Matrix H;
  Vector k;
  Matrix A;
  Vector b;
  qp::QPStandardForm form() const { return qp::QPStandardForm::from_dense(H, k, A, b); }
};

/// H = B'B + 0.1 I, a feasible polytope around a random interior point.
inline DenseQP random_qp(std::mt19937_64& rng, int max_n = 8, int max_m = 16) {
  std::uniform_int_distribution<int> dn(1, max_n), dm(1, max_m);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = dn(rng), m = dm(rng);
  DenseQP q;
  Matrix B(n, n);
  for (Eigen::Index i = 0; i < B.size(); ++i) B(i) = z(rng);
  q.H = B.transpose() * B + 0.1 * Matrix::Identity(n, n);
  q.k.resize(n);
  for (auto& x : q.k) x = 2.0 * z(rng);
  q.A.resize(m, n);
  for (Eigen::Index i = 0; i < q.A.size(); ++i) q.A(i) = z(rng);
  Vector v0(n);
  for (auto& x : v0) x = 0.5 * z(rng);
  q.b = q.A * v0;
  for (auto& x : q.b) x += u(rng);
  return q;
}

/// Global optimum by enumerating every active set of size <= n: each
/// equality-constrained minimizer that is primal feasible is a candidate and
/// the true optimum is one of them.
inline double active_set_oracle(const DenseQP& q, Vector* best_v = nullptr) {
  const auto n = q.H.rows();
  const auto m = q.A.rows();
  double best = std::numeric_limits<double>::infinity();
  for (long mask = 0; mask < (1L << m); ++mask) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < m; ++i)
      if (mask & (1L << i)) rows.push_back(i);
    const auto na = static_cast<Eigen::Index>(rows.size());
    if (na > n) continue;
    Matrix K = Matrix::Zero(n + na, n + na);
    Vector rhs(n + na);
    K.topLeftCorner(n, n) = q.H;
    rhs.head(n) = -q.k;
    for (Eigen::Index a = 0; a < na; ++a) {
      K.block(n + a, 0, 1, n) = q.A.row(rows[a]);
      K.block(0, n + a, n, 1) = q.A.row(rows[a]).transpose();
      rhs[n + a] = q.b[rows[a]];
    }
    Eigen::FullPivLU<Matrix> lu(K);
    if (lu.rank() < n + na) continue;
    const Vector x = lu.solve(rhs);
    const Vector v = x.head(n);
    if ((q.A * v - q.b).maxCoeff() > 1e-9) continue;
    const double obj = 0.5 * v.dot(q.H * v) + q.k.dot(v);
    if (obj < best) {
      best = obj;
      if (best_v) *best_v = v;
    }
  }
  return best;
}

}  // namespace dfl::testing
