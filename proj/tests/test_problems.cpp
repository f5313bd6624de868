#include "doctest.h"

#include "dfl/problems.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <limits>
#include <random>

using namespace dfl;

namespace {

double grid_argmin_nv(const std::vector<double>& ys, const NVSpec& spec, double hi) {
  double best = std::numeric_limits<double>::infinity(), arg = 0.0;
  for (int g = 0; g * 0.01 <= hi + 1e-9; ++g) {
    const double z = g * 0.01;
    double c = 0.0;
    for (double y : ys) c += spec.c_s * std::max(y - z, 0.0) + spec.c_e * std::max(z - y, 0.0);
    if (c < best - 1e-12) {
      best = c;
      arg = z;
    }
  }
  return arg;
}

// Second implementation of the quadratic newsvendor cost with explicit loops.
double nvqp_cost_loops(const Vector& z, const Vector& y, const NVQPSpec& s) {
  const auto d = z.size();
  double total = 0.0;
  for (Eigen::Index a = 0; a < d; ++a) {
    const double sa = y[a] > z[a] ? y[a] - z[a] : 0.0;
    const double ea = z[a] > y[a] ? z[a] - y[a] : 0.0;
    total += s.c[a] * z[a] + s.c_s[a] * sa + s.c_e[a] * ea;
    for (Eigen::Index b = 0; b < d; ++b) {
      const double sb = y[b] > z[b] ? y[b] - z[b] : 0.0;
      const double eb = z[b] > y[b] ? z[b] - y[b] : 0.0;
      total += z[a] * s.Q(a, b) * z[b] + sa * s.Q_s(a, b) * sb + ea * s.Q_e(a, b) * eb;
    }
  }
  return total;
}

NVQPSpec scalar_nvqp(double quad, double c_s, double c_e, double price, double budget) {
  NVQPSpec s;
  s.Q = Matrix::Constant(1, 1, quad);
  s.Q_s = Matrix::Constant(1, 1, quad);
  s.Q_e = Matrix::Constant(1, 1, quad);
  s.c = Vector::Zero(1);
  s.c_s = Vector::Constant(1, c_s);
  s.c_e = Vector::Constant(1, c_e);
  s.p = Vector::Constant(1, price);
  s.B = budget;
  return s;
}

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = u(rng);
  return m;
}

POPSpec small_pop(std::mt19937_64& rng, Eigen::Index d) {
  const Matrix hist = random_matrix(rng, 50, d, -0.05, 0.08);
  return POPSpec::from_returns(hist, 3);
}

}  // namespace

TEST_CASE("nv_task_cost examples") {
  const NVSpec s;
  CHECK(nv_task_cost(5, 5, s) == 0.0);
  CHECK(nv_task_cost(0, 1, s) == 100.0);
  CHECK(nv_task_cost(2, 1, s) == 900.0);
}

TEST_CASE("nv_saa_decision examples") {
  const NVSpec s;
  const std::vector<double> same(7, 5.0);
  CHECK(nv_saa_decision(same, s).z[0] == 5.0);
  std::vector<double> ten(10);
  for (int i = 0; i < 10; ++i) ten[i] = i + 1;
  CHECK(std::abs((nv_saa_decision(ten, s).z[0]) - (grid_argmin_nv(ten, s, 12.0))) <= 0.01);
  CHECK(nv_saa_decision(ten, s).z[0] == 1.0);
  CHECK(nv_saa_decision(std::vector<double>{1, 2, 3}, NVSpec{5, 5}).z[0] == 2.0);
  CHECK_THROWS_AS(nv_saa_decision(std::vector<double>{}, s), ContractError);
  CHECK(nv_saa_decision(std::vector<double>{-3, -2}, s).z[0] == 0.0);
}

TEST_CASE("nv_saa_decision equals the grid argmin on 1000 random instances") {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> dm(1, 40);
  std::uniform_real_distribution<double> y(0.0, 20.0), cost(1.0, 1000.0);
  for (int t = 0; t < 1000; ++t) {
    NVSpec s{cost(rng), cost(rng)};
    std::vector<double> ys(static_cast<std::size_t>(dm(rng)));
    // Samples on the grid keep the argmin identifiable to one step.
    for (auto& v : ys) v = std::round(y(rng) * 100.0) / 100.0;
    const double z = nv_saa_decision(ys, s).z[0];
    CHECK(std::abs(z - grid_argmin_nv(ys, s, 21.0)) <= 0.01 + 1e-9);
  }
}

TEST_CASE("balanced costs give the median for odd M") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(10.0, 3.0);
  for (int M = 1; M <= 41; M += 2) {
    std::vector<double> ys(static_cast<std::size_t>(M));
    for (auto& v : ys) v = std::abs(n(rng));
    auto sorted = ys;
    std::sort(sorted.begin(), sorted.end());
    CHECK(nv_saa_decision(ys, NVSpec{3, 3}).z[0] == sorted[static_cast<std::size_t>(M / 2)]);
  }
}

TEST_CASE("nv_saa_subgradient: one-hot, ties, finite differences") {
  const NVSpec s;
  std::vector<double> ten(10);
  for (int i = 0; i < 10; ++i) ten[i] = 10 - i;  // the value 1 sits at index 9
  Vector g = nv_saa_subgradient(ten, s, 1.0);
  CHECK(g[9] == 1.0);
  CHECK(g.sum() == 1.0);
  const std::vector<double> same(5, 4.0);
  g = nv_saa_subgradient(same, s, 4.0);
  CHECK(g[0] == 1.0);
  CHECK(g.sum() == 1.0);
  CHECK_THROWS_AS(nv_saa_subgradient(ten, s, 1.5), ContractError);

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(1.0, 30.0);
  std::vector<double> ys(23);
  for (auto& v : ys) v = u(rng);
  const double z = nv_saa_decision(ys, s).z[0];
  g = nv_saa_subgradient(ys, s, z);
  const double h = 1e-7;
  for (std::size_t j = 0; j < ys.size(); ++j) {
    auto p = ys, m = ys;
    p[j] += h;
    m[j] -= h;
    const double fd = (nv_saa_decision(p, s).z[0] - nv_saa_decision(m, s).z[0]) / (2 * h);
    CHECK(fd == doctest::Approx(g[static_cast<Eigen::Index>(j)]).epsilon(1e-6));
  }
}

TEST_CASE("nvqp_task_cost examples") {
  NVQPSpec s = scalar_nvqp(0.0, 100, 900, 1, 1);
  const Vector z = Vector::Constant(1, 2.0), y = Vector::Constant(1, 2.0);
  CHECK(nvqp_task_cost(z, y, s) == 0.0);
  for (double zz : {0.0, 0.5, 3.0, 7.0}) {
    CHECK(nvqp_task_cost(Vector::Constant(1, zz), Vector::Constant(1, 2.5), s) == nv_task_cost(zz, 2.5, NVSpec{}));
  }
  std::mt19937_64 rng(77);
  for (int t = 0; t < 50; ++t) {
    NVQPSpec r = NVQPSpec::generate(6, static_cast<std::uint64_t>(t));
    const Matrix C = random_matrix(rng, 6, 6, -1, 1);
    r.Q = C * C.transpose();
    r.c = random_matrix(rng, 6, 1, -5, 5);
    const Vector zz = random_matrix(rng, 6, 1, 0, 20), yy = random_matrix(rng, 6, 1, -5, 25);
    CHECK(nvqp_task_cost(zz, yy, r) == doctest::Approx(nvqp_cost_loops(zz, yy, r)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(nvqp_task_cost(Vector::Zero(2), Vector::Zero(1), s), DimensionError);
}

TEST_CASE("nvqp_build_saa sizes") {
  NVQPSpec s = NVQPSpec::generate(6);
  s.B = 100;
  const SaaProgram p = nvqp_build_saa(Matrix::Constant(64, 6, 3.0), s);
  CHECK(p.qp.num_variables() == 774);
  CHECK(p.qp.num_constraints() == 1543);
  const SaaProgram q = nvqp_build_saa(Matrix::Constant(1, 1, 3.0), scalar_nvqp(0.01, 100, 900, 1, 10));
  CHECK(q.qp.num_variables() == 3);
  CHECK(q.qp.num_constraints() == 6);
  CHECK_THROWS_AS(nvqp_build_saa(Matrix::Constant(2, 5, 3.0), s), DimensionError);
}

TEST_CASE("nvqp SAA with one sample matches a 1-D grid search") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> y(1.0, 20.0), price(1.0, 3.0), frac(0.3, 1.5);
  for (int t = 0; t < 30; ++t) {
    const double yy = y(rng), pr = price(rng);
    const NVQPSpec s = scalar_nvqp(0.01, 100, 900, pr, frac(rng) * pr * yy);
    const DecisionResult d = saa_decision(s, Matrix::Constant(1, 1, yy));
    const double zmax = s.B / pr;
    double best = std::numeric_limits<double>::infinity(), arg = 0.0;
    for (int g = 0; g <= 200000; ++g) {
      const double z = zmax * g / 200000.0;
      const double c = nvqp_task_cost(Vector::Constant(1, z), Vector::Constant(1, yy), s);
      if (c < best) {
        best = c;
        arg = z;
      }
    }
    CHECK(std::abs(d.z[0] - arg) <= 1e-3);
  }
}

TEST_CASE("NV closed form and NVQP path agree at d_z = 1") {
  std::mt19937_64 rng(2025);
  std::uniform_int_distribution<int> dm(1, 30);
  std::uniform_real_distribution<double> y(0.5, 25.0);
  int compared = 0;
  while (compared < 100) {
    const int M = dm(rng);
    if (M % 10 == 0) continue;  // M q integral: the LP argmin is an interval
    Matrix S(M, 1);
    for (Eigen::Index j = 0; j < M; ++j) S(j, 0) = y(rng);
    const double nv = saa_decision(NVSpec{}, S).z[0];
    const double qp = saa_decision(scalar_nvqp(1e-6, 100, 900, 1.0, 1e6), S).z[0];
    CHECK(std::abs(nv - qp) <= 1e-3);
    ++compared;
  }
}

TEST_CASE("pop_task_cost examples") {
  CHECK(pop_task_cost((Vector(2) << 0.5, 0.5).finished(), (Vector(2) << -1, -1).finished()) == 1.0);
  CHECK(pop_task_cost((Vector(2) << 0.5, 0.2).finished(), (Vector(2) << 1, 3).finished()) == 0.0);
  CHECK(pop_task_cost(Vector::Zero(3), (Vector(3) << -1, 2, -3).finished()) == 0.0);
  CHECK_THROWS_AS(pop_task_cost(Vector::Zero(2), Vector::Zero(3)), DimensionError);
}

TEST_CASE("pop_build_saa sizes, riskless case, validation") {
  POPSpec s;
  s.p_bar = (Vector(2) << 0.02, 0.01).finished();
  s.R_min = 0.01;
  const SaaProgram p = pop_build_saa(Matrix::Constant(3, 2, 0.05), s);
  CHECK(p.qp.num_variables() == 5);
  CHECK(p.qp.num_constraints() == 9);
  const DecisionResult d = saa_decision(s, Matrix::Constant(3, 2, 0.05));
  CHECK(d.aux.cwiseAbs().maxCoeff() <= 1e-8);
  CHECK(saa_objective(s, Matrix::Constant(3, 2, 0.05), d.z) - s.eps * d.z.squaredNorm() <= 1e-10);
  POPSpec bad = s;
  bad.p_bar = -bad.p_bar;
  CHECK_THROWS_AS(pop_build_saa(Matrix::Constant(3, 2, 0.05), bad), ContractError);
}

TEST_CASE("POP SAA matches vertex enumeration of the underlying LP") {
  std::mt19937_64 rng(606);
  for (int t = 0; t < 20; ++t) {
    POPSpec s = small_pop(rng, 2);
    s.eps = 1e-6;
    const Matrix S = random_matrix(rng, 2, 2, -0.1, 0.1);
    const SaaProgram prog = pop_build_saa(S, s);
    const Matrix A = Matrix(prog.qp.A);
    const Vector& b = prog.qp.b;
    const Vector c = (Vector(4) << 0, 0, 0.5, 0.5).finished();
    // Vertices: 4 linearly independent active rows out of 7.
    double best = std::numeric_limits<double>::infinity();
    for (int mask = 0; mask < (1 << 7); ++mask) {
      if (__builtin_popcount(mask) != 4) continue;
      Matrix K(4, 4);
      Vector r(4);
      int row = 0;
      for (int i = 0; i < 7; ++i)
        if (mask & (1 << i)) {
          K.row(row) = A.row(i);
          r[row++] = b[i];
        }
      Eigen::FullPivLU<Matrix> lu(K);
      if (lu.rank() < 4) continue;
      const Vector v = lu.solve(r);
      if ((A * v - b).maxCoeff() > 1e-12) continue;
      best = std::min(best, c.dot(v));
    }
    const DecisionResult d = saa_decision(s, S);
    const double lp_value = (S * d.z).unaryExpr([](double v) { return std::max(-v, 0.0); }).mean();
    CHECK(std::abs(lp_value - best) <= 1e-3);
  }
}

TEST_CASE("saa_decision: one sample equals the deterministic problem") {
  std::mt19937_64 rng(5);
  NVQPSpec s = NVQPSpec::generate(3);
  s.B = 20;
  const Matrix y = random_matrix(rng, 1, 3, 1, 6);
  const DecisionResult a = saa_decision(s, y);
  const DecisionResult b = oracle_decision(s, y.row(0).transpose());
  CHECK((a.z - b.z).cwiseAbs().maxCoeff() == 0.0);
  CHECK(oracle_decision(NVSpec{}, Vector::Constant(1, 7.5)).z[0] == 7.5);
}

TEST_CASE("linear toy: SAA decision equals the mean-propagation decision") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const LinearSimplexSpec s{4, 1e-4};
    const Matrix S = random_matrix(rng, 32, 4, -1, 1);
    const Vector saa = saa_decision(s, S).z;
    const Vector mean = saa_decision(s, Matrix(S.colwise().mean())).z;
    CHECK((saa - mean).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("NVQP oracle beats 100 random feasible probes") {
  std::mt19937_64 rng(31);
  NVQPSpec s = NVQPSpec::generate(6);
  s.B = 60;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 10; ++t) {
    const Vector y = random_matrix(rng, 6, 1, 0, 15);
    const DecisionResult o = oracle_decision(s, y);
    REQUIRE(is_feasible(s, o.z));
    const double best = task_cost(s, o.z, y);
    for (int k = 0; k < 100; ++k) {
      Vector z = random_matrix(rng, 6, 1, 0, 15);
      if (s.p.dot(z) > s.B) z *= s.B / s.p.dot(z) * u(rng);
      CHECK(best <= task_cost(s, z, y) + 1e-6);
    }
  }
}

TEST_CASE("feasibility and argmin optimality over the mean-propagation decision") {
  std::mt19937_64 rng(8080);
  NVQPSpec nvqp = NVQPSpec::generate(6);
  nvqp.calibrate_budget(random_matrix(rng, 200, 6, 0, 20));
  for (int t = 0; t < 15; ++t) {
    const Matrix S = random_matrix(rng, 16, 6, 0, 20);
    const DecisionResult d = saa_decision(nvqp, S);
    const DecisionResult mean = saa_decision(nvqp, Matrix(S.colwise().mean()));
    CHECK(is_feasible(nvqp, d.z));
    CHECK(is_feasible(nvqp, mean.z));
    CHECK(d.objective_value <= saa_objective(nvqp, S, mean.z) + 1e-6 * std::abs(d.objective_value));

    const POPSpec pop = small_pop(rng, 5);
    const Matrix R = random_matrix(rng, 16, 5, -0.1, 0.12);
    const DecisionResult dp = saa_decision(pop, R);
    const DecisionResult mp = saa_decision(pop, Matrix(R.colwise().mean()));
    CHECK(is_feasible(pop, dp.z));
    CHECK(is_feasible(pop, mp.z));
    CHECK(dp.objective_value <= saa_objective(pop, R, mp.z) + 1e-8);
  }
}

TEST_CASE("NVQP budget calibration binds on about half of the oracle solves") {
  const GeneratedData data = gen_nvqp({400, 10, 10, 4});
  NVQPSpec s = NVQPSpec::generate(6);
  s.calibrate_budget(data.train.Y);
  int active = 0;
  for (Eigen::Index i = 0; i < data.train.size(); ++i) {
    const Vector z = oracle_decision(s, data.train.Y.row(i).transpose()).z;
    active += s.p.dot(z) >= s.B - 1e-6;
  }
  const double frac = active / static_cast<double>(data.train.size());
  CHECK(frac >= 0.4);
  CHECK(frac <= 0.6);
}

TEST_CASE("distribution oracle") {
  const GeneratedData nv1 = gen_nv1({10, 10, 10, 0});
  const Vector x = Vector::Constant(1, 0.0);
  const boost::math::normal_distribution<double> n;
  const double analytic = nv_trend(0.0) + nv1_spread(0.0) * boost::math::quantile(n, 0.1);
  CHECK(distribution_oracle_decision(NVSpec{}, x, nv1.noise.get(), 64, 1).z[0] ==
        doctest::Approx(analytic).epsilon(1e-12));
  const double saa = saa_decision(NVSpec{}, true_conditional_samples(x, nv1.noise.get(), 4096, 1)).z[0];
  CHECK(std::abs(saa - analytic) <= 0.05);

  const GeneratedData quiet = gen_nv1({10, 10, 10, 0}, {0.0, 1.0});
  const Vector x2 = Vector::Constant(1, 1.3);
  CHECK(distribution_oracle_decision(NVSpec{}, x2, quiet.noise.get(), 64, 1).z[0] ==
        oracle_decision(NVSpec{}, Vector::Constant(1, nv_trend(1.3))).z[0]);
  CHECK_THROWS_AS(distribution_oracle_decision(NVSpec{}, x2, nullptr, 64, 1), ContractError);
}

TEST_CASE("decision backward matches finite differences of the samples") {
  std::mt19937_64 rng(4242);
  auto check_problem = [&](const Problem& prob, const Matrix& S) {
    const Vector w = random_matrix(rng, decision_dim(prob), 1, -1, 1);
    const DifferentiableDecision dd = saa_decision_diff(prob, S);
    const Matrix g = dd.backward(prob, w);
    const double h = 1e-6;
    double worst = 0.0;
    for (Eigen::Index j = 0; j < S.rows(); ++j)
      for (Eigen::Index i = 0; i < S.cols(); ++i) {
        Matrix p = S, m = S;
        p(j, i) += h;
        m(j, i) -= h;
        const double fd = (w.dot(saa_decision(prob, p).z) - w.dot(saa_decision(prob, m).z)) / (2 * h);
        worst = std::max(worst, std::abs(fd - g(j, i)) / std::max(1.0, std::abs(g(j, i))));
      }
    return worst;
  };
  NVQPSpec nvqp = NVQPSpec::generate(2);
  nvqp.B = 12;
  for (int t = 0; t < 5; ++t) CHECK(check_problem(nvqp, random_matrix(rng, 3, 2, 1, 6)) <= 1e-4);
  POPSpec pop = small_pop(rng, 3);
  pop.eps = 1e-2;
  for (int t = 0; t < 5; ++t) CHECK(check_problem(pop, random_matrix(rng, 4, 3, -0.1, 0.1)) <= 1e-3);
  for (int t = 0; t < 5; ++t) CHECK(check_problem(NVSpec{}, random_matrix(rng, 9, 1, 1, 20)) <= 1e-6);
}

TEST_CASE("saa_layer and task_cost_node on the tape") {
  std::mt19937_64 rng(99);
  NVQPSpec s = NVQPSpec::generate(2);
  s.B = 12;
  const Problem prob = s;
  ad::Tape tape;
  std::vector<ad::Var> draws;
  for (int j = 0; j < 3; ++j) draws.push_back(tape.parameter(random_matrix(rng, 4, 2, 1, 6)));
  std::vector<Eigen::Index> skipped;
  const ad::Var z = saa_layer(prob, draws, {}, &skipped);
  CHECK(skipped.empty());
  REQUIRE(z.rows() == 4);
  const Matrix Y = random_matrix(rng, 4, 2, 1, 6);
  const ad::Var cost = task_cost_node(prob, z, Y);
  for (Eigen::Index i = 0; i < 4; ++i) {
    Matrix S(3, 2);
    for (int j = 0; j < 3; ++j) S.row(j) = draws[static_cast<std::size_t>(j)].value().row(i);
    const Vector zi = saa_decision(prob, S).z;
    CHECK((z.value().row(i).transpose() - zi).cwiseAbs().maxCoeff() == 0.0);
    CHECK(cost.value()(i, 0) == doctest::Approx(task_cost(prob, zi, Y.row(i).transpose())));
  }
  const ad::Gradients g = tape.backward(ad::sum(cost));
  // Compare one draw's gradient with finite differences of the summed cost.
  const double h = 1e-6;
  auto total = [&](const std::vector<Matrix>& vals) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < 4; ++i) {
      Matrix S(3, 2);
      for (int j = 0; j < 3; ++j) S.row(j) = vals[static_cast<std::size_t>(j)].row(i);
      acc += task_cost(prob, saa_decision(prob, S).z, Y.row(i).transpose());
    }
    return acc;
  };
  std::vector<Matrix> vals;
  for (const auto& d : draws) vals.push_back(d.value());
  for (Eigen::Index r = 0; r < 4; ++r)
    for (Eigen::Index c = 0; c < 2; ++c) {
      auto p = vals, m = vals;
      p[1](r, c) += h;
      m[1](r, c) -= h;
      const double fd = (total(p) - total(m)) / (2 * h);
      CHECK(fd == doctest::Approx(g[draws[1]](r, c)).epsilon(1e-4).scale(1.0));
    }
}
