#include "dfl/problems.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace dfl {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

using Triplet = Eigen::Triplet<double>;

void require_square(const Matrix& m, Eigen::Index d, const char* what) {
  if (m.rows() != d || m.cols() != d) throw DimensionError(std::string("NVQPSpec: ") + what + " must be d_z x d_z");
}

void require_psd(const Matrix& m, const char* what) {
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
    throw ContractError(std::string("NVQPSpec: ") + what + " must be symmetric");
  }
  if (m.size() > 0 && Eigen::SelfAdjointEigenSolver<Matrix>(m).eigenvalues().minCoeff() < -1e-12) {
    throw ContractError(std::string("NVQPSpec: ") + what + " must be positive semidefinite");
  }
}

void require_samples(const Matrix& samples, Eigen::Index d, const char* who) {
  if (samples.rows() < 1) throw ContractError(std::string(who) + ": need at least one sample");
  if (samples.cols() != d) throw DimensionError(std::string(who) + ": sample width does not match the problem");
}

Vector positive_part(const Vector& v) { return v.cwiseMax(0.0); }

std::size_t order_statistic_rank(std::size_t M, double q) {
  const auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(M) * q - 1e-9));
  return std::clamp<std::size_t>(k, 1, M);
}

double kth_smallest(std::span<const double> samples, std::size_t k) {
  std::vector<double> copy(samples.begin(), samples.end());
  std::nth_element(copy.begin(), copy.begin() + static_cast<std::ptrdiff_t>(k - 1), copy.end());
  return copy[k - 1];
}

std::span<const double> column_span(const Matrix& samples) { return {samples.data(), static_cast<std::size_t>(samples.rows())}; }

}  // namespace

void NVSpec::validate() const {
  if (!(c_s > 0.0) || !(c_e > 0.0)) throw ContractError("NVSpec: c_s and c_e must be positive");
}

void NVQPSpec::validate() const {
  const Eigen::Index d = dim();
  if (d < 1) throw DimensionError("NVQPSpec: empty decision");
  require_square(Q, d, "Q");
  require_square(Q_s, d, "Q_s");
  require_square(Q_e, d, "Q_e");
  if (c_s.size() != d || c_e.size() != d || p.size() != d) throw DimensionError("NVQPSpec: vector sizes differ");
  require_psd(Q, "Q");
  require_psd(Q_s, "Q_s");
  require_psd(Q_e, "Q_e");
  if (p.minCoeff() < 0.0) throw ContractError("NVQPSpec: prices must be nonnegative");
  if (!(B > 0.0)) throw ContractError("NVQPSpec: budget must be positive");
}

NVQPSpec NVQPSpec::generate(Eigen::Index d_z, std::uint64_t seed) {
  if (d_z < 1) throw DimensionError("NVQPSpec::generate: d_z must be positive");
  Rng rng(seed);
  auto draw = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  NVQPSpec s;
  s.Q = Matrix::Zero(d_z, d_z);
  s.Q_s = Matrix::Zero(d_z, d_z);
  s.Q_e = Matrix::Zero(d_z, d_z);
  s.c = Vector::Zero(d_z);
  s.c_s.resize(d_z);
  s.c_e.resize(d_z);
  s.p.resize(d_z);
  for (Eigen::Index i = 0; i < d_z; ++i) {
    s.Q(i, i) = draw(0.05, 0.5);
    s.Q_s(i, i) = draw(0.05, 0.5);
    s.Q_e(i, i) = draw(0.05, 0.5);
    s.c_s[i] = draw(80.0, 120.0);
    s.c_e[i] = draw(700.0, 1100.0);
    s.p[i] = draw(1.0, 3.0);
  }
  return s;
}

void NVQPSpec::calibrate_budget(const Matrix& Y) {
  if (Y.cols() != dim() || Y.rows() < 1) throw DimensionError("calibrate_budget: Y has the wrong shape");
  std::vector<double> spend(static_cast<std::size_t>(Y.rows()));
  for (Eigen::Index r = 0; r < Y.rows(); ++r) spend[static_cast<std::size_t>(r)] = p.dot(positive_part(Y.row(r).transpose()));
  const auto mid = spend.begin() + static_cast<std::ptrdiff_t>(spend.size() / 2);
  std::nth_element(spend.begin(), mid, spend.end());
  B = std::max(*mid, 1e-6);
}

void POPSpec::validate() const {
  if (p_bar.size() < 1) throw DimensionError("POPSpec: empty return vector");
  if (!(eps > 0.0)) throw ContractError("POPSpec: eps must be positive");
  if (R_min > 0.0 && p_bar.maxCoeff() <= 0.0) {
    throw ContractError("POPSpec: no allocation reaches the minimum return");
  }
}

POPSpec POPSpec::from_returns(const Matrix& Y, std::uint64_t seed, int draws, double eps) {
  if (Y.rows() < 1 || Y.cols() < 1) throw DimensionError("POPSpec::from_returns: empty return matrix");
  if (draws < 1) throw ContractError("POPSpec::from_returns: draws must be positive");
  POPSpec s;
  s.p_bar = Y.colwise().mean().transpose();
  s.eps = eps;
  Rng rng(seed);
  std::exponential_distribution<double> e(1.0);
  std::vector<double> ret(static_cast<std::size_t>(draws));
  for (auto& r : ret) {
    Vector z(Y.cols());
    for (auto& v : z) v = e(rng);
    r = s.p_bar.dot(z / z.sum());
  }
  std::sort(ret.begin(), ret.end());
  const double pos = 0.3 * static_cast<double>(draws - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, ret.size() - 1);
  s.R_min = ret[lo] + (pos - static_cast<double>(lo)) * (ret[hi] - ret[lo]);
  s.validate();
  return s;
}

void LinearSimplexSpec::validate() const {
  if (dim < 1) throw DimensionError("LinearSimplexSpec: dim must be positive");
  if (!(eps > 0.0)) throw ContractError("LinearSimplexSpec: eps must be positive");
}

std::string problem_name(const Problem& problem) {
  return std::visit(overloaded{[](const NVSpec&) { return std::string("NV"); },
                               [](const NVQPSpec&) { return std::string("NVQP"); },
                               [](const POPSpec&) { return std::string("POP"); },
                               [](const LinearSimplexSpec&) { return std::string("LINEAR"); }},
                    problem);
}

Eigen::Index decision_dim(const Problem& problem) {
  return std::visit(overloaded{[](const NVSpec&) { return Eigen::Index{1}; },
                               [](const NVQPSpec& s) { return s.dim(); },
                               [](const POPSpec& s) { return s.p_bar.size(); },
                               [](const LinearSimplexSpec& s) { return s.dim; }},
                    problem);
}

Eigen::Index outcome_dim(const Problem& problem) { return decision_dim(problem); }

double nv_task_cost(double z, double y, const NVSpec& spec) {
  return spec.c_s * std::max(y - z, 0.0) + spec.c_e * std::max(z - y, 0.0);
}

DecisionResult nv_saa_decision(std::span<const double> samples, const NVSpec& spec) {
  spec.validate();
  if (samples.empty()) throw ContractError("nv_saa_decision: need at least one sample");
  const double kth = kth_smallest(samples, order_statistic_rank(samples.size(), spec.quantile()));
  DecisionResult r;
  r.z = Vector::Constant(1, std::max(kth, 0.0));
  double total = 0.0;
  for (double y : samples) total += nv_task_cost(r.z[0], y, spec);
  r.objective_value = total / static_cast<double>(samples.size());
  return r;
}

std::optional<std::size_t> nv_selected_index(std::span<const double> samples, const NVSpec& spec, double z_star) {
  if (samples.empty()) throw ContractError("nv_saa_subgradient: need at least one sample");
  const double kth = kth_smallest(samples, order_statistic_rank(samples.size(), spec.quantile()));
  if (z_star == 0.0 && kth < 0.0) return std::nullopt;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    if (samples[j] == kth && std::abs(samples[j] - z_star) <= 1e-12) return j;
  }
  throw ContractError("nv_saa_subgradient: z_star is not the selected order statistic of these samples");
}

Vector nv_saa_subgradient(std::span<const double> samples, const NVSpec& spec, double z_star) {
  Vector g = Vector::Zero(static_cast<Eigen::Index>(samples.size()));
  if (const auto j = nv_selected_index(samples, spec, z_star)) g[static_cast<Eigen::Index>(*j)] = 1.0;
  return g;
}

double nvqp_task_cost(const Vector& z, const Vector& y, const NVQPSpec& spec) {
  const Eigen::Index d = spec.dim();
  if (z.size() != d || y.size() != d) throw DimensionError("nvqp_task_cost: dimension mismatch");
  const Vector s = positive_part(y - z);
  const Vector e = positive_part(z - y);
  return z.dot(spec.Q * z) + spec.c.dot(z) + s.dot(spec.Q_s * s) + spec.c_s.dot(s) + e.dot(spec.Q_e * e) +
         spec.c_e.dot(e);
}

double pop_task_cost(const Vector& z, const Vector& y) {
  if (z.size() != y.size()) throw DimensionError("pop_task_cost: dimension mismatch");
  return std::max(-y.dot(z), 0.0);
}

Matrix SaaProgram::fold(const qp::KktAdjoint& adjoint) const {
  Matrix g = Matrix::Zero(num_samples, sample_dim);
  for (Eigen::Index j = 0; j < num_samples; ++j) {
    for (Eigen::Index i = 0; i < sample_dim; ++i) {
      double acc = 0.0;
      for (const SampleRoute& r : routes[static_cast<std::size_t>(j * sample_dim + i)]) {
        switch (r.target) {
          case SampleRoute::Target::k: acc += r.coeff * adjoint.dk(r.row); break;
          case SampleRoute::Target::b: acc += r.coeff * adjoint.db(r.row); break;
          case SampleRoute::Target::A: acc += r.coeff * adjoint.dA(r.row, r.col); break;
        }
      }
      g(j, i) = acc;
    }
  }
  return g;
}

SaaProgram nvqp_build_saa(const Matrix& samples, const NVQPSpec& spec) {
  spec.validate();
  const Eigen::Index d = spec.dim();
  require_samples(samples, d, "nvqp_build_saa");
  const Eigen::Index M = samples.rows();
  const Eigen::Index n = d + 2 * M * d;
  const Eigen::Index m = n + 2 * M * d + 1;
  const double inv = 1.0 / static_cast<double>(M);
  auto zs = [&](Eigen::Index j, Eigen::Index i) { return d + j * d + i; };
  auto ze = [&](Eigen::Index j, Eigen::Index i) { return d + M * d + j * d + i; };

  SaaProgram prog;
  prog.decision_dim = d;
  prog.num_samples = M;
  prog.sample_dim = d;
  prog.routes.resize(static_cast<std::size_t>(M * d));

  std::vector<Triplet> h;
  Vector k = Vector::Zero(n);
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index c = 0; c < d; ++c) {
      if (spec.Q(a, c) != 0.0) h.emplace_back(a, c, 2.0 * spec.Q(a, c));
      for (Eigen::Index j = 0; j < M; ++j) {
        if (spec.Q_s(a, c) != 0.0) h.emplace_back(zs(j, a), zs(j, c), 2.0 * inv * spec.Q_s(a, c));
        if (spec.Q_e(a, c) != 0.0) h.emplace_back(ze(j, a), ze(j, c), 2.0 * inv * spec.Q_e(a, c));
      }
    }
    k[a] = spec.c[a];
    for (Eigen::Index j = 0; j < M; ++j) {
      k[zs(j, a)] = inv * spec.c_s[a];
      k[ze(j, a)] = inv * spec.c_e[a];
    }
  }

  std::vector<Triplet> a;
  a.reserve(static_cast<std::size_t>(n + 4 * M * d + d));
  Vector b = Vector::Zero(m);
  for (Eigen::Index r = 0; r < n; ++r) a.emplace_back(r, r, -1.0);
  for (Eigen::Index j = 0; j < M; ++j) {
    for (Eigen::Index i = 0; i < d; ++i) {
      const Eigen::Index short_row = n + j * d + i;
      const Eigen::Index excess_row = n + M * d + j * d + i;
      // -z - z_s <= -y   and   z - z_e <= y
      a.emplace_back(short_row, i, -1.0);
      a.emplace_back(short_row, zs(j, i), -1.0);
      a.emplace_back(excess_row, i, 1.0);
      a.emplace_back(excess_row, ze(j, i), -1.0);
      b[short_row] = -samples(j, i);
      b[excess_row] = samples(j, i);
      auto& routes = prog.routes[static_cast<std::size_t>(j * d + i)];
      routes.push_back({SampleRoute::Target::b, short_row, 0, -1.0});
      routes.push_back({SampleRoute::Target::b, excess_row, 0, 1.0});
    }
  }
  for (Eigen::Index i = 0; i < d; ++i) a.emplace_back(m - 1, i, spec.p[i]);
  b[m - 1] = spec.B;

  prog.qp.H.resize(n, n);
  prog.qp.H.setFromTriplets(h.begin(), h.end());
  prog.qp.k = std::move(k);
  prog.qp.A.resize(m, n);
  prog.qp.A.setFromTriplets(a.begin(), a.end());
  prog.qp.b = std::move(b);
  return prog;
}

SaaProgram pop_build_saa(const Matrix& samples, const POPSpec& spec) {
  spec.validate();
  const Eigen::Index d = spec.p_bar.size();
  require_samples(samples, d, "pop_build_saa");
  const Eigen::Index M = samples.rows();
  const Eigen::Index n = d + M;
  const Eigen::Index m = d + 2 * M + 1;

  SaaProgram prog;
  prog.decision_dim = d;
  prog.num_samples = M;
  prog.sample_dim = d;
  prog.routes.resize(static_cast<std::size_t>(M * d));

  Vector c = Vector::Zero(n);
  c.tail(M).setConstant(1.0 / static_cast<double>(M));
  std::vector<Triplet> a;
  a.reserve(static_cast<std::size_t>(n + M * (d + 1) + d));
  Vector b = Vector::Zero(m);
  for (Eigen::Index r = 0; r < n; ++r) a.emplace_back(r, r, -1.0);
  for (Eigen::Index j = 0; j < M; ++j) {
    const Eigen::Index row = n + j;
    for (Eigen::Index i = 0; i < d; ++i) {
      a.emplace_back(row, i, -samples(j, i));
      prog.routes[static_cast<std::size_t>(j * d + i)].push_back({SampleRoute::Target::A, row, i, -1.0});
    }
    a.emplace_back(row, d + j, -1.0);
  }
  for (Eigen::Index i = 0; i < d; ++i) a.emplace_back(m - 1, i, -spec.p_bar[i]);
  b[m - 1] = -spec.R_min;

  qp::SparseMatrix A(m, n);
  A.setFromTriplets(a.begin(), a.end());
  prog.qp = qp::lp_to_qp(c, A, b, spec.eps);
  return prog;
}

SaaProgram linear_build_saa(const Matrix& samples, const LinearSimplexSpec& spec) {
  spec.validate();
  const Eigen::Index d = spec.dim;
  require_samples(samples, d, "linear_build_saa");
  const Eigen::Index M = samples.rows();
  const double inv = 1.0 / static_cast<double>(M);

  SaaProgram prog;
  prog.decision_dim = d;
  prog.num_samples = M;
  prog.sample_dim = d;
  prog.routes.resize(static_cast<std::size_t>(M * d));
  for (Eigen::Index j = 0; j < M; ++j)
    for (Eigen::Index i = 0; i < d; ++i)
      prog.routes[static_cast<std::size_t>(j * d + i)].push_back({SampleRoute::Target::k, i, 0, inv});

  std::vector<Triplet> a;
  for (Eigen::Index i = 0; i < d; ++i) {
    a.emplace_back(i, i, -1.0);
    a.emplace_back(d, i, 1.0);
    a.emplace_back(d + 1, i, -1.0);
  }
  qp::SparseMatrix A(d + 2, d);
  A.setFromTriplets(a.begin(), a.end());
  Vector b = Vector::Zero(d + 2);
  b[d] = 1.0;
  b[d + 1] = -1.0;
  prog.qp = qp::lp_to_qp(samples.colwise().mean().transpose(), A, b, spec.eps);
  return prog;
}

double task_cost(const Problem& problem, const Vector& z, const Vector& y) {
  return std::visit(
      overloaded{[&](const NVSpec& s) {
                   if (z.size() != 1 || y.size() != 1) throw DimensionError("nv_task_cost: scalar problem");
                   return nv_task_cost(z[0], y[0], s);
                 },
                 [&](const NVQPSpec& s) { return nvqp_task_cost(z, y, s); },
                 [&](const POPSpec&) { return pop_task_cost(z, y); },
                 [&](const LinearSimplexSpec&) {
                   if (z.size() != y.size()) throw DimensionError("linear task cost: dimension mismatch");
                   return y.dot(z);
                 }},
      problem);
}

double saa_objective(const Problem& problem, const Matrix& samples, const Vector& z) {
  const auto M = static_cast<double>(samples.rows());
  double total = 0.0;
  for (Eigen::Index j = 0; j < samples.rows(); ++j) total += task_cost(problem, z, samples.row(j).transpose());
  double reg = 0.0;
  if (const auto* pop = std::get_if<POPSpec>(&problem)) {
    double u2 = 0.0;
    for (Eigen::Index j = 0; j < samples.rows(); ++j) u2 += std::pow(pop_task_cost(z, samples.row(j).transpose()), 2);
    reg = pop->eps * (z.squaredNorm() + u2);
  } else if (const auto* lin = std::get_if<LinearSimplexSpec>(&problem)) {
    reg = lin->eps * z.squaredNorm();
  }
  return total / M + reg;
}

bool is_feasible(const Problem& problem, const Vector& z, double tol) {
  if (z.size() != decision_dim(problem)) return false;
  if (z.minCoeff() < -tol) return false;
  return std::visit(overloaded{[&](const NVSpec&) { return true; },
                               [&](const NVQPSpec& s) { return s.p.dot(z) <= s.B + tol; },
                               [&](const POPSpec& s) { return s.p_bar.dot(z) >= s.R_min - tol; },
                               [&](const LinearSimplexSpec&) { return std::abs(z.sum() - 1.0) <= tol; }},
                    problem);
}

DifferentiableDecision saa_decision_diff(const Problem& problem, const Matrix& samples,
                                         const qp::SolverOptions& options) {
  DifferentiableDecision out;
  out.samples = samples;
  if (const auto* nv = std::get_if<NVSpec>(&problem)) {
    require_samples(samples, 1, "nv_saa_decision");
    out.result = nv_saa_decision(column_span(samples), *nv);
    out.nv_selected = nv_selected_index(column_span(samples), *nv, out.result.z[0]);
    return out;
  }
  out.program = std::visit(
      overloaded{[&](const NVSpec&) -> SaaProgram { throw ContractError("unreachable"); },
                 [&](const NVQPSpec& s) { return nvqp_build_saa(samples, s); },
                 [&](const POPSpec& s) { return pop_build_saa(samples, s); },
                 [&](const LinearSimplexSpec& s) { return linear_build_saa(samples, s); }},
      problem);
  out.solution = qp::solve_qp(out.program->qp, options);
  if (out.solution.status != qp::QPStatus::optimal) {
    throw SolveError(problem_name(problem) + " SAA solve ended with status " + qp::to_string(out.solution.status));
  }
  const Eigen::Index d = out.program->decision_dim;
  out.result.z = out.solution.v_star.head(d);
  out.result.aux = out.solution.v_star.tail(out.solution.v_star.size() - d);
  out.result.objective_value = saa_objective(problem, samples, out.result.z);
  return out;
}

Matrix DifferentiableDecision::backward(const Problem& problem, const Vector& dL_dz) const {
  if (dL_dz.size() != result.z.size()) throw DimensionError("decision backward: dL/dz has the wrong size");
  if (std::holds_alternative<NVSpec>(problem)) {
    Matrix g = Matrix::Zero(samples.rows(), 1);
    if (nv_selected) g(static_cast<Eigen::Index>(*nv_selected), 0) = dL_dz[0];
    return g;
  }
  if (!program) throw ContractError("decision backward: no program retained");
  Vector dL_dv = Vector::Zero(program->qp.num_variables());
  dL_dv.head(dL_dz.size()) = dL_dz;
  return program->fold(qp::kkt_adjoint(program->qp, solution, dL_dv));
}

DecisionResult saa_decision(const Problem& problem, const Matrix& samples, const qp::SolverOptions& options) {
  return saa_decision_diff(problem, samples, options).result;
}

DecisionResult oracle_decision(const Problem& problem, const Vector& y_true, const qp::SolverOptions& options) {
  return saa_decision(problem, y_true.transpose(), options);
}

DecisionResult distribution_oracle_decision(const Problem& problem, const Vector& x, const NoiseModel* noise,
                                            Eigen::Index M_oracle, std::uint64_t seed,
                                            const qp::SolverOptions& options) {
  if (!noise) throw ContractError("distribution oracle needs a dataset with a known generator");
  if (noise->noise_scale == 0.0) return oracle_decision(problem, noise->location(x), options);
  const Matrix draws = true_conditional_samples(x, noise, M_oracle, seed);
  if (const auto* nv = std::get_if<NVSpec>(&problem)) {
    if (const auto q = noise->quantile(x, nv->quantile())) {
      DecisionResult r;
      r.z = Vector::Constant(1, std::max(*q, 0.0));
      r.objective_value = saa_objective(problem, draws, r.z);
      return r;
    }
  }
  return saa_decision(problem, draws, options);
}

ad::Var saa_layer(const Problem& problem, std::span<const ad::Var> draws, const qp::SolverOptions& options,
                  std::vector<Eigen::Index>* skipped) {
  if (draws.empty()) throw ContractError("saa_layer: need at least one draw");
  ad::Tape* tape = draws[0].tape();
  const Eigen::Index B = draws[0].rows();
  const Eigen::Index dy = outcome_dim(problem);
  const Eigen::Index dz = decision_dim(problem);
  const auto M = static_cast<Eigen::Index>(draws.size());
  for (const auto& d : draws) {
    if (d.tape() != tape) throw ContractError("saa_layer: draws live on different tapes");
    if (d.rows() != B || d.cols() != dy) throw DimensionError("saa_layer: draw has the wrong shape");
  }
  auto decisions = std::make_shared<std::vector<std::optional<DifferentiableDecision>>>(static_cast<std::size_t>(B));
  Matrix out = Matrix::Zero(B, dz);
  if (skipped) skipped->clear();
  Matrix samples(M, dy);
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index j = 0; j < M; ++j) samples.row(j) = draws[static_cast<std::size_t>(j)].value().row(i);
    try {
      auto dd = saa_decision_diff(problem, samples, options);
      out.row(i) = dd.result.z.transpose();
      (*decisions)[static_cast<std::size_t>(i)] = std::move(dd);
    } catch (const SolveError&) {
      if (skipped) skipped->push_back(i);
    }
  }
  std::vector<ad::Var> operands(draws.begin(), draws.end());
  auto rule = [decisions, problem, B, M, dy](const Matrix& upstream) {
    std::vector<Matrix> grads(static_cast<std::size_t>(M), Matrix::Zero(B, dy));
    for (Eigen::Index i = 0; i < B; ++i) {
      const auto& dd = (*decisions)[static_cast<std::size_t>(i)];
      if (!dd || upstream.row(i).isZero(0.0)) continue;
      Matrix g;
      try {
        g = dd->backward(problem, upstream.row(i).transpose());
      } catch (const qp::KktError&) {
        continue;
      }
      for (Eigen::Index j = 0; j < M; ++j) grads[static_cast<std::size_t>(j)].row(i) = g.row(j);
    }
    return grads;
  };
  return tape->record(std::move(operands), std::move(out), std::move(rule), "saa_layer");
}

ad::Var task_cost_node(const Problem& problem, const ad::Var& z, const Matrix& Y) {
  const Eigen::Index B = z.rows();
  const Eigen::Index dz = decision_dim(problem);
  if (z.cols() != dz || Y.rows() != B || Y.cols() != outcome_dim(problem)) {
    throw DimensionError("task_cost_node: shape mismatch");
  }
  const Matrix Z = z.value();
  Matrix cost(B, 1);
  Matrix grad(B, dz);
  for (Eigen::Index i = 0; i < B; ++i) {
    const Vector zi = Z.row(i).transpose();
    const Vector yi = Y.row(i).transpose();
    cost(i, 0) = task_cost(problem, zi, yi);
    grad.row(i) = std::visit(
        overloaded{[&](const NVSpec& s) -> Vector {
                     const double g = yi[0] > zi[0] ? -s.c_s : (zi[0] > yi[0] ? s.c_e : 0.0);
                     return Vector::Constant(1, g);
                   },
                   [&](const NVQPSpec& s) -> Vector {
                     const Vector sh = positive_part(yi - zi);
                     const Vector ex = positive_part(zi - yi);
                     const Vector short_on = (yi.array() > zi.array()).cast<double>();
                     const Vector excess_on = (zi.array() > yi.array()).cast<double>();
                     return 2.0 * s.Q * zi + s.c - (2.0 * s.Q_s * sh + s.c_s).cwiseProduct(short_on) +
                            (2.0 * s.Q_e * ex + s.c_e).cwiseProduct(excess_on);
                   },
                   [&](const POPSpec&) -> Vector { return -yi.dot(zi) > 0.0 ? Vector(-yi) : Vector::Zero(dz); },
                   [&](const LinearSimplexSpec&) -> Vector { return yi; }},
        problem).transpose();
  }
  auto rule = [grad](const Matrix& upstream) {
    return std::vector<Matrix>{grad.array().colwise() * upstream.col(0).array()};
  };
  return z.tape()->record({z}, std::move(cost), std::move(rule), "task_cost");
}

}  // namespace dfl
