#include "dfl/metrics.hpp"

#include <cmath>
#include <numeric>

namespace dfl {

SampleSource sample_source(const Predictor& p) {
  return [&p](const Matrix& X, Eigen::Index M, Rng& rng) { return p.predict_samples_batch(X, M, rng); };
}

OracleCosts oracle_costs(const Problem& problem, const Dataset& test, const NoiseModel* noise,
                         Eigen::Index M_oracle, std::uint64_t seed, const qp::SolverOptions& solver) {
  const Eigen::Index N = test.size();
  OracleCosts out;
  out.point = Vector::Zero(N);
  if (noise) out.dist = Vector::Zero(N);
  out.ok.assign(static_cast<std::size_t>(N), 1);
  for (Eigen::Index i = 0; i < N; ++i) {
    const Vector y = test.Y.row(i).transpose();
    try {
      out.point[i] = task_cost(problem, oracle_decision(problem, y, solver).z, y);
      if (noise) {
        const Vector x = test.X.row(i).transpose();
        const DecisionResult d =
            distribution_oracle_decision(problem, x, noise, M_oracle, seed + static_cast<std::uint64_t>(i), solver);
        (*out.dist)[i] = task_cost(problem, d.z, y);
      }
    } catch (const SolveError&) {
      out.ok[static_cast<std::size_t>(i)] = 0;
    }
  }
  return out;
}

Evaluation evaluate(const SampleSource& model, const Dataset& test, const Problem& problem,
                    const OracleCosts& oracle, const EvalOptions& opts) {
  if (opts.M < 1) throw ContractError("evaluate: M must be at least 1");
  const Eigen::Index N = test.size();
  if (N < 1) throw ContractError("evaluate: empty test set");
  if (oracle.point.size() != N) throw DimensionError("evaluate: oracle costs belong to another test set");
  Rng rng(opts.seed);
  const std::vector<Matrix> draws = model(test.X, opts.M, rng);
  if (static_cast<Eigen::Index>(draws.size()) != opts.M) throw DimensionError("evaluate: model returned the wrong draw count");
  Evaluation ev;
  Matrix S(opts.M, test.Y.cols());
  double r_sum = 0.0, fr_sum = 0.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    if (!oracle.ok[static_cast<std::size_t>(i)]) {
      ++ev.excluded;
      continue;
    }
    for (Eigen::Index j = 0; j < opts.M; ++j) S.row(j) = draws[static_cast<std::size_t>(j)].row(i);
    double cost = 0.0;
    try {
      cost = task_cost(problem, saa_decision(problem, S, opts.solver).z, test.Y.row(i).transpose());
    } catch (const SolveError&) {
      ++ev.excluded;
      continue;
    }
    ev.regret.push_back(cost - oracle.point[i]);
    r_sum += ev.regret.back();
    if (oracle.dist) {
      ev.free_regret.push_back(cost - (*oracle.dist)[i]);
      fr_sum += ev.free_regret.back();
    }
    ++ev.used;
  }
  if (static_cast<double>(ev.excluded) > opts.max_excluded * static_cast<double>(N)) {
    throw EvalError("evaluate: " + std::to_string(ev.excluded) + " of " + std::to_string(N) +
                    " instances failed to solve");
  }
  if (ev.used == 0) throw EvalError("evaluate: no instance could be evaluated");
  ev.R = r_sum / static_cast<double>(ev.used);
  if (oracle.dist) ev.FR = fr_sum / static_cast<double>(ev.used);
  return ev;
}

double regret(const Predictor& model, const Dataset& test, const Problem& problem, Eigen::Index M,
              std::uint64_t seed) {
  const OracleCosts oc = oracle_costs(problem, test, nullptr, 1, 0);
  EvalOptions o;
  o.M = M;
  o.seed = seed;
  return evaluate(sample_source(model), test, problem, oc, o).R;
}

double free_regret(const Predictor& model, const Dataset& test, const Problem& problem, Eigen::Index M,
                   const NoiseModel* noise, Eigen::Index M_oracle, std::uint64_t seed) {
  if (!noise) throw ContractError("free_regret: needs the generator's noise model");
  const OracleCosts oc = oracle_costs(problem, test, noise, M_oracle, seed ^ 0x0a11c1eULL, {});
  EvalOptions o;
  o.M = M;
  o.seed = seed;
  return *evaluate(sample_source(model), test, problem, oc, o).FR;
}

Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  const auto n = static_cast<double>(v.size());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

void RegretReport::aggregate() {
  if (R.size() != seeds.size() || (!FR.empty() && FR.size() != R.size()))
    throw ContractError("RegretReport: per-seed vectors have different lengths");
  R_summary = summarize(R);
  FR_summary.reset();
  if (!FR.empty()) FR_summary = summarize(FR);
}

}  // namespace dfl
