#pragma once

#include "dfl/predictors.hpp"
#include "dfl/problems.hpp"

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfl {

/// Too many failed solves for the evaluation to be meaningful.
class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// M draws per row of X, element j being the N x d_y matrix of draw j.
using SampleSource = std::function<std::vector<Matrix>(const Matrix& X, Eigen::Index M, Rng& rng)>;

SampleSource sample_source(const Predictor& p);

/// Baseline costs on a test set, shared by every method evaluated on it.
struct OracleCosts {
  Vector point;  // f(z*(y_i), y_i)
  std::optional<Vector> dist;  // f(z*(y_i^dist), y_i), synthetic data only
  std::vector<char> ok;  // baseline solves succeeded
};

OracleCosts oracle_costs(const Problem& problem, const Dataset& test, const NoiseModel* noise,
                         Eigen::Index M_oracle, std::uint64_t seed, const qp::SolverOptions& solver = {});

struct EvalOptions {
  Eigen::Index M = 64;
  std::uint64_t seed = 0;
  double max_excluded = 0.05;
  qp::SolverOptions solver;
};

struct Evaluation {
  double R = 0.0;
  std::optional<double> FR;
  std::size_t used = 0;
  std::size_t excluded = 0;
  std::vector<double> regret;  // per used instance
  std::vector<double> free_regret;
};

Evaluation evaluate(const SampleSource& model, const Dataset& test, const Problem& problem,
                    const OracleCosts& oracle, const EvalOptions& opts);

double regret(const Predictor& model, const Dataset& test, const Problem& problem, Eigen::Index M,
              std::uint64_t seed);
double free_regret(const Predictor& model, const Dataset& test, const Problem& problem, Eigen::Index M,
                   const NoiseModel* noise, Eigen::Index M_oracle, std::uint64_t seed);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

Summary summarize(const std::vector<double>& values);

struct RegretReport {
  std::string experiment;
  std::string method;
  std::vector<std::uint64_t> seeds;
  std::vector<double> R;
  std::vector<double> FR;  // empty for real data
  Summary R_summary;
  std::optional<Summary> FR_summary;

  void aggregate();
};

}  // namespace dfl
