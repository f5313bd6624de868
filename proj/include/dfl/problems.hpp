#pragma once

#include "dfl/autodiff.hpp"
#include "dfl/datagen.hpp"
#include "dfl/qp.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace dfl {

struct NVSpec {
  double c_s = 100.0;
  double c_e = 900.0;

  double quantile() const { return c_s / (c_s + c_e); }
  void validate() const;
};

struct NVQPSpec {
  Matrix Q, Q_s, Q_e;
  Vector c, c_s, c_e, p;
  double B = 1.0;

  Eigen::Index dim() const { return c.size(); }
  void validate() const;

  /// Diagonal quadratics in [0.05, 0.5], c = 0, c_s in [80, 120],
  /// c_e in [700, 1100], p in [1, 3]. B is left at 1; see calibrate_budget.
  static NVQPSpec generate(Eigen::Index d_z, std::uint64_t seed = 7);
  /// B = median of p'y over the rows of Y, so that the budget binds on
  /// roughly half of the hindsight decisions.
  void calibrate_budget(const Matrix& Y);
};

struct POPSpec {
  Vector p_bar;
  double R_min = 0.0;
  double eps = 1e-4;

  void validate() const;
  /// p_bar = column means of Y; R_min = 30th percentile of p_bar'z over
  /// `draws` uniform points of the simplex.
  static POPSpec from_returns(const Matrix& Y, std::uint64_t seed = 11, int draws = 1000, double eps = 1e-4);
};

/// f(z, y) = y'z over the probability simplex.
struct LinearSimplexSpec {
  Eigen::Index dim = 2;
  double eps = 1e-4;

  void validate() const;
};

using Problem = std::variant<NVSpec, NVQPSpec, POPSpec, LinearSimplexSpec>;

std::string problem_name(const Problem& problem);
Eigen::Index decision_dim(const Problem& problem);
Eigen::Index outcome_dim(const Problem& problem);

struct DecisionResult {
  Vector z;
  double objective_value = 0.0;
  Vector aux;
};

class SolveError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Newsvendor.
double nv_task_cost(double z, double y, const NVSpec& spec);
DecisionResult nv_saa_decision(std::span<const double> samples, const NVSpec& spec);
/// Index of the order statistic selected by nv_saa_decision, or nullopt when
/// the decision sits on the 0 floor.
std::optional<std::size_t> nv_selected_index(std::span<const double> samples, const NVSpec& spec, double z_star);
Vector nv_saa_subgradient(std::span<const double> samples, const NVSpec& spec, double z_star);

// Quadratic constrained newsvendor.
double nvqp_task_cost(const Vector& z, const Vector& y, const NVQPSpec& spec);

// Portfolio.
double pop_task_cost(const Vector& z, const Vector& y);

/// Where one predicted sample entry enters the QP data.
struct SampleRoute {
  enum class Target { k, b, A };
  Target target = Target::b;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  double coeff = 1.0;
};

/// An SAA problem in solver form plus the map from sample (j, i) to the QP
/// entries it occupies, stored at routes[j * sample_dim + i].
struct SaaProgram {
  qp::QPStandardForm qp;
  Eigen::Index decision_dim = 0;
  Eigen::Index num_samples = 0;
  Eigen::Index sample_dim = 0;
  std::vector<std::vector<SampleRoute>> routes;

  /// dL/d(samples), M x d_y, from the adjoint of an optimal solve.
  Matrix fold(const qp::KktAdjoint& adjoint) const;
};

SaaProgram nvqp_build_saa(const Matrix& samples, const NVQPSpec& spec);
SaaProgram pop_build_saa(const Matrix& samples, const POPSpec& spec);
SaaProgram linear_build_saa(const Matrix& samples, const LinearSimplexSpec& spec);

double task_cost(const Problem& problem, const Vector& z, const Vector& y);
/// Empirical objective (1/M) sum_j f(z, y_j) with the auxiliaries at their
/// optimal values for this z, including the LP regularizer where the program
/// carries one. This is what the QP path minimizes.
double saa_objective(const Problem& problem, const Matrix& samples, const Vector& z);
/// Checks the feasible set of the problem to tol.
bool is_feasible(const Problem& problem, const Vector& z, double tol = 1e-6);

DecisionResult saa_decision(const Problem& problem, const Matrix& samples, const qp::SolverOptions& options = {});
DecisionResult oracle_decision(const Problem& problem, const Vector& y_true, const qp::SolverOptions& options = {});
/// For the newsvendor the analytic conditional quantile is used when the
/// generator provides one; otherwise SAA over M_oracle true draws.
DecisionResult distribution_oracle_decision(const Problem& problem, const Vector& x, const NoiseModel* noise,
                                            Eigen::Index M_oracle, std::uint64_t seed,
                                            const qp::SolverOptions& options = {});

inline constexpr Eigen::Index kDefaultOracleSamples = 2048;

/// An SAA decision retaining what its backward pass needs.
struct DifferentiableDecision {
  DecisionResult result;
  Matrix samples;
  std::optional<SaaProgram> program;
  qp::QPSolution solution;
  std::optional<std::size_t> nv_selected;

  /// dL/d(samples) given dL/dz.
  Matrix backward(const Problem& problem, const Vector& dL_dz) const;
};

DifferentiableDecision saa_decision_diff(const Problem& problem, const Matrix& samples,
                                         const qp::SolverOptions& options = {});

/// Batched decision node. draws[j] is the B x d_y matrix of the j-th sample
/// for every instance in the batch; the output is B x d_z. Instances whose
/// solve fails get a zero row and zero gradient and are listed in *skipped.
ad::Var saa_layer(const Problem& problem, std::span<const ad::Var> draws, const qp::SolverOptions& options = {},
                  std::vector<Eigen::Index>* skipped = nullptr);

/// Task cost of decisions on the tape: z is B x d_z, Y is B x d_y; returns
/// the B x 1 column of f(z_i, y_i).
ad::Var task_cost_node(const Problem& problem, const ad::Var& z, const Matrix& Y);

}  // namespace dfl
