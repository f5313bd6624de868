#pragma once

#include "dfl/datagen.hpp"
#include "dfl/predictors.hpp"
#include "dfl/problems.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dfl {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  static AdamState for_params(const std::vector<Matrix>& params);
};

/// One bias-corrected Adam update in place.
void adam_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads, AdamState& state, double lr);

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 100;
  Eigen::Index batch_size = 32;
  double K = 0.0;  // task weight for combined training; <= 0 means calibrate on the first batch
  double K_ratio = 10.0;  // task term / regularizer at calibration
  bool regularizer = true;  // false drops E[C_w] from the combined loss
  Eigen::Index M_t = 16;
  Eigen::Index M_val = 0;  // samples for validation decisions, 0 -> M_t
  Eigen::Index val_limit = 0;  // validate on at most this many rows, 0 -> all
  Eigen::Index elbo_draws = 1;
  double scheduler_gamma = 0.99;
  std::uint64_t seed = 0;
  bool closed_form_kl = false;
  double max_skip_fraction = 0.1;
  qp::SolverOptions solver;

  void validate() const;
  double lr_at(int epoch) const;
};

/// Learning rates used by the experiment defaults.
inline constexpr double kLrDetNV = 0.0015;
inline constexpr double kLrDetNVQP = 0.002;
inline constexpr double kLrDetPOP = 0.001;
inline constexpr double kLrDecoupledBNN = 0.0007;
inline constexpr double kLrCombinedBNN = 0.0005;

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double lr = 0.0;
  std::size_t skipped = 0;
};

struct TrainedModel {
  Predictor predictor;
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  double K = 0.0;
  std::size_t skipped_total = 0;
};

class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

MLPArchitecture bnn_architecture(Eigen::Index d_x, Eigen::Index d_y, std::vector<Eigen::Index> hidden,
                                 Activation act = Activation::relu);
MLPArchitecture ann_architecture(Eigen::Index d_x, Eigen::Index d_y, std::vector<Eigen::Index> hidden,
                                 Activation act = Activation::relu);

/// Heteroscedastic NLL of the mean-weight network on a dataset, in
/// standardized target units.
double bnn_validation_nll(const Predictor& p, const Dataset& data);

/// Mean realized task cost of SAA decisions from M predictive draws.
double mean_task_cost(const Predictor& p, const Problem& problem, const Dataset& data, Eigen::Index M,
                      std::uint64_t seed, const qp::SolverOptions& solver = {}, std::size_t* failures = nullptr);

enum class DeterministicMode { decoupled_mse, combined_task };

TrainedModel train_decoupled(const MLPArchitecture& arch, const Prior& prior, const Dataset& train,
                             const Dataset& val, const TrainConfig& cfg);

/// End-to-end training through the decision layer. warm_start, when given,
/// supplies the initial variational parameters and standardizers.
TrainedModel train_combined(const MLPArchitecture& arch, const Prior& prior, const Problem& problem,
                            const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                            const Predictor* warm_start = nullptr);

TrainedModel train_deterministic(const MLPArchitecture& arch, const Dataset& train, const Dataset& val,
                                 const TrainConfig& cfg, DeterministicMode mode,
                                 const Problem* problem = nullptr);

/// Frozen randomness for one combined minibatch step.
struct CombinedNoise {
  std::vector<WeightNoise> weights;  // M_t weight draws
  std::vector<Matrix> eps;  // M_t matrices, B x d_y
};

CombinedNoise draw_combined_noise(const VariationalWeights& theta, Eigen::Index batch, Eigen::Index d_y,
                                  Eigen::Index M_t, Rng& rng);

struct CombinedTerms {
  ad::Var loss;
  ad::Var task;  // mean task cost over solved instances
  ad::Var regularizer;  // mean C_w over the draws, divided by n_total
  std::vector<Eigen::Index> skipped;
};

/// Combined loss on one minibatch: regularizer + K * task. X and Y in data
/// units; the standardizers come from the predictor.
CombinedTerms combined_batch_loss(const BnnTapeParams& params, const Predictor& shape, const Problem& problem,
                                  const Matrix& X, const Matrix& Y, double n_total, const CombinedNoise& noise,
                                  double K, bool regularizer, bool closed_form_kl,
                                  const qp::SolverOptions& solver = {});

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

}  // namespace dfl
