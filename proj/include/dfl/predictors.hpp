#pragma once

#include "dfl/autodiff.hpp"
#include "dfl/datagen.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace dfl {

enum class Activation { relu, tanh };

struct MLPArchitecture {
  Eigen::Index input_dim = 1;
  std::vector<Eigen::Index> hidden;
  Eigen::Index output_dim = 1;
  Activation activation = Activation::relu;

  void validate() const;
  std::size_t num_layers() const { return hidden.size() + 1; }
  Eigen::Index layer_in(std::size_t l) const { return l == 0 ? input_dim : hidden[l - 1]; }
  Eigen::Index layer_out(std::size_t l) const { return l == hidden.size() ? output_dim : hidden[l]; }

  static std::vector<Eigen::Index> small_widths() { return {128, 64, 64}; }
  static std::vector<Eigen::Index> large_widths() { return {512, 128, 128}; }
};

/// Row-vector convention: a layer maps X (B x in) to X W + 1 b with W in x out
/// and b 1 x out.
struct MLPWeights {
  std::vector<Matrix> W;
  std::vector<Matrix> b;

  static MLPWeights init(const MLPArchitecture& arch, Rng& rng);
  void check(const MLPArchitecture& arch) const;
};

/// Plain forward pass without a tape.
Matrix mlp_eval(const Matrix& X, const std::vector<Matrix>& W, const std::vector<Matrix>& b, Activation act);

/// Forward pass on a tape; X is B x d_x.
ad::Var mlp_forward(const ad::Var& X, std::span<const ad::Var> W, std::span<const ad::Var> b, Activation act);

/// Point prediction for one input, differentiable in the weights.
ad::Var ann_forward(ad::Tape& tape, const Vector& x, std::span<const ad::Var> W, std::span<const ad::Var> b,
                    const MLPArchitecture& arch);

struct Prior {
  double sigma_p = 1.0;
  void validate() const;
};

/// Mean-field Gaussian posterior: weight = mu + softplus(rho) * eps.
struct VariationalWeights {
  std::vector<Matrix> W_mu, W_rho, b_mu, b_rho;

  /// The architecture's output_dim must already be 2 d_y.
  static VariationalWeights init(const MLPArchitecture& arch, Rng& rng, double rho0 = -5.0);
  void check(const MLPArchitecture& arch) const;
  std::size_t num_weights() const;
};

struct WeightNoise {
  std::vector<Matrix> W, b;
  static WeightNoise draw(const VariationalWeights& theta, Rng& rng);
  static WeightNoise zeros(const VariationalWeights& theta);
};

/// theta attached to a tape as parameters.
struct BnnTapeParams {
  std::vector<ad::Var> W_mu, W_rho, b_mu, b_rho;

  static BnnTapeParams attach(ad::Tape& tape, const VariationalWeights& theta);
  /// All parameter handles in the order W_mu, W_rho, b_mu, b_rho (per layer).
  std::vector<ad::Var> all() const;
};

struct SampledWeights {
  std::vector<ad::Var> W, b;
  std::vector<ad::Var> W_sigma, b_sigma;
  WeightNoise noise;
};

SampledWeights reparameterize(const BnnTapeParams& params, const WeightNoise& noise);

/// C_w = log Q(w) - log P(w) at the sampled weights, or the closed-form
/// Gaussian KL when closed_form is set.
ad::Var kl_term(const BnnTapeParams& params, const SampledWeights& w, const Prior& prior, bool closed_form = false);

/// Network output, B x 2 d_y: mean head then log-variance head.
ad::Var bnn_heads(const ad::Var& X, const SampledWeights& w, Activation act);

inline constexpr double kLogVarClampLo = -10.0;
inline constexpr double kLogVarClampHi = 10.0;
/// Lower clamp for the log-variance head when drawing samples.
inline constexpr double kSampleLogVarLo = -60.0;

/// Mean over the batch of sum_dims exp(-h_s)(y - h_m)^2 + h_s, with h_s
/// clamped to [kLogVarClampLo, kLogVarClampHi].
ad::Var heteroscedastic_nll(const ad::Var& heads, const Matrix& Y);

/// h_m + eps * exp(h_s / 2), eps fixed (B x d_y).
ad::Var bnn_sample_draw(const ad::Var& heads, const Matrix& eps);

/// Monte-Carlo ELBO over the given weight noises: mean over draws of
/// C_w / n_total + NLL.
ad::Var elbo_loss(const BnnTapeParams& params, const Prior& prior, const Matrix& X, const Matrix& Y,
                  double n_total, const std::vector<WeightNoise>& noises, Activation act, bool closed_form_kl = false);

/// M draws h_m + eps * sqrt(exp(h_s)), each with fresh weights and eps.
Matrix bnn_sample_forward(const Vector& x, const VariationalWeights& theta, const MLPArchitecture& arch, Eigen::Index M,
                          Rng& rng);

struct GPModel {
  double lengthscale = 1.0;
  double signal_var = 1.0;
  double noise_var = 1e-2;
  double log_marginal = 0.0;
  Matrix X;            // standardized training inputs
  Vector y;            // standardized targets
  Matrix chol_L;       // lower Cholesky factor of K + noise I (+ jitter)
  Vector alpha;        // (K + noise I)^{-1} y
  double jitter = 0.0;

  bool fitted() const { return alpha.size() > 0; }
  /// Predictive mean and variance of y at standardized inputs.
  void predict(const Matrix& Xs, Vector& mean, Vector& var) const;
};

struct GPFitOptions {
  Eigen::Index search_points = 400;
  Eigen::Index fit_points = 1000;
  int refine_rounds = 2;
  std::uint64_t seed = 0;
};

class FitError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Log marginal likelihood of standardized data for one hyperparameter set.
double gp_log_marginal(const Matrix& X, const Vector& y, double lengthscale, double signal_var, double noise_var);

/// Fits one GP on (X, y) in the coordinates given; the grid search and
/// refinement follow the documented schedule. grid_best receives the best
/// log marginal likelihood among grid candidates.
GPModel gp_fit_one(const Matrix& X, const Vector& y, const GPFitOptions& opts = {}, double* grid_best = nullptr);

/// Per-feature standardization (center and scale). Constant columns keep
/// scale 1.
struct Standardizer {
  Vector mean;
  Vector scale;

  static Standardizer fit(const Matrix& data);
  static Standardizer identity(Eigen::Index dim);
  Matrix apply(const Matrix& data) const;
  Matrix invert(const Matrix& data) const;
  bool empty() const { return mean.size() == 0; }
};

enum class PredictorKind { ann, bnn, gp };

std::string to_string(PredictorKind kind);

/// A fitted model in data coordinates. Networks and GPs operate on
/// standardized inputs and targets; the standardizers map back.
struct Predictor {
  PredictorKind kind = PredictorKind::ann;
  MLPArchitecture arch;  // for the BNN the output layer has 2 d_y units
  MLPWeights ann;
  VariationalWeights bnn;
  Prior prior;
  std::vector<GPModel> gp;
  Standardizer x_std;
  Standardizer y_std;

  Eigen::Index input_dim() const { return x_std.mean.size(); }
  Eigen::Index output_dim() const { return y_std.mean.size(); }

  /// M draws for every row of X: element j is the N x d_y matrix of draw j.
  /// For the BNN all rows of one draw share the same weight sample.
  std::vector<Matrix> predict_samples_batch(const Matrix& X, Eigen::Index M, Rng& rng) const;
  /// M x d_y predictive samples at one input.
  Matrix predict_samples(const Vector& x, Eigen::Index M, Rng& rng) const;
  /// Point prediction: ANN output, BNN mean head at the mean weights, GP mean.
  Matrix predict_mean(const Matrix& X) const;
  /// Predictive q-quantile per row for scalar outputs, estimated from M draws.
  Vector predict_quantile(const Matrix& X, double q, Eigen::Index M, Rng& rng) const;
};

/// Fits per-output GPs on the training data.
Predictor gp_fit(const Matrix& X, const Matrix& Y, const GPFitOptions& opts = {});

/// M independent draws from the fitted GP posteriors at x.
Matrix gp_sample(const Predictor& gp, const Vector& x, Eigen::Index M, Rng& rng);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(std::ostream& os, const Predictor& p);
Predictor load_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Predictor& p);
Predictor load_checkpoint(const std::filesystem::path& path);

}  // namespace dfl
