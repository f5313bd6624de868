#pragma once

#include "dfl/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>

namespace dfl {

using Rng = std::mt19937_64;

/// True conditional law y | x of a synthetic generator.
struct NoiseModel {
  enum class Kind { heteroscedastic_gaussian, multimodal_gaussian, mixed_per_output, returns };

  Kind kind = Kind::heteroscedastic_gaussian;
  Eigen::Index input_dim = 1;
  Eigen::Index output_dim = 1;
  /// Multiplies every noise term; 0 gives the noiseless generator.
  double noise_scale = 1.0;
  /// Multiplies the mode offset of the multimodal law; 0 collapses it to one mode.
  double mode_scale = 1.0;

  // mixed_per_output: y_j = 10 softplus(w_j' tanh(V x + c) + w0_j) + noise_j
  Matrix hidden_weights;  // h x d_x
  Vector hidden_bias;     // h
  Matrix output_weights;  // d_y x h
  Vector output_bias;     // d_y

  // returns: y_j = 0.05 tanh(a_j' x + o_j) + 0.02 (1 + |x_0|) eps_j
  Matrix loadings;  // d_y x d_x
  Vector offsets;   // d_y

  /// Location of the conditional law before noise.
  Vector location(const Vector& x) const;
  /// M i.i.d. draws from the conditional law, M x d_y.
  Matrix sample(const Vector& x, Eigen::Index M, Rng& rng) const;
  /// Analytic q-quantile for the scalar newsvendor laws; empty otherwise.
  std::optional<double> quantile(const Vector& x, double q) const;
};

struct Dataset {
  Matrix X;
  Matrix Y;
  /// Present for synthetic data; free-aleatoric regret needs it.
  std::shared_ptr<const NoiseModel> generator;

  Eigen::Index size() const { return X.rows(); }
  void validate() const;
  Dataset rows(const std::vector<Eigen::Index>& idx) const;
  Dataset head(Eigen::Index n) const;
};

struct SplitSpec {
  Eigen::Index n_train = 0;
  Eigen::Index n_val = 0;
  Eigen::Index n_test = 0;
  std::uint64_t seed = 0;

  void validate() const;
  static SplitSpec nv_default(std::uint64_t seed) { return {1800, 1200, 1200, seed}; }
  static SplitSpec nvqp_default(std::uint64_t seed) { return {4000, 2000, 2000, seed}; }
  static SplitSpec pop_default(std::uint64_t seed) { return {1500, 900, 1500, seed}; }
};

struct GeneratedData {
  Dataset train;
  Dataset val;
  Dataset test;
  std::shared_ptr<const NoiseModel> noise;
};

struct GeneratorOptions {
  double noise_scale = 1.0;
  double mode_scale = 1.0;
};

/// Scalar newsvendor demand with heteroscedastic Gaussian noise; x has 80% of
/// its mass on [0, 1] and 20% on (1, 2].
GeneratedData gen_nv1(const SplitSpec& split, const GeneratorOptions& opts = {});
/// Same inputs and trend as NV1 with a symmetric two-mode noise law.
GeneratedData gen_nv2(const SplitSpec& split, const GeneratorOptions& opts = {});
/// x in R^4, y in R^6 with noise classes cycling Gaussian / uniform / bimodal.
GeneratedData gen_nvqp(const SplitSpec& split, const GeneratorOptions& opts = {});
/// x in R^3, asset returns y in R^{d_y}.
GeneratedData gen_pop(const SplitSpec& split, Eigen::Index d_y = 15, const GeneratorOptions& opts = {});

/// Newsvendor trend g(x) = 10 + 5x + 3 sin(4x) and its spread functions.
double nv_trend(double x);
double nv1_spread(double x);
double nv2_mode_offset(double x);
inline constexpr double kNv2ModeNoise = 0.8;

/// Draws inputs from the NV1/NV2 input density.
double nv_sample_input(Rng& rng);

Matrix true_conditional_samples(const Vector& x, const NoiseModel* noise, Eigen::Index M_oracle, std::uint64_t seed);

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Columns x0..x{d_x-1}, y0..y{d_y-1} with a header row.
Dataset load_csv(const std::filesystem::path& path, Eigen::Index d_x, Eigen::Index d_y);
void write_csv(const std::filesystem::path& path, const Dataset& data);

/// Chronological split of a loaded file: first n_train rows, then n_val,
/// then the remainder. With shuffle = true rows are permuted first.
GeneratedData split_dataset(const Dataset& all, Eigen::Index n_train, Eigen::Index n_val, bool shuffle,
                            std::uint64_t seed);

}  // namespace dfl
