#pragma once

#include "dfl/datagen.hpp"
#include "dfl/metrics.hpp"
#include "dfl/training.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dfl {

/// Invalid user input (config file, flags, names). Maps to exit code 1.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Method { d_ann, c_ann, d_gp, d_bnn, c_bnn };

std::string to_string(Method m);
Method parse_method(const std::string& name);
std::vector<Method> parse_methods(const std::string& list);
bool is_bnn(Method m);

inline const std::vector<std::string> kExperiments = {"NV1", "NV2", "NVQP", "POP", "POP-sweep", "CSV"};
inline const std::vector<std::string> kMethods = {"D-ANN", "C-ANN", "D-GP", "D-BNN", "C-BNN"};

struct ExperimentConfig {
  // [experiment]
  std::string experiment = "NV1";
  std::vector<Method> methods = {Method::d_ann, Method::c_ann, Method::d_gp, Method::d_bnn, Method::c_bnn};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  Eigen::Index M = 64;
  Eigen::Index M_t = 0;  // 0 -> experiment default
  Eigen::Index M_oracle = 0;  // 0 -> experiment default
  Eigen::Index n_train = 0;  // 0 -> experiment default split
  Eigen::Index n_val = 0;
  Eigen::Index n_test = 0;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> sampling_pairs;  // (M_t, M)
  std::vector<Eigen::Index> train_sizes;
  Eigen::Index curve_points = 101;
  std::string csv_path;
  Eigen::Index csv_dx = 0;
  bool csv_shuffle = false;
  std::string out_dir = "out";
  bool save_checkpoints = true;

  // [train]
  int epochs = 100;
  int epochs_combined = 0;  // 0 -> epochs
  int warm_start_epochs = 0;  // decoupled epochs before C-BNN training
  Eigen::Index batch_size = 32;
  double lr_det = 0.0;  // 0 -> experiment default
  double lr_decoupled = kLrDecoupledBNN;
  double lr_combined = kLrCombinedBNN;
  double K = 0.0;
  double K_ratio = 10.0;
  std::vector<Eigen::Index> hidden;  // empty -> experiment default
  std::string activation = "relu";
  double sigma_p = 1.0;
  bool closed_form_kl = false;
  Eigen::Index val_limit = 0;
  Eigen::Index gp_search_points = 400;
  Eigen::Index gp_fit_points = 1000;

  // [problem]
  double c_s = 100.0;
  double c_e = 900.0;
  Eigen::Index pop_dim = 0;  // 0 -> experiment default
  double pop_eps = 1e-4;
  Eigen::Index nvqp_dim = 6;
  std::uint64_t problem_seed = 7;
  double noise_scale = 1.0;

  void validate() const;
  /// Fills every "0 -> default" field for the chosen experiment.
  ExperimentConfig resolved() const;
  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
  /// Stable 64-bit hash of the resolved config, hex encoded.
  std::string hash() const;
};

/// Reads an INI file with [experiment], [train] and [problem] sections on
/// top of base. Unknown keys are errors.
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
/// One-line description per key, for --help and the README.
std::vector<std::pair<std::string, std::string>> config_keys();

/// Independent streams derived from a run seed.
enum class Stream : std::uint64_t { data = 1, init = 2, sample = 3, oracle = 4, problem = 5 };
std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t salt = 0);

struct ExperimentData {
  GeneratedData data;
  Problem problem;
  bool synthetic = true;
};

/// Data and problem instance for one seed. n_train overrides the split.
ExperimentData prepare_data(const ExperimentConfig& cfg, std::uint64_t seed,
                            std::optional<Eigen::Index> n_train = std::nullopt);

/// Trains one method on prepared data.
Predictor train_method(const ExperimentConfig& cfg, Method m, const ExperimentData& d, std::uint64_t seed,
                       Eigen::Index M_t, TrainedModel* details = nullptr);

struct GridPoint {
  Eigen::Index M_t = 0;
  Eigen::Index M = 0;
  Eigen::Index n_train = 0;
};

struct SweepRow {
  GridPoint point;
  RegretReport report;
};

struct Timing {
  std::string method;
  std::uint64_t seed = 0;
  GridPoint point;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
};

struct CurveRow {
  std::string method;
  std::uint64_t seed = 0;
  double x = 0.0;
  double true_mean = 0.0;
  double true_quantile = 0.0;
  double pred_mean = 0.0;
  double pred_quantile = 0.0;
};

struct RunRecord {
  std::string kind = "run";  // run, sweep-sampling, sweep-trainsize
  ExperimentConfig config;  // resolved
  std::vector<SweepRow> rows;
  std::vector<Timing> timings;
  std::vector<CurveRow> curves;
  std::vector<std::string> errors;
  std::map<std::string, std::string> versions;

  std::string to_json() const;
  static RunRecord from_json(const std::string& text);
  /// Report for (method, grid point), if present.
  const RegretReport* find(const std::string& method, const GridPoint& p) const;
};

RunRecord run_experiment(const ExperimentConfig& cfg);
RunRecord sweep_sampling(const ExperimentConfig& cfg);
RunRecord sweep_trainsize(const ExperimentConfig& cfg);

/// results.csv, sweep.csv, quantile_curves.csv and runrecord.json into dir,
/// each written to a temporary file and renamed.
void write_outputs(const RunRecord& record, const std::filesystem::path& dir);
RunRecord load_run_record(const std::filesystem::path& path);

}  // namespace dfl
