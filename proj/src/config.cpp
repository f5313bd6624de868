#include "dfl/experiment.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace dfl {

namespace {

using json = nlohmann::json;

std::string join(const std::vector<std::string>& v) {
  return boost::algorithm::join(v, ", ");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  boost::split(parts, s, boost::is_any_of(","));
  std::vector<std::string> out;
  for (auto& p : parts) {
    boost::trim(p);
    if (!p.empty()) out.push_back(p);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const std::string t = boost::trim_copy(text);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) throw ConfigError(key + ": cannot parse '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = boost::to_lower_copy(boost::trim_copy(text));
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + text + "'");
}

template <class T>
std::vector<T> parse_number_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& p : split_list(text)) out.push_back(parse_number<T>(key, p));
  return out;
}

std::vector<std::pair<Eigen::Index, Eigen::Index>> parse_pairs(const std::string& key, const std::string& text) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
  for (const auto& p : split_list(text)) {
    const auto colon = p.find(':');
    if (colon == std::string::npos) throw ConfigError(key + ": expected M_t:M pairs, got '" + p + "'");
    out.emplace_back(parse_number<Eigen::Index>(key, p.substr(0, colon)),
                     parse_number<Eigen::Index>(key, p.substr(colon + 1)));
  }
  return out;
}

struct Key {
  std::string section;
  std::string name;
  std::string help;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

const std::vector<Key>& keys() {
  using C = ExperimentConfig;
  static const std::vector<Key> table = {
      {"experiment", "name", "NV1, NV2, NVQP, POP, POP-sweep or CSV",
       [](C& c, const std::string& v) { c.experiment = boost::trim_copy(v); }},
      {"experiment", "methods", "comma list of D-ANN, C-ANN, D-GP, D-BNN, C-BNN",
       [](C& c, const std::string& v) { c.methods = parse_methods(v); }},
      {"experiment", "seeds", "comma list of run seeds",
       [](C& c, const std::string& v) { c.seeds = parse_number_list<std::uint64_t>("seeds", v); }},
      {"experiment", "M", "inference sample count (default 64, 32 for POP-sweep)",
       [](C& c, const std::string& v) { c.M = parse_number<Eigen::Index>("M", v); }},
      {"experiment", "M_t", "training sample count (default 32 NV/POP, 16 NVQP)",
       [](C& c, const std::string& v) { c.M_t = parse_number<Eigen::Index>("M_t", v); }},
      {"experiment", "M_oracle", "true-distribution samples for FR (default 2048, 512 for NVQP)",
       [](C& c, const std::string& v) { c.M_oracle = parse_number<Eigen::Index>("M_oracle", v); }},
      {"experiment", "n_train", "training rows (default per experiment)",
       [](C& c, const std::string& v) { c.n_train = parse_number<Eigen::Index>("n_train", v); }},
      {"experiment", "n_val", "validation rows",
       [](C& c, const std::string& v) { c.n_val = parse_number<Eigen::Index>("n_val", v); }},
      {"experiment", "n_test", "test rows",
       [](C& c, const std::string& v) { c.n_test = parse_number<Eigen::Index>("n_test", v); }},
      {"experiment", "sampling_pairs", "sweep-sampling grid as M_t:M pairs",
       [](C& c, const std::string& v) { c.sampling_pairs = parse_pairs("sampling_pairs", v); }},
      {"experiment", "train_sizes", "sweep-trainsize grid of n_train values",
       [](C& c, const std::string& v) { c.train_sizes = parse_number_list<Eigen::Index>("train_sizes", v); }},
      {"experiment", "curve_points", "x grid size for quantile_curves.csv (NV only)",
       [](C& c, const std::string& v) { c.curve_points = parse_number<Eigen::Index>("curve_points", v); }},
      {"experiment", "csv_path", "data file for the CSV experiment",
       [](C& c, const std::string& v) { c.csv_path = boost::trim_copy(v); }},
      {"experiment", "csv_dx", "number of input columns in csv_path",
       [](C& c, const std::string& v) { c.csv_dx = parse_number<Eigen::Index>("csv_dx", v); }},
      {"experiment", "csv_shuffle", "shuffle rows before splitting (default false: chronological)",
       [](C& c, const std::string& v) { c.csv_shuffle = parse_bool("csv_shuffle", v); }},
      {"experiment", "out", "output directory", [](C& c, const std::string& v) { c.out_dir = boost::trim_copy(v); }},
      {"experiment", "save_checkpoints", "write model checkpoints under out/checkpoints",
       [](C& c, const std::string& v) { c.save_checkpoints = parse_bool("save_checkpoints", v); }},
      {"train", "epochs", "epochs for every trained model",
       [](C& c, const std::string& v) { c.epochs = parse_number<int>("epochs", v); }},
      {"train", "epochs_combined", "epochs for C-BNN and C-ANN (0: same as epochs)",
       [](C& c, const std::string& v) { c.epochs_combined = parse_number<int>("epochs_combined", v); }},
      {"train", "warm_start_epochs", "decoupled epochs run before C-BNN training",
       [](C& c, const std::string& v) { c.warm_start_epochs = parse_number<int>("warm_start_epochs", v); }},
      {"train", "batch_size", "minibatch size",
       [](C& c, const std::string& v) { c.batch_size = parse_number<Eigen::Index>("batch_size", v); }},
      {"train", "lr_det", "learning rate of D-ANN and C-ANN (default per experiment)",
       [](C& c, const std::string& v) { c.lr_det = parse_number<double>("lr_det", v); }},
      {"train", "lr_decoupled", "learning rate of D-BNN",
       [](C& c, const std::string& v) { c.lr_decoupled = parse_number<double>("lr_decoupled", v); }},
      {"train", "lr_combined", "learning rate of C-BNN",
       [](C& c, const std::string& v) { c.lr_combined = parse_number<double>("lr_combined", v); }},
      {"train", "K", "task weight of the combined loss (0: calibrate)",
       [](C& c, const std::string& v) { c.K = parse_number<double>("K", v); }},
      {"train", "K_ratio", "task / regularizer ratio used by K calibration",
       [](C& c, const std::string& v) { c.K_ratio = parse_number<double>("K_ratio", v); }},
      {"train", "hidden", "hidden widths, comma list (default 128,64,64 NV; 512,128,128 otherwise)",
       [](C& c, const std::string& v) { c.hidden = parse_number_list<Eigen::Index>("hidden", v); }},
      {"train", "activation", "relu or tanh", [](C& c, const std::string& v) { c.activation = boost::trim_copy(v); }},
      {"train", "sigma_p", "prior standard deviation",
       [](C& c, const std::string& v) { c.sigma_p = parse_number<double>("sigma_p", v); }},
      {"train", "closed_form_kl", "use the analytic KL instead of the sampled complexity cost",
       [](C& c, const std::string& v) { c.closed_form_kl = parse_bool("closed_form_kl", v); }},
      {"train", "val_limit", "validate on at most this many rows (0: all)",
       [](C& c, const std::string& v) { c.val_limit = parse_number<Eigen::Index>("val_limit", v); }},
      {"train", "gp_search_points", "rows used for the GP hyperparameter search",
       [](C& c, const std::string& v) { c.gp_search_points = parse_number<Eigen::Index>("gp_search_points", v); }},
      {"train", "gp_fit_points", "rows kept by the GP posterior",
       [](C& c, const std::string& v) { c.gp_fit_points = parse_number<Eigen::Index>("gp_fit_points", v); }},
      {"problem", "c_s", "newsvendor shortage cost",
       [](C& c, const std::string& v) { c.c_s = parse_number<double>("c_s", v); }},
      {"problem", "c_e", "newsvendor excess cost",
       [](C& c, const std::string& v) { c.c_e = parse_number<double>("c_e", v); }},
      {"problem", "pop_dim", "number of assets (default 15, 10 for POP-sweep)",
       [](C& c, const std::string& v) { c.pop_dim = parse_number<Eigen::Index>("pop_dim", v); }},
      {"problem", "pop_eps", "LP regularizer of the portfolio problem",
       [](C& c, const std::string& v) { c.pop_eps = parse_number<double>("pop_eps", v); }},
      {"problem", "nvqp_dim", "items of the quadratic newsvendor (must match the generator, 6)",
       [](C& c, const std::string& v) { c.nvqp_dim = parse_number<Eigen::Index>("nvqp_dim", v); }},
      {"problem", "seed", "seed of the problem coefficients",
       [](C& c, const std::string& v) { c.problem_seed = parse_number<std::uint64_t>("seed", v); }},
      {"problem", "noise_scale", "multiplier on the generator noise (0: noiseless)",
       [](C& c, const std::string& v) { c.noise_scale = parse_number<double>("noise_scale", v); }},
  };
  return table;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::d_ann: return "D-ANN";
    case Method::c_ann: return "C-ANN";
    case Method::d_gp: return "D-GP";
    case Method::d_bnn: return "D-BNN";
    case Method::c_bnn: return "C-BNN";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  const std::string n = boost::to_upper_copy(boost::trim_copy(name));
  for (Method m : {Method::d_ann, Method::c_ann, Method::d_gp, Method::d_bnn, Method::c_bnn})
    if (to_string(m) == n) return m;
  throw ConfigError("unknown method '" + name + "'; valid methods: " + join(kMethods));
}

std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  for (const auto& p : split_list(list)) {
    const Method m = parse_method(p);
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  }
  if (out.empty()) throw ConfigError("methods: empty list; valid methods: " + join(kMethods));
  return out;
}

bool is_bnn(Method m) { return m == Method::d_bnn || m == Method::c_bnn; }

void ExperimentConfig::validate() const {
  if (std::find(kExperiments.begin(), kExperiments.end(), experiment) == kExperiments.end())
    throw ConfigError("unknown experiment '" + experiment + "'; valid experiments: " + join(kExperiments));
  if (methods.empty()) throw ConfigError("methods: empty list; valid methods: " + join(kMethods));
  if (seeds.empty()) throw ConfigError("seeds: empty list");
  if (M < 0 || M_t < 0 || M_oracle < 0) throw ConfigError("M, M_t and M_oracle must be positive");
  if (n_train < 0 || n_val < 0 || n_test < 0) throw ConfigError("split sizes must be nonnegative");
  for (auto [mt, m] : sampling_pairs)
    if (mt < 1 || m < 1) throw ConfigError("sampling_pairs: values must be positive");
  for (auto n : train_sizes)
    if (n < 2) throw ConfigError("train_sizes: values must be at least 2");
  if (curve_points < 2) throw ConfigError("curve_points must be at least 2");
  if (experiment == "CSV" && (csv_path.empty() || csv_dx < 1))
    throw ConfigError("CSV experiment needs csv_path and csv_dx");
  if (epochs < 0 || epochs_combined < 0 || warm_start_epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (lr_det < 0 || !(lr_decoupled > 0) || !(lr_combined > 0)) throw ConfigError("learning rates must be positive");
  if (K < 0 || !(K_ratio > 0)) throw ConfigError("K must be nonnegative and K_ratio positive");
  for (auto w : hidden)
    if (w < 1) throw ConfigError("hidden: widths must be positive");
  if (activation != "relu" && activation != "tanh") throw ConfigError("activation must be relu or tanh");
  if (!(sigma_p > 0)) throw ConfigError("sigma_p must be positive");
  if (val_limit < 0) throw ConfigError("val_limit must be nonnegative");
  if (gp_search_points < 2 || gp_fit_points < 2) throw ConfigError("GP subset sizes must be at least 2");
  if (!(c_s > 0) || !(c_e > 0)) throw ConfigError("c_s and c_e must be positive");
  if (pop_dim < 0 || !(pop_eps > 0)) throw ConfigError("pop_dim must be nonnegative and pop_eps positive");
  if (nvqp_dim != 6) throw ConfigError("nvqp_dim must be 6 (the generator's output width)");
  if (!(noise_scale >= 0)) throw ConfigError("noise_scale must be nonnegative");
}

ExperimentConfig ExperimentConfig::resolved() const {
  validate();
  ExperimentConfig c = *this;
  const bool nv = experiment == "NV1" || experiment == "NV2";
  SplitSpec split = nv ? SplitSpec::nv_default(0) : experiment == "NVQP" ? SplitSpec::nvqp_default(0) : SplitSpec::pop_default(0);
  if (c.n_train == 0) c.n_train = split.n_train;
  if (c.n_val == 0) c.n_val = split.n_val;
  if (c.n_test == 0) c.n_test = split.n_test;
  if (c.M == 0) c.M = experiment == "POP-sweep" ? 32 : 64;
  if (c.M_t == 0) c.M_t = experiment == "NVQP" ? 16 : 32;
  if (c.M_oracle == 0) c.M_oracle = experiment == "NVQP" ? 512 : kDefaultOracleSamples;
  if (c.hidden.empty()) c.hidden = nv ? MLPArchitecture::small_widths() : MLPArchitecture::large_widths();
  if (c.lr_det == 0.0) c.lr_det = nv ? kLrDetNV : experiment == "NVQP" ? kLrDetNVQP : kLrDetPOP;
  if (c.epochs_combined == 0) c.epochs_combined = c.epochs;
  if (c.pop_dim == 0) c.pop_dim = experiment == "POP-sweep" ? 10 : 15;
  if (c.sampling_pairs.empty()) c.sampling_pairs = {{4, 8}, {8, 8}, {8, 16}, {16, 16}, {16, 32}, {16, 64}};
  if (c.train_sizes.empty()) c.train_sizes = {200, 500, 1000, 1500};
  return c;
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["experiment"] = experiment;
  std::vector<std::string> ms;
  for (Method m : methods) ms.push_back(to_string(m));
  j["methods"] = ms;
  j["seeds"] = seeds;
  j["M"] = M;
  j["M_t"] = M_t;
  j["M_oracle"] = M_oracle;
  j["n_train"] = n_train;
  j["n_val"] = n_val;
  j["n_test"] = n_test;
  j["sampling_pairs"] = sampling_pairs;
  j["train_sizes"] = train_sizes;
  j["curve_points"] = curve_points;
  j["csv_path"] = csv_path;
  j["csv_dx"] = csv_dx;
  j["csv_shuffle"] = csv_shuffle;
  j["out"] = out_dir;
  j["save_checkpoints"] = save_checkpoints;
  j["epochs"] = epochs;
  j["epochs_combined"] = epochs_combined;
  j["warm_start_epochs"] = warm_start_epochs;
  j["batch_size"] = batch_size;
  j["lr_det"] = lr_det;
  j["lr_decoupled"] = lr_decoupled;
  j["lr_combined"] = lr_combined;
  j["K"] = K;
  j["K_ratio"] = K_ratio;
  j["hidden"] = hidden;
  j["activation"] = activation;
  j["sigma_p"] = sigma_p;
  j["closed_form_kl"] = closed_form_kl;
  j["val_limit"] = val_limit;
  j["gp_search_points"] = gp_search_points;
  j["gp_fit_points"] = gp_fit_points;
  j["c_s"] = c_s;
  j["c_e"] = c_e;
  j["pop_dim"] = pop_dim;
  j["pop_eps"] = pop_eps;
  j["nvqp_dim"] = nvqp_dim;
  j["problem_seed"] = problem_seed;
  j["noise_scale"] = noise_scale;
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config json: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c.experiment = j.at("experiment").get<std::string>();
    c.methods.clear();
    for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.M = j.at("M");
    c.M_t = j.at("M_t");
    c.M_oracle = j.at("M_oracle");
    c.n_train = j.at("n_train");
    c.n_val = j.at("n_val");
    c.n_test = j.at("n_test");
    c.sampling_pairs = j.at("sampling_pairs").get<std::vector<std::pair<Eigen::Index, Eigen::Index>>>();
    c.train_sizes = j.at("train_sizes").get<std::vector<Eigen::Index>>();
    c.curve_points = j.at("curve_points");
    c.csv_path = j.at("csv_path");
    c.csv_dx = j.at("csv_dx");
    c.csv_shuffle = j.at("csv_shuffle");
    c.out_dir = j.at("out");
    c.save_checkpoints = j.at("save_checkpoints");
    c.epochs = j.at("epochs");
    c.epochs_combined = j.at("epochs_combined");
    c.warm_start_epochs = j.at("warm_start_epochs");
    c.batch_size = j.at("batch_size");
    c.lr_det = j.at("lr_det");
    c.lr_decoupled = j.at("lr_decoupled");
    c.lr_combined = j.at("lr_combined");
    c.K = j.at("K");
    c.K_ratio = j.at("K_ratio");
    c.hidden = j.at("hidden").get<std::vector<Eigen::Index>>();
    c.activation = j.at("activation");
    c.sigma_p = j.at("sigma_p");
    c.closed_form_kl = j.at("closed_form_kl");
    c.val_limit = j.at("val_limit");
    c.gp_search_points = j.at("gp_search_points");
    c.gp_fit_points = j.at("gp_fit_points");
    c.c_s = j.at("c_s");
    c.c_e = j.at("c_e");
    c.pop_dim = j.at("pop_dim");
    c.pop_eps = j.at("pop_eps");
    c.nvqp_dim = j.at("nvqp_dim");
    c.problem_seed = j.at("problem_seed");
    c.noise_scale = j.at("noise_scale");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config json: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const {
  ExperimentConfig c = resolved();
  c.out_dir.clear();
  c.save_checkpoints = true;
  const std::string s = c.to_json();
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  boost::property_tree::ptree tree;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (section != "experiment" && section != "train" && section != "problem")
      throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [name, value] : body) {
      const auto& table = keys();
      const auto it = std::find_if(table.begin(), table.end(),
                                   [&](const Key& k) { return k.section == section && k.name == name; });
      if (it == table.end()) throw ConfigError("config: unknown key '" + name + "' in [" + section + "]");
      it->set(base, value.get_value<std::string>());
    }
  }
  base.validate();
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::vector<std::pair<std::string, std::string>> config_keys() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : keys()) out.emplace_back("[" + k.section + "] " + k.name, k.help);
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t salt) {
  return splitmix(splitmix(seed ^ (static_cast<std::uint64_t>(stream) << 56)) + salt);
}

}  // namespace dfl
