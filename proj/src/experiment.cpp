#include "dfl/experiment.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/version.hpp>

#include "json.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>
#include <sstream>

namespace dfl {

namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Activation activation_of(const ExperimentConfig& c) {
  return c.activation == "tanh" ? Activation::tanh : Activation::relu;
}

Eigen::Index csv_output_columns(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CsvError("cannot open " + path);
  std::string header;
  std::getline(in, header);
  std::vector<std::string> cells;
  boost::split(cells, header, boost::is_any_of(","));
  Eigen::Index n = 0;
  for (auto& c : cells)
    if (!boost::trim_copy(c).empty() && boost::trim_copy(c)[0] == 'y') ++n;
  return n;
}

std::map<std::string, std::string> versions() {
  return {{"dfl", "0.1.0"},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"boost", BOOST_LIB_VERSION},
          {"compiler", __VERSION__}};
}

TrainConfig base_train_config(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.epochs;
  t.batch_size = c.batch_size;
  t.seed = seed;
  t.val_limit = c.val_limit;
  t.closed_form_kl = c.closed_form_kl;
  t.K = c.K;
  t.K_ratio = c.K_ratio;
  return t;
}

void write_atomic(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << content;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

bool is_nv(const std::string& e) { return e == "NV1" || e == "NV2"; }

std::string checkpoint_name(Method m, std::uint64_t seed, const GridPoint& p, bool grid) {
  std::string name = to_string(m) + "_seed" + std::to_string(seed);
  if (grid) name += "_mt" + std::to_string(p.M_t) + "_n" + std::to_string(p.n_train);
  return name + ".ckpt";
}

std::vector<CurveRow> quantile_curves(const ExperimentConfig& c, Method m, const Predictor& p, const NoiseModel& noise,
                                      double q, std::uint64_t seed) {
  // Inputs live on [0, 2]; the curve is sampled densely enough that the
  // predictive quantile estimate is not dominated by Monte-Carlo noise.
  const Eigen::Index n = c.curve_points;
  Matrix X(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) X(i, 0) = 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
  const Matrix mean = p.predict_mean(X);
  Vector quant;
  if (p.kind == PredictorKind::ann) {
    quant = mean.col(0);
  } else {
    Rng rng(derive_seed(seed, Stream::sample, 99));
    quant = p.predict_quantile(X, q, std::max<Eigen::Index>(c.M, 2048), rng);
  }
  std::vector<CurveRow> out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector x = X.row(i).transpose();
    CurveRow r;
    r.method = to_string(m);
    r.seed = seed;
    r.x = x[0];
    r.true_mean = noise.location(x)[0];
    r.true_quantile = noise.quantile(x, q).value_or(std::numeric_limits<double>::quiet_NaN());
    r.pred_mean = mean(i, 0);
    r.pred_quantile = quant[i];
    out.push_back(r);
  }
  return out;
}

RunRecord run_grid(const ExperimentConfig& in, const std::string& kind, const std::vector<GridPoint>& points) {
  RunRecord rec;
  rec.kind = kind;
  rec.config = in.resolved();
  rec.versions = versions();
  const ExperimentConfig& c = rec.config;
  const bool grid = kind != "run";

  for (const auto& p : points)
    for (Method m : c.methods) {
      SweepRow row;
      row.point = p;
      row.report.experiment = c.experiment;
      row.report.method = to_string(m);
      rec.rows.push_back(row);
    }
  auto row_of = [&](Method m, const GridPoint& p) -> RegretReport& {
    for (auto& r : rec.rows)
      if (r.report.method == to_string(m) && r.point.M_t == p.M_t && r.point.M == p.M && r.point.n_train == p.n_train)
        return r.report;
    throw ContractError("run_grid: missing row");
  };

  Eigen::Index n_max = 0;
  for (const auto& p : points) n_max = std::max(n_max, p.n_train);
  const std::filesystem::path ckpt_dir = std::filesystem::path(c.out_dir) / "checkpoints";
  if (c.save_checkpoints) std::filesystem::create_directories(ckpt_dir);

  for (std::uint64_t seed : c.seeds) {
    ExperimentData full = prepare_data(c, seed, n_max);
    const NoiseModel* noise = full.synthetic ? full.data.noise.get() : nullptr;
    const OracleCosts oracle =
        oracle_costs(full.problem, full.data.test, noise, c.M_oracle, derive_seed(seed, Stream::oracle));
    for (Method m : c.methods) {
      std::map<std::pair<Eigen::Index, Eigen::Index>, Predictor> trained;
      for (const auto& p : points) {
        const auto key = std::make_pair(p.n_train, m == Method::c_bnn ? p.M_t : Eigen::Index{0});
        Timing t{to_string(m), seed, p, 0.0, 0.0};
        try {
          if (!trained.count(key)) {
            ExperimentData d = full;
            if (p.n_train < d.data.train.size()) d.data.train = d.data.train.head(p.n_train);
            const auto t0 = Clock::now();
            trained[key] = train_method(c, m, d, seed, p.M_t);
            t.train_seconds = seconds_since(t0);
            if (c.save_checkpoints) save_checkpoint(ckpt_dir / checkpoint_name(m, seed, p, grid), trained[key]);
            if (!grid && is_nv(c.experiment) && seed == c.seeds.front() && noise) {
              const auto curves =
                  quantile_curves(c, m, trained[key], *noise, std::get<NVSpec>(full.problem).quantile(), seed);
              rec.curves.insert(rec.curves.end(), curves.begin(), curves.end());
            }
          }
          const auto t0 = Clock::now();
          EvalOptions eo;
          eo.M = p.M;
          eo.seed = derive_seed(seed, Stream::sample);
          const Evaluation ev = evaluate(sample_source(trained[key]), full.data.test, full.problem, oracle, eo);
          t.eval_seconds = seconds_since(t0);
          RegretReport& r = row_of(m, p);
          r.seeds.push_back(seed);
          r.R.push_back(ev.R);
          if (ev.FR) r.FR.push_back(*ev.FR);
        } catch (const std::exception& e) {
          rec.errors.push_back(to_string(m) + " seed " + std::to_string(seed) + " (M_t=" + std::to_string(p.M_t) +
                               ", M=" + std::to_string(p.M) + ", n_train=" + std::to_string(p.n_train) +
                               "): " + e.what());
        }
        rec.timings.push_back(t);
      }
    }
  }
  for (auto& r : rec.rows) r.report.aggregate();
  return rec;
}

json report_json(const SweepRow& r) {
  json j;
  j["M_t"] = r.point.M_t;
  j["M"] = r.point.M;
  j["n_train"] = r.point.n_train;
  j["experiment"] = r.report.experiment;
  j["method"] = r.report.method;
  j["seeds"] = r.report.seeds;
  j["R"] = r.report.R;
  j["FR"] = r.report.FR;
  j["R_mean"] = r.report.R_summary.mean;
  j["R_std"] = r.report.R_summary.std;
  if (r.report.FR_summary) {
    j["FR_mean"] = r.report.FR_summary->mean;
    j["FR_std"] = r.report.FR_summary->std;
  }
  return j;
}

std::string seed_header(const std::vector<std::uint64_t>& seeds) {
  std::string h;
  for (auto s : seeds) h += ",seed_" + std::to_string(s);
  return h;
}

std::string seed_cells(const std::vector<std::uint64_t>& all, const RegretReport& r, const std::vector<double>& v) {
  std::string out;
  for (auto s : all) {
    out += ',';
    for (std::size_t i = 0; i < r.seeds.size(); ++i)
      if (r.seeds[i] == s) out += fmt(v[i]);
  }
  return out;
}

}  // namespace

ExperimentData prepare_data(const ExperimentConfig& cfg, std::uint64_t seed, std::optional<Eigen::Index> n_train) {
  const ExperimentConfig c = cfg.resolved();
  ExperimentData d;
  const std::uint64_t data_seed = derive_seed(seed, Stream::data);
  if (c.experiment == "CSV") {
    const Eigen::Index dy = csv_output_columns(c.csv_path);
    if (dy < 1) throw ConfigError("CSV experiment: " + c.csv_path + " has no y columns");
    const Dataset all = load_csv(c.csv_path, c.csv_dx, dy);
    const Eigen::Index nt = n_train.value_or(c.n_train), nv = c.n_val;
    if (nt + nv >= all.size())
      throw ConfigError("CSV experiment: n_train + n_val must leave test rows (file has " + std::to_string(all.size()) +
                        ")");
    d.data = split_dataset(all, nt, nv, c.csv_shuffle, data_seed);
    d.problem = POPSpec::from_returns(d.data.train.Y, c.problem_seed, 1000, c.pop_eps);
    d.synthetic = false;
    return d;
  }
  const SplitSpec split{n_train.value_or(c.n_train), c.n_val, c.n_test, data_seed};
  GeneratorOptions go;
  go.noise_scale = c.noise_scale;
  if (c.experiment == "NV1" || c.experiment == "NV2") {
    d.data = c.experiment == "NV1" ? gen_nv1(split, go) : gen_nv2(split, go);
    d.problem = NVSpec{c.c_s, c.c_e};
  } else if (c.experiment == "NVQP") {
    d.data = gen_nvqp(split, go);
    NVQPSpec spec = NVQPSpec::generate(c.nvqp_dim, c.problem_seed);
    spec.calibrate_budget(d.data.train.Y);
    d.problem = spec;
  } else {
    d.data = gen_pop(split, c.pop_dim, go);
    d.problem = POPSpec::from_returns(d.data.train.Y, c.problem_seed, 1000, c.pop_eps);
  }
  return d;
}

Predictor train_method(const ExperimentConfig& cfg, Method m, const ExperimentData& d, std::uint64_t seed,
                       Eigen::Index M_t, TrainedModel* details) {
  const ExperimentConfig c = cfg.resolved();
  const Dataset& tr = d.data.train;
  const Eigen::Index dx = tr.X.cols(), dy = tr.Y.cols();
  const Activation act = activation_of(c);
  const std::uint64_t init = derive_seed(seed, Stream::init, static_cast<std::uint64_t>(m));
  const Prior prior{c.sigma_p};
  TrainConfig tc = base_train_config(c, init);
  TrainedModel tm;
  switch (m) {
    case Method::d_ann:
      tc.learning_rate = c.lr_det;
      tm = train_deterministic(ann_architecture(dx, dy, c.hidden, act), tr, d.data.val, tc,
                               DeterministicMode::decoupled_mse);
      break;
    case Method::c_ann:
      tc.learning_rate = c.lr_det;
      tc.epochs = c.epochs_combined;
      tm = train_deterministic(ann_architecture(dx, dy, c.hidden, act), tr, d.data.val, tc,
                               DeterministicMode::combined_task, &d.problem);
      break;
    case Method::d_gp: {
      GPFitOptions go;
      go.search_points = c.gp_search_points;
      go.fit_points = c.gp_fit_points;
      go.seed = init;
      tm.predictor = gp_fit(tr.X, tr.Y, go);
      break;
    }
    case Method::d_bnn:
      tc.learning_rate = c.lr_decoupled;
      tm = train_decoupled(bnn_architecture(dx, dy, c.hidden, act), prior, tr, d.data.val, tc);
      break;
    case Method::c_bnn: {
      const MLPArchitecture arch = bnn_architecture(dx, dy, c.hidden, act);
      std::optional<Predictor> warm;
      if (c.warm_start_epochs > 0) {
        TrainConfig wc = tc;
        wc.learning_rate = c.lr_decoupled;
        wc.epochs = c.warm_start_epochs;
        warm = train_decoupled(arch, prior, tr, d.data.val, wc).predictor;
      }
      tc.learning_rate = c.lr_combined;
      tc.epochs = c.epochs_combined;
      tc.M_t = M_t;
      tm = train_combined(arch, prior, d.problem, tr, d.data.val, tc, warm ? &*warm : nullptr);
      break;
    }
  }
  Predictor p = tm.predictor;
  if (details) *details = std::move(tm);
  return p;
}

RunRecord run_experiment(const ExperimentConfig& cfg) {
  const ExperimentConfig c = cfg.resolved();
  return run_grid(c, "run", {{c.M_t, c.M, c.n_train}});
}

RunRecord sweep_sampling(const ExperimentConfig& cfg) {
  const ExperimentConfig c = cfg.resolved();
  std::vector<GridPoint> pts;
  for (auto [mt, m] : c.sampling_pairs) pts.push_back({mt, m, c.n_train});
  return run_grid(c, "sweep-sampling", pts);
}

RunRecord sweep_trainsize(const ExperimentConfig& cfg) {
  const ExperimentConfig c = cfg.resolved();
  std::vector<GridPoint> pts;
  for (auto n : c.train_sizes) pts.push_back({c.M_t, c.M, n});
  return run_grid(c, "sweep-trainsize", pts);
}

const RegretReport* RunRecord::find(const std::string& method, const GridPoint& p) const {
  for (const auto& r : rows)
    if (r.report.method == method && r.point.M_t == p.M_t && r.point.M == p.M && r.point.n_train == p.n_train)
      return &r.report;
  return nullptr;
}

std::string RunRecord::to_json() const {
  json j;
  j["kind"] = kind;
  j["config"] = json::parse(config.to_json());
  j["config_hash"] = config.hash();
  j["reports"] = json::array();
  for (const auto& r : rows) j["reports"].push_back(report_json(r));
  j["timings"] = json::array();
  for (const auto& t : timings)
    j["timings"].push_back({{"method", t.method},
                            {"seed", t.seed},
                            {"M_t", t.point.M_t},
                            {"M", t.point.M},
                            {"n_train", t.point.n_train},
                            {"train_seconds", t.train_seconds},
                            {"eval_seconds", t.eval_seconds}});
  j["curves"] = json::array();
  for (const auto& c : curves)
    j["curves"].push_back({{"method", c.method},
                           {"seed", c.seed},
                           {"x", c.x},
                           {"true_mean", c.true_mean},
                           {"true_quantile", c.true_quantile},
                           {"pred_mean", c.pred_mean},
                           {"pred_quantile", c.pred_quantile}});
  j["errors"] = errors;
  j["versions"] = versions;
  std::vector<json> streams;
  for (auto s : config.seeds)
    streams.push_back({{"seed", s},
                       {"data", derive_seed(s, Stream::data)},
                       {"oracle", derive_seed(s, Stream::oracle)},
                       {"sample", derive_seed(s, Stream::sample)}});
  j["rng_streams"] = streams;
  return j.dump(2);
}

RunRecord RunRecord::from_json(const std::string& text) {
  RunRecord r;
  try {
    const json j = json::parse(text);
    r.kind = j.at("kind");
    r.config = ExperimentConfig::from_json(j.at("config").dump());
    for (const auto& x : j.at("reports")) {
      SweepRow row;
      row.point = {x.at("M_t"), x.at("M"), x.at("n_train")};
      row.report.experiment = x.at("experiment");
      row.report.method = x.at("method");
      row.report.seeds = x.at("seeds").get<std::vector<std::uint64_t>>();
      row.report.R = x.at("R").get<std::vector<double>>();
      row.report.FR = x.at("FR").get<std::vector<double>>();
      row.report.aggregate();
      r.rows.push_back(row);
    }
    for (const auto& x : j.at("timings"))
      r.timings.push_back({x.at("method"), x.at("seed"), {x.at("M_t"), x.at("M"), x.at("n_train")},
                           x.at("train_seconds"), x.at("eval_seconds")});
    for (const auto& x : j.at("curves")) {
      CurveRow c;
      c.method = x.at("method");
      c.seed = x.at("seed");
      c.x = x.at("x");
      c.true_mean = x.at("true_mean");
      c.true_quantile = x.at("true_quantile").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                         : x.at("true_quantile").get<double>();
      c.pred_mean = x.at("pred_mean");
      c.pred_quantile = x.at("pred_quantile");
      r.curves.push_back(c);
    }
    r.errors = j.at("errors").get<std::vector<std::string>>();
    r.versions = j.at("versions").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run record: ") + e.what());
  }
  return r;
}

void write_outputs(const RunRecord& rec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string hash = rec.config.hash();
  const auto& seeds = rec.config.seeds;
  if (rec.kind == "run") {
    std::string s = "config_hash,experiment,method,metric,mean,std,n_seeds" + seed_header(seeds) + "\n";
    for (const auto& row : rec.rows) {
      const RegretReport& r = row.report;
      s += hash + ',' + r.experiment + ',' + r.method + ",R," + fmt(r.R_summary.mean) + ',' + fmt(r.R_summary.std) +
           ',' + std::to_string(r.R.size()) + seed_cells(seeds, r, r.R) + '\n';
      if (r.FR_summary)
        s += hash + ',' + r.experiment + ',' + r.method + ",FR," + fmt(r.FR_summary->mean) + ',' +
             fmt(r.FR_summary->std) + ',' + std::to_string(r.FR.size()) + seed_cells(seeds, r, r.FR) + '\n';
    }
    write_atomic(dir / "results.csv", s);
  }
  {
    std::string s = "config_hash,experiment,method,M_t,M,n_train,metric,mean,std,n_seeds" + seed_header(seeds) + "\n";
    for (const auto& row : rec.rows) {
      const RegretReport& r = row.report;
      const std::string lead = hash + ',' + r.experiment + ',' + r.method + ',' + std::to_string(row.point.M_t) + ',' +
                               std::to_string(row.point.M) + ',' + std::to_string(row.point.n_train);
      if (r.FR_summary)
        s += lead + ",FR," + fmt(r.FR_summary->mean) + ',' + fmt(r.FR_summary->std) + ',' +
             std::to_string(r.FR.size()) + seed_cells(seeds, r, r.FR) + '\n';
      s += lead + ",R," + fmt(r.R_summary.mean) + ',' + fmt(r.R_summary.std) + ',' + std::to_string(r.R.size()) +
           seed_cells(seeds, r, r.R) + '\n';
    }
    write_atomic(dir / "sweep.csv", s);
  }
  if (!rec.curves.empty()) {
    std::string s = "config_hash,method,seed,x,true_mean,true_quantile,pred_mean,pred_quantile\n";
    for (const auto& c : rec.curves)
      s += hash + ',' + c.method + ',' + std::to_string(c.seed) + ',' + fmt(c.x) + ',' + fmt(c.true_mean) + ',' +
           fmt(c.true_quantile) + ',' + fmt(c.pred_mean) + ',' + fmt(c.pred_quantile) + '\n';
    write_atomic(dir / "quantile_curves.csv", s);
  }
  write_atomic(dir / "runrecord.json", rec.to_json());
}

RunRecord load_run_record(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return RunRecord::from_json(ss.str());
}

}  // namespace dfl
