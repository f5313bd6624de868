#include "doctest.h"

#include "dfl/experiment.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

using namespace dfl;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

SampleSource constant_source(const Matrix& rows) {
  return [rows](const Matrix& X, Eigen::Index M, Rng&) {
    REQUIRE(X.rows() == rows.rows());
    return std::vector<Matrix>(static_cast<std::size_t>(M), rows);
  };
}

SampleSource true_conditional_source(const NoiseModel& nm) {
  return [&nm](const Matrix& X, Eigen::Index M, Rng& rng) {
    std::vector<Matrix> out(static_cast<std::size_t>(M), Matrix(X.rows(), nm.output_dim));
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const Matrix s = nm.sample(X.row(i).transpose(), M, rng);
      for (Eigen::Index j = 0; j < M; ++j) out[static_cast<std::size_t>(j)].row(i) = s.row(j);
    }
    return out;
  };
}

std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("dfl_test_eval_" + name);
  std::filesystem::remove_all(p);
  return p;
}

ExperimentConfig tiny_nv1(const std::filesystem::path& out) {
  ExperimentConfig c;
  c.experiment = "NV1";
  c.methods = {Method::d_ann};
  c.seeds = {0};
  c.n_train = 100;
  c.n_val = 50;
  c.n_test = 80;
  c.epochs = 5;
  c.hidden = {16, 16};
  c.out_dir = out.string();
  return c;
}

}  // namespace

TEST_CASE("regret: hand-built NV1 instances") {
  Dataset test;
  test.X = Matrix::Zero(3, 1);
  test.Y = (Matrix(3, 1) << 10, 20, 5).finished();
  const Problem nv = NVSpec{};
  const OracleCosts oc = oracle_costs(nv, test, nullptr, 1, 0);
  CHECK(oc.point.cwiseAbs().maxCoeff() == 0.0);
  EvalOptions eo;
  eo.M = 1;
  const Evaluation ev = evaluate(constant_source((Matrix(3, 1) << 12, 15, 5).finished()), test, nv, oc, eo);
  // 900 * 2 excess, 100 * 5 shortage, exact.
  CHECK(ev.R == doctest::Approx((1800.0 + 500.0) / 3.0).epsilon(1e-15));
  CHECK_FALSE(ev.FR.has_value());
  CHECK(ev.used == 3);
}

TEST_CASE("regret: oracle predictors give zero") {
  // Noiseless NV1: the location is the label, so R = 0 and FR = R exactly.
  const GeneratedData nv = gen_nv1({50, 10, 60, 3}, {0.0, 1.0});
  const Problem p = NVSpec{};
  const OracleCosts oc = oracle_costs(p, nv.test, nv.noise.get(), 256, 1);
  EvalOptions eo;
  eo.M = 8;
  const Evaluation ev = evaluate(true_conditional_source(*nv.noise), nv.test, p, oc, eo);
  CHECK(ev.R == 0.0);
  CHECK(*ev.FR == ev.R);

  // Labels as a single sample on NVQP.
  const GeneratedData q = gen_nvqp({100, 10, 20, 4});
  NVQPSpec spec = NVQPSpec::generate(6, 7);
  spec.calibrate_budget(q.train.Y);
  const OracleCosts qc = oracle_costs(spec, q.test, nullptr, 1, 0);
  eo.M = 1;
  CHECK(std::abs(evaluate(constant_source(q.test.Y), q.test, spec, qc, eo).R) <= 1e-9);
}

TEST_CASE("FR <= R per instance and FR vanishes for the true conditional law") {
  const GeneratedData nv = gen_nv1({50, 10, 200, 5});
  const Problem p = NVSpec{};
  const OracleCosts oc = oracle_costs(p, nv.test, nv.noise.get(), 2048, 2);
  EvalOptions eo;
  eo.M = 2048;
  const Evaluation ev = evaluate(true_conditional_source(*nv.noise), nv.test, p, oc, eo);
  for (std::size_t i = 0; i < ev.regret.size(); ++i) CHECK(ev.free_regret[i] <= ev.regret[i]);
  const double scale = oc.dist->mean();
  MESSAGE("NV1 FR with true samples: " << *ev.FR << " against cost scale " << scale);
  CHECK(std::abs(*ev.FR) <= 0.05 * scale);

  const GeneratedData pop = gen_pop({300, 10, 40, 6}, 5);
  const Problem pp = POPSpec::from_returns(pop.train.Y);
  const OracleCosts pc = oracle_costs(pp, pop.test, pop.noise.get(), 2048, 3);
  const Evaluation pe = evaluate(true_conditional_source(*pop.noise), pop.test, pp, pc, eo);
  for (std::size_t i = 0; i < pe.regret.size(); ++i) CHECK(pe.free_regret[i] <= pe.regret[i] + 1e-9);
  const double pscale = pc.dist->cwiseAbs().mean();
  MESSAGE("POP FR with true samples: " << *pe.FR << " against cost scale " << pscale);
  CHECK(std::abs(*pe.FR) <= 0.05 * pscale);
  // A biased model.
  eo.M = 4;
  const Evaluation biased = evaluate(constant_source(pop.test.Y.array() + 0.01), pop.test, pp, pc, eo);
  for (std::size_t i = 0; i < biased.regret.size(); ++i) CHECK(biased.free_regret[i] <= biased.regret[i] + 1e-9);
}

TEST_CASE("evaluation exclusions") {
  Dataset test;
  test.X = Matrix::Zero(20, 1);
  test.Y = Matrix::Constant(20, 1, 3.0);
  const Problem nv = NVSpec{};
  OracleCosts oc = oracle_costs(nv, test, nullptr, 1, 0);
  oc.ok[0] = 0;
  EvalOptions eo;
  eo.M = 1;
  CHECK(evaluate(constant_source(test.Y), test, nv, oc, eo).excluded == 1);
  oc.ok[1] = 0;
  CHECK_THROWS_AS(evaluate(constant_source(test.Y), test, nv, oc, eo), EvalError);
}

TEST_CASE("aggregation") {
  const Summary s = summarize({1, 2, 3, 4});
  CHECK(s.mean == 2.5);
  CHECK(s.std == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
  CHECK(summarize({7}).std == 0.0);
  RegretReport r;
  r.seeds = {0, 1, 2};
  r.R = {3.0, 5.0, 4.0};
  r.FR = {1.0, 2.0, 1.5};
  r.aggregate();
  CHECK(r.FR_summary->mean <= r.R_summary.mean);
  r.FR = {1.0};
  CHECK_THROWS_AS(r.aggregate(), ContractError);
}

TEST_CASE("config parsing, precedence, snapshot and hash") {
  const std::string ini =
      "[experiment]\nname = NVQP\nmethods = D-BNN, C-BNN\nseeds = 3,4\nM = 32\nsampling_pairs = 4:8, 16:64\n"
      "[train]\nepochs = 7\nhidden = 8,4\n[problem]\nnoise_scale = 0.5\n";
  const ExperimentConfig c = parse_config(ini);
  CHECK(c.experiment == "NVQP");
  CHECK(c.methods == std::vector<Method>{Method::d_bnn, Method::c_bnn});
  CHECK(c.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(c.sampling_pairs.size() == 2);
  CHECK(c.sampling_pairs[1] == std::pair<Eigen::Index, Eigen::Index>{16, 64});
  CHECK(c.hidden == std::vector<Eigen::Index>{8, 4});
  CHECK(c.noise_scale == 0.5);
  // A later layer overrides.
  const ExperimentConfig o = parse_config("[experiment]\nM = 8\n", c);
  CHECK(o.M == 8);
  CHECK(o.epochs == 7);

  const ExperimentConfig r = c.resolved();
  CHECK(r.M_t == 16);
  CHECK(r.M_oracle == 512);
  CHECK(r.lr_det == kLrDetNVQP);
  CHECK(r.n_train == 4000);
  CHECK(ExperimentConfig::from_json(r.to_json()).to_json() == r.to_json());
  CHECK(c.hash() == ExperimentConfig::from_json(c.to_json()).hash());
  ExperimentConfig moved = c;
  moved.out_dir = "elsewhere";
  CHECK(moved.hash() == c.hash());
  moved.M = 33;
  CHECK(moved.hash() != c.hash());

  CHECK_THROWS_AS(parse_config("[experiment]\nbogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[other]\nM = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[experiment]\nmethods = D-ANN, X-NN\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[experiment]\nname = NV7\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nepochs = many\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[experiment]\nname = CSV\n"), ConfigError);
  try {
    parse_method("E-BNN");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("D-ANN, C-ANN, D-GP, D-BNN, C-BNN") != std::string::npos);
  }
}

TEST_CASE("derived seeds are distinct per stream") {
  CHECK(derive_seed(0, Stream::data) != derive_seed(0, Stream::init));
  CHECK(derive_seed(0, Stream::data) != derive_seed(1, Stream::data));
  CHECK(derive_seed(3, Stream::sample) == derive_seed(3, Stream::sample));
}

TEST_CASE("tiny NV1 run: CSV, determinism, record round trip") {
  const auto dir = scratch("run");
  const ExperimentConfig c = tiny_nv1(dir);
  const RunRecord a = run_experiment(c);
  REQUIRE(a.errors.empty());
  write_outputs(a, dir);
  const std::string csv = slurp(dir / "results.csv");
  std::istringstream lines(csv);
  std::string header, r_line, fr_line, extra;
  std::getline(lines, header);
  std::getline(lines, r_line);
  std::getline(lines, fr_line);
  CHECK(header == "config_hash,experiment,method,metric,mean,std,n_seeds,seed_0");
  CHECK(r_line.rfind(c.hash() + ",NV1,D-ANN,R,", 0) == 0);
  CHECK(fr_line.rfind(c.hash() + ",NV1,D-ANN,FR,", 0) == 0);
  CHECK_FALSE(std::getline(lines, extra));
  CHECK(std::filesystem::exists(dir / "quantile_curves.csv"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "D-ANN_seed0.ckpt"));

  const RegretReport* ra = a.find("D-ANN", {32, 64, 100});
  REQUIRE(ra);
  CHECK(ra->FR_summary->mean <= ra->R_summary.mean);

  const RunRecord b = run_experiment(c);
  CHECK(b.find("D-ANN", {32, 64, 100})->R == ra->R);
  CHECK(b.find("D-ANN", {32, 64, 100})->FR == ra->FR);

  const RunRecord loaded = load_run_record(dir / "runrecord.json");
  CHECK(loaded.to_json() == a.to_json());
  CHECK(loaded.config.hash() == c.hash());
  const RunRecord again = run_experiment(loaded.config);
  CHECK(again.find("D-ANN", {32, 64, 100})->R == ra->R);
  CHECK(std::abs(loaded.rows[0].report.R_summary.mean - ra->R_summary.mean) <= 1e-12);

  // The saved checkpoint evaluates to the recorded regret.
  const Predictor p = load_checkpoint(dir / "checkpoints" / "D-ANN_seed0.ckpt");
  const ExperimentData d = prepare_data(c, 0);
  const OracleCosts oc = oracle_costs(d.problem, d.data.test, d.data.noise.get(), c.resolved().M_oracle,
                                      derive_seed(0, Stream::oracle));
  EvalOptions eo;
  eo.M = 64;
  eo.seed = derive_seed(0, Stream::sample);
  CHECK(evaluate(sample_source(p), d.data.test, d.problem, oc, eo).R == ra->R[0]);
}

TEST_CASE("single-point sweeps degenerate to run_experiment") {
  ExperimentConfig c = tiny_nv1(scratch("sweep"));
  c.methods = {Method::d_bnn, Method::d_gp};
  c.epochs = 2;
  c.gp_search_points = 60;
  const RunRecord run = run_experiment(c);
  REQUIRE(run.errors.empty());
  const ExperimentConfig r = c.resolved();
  ExperimentConfig s = c;
  s.sampling_pairs = {{r.M_t, r.M}};
  const RunRecord sw = sweep_sampling(s);
  ExperimentConfig t = c;
  t.train_sizes = {r.n_train};
  const RunRecord st = sweep_trainsize(t);
  for (const char* m : {"D-BNN", "D-GP"}) {
    const GridPoint gp{r.M_t, r.M, r.n_train};
    CHECK(sw.find(m, gp)->FR == run.find(m, gp)->FR);
    CHECK(st.find(m, gp)->FR == run.find(m, gp)->FR);
  }
}

TEST_CASE("train-size sweep rows") {
  ExperimentConfig c = tiny_nv1(scratch("sizes"));
  c.train_sizes = {40, 100};
  c.epochs = 1;
  const RunRecord rec = sweep_trainsize(c);
  REQUIRE(rec.errors.empty());
  REQUIRE(rec.rows.size() == 2);
  CHECK(rec.rows[0].point.n_train == 40);
  CHECK(rec.rows[1].point.n_train == 100);
  for (const auto& row : rec.rows) CHECK(row.report.FR.size() == 1);
  write_outputs(rec, c.out_dir);
  CHECK_FALSE(std::filesystem::exists(std::filesystem::path(c.out_dir) / "results.csv"));
  CHECK(std::filesystem::exists(std::filesystem::path(c.out_dir) / "sweep.csv"));
}
