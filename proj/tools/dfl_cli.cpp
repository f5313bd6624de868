#include "dfl/experiment.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>

using namespace dfl;

namespace {

enum Exit { kOk = 0, kInvalid = 1, kRuntime = 2 };

struct Flags {
  std::string config;
  std::string experiment;
  std::string methods;
  std::string seeds;
  std::string out;
  Eigen::Index m = 0;
  Eigen::Index mt = 0;
  int epochs = -1;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "INI config with [experiment], [train], [problem] sections");
  cmd->add_option("--experiment", f.experiment, "NV1, NV2, NVQP, POP, POP-sweep or CSV");
  cmd->add_option("--methods", f.methods, "comma list of D-ANN, C-ANN, D-GP, D-BNN, C-BNN");
  cmd->add_option("--seeds", f.seeds, "comma list of seeds");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--m", f.m, "inference sample count M");
  cmd->add_option("--mt", f.mt, "training sample count M_t");
  cmd->add_option("--epochs", f.epochs, "training epochs");
}

// Config file first, flags on top.
ExperimentConfig build_config(const Flags& f) {
  ExperimentConfig c;
  if (!f.config.empty()) c = load_config(f.config);
  std::string ini;
  if (!f.experiment.empty()) ini += "name = " + f.experiment + "\n";
  if (!f.methods.empty()) ini += "methods = " + f.methods + "\n";
  if (!f.seeds.empty()) ini += "seeds = " + f.seeds + "\n";
  if (!f.out.empty()) c.out_dir = f.out;
  if (f.m > 0) c.M = f.m;
  if (f.mt > 0) c.M_t = f.mt;
  if (f.epochs >= 0) {
    c.epochs = f.epochs;
    c.epochs_combined = 0;
    c.warm_start_epochs = std::min(c.warm_start_epochs, f.epochs);
  }
  if (!ini.empty()) c = parse_config("[experiment]\n" + ini, c);
  if (c.seeds.empty()) throw ConfigError("seeds: empty list");
  c.validate();
  return c;
}

void print_record(const RunRecord& r) {
  std::printf("%-6s %-10s %5s %5s %7s %14s %12s %14s %12s\n", "method", "experiment", "M_t", "M", "n_train", "R_mean",
              "R_std", "FR_mean", "FR_std");
  for (const auto& row : r.rows) {
    const auto& rep = row.report;
    std::printf("%-6s %-10s %5ld %5ld %7ld %14.6g %12.6g", rep.method.c_str(), rep.experiment.c_str(),
                static_cast<long>(row.point.M_t), static_cast<long>(row.point.M), static_cast<long>(row.point.n_train),
                rep.R_summary.mean, rep.R_summary.std);
    if (rep.FR_summary)
      std::printf(" %14.6g %12.6g\n", rep.FR_summary->mean, rep.FR_summary->std);
    else
      std::printf(" %14s %12s\n", "-", "-");
  }
  for (const auto& e : r.errors) std::fprintf(stderr, "error: %s\n", e.c_str());
}

int run_kind(const std::string& kind, const Flags& f) {
  const ExperimentConfig c = build_config(f);
  RunRecord r = kind == "run" ? run_experiment(c) : kind == "sweep-sampling" ? sweep_sampling(c) : sweep_trainsize(c);
  write_outputs(r, c.out_dir);
  print_record(r);
  std::printf("outputs written to %s (config %s)\n", c.out_dir.c_str(), r.config.hash().c_str());
  return r.errors.empty() ? kOk : kRuntime;
}

int gen_data(const Flags& f) {
  const ExperimentConfig c = build_config(f);
  const std::filesystem::path dir = c.out_dir;
  std::filesystem::create_directories(dir);
  for (auto seed : c.seeds) {
    const ExperimentData d = prepare_data(c, seed);
    const std::string tag = c.experiment + "_seed" + std::to_string(seed);
    write_csv(dir / (tag + "_train.csv"), d.data.train);
    write_csv(dir / (tag + "_val.csv"), d.data.val);
    write_csv(dir / (tag + "_test.csv"), d.data.test);
    std::printf("%s: train %ld, val %ld, test %ld rows\n", tag.c_str(), static_cast<long>(d.data.train.size()),
                static_cast<long>(d.data.val.size()), static_cast<long>(d.data.test.size()));
  }
  return kOk;
}

int eval_checkpoint(const Flags& f) {
  const ExperimentConfig c = build_config(f).resolved();
  const Predictor p = load_checkpoint(std::filesystem::path(f.checkpoint));
  std::printf("seed,M,R,FR,used,excluded\n");
  for (auto seed : c.seeds) {
    const ExperimentData d = prepare_data(c, seed);
    if (p.input_dim() != d.data.test.X.cols() || p.output_dim() != d.data.test.Y.cols())
      throw ConfigError("checkpoint dimensions do not match experiment " + c.experiment);
    const NoiseModel* noise = d.synthetic ? d.data.noise.get() : nullptr;
    const OracleCosts oc = oracle_costs(d.problem, d.data.test, noise, c.M_oracle, derive_seed(seed, Stream::oracle));
    EvalOptions eo;
    eo.M = c.M;
    eo.seed = derive_seed(seed, Stream::sample);
    const Evaluation ev = evaluate(sample_source(p), d.data.test, d.problem, oc, eo);
    std::printf("%lu,%ld,%.10g,%s,%zu,%zu\n", static_cast<unsigned long>(seed), static_cast<long>(c.M), ev.R,
                ev.FR ? std::to_string(*ev.FR).c_str() : "", ev.used, ev.excluded);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decision-focused learning experiments: train predictors, solve SAA problems, report regret"};
  app.require_subcommand(1);
  Flags f;
  auto* run = app.add_subcommand("run", "train and evaluate methods over seeds");
  auto* ss = app.add_subcommand("sweep-sampling", "FR over (M_t, M) pairs");
  auto* st = app.add_subcommand("sweep-trainsize", "FR over training-set sizes");
  auto* gd = app.add_subcommand("gen-data", "write the generated splits as CSV");
  auto* ec = app.add_subcommand("eval-checkpoint", "evaluate a saved predictor on an experiment's test split");
  for (auto* cmd : {run, ss, st, gd, ec}) add_common(cmd, f);
  ec->add_option("--checkpoint", f.checkpoint, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }
  try {
    if (run->parsed()) return run_kind("run", f);
    if (ss->parsed()) return run_kind("sweep-sampling", f);
    if (st->parsed()) return run_kind("sweep-trainsize", f);
    if (gd->parsed()) return gen_data(f);
    if (ec->parsed()) return eval_checkpoint(f);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kInvalid;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kInvalid;
  } catch (const CsvError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return kRuntime;
  }
  return kInvalid;
}
