#include "dfl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

namespace dfl {

AdamState AdamState::for_params(const std::vector<Matrix>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.push_back(Matrix::Zero(p.rows(), p.cols()));
    s.v.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  return s;
}

void adam_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads, AdamState& s, double lr) {
  if (grads.size() != params.size()) throw DimensionError("adam_step: gradient count mismatch");
  if (s.m.empty()) s = AdamState::for_params(params);
  if (s.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameters");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i];
    if (g.rows() != params[i].rows() || g.cols() != params[i].cols() || s.m[i].rows() != g.rows() ||
        s.m[i].cols() != g.cols())
      throw DimensionError("adam_step: shape mismatch at parameter " + std::to_string(i));
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g.cwiseAbs2();
    params[i].array() -= lr * (s.m[i].array() / c1) / ((s.v[i].array() / c2).sqrt() + s.eps);
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ContractError("TrainConfig: learning_rate must be positive");
  if (epochs < 0) throw ContractError("TrainConfig: epochs must be nonnegative");
  if (batch_size < 1) throw ContractError("TrainConfig: batch_size must be positive");
  if (M_t < 1) throw ContractError("TrainConfig: M_t must be positive");
  if (M_val < 0 || val_limit < 0) throw ContractError("TrainConfig: M_val and val_limit must be nonnegative");
  if (elbo_draws < 1) throw ContractError("TrainConfig: elbo_draws must be positive");
  if (!(scheduler_gamma > 0.0 && scheduler_gamma <= 1.0)) throw ContractError("TrainConfig: scheduler_gamma must be in (0, 1]");
  if (!(max_skip_fraction >= 0.0 && max_skip_fraction <= 1.0))
    throw ContractError("TrainConfig: max_skip_fraction must be in [0, 1]");
}

double TrainConfig::lr_at(int epoch) const { return learning_rate * std::pow(scheduler_gamma, epoch); }

MLPArchitecture bnn_architecture(Eigen::Index d_x, Eigen::Index d_y, std::vector<Eigen::Index> hidden, Activation act) {
  MLPArchitecture a;
  a.input_dim = d_x;
  a.hidden = std::move(hidden);
  a.output_dim = 2 * d_y;
  a.activation = act;
  a.validate();
  return a;
}

MLPArchitecture ann_architecture(Eigen::Index d_x, Eigen::Index d_y, std::vector<Eigen::Index> hidden, Activation act) {
  MLPArchitecture a = bnn_architecture(d_x, d_y, std::move(hidden), act);
  a.output_dim = d_y;
  return a;
}

namespace {

std::vector<Matrix> bnn_params(const VariationalWeights& t) {
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < t.W_mu.size(); ++l) {
    out.push_back(t.W_mu[l]);
    out.push_back(t.W_rho[l]);
    out.push_back(t.b_mu[l]);
    out.push_back(t.b_rho[l]);
  }
  return out;
}

void set_bnn_params(VariationalWeights& t, const std::vector<Matrix>& p) {
  for (std::size_t l = 0; l < t.W_mu.size(); ++l) {
    t.W_mu[l] = p[4 * l];
    t.W_rho[l] = p[4 * l + 1];
    t.b_mu[l] = p[4 * l + 2];
    t.b_rho[l] = p[4 * l + 3];
  }
}

std::vector<Matrix> ann_params(const MLPWeights& w) {
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < w.W.size(); ++l) {
    out.push_back(w.W[l]);
    out.push_back(w.b[l]);
  }
  return out;
}

void set_ann_params(MLPWeights& w, const std::vector<Matrix>& p) {
  for (std::size_t l = 0; l < w.W.size(); ++l) {
    w.W[l] = p[2 * l];
    w.b[l] = p[2 * l + 1];
  }
}

Matrix take(const Matrix& m, std::span<const Eigen::Index> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

// Standardized B x d draws to data units, on the tape.
ad::Var to_data_units(const ad::Var& v, const Standardizer& s) {
  ad::Tape& t = *v.tape();
  const Eigen::Index B = v.rows();
  const Matrix scale = s.scale.transpose().replicate(B, 1);
  const Matrix mean = s.mean.transpose().replicate(B, 1);
  return ad::mul(v, t.constant(scale)) + t.constant(mean);
}

// Mean of the B x 1 cost column over rows not listed in skipped.
ad::Var masked_mean(const ad::Var& cost, const std::vector<Eigen::Index>& skipped) {
  ad::Tape& t = *cost.tape();
  Matrix mask = Matrix::Ones(cost.rows(), 1);
  for (auto i : skipped) mask(i, 0) = 0.0;
  const double n = mask.sum();
  if (n == 0.0) return t.scalar_constant(0.0);
  return ad::scale(ad::sum(ad::mul(cost, t.constant(mask))), 1.0 / n);
}

double squared_norm(const std::vector<Matrix>& ps) {
  double s = 0.0;
  for (const auto& p : ps) s += p.squaredNorm();
  return s;
}

bool all_finite(const std::vector<Matrix>& ps) {
  return std::all_of(ps.begin(), ps.end(), [](const Matrix& m) { return m.allFinite(); });
}

struct StepResult {
  double loss = 0.0;
  std::vector<Matrix> grads;
  std::size_t skipped = 0;
};

// Shared epoch loop: shuffled minibatches, Adam, per-epoch lr decay and
// best-validation selection. step() evaluates one minibatch at the current
// parameters; sync() writes parameters into the model; validate() scores it.
void run_loop(TrainedModel& model, std::vector<Matrix> params, Eigen::Index n_train, const TrainConfig& cfg,
                      Rng& rng, const std::function<StepResult(std::span<const Eigen::Index>, Rng&)>& step,
                      const std::function<void(Predictor&, const std::vector<Matrix>&)>& sync,
                      const std::function<double(const Predictor&)>& validate) {
  AdamState adam = AdamState::for_params(params);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Predictor best = model.predictor;
  for (int e = 0; e < cfg.epochs; ++e) {
    const double lr = cfg.lr_at(e);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0, skipped = 0;
    for (Eigen::Index start = 0; start < n_train; start += cfg.batch_size) {
      const Eigen::Index len = std::min(cfg.batch_size, n_train - start);
      const std::span<const Eigen::Index> idx(order.data() + start, static_cast<std::size_t>(len));
      auto fail = [&](const std::string& what, double loss) {
        std::ostringstream os;
        os << "training: " << what << " at epoch " << e << " batch " << batches << " (loss=" << loss
           << ", |theta|^2=" << squared_norm(params) << ", lr=" << lr << ")";
        throw TrainingError(os.str());
      };
      StepResult r;
      try {
        r = step(idx, rng);
      } catch (const TrainingError&) {
        throw;
      } catch (const NumericError& err) {
        fail(err.what(), std::numeric_limits<double>::quiet_NaN());
      }
      if (!std::isfinite(r.loss) || !all_finite(r.grads)) fail("non-finite loss or gradient", r.loss);
      adam_step(params, r.grads, adam, lr);
      sync(model.predictor, params);
      loss_sum += r.loss;
      skipped += r.skipped;
      ++batches;
    }
    if (static_cast<double>(skipped) > cfg.max_skip_fraction * static_cast<double>(n_train)) {
      throw TrainingError("training: epoch " + std::to_string(e) + " skipped " + std::to_string(skipped) + " of " +
                          std::to_string(n_train) + " instances");
    }
    const double val = validate(model.predictor);
    model.history.push_back({e, loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1)), val, lr, skipped});
    model.skipped_total += skipped;
    if (std::isfinite(val) && val < model.best_val) {
      model.best_val = val;
      model.best_epoch = e;
      best = model.predictor;
    }
  }
  model.predictor = std::move(best);
}

Dataset limited(const Dataset& d, Eigen::Index limit) {
  return limit > 0 && limit < d.size() ? d.head(limit) : d;
}

Predictor init_bnn(const MLPArchitecture& arch, const Prior& prior, const Dataset& train, Rng& rng) {
  Predictor p;
  p.kind = PredictorKind::bnn;
  p.arch = arch;
  p.prior = prior;
  p.bnn = VariationalWeights::init(arch, rng);
  p.x_std = Standardizer::fit(train.X);
  p.y_std = Standardizer::fit(train.Y);
  return p;
}

void check_shapes(const MLPArchitecture& arch, const Dataset& train, const Dataset& val, Eigen::Index out) {
  arch.validate();
  train.validate();
  val.validate();
  if (train.size() < 1 || val.size() < 1) throw ContractError("training: train and val splits must be nonempty");
  if (arch.input_dim != train.X.cols() || val.X.cols() != train.X.cols() || val.Y.cols() != train.Y.cols())
    throw DimensionError("training: data width does not match the architecture");
  if (arch.output_dim != out) throw DimensionError("training: output layer has the wrong width");
}

}  // namespace

double bnn_validation_nll(const Predictor& p, const Dataset& data) {
  if (p.kind != PredictorKind::bnn) throw ContractError("bnn_validation_nll: not a BNN");
  const Matrix heads = mlp_eval(p.x_std.apply(data.X), p.bnn.W_mu, p.bnn.b_mu, p.arch.activation);
  const Matrix Ys = p.y_std.apply(data.Y);
  const Eigen::Index d = Ys.cols();
  const Eigen::ArrayXXd hs = heads.rightCols(d).array().cwiseMax(kLogVarClampLo).cwiseMin(kLogVarClampHi);
  const Eigen::ArrayXXd r = heads.leftCols(d).array() - Ys.array();
  return ((-hs).exp() * r.square() + hs).sum() / static_cast<double>(Ys.rows());
}

double mean_task_cost(const Predictor& p, const Problem& problem, const Dataset& data, Eigen::Index M,
                      std::uint64_t seed, const qp::SolverOptions& solver, std::size_t* failures) {
  Rng rng(seed);
  const auto draws = p.predict_samples_batch(data.X, M, rng);
  double sum = 0.0;
  std::size_t ok = 0, bad = 0;
  Matrix S(M, data.Y.cols());
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    for (Eigen::Index j = 0; j < M; ++j) S.row(j) = draws[static_cast<std::size_t>(j)].row(i);
    try {
      const DecisionResult z = saa_decision(problem, S, solver);
      sum += task_cost(problem, z.z, data.Y.row(i).transpose());
      ++ok;
    } catch (const SolveError&) {
      ++bad;
    }
  }
  if (failures) *failures = bad;
  return ok ? sum / static_cast<double>(ok) : std::numeric_limits<double>::infinity();
}

CombinedNoise draw_combined_noise(const VariationalWeights& theta, Eigen::Index batch, Eigen::Index d_y,
                                  Eigen::Index M_t, Rng& rng) {
  CombinedNoise n;
  std::normal_distribution<double> z(0.0, 1.0);
  for (Eigen::Index j = 0; j < M_t; ++j) {
    n.weights.push_back(WeightNoise::draw(theta, rng));
    Matrix e(batch, d_y);
    for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = z(rng);
    n.eps.push_back(std::move(e));
  }
  return n;
}

CombinedTerms combined_batch_loss(const BnnTapeParams& params, const Predictor& shape, const Problem& problem,
                                  const Matrix& X, const Matrix& Y, double n_total, const CombinedNoise& noise,
                                  double K, bool regularizer, bool closed_form_kl, const qp::SolverOptions& solver) {
  if (noise.weights.empty() || noise.weights.size() != noise.eps.size())
    throw ContractError("combined_batch_loss: noise draws are inconsistent");
  ad::Tape& tape = *params.W_mu.at(0).tape();
  const ad::Var Xv = tape.constant(shape.x_std.apply(X));
  std::vector<ad::Var> draws;
  ad::Var reg;
  for (std::size_t j = 0; j < noise.weights.size(); ++j) {
    const SampledWeights w = reparameterize(params, noise.weights[j]);
    const ad::Var heads = bnn_heads(Xv, w, shape.arch.activation);
    draws.push_back(to_data_units(bnn_sample_draw(heads, noise.eps[j]), shape.y_std));
    if (regularizer) {
      const ad::Var c = kl_term(params, w, shape.prior, closed_form_kl);
      reg = reg.valid() ? reg + c : c;
    }
  }
  CombinedTerms out;
  const ad::Var z = saa_layer(problem, draws, solver, &out.skipped);
  out.task = masked_mean(task_cost_node(problem, z, Y), out.skipped);
  out.regularizer = regularizer ? ad::scale(reg, 1.0 / (n_total * static_cast<double>(draws.size())))
                                : tape.scalar_constant(0.0);
  out.loss = out.regularizer + ad::scale(out.task, K);
  return out;
}

TrainedModel train_decoupled(const MLPArchitecture& arch, const Prior& prior, const Dataset& train,
                             const Dataset& val, const TrainConfig& cfg) {
  cfg.validate();
  prior.validate();
  check_shapes(arch, train, val, 2 * train.Y.cols());
  Rng rng(cfg.seed);
  TrainedModel model;
  model.predictor = init_bnn(arch, prior, train, rng);
  const Matrix Xs = model.predictor.x_std.apply(train.X);
  const Matrix Ys = model.predictor.y_std.apply(train.Y);
  const Dataset vset = limited(val, cfg.val_limit);
  const auto n_total = static_cast<double>(train.size());

  auto step = [&](std::span<const Eigen::Index> idx, Rng& r) {
    const VariationalWeights& th = model.predictor.bnn;
    ad::Tape tape;
    const BnnTapeParams p = BnnTapeParams::attach(tape, th);
    std::vector<WeightNoise> noises;
    for (Eigen::Index k = 0; k < cfg.elbo_draws; ++k) noises.push_back(WeightNoise::draw(th, r));
    const ad::Var loss =
        elbo_loss(p, prior, take(Xs, idx), take(Ys, idx), n_total, noises, arch.activation, cfg.closed_form_kl);
    const auto g = tape.backward(loss);
    StepResult s;
    s.loss = loss.scalar();
    for (const auto& v : p.all()) s.grads.push_back(g[v]);
    return s;
  };
  run_loop(
      model, bnn_params(model.predictor.bnn), train.size(), cfg, rng, step,
      [](Predictor& pr, const std::vector<Matrix>& ps) { set_bnn_params(pr.bnn, ps); },
      [&](const Predictor& pr) { return bnn_validation_nll(pr, vset); });
  return model;
}

TrainedModel train_combined(const MLPArchitecture& arch, const Prior& prior, const Problem& problem,
                            const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                            const Predictor* warm_start) {
  cfg.validate();
  prior.validate();
  check_shapes(arch, train, val, 2 * train.Y.cols());
  if (outcome_dim(problem) != train.Y.cols()) throw DimensionError("train_combined: problem and data widths differ");
  Rng rng(cfg.seed);
  TrainedModel model;
  model.predictor = init_bnn(arch, prior, train, rng);
  if (warm_start) {
    if (warm_start->kind != PredictorKind::bnn) throw ContractError("train_combined: warm start must be a BNN");
    warm_start->bnn.check(arch);
    model.predictor.bnn = warm_start->bnn;
    model.predictor.x_std = warm_start->x_std;
    model.predictor.y_std = warm_start->y_std;
  }
  const Dataset vset = limited(val, cfg.val_limit);
  const auto n_total = static_cast<double>(train.size());
  const Eigen::Index M_val = cfg.M_val > 0 ? cfg.M_val : cfg.M_t;
  const std::uint64_t val_seed = cfg.seed ^ 0x5eed5eedULL;

  model.K = cfg.K;
  if (model.K <= 0.0) {
    // Calibrate on the first batch in a fixed order, then freeze.
    Rng cr(cfg.seed + 1);
    const Eigen::Index B = std::min(cfg.batch_size, train.size());
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(B));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    ad::Tape tape;
    const BnnTapeParams p = BnnTapeParams::attach(tape, model.predictor.bnn);
    const CombinedNoise noise = draw_combined_noise(model.predictor.bnn, B, train.Y.cols(), cfg.M_t, cr);
    const CombinedTerms t = combined_batch_loss(p, model.predictor, problem, take(train.X, idx), take(train.Y, idx),
                                                n_total, noise, 1.0, cfg.regularizer, cfg.closed_form_kl, cfg.solver);
    const double task = std::abs(t.task.scalar()), reg = std::abs(t.regularizer.scalar());
    model.K = task > 0.0 && reg > 0.0 ? cfg.K_ratio * reg / task : 1.0;
  }

  auto step = [&](std::span<const Eigen::Index> idx, Rng& r) {
    const Predictor& pr = model.predictor;
    ad::Tape tape;
    const BnnTapeParams p = BnnTapeParams::attach(tape, pr.bnn);
    const CombinedNoise noise =
        draw_combined_noise(pr.bnn, static_cast<Eigen::Index>(idx.size()), train.Y.cols(), cfg.M_t, r);
    const CombinedTerms t = combined_batch_loss(p, pr, problem, take(train.X, idx), take(train.Y, idx), n_total,
                                                noise, model.K, cfg.regularizer, cfg.closed_form_kl, cfg.solver);
    const auto g = tape.backward(t.loss);
    StepResult s;
    s.loss = t.loss.scalar();
    s.skipped = t.skipped.size();
    for (const auto& v : p.all()) s.grads.push_back(g[v]);
    return s;
  };
  run_loop(
      model, bnn_params(model.predictor.bnn), train.size(), cfg, rng, step,
      [](Predictor& pr, const std::vector<Matrix>& ps) { set_bnn_params(pr.bnn, ps); },
      [&](const Predictor& pr) { return mean_task_cost(pr, problem, vset, M_val, val_seed, cfg.solver); });
  return model;
}

TrainedModel train_deterministic(const MLPArchitecture& arch, const Dataset& train, const Dataset& val,
                                 const TrainConfig& cfg, DeterministicMode mode, const Problem* problem) {
  cfg.validate();
  check_shapes(arch, train, val, train.Y.cols());
  if (mode == DeterministicMode::combined_task) {
    if (!problem) throw ContractError("train_deterministic: combined-task mode needs a problem");
    if (outcome_dim(*problem) != train.Y.cols()) throw DimensionError("train_deterministic: problem and data widths differ");
  }
  Rng rng(cfg.seed);
  TrainedModel model;
  Predictor& p0 = model.predictor;
  p0.kind = PredictorKind::ann;
  p0.arch = arch;
  p0.ann = MLPWeights::init(arch, rng);
  p0.x_std = Standardizer::fit(train.X);
  p0.y_std = Standardizer::fit(train.Y);
  const Matrix Xs = p0.x_std.apply(train.X);
  const Matrix Ys = p0.y_std.apply(train.Y);
  const Dataset vset = limited(val, cfg.val_limit);
  model.K = 1.0;

  auto step = [&](std::span<const Eigen::Index> idx, Rng&) {
    const Predictor& pr = model.predictor;
    ad::Tape tape;
    std::vector<ad::Var> W, b, all;
    for (std::size_t l = 0; l < pr.ann.W.size(); ++l) {
      W.push_back(tape.parameter(pr.ann.W[l]));
      b.push_back(tape.parameter(pr.ann.b[l]));
      all.push_back(W.back());
      all.push_back(b.back());
    }
    const ad::Var out = mlp_forward(tape.constant(take(Xs, idx)), W, b, arch.activation);
    StepResult s;
    ad::Var loss;
    if (mode == DeterministicMode::decoupled_mse) {
      loss = ad::mean(ad::square(out - tape.constant(take(Ys, idx))));
    } else {
      std::vector<Eigen::Index> skipped;
      const ad::Var pred = to_data_units(out, pr.y_std);
      const ad::Var z = saa_layer(*problem, std::span(&pred, 1), cfg.solver, &skipped);
      loss = masked_mean(task_cost_node(*problem, z, take(train.Y, idx)), skipped);
      s.skipped = skipped.size();
    }
    const auto g = tape.backward(loss);
    s.loss = loss.scalar();
    for (const auto& v : all) s.grads.push_back(g[v]);
    return s;
  };
  auto validate = [&](const Predictor& pr) {
    if (mode == DeterministicMode::decoupled_mse) {
      const Matrix r = mlp_eval(pr.x_std.apply(vset.X), pr.ann.W, pr.ann.b, arch.activation) - pr.y_std.apply(vset.Y);
      return r.squaredNorm() / static_cast<double>(r.size());
    }
    return mean_task_cost(pr, *problem, vset, 1, 0, cfg.solver);
  };
  run_loop(
      model, ann_params(p0.ann), train.size(), cfg, rng, step,
      [](Predictor& pr, const std::vector<Matrix>& ps) { set_ann_params(pr.ann, ps); }, validate);
  return model;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,train_loss,val_metric,lr,skipped\n";
  os.precision(17);
  for (const auto& r : history)
    os << r.epoch << ',' << r.train_loss << ',' << r.val_metric << ',' << r.lr << ',' << r.skipped << '\n';
}

}  // namespace dfl
