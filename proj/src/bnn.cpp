#include "dfl/predictors.hpp"

#include <cmath>

namespace dfl {

namespace {

Matrix softplus_plain(const Matrix& m) {
  return m.unaryExpr([](double v) { return v > 30 ? v : std::log1p(std::exp(v)); });
}

Matrix normal_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = z(rng);
  return m;
}

}  // namespace

void Prior::validate() const {
  if (!(sigma_p > 0.0)) throw ContractError("Prior: sigma_p must be positive");
}

VariationalWeights VariationalWeights::init(const MLPArchitecture& arch, Rng& rng, double rho0) {
  const MLPWeights mu = MLPWeights::init(arch, rng);
  VariationalWeights t;
  t.W_mu = mu.W;
  t.b_mu = mu.b;
  for (std::size_t l = 0; l < mu.W.size(); ++l) {
    t.W_rho.push_back(Matrix::Constant(mu.W[l].rows(), mu.W[l].cols(), rho0));
    t.b_rho.push_back(Matrix::Constant(1, mu.b[l].cols(), rho0));
  }
  return t;
}

void VariationalWeights::check(const MLPArchitecture& arch) const {
  MLPWeights{W_mu, b_mu}.check(arch);
  MLPWeights{W_rho, b_rho}.check(arch);
}

std::size_t VariationalWeights::num_weights() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < W_mu.size(); ++l) n += static_cast<std::size_t>(W_mu[l].size() + b_mu[l].size());
  return n;
}

WeightNoise WeightNoise::draw(const VariationalWeights& theta, Rng& rng) {
  WeightNoise n;
  for (std::size_t l = 0; l < theta.W_mu.size(); ++l) {
    n.W.push_back(normal_matrix(theta.W_mu[l].rows(), theta.W_mu[l].cols(), rng));
    n.b.push_back(normal_matrix(1, theta.b_mu[l].cols(), rng));
  }
  return n;
}

WeightNoise WeightNoise::zeros(const VariationalWeights& theta) {
  WeightNoise n;
  for (std::size_t l = 0; l < theta.W_mu.size(); ++l) {
    n.W.push_back(Matrix::Zero(theta.W_mu[l].rows(), theta.W_mu[l].cols()));
    n.b.push_back(Matrix::Zero(1, theta.b_mu[l].cols()));
  }
  return n;
}

BnnTapeParams BnnTapeParams::attach(ad::Tape& tape, const VariationalWeights& theta) {
  BnnTapeParams p;
  for (std::size_t l = 0; l < theta.W_mu.size(); ++l) {
    p.W_mu.push_back(tape.parameter(theta.W_mu[l]));
    p.W_rho.push_back(tape.parameter(theta.W_rho[l]));
    p.b_mu.push_back(tape.parameter(theta.b_mu[l]));
    p.b_rho.push_back(tape.parameter(theta.b_rho[l]));
  }
  return p;
}

std::vector<ad::Var> BnnTapeParams::all() const {
  std::vector<ad::Var> out;
  for (std::size_t l = 0; l < W_mu.size(); ++l) {
    out.push_back(W_mu[l]);
    out.push_back(W_rho[l]);
    out.push_back(b_mu[l]);
    out.push_back(b_rho[l]);
  }
  return out;
}

SampledWeights reparameterize(const BnnTapeParams& params, const WeightNoise& noise) {
  if (noise.W.size() != params.W_mu.size()) throw DimensionError("reparameterize: noise has the wrong layer count");
  ad::Tape& tape = *params.W_mu.at(0).tape();
  SampledWeights w;
  w.noise = noise;
  for (std::size_t l = 0; l < params.W_mu.size(); ++l) {
    const ad::Var sW = ad::softplus(params.W_rho[l]);
    const ad::Var sb = ad::softplus(params.b_rho[l]);
    w.W_sigma.push_back(sW);
    w.b_sigma.push_back(sb);
    w.W.push_back(params.W_mu[l] + ad::mul(sW, tape.constant(noise.W[l])));
    w.b.push_back(params.b_mu[l] + ad::mul(sb, tape.constant(noise.b[l])));
  }
  return w;
}

ad::Var kl_term(const BnnTapeParams& params, const SampledWeights& w, const Prior& prior, bool closed_form) {
  prior.validate();
  ad::Tape& tape = *params.W_mu.at(0).tape();
  const double inv2p = 1.0 / (2.0 * prior.sigma_p * prior.sigma_p);
  double constant = 0.0;
  std::vector<ad::Var> terms;
  auto add = [&](const ad::Var& mu, const ad::Var& sigma, const ad::Var& omega, const Matrix& eps) {
    const auto n = static_cast<double>(mu.value().size());
    constant += n * std::log(prior.sigma_p);
    if (closed_form) {
      // sum log(sigma_p / sigma) + (sigma^2 + mu^2) / (2 sigma_p^2) - 1/2
      terms.push_back(ad::scale(ad::sum(ad::log(sigma)), -1.0));
      terms.push_back(ad::scale(ad::sum(ad::square(sigma)) + ad::sum(ad::square(mu)), inv2p));
      constant -= 0.5 * n;
    } else {
      // log q = sum(-log sigma - eps^2/2), log p = sum(-log sigma_p - omega^2 / (2 sigma_p^2))
      terms.push_back(ad::scale(ad::sum(ad::log(sigma)), -1.0));
      terms.push_back(ad::scale(ad::sum(ad::square(omega)), inv2p));
      constant -= 0.5 * eps.squaredNorm();
    }
  };
  for (std::size_t l = 0; l < params.W_mu.size(); ++l) {
    add(params.W_mu[l], w.W_sigma[l], w.W[l], w.noise.W[l]);
    add(params.b_mu[l], w.b_sigma[l], w.b[l], w.noise.b[l]);
  }
  ad::Var total = tape.scalar_constant(constant);
  for (const auto& t : terms) total = total + t;
  return total;
}

ad::Var bnn_heads(const ad::Var& X, const SampledWeights& w, Activation act) {
  return mlp_forward(X, w.W, w.b, act);
}

ad::Var heteroscedastic_nll(const ad::Var& heads, const Matrix& Y) {
  const Eigen::Index B = Y.rows(), d = Y.cols();
  if (B < 1) throw ContractError("heteroscedastic_nll: empty batch");
  if (heads.rows() != B || heads.cols() != 2 * d) throw DimensionError("heteroscedastic_nll: heads shape mismatch");
  ad::Tape& tape = *heads.tape();
  const ad::Var hm = ad::slice(heads, 0, 0, B, d);
  const ad::Var hs = ad::clamp(ad::slice(heads, 0, d, B, d), kLogVarClampLo, kLogVarClampHi);
  const ad::Var r = hm - tape.constant(Y);
  const ad::Var term = ad::mul(ad::exp(ad::scale(hs, -1.0)), ad::square(r)) + hs;
  return ad::scale(ad::sum(term), 1.0 / static_cast<double>(B));
}

ad::Var bnn_sample_draw(const ad::Var& heads, const Matrix& eps) {
  const Eigen::Index B = eps.rows(), d = eps.cols();
  if (heads.rows() != B || heads.cols() != 2 * d) throw DimensionError("bnn_sample_draw: heads shape mismatch");
  const ad::Var hm = ad::slice(heads, 0, 0, B, d);
  const ad::Var hs = ad::clamp(ad::slice(heads, 0, d, B, d), kSampleLogVarLo, kLogVarClampHi);
  return hm + ad::mul(heads.tape()->constant(eps), ad::exp(ad::scale(hs, 0.5)));
}

ad::Var elbo_loss(const BnnTapeParams& params, const Prior& prior, const Matrix& X, const Matrix& Y, double n_total,
                  const std::vector<WeightNoise>& noises, Activation act, bool closed_form_kl) {
  if (X.rows() < 1) throw ContractError("elbo_loss: empty batch");
  if (noises.empty()) throw ContractError("elbo_loss: need at least one weight draw");
  if (!(n_total > 0.0)) throw ContractError("elbo_loss: n_total must be positive");
  ad::Tape& tape = *params.W_mu.at(0).tape();
  const ad::Var Xv = tape.constant(X);
  ad::Var total;
  for (const WeightNoise& n : noises) {
    const SampledWeights w = reparameterize(params, n);
    const ad::Var loss =
        ad::scale(kl_term(params, w, prior, closed_form_kl), 1.0 / n_total) + heteroscedastic_nll(bnn_heads(Xv, w, act), Y);
    total = total.valid() ? total + loss : loss;
  }
  return ad::scale(total, 1.0 / static_cast<double>(noises.size()));
}

Matrix bnn_sample_forward(const Vector& x, const VariationalWeights& theta, const MLPArchitecture& arch, Eigen::Index M,
                          Rng& rng) {
  if (M < 1) throw ContractError("bnn_sample_forward: M must be at least 1");
  if (arch.output_dim % 2 != 0) throw ContractError("bnn_sample_forward: output layer must hold two heads");
  theta.check(arch);
  const Eigen::Index d = arch.output_dim / 2;
  Matrix out(M, d);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Matrix> W(theta.W_mu.size()), b(theta.W_mu.size());
  for (Eigen::Index j = 0; j < M; ++j) {
    const WeightNoise n = WeightNoise::draw(theta, rng);
    for (std::size_t l = 0; l < W.size(); ++l) {
      W[l] = theta.W_mu[l] + softplus_plain(theta.W_rho[l]).cwiseProduct(n.W[l]);
      b[l] = theta.b_mu[l] + softplus_plain(theta.b_rho[l]).cwiseProduct(n.b[l]);
    }
    const Matrix heads = mlp_eval(x.transpose(), W, b, arch.activation);
    for (Eigen::Index i = 0; i < d; ++i) {
      const double hs = std::clamp(heads(0, d + i), kSampleLogVarLo, kLogVarClampHi);
      out(j, i) = heads(0, i) + z(rng) * std::exp(0.5 * hs);
    }
  }
  return out;
}

}  // namespace dfl
