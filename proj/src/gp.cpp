#include "dfl/predictors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace dfl {

namespace {

Matrix squared_distances(const Matrix& A, const Matrix& B) {
  const Vector a2 = A.rowwise().squaredNorm();
  const Vector b2 = B.rowwise().squaredNorm();
  Matrix D = (-2.0 * A * B.transpose()).colwise() + a2;
  D.rowwise() += b2.transpose();
  return D.cwiseMax(0.0);
}

std::vector<Eigen::Index> subset(Eigen::Index n, Eigen::Index k, std::uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  if (k >= n) return idx;
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Matrix take_rows(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

// Log marginal likelihood for every (s2, noise) with a shared length-scale,
// through one eigendecomposition of the unit-amplitude kernel.
struct SpectralLml {
  Vector lambda;
  Vector proj2;
  Eigen::Index n = 0;

  SpectralLml(const Matrix& D, const Vector& y, double lengthscale) {
    const Matrix K0 = (-D / (2.0 * lengthscale * lengthscale)).array().exp().matrix();
    Eigen::SelfAdjointEigenSolver<Matrix> es(K0);
    lambda = es.eigenvalues().cwiseMax(0.0);
    proj2 = (es.eigenvectors().transpose() * y).array().square().matrix();
    n = y.size();
  }

  double operator()(double signal_var, double noise_var) const {
    const Eigen::ArrayXd ev = signal_var * lambda.array() + noise_var;
    return -0.5 * (proj2.array() / ev).sum() - 0.5 * ev.log().sum() -
           0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  }
};

}  // namespace

double gp_log_marginal(const Matrix& X, const Vector& y, double lengthscale, double signal_var, double noise_var) {
  const Matrix K = signal_var * (-squared_distances(X, X) / (2.0 * lengthscale * lengthscale)).array().exp().matrix() +
                   noise_var * Matrix::Identity(X.rows(), X.rows());
  Eigen::LLT<Matrix> llt(K);
  if (llt.info() != Eigen::Success) throw FitError("gp_log_marginal: kernel matrix is not positive definite");
  const Vector alpha = llt.solve(y);
  const Matrix L = llt.matrixL();
  return -0.5 * y.dot(alpha) - L.diagonal().array().log().sum() -
         0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi);
}

void GPModel::predict(const Matrix& Xs, Vector& mean, Vector& var) const {
  if (!fitted()) throw ContractError("GP: model is not fitted");
  if (Xs.cols() != X.cols()) throw DimensionError("GP: input width mismatch");
  const Matrix Ks = signal_var * (-squared_distances(Xs, X) / (2.0 * lengthscale * lengthscale)).array().exp().matrix();
  mean = Ks * alpha;
  const Matrix V = chol_L.triangularView<Eigen::Lower>().solve(Ks.transpose());
  var = (Vector::Constant(Xs.rows(), signal_var + noise_var) - V.colwise().squaredNorm().transpose()).cwiseMax(0.0);
}

GPModel gp_fit_one(const Matrix& X, const Vector& y, const GPFitOptions& opts, double* grid_best) {
  if (X.rows() < 2) throw ContractError("gp_fit: need at least two points");
  if (X.rows() != y.size()) throw DimensionError("gp_fit: X and y row counts differ");

  const auto sidx = subset(X.rows(), opts.search_points, opts.seed);
  const Matrix Xs = take_rows(X, sidx);
  Vector ys(static_cast<Eigen::Index>(sidx.size()));
  for (std::size_t i = 0; i < sidx.size(); ++i) ys[static_cast<Eigen::Index>(i)] = y[sidx[i]];
  const Matrix D = squared_distances(Xs, Xs);

  // Parameters searched in log10 space.
  double best = -std::numeric_limits<double>::infinity();
  double bl = 0, bs = 0, bn = 0;
  for (int i = 0; i < 8; ++i) {
    const double ll = -1.0 + 2.5 * i / 7.0;
    const SpectralLml lml(D, ys, std::pow(10.0, ll));
    for (int j = 0; j < 6; ++j) {
      const double ls = -1.0 + 3.0 * j / 5.0;
      for (int k = 0; k < 8; ++k) {
        const double ln = -4.0 + 4.0 * k / 7.0;
        const double v = lml(std::pow(10.0, ls), std::pow(10.0, ln));
        if (v > best) {
          best = v;
          bl = ll;
          bs = ls;
          bn = ln;
        }
      }
    }
  }
  if (grid_best) *grid_best = best;

  double step[3] = {2.5 / 14.0, 3.0 / 10.0, 4.0 / 14.0};
  const double lo[3] = {-2.0, -3.0, -8.0}, hi[3] = {3.0, 4.0, 1.0};
  double cur[3] = {bl, bs, bn};
  auto eval = [&](const double* p) {
    return SpectralLml(D, ys, std::pow(10.0, p[0]))(std::pow(10.0, p[1]), std::pow(10.0, p[2]));
  };
  for (int round = 0; round < opts.refine_rounds; ++round) {
    for (int c = 0; c < 3; ++c) {
      for (double dir : {1.0, -1.0}) {
        // Keep stepping while it helps.
        for (int tries = 0; tries < 8; ++tries) {
          double cand[3] = {cur[0], cur[1], cur[2]};
          cand[c] = std::clamp(cur[c] + dir * step[c], lo[c], hi[c]);
          if (cand[c] == cur[c]) break;
          const double v = eval(cand);
          if (!(v > best)) break;
          best = v;
          std::copy(cand, cand + 3, cur);
        }
      }
      step[c] *= 0.5;
    }
  }

  GPModel m;
  m.lengthscale = std::pow(10.0, cur[0]);
  m.signal_var = std::pow(10.0, cur[1]);
  m.noise_var = std::pow(10.0, cur[2]);
  m.log_marginal = best;

  const auto fidx = subset(X.rows(), opts.fit_points, opts.seed + 1);
  m.X = take_rows(X, fidx);
  m.y.resize(static_cast<Eigen::Index>(fidx.size()));
  for (std::size_t i = 0; i < fidx.size(); ++i) m.y[static_cast<Eigen::Index>(i)] = y[fidx[i]];
  const Eigen::Index n = m.X.rows();
  const Matrix K = m.signal_var * (-squared_distances(m.X, m.X) / (2.0 * m.lengthscale * m.lengthscale)).array().exp().matrix() +
                   m.noise_var * Matrix::Identity(n, n);
  for (double jitter : {0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6}) {
    Eigen::LLT<Matrix> llt(K + jitter * Matrix::Identity(n, n));
    if (llt.info() != Eigen::Success) continue;
    m.chol_L = llt.matrixL();
    m.alpha = llt.solve(m.y);
    m.jitter = jitter;
    return m;
  }
  throw FitError("gp_fit: Cholesky failed after jitter escalation to 1e-6");
}

Predictor gp_fit(const Matrix& X, const Matrix& Y, const GPFitOptions& opts) {
  if (X.rows() != Y.rows()) throw DimensionError("gp_fit: X and Y row counts differ");
  Predictor p;
  p.kind = PredictorKind::gp;
  p.x_std = Standardizer::fit(X);
  p.y_std = Standardizer::fit(Y);
  const Matrix Xs = p.x_std.apply(X);
  const Matrix Ys = p.y_std.apply(Y);
  for (Eigen::Index j = 0; j < Y.cols(); ++j) {
    GPFitOptions o = opts;
    o.seed = opts.seed + 7919 * static_cast<std::uint64_t>(j);
    p.gp.push_back(gp_fit_one(Xs, Ys.col(j), o));
  }
  return p;
}

Matrix gp_sample(const Predictor& gp, const Vector& x, Eigen::Index M, Rng& rng) {
  if (gp.kind != PredictorKind::gp || gp.gp.empty()) throw ContractError("gp_sample: predictor is not a fitted GP");
  if (M < 1) throw ContractError("gp_sample: M must be at least 1");
  const Matrix xs = gp.x_std.apply(x.transpose());
  std::normal_distribution<double> z(0.0, 1.0);
  Matrix out(M, gp.output_dim());
  for (std::size_t j = 0; j < gp.gp.size(); ++j) {
    Vector mean, var;
    gp.gp[j].predict(xs, mean, var);
    const double sd = std::sqrt(var[0]);
    for (Eigen::Index r = 0; r < M; ++r) out(r, static_cast<Eigen::Index>(j)) = mean[0] + sd * z(rng);
  }
  return gp.y_std.invert(out);
}

}  // namespace dfl
