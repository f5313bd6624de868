#include "dfl/predictors.hpp"

#include <algorithm>
#include <cmath>

namespace dfl {

std::string to_string(PredictorKind kind) {
  switch (kind) {
    case PredictorKind::ann: return "ann";
    case PredictorKind::bnn: return "bnn";
    case PredictorKind::gp: return "gp";
  }
  return "?";
}

std::vector<Matrix> Predictor::predict_samples_batch(const Matrix& X, Eigen::Index M, Rng& rng) const {
  if (M < 1) throw ContractError("predict_samples: M must be at least 1");
  if (X.cols() != input_dim()) throw DimensionError("predict_samples: input width mismatch");
  const Eigen::Index N = X.rows(), d = output_dim();
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(M));
  std::normal_distribution<double> z(0.0, 1.0);
  switch (kind) {
    case PredictorKind::ann: {
      const Matrix mean = predict_mean(X);
      for (Eigen::Index j = 0; j < M; ++j) out.push_back(mean);
      break;
    }
    case PredictorKind::bnn: {
      const Matrix Xs = x_std.apply(X);
      std::vector<Matrix> W(bnn.W_mu.size()), b(bnn.W_mu.size());
      std::vector<Matrix> sW, sb;
      for (std::size_t l = 0; l < W.size(); ++l) {
        sW.push_back(bnn.W_rho[l].unaryExpr([](double v) { return v > 30 ? v : std::log1p(std::exp(v)); }));
        sb.push_back(bnn.b_rho[l].unaryExpr([](double v) { return v > 30 ? v : std::log1p(std::exp(v)); }));
      }
      for (Eigen::Index j = 0; j < M; ++j) {
        const WeightNoise n = WeightNoise::draw(bnn, rng);
        for (std::size_t l = 0; l < W.size(); ++l) {
          W[l] = bnn.W_mu[l] + sW[l].cwiseProduct(n.W[l]);
          b[l] = bnn.b_mu[l] + sb[l].cwiseProduct(n.b[l]);
        }
        const Matrix heads = mlp_eval(Xs, W, b, arch.activation);
        Matrix y(N, d);
        for (Eigen::Index i = 0; i < N; ++i)
          for (Eigen::Index k = 0; k < d; ++k) {
            const double hs = std::clamp(heads(i, d + k), kSampleLogVarLo, kLogVarClampHi);
            y(i, k) = heads(i, k) + z(rng) * std::exp(0.5 * hs);
          }
        out.push_back(y_std.invert(y));
      }
      break;
    }
    case PredictorKind::gp: {
      if (gp.size() != static_cast<std::size_t>(d)) throw ContractError("predict_samples: GP is not fitted");
      const Matrix Xs = x_std.apply(X);
      Matrix mean(N, d), sd(N, d);
      for (Eigen::Index k = 0; k < d; ++k) {
        Vector m, v;
        gp[static_cast<std::size_t>(k)].predict(Xs, m, v);
        mean.col(k) = m;
        sd.col(k) = v.cwiseSqrt();
      }
      for (Eigen::Index j = 0; j < M; ++j) {
        Matrix y(N, d);
        for (Eigen::Index i = 0; i < N; ++i)
          for (Eigen::Index k = 0; k < d; ++k) y(i, k) = mean(i, k) + sd(i, k) * z(rng);
        out.push_back(y_std.invert(y));
      }
      break;
    }
  }
  for (const auto& m : out)
    if (!m.allFinite()) throw NumericError("predict_samples: non-finite sample");
  return out;
}

Matrix Predictor::predict_samples(const Vector& x, Eigen::Index M, Rng& rng) const {
  const auto draws = predict_samples_batch(x.transpose(), M, rng);
  Matrix out(M, output_dim());
  for (Eigen::Index j = 0; j < M; ++j) out.row(j) = draws[static_cast<std::size_t>(j)].row(0);
  return out;
}

Matrix Predictor::predict_mean(const Matrix& X) const {
  if (X.cols() != input_dim()) throw DimensionError("predict_mean: input width mismatch");
  const Matrix Xs = x_std.apply(X);
  switch (kind) {
    case PredictorKind::ann:
      return y_std.invert(mlp_eval(Xs, ann.W, ann.b, arch.activation));
    case PredictorKind::bnn:
      return y_std.invert(mlp_eval(Xs, bnn.W_mu, bnn.b_mu, arch.activation).leftCols(output_dim()));
    case PredictorKind::gp: {
      Matrix mean(X.rows(), output_dim());
      for (Eigen::Index k = 0; k < output_dim(); ++k) {
        Vector m, v;
        gp[static_cast<std::size_t>(k)].predict(Xs, m, v);
        mean.col(k) = m;
      }
      return y_std.invert(mean);
    }
  }
  throw ContractError("predict_mean: unknown predictor");
}

Vector Predictor::predict_quantile(const Matrix& X, double q, Eigen::Index M, Rng& rng) const {
  if (output_dim() != 1) throw ContractError("predict_quantile: scalar outputs only");
  const auto draws = predict_samples_batch(X, M, rng);
  const auto k = static_cast<std::size_t>(std::clamp<double>(std::ceil(static_cast<double>(M) * q - 1e-9), 1.0,
                                                              static_cast<double>(M)));
  Vector out(X.rows());
  std::vector<double> col(static_cast<std::size_t>(M));
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index j = 0; j < M; ++j) col[static_cast<std::size_t>(j)] = draws[static_cast<std::size_t>(j)](i, 0);
    std::nth_element(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(k - 1), col.end());
    out[i] = col[k - 1];
  }
  return out;
}

}  // namespace dfl
