#include "dfl/predictors.hpp"

#include <cmath>

namespace dfl {

void MLPArchitecture::validate() const {
  if (input_dim < 1 || output_dim < 1) throw ContractError("MLPArchitecture: dimensions must be positive");
  for (auto w : hidden)
    if (w < 1) throw ContractError("MLPArchitecture: hidden widths must be positive");
}

MLPWeights MLPWeights::init(const MLPArchitecture& arch, Rng& rng) {
  arch.validate();
  MLPWeights w;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(arch.layer_in(l)));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix W(arch.layer_in(l), arch.layer_out(l));
    Matrix b(1, arch.layer_out(l));
    for (Eigen::Index i = 0; i < W.size(); ++i) W(i) = u(rng);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = u(rng);
    w.W.push_back(std::move(W));
    w.b.push_back(std::move(b));
  }
  return w;
}

void MLPWeights::check(const MLPArchitecture& arch) const {
  if (W.size() != arch.num_layers() || b.size() != arch.num_layers()) throw DimensionError("MLP: wrong layer count");
  for (std::size_t l = 0; l < W.size(); ++l) {
    if (W[l].rows() != arch.layer_in(l) || W[l].cols() != arch.layer_out(l) || b[l].rows() != 1 ||
        b[l].cols() != arch.layer_out(l)) {
      throw DimensionError("MLP: layer " + std::to_string(l) + " has the wrong shape");
    }
  }
}

Matrix mlp_eval(const Matrix& X, const std::vector<Matrix>& W, const std::vector<Matrix>& b, Activation act) {
  Matrix h = X;
  for (std::size_t l = 0; l < W.size(); ++l) {
    if (h.cols() != W[l].rows()) throw DimensionError("mlp_eval: input width does not match layer");
    Matrix z = h * W[l];
    z.rowwise() += b[l].row(0);
    if (l + 1 < W.size()) {
      if (act == Activation::relu)
        z = z.cwiseMax(0.0);
      else
        z = z.array().tanh().matrix();
    }
    h = std::move(z);
  }
  if (!h.allFinite()) throw NumericError("mlp_eval: non-finite output");
  return h;
}

ad::Var mlp_forward(const ad::Var& X, std::span<const ad::Var> W, std::span<const ad::Var> b, Activation act) {
  if (W.size() != b.size() || W.empty()) throw DimensionError("mlp_forward: weight and bias lists differ");
  ad::Tape& tape = *X.tape();
  const ad::Var ones = tape.constant(Matrix::Ones(X.rows(), 1));
  ad::Var h = X;
  for (std::size_t l = 0; l < W.size(); ++l) {
    h = ad::matmul(h, W[l]) + ad::matmul(ones, b[l]);
    if (l + 1 < W.size()) h = act == Activation::relu ? ad::relu(h) : ad::tanh(h);
  }
  return h;
}

ad::Var ann_forward(ad::Tape& tape, const Vector& x, std::span<const ad::Var> W, std::span<const ad::Var> b,
                    const MLPArchitecture& arch) {
  if (x.size() != arch.input_dim) throw DimensionError("ann_forward: input has the wrong dimension");
  return ad::transpose(mlp_forward(tape.constant(x.transpose()), W, b, arch.activation));
}

Standardizer Standardizer::fit(const Matrix& data) {
  if (data.rows() < 1) throw ContractError("Standardizer: no rows");
  Standardizer s;
  s.mean = data.colwise().mean().transpose();
  s.scale.resize(data.cols());
  for (Eigen::Index c = 0; c < data.cols(); ++c) {
    const double var = (data.col(c).array() - s.mean[c]).square().mean();
    s.scale[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Standardizer Standardizer::identity(Eigen::Index dim) { return {Vector::Zero(dim), Vector::Ones(dim)}; }

Matrix Standardizer::apply(const Matrix& data) const {
  if (data.cols() != mean.size()) throw DimensionError("Standardizer: width mismatch");
  return ((data.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
}

Matrix Standardizer::invert(const Matrix& data) const {
  if (data.cols() != mean.size()) throw DimensionError("Standardizer: width mismatch");
  return ((data.array().rowwise() * scale.transpose().array()).matrix().rowwise() + mean.transpose());
}

}  // namespace dfl
