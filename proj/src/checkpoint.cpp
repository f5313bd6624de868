#include "dfl/predictors.hpp"

#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>

// Text checkpoint, one token stream:
//   dfl-checkpoint <version>
//   kind <ann|bnn|gp>  activation <relu|tanh>
//   arch <d_x> <d_out> <n_hidden> <widths...>
//   prior <sigma_p>
//   standardizer x <n> <mean...> <scale...>   (same for y)
//   matrices as "<tag> <rows> <cols> <values row-major>"
//   gp: "gp <count>" then per output "model <l> <s2> <noise> <jitter> <lml>"
//       followed by its X matrix and y vector; the Cholesky factor is
//       recomputed on load.
//   end

namespace dfl {

namespace {

void put_matrix(std::ostream& os, const char* tag, const Matrix& m) {
  os << tag << ' ' << m.rows() << ' ' << m.cols();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) os << ' ' << m(r, c);
  os << '\n';
}

void expect(std::istream& is, const std::string& token) {
  std::string got;
  if (!(is >> got) || got != token) throw CheckpointError("checkpoint: expected '" + token + "', got '" + got + "'");
}

Matrix get_matrix(std::istream& is, const char* tag) {
  expect(is, tag);
  Eigen::Index r = 0, c = 0;
  if (!(is >> r >> c) || r < 0 || c < 0) throw CheckpointError(std::string("checkpoint: bad shape for ") + tag);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      if (!(is >> m(i, j))) throw CheckpointError(std::string("checkpoint: truncated ") + tag);
  return m;
}

void put_layers(std::ostream& os, const char* tag, const std::vector<Matrix>& ms) {
  for (const auto& m : ms) put_matrix(os, tag, m);
}

std::vector<Matrix> get_layers(std::istream& is, const char* tag, std::size_t n) {
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < n; ++l) out.push_back(get_matrix(is, tag));
  return out;
}

}  // namespace

void save_checkpoint(std::ostream& os, const Predictor& p) {
  os << std::setprecision(17);
  os << "dfl-checkpoint " << kCheckpointVersion << '\n';
  os << "kind " << to_string(p.kind) << " activation " << (p.arch.activation == Activation::relu ? "relu" : "tanh")
     << '\n';
  os << "arch " << p.arch.input_dim << ' ' << p.arch.output_dim << ' ' << p.arch.hidden.size();
  for (auto w : p.arch.hidden) os << ' ' << w;
  os << "\nprior " << p.prior.sigma_p << '\n';
  put_matrix(os, "x_mean", p.x_std.mean.transpose());
  put_matrix(os, "x_scale", p.x_std.scale.transpose());
  put_matrix(os, "y_mean", p.y_std.mean.transpose());
  put_matrix(os, "y_scale", p.y_std.scale.transpose());
  switch (p.kind) {
    case PredictorKind::ann:
      put_layers(os, "W", p.ann.W);
      put_layers(os, "b", p.ann.b);
      break;
    case PredictorKind::bnn:
      put_layers(os, "W_mu", p.bnn.W_mu);
      put_layers(os, "W_rho", p.bnn.W_rho);
      put_layers(os, "b_mu", p.bnn.b_mu);
      put_layers(os, "b_rho", p.bnn.b_rho);
      break;
    case PredictorKind::gp:
      os << "gp " << p.gp.size() << '\n';
      for (const auto& g : p.gp) {
        os << "model " << g.lengthscale << ' ' << g.signal_var << ' ' << g.noise_var << ' ' << g.jitter << ' '
           << g.log_marginal << '\n';
        put_matrix(os, "X", g.X);
        put_matrix(os, "y", g.y.transpose());
      }
      break;
  }
  os << "end\n";
  if (!os) throw CheckpointError("checkpoint: write failed");
}

Predictor load_checkpoint(std::istream& is) {
  expect(is, "dfl-checkpoint");
  int version = 0;
  if (!(is >> version) || version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  Predictor p;
  std::string kind, act;
  expect(is, "kind");
  is >> kind;
  expect(is, "activation");
  is >> act;
  if (kind == "ann") p.kind = PredictorKind::ann;
  else if (kind == "bnn") p.kind = PredictorKind::bnn;
  else if (kind == "gp") p.kind = PredictorKind::gp;
  else throw CheckpointError("checkpoint: unknown kind '" + kind + "'");
  if (act != "relu" && act != "tanh") throw CheckpointError("checkpoint: unknown activation '" + act + "'");
  p.arch.activation = act == "relu" ? Activation::relu : Activation::tanh;
  expect(is, "arch");
  std::size_t nh = 0;
  is >> p.arch.input_dim >> p.arch.output_dim >> nh;
  p.arch.hidden.resize(nh);
  for (auto& w : p.arch.hidden) is >> w;
  expect(is, "prior");
  is >> p.prior.sigma_p;
  if (!is) throw CheckpointError("checkpoint: malformed header");
  p.x_std.mean = get_matrix(is, "x_mean").transpose();
  p.x_std.scale = get_matrix(is, "x_scale").transpose();
  p.y_std.mean = get_matrix(is, "y_mean").transpose();
  p.y_std.scale = get_matrix(is, "y_scale").transpose();
  const std::size_t L = p.arch.num_layers();
  switch (p.kind) {
    case PredictorKind::ann:
      p.ann.W = get_layers(is, "W", L);
      p.ann.b = get_layers(is, "b", L);
      p.ann.check(p.arch);
      break;
    case PredictorKind::bnn:
      p.bnn.W_mu = get_layers(is, "W_mu", L);
      p.bnn.W_rho = get_layers(is, "W_rho", L);
      p.bnn.b_mu = get_layers(is, "b_mu", L);
      p.bnn.b_rho = get_layers(is, "b_rho", L);
      p.bnn.check(p.arch);
      break;
    case PredictorKind::gp: {
      expect(is, "gp");
      std::size_t n = 0;
      is >> n;
      for (std::size_t k = 0; k < n; ++k) {
        GPModel g;
        expect(is, "model");
        is >> g.lengthscale >> g.signal_var >> g.noise_var >> g.jitter >> g.log_marginal;
        g.X = get_matrix(is, "X");
        g.y = get_matrix(is, "y").transpose();
        const Eigen::Index m = g.X.rows();
        Matrix K(m, m);
        for (Eigen::Index i = 0; i < m; ++i)
          for (Eigen::Index j = 0; j < m; ++j)
            K(i, j) = g.signal_var * std::exp(-(g.X.row(i) - g.X.row(j)).squaredNorm() / (2 * g.lengthscale * g.lengthscale));
        K.diagonal().array() += g.noise_var + g.jitter;
        Eigen::LLT<Matrix> llt(K);
        if (llt.info() != Eigen::Success) throw CheckpointError("checkpoint: stored GP kernel is not positive definite");
        g.chol_L = llt.matrixL();
        g.alpha = llt.solve(g.y);
        p.gp.push_back(std::move(g));
      }
      break;
    }
  }
  expect(is, "end");
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const Predictor& p) {
  std::ofstream os(path);
  if (!os) throw CheckpointError("cannot write " + path.string());
  save_checkpoint(os, p);
}

Predictor load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw CheckpointError("cannot open " + path.string());
  return load_checkpoint(is);
}

}  // namespace dfl
