#include "dfl/datagen.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace dfl {

namespace {

constexpr std::uint64_t kStructureSeed = 20240611;

double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

double std_normal_quantile(double q) {
  static const boost::math::normal_distribution<double> n(0.0, 1.0);
  return boost::math::quantile(n, q);
}

double std_normal_cdf(double x) {
  static const boost::math::normal_distribution<double> n(0.0, 1.0);
  return boost::math::cdf(n, x);
}

double nvqp_gaussian_spread(const Vector& x) { return 0.5 + 0.75 * (1.0 + x[0]); }
constexpr double kUniformHalfWidth = 2.0784609690826525;  // 1.2 * sqrt(3)
constexpr double kBimodalOffset = 2.5;
constexpr double kBimodalNoise = 0.5;

double pop_spread(const Vector& x) { return 0.02 * (1.0 + std::abs(x[0])); }

Vector sample_input(const NoiseModel& nm, Rng& rng) {
  Vector x(nm.input_dim);
  if (nm.kind == NoiseModel::Kind::heteroscedastic_gaussian || nm.kind == NoiseModel::Kind::multimodal_gaussian) {
    x[0] = nv_sample_input(rng);
  } else {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : x) v = u(rng);
  }
  return x;
}

GeneratedData generate(const SplitSpec& split, std::shared_ptr<const NoiseModel> nm) {
  split.validate();
  const Eigen::Index total = split.n_train + split.n_val + split.n_test;
  Rng rng(split.seed);
  Dataset pool;
  pool.X.resize(total, nm->input_dim);
  pool.Y.resize(total, nm->output_dim);
  for (Eigen::Index i = 0; i < total; ++i) {
    const Vector x = sample_input(*nm, rng);
    pool.X.row(i) = x.transpose();
    pool.Y.row(i) = nm->sample(x, 1, rng).row(0);
  }
  pool.generator = nm;
  GeneratedData out = split_dataset(pool, split.n_train, split.n_val, true, split.seed ^ 0x9e3779b97f4a7c15ULL);
  return out;
}

}  // namespace

double nv_trend(double x) { return 10.0 + 5.0 * x + 3.0 * std::sin(4.0 * x); }
double nv1_spread(double x) { return 1.0 + 2.0 * x; }
double nv2_mode_offset(double x) { return 4.0 + 2.0 * x; }

double nv_sample_input(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double pick = u(rng);
  const double pos = u(rng);
  return pick < 0.8 ? pos : 1.0 + pos;
}

Vector NoiseModel::location(const Vector& x) const {
  if (x.size() != input_dim) throw DimensionError("noise model: input has wrong dimension");
  switch (kind) {
    case Kind::heteroscedastic_gaussian:
    case Kind::multimodal_gaussian:
      return Vector::Constant(1, nv_trend(x[0]));
    case Kind::mixed_per_output: {
      const Vector h = (hidden_weights * x + hidden_bias).array().tanh();
      Vector y = output_weights * h + output_bias;
      for (auto& v : y) v = 10.0 * softplus(v);
      return y;
    }
    case Kind::returns:
      return 0.05 * (loadings * x + offsets).array().tanh().matrix();
  }
  throw ContractError("noise model: unknown kind");
}

Matrix NoiseModel::sample(const Vector& x, Eigen::Index M, Rng& rng) const {
  if (M < 0) throw DimensionError("noise model: negative sample count");
  const Vector loc = location(x);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  Matrix out(M, output_dim);
  for (Eigen::Index r = 0; r < M; ++r) {
    switch (kind) {
      case Kind::heteroscedastic_gaussian:
        out(r, 0) = std::max(0.0, loc[0] + noise_scale * nv1_spread(x[0]) * z(rng));
        break;
      case Kind::multimodal_gaussian: {
        const double s = coin(rng) ? 1.0 : -1.0;
        out(r, 0) = loc[0] + noise_scale * (s * mode_scale * nv2_mode_offset(x[0]) + kNv2ModeNoise * z(rng));
        break;
      }
      case Kind::mixed_per_output:
        for (Eigen::Index j = 0; j < output_dim; ++j) {
          double e = 0.0;
          switch (j % 3) {
            case 0: e = nvqp_gaussian_spread(x) * z(rng); break;
            case 1: e = kUniformHalfWidth * u(rng); break;
            default: {
              const double s = coin(rng) ? 1.0 : -1.0;
              e = s * mode_scale * kBimodalOffset + kBimodalNoise * z(rng);
            }
          }
          out(r, j) = loc[j] + noise_scale * e;
        }
        break;
      case Kind::returns: {
        const double sd = pop_spread(x);
        for (Eigen::Index j = 0; j < output_dim; ++j) out(r, j) = loc[j] + noise_scale * sd * z(rng);
        break;
      }
    }
  }
  return out;
}

std::optional<double> NoiseModel::quantile(const Vector& x, double q) const {
  if (!(q > 0.0 && q < 1.0)) throw ContractError("noise model: quantile level must lie in (0, 1)");
  const double g = location(x)[0];
  if (kind == Kind::heteroscedastic_gaussian) {
    return std::max(0.0, g + noise_scale * nv1_spread(x[0]) * std_normal_quantile(q));
  }
  if (kind != Kind::multimodal_gaussian) return std::nullopt;
  if (noise_scale == 0.0) return g;
  const double s = noise_scale * kNv2ModeNoise;
  const double m = noise_scale * mode_scale * nv2_mode_offset(x[0]);
  auto cdf = [&](double y) { return 0.5 * std_normal_cdf((y - g - m) / s) + 0.5 * std_normal_cdf((y - g + m) / s); };
  double lo = g - m - 12 * s, hi = g + m + 12 * s;
  for (int it = 0; it < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(g)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (cdf(mid) < q ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

void Dataset::validate() const {
  if (X.rows() != Y.rows()) throw DimensionError("dataset: X and Y row counts differ");
  if (!X.allFinite() || !Y.allFinite()) throw NumericError("dataset: non-finite entry");
}

Dataset Dataset::rows(const std::vector<Eigen::Index>& idx) const {
  Dataset out;
  out.X.resize(static_cast<Eigen::Index>(idx.size()), X.cols());
  out.Y.resize(static_cast<Eigen::Index>(idx.size()), Y.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= size()) throw DimensionError("dataset: row index out of range");
    out.X.row(static_cast<Eigen::Index>(i)) = X.row(idx[i]);
    out.Y.row(static_cast<Eigen::Index>(i)) = Y.row(idx[i]);
  }
  out.generator = generator;
  return out;
}

Dataset Dataset::head(Eigen::Index n) const {
  n = std::min(n, size());
  return Dataset{X.topRows(n), Y.topRows(n), generator};
}

void SplitSpec::validate() const {
  if (n_train <= 0 || n_val <= 0 || n_test <= 0) throw ContractError("split sizes must be positive");
}

GeneratedData gen_nv1(const SplitSpec& split, const GeneratorOptions& opts) {
  auto nm = std::make_shared<NoiseModel>();
  nm->kind = NoiseModel::Kind::heteroscedastic_gaussian;
  nm->noise_scale = opts.noise_scale;
  nm->mode_scale = opts.mode_scale;
  return generate(split, nm);
}

GeneratedData gen_nv2(const SplitSpec& split, const GeneratorOptions& opts) {
  auto nm = std::make_shared<NoiseModel>();
  nm->kind = NoiseModel::Kind::multimodal_gaussian;
  nm->noise_scale = opts.noise_scale;
  nm->mode_scale = opts.mode_scale;
  return generate(split, nm);
}

GeneratedData gen_nvqp(const SplitSpec& split, const GeneratorOptions& opts) {
  auto nm = std::make_shared<NoiseModel>();
  nm->kind = NoiseModel::Kind::mixed_per_output;
  nm->input_dim = 4;
  nm->output_dim = 6;
  nm->noise_scale = opts.noise_scale;
  nm->mode_scale = opts.mode_scale;
  const Eigen::Index h = 6;
  Rng rng(kStructureSeed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  nm->hidden_weights.resize(h, 4);
  for (Eigen::Index i = 0; i < nm->hidden_weights.size(); ++i) nm->hidden_weights(i) = z(rng);
  nm->hidden_bias.resize(h);
  for (auto& v : nm->hidden_bias) v = u(rng);
  nm->output_weights.resize(6, h);
  for (Eigen::Index i = 0; i < nm->output_weights.size(); ++i) nm->output_weights(i) = 0.5 * z(rng);
  nm->output_bias = Vector::Constant(6, 0.8);
  return generate(split, nm);
}

GeneratedData gen_pop(const SplitSpec& split, Eigen::Index d_y, const GeneratorOptions& opts) {
  if (d_y <= 0) throw ContractError("gen_pop: asset count must be positive");
  auto nm = std::make_shared<NoiseModel>();
  nm->kind = NoiseModel::Kind::returns;
  nm->input_dim = 3;
  nm->output_dim = d_y;
  nm->noise_scale = opts.noise_scale;
  nm->mode_scale = opts.mode_scale;
  nm->loadings.resize(d_y, 3);
  nm->offsets.resize(d_y);
  for (Eigen::Index j = 0; j < d_y; ++j) {
    // Per-asset stream: the first k assets do not depend on d_y.
    Rng rng(kStructureSeed + 1000 + static_cast<std::uint64_t>(j));
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_real_distribution<double> u(-0.3, 0.6);
    for (Eigen::Index c = 0; c < 3; ++c) nm->loadings(j, c) = z(rng);
    nm->offsets[j] = u(rng);
  }
  return generate(split, nm);
}

Matrix true_conditional_samples(const Vector& x, const NoiseModel* noise, Eigen::Index M_oracle, std::uint64_t seed) {
  if (!noise) throw ContractError("true_conditional_samples: dataset has no known generator");
  if (M_oracle <= 0) throw ContractError("true_conditional_samples: M_oracle must be positive");
  Rng rng(seed);
  return noise->sample(x, M_oracle, rng);
}

Dataset load_csv(const std::filesystem::path& path, Eigen::Index d_x, Eigen::Index d_y) {
  std::ifstream in(path);
  if (!in) throw CsvError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw CsvError(path.string() + ": empty file");
  auto split_line = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      cells.push_back(cell);
    }
    return cells;
  };
  const auto header = split_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  std::vector<std::size_t> xi, yi;
  for (Eigen::Index i = 0; i < d_x; ++i) {
    const std::string name = "x" + std::to_string(i);
    if (!col.count(name)) throw CsvError(path.string() + ": missing column " + name);
    xi.push_back(col[name]);
  }
  for (Eigen::Index i = 0; i < d_y; ++i) {
    const std::string name = "y" + std::to_string(i);
    if (!col.count(name)) throw CsvError(path.string() + ": missing column " + name);
    yi.push_back(col[name]);
  }
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw CsvError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                     " columns, got " + std::to_string(cells.size()));
    }
    std::vector<double> vals(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto& s = cells[c];
      const auto res = std::from_chars(s.data(), s.data() + s.size(), vals[c]);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw CsvError(path.string() + ":" + std::to_string(lineno) + ": cannot parse '" + s + "' in column " +
                       header[c]);
      }
    }
    rows.push_back(std::move(vals));
  }
  Dataset out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.X.resize(n, d_x);
  out.Y.resize(n, d_y);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index i = 0; i < d_x; ++i) out.X(r, i) = rows[r][xi[i]];
    for (Eigen::Index i = 0; i < d_y; ++i) out.Y(r, i) = rows[r][yi[i]];
  }
  out.validate();
  return out;
}

void write_csv(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (!f) throw CsvError("cannot write " + path.string());
  for (Eigen::Index i = 0; i < data.X.cols(); ++i) std::fprintf(f, "%sx%ld", i ? "," : "", static_cast<long>(i));
  for (Eigen::Index i = 0; i < data.Y.cols(); ++i)
    std::fprintf(f, "%sy%ld", (i || data.X.cols()) ? "," : "", static_cast<long>(i));
  std::fputc('\n', f);
  for (Eigen::Index r = 0; r < data.size(); ++r) {
    bool first = true;
    for (Eigen::Index i = 0; i < data.X.cols(); ++i, first = false) std::fprintf(f, "%s%.17g", first ? "" : ",", data.X(r, i));
    for (Eigen::Index i = 0; i < data.Y.cols(); ++i, first = false) std::fprintf(f, "%s%.17g", first ? "" : ",", data.Y(r, i));
    std::fputc('\n', f);
  }
  if (std::fclose(f) != 0) throw CsvError("error writing " + path.string());
}

GeneratedData split_dataset(const Dataset& all, Eigen::Index n_train, Eigen::Index n_val, bool shuffle,
                            std::uint64_t seed) {
  all.validate();
  if (n_train <= 0 || n_val < 0 || n_train + n_val >= all.size()) {
    throw ContractError("split_dataset: sizes leave no test rows");
  }
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(all.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  if (shuffle) {
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
  }
  const auto a = idx.begin();
  GeneratedData out;
  out.train = all.rows({a, a + n_train});
  out.val = all.rows({a + n_train, a + n_train + n_val});
  out.test = all.rows({a + n_train + n_val, idx.end()});
  out.noise = all.generator;
  return out;
}

}  // namespace dfl
