#include "doctest.h"

#include "dfl/datagen.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

using namespace dfl;

namespace {

struct Moments {
  double mean, var, skew, exkurt;
};

Moments moments(const Eigen::Ref<const Vector>& v) {
  const double n = static_cast<double>(v.size());
  const double mu = v.mean();
  const Eigen::ArrayXd c = v.array() - mu;
  const double m2 = c.square().sum() / n;
  const double m3 = c.cube().sum() / n;
  const double m4 = c.square().square().sum() / n;
  return {mu, m2, m3 / std::pow(m2, 1.5), m4 / (m2 * m2) - 3.0};
}

double quantile_of(Vector v, double q) {
  std::sort(v.data(), v.data() + v.size());
  return v[static_cast<Eigen::Index>(q * static_cast<double>(v.size() - 1))];
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dfl_test_" + name);
}

}  // namespace

TEST_CASE("NV1: noiseless variant, heteroscedasticity, input density") {
  const GeneratedData quiet = gen_nv1({200, 50, 50, 1}, {0.0, 1.0});
  for (Eigen::Index i = 0; i < quiet.train.size(); ++i) {
    CHECK(quiet.train.Y(i, 0) == nv_trend(quiet.train.X(i, 0)));
  }
  CHECK(quiet.train.size() == 200);
  CHECK(quiet.val.size() == 50);
  CHECK(quiet.test.size() == 50);

  const GeneratedData big = gen_nv1({100000, 10, 10, 2});
  std::vector<double> lo, hi;
  int dense = 0;
  for (Eigen::Index i = 0; i < big.train.size(); ++i) {
    const double x = big.train.X(i, 0);
    dense += x <= 1.0;
    // Residual from the trend isolates the noise.
    const double r = big.train.Y(i, 0) - nv_trend(x);
    if (x <= 0.2) lo.push_back(r);
    if (x >= 1.8) hi.push_back(r);
  }
  auto sd = [](const std::vector<double>& v) {
    return std::sqrt(moments(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()))).var);
  };
  CHECK(sd(hi) / sd(lo) > 2.0);
  CHECK(std::abs((dense / 100000.0) - (0.8)) <= 0.02);
  CHECK(std::abs((1.0 - dense / 100000.0) - (0.2)) <= 0.02);
}

TEST_CASE("NV2: symmetric, bimodal, collapses with m = 0") {
  const GeneratedData d = gen_nv2({10, 10, 10, 3});
  const Vector x = Vector::Constant(1, 1.5);
  const Matrix draws = true_conditional_samples(x, d.noise.get(), 100000, 5);
  CHECK(std::abs(moments(draws.col(0)).skew) <= 0.05);

  // Gaussian kernel density on a grid; report local maxima.
  const double bw = 0.4;
  std::vector<double> grid, dens;
  for (double y = nv_trend(1.5) - 14; y <= nv_trend(1.5) + 14; y += 0.1) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < draws.rows(); i += 10) acc += std::exp(-0.5 * std::pow((y - draws(i, 0)) / bw, 2));
    grid.push_back(y);
    dens.push_back(acc);
  }
  std::vector<double> modes;
  for (std::size_t i = 1; i + 1 < dens.size(); ++i)
    if (dens[i] > dens[i - 1] && dens[i] >= dens[i + 1] && dens[i] > 0.2 * *std::max_element(dens.begin(), dens.end()))
      modes.push_back(grid[i]);
  REQUIRE(modes.size() == 2);
  CHECK(std::abs((modes[1] - modes[0]) - (2 * nv2_mode_offset(1.5))) <= 0.5);

  const GeneratedData flat = gen_nv2({10, 10, 10, 3}, {1.0, 0.0});
  const Matrix f = true_conditional_samples(x, flat.noise.get(), 100000, 5);
  const Moments m = moments(f.col(0));
  CHECK(std::abs(m.exkurt) <= 0.1);  // a two-mode mixture of this kind has strongly negative kurtosis
  CHECK(std::sqrt(m.var) == doctest::Approx(kNv2ModeNoise).epsilon(0.02));
  CHECK(moments(draws.col(0)).exkurt < -1.0);
}

TEST_CASE("NV quantile accessor agrees with sampling") {
  const GeneratedData d = gen_nv1({10, 10, 10, 0});
  const Vector x = Vector::Constant(1, 1.0);
  const Matrix draws = true_conditional_samples(x, d.noise.get(), 100000, 17);
  const boost::math::normal_distribution<double> n;
  const double analytic = nv_trend(1.0) + nv1_spread(1.0) * boost::math::quantile(n, 0.1);
  CHECK(std::abs(quantile_of(draws.col(0), 0.1) - analytic) <= 0.05);
  CHECK(*d.noise->quantile(x, 0.1) == doctest::Approx(analytic).epsilon(1e-12));

  const GeneratedData d2 = gen_nv2({10, 10, 10, 0});
  const Matrix draws2 = true_conditional_samples(x, d2.noise.get(), 100000, 17);
  CHECK(std::abs(quantile_of(draws2.col(0), 0.1) - *d2.noise->quantile(x, 0.1)) <= 0.05);
}

TEST_CASE("NVQP: determinism, uniform kurtosis, negative fraction") {
  const GeneratedData a = gen_nvqp({300, 50, 50, 9}, {0.0, 1.0});
  const GeneratedData b = gen_nvqp({300, 50, 50, 9}, {0.0, 1.0});
  CHECK(a.train.X == b.train.X);
  CHECK(a.train.Y == b.train.Y);
  CHECK(a.train.X.cols() == 4);
  CHECK(a.train.Y.cols() == 6);
  CHECK(a.train.X.cwiseAbs().maxCoeff() <= 1.0);

  const GeneratedData d = gen_nvqp({4000, 2000, 2000, 1});
  const Vector x = d.train.X.row(0).transpose();
  const Matrix draws = true_conditional_samples(x, d.noise.get(), 200000, 3);
  for (Eigen::Index j : {1, 4}) CHECK(std::abs((moments(draws.col(j)).exkurt) - (-1.2)) <= 0.1);
  const double neg = (d.train.Y.array() < 0.0).cast<double>().mean();
  CHECK(neg <= 0.02);
}

TEST_CASE("POP: bounded location, per-asset means, requested width") {
  const GeneratedData d = gen_pop({1500, 900, 1500, 4});
  CHECK(d.train.Y.cols() == 15);
  CHECK(gen_pop({20, 10, 10, 4}, 7).train.Y.cols() == 7);
  CHECK(d.train.X.cols() == 3);
  for (Eigen::Index i = 0; i < 50; ++i) {
    CHECK(d.noise->location(d.test.X.row(i).transpose()).cwiseAbs().maxCoeff() <= 0.05);
  }
  // Analytic mean by midpoint quadrature over the input cube.
  const int g = 40;
  Vector analytic = Vector::Zero(15);
  for (int a = 0; a < g; ++a)
    for (int b = 0; b < g; ++b)
      for (int c = 0; c < g; ++c) {
        const Vector x = (Vector(3) << -1 + (2 * a + 1.0) / g, -1 + (2 * b + 1.0) / g, -1 + (2 * c + 1.0) / g).finished();
        analytic += d.noise->location(x);
      }
  analytic /= g * g * g;
  const Vector mean = d.train.Y.colwise().mean().transpose();
  for (Eigen::Index j = 0; j < 15; ++j) {
    const double se = std::sqrt(moments(d.train.Y.col(j)).var / static_cast<double>(d.train.size()));
    CHECK(std::abs(mean[j] - analytic[j]) <= 3 * se + 1e-5);
  }
}

TEST_CASE("true_conditional_samples: noiseless, determinism, missing model") {
  const GeneratedData q = gen_nv1({10, 10, 10, 0}, {0.0, 1.0});
  const Vector x = Vector::Constant(1, 0.7);
  const Matrix s = true_conditional_samples(x, q.noise.get(), 20, 1);
  CHECK(s.rows() == 20);
  CHECK((s.array() == nv_trend(0.7)).all());
  const GeneratedData d = gen_nvqp({10, 10, 10, 0});
  const Vector x4 = d.train.X.row(0).transpose();
  CHECK(true_conditional_samples(x4, d.noise.get(), 50, 7) == true_conditional_samples(x4, d.noise.get(), 50, 7));
  CHECK_THROWS_AS(true_conditional_samples(x, nullptr, 5, 1), ContractError);
}

TEST_CASE("splits partition the pool and generation is seed-deterministic") {
  const GeneratedData a = gen_nv1({300, 200, 100, 11});
  std::set<double> xs;
  for (const Dataset* s : {&a.train, &a.val, &a.test})
    for (Eigen::Index i = 0; i < s->size(); ++i) xs.insert(s->X(i, 0));
  CHECK(xs.size() == 600);
  const GeneratedData b = gen_nv1({300, 200, 100, 11});
  CHECK(a.test.Y == b.test.Y);
  CHECK(a.val.X == b.val.X);
  const GeneratedData c = gen_nv1({300, 200, 100, 12});
  CHECK(a.train.X != c.train.X);
  CHECK(a.train.generator != nullptr);
  CHECK_THROWS_AS(gen_nv1({0, 1, 1, 0}), ContractError);
}

TEST_CASE("CSV ingestion and export") {
  const auto path = temp_file("two_rows.csv");
  {
    std::ofstream f(path);
    f << "x0,x1,y0\n1.5,2,3\n-4,5e-3,6\n";
  }
  const Dataset d = load_csv(path, 2, 1);
  CHECK(d.size() == 2);
  CHECK(d.X(1, 1) == 5e-3);
  CHECK(d.Y(1, 0) == 6.0);
  CHECK(d.generator == nullptr);
  try {
    load_csv(path, 2, 2);
    FAIL("expected an error");
  } catch (const CsvError& e) {
    CHECK(std::string(e.what()).find("y1") != std::string::npos);
  }
  {
    std::ofstream f(path);
    f << "x0,y0\n1,2\n3,oops\n";
  }
  try {
    load_csv(path, 1, 1);
    FAIL("expected an error");
  } catch (const CsvError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  {
    std::ofstream f(path);
    f << "x0,y0\n1,2,3\n";
  }
  CHECK_THROWS_AS(load_csv(path, 1, 1), CsvError);

  const GeneratedData g = gen_pop({40, 10, 10, 1}, 4);
  write_csv(path, g.train);
  const Dataset back = load_csv(path, 3, 4);
  CHECK((back.X - g.train.X).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((back.Y - g.train.Y).cwiseAbs().maxCoeff() <= 1e-12);
  std::filesystem::remove(path);

  const GeneratedData chrono = split_dataset(back, 20, 10, false, 0);
  CHECK(chrono.train.X.row(0) == back.X.row(0));
  CHECK(chrono.test.X.row(9) == back.X.row(39));
}
