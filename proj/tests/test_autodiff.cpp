#include "doctest.h"

#include "dfl/autodiff.hpp"
#include "gradcheck.hpp"

#include <random>

using namespace dfl;
using dfl::testing::gradcheck;
using dfl::testing::uniform_matrix;

namespace {

Matrix scalar(double x) { return Matrix::Constant(1, 1, x); }

}  // namespace

TEST_CASE("record: elementary values") {
  ad::Tape t;
  const ad::Var x = t.parameter(scalar(3.0));
  CHECK(ad::square(x).scalar() == 9.0);
  CHECK(ad::relu(t.constant(scalar(-2.0))).scalar() == 0.0);

  Matrix A(2, 3);
  A << 1, 2, 3, 4, 5, 6;
  Matrix v(3, 1);
  v << -1, 0.5, 2;
  const ad::Var Av = ad::matmul(t.constant(A), t.constant(v));
  REQUIRE(Av.rows() == 2);
  REQUIRE(Av.cols() == 1);
  // Naive triple loop.
  for (int i = 0; i < 2; ++i) {
    double acc = 0.0;
    for (int j = 0; j < 3; ++j) acc += A(i, j) * v(j, 0);
    CHECK(Av.value()(i, 0) == doctest::Approx(acc).epsilon(1e-15));
  }
}

TEST_CASE("record: errors") {
  ad::Tape t;
  const ad::Var a = t.constant(Matrix::Ones(2, 3));
  const ad::Var b = t.constant(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(ad::matmul(a, a), DimensionError);
  CHECK_THROWS_AS(ad::add(a, b), DimensionError);
  CHECK_THROWS_AS(ad::exp(t.constant(scalar(1000.0))), NumericError);
  CHECK_THROWS_AS(ad::log(t.constant(scalar(0.0))), NumericError);
  CHECK_THROWS_AS(ad::slice(a, 1, 1, 2, 2), DimensionError);
  CHECK_THROWS_AS(t.backward(a), ContractError);

  ad::Tape other;
  const ad::Var c = other.constant(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(ad::add(a, c), ContractError);
}

TEST_CASE("backward: analytic scalar derivatives") {
  ad::Tape t;
  const ad::Var x = t.parameter(scalar(3.0));
  CHECK(t.backward(ad::square(x))[x](0, 0) == doctest::Approx(6.0));

  ad::Tape t2;
  const ad::Var y = t2.parameter(scalar(0.0));
  CHECK(t2.backward(ad::exp(y))[y](0, 0) == doctest::Approx(1.0));
}

TEST_CASE("backward: relu subgradient at zero is zero") {
  ad::Tape t;
  const ad::Var x = t.parameter(scalar(0.0));
  CHECK(t.backward(ad::relu(x))[x](0, 0) == 0.0);
}

TEST_CASE("backward: unreachable parameters get zero gradients") {
  ad::Tape t;
  const ad::Var x = t.parameter(scalar(2.0));
  const ad::Var unused = t.parameter(Matrix::Ones(2, 2));
  const ad::Gradients g = t.backward(ad::square(x));
  CHECK(g.size() == 2);
  CHECK(g[unused].isZero());
}

TEST_CASE("gradcheck: every built-in op on random inputs in [-2, 2]") {
  std::mt19937_64 rng(7);
  using testing::LossBuilder;
  const Matrix weights = uniform_matrix(rng, 3, 4, -1, 1);

  // Each op is composed with a fixed random projection so every output entry
  // contributes to the scalar.
  auto project = [&](ad::Tape& t, const ad::Var& y) {
    return ad::sum(ad::mul(y, t.constant(weights.topLeftCorner(y.rows(), y.cols()))));
  };

  const std::vector<std::pair<const char*, LossBuilder>> unary = {
      {"exp", [&](ad::Tape& t, const auto& p) { return project(t, ad::exp(p[0])); }},
      {"softplus", [&](ad::Tape& t, const auto& p) { return project(t, ad::softplus(p[0])); }},
      {"tanh", [&](ad::Tape& t, const auto& p) { return project(t, ad::tanh(p[0])); }},
      {"relu", [&](ad::Tape& t, const auto& p) { return project(t, ad::relu(p[0])); }},
      {"square", [&](ad::Tape& t, const auto& p) { return project(t, ad::square(p[0])); }},
      {"scale", [&](ad::Tape& t, const auto& p) { return project(t, ad::scale(p[0], -1.7)); }},
      {"shift", [&](ad::Tape& t, const auto& p) { return project(t, ad::shift(p[0], 0.3)); }},
      {"clamp", [&](ad::Tape& t, const auto& p) { return project(t, ad::clamp(p[0], -1.1, 1.3)); }},
      {"transpose",
       [&](ad::Tape& t, const auto& p) { return project(t, ad::transpose(ad::transpose(p[0]))); }},
      {"sum", [&](ad::Tape&, const auto& p) { return ad::square(ad::sum(p[0])); }},
      {"mean", [&](ad::Tape&, const auto& p) { return ad::square(ad::mean(p[0])); }},
      {"slice", [&](ad::Tape& t, const auto& p) { return project(t, ad::slice(p[0], 1, 1, 2, 2)); }},
  };
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix x = uniform_matrix(rng, 3, 3, -2, 2);
    for (const auto& [name, f] : unary) {
      CAPTURE(name);
      CHECK(gradcheck(f, {x}) <= 1e-5);
    }
    // Strictly positive domain for sqrt and log.
    const Matrix pos = uniform_matrix(rng, 3, 3, 0.2, 2);
    CHECK(gradcheck([&](ad::Tape& t, const auto& p) { return project(t, ad::sqrt(p[0])); }, {pos}) <= 1e-5);
    CHECK(gradcheck([&](ad::Tape& t, const auto& p) { return project(t, ad::log(p[0])); }, {pos}) <= 1e-5);

    const Matrix y = uniform_matrix(rng, 3, 3, -2, 2);
    const Matrix s = uniform_matrix(rng, 1, 1, -2, 2);
    const std::vector<std::pair<const char*, LossBuilder>> binary = {
        {"matmul", [&](ad::Tape& t, const auto& p) { return project(t, ad::matmul(p[0], p[1])); }},
        {"add", [&](ad::Tape& t, const auto& p) { return project(t, ad::add(p[0], p[1])); }},
        {"sub", [&](ad::Tape& t, const auto& p) { return project(t, ad::sub(p[0], p[1])); }},
        {"mul", [&](ad::Tape& t, const auto& p) { return project(t, ad::mul(p[0], p[1])); }},
        {"concat_rows",
         [&](ad::Tape& t, const auto& p) {
           const std::vector<ad::Var> parts{p[0], p[1]};
           return project(t, ad::slice(ad::concat_rows(parts), 2, 0, 3, 3));
         }},
        {"concat_cols",
         [&](ad::Tape& t, const auto& p) {
           const std::vector<ad::Var> parts{p[0], p[1]};
           return project(t, ad::slice(ad::concat_cols(parts), 0, 1, 3, 4));
         }},
    };
    for (const auto& [name, f] : binary) {
      CAPTURE(name);
      CHECK(gradcheck(f, {x, y}) <= 1e-5);
    }
    // Scalar-tensor broadcast.
    CHECK(gradcheck([&](ad::Tape& t, const auto& p) { return project(t, ad::mul(p[1], p[0])); }, {x, s}) <= 1e-5);
    CHECK(gradcheck([&](ad::Tape& t, const auto& p) { return project(t, ad::add(p[0], p[1])); }, {x, s}) <= 1e-5);
    CHECK(gradcheck([&](ad::Tape& t, const auto& p) { return project(t, ad::sub(p[1], p[0])); }, {x, s}) <= 1e-5);
  }
}

TEST_CASE("gradcheck: random 3-layer MLP loss") {
  std::mt19937_64 rng(11);
  const Matrix X = uniform_matrix(rng, 5, 3, -2, 2);
  const Matrix Y = uniform_matrix(rng, 5, 2, -2, 2);
  std::vector<Matrix> params;
  const int widths[] = {3, 6, 4, 2};
  for (int l = 0; l < 3; ++l) {
    params.push_back(uniform_matrix(rng, widths[l], widths[l + 1], -1, 1));
    params.push_back(uniform_matrix(rng, 1, widths[l + 1], -0.5, 0.5));
  }
  auto loss = [&](ad::Tape& t, const std::vector<ad::Var>& p) {
    ad::Var h = t.constant(X);
    const ad::Var ones = t.constant(Matrix::Ones(5, 1));
    for (int l = 0; l < 3; ++l) {
      h = ad::add(ad::matmul(h, p[2 * l]), ad::matmul(ones, p[2 * l + 1]));
      if (l < 2) h = ad::tanh(h);
    }
    return ad::mean(ad::square(ad::sub(h, t.constant(Y))));
  };
  CHECK(gradcheck(loss, params) <= 1e-5);
}

TEST_CASE("backward: linearity and determinism") {
  std::mt19937_64 rng(3);
  const Matrix x0 = uniform_matrix(rng, 2, 2, -2, 2);
  auto f = [](const ad::Var& x) { return ad::sum(ad::tanh(ad::matmul(x, x))); };
  auto g = [](const ad::Var& x) { return ad::sum(ad::softplus(x)); };

  auto grad_of = [&](auto build) {
    ad::Tape t;
    const ad::Var x = t.parameter(x0);
    return Matrix(t.backward(build(x))[x]);
  };
  const double a = 0.75, b = -2.5;
  const Matrix combined = grad_of([&](const ad::Var& x) { return ad::add(ad::scale(f(x), a), ad::scale(g(x), b)); });
  const Matrix separate = a * grad_of(f) + b * grad_of(g);
  CHECK((combined - separate).cwiseAbs().maxCoeff() <= 1e-14);

  const Matrix first = grad_of(f);
  const Matrix second = grad_of(f);
  CHECK(first == second);
}

TEST_CASE("register_custom: identity and doubling nodes") {
  const ad::CustomOp identity = ad::register_custom(
      "identity", [](std::span<const Matrix> in) { return in[0]; },
      [](std::span<const Matrix>, const Matrix&, const Matrix& g) { return std::vector<Matrix>{g}; });
  const ad::CustomOp twice = ad::register_custom(
      "twice", [](std::span<const Matrix> in) { return Matrix(2.0 * in[0]); },
      [](std::span<const Matrix>, const Matrix&, const Matrix& g) { return std::vector<Matrix>{2.0 * g}; });

  ad::Tape t;
  const ad::Var x = t.parameter(scalar(1.0));
  const ad::Var through = identity({x});
  CHECK(t.backward(ad::scale(through, 4.0))[x](0, 0) == doctest::Approx(4.0));

  ad::Tape t2;
  const ad::Var x2 = t2.parameter(scalar(1.0));
  const ad::Var y = twice({x2});
  // d/dx (2x)^2 = 8x = 8 at x = 1.
  CHECK(t2.backward(ad::square(y))[x2](0, 0) == doctest::Approx(8.0));
}

TEST_CASE("register_custom: wrong backward shape is a contract error") {
  const ad::CustomOp bad = ad::register_custom(
      "bad", [](std::span<const Matrix> in) { return in[0]; },
      [](std::span<const Matrix>, const Matrix&, const Matrix&) { return std::vector<Matrix>{Matrix::Ones(2, 2)}; });
  ad::Tape t;
  const ad::Var x = t.parameter(scalar(1.0));
  CHECK_THROWS_AS(t.backward(bad({x})), ContractError);
}
