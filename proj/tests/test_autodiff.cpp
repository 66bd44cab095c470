#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "epio/gradcheck.hpp"

#include <cmath>

using namespace epio;
using ad::Tape;
using ad::Var;
using V = Var<double>;
using Vs = std::vector<V>;

namespace {

Matrix<double> randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Matrix<double> positive(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 2.0);
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

template <typename F>
void expect_grad(const char* name, F&& f, const std::vector<Matrix<double>>& xs, double tol = 1e-6) {
  INFO(name);
  const GradCheckResult r = grad_check(f, xs, 99);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_CASE("half squared norm has gradient equal to its argument") {
  std::mt19937_64 rng(1);
  const Matrix<double> theta = randn(3, 4, rng);
  Tape<double> tape;
  V x = tape.variable(theta);
  V loss = ad::scale(ad::sum(ad::square(x)), 0.5);
  tape.backward(loss);
  CHECK((tape.grad(x.id()) - theta).norm() < 1e-14);
}

TEST_CASE("evaluation tapes record no backward closures") {
  Tape<double> tape(false);
  ad::ParamSet<double> params{{"w", Matrix<double>::Identity(2, 2)}};
  V w = tape.param(params, "w");
  CHECK_FALSE(w.requires_grad());
  V y = ad::matmul(tape.constant(Matrix<double>::Ones(1, 2)), w);
  CHECK_FALSE(y.requires_grad());
  CHECK(tape.param(params, "w").id() == w.id());
  CHECK_THROWS_AS(tape.param(params, "missing"), std::out_of_range);
}

TEST_CASE("parameter gradients are collected by name") {
  Tape<double> tape;
  ad::ParamSet<double> params{{"a", Matrix<double>::Constant(1, 1, 3.0)}};
  V a = tape.param(params, "a");
  V loss = ad::sum(ad::mul(a, a));
  tape.backward(loss);
  ad::ParamSet<double> grads;
  tape.add_param_grads(grads);
  CHECK(grads.at("a")(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("elementwise and reduction ops pass finite differences") {
  std::mt19937_64 rng(2);
  const auto a = randn(3, 4, rng), b = randn(3, 4, rng), p = positive(3, 4, rng);
  expect_grad("matmul", [](Tape<double>&, const Vs& v) { return ad::matmul(v[0], ad::transpose(v[1])); }, {a, b});
  expect_grad("matmul_nt", [](Tape<double>&, const Vs& v) { return ad::matmul_nt(v[0], v[1]); }, {a, b});
  expect_grad("add/sub", [](Tape<double>&, const Vs& v) { return (v[0] + v[1]) - ad::scale(v[1], 3.0); }, {a, b});
  expect_grad("mul", [](Tape<double>&, const Vs& v) { return ad::mul(v[0], v[1]); }, {a, b});
  expect_grad("div", [](Tape<double>&, const Vs& v) { return ad::div(v[0], v[1]); }, {a, p});
  expect_grad("add_scalar", [](Tape<double>&, const Vs& v) { return ad::add_scalar(v[0], 2.0); }, {a});
  expect_grad("mul_scalar", [](Tape<double>&, const Vs& v) { return ad::mul_scalar(v[0], v[1]); },
              {a, randn(1, 1, rng)});
  expect_grad("add_row", [](Tape<double>&, const Vs& v) { return ad::add_row(v[0], v[1]); }, {a, randn(1, 4, rng)});
  expect_grad("repeat_rows", [](Tape<double>&, const Vs& v) { return ad::repeat_rows(v[0], 5); }, {randn(1, 4, rng)});
  expect_grad("leaky_relu", [](Tape<double>&, const Vs& v) { return ad::leaky_relu(v[0], 0.1); }, {a});
  expect_grad("exp", [](Tape<double>&, const Vs& v) { return ad::exp(v[0]); }, {a});
  expect_grad("log", [](Tape<double>&, const Vs& v) { return ad::log(v[0]); }, {p});
  expect_grad("sqrt", [](Tape<double>&, const Vs& v) { return ad::sqrt(v[0]); }, {p});
  expect_grad("abs", [](Tape<double>&, const Vs& v) { return ad::abs(v[0]); }, {a});
  expect_grad("square", [](Tape<double>&, const Vs& v) { return ad::square(v[0]); }, {a});
  expect_grad("sum", [](Tape<double>&, const Vs& v) { return ad::sum(v[0]); }, {a});
  expect_grad("mean", [](Tape<double>&, const Vs& v) { return ad::mean(v[0]); }, {a});
  expect_grad("mean_rows", [](Tape<double>&, const Vs& v) { return ad::mean_rows(v[0]); }, {a});
  expect_grad("sum_cols", [](Tape<double>&, const Vs& v) { return ad::sum_cols(v[0]); }, {a});
  expect_grad("softmax_rows", [](Tape<double>&, const Vs& v) { return ad::softmax_rows(v[0]); }, {a});
  expect_grad("cross3", [](Tape<double>&, const Vs& v) { return ad::cross3(v[0], v[1]); },
              {randn(1, 3, rng), randn(1, 3, rng)});
}

TEST_CASE("layout ops pass finite differences") {
  std::mt19937_64 rng(3);
  const auto a = randn(4, 6, rng), b = randn(4, 3, rng);
  expect_grad("concat_cols", [](Tape<double>&, const Vs& v) { return ad::concat_cols(Vs{v[0], v[1]}); }, {a, b});
  expect_grad("concat_rows", [](Tape<double>&, const Vs& v) { return ad::concat_rows(Vs{v[0], v[1]}); },
              {a, randn(2, 6, rng)});
  expect_grad("slice_cols", [](Tape<double>&, const Vs& v) { return ad::slice_cols(v[0], 1, 3); }, {a});
  expect_grad("slice_rows", [](Tape<double>&, const Vs& v) { return ad::slice_rows(v[0], 1, 2); }, {a});
  expect_grad("group_sum_cols", [](Tape<double>&, const Vs& v) { return ad::group_sum_cols(v[0], 3); }, {a});
  expect_grad("group_repeat_cols", [](Tape<double>&, const Vs& v) { return ad::group_repeat_cols(v[0], 3); }, {b});
  expect_grad("block_matmul", [](Tape<double>&, const Vs& v) { return ad::block_matmul(v[0], v[1], 3); },
              {a, randn(2, 5, rng)});
  expect_grad("rotate_blocks", [](Tape<double>&, const Vs& v) { return ad::rotate_blocks(v[0], v[1], 3); },
              {a, randn(3, 3, rng)});
  expect_grad("fourier_features", [](Tape<double>&, const Vs& v) { return ad::fourier_features(v[0], 3); },
              {randn(3, 2, rng, 0.3)});
  expect_grad("gather",
              [](Tape<double>&, const Vs& v) { return ad::gather(v[0], 2, 2, {0, 5, 5, 23}); }, {a});
}

TEST_CASE("layer_norm_rows passes finite differences and normalizes") {
  std::mt19937_64 rng(4);
  const auto x = randn(3, 5, rng), gamma = randn(1, 5, rng), beta = randn(1, 5, rng);
  expect_grad("layer_norm_rows",
              [](Tape<double>&, const Vs& v) { return ad::layer_norm_rows(v[0], v[1], v[2], 1e-6); },
              {x, gamma, beta});
  Tape<double> tape(false);
  V y = ad::layer_norm_rows(tape.constant(x), tape.constant(Matrix<double>::Ones(1, 5)),
                            tape.constant(Matrix<double>::Zero(1, 5)), 1e-6);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(y.value().row(i).mean()) < 1e-12);
    CHECK(y.value().row(i).squaredNorm() / 5.0 == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  std::mt19937_64 rng(5);
  Matrix<double> a = randn(4, 7, rng, 30.0);
  Tape<double> tape(false);
  const Matrix<double> s = ad::softmax_rows(tape.constant(a)).value();
  for (int i = 0; i < 4; ++i) CHECK(std::abs(s.row(i).sum() - 1.0) < 1e-12);
  a.array() += 1000.0;
  const Matrix<double> s2 = ad::softmax_rows(tape.constant(a)).value();
  CHECK((s - s2).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(s2.allFinite());
}

TEST_CASE("fourier_features layout") {
  Tape<double> tape(false);
  Matrix<double> x(1, 1);
  x << 0.0;
  const Matrix<double> pe = ad::fourier_features(tape.constant(x), 8).value();
  REQUIRE(pe.cols() == 17);
  CHECK(pe(0, 0) == 0.0);
  for (int k = 0; k < 8; ++k) {
    CHECK(pe(0, 1 + k) == 0.0);
    CHECK(pe(0, 9 + k) == 1.0);
  }
}

TEST_CASE("shape errors are reported") {
  Tape<double> tape;
  V a = tape.constant(Matrix<double>::Zero(2, 3));
  V b = tape.constant(Matrix<double>::Zero(3, 2));
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ad::group_sum_cols(a, 2), ShapeError);
  CHECK_THROWS_AS(tape.backward(a), ShapeError);
}

TEST_CASE("float and double tapes agree") {
  std::mt19937_64 rng(6);
  const Matrix<double> x = randn(3, 4, rng);
  Tape<double> td;
  Tape<float> tf;
  const Matrix<double> yd = ad::softmax_rows(ad::leaky_relu(td.constant(x), 0.1)).value();
  const Matrix<float> yf = ad::softmax_rows(ad::leaky_relu(tf.constant(Matrix<float>(x.cast<float>())), 0.1f)).value();
  CHECK((yd - yf.cast<double>()).cwiseAbs().maxCoeff() < 1e-6);
}
