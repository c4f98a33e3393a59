#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "composition_check.hpp"
#include "tdciv/array.hpp"
#include "tdciv/errors.hpp"
#include "tdciv/gradcheck.hpp"
#include "tdciv/optimizer.hpp"
#include "tdciv/rng.hpp"
#include "tdciv/tape.hpp"

using tdciv::ContractError;
using tdciv::DomainError;
using tdciv::NonFiniteError;
using tdciv::ProbeError;
using tdciv::Rng;
using tdciv::ShapeError;
using tdciv::ad::AdamConfig;
using tdciv::ad::AdamState;
using tdciv::ad::Array;
using tdciv::ad::BuiltFunction;
using tdciv::ad::Tape;

TEST_CASE("array basics") {
  Array a = Array::zeros(2, 3);
  CHECK(a.rank() == 2);
  CHECK(a.rows() == 2);
  CHECK(a.cols() == 3);
  CHECK(a.size() == 6);
  a.at(1, 2) = 5.0;
  CHECK(a[5] == 5.0);
  CHECK(a.shape_str() == "[2,3]");
  CHECK_THROWS_AS(Array::from_matrix(2, 2, {1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("forward primitives match hand values") {
  Tape t;
  Tape::Id x = t.input(Array::scalar(0.0));
  CHECK(t.value(t.sigmoid(x))[0] == 0.5);
  CHECK(t.value(t.tanh(x))[0] == 0.0);
  CHECK(t.value(t.softplus(x))[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  Tape::Id a = t.input(Array::zeros(2, 3));
  Tape::Id b = t.input(Array::zeros(3, 1));
  Tape::Id c = t.matmul(a, b);
  CHECK(t.value(c).rows() == 2);
  CHECK(t.value(c).cols() == 1);
  CHECK(t.value(c)[0] == 0.0);
  CHECK(t.value(c)[1] == 0.0);
}

TEST_CASE("shape and domain violations are rejected") {
  Tape t;
  Tape::Id a = t.input(Array::zeros(2, 3));
  Tape::Id b = t.input(Array::zeros(3, 2));
  CHECK_THROWS_AS(t.add(a, b), ShapeError);
  CHECK_THROWS_AS(t.matmul(a, a), ShapeError);

  Tape::Id z = t.input(Array::scalar(0.0));
  CHECK_THROWS_AS(t.log(z), DomainError);
  Tape::Id big = t.input(Array::scalar(710.0));
  CHECK_THROWS_AS(t.exp(big), DomainError);
}

TEST_CASE("softplus is stable at extremes") {
  Tape t;
  Tape::Id hi = t.input(Array::scalar(800.0));
  Tape::Id lo = t.input(Array::scalar(-800.0));
  CHECK(t.value(t.softplus(hi))[0] == 800.0);
  CHECK(t.value(t.softplus(lo))[0] == 0.0);
  Tape::Id s = t.sigmoid(t.input(Array::scalar(-800.0)));
  CHECK(t.value(s)[0] == 0.0);
}

TEST_CASE("concat and slice round trip") {
  Tape t;
  Tape::Id a = t.input(Array::from_matrix(2, 2, {1, 2, 3, 4}));
  Tape::Id b = t.input(Array::from_matrix(2, 1, {9, 8}));
  Tape::Id cc = t.concat_cols(a, b);
  CHECK(t.value(cc).cols() == 3);
  CHECK(t.value(cc).at(0, 2) == 9.0);
  CHECK(t.value(cc).at(1, 0) == 3.0);
  Tape::Id back = t.slice_cols(cc, 0, 2);
  CHECK(t.value(back) == t.value(a));
  CHECK_THROWS_AS(t.slice_cols(a, 1, 4), ShapeError);
}

TEST_CASE("affine equals matmul plus tiled bias") {
  Rng rng(11);
  Tape t;
  std::vector<double> xv(6), wv(12), bv(4);
  for (auto* v : {&xv, &wv, &bv})
    for (double& e : *v) e = rng.normal();
  Tape::Id x = t.input(Array::from_matrix(2, 3, xv));
  Tape::Id w = t.input(Array::from_matrix(3, 4, wv));
  Tape::Id b = t.input(Array::from_vector(bv));
  Tape::Id f = t.affine(x, w, b);
  Tape::Id g = t.add(t.matmul(x, w), t.tile_rows(b, 2));
  for (std::size_t i = 0; i < 8; ++i) CHECK(t.value(f)[i] == doctest::Approx(t.value(g)[i]).epsilon(1e-15));
}

TEST_CASE("fixed summation order is frozen") {
  Tape t;
  Tape::Id x = t.input(Array::from_vector({1e16, 1.0, -1e16, 1.0}));
  // ((1e16 + 1) - 1e16) + 1: the +1 is absorbed at 1e16 scale, so the
  // index-ascending total is exactly 1.
  CHECK(t.value(t.sum(x))[0] == 1.0);
}

TEST_CASE("backward: square rule at x = 3") {
  Tape t;
  Tape::Id x = t.input(Array::scalar(3.0));
  Tape::Id y = t.square(x);
  t.backward(y);
  CHECK(t.grad(x)[0] == 6.0);
}

TEST_CASE("backward: sigmoid slope at zero") {
  Tape t;
  Tape::Id x = t.input(Array::scalar(0.0));
  Tape::Id y = t.sigmoid(x);
  t.backward(y);
  CHECK(t.grad(x)[0] == 0.25);
}

TEST_CASE("reciprocal: values, gradient, and pole rejection") {
  Tape t;
  Tape::Id x = t.input(Array::from_vector({2.0, -0.5}));
  Tape::Id y = t.reciprocal(x);
  CHECK(t.value(y)[0] == 0.5);
  CHECK(t.value(y)[1] == -2.0);
  t.backward(t.sum(y));
  CHECK(t.grad(x)[0] == -0.25);  // d(1/x)/dx = -1/x^2
  CHECK(t.grad(x)[1] == -4.0);

  Tape t2;
  Tape::Id z = t2.input(Array::from_vector({1.0, 0.0}));
  CHECK_THROWS_AS(t2.reciprocal(z), DomainError);
}

TEST_CASE("backward: bilinear product gradients") {
  Tape t;
  Array av = Array::from_vector({1.5, -2.0, 0.5});
  Array bv = Array::from_vector({3.0, 4.0, -1.0});
  Tape::Id a = t.input(av);
  Tape::Id b = t.input(bv);
  Tape::Id y = t.sum(t.mul(a, b));
  t.backward(y);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(t.grad(a)[i] == bv[i]);
    CHECK(t.grad(b)[i] == av[i]);
  }
}

TEST_CASE("backward requires a scalar root") {
  Tape t;
  Tape::Id a = t.input(Array::zeros(2, 2));
  Tape::Id y = t.tanh(a);
  CHECK_THROWS_AS(t.backward(y), ContractError);
}

TEST_CASE("backward leaves unreachable nodes at zero gradient") {
  Tape t;
  Tape::Id a = t.input(Array::scalar(2.0));
  Tape::Id b = t.input(Array::scalar(5.0));
  Tape::Id unused = t.square(b);
  Tape::Id y = t.square(a);
  t.backward(y);
  CHECK(t.grad(b)[0] == 0.0);
  CHECK(t.grad(unused)[0] == 0.0);
}

TEST_CASE("backward is linear in the root scaling") {
  Tape t;
  Tape::Id x = t.input(Array::scalar(1.3));
  Tape::Id y = t.scale(t.square(x), 2.0);
  t.backward(y);
  CHECK(t.grad(x)[0] == doctest::Approx(2.0 * 2.0 * 1.3).epsilon(1e-15));
}

TEST_CASE("forward and backward are bit-deterministic") {
  auto run = [](std::vector<double>& grads_out) {
    Rng rng(77);
    Tape t;
    std::vector<double> xv(12), wv(20);
    for (double& v : xv) v = rng.normal();
    for (double& v : wv) v = rng.normal();
    Tape::Id x = t.input(Array::from_matrix(3, 4, xv));
    Tape::Id w = t.input(Array::from_matrix(4, 5, wv));
    Tape::Id y = t.mean(t.tanh(t.matmul(x, w)));
    t.backward(y);
    const Array& g = t.grad(w);
    grads_out.assign(g.data(), g.data() + g.size());
    return t.value(y)[0];
  };
  std::vector<double> g1, g2;
  const double v1 = run(g1);
  const double v2 = run(g2);
  CHECK(std::memcmp(&v1, &v2, sizeof(double)) == 0);
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("grad_check: cubic at x = 2") {
  auto build = [](Tape& t, std::span<const double> x) -> BuiltFunction {
    Tape::Id leaf = t.input(Array::scalar(x[0]));
    Tape::Id y = t.mul(t.square(leaf), leaf);
    return {y, {leaf}};
  };
  auto r = tdciv::ad::grad_check(build, {2.0}, 1e-5);
  CHECK(r.skipped.empty());
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("grad_check: kink at |x| = 0 is reported and skipped") {
  auto build = [](Tape& t, std::span<const double> x) -> BuiltFunction {
    Tape::Id leaf = t.input(Array::scalar(x[0]));
    return {t.abs(leaf), {leaf}};
  };
  auto r = tdciv::ad::grad_check(build, {0.0}, 1e-5);
  REQUIRE(r.skipped.size() == 1);
  CHECK(r.skipped[0] == 0);
  CHECK(!r.warnings.empty());
}

TEST_CASE("grad_check: probe outside a primitive domain raises a probe error") {
  auto build = [](Tape& t, std::span<const double> x) -> BuiltFunction {
    Tape::Id leaf = t.input(Array::scalar(x[0]));
    return {t.log(leaf), {leaf}};
  };
  CHECK_THROWS_AS(tdciv::ad::grad_check(build, {5e-6}, 1e-5), ProbeError);
}

TEST_CASE("grad_check: random op compositions stay within 1e-4") {
  const double worst = tdciv_tests::composition_battery_max_error(0xd1ffu, 120, 1e-5);
  CHECK(worst <= 1e-4);
}

TEST_CASE("adam: first step with unit gradient") {
  Array p = Array::scalar(0.0);
  AdamState opt({&p});
  Array g = Array::scalar(1.0);
  opt.step({&p}, {&g});
  CHECK(opt.step_count() == 1);
  CHECK(p[0] == doctest::Approx(-0.001 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Array p = Array::from_vector({1.0, -2.0, 3.5});
  AdamState opt({&p});
  Array g = Array::from_vector({0.0, 0.0, 0.0});
  opt.step({&p}, {&g});
  CHECK(p[0] == 1.0);
  CHECK(p[1] == -2.0);
  CHECK(p[2] == 3.5);
}

TEST_CASE("adam: non-finite gradient and shape mismatch are rejected") {
  Array p = Array::from_vector({1.0, 2.0});
  AdamState opt({&p});
  Array bad = Array::from_vector({1.0, std::nan("")});
  CHECK_THROWS_AS(opt.step({&p}, {&bad}), NonFiniteError);
  Array wrong = Array::from_vector({1.0, 2.0, 3.0});
  CHECK_THROWS_AS(opt.step({&p}, {&wrong}), ShapeError);
}

TEST_CASE("adam: matches an independent reference over several steps") {
  const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Rng rng(345);
  std::vector<double> p(7), m(7, 0.0), v(7, 0.0);
  for (double& e : p) e = rng.normal();
  Array pa = Array::from_vector(p);
  AdamState opt({&pa});
  for (int step = 1; step <= 25; ++step) {
    std::vector<double> g(7);
    for (double& e : g) e = rng.normal();
    Array ga = Array::from_vector(g);
    opt.step({&pa}, {&ga});
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, step));
      const double vh = v[i] / (1 - std::pow(b2, step));
      p[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
  for (std::size_t i = 0; i < p.size(); ++i)
    CHECK(pa[i] == doctest::Approx(p[i]).epsilon(1e-14));
}

TEST_CASE("matmul gradient matches finite differences on rectangular shapes") {
  auto build = [](Tape& t, std::span<const double> x) -> BuiltFunction {
    Tape::Id a = t.input(Array::from_matrix(2, 3, {x.begin(), x.begin() + 6}));
    Tape::Id b = t.input(Array::from_matrix(3, 4, {x.begin() + 6, x.begin() + 18}));
    Tape::Id bias = t.input(Array::from_vector({x.begin() + 18, x.end()}));
    Tape::Id y = t.mean(t.tanh(t.affine(a, b, bias)));
    return {y, {a, b, bias}};
  };
  Rng rng(9);
  std::vector<double> point(22);
  for (double& e : point) e = rng.normal(0.0, 0.7);
  auto r = tdciv::ad::grad_check(build, point, 1e-5);
  CHECK(r.skipped.empty());
  CHECK(r.max_rel_error <= 1e-7);
}
