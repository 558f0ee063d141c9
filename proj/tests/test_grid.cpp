#include "berryfact/grid.hpp"
#include "berryfact/eigensolve.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

using namespace berryfact;
using Catch::Matchers::WithinAbs;

namespace {

RealField random_field(const Grid &g, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  RealField f(g);
  for (auto &v : f.values()) v = u(rng);
  return f;
}

} // namespace

TEST_CASE("grid geometry") {
  Grid g({5, 7}, {0.5, 0.25}, {-1.0, -0.75});
  CHECK(g.size() == 35);
  CHECK(g.stride(0) == 7);
  CHECK(g.stride(1) == 1);
  CHECK(g.coord(0, 4) == 1.0);
  CHECK(g.cell_volume() == 0.125);
  CHECK(g.nearest_index(1, 0.01) == 3);
  auto idx = g.unravel(23);
  CHECK(g.ravel(idx) == 23);
  CHECK(g.select({1}).dim(0) == 7);
  CHECK(g.complement({0}) == Axes{1});

  auto s = Grid::symmetric({33, 25}, {8.0, 4.0});
  CHECK(s.spacing(0) == 0.5);
  CHECK(s.symmetric_about_zero(0));
  CHECK(s.coord(1, 12) == 0.0);

  CHECK_THROWS_AS(Grid({3}, {0.0}, {0.0}), std::invalid_argument);
  CHECK_THROWS_AS(Grid({3}, {1.0, 1.0}, {0.0}), std::invalid_argument);
  CHECK_THROWS_AS(Grid({0}, {1.0}, {0.0}), std::invalid_argument);
  CHECK_THROWS(g.check_axis(2));
  CHECK_THROWS_AS(RealField(g, std::vector<double>(3)), std::invalid_argument);
}

TEST_CASE("laplacian is exact on quadratics") {
  Grid g = Grid::symmetric({21, 21}, {1.0, 1.0});
  auto f = sample(g, [](auto x) { return x[0] * x[0] + x[1] * x[1]; });
  auto lf = laplacian_apply(f, {0, 1});
  for (std::size_t i = 1; i + 1 < 21; ++i) {
    for (std::size_t j = 1; j + 1 < 21; ++j) CHECK_THAT(lf[i * 21 + j], WithinAbs(4.0, 1e-9));
  }
  RealField zero(g);
  const auto lz = laplacian_apply(zero, {0, 1});
  for (double v : lz.values()) CHECK(v == 0.0);
  CHECK_THROWS(laplacian_apply(f, {2}));
  CHECK_THROWS(laplacian_apply(RealField(Grid({2}, {1.0}, {0.0})), {0}));
}

TEST_CASE("laplacian is symmetric and negative semidefinite") {
  Grid g = Grid::symmetric({9, 11, 7}, {1.0, 2.0, 1.5});
  auto f = random_field(g, 1);
  auto h = random_field(g, 2);
  const double a = inner_product(f, laplacian_apply(h, {0, 1, 2}));
  const double b = inner_product(laplacian_apply(f, {0, 1, 2}), h);
  CHECK_THAT(a, WithinAbs(b, 1e-12 * std::abs(a) + 1e-12));
  CHECK(inner_product(f, laplacian_apply(f, {0, 1, 2})) <= 0.0);
  CHECK(inner_product(h, laplacian_apply(h, {1})) <= 0.0);
}

TEST_CASE("1D Dirichlet laplacian matches the closed-form spectrum") {
  const std::size_t n = 40;
  const double h = 0.1;
  Grid g({n}, {h}, {0.0});
  auto op = [&](std::span<const double> in, std::span<double> out) {
    RealField f(g, std::vector<double>(in.begin(), in.end()));
    auto l = laplacian_apply(f, {0});
    for (std::size_t i = 0; i < n; ++i) out[i] = -0.5 * l[i];
  };
  auto pairs = dense_oracle(materialize(op, n));
  for (std::size_t k = 1; k <= n; ++k) {
    const double exact = (1.0 - std::cos(static_cast<double>(k) * std::numbers::pi /
                                          static_cast<double>(n + 1))) / (h * h);
    CHECK_THAT(pairs[k - 1].value, WithinAbs(exact, 1e-12 * std::max(1.0, exact)));
  }
}

TEST_CASE("integration") {
  Grid unit({10, 10}, {0.1, 0.1}, {0.05, 0.05});
  RealField one(unit, std::vector<double>(100, 1.0));
  CHECK_THAT(integrate(one), WithinAbs(1.0, 1e-12));

  Grid g = Grid::symmetric({17, 13}, {2.0, 3.0});
  auto gx = [](double x) { return std::exp(-x * x); };
  auto hy = [](double y) { return 1.0 + y; };
  auto f = sample(g, [&](auto x) { return gx(x[0]) * hy(x[1]); });
  auto part = integrate(f, {0});
  double gint = 0.0;
  for (std::size_t i = 0; i < 17; ++i) gint += gx(g.coord(0, i)) * g.spacing(0);
  REQUIRE(part.grid().ndim() == 1);
  for (std::size_t j = 0; j < 13; ++j) CHECK_THAT(part[j], WithinAbs(gint * hy(g.coord(1, j)), 1e-13));
  auto all = integrate(f, {0, 1});
  CHECK(all.grid().ndim() == 0);
  CHECK_THAT(all[0], WithinAbs(integrate(f), 1e-13));
  CHECK_THROWS_AS(integrate(f, {}), std::invalid_argument);
}

TEST_CASE("gradient") {
  Grid g({21}, {0.1}, {0.0});
  auto lin = sample(g, [](auto x) { return 3.0 * x[0]; });
  const auto dlin = gradient(lin, 0);
  for (double v : dlin.values()) CHECK_THAT(v, WithinAbs(3.0, 1e-12));
  auto quad = sample(g, [](auto x) { return x[0] * x[0]; });
  CHECK_THAT(gradient(quad, 0)[10], WithinAbs(2.0, 1e-12));
  CHECK_THROWS(gradient(quad, 1));

  // discrete divergence theorem on a decayed field
  Grid d = Grid::symmetric({81, 61}, {8.0, 8.0});
  auto bump = sample(d, [](auto x) { return std::exp(-x[0] * x[0] - 0.5 * x[1] * x[1]) * (1 + x[0]); });
  CHECK(std::abs(integrate(gradient(bump, 0))) < 1e-10);
  CHECK(std::abs(integrate(gradient(bump, 1))) < 1e-10);
}

TEST_CASE("inner products") {
  Grid g = Grid::symmetric({15, 15}, {3.0, 3.0});
  auto f = sample(g, [](auto x) { return std::exp(-x[0] * x[0] - x[1] * x[1]); });
  normalize(f);
  CHECK_THAT(inner_product(f, f), WithinAbs(1.0, 1e-12));
  CHECK_THAT(integrate(inner_product(f, f, {0, 1})), WithinAbs(1.0, 1e-12));

  ComplexField a(g), b(g);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (std::size_t k = 0; k < g.size(); ++k) {
    a[k] = {n(rng), n(rng)};
    b[k] = {n(rng), n(rng)};
  }
  const auto ab = inner_product(a, b);
  const auto ba = inner_product(b, a);
  CHECK_THAT(ab.real(), WithinAbs(ba.real(), 1e-12));
  CHECK_THAT(ab.imag(), WithinAbs(-ba.imag(), 1e-12));

  RealField other(Grid::symmetric({15, 15}, {3.0, 2.0}));
  CHECK_THROWS_AS(inner_product(f, other), std::invalid_argument);
}
