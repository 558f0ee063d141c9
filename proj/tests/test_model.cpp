#include "berryfact/model.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace berryfact;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<double> random_vector(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto &x : v) x = u(rng);
  return v;
}

double euclid_dot(const std::vector<double> &a, const std::vector<double> &b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

} // namespace

TEST_CASE("soft-Coulomb potentials") {
  const ModelParams p;
  CHECK_THAT(p.L, WithinAbs(1.3856406, 1e-7));
  CHECK_THAT(v_en(0.0, p.a), WithinAbs(-1.4142136, 1e-7));
  CHECK_THAT(v_en(p.L, p.a), WithinAbs(-0.6428244, 1e-7));
  CHECK_THAT(v_nn(0.0, p.b), WithinAbs(0.3162278, 1e-7));
  // 1/sqrt(11.92)
  CHECK_THAT(v_nn(p.L, p.b), WithinAbs(0.28964222318, 1e-10));
  double prev_en = v_en(0.0, p.a), prev_nn = v_nn(0.0, p.b);
  for (int i = 1; i < 200; ++i) {
    const double d = 0.1 * i;
    CHECK(v_en(d, p.a) > prev_en);
    CHECK(v_en(d, p.a) < 0.0);
    CHECK(v_nn(d, p.b) < prev_nn);
    CHECK(std::abs(v_en(d, p.a)) <= 1.0 / std::sqrt(p.a));
    prev_en = v_en(d, p.a);
    prev_nn = v_nn(d, p.b);
  }
}

TEST_CASE("model parameters are validated") {
  ModelParams p;
  p.M = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = ModelParams{};
  p.a = -1.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  CHECK_THAT(ModelParams{}.equilateral_height(), WithinAbs(1.2, 1e-15));
}

TEST_CASE("potential field") {
  const ModelParams p;
  // equilateral point: three equal ion-ion terms plus the wall
  CHECK_THAT(nuclear_potential(p, 0.0, 1.2),
             WithinAbs(3.0 * v_nn(p.L, p.b) + std::pow(1.2 / 3.5, 4), 1e-15));
  CHECK_THAT(nuclear_potential(p, 0.0, 1.2), WithinAbs(0.88274491194, 1e-10));
  Grid e = Grid::symmetric({33, 33}, {8.0, 8.0});
  auto up = potential_field(p, e, 0.0, 1.2);
  auto down = potential_field(p, e, 0.0, -1.2);
  CHECK(reflect(up, {0}).values().size() == up.values().size());
  auto mx = reflect(up, {0});
  auto my = reflect(up, {1});
  for (std::size_t k = 0; k < e.size(); ++k) {
    CHECK_THAT(mx[k], WithinAbs(up[k], 1e-14));
    CHECK_THAT(my[k], WithinAbs(down[k], 1e-14));
  }
  // the deepest electron potential sits inside the ion triangle
  auto ev = potential_field(p, e, 0.0, 1.2);
  std::size_t kmin = 0;
  for (std::size_t k = 0; k < e.size(); ++k) if (ev[k] < ev[kmin]) kmin = k;
  auto idx = e.unravel(kmin);
  const double x = e.coord(0, idx[0]), y = e.coord(1, idx[1]);
  const double circumradius = p.L / std::sqrt(3.0);
  CHECK(std::hypot(x, y - 1.2 / 3.0) < circumradius);
}

TEST_CASE("BO operator is symmetric and shifts with the potential") {
  const ModelParams p;
  Grid e = Grid::symmetric({15, 17}, {6.0, 6.0});
  BOOperator op(p, e, 0.3, 1.0);
  auto f = random_vector(e.size(), 1), g = random_vector(e.size(), 2);
  std::vector<double> hf(e.size()), hg(e.size());
  op(f, hf);
  op(g, hg);
  CHECK_THAT(euclid_dot(f, hg), WithinAbs(euclid_dot(hf, g), 1e-12 * std::abs(euclid_dot(f, hg)) + 1e-12));

  auto [lo, hi] = op.spectral_bounds();
  CHECK(lo < hi);
  RealField rf(e, f);
  CHECK_THROWS_AS(apply_bo_hamiltonian(op, RealField(Grid::symmetric({15, 15}, {6.0, 6.0}))),
                  std::invalid_argument);
  auto out = apply_bo_hamiltonian(op, rf);
  for (std::size_t k = 0; k < e.size(); ++k) CHECK(out[k] == hf[k]);
}

TEST_CASE("full operator matches an independent assembly column by column") {
  ModelParams p;
  p.M = 10.0;
  Grid e = Grid::symmetric({9, 9}, {3.0, 3.0});
  Grid n = Grid::symmetric({9, 9}, {2.0, 2.0});
  FullOperator op(p, e, n);
  const Grid &g = op.grid();
  REQUIRE(g.size() == 6561);
  std::vector<double> unit(g.size(), 0.0), col(g.size());
  double worst = 0.0;
  for (std::size_t j = 0; j < g.size(); ++j) {
    unit[j] = 1.0;
    op(unit, col);
    unit[j] = 0.0;
    auto idx = g.unravel(j);
    const double x = g.coord(0, idx[0]), y = g.coord(1, idx[1]);
    const double X = g.coord(2, idx[2]), Y = g.coord(3, idx[3]);
    double diag = electron_potential(p, x, y, X, Y) + nuclear_potential(p, X, Y);
    std::vector<std::pair<std::size_t, double>> expected;
    for (std::size_t a = 0; a < 4; ++a) {
      const double h = g.spacing(a);
      const double t = 0.5 / ((a < 2 ? 1.0 : p.M) * h * h);
      diag += 2.0 * t;
      if (idx[a] > 0) expected.emplace_back(j - g.stride(a), -t);
      if (idx[a] + 1 < g.dim(a)) expected.emplace_back(j + g.stride(a), -t);
    }
    expected.emplace_back(j, diag);
    for (auto [k, v] : expected) {
      worst = std::max(worst, std::abs(col[k] - v));
      col[k] = 0.0;
    }
    for (double v : col) worst = std::max(worst, std::abs(v));
  }
  CHECK(worst < 1e-13);
}

TEST_CASE("full operator symmetries") {
  ModelParams p;
  Grid e = Grid::symmetric({11, 9}, {4.0, 4.0});
  Grid n = Grid::symmetric({7, 9}, {2.0, 2.0});
  FullOperator op(p, e, n);
  const auto N = op.size();
  auto f = random_vector(N, 5), g = random_vector(N, 6);
  std::vector<double> hf(N), hg(N), pf(N), hpf(N), phf(N);
  op(f, hf);
  op(g, hg);
  CHECK_THAT(euclid_dot(f, hg), WithinAbs(euclid_dot(hf, g), 1e-11));

  op.reflect_x(f, pf);
  op(pf, hpf);
  op.reflect_x(hf, phf);
  double dx = 0.0;
  for (std::size_t i = 0; i < N; ++i) dx = std::max(dx, std::abs(hpf[i] - phf[i]));
  CHECK(dx < 1e-12);

  op.reflect_y(f, pf);
  op(pf, hpf);
  op.reflect_y(hf, phf);
  double dy = 0.0;
  for (std::size_t i = 0; i < N; ++i) dy = std::max(dy, std::abs(hpf[i] - phf[i]));
  CHECK(dy < 1e-12);

  // reflection is an involution
  op.reflect_x(f, pf);
  op.reflect_x(pf, phf);
  CHECK(phf == f);
}

TEST_CASE("heavy-ion limit removes the nuclear kinetic coupling") {
  ModelParams p;
  p.M = 1e12;
  Grid e = Grid::symmetric({5, 5}, {2.0, 2.0});
  Grid n = Grid::symmetric({5, 5}, {1.0, 1.0});
  FullOperator op(p, e, n);
  std::vector<double> unit(op.size(), 0.0), col(op.size());
  const std::size_t j = op.grid().ravel(std::vector<std::size_t>{2, 2, 2, 2});
  unit[j] = 1.0;
  op(unit, col);
  CHECK(std::abs(col[j + op.grid().stride(2)]) < 1e-11);
  CHECK(std::abs(col[j + op.grid().stride(0)]) > 0.1);
}
