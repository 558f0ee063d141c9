#include "berryfact/berry.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

using namespace berryfact;
using Catch::Approx;
using cd = std::complex<double>;

namespace {

constexpr double kPi = std::numbers::pi;

// A real two-level family with a conical degeneracy at (x0, y0): the lower
// eigenvector of [[dx, dy], [dy, -dx]] is (-sin θ/2, cos θ/2) with θ the
// polar angle, which changes sign once around the point.
struct ConeFamily {
  Grid nuclear;
  double x0, y0;
  std::vector<double> states; // two components per point, dv = 1

  ConeFamily(Grid g, double x0_, double y0_) : nuclear(std::move(g)), x0(x0_), y0(y0_) {
    const std::size_t nY = nuclear.dim(1);
    states.resize(2 * nuclear.size());
    for (std::size_t r = 0; r < nuclear.size(); ++r) {
      const double th = std::atan2(nuclear.coord(1, r % nY) - y0, nuclear.coord(0, r / nY) - x0);
      states[2 * r] = -std::sin(0.5 * th);
      states[2 * r + 1] = std::cos(0.5 * th);
    }
  }
  std::span<const double> operator()(std::size_t r) const { return {states.data() + 2 * r, 2}; }
};

// Smooth complex family Φ(R) e^{iS(R)} with S = 0.3X + 0.1Y.
struct GaugeFamily {
  Grid nuclear;
  std::vector<cd> states;
  GaugeFamily(Grid g, double sx, double sy) : nuclear(std::move(g)) {
    const std::size_t nY = nuclear.dim(1);
    states.resize(3 * nuclear.size());
    for (std::size_t r = 0; r < nuclear.size(); ++r) {
      const double X = nuclear.coord(0, r / nY), Y = nuclear.coord(1, r % nY);
      const double a = 0.4 * X, b = 0.3 * Y;
      const double n = std::sqrt(1.0 + std::sin(a) * std::sin(a) + std::cos(b) * std::cos(b));
      const cd ph = std::polar(1.0, sx * X + sy * Y);
      states[3 * r] = ph / n;
      states[3 * r + 1] = ph * std::sin(a) / n;
      states[3 * r + 2] = ph * std::cos(b) / n;
    }
  }
  std::span<const cd> operator()(std::size_t r) const { return {states.data() + 3 * r, 3}; }
};

} // namespace

TEST_CASE("wrap_phase maps into (-pi, pi]", "[berry]") {
  CHECK(wrap_phase(0.0) == 0.0);
  CHECK(wrap_phase(kPi) == Approx(kPi));
  CHECK(wrap_phase(-kPi) == Approx(kPi));
  CHECK(wrap_phase(3.0 * kPi) == Approx(kPi));
  CHECK(wrap_phase(2.0 * kPi + 0.25) == Approx(0.25));
  CHECK(wrap_phase(-0.25) == Approx(-0.25));
}

TEST_CASE("wilson_loop: identical states give exactly zero", "[berry]") {
  std::vector<double> v{0.6, 0.8};
  std::vector<std::span<const double>> s(5, std::span<const double>(v));
  const auto w = wilson_loop<double>(s, 1.0);
  CHECK(w.phase == 0.0);
  CHECK(w.min_overlap == Approx(1.0));
  CHECK(w.negative == 0);
}

TEST_CASE("wilson_loop: real families give exactly 0 or pi", "[berry]") {
  ConeFamily f(Grid::symmetric({11, 11}, {1.0, 1.0}), 0.05, 0.05);
  auto around = evaluate_loop<double>(rectangle_loop(f.nuclear, 3, 7, 3, 7), f, 1.0);
  CHECK(around.phase == kPi);
  auto beside = evaluate_loop<double>(rectangle_loop(f.nuclear, 6, 9, 6, 9), f, 1.0);
  CHECK(beside.phase == 0.0);
  // shape independence
  auto big = evaluate_loop<double>(rectangle_loop(f.nuclear, 1, 9, 2, 8), f, 1.0);
  CHECK(big.phase == kPi);
  auto thin = evaluate_loop<double>(rectangle_loop(f.nuclear, 5, 6, 0, 10), f, 1.0);
  CHECK(thin.phase == kPi);
}

TEST_CASE("wilson_loop: per-point sign changes do not change the phase", "[berry]") {
  ConeFamily f(Grid::symmetric({11, 11}, {1.0, 1.0}), 0.05, 0.05);
  ConeFamily g = f;
  std::mt19937_64 rng(5);
  for (std::size_t r = 0; r < g.nuclear.size(); ++r) {
    if (rng() & 1u) {
      g.states[2 * r] = -g.states[2 * r];
      g.states[2 * r + 1] = -g.states[2 * r + 1];
    }
  }
  for (auto L : {rectangle_loop(f.nuclear, 3, 7, 3, 7), rectangle_loop(f.nuclear, 6, 9, 6, 9),
                 rectangle_loop(f.nuclear, 0, 10, 0, 10)}) {
    CHECK(evaluate_loop<double>(L, f, 1.0).phase == evaluate_loop<double>(L, g, 1.0).phase);
  }
}

TEST_CASE("wilson_loop: two enclosed degeneracies cancel", "[berry]") {
  const Grid g = Grid::symmetric({25, 25}, {4.0, 4.0});
  const std::size_t nY = g.dim(1);
  // product of two cone angles: the lower state of a family with two
  // degeneracies at (0, +-1.2)
  std::vector<double> st(2 * g.size());
  for (std::size_t r = 0; r < g.size(); ++r) {
    const double X = g.coord(0, r / nY), Y = g.coord(1, r % nY);
    const double th = std::atan2(Y - 1.2, X) + std::atan2(Y + 1.2, X);
    st[2 * r] = -std::sin(0.5 * th);
    st[2 * r + 1] = std::cos(0.5 * th);
  }
  auto fam = [&](std::size_t r) { return std::span<const double>(st.data() + 2 * r, 2); };
  for (const auto &L : loop_battery(g, 1.2, 2)) {
    const auto p = evaluate_loop<double>(L, fam, 1.0);
    const bool one = L.name == "upper" || L.name == "lower";
    INFO(L.name);
    CHECK(p.phase == (one ? kPi : 0.0));
  }
}

TEST_CASE("wilson_loop: reversal negates a generic phase", "[berry]") {
  // complex family with a non-quantized phase: spin-1/2 coherent states on a
  // cone of half-angle a; the loop phase is -π(1 - cos a) for a full turn
  const std::size_t n = 64;
  const double a = 0.7;
  std::vector<std::vector<cd>> st(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double phi = 2.0 * kPi * static_cast<double>(i) / static_cast<double>(n);
    st[i] = {cd(std::cos(0.5 * a), 0.0), std::polar(std::sin(0.5 * a), phi)};
  }
  std::vector<std::span<const cd>> fwd, bwd;
  for (std::size_t i = 0; i < n; ++i) fwd.emplace_back(st[i]);
  for (std::size_t i = n; i-- > 0;) bwd.emplace_back(st[i]);
  const double pf = wilson_loop_phase<cd>(fwd, 1.0), pb = wilson_loop_phase<cd>(bwd, 1.0);
  CHECK(pf == Approx(-kPi * (1.0 - std::cos(a))).margin(2e-3));
  CHECK(pb == Approx(-pf).margin(1e-12));
  CHECK(std::abs(pf) > 0.1);
  CHECK(std::abs(std::abs(pf) - kPi) > 0.1);
}

TEST_CASE("wilson_loop: a vanishing overlap is reported with its edge", "[berry]") {
  std::vector<double> a{1.0, 0.0}, b{0.0, 1.0};
  std::vector<std::span<const double>> s{a, a, b};
  try {
    (void)wilson_loop<double>(s, 1.0);
    FAIL("expected SingularOverlapError");
  } catch (const SingularOverlapError &e) {
    CHECK(e.edge == 1);
    CHECK(e.magnitude < 1e-8);
  }
  std::vector<std::span<const double>> one{a};
  CHECK_THROWS_AS(wilson_loop<double>(one, 1.0), std::invalid_argument);
}

TEST_CASE("rectangle_loop: counter-clockwise perimeter", "[berry]") {
  const Grid g = Grid::symmetric({5, 5}, {2.0, 2.0});
  const auto L = rectangle_loop(g, 1, 3, 1, 2, "r");
  REQUIRE(L.vertices.size() == 6);
  const std::size_t nY = 5;
  CHECK(L.vertices[0] == 1 * nY + 1);
  CHECK(L.vertices[1] == 2 * nY + 1);
  CHECK(L.vertices[2] == 3 * nY + 1);
  CHECK(L.vertices[3] == 3 * nY + 2);
  CHECK(L.vertices[4] == 2 * nY + 2);
  CHECK(L.vertices[5] == 1 * nY + 2);
  const auto R = reversed(L);
  CHECK(R.vertices.front() == L.vertices.back());
  CHECK_THROWS_AS(rectangle_loop(g, 3, 1, 1, 2), std::invalid_argument);
  CHECK_THROWS_AS(rectangle_loop(g, 1, 5, 1, 2), std::invalid_argument);
}

TEST_CASE("loop_battery: loops enclose what their names say", "[berry]") {
  const Grid g = Grid::symmetric({33, 33}, {4.0, 4.0});
  const double y = 1.2;
  auto inside = [&](const LoopPath &L, double X, double Y) {
    double xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
    for (auto r : L.vertices) {
      xmin = std::min(xmin, g.coord(0, r / 33));
      xmax = std::max(xmax, g.coord(0, r / 33));
      ymin = std::min(ymin, g.coord(1, r % 33));
      ymax = std::max(ymax, g.coord(1, r % 33));
    }
    return X > xmin && X < xmax && Y > ymin && Y < ymax;
  };
  const auto loops = loop_battery(g, y, 2);
  REQUIRE(loops.size() == 5);
  for (const auto &L : loops) {
    const bool up = inside(L, 0.0, y), lo = inside(L, 0.0, -y);
    INFO(L.name);
    if (L.name == "upper") CHECK((up && !lo));
    if (L.name == "lower") CHECK((!up && lo));
    if (L.name == "both") CHECK((up && lo));
    if (L.name == "neither" || L.name == "neither_axis") CHECK((!up && !lo));
  }
  CHECK_THROWS_AS(loop_battery(Grid::symmetric({5, 5}, {4.0, 4.0}), y, 2), std::invalid_argument);
}

TEST_CASE("connection_field: smooth real family is zero", "[berry]") {
  ConeFamily f(Grid::symmetric({11, 11}, {1.0, 1.0}), 5.0, 5.0); // degeneracy outside
  const auto cf = connection_field<double>(f.nuclear, f, 1.0);
  for (std::size_t r = 0; r < f.nuclear.size(); ++r) {
    REQUIRE(cf.defined(r));
    CHECK(std::abs(cf.AX[r]) < 1e-8);
    CHECK(std::abs(cf.AY[r]) < 1e-8);
  }
}

TEST_CASE("connection_field: pure gauge gives grad S, and its loop integral vanishes", "[berry]") {
  const Grid g = Grid::symmetric({21, 21}, {2.0, 2.0});
  GaugeFamily f(g, 0.3, 0.1);
  const auto cf = connection_field<cd>(g, f, 1.0);
  const std::size_t nY = g.dim(1);
  for (std::size_t i = 1; i + 1 < g.dim(0); ++i) {
    for (std::size_t j = 1; j + 1 < nY; ++j) {
      const std::size_t r = i * nY + j;
      CHECK(cf.AX[r] == Approx(0.3).margin(5e-3));
      CHECK(cf.AY[r] == Approx(0.1).margin(5e-3));
      CHECK(std::abs(cf.driftX[r]) < 5e-3);
    }
  }
  const auto L = rectangle_loop(g, 3, 15, 2, 17);
  CHECK(line_integral(cf, L.vertices) == Approx(0.0).margin(1e-4));
  // open path: S(end) - S(start)
  const std::vector<std::size_t> path{5 * nY + 5, 6 * nY + 5, 7 * nY + 5, 7 * nY + 6};
  const double dS = 0.3 * 2.0 * g.spacing(0) + 0.1 * g.spacing(1);
  CHECK(line_integral(cf, path, false) == Approx(dS).margin(1e-3));
}

TEST_CASE("connection_field: undefined points and sign jumps are masked", "[berry]") {
  ConeFamily f(Grid::symmetric({11, 11}, {1.0, 1.0}), 0.05, 0.05);
  auto defined = [](std::size_t r) { return r != 60; };
  const auto cf = connection_field<double>(f.nuclear, f, defined, 1.0);
  CHECK_FALSE(cf.defined(60));
  CHECK_FALSE(cf.defined(59));
  CHECK_FALSE(cf.defined(49));
  // the family jumps sign across the branch cut of atan2 (negative X axis
  // through the degeneracy row)
  std::size_t masked = 0;
  for (std::size_t r = 0; r < f.nuclear.size(); ++r) masked += cf.defined(r) ? 0 : 1;
  CHECK(masked > 5);
  const std::vector<std::size_t> bad{60, 61};
  CHECK_THROWS_AS(line_integral(cf, bad), std::invalid_argument);
  CHECK(line_integral(ConnectionField{f.nuclear, RealField(f.nuclear), RealField(f.nuclear),
                                      RealField(f.nuclear), RealField(f.nuclear)},
                      rectangle_loop(f.nuclear, 0, 3, 0, 3).vertices) == 0.0);
}
