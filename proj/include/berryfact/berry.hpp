#pragma once

// Geometric phases of state families over the nuclear grid: discrete Wilson
// loops (overlap products), finite-difference connections and line
// integrals.

#include "berryfact/grid.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace berryfact {

inline constexpr double kOverlapFloor = 1e-8;

/// An overlap on the path fell below the floor: the path runs through (or
/// too close to) a degeneracy for this grid.
class SingularOverlapError : public std::runtime_error {
public:
  SingularOverlapError(std::size_t edge, double magnitude)
      : std::runtime_error("overlap magnitude " + std::to_string(magnitude) + " on edge " +
                           std::to_string(edge) + " is below the floor"),
        edge(edge), magnitude(magnitude) {}
  std::size_t edge;
  double magnitude;
};

/// Map an angle to (−π, π].
inline double wrap_phase(double phi) {
  double w = std::remainder(phi, 2.0 * std::numbers::pi);
  if (w <= -std::numbers::pi) w += 2.0 * std::numbers::pi;
  return w;
}

template <typename T>
struct WilsonLoop {
  double phase = 0.0;          ///< (−π, π]
  std::vector<T> overlaps;     ///< ⟨Φ_i|Φ_{i+1}⟩, last entry closes the loop
  double min_overlap = 0.0;    ///< smallest |overlap|
  std::size_t negative = 0;    ///< number of overlaps with negative real part
};

/// γ = −arg Π_i ⟨Φ_i|Φ_{i+1}⟩ around a closed path (the last state connects
/// back to the first). Real families give exactly 0 or π from the sign
/// parity.
template <typename T>
WilsonLoop<T> wilson_loop(const std::vector<std::span<const T>> &states, double dv,
                          double floor = kOverlapFloor) {
  if (states.size() < 2) throw std::invalid_argument("wilson_loop: need at least two states");
  WilsonLoop<T> w;
  w.min_overlap = std::numeric_limits<double>::infinity();
  std::complex<double> prod{1.0, 0.0};
  const std::size_t n = states.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T o = dot<T>(states[i], states[(i + 1) % n], dv);
    const double mag = std::abs(o);
    if (!(mag >= floor)) throw SingularOverlapError(i, mag);
    w.overlaps.push_back(o);
    w.min_overlap = std::min(w.min_overlap, mag);
    if (std::real(o) < 0.0) ++w.negative;
    prod *= std::complex<double>(o) / mag;
  }
  if constexpr (is_complex_v<T>) {
    w.phase = wrap_phase(-std::arg(prod));
  } else {
    w.phase = (w.negative % 2 == 1) ? std::numbers::pi : 0.0;
  }
  return w;
}

template <typename T>
double wilson_loop_phase(const std::vector<std::span<const T>> &states, double dv,
                         double floor = kOverlapFloor) {
  return wilson_loop(states, dv, floor).phase;
}

/// A closed path of nuclear grid points; evaluated by evaluate_loop.
struct LoopPath {
  std::string name;
  std::vector<std::size_t> vertices; ///< flat nuclear indices; closes on itself
  double phase = 0.0;
  double min_overlap = 0.0;
  std::size_t negative_overlaps = 0;
};

/// Rectangle with corners (i0, j0) and (i1, j1), i0 < i1 and j0 < j1,
/// traversed counter-clockwise in the (X, Y) plane.
inline LoopPath rectangle_loop(const Grid &nuclear, std::size_t i0, std::size_t i1,
                               std::size_t j0, std::size_t j1, std::string name = {}) {
  if (nuclear.ndim() != 2) throw std::invalid_argument("rectangle_loop: nuclear grid must be 2D");
  if (!(i0 < i1 && j0 < j1 && i1 < nuclear.dim(0) && j1 < nuclear.dim(1))) {
    throw std::invalid_argument("rectangle_loop: corners outside the grid or degenerate");
  }
  const std::size_t nY = nuclear.dim(1);
  LoopPath p;
  p.name = std::move(name);
  for (std::size_t i = i0; i < i1; ++i) p.vertices.push_back(i * nY + j0);
  for (std::size_t j = j0; j < j1; ++j) p.vertices.push_back(i1 * nY + j);
  for (std::size_t i = i1; i > i0; --i) p.vertices.push_back(i * nY + j1);
  for (std::size_t j = j1; j > j0; --j) p.vertices.push_back(i0 * nY + j);
  return p;
}

/// Traverse the same path backwards.
inline LoopPath reversed(LoopPath p) {
  std::reverse(p.vertices.begin(), p.vertices.end());
  return p;
}

/// Wilson loop of a state family given by `state(r)` (a span over the
/// electron grid for nuclear index r).
template <typename T, typename StateFn>
LoopPath evaluate_loop(LoopPath path, StateFn &&state, double dv, double floor = kOverlapFloor) {
  std::vector<std::span<const T>> s;
  s.reserve(path.vertices.size());
  for (auto r : path.vertices) s.push_back(state(r));
  auto w = wilson_loop<T>(s, dv, floor);
  path.phase = w.phase;
  path.min_overlap = w.min_overlap;
  path.negative_overlaps = w.negative;
  return path;
}

/// Standard battery: one loop around each degeneracy point, one around both,
/// and two around neither (one off to the side, one straddling X = 0 between
/// the points). `margin` is the half-width in grid cells; loops keep the
/// points strictly inside (or outside).
inline std::vector<LoopPath> loop_battery(const Grid &nuclear, double y_ci, std::size_t margin = 2) {
  if (margin < 1) throw std::invalid_argument("loop_battery: margin must be at least 1");
  const std::size_t nX = nuclear.dim(0), nY = nuclear.dim(1);
  const std::size_t ic = nuclear.nearest_index(0, 0.0);
  const std::size_t ju = nuclear.nearest_index(1, y_ci);
  const std::size_t jl = nuclear.nearest_index(1, -y_ci);
  const std::size_t jc = nuclear.nearest_index(1, 0.0);
  const double h = nuclear.spacing(1);
  // rows bracketing a point off the grid lines need one extra row on the far side
  auto rows_around = [&](std::size_t j, double y) {
    std::size_t lo = j - margin, hi = j + margin;
    const double off = y - nuclear.coord(1, j);
    if (off > 1e-9 * h) ++hi;
    if (off < -1e-9 * h) --lo;
    return std::pair{lo, hi};
  };
  if (ic < margin || ic + margin >= nX || ju + margin + 1 >= nY || jl < margin + 1 ||
      ic + 3 * margin + 2 >= nX) {
    throw std::invalid_argument("loop_battery: nuclear grid too small for the loop margin");
  }
  std::vector<LoopPath> out;
  auto [u0, u1] = rows_around(ju, y_ci);
  auto [l0, l1] = rows_around(jl, -y_ci);
  out.push_back(rectangle_loop(nuclear, ic - margin, ic + margin, u0, u1, "upper"));
  out.push_back(rectangle_loop(nuclear, ic - margin, ic + margin, l0, l1, "lower"));
  out.push_back(rectangle_loop(nuclear, ic - margin, ic + margin, l0, u1, "both"));
  out.push_back(rectangle_loop(nuclear, ic + 2, ic + 2 + 2 * margin, jc - margin, jc + margin, "neither"));
  if (l1 + 1 < jc && jc + 1 < u0) {
    out.push_back(rectangle_loop(nuclear, ic - margin, ic + margin, jc - 1, jc + 1, "neither_axis"));
  }
  return out;
}

/// Per-axis connection A_ν = Im⟨Φ|∂_νΦ⟩ over the nuclear grid, with the
/// normalisation drift Re⟨Φ|∂_νΦ⟩ kept as a diagnostic. NaN marks points
/// whose stencil touches an undefined state or a discontinuous edge.
struct ConnectionField {
  Grid nuclear;
  RealField AX, AY;
  RealField driftX, driftY;

  const RealField &component(std::size_t axis) const { return axis == 0 ? AX : AY; }
  bool defined(std::size_t r) const { return std::isfinite(AX[r]) && std::isfinite(AY[r]); }
};

/// `state(r)` gives the family member at nuclear index r; `defined(r)` masks
/// points where it does not exist. An edge whose overlap phase exceeds π/2 is
/// treated as a discontinuity.
template <typename T, typename StateFn, typename DefinedFn>
ConnectionField connection_field(const Grid &nuclear, StateFn &&state, DefinedFn &&defined, double dv) {
  for (std::size_t a = 0; a < 2; ++a) detail::require_stencil_axis(nuclear, a);
  ConnectionField cf{nuclear, RealField(nuclear), RealField(nuclear), RealField(nuclear), RealField(nuclear)};
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::size_t nY = nuclear.dim(1);
  for (std::size_t r = 0; r < nuclear.size(); ++r) {
    const std::size_t idx[2] = {r / nY, r % nY};
    for (std::size_t a = 0; a < 2; ++a) {
      RealField &A = a == 0 ? cf.AX : cf.AY;
      RealField &D = a == 0 ? cf.driftX : cf.driftY;
      const std::size_t s = nuclear.stride(a);
      const std::size_t lo = idx[a] > 0 ? r - s : r;
      const std::size_t hi = idx[a] + 1 < nuclear.dim(a) ? r + s : r;
      bool ok = defined(r) && defined(lo) && defined(hi);
      if (ok) {
        auto c = state(r);
        for (std::size_t q : {lo, hi}) {
          if (q != r && !(std::real(dot<T>(c, state(q), dv)) > 0.0)) ok = false;
        }
      }
      if (!ok) {
        A[r] = nan;
        D[r] = nan;
        continue;
      }
      const double span = nuclear.spacing(a) * static_cast<double>((hi - lo) / s);
      auto c = state(r), fl = state(lo), fh = state(hi);
      std::complex<double> acc{0.0, 0.0};
      for (std::size_t e = 0; e < c.size(); ++e) {
        acc += std::complex<double>(conj_value(c[e])) * std::complex<double>(fh[e] - fl[e]);
      }
      acc *= dv / span;
      A[r] = acc.imag();
      D[r] = acc.real();
    }
  }
  return cf;
}

template <typename T, typename StateFn>
ConnectionField connection_field(const Grid &nuclear, StateFn &&state, double dv) {
  return connection_field<T>(nuclear, std::forward<StateFn>(state), [](std::size_t) { return true; }, dv);
}

/// Trapezoidal ∮ A·dR along consecutive path vertices (closed when `closed`).
inline double line_integral(const ConnectionField &cf, const std::vector<std::size_t> &vertices,
                            bool closed = true) {
  if (vertices.size() < 2) throw std::invalid_argument("line_integral: need at least two vertices");
  const Grid &g = cf.nuclear;
  const std::size_t nY = g.dim(1);
  double sum = 0.0;
  const std::size_t edges = closed ? vertices.size() : vertices.size() - 1;
  for (std::size_t k = 0; k < edges; ++k) {
    const std::size_t a = vertices[k], b = vertices[(k + 1) % vertices.size()];
    if (!cf.defined(a) || !cf.defined(b)) {
      throw std::invalid_argument("line_integral: path touches an undefined point (index " +
                                  std::to_string(cf.defined(a) ? b : a) + ")");
    }
    const double dX = g.coord(0, b / nY) - g.coord(0, a / nY);
    const double dY = g.coord(1, b % nY) - g.coord(1, a % nY);
    sum += 0.5 * (cf.AX[a] + cf.AX[b]) * dX + 0.5 * (cf.AY[a] + cf.AY[b]) * dY;
  }
  return sum;
}

} // namespace berryfact
