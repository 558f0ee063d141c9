#pragma once

// Born-Oppenheimer scan of the nuclear plane: electronic eigenstates at every
// nuclear grid point, a real gauge with sign continuity, sign seams, and the
// polarization field ∫ r Φ dr.

#include "berryfact/eigensolve.hpp"
#include "berryfact/grid.hpp"
#include "berryfact/model.hpp"
#include "berryfact/parallel.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace berryfact {

/// Levels closer than this are treated as one degenerate cluster.
inline constexpr double kDegeneracyTol = 1e-6;

using Vec2 = std::array<double, 2>;

struct BOLevel {
  double energy = 0.0;
  RealField state; ///< quadrature-normalised on the electron grid
  double residual = 0.0;
};

/// Raised when an electronic solve fails; carries the nuclear position.
class BOSolveError : public ConvergenceError {
public:
  BOSolveError(const ConvergenceError &e, double X, double Y)
      : ConvergenceError("BO solve at R=(" + std::to_string(X) + ", " + std::to_string(Y) +
                             "): " + e.what(),
                         e.best_residuals),
        X(X), Y(Y) {}
  double X, Y;
};

/// Lowest n_states electronic levels at fixed R. Level 0 is the ground state;
/// levels 1 and 2 are the pair that meets at the conical intersections.
inline std::vector<BOLevel> solve_bo_at(const ModelParams &params, const Grid &electron,
                                        double X, double Y, std::size_t n_states,
                                        EigenRequest req = {}) {
  if (n_states < 3) throw std::invalid_argument("solve_bo_at: n_states must be at least 3");
  BOOperator op(params, electron, X, Y);
  req.k = n_states;
  std::vector<EigenPair> pairs;
  try {
    pairs = lowest_eigenpairs(op, op.size(), req);
  } catch (const ConvergenceError &e) {
    throw BOSolveError(e, X, Y);
  }
  const double scale = 1.0 / std::sqrt(electron.cell_volume());
  std::vector<BOLevel> out;
  out.reserve(n_states);
  for (auto &p : pairs) {
    BOLevel l{p.value, RealField(electron), p.residual * scale};
    for (std::size_t i = 0; i < op.size(); ++i) l.state[i] = p.vector(static_cast<Eigen::Index>(i)) * scale;
    out.push_back(std::move(l));
  }
  return out;
}

/// (∫ x Φ dr, ∫ y Φ dr) of a state sampled on an (x, y) grid.
inline Vec2 polarization_vector(std::span<const double> state, const Grid &electron) {
  require_electron_grid(electron);
  const std::size_t nx = electron.dim(0), ny = electron.dim(1);
  double px = 0.0, py = 0.0;
  for (std::size_t i = 0; i < nx; ++i) {
    const double x = electron.coord(0, i);
    double row = 0.0, rowy = 0.0;
    for (std::size_t j = 0; j < ny; ++j) {
      const double v = state[i * ny + j];
      row += v;
      rowy += electron.coord(1, j) * v;
    }
    px += x * row;
    py += rowy;
  }
  const double dv = electron.cell_volume();
  return {px * dv, py * dv};
}

inline Vec2 polarization_vector(const RealField &state) {
  return polarization_vector(state.values(), state.grid());
}

struct SeamEdge {
  enum class Kind { L1, L2, Other };
  std::size_t state = 0;
  std::size_t from = 0, to = 0; ///< flat nuclear indices, `to` is the +X or +Y neighbour
  double overlap = 0.0;
  Kind kind = Kind::Other;
};

inline const char *to_string(SeamEdge::Kind k) {
  switch (k) {
  case SeamEdge::Kind::L1: return "L1";
  case SeamEdge::Kind::L2: return "L2";
  default: return "other";
  }
}

struct SeamReport {
  std::vector<SeamEdge> edges;    ///< negative neighbour overlaps
  std::vector<SeamEdge> singular; ///< |overlap| below the floor; sign undetermined

  std::size_t count(std::size_t state, SeamEdge::Kind kind) const {
    std::size_t c = 0;
    for (const auto &e : edges) c += (e.state == state && e.kind == kind) ? 1 : 0;
    return c;
  }
  std::size_t count(std::size_t state) const {
    std::size_t c = 0;
    for (const auto &e : edges) c += e.state == state ? 1 : 0;
    return c;
  }
  bool is_seam(std::size_t state, std::size_t a, std::size_t b) const {
    for (const auto &e : edges) {
      if (e.state == state && ((e.from == a && e.to == b) || (e.from == b && e.to == a))) return true;
    }
    return false;
  }
};

/// Lowest location of the gap ε₂ − ε₁ in one half plane, with a parabolic
/// refinement across the neighbouring grid lines.
struct CIEstimate {
  std::size_t index = 0; ///< flat nuclear index of the minimal gap
  double X = 0.0, Y = 0.0;         ///< grid point of the minimum
  double X_refined = 0.0, Y_refined = 0.0;
  double gap = 0.0;
  double energy = 0.0; ///< mean of the two levels at the grid minimum
};

class BOScanResult {
public:
  BOScanResult() = default;
  BOScanResult(ModelParams params, Grid electron, Grid nuclear, std::size_t n_states)
      : params_(params), electron_(std::move(electron)), nuclear_(std::move(nuclear)),
        n_states_(n_states), states_(nuclear_.size() * n_states * electron_.size()),
        energies_(nuclear_.size() * n_states), residuals_(nuclear_.size() * n_states),
        polarization_(nuclear_.size() * n_states) {}

  const ModelParams &params() const { return params_; }
  const Grid &electron_grid() const { return electron_; }
  const Grid &nuclear_grid() const { return nuclear_; }
  std::size_t n_states() const { return n_states_; }

  std::span<const double> state(std::size_t r, std::size_t n) const {
    return {states_.data() + (r * n_states_ + n) * electron_.size(), electron_.size()};
  }
  std::span<double> state(std::size_t r, std::size_t n) {
    return {states_.data() + (r * n_states_ + n) * electron_.size(), electron_.size()};
  }
  RealField state_field(std::size_t r, std::size_t n) const {
    auto s = state(r, n);
    return RealField(electron_, std::vector<double>(s.begin(), s.end()));
  }
  double energy(std::size_t r, std::size_t n) const { return energies_[r * n_states_ + n]; }
  double &energy(std::size_t r, std::size_t n) { return energies_[r * n_states_ + n]; }
  double residual(std::size_t r, std::size_t n) const { return residuals_[r * n_states_ + n]; }
  double &residual(std::size_t r, std::size_t n) { return residuals_[r * n_states_ + n]; }
  const Vec2 &polarization(std::size_t r, std::size_t n) const { return polarization_[r * n_states_ + n]; }
  Vec2 &polarization(std::size_t r, std::size_t n) { return polarization_[r * n_states_ + n]; }

  /// ε_n over the nuclear grid.
  RealField surface(std::size_t n) const {
    RealField f(nuclear_);
    for (std::size_t r = 0; r < nuclear_.size(); ++r) f[r] = energy(r, n);
    return f;
  }
  /// g(R) = ε₂ − ε₁ (first and second excited levels).
  RealField gap() const {
    RealField f(nuclear_);
    for (std::size_t r = 0; r < nuclear_.size(); ++r) f[r] = energy(r, 2) - energy(r, 1);
    return f;
  }

  /// ⟨Φ_n(R_a)|Φ_n(R_b)⟩ over the electron grid.
  double overlap(std::size_t n, std::size_t a, std::size_t b) const {
    return dot<double>(state(a, n), state(b, n), electron_.cell_volume());
  }

private:
  ModelParams params_;
  Grid electron_, nuclear_;
  std::size_t n_states_ = 0;
  std::vector<double> states_; // [R][n][r]
  std::vector<double> energies_;
  std::vector<double> residuals_;
  std::vector<Vec2> polarization_;
};

/// solve_bo_at over every nuclear grid point, in parallel. Each point uses the
/// same seed, so results do not depend on the thread count.
inline BOScanResult scan_bo(const ModelParams &params, const Grid &electron,
                            const Grid &nuclear, std::size_t n_states,
                            const EigenRequest &req = {}, unsigned threads = 0) {
  params.validate();
  require_electron_grid(electron);
  if (nuclear.ndim() != 2) throw std::invalid_argument("scan_bo: nuclear grid must be two-dimensional");
  BOScanResult scan(params, electron, nuclear, n_states);
  const std::size_t nY = nuclear.dim(1);
  parallel_for(nuclear.size(), threads, [&](std::size_t r) {
    const double X = nuclear.coord(0, r / nY), Y = nuclear.coord(1, r % nY);
    auto levels = solve_bo_at(params, electron, X, Y, n_states, req);
    for (std::size_t n = 0; n < n_states; ++n) {
      scan.energy(r, n) = levels[n].energy;
      scan.residual(r, n) = levels[n].residual;
      auto dst = scan.state(r, n);
      std::copy(levels[n].state.values().begin(), levels[n].state.values().end(), dst.begin());
      scan.polarization(r, n) = polarization_vector(levels[n].state);
    }
  });
  return scan;
}

namespace detail {

inline std::optional<CIEstimate> gap_minimum(const BOScanResult &scan, int half) {
  const Grid &g = scan.nuclear_grid();
  const std::size_t nX = g.dim(0), nY = g.dim(1);
  std::optional<CIEstimate> best;
  for (std::size_t i = 0; i < nX; ++i) {
    for (std::size_t j = 0; j < nY; ++j) {
      const double Y = g.coord(1, j);
      if ((half > 0 && !(Y > 0.0)) || (half < 0 && !(Y < 0.0))) continue;
      const std::size_t r = i * nY + j;
      const double gap = scan.energy(r, 2) - scan.energy(r, 1);
      if (!best || gap < best->gap) {
        best = CIEstimate{r, g.coord(0, i), Y, g.coord(0, i), Y, gap,
                          0.5 * (scan.energy(r, 1) + scan.energy(r, 2))};
      }
    }
  }
  if (!best) return best;
  // vertex of the parabola through three gap samples along each axis
  const std::size_t i = best->index / nY, j = best->index % nY;
  auto gap_at = [&](std::size_t a, std::size_t b) {
    const std::size_t r = a * nY + b;
    return scan.energy(r, 2) - scan.energy(r, 1);
  };
  auto vertex = [](double fm, double f0, double fp) {
    const double den = fm - 2.0 * f0 + fp;
    if (!(den > 0.0)) return 0.0;
    return std::clamp(0.5 * (fm - fp) / den, -0.5, 0.5);
  };
  if (i > 0 && i + 1 < nX) {
    best->X_refined = best->X + g.spacing(0) * vertex(gap_at(i - 1, j), gap_at(i, j), gap_at(i + 1, j));
  }
  if (j > 0 && j + 1 < nY) {
    best->Y_refined = best->Y + g.spacing(1) * vertex(gap_at(i, j - 1), gap_at(i, j), gap_at(i, j + 1));
  }
  return best;
}

} // namespace detail

/// Gap minima in the upper (Y > 0) and lower (Y < 0) half planes. A half
/// plane without grid points yields nothing.
struct CILocation {
  std::optional<CIEstimate> upper, lower;
};

inline CILocation locate_conical_intersections(const BOScanResult &scan) {
  return {detail::gap_minimum(scan, +1), detail::gap_minimum(scan, -1)};
}

namespace detail {

inline void flip_state(BOScanResult &scan, std::size_t r, std::size_t n) {
  for (auto &v : scan.state(r, n)) v = -v;
  auto &p = scan.polarization(r, n);
  p = {-p[0], -p[1]};
}

/// Rotate the degenerate cluster [lo, hi) at point r onto the reference
/// states (orthogonal Procrustes); ties resolve toward the identity.
template <typename RefFn>
void align_cluster(BOScanResult &scan, std::size_t r, std::size_t lo, std::size_t hi, RefFn &&ref) {
  const std::size_t c = hi - lo;
  const double dv = scan.electron_grid().cell_volume();
  Eigen::MatrixXd Mx(c, c);
  for (std::size_t a = 0; a < c; ++a) {
    auto ra = ref(lo + a);
    for (std::size_t b = 0; b < c; ++b) {
      Mx(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          dot<double>(ra, scan.state(r, lo + b), dv);
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Mx, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::MatrixXd Q = svd.matrixV() * svd.matrixU().transpose();
  const std::size_t ne = scan.electron_grid().size();
  std::vector<double> mixed(c * ne, 0.0);
  for (std::size_t a = 0; a < c; ++a) {
    for (std::size_t b = 0; b < c; ++b) {
      const double q = Q(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a));
      auto src = scan.state(r, lo + b);
      for (std::size_t e = 0; e < ne; ++e) mixed[a * ne + e] += q * src[e];
    }
  }
  for (std::size_t a = 0; a < c; ++a) {
    auto dst = scan.state(r, lo + a);
    std::copy(mixed.begin() + static_cast<std::ptrdiff_t>(a * ne),
              mixed.begin() + static_cast<std::ptrdiff_t>((a + 1) * ne), dst.begin());
    scan.polarization(r, lo + a) = polarization_vector(dst, scan.electron_grid());
  }
}

/// Align every state at r with reference states ref(n): degenerate clusters
/// are rotated, isolated levels get the sign that makes the overlap positive.
template <typename RefFn>
void align_point(BOScanResult &scan, std::size_t r, RefFn &&ref) {
  const std::size_t ns = scan.n_states();
  const double dv = scan.electron_grid().cell_volume();
  std::size_t n = 0;
  while (n < ns) {
    std::size_t hi = n + 1;
    while (hi < ns && scan.energy(r, hi) - scan.energy(r, hi - 1) < kDegeneracyTol) ++hi;
    if (hi - n > 1) {
      align_cluster(scan, r, n, hi, ref);
    } else if (dot<double>(ref(n), scan.state(r, n), dv) < 0.0) {
      flip_state(scan, r, n);
    }
    n = hi;
  }
}

} // namespace detail

/// Sign convention linking the left half plane to the mirrored right half.
/// Symmetric: Φ(−X,Y) = P_xΦ(X,Y), so seams on X = 0 fall where a state is
/// odd in x. Antisymmetric (excited states only; the ground state stays
/// symmetric): Φ(−X,Y) = −P_xΦ(X,Y), seams fall where a state is even in x.
/// FewestSeams picks, per state, whichever of the two leaves fewer negative
/// overlaps across X = 0; without a degeneracy on the axis that is none.
enum class MirrorConvention { Symmetric, Antisymmetric, FewestSeams };

/// Real gauge with sign continuity.
///
/// The right half plane (X ≥ 0) is swept column by column from the rightmost
/// column toward X = 0; the rightmost column itself is aligned outward from
/// its Y = 0 point, every other point to its +X neighbour. The left half plane
/// is aligned point by point to the electron-mirrored state of its partner at
/// −X, so any unavoidable sign change sits on the edges joining X = 0 to its
/// −X neighbours. Every negative overlap between grid neighbours is then
/// collected into the report.
///
/// In this model the first excited state is odd in x on X = 0 for
/// |Y| < Y_eq and even beyond, the second the other way round. The symmetric
/// convention therefore puts the first state's seam on |Y| < Y_eq (L2) and
/// the second's on |Y| > Y_eq (L1); the antisymmetric one swaps them.
inline SeamReport fix_gauge_real(BOScanResult &scan, double overlap_floor = 1e-8,
                                 MirrorConvention convention = MirrorConvention::FewestSeams) {
  const Grid &g = scan.nuclear_grid();
  const Grid &eg = scan.electron_grid();
  const std::size_t nX = g.dim(0), nY = g.dim(1), ns = scan.n_states();
  const std::size_t ne = eg.size();
  auto at = [nY](std::size_t i, std::size_t j) { return i * nY + j; };
  const bool mirror = g.symmetric_about_zero(0) && nX % 2 == 1 && nX > 1;
  const std::size_t first = mirror ? (nX - 1) / 2 : 0;

  // anchor: largest-magnitude component positive (the solver's convention)
  const std::size_t jc = g.nearest_index(1, 0.0);
  for (std::size_t n = 0; n < ns; ++n) {
    auto s = scan.state(at(nX - 1, jc), n);
    std::size_t imax = 0;
    for (std::size_t e = 0; e < ne; ++e) if (std::abs(s[e]) > std::abs(s[imax])) imax = e;
    if (s[imax] < 0.0) detail::flip_state(scan, at(nX - 1, jc), n);
  }
  auto neighbour_ref = [&](std::size_t r) {
    return [&scan, r](std::size_t n) { return std::span<const double>(scan.state(r, n)); };
  };
  for (std::size_t j = jc + 1; j < nY; ++j) detail::align_point(scan, at(nX - 1, j), neighbour_ref(at(nX - 1, j - 1)));
  for (std::size_t j = jc; j-- > 0;) detail::align_point(scan, at(nX - 1, j), neighbour_ref(at(nX - 1, j + 1)));
  for (std::size_t i = nX - 1; i-- > first;) {
    for (std::size_t j = 0; j < nY; ++j) detail::align_point(scan, at(i, j), neighbour_ref(at(i + 1, j)));
  }
  if (mirror) {
    std::vector<double> buf(ne);
    for (std::size_t i = 0; i < first; ++i) {
      for (std::size_t j = 0; j < nY; ++j) {
        const std::size_t partner = at(nX - 1 - i, j);
        std::vector<std::vector<double>> mirrored(ns);
        for (std::size_t n = 0; n < ns; ++n) {
          mirrored[n].resize(ne);
          reflect<double>(scan.state(partner, n), mirrored[n], eg, {0});
          if (convention == MirrorConvention::Antisymmetric && n > 0) {
            for (auto &v : mirrored[n]) v = -v;
          }
        }
        detail::align_point(scan, at(i, j), [&](std::size_t n) { return std::span<const double>(mirrored[n]); });
      }
    }
    if (convention == MirrorConvention::FewestSeams && first > 0) {
      for (std::size_t n = 0; n < ns; ++n) {
        std::size_t neg = 0, pos = 0;
        for (std::size_t j = 0; j < nY; ++j) {
          const double o = scan.overlap(n, at(first - 1, j), at(first, j));
          if (std::abs(o) < overlap_floor) continue;
          (o < 0.0 ? neg : pos) += 1;
        }
        if (neg <= pos) continue;
        for (std::size_t i = 0; i < first; ++i) {
          for (std::size_t j = 0; j < nY; ++j) detail::flip_state(scan, at(i, j), n);
        }
      }
    }
  }

  // seams
  SeamReport report;
  const double yeq = scan.params().equilateral_height();
  const std::size_t i0 = g.nearest_index(0, 0.0);
  const bool axis_on_grid = std::abs(g.coord(0, i0)) < 1e-9 * g.spacing(0);
  for (std::size_t n = 0; n < ns; ++n) {
    for (std::size_t i = 0; i < nX; ++i) {
      for (std::size_t j = 0; j < nY; ++j) {
        const std::size_t r = at(i, j);
        for (int dir = 0; dir < 2; ++dir) {
          const std::size_t ii = i + (dir == 0), jj = j + (dir == 1);
          if (ii >= nX || jj >= nY) continue;
          const std::size_t q = at(ii, jj);
          const double o = scan.overlap(n, r, q);
          SeamEdge e{n, r, q, o, SeamEdge::Kind::Other};
          if (dir == 0 && axis_on_grid && (i == i0 || ii == i0)) {
            const double y = std::abs(g.coord(1, j));
            e.kind = y > yeq ? SeamEdge::Kind::L1 : SeamEdge::Kind::L2;
          }
          if (std::abs(o) < overlap_floor) {
            report.singular.push_back(e);
          } else if (o < 0.0) {
            report.edges.push_back(e);
          }
        }
      }
    }
  }
  return report;
}

/// ε̃_n = ε_n + Σ_ν ⟨∂_νΦ_n|∂_νΦ_n⟩ / 2M (A^BO vanishes in the real gauge).
/// Points whose stencil crosses a seam edge of that state are NaN.
inline RealField generalized_bo_pes(const BOScanResult &scan, std::size_t n,
                                    const SeamReport &seams) {
  const Grid &g = scan.nuclear_grid();
  const std::size_t nX = g.dim(0), nY = g.dim(1);
  const std::size_t ne = scan.electron_grid().size();
  const double dv = scan.electron_grid().cell_volume();
  const double M = scan.params().M;
  for (std::size_t a = 0; a < 2; ++a) detail::require_stencil_axis(g, a);
  RealField out(g);
  for (std::size_t i = 0; i < nX; ++i) {
    for (std::size_t j = 0; j < nY; ++j) {
      const std::size_t r = i * nY + j;
      double corr = 0.0;
      bool ok = true;
      for (std::size_t a = 0; a < 2 && ok; ++a) {
        const std::size_t idx = a == 0 ? i : j, dim = g.dim(a), s = g.stride(a);
        const std::size_t lo = idx > 0 ? r - s : r, hi = idx + 1 < dim ? r + s : r;
        if ((lo != r && seams.is_seam(n, lo, r)) || (hi != r && seams.is_seam(n, r, hi))) {
          ok = false;
          break;
        }
        const double span = g.spacing(a) * static_cast<double>((hi - lo) / s);
        auto fl = scan.state(lo, n), fh = scan.state(hi, n);
        double sq = 0.0;
        for (std::size_t e = 0; e < ne; ++e) {
          const double d = (fh[e] - fl[e]) / span;
          sq += d * d;
        }
        corr += sq * dv;
      }
      out[r] = ok ? scan.energy(r, n) + corr / (2.0 * M) : std::numeric_limits<double>::quiet_NaN();
    }
  }
  return out;
}

} // namespace berryfact
