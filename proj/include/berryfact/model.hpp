#pragma once

// Three ions and one electron in two dimensions. Two ions are clamped at
// (±L/2, 0); the third ion R = (X, Y) and the electron r = (x, y) move. All
// pair interactions are soft-Coulomb; a quartic wall (|R|/R0)^4 binds the
// moving ion. Atomic units throughout.

#include "berryfact/grid.hpp"

#include <algorithm>
#include <array>
#include <cstddef>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace berryfact {

struct ModelParams {
  double a = 0.5;                          ///< electron-ion softening (length²)
  double b = 10.0;                         ///< ion-ion softening (length²)
  double R0 = 3.5;                         ///< quartic confinement scale
  double L = 4.0 * std::numbers::sqrt3 / 5.0; ///< fixed-ion separation
  double M = 10.0;                         ///< moving-ion mass (electron masses)

  void validate() const {
    auto positive = [](double v, const char *name) {
      if (!(v > 0.0) || !std::isfinite(v)) {
        throw std::invalid_argument(std::string("ModelParams: ") + name + " must be positive");
      }
    };
    positive(a, "a");
    positive(b, "b");
    positive(R0, "R0");
    positive(L, "L");
    positive(M, "M");
  }

  /// Fixed ion positions, (+L/2, 0) then (-L/2, 0).
  std::array<std::array<double, 2>, 2> fixed_ions() const {
    return {{{0.5 * L, 0.0}, {-0.5 * L, 0.0}}};
  }

  /// Equilateral configurations (0, ±√3/2·L), where the first two excited
  /// electronic levels meet.
  double equilateral_height() const { return 0.5 * std::numbers::sqrt3 * L; }
};

/// Electron-ion soft-Coulomb attraction, -1/sqrt(a + d²).
inline double v_en(double d, double a) { return -1.0 / std::sqrt(a + d * d); }

/// Ion-ion soft-Coulomb repulsion, 1/sqrt(b + d²).
inline double v_nn(double d, double b) { return 1.0 / std::sqrt(b + d * d); }

/// Everything in the potential that depends on R only: moving ion against
/// both fixed ions, the fixed pair, and the quartic wall.
inline double nuclear_potential(const ModelParams &p, double X, double Y) {
  const double h = 0.5 * p.L;
  const double r = std::hypot(X, Y) / p.R0;
  return v_nn(std::hypot(X - h, Y), p.b) + v_nn(std::hypot(X + h, Y), p.b) +
         v_nn(p.L, p.b) + r * r * r * r;
}

/// Electron attraction to all three ions at electron position (x, y).
inline double electron_potential(const ModelParams &p, double x, double y, double X,
                                 double Y) {
  const double h = 0.5 * p.L;
  return v_en(std::hypot(x - h, y), p.a) + v_en(std::hypot(x + h, y), p.a) +
         v_en(std::hypot(x - X, y - Y), p.a);
}

inline void require_electron_grid(const Grid &g) {
  if (g.ndim() != 2) throw std::invalid_argument("electron grid must be two-dimensional");
}

/// Total potential on the electron grid at fixed R, R-only terms included.
inline RealField potential_field(const ModelParams &p, const Grid &electron, double X,
                                 double Y) {
  require_electron_grid(electron);
  RealField v(electron);
  const double vn = nuclear_potential(p, X, Y);
  const std::size_t nx = electron.dim(0), ny = electron.dim(1);
  for (std::size_t i = 0; i < nx; ++i) {
    const double x = electron.coord(0, i);
    for (std::size_t j = 0; j < ny; ++j) {
      v[i * ny + j] = electron_potential(p, x, electron.coord(1, j), X, Y) + vn;
    }
  }
  return v;
}

/// Reflect a field about zero along every axis in `axes` (index i -> n-1-i).
template <typename T>
void reflect(std::span<const T> in, std::span<T> out, const Grid &g, const Axes &axes) {
  std::vector<bool> flip(g.ndim(), false);
  for (auto a : axes) {
    g.check_axis(a);
    flip[a] = true;
  }
  const std::size_t nd = g.ndim();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t target = 0;
  for (std::size_t a = 0; a < nd; ++a) {
    if (flip[a]) target += (g.dim(a) - 1) * g.stride(a);
  }
  for (std::size_t k = 0; k < g.size(); ++k) {
    out[target] = in[k];
    for (std::size_t a = nd; a-- > 0;) {
      const std::ptrdiff_t step = flip[a] ? -static_cast<std::ptrdiff_t>(g.stride(a))
                                          : static_cast<std::ptrdiff_t>(g.stride(a));
      if (++idx[a] < g.dim(a)) {
        target = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(target) + step);
        break;
      }
      target = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(target) -
                                        step * static_cast<std::ptrdiff_t>(g.dim(a) - 1));
      idx[a] = 0;
    }
  }
}

template <typename T>
ScalarField<T> reflect(const ScalarField<T> &f, const Axes &axes) {
  ScalarField<T> out(f.grid());
  reflect<T>(f.values(), out.values(), f.grid(), axes);
  return out;
}

/// Electronic Hamiltonian at a clamped nuclear position:
/// -½∇²_r + V(r; R), with the R-only terms included in V.
class BOOperator {
public:
  BOOperator(ModelParams params, Grid electron, double X, double Y)
      : params_(params), grid_(std::move(electron)), X_(X), Y_(Y),
        potential_(potential_field(params_, grid_, X_, Y_)) {
    params_.validate();
    for (std::size_t a = 0; a < 2; ++a) detail::require_stencil_axis(grid_, a);
  }

  const Grid &grid() const { return grid_; }
  const ModelParams &params() const { return params_; }
  const RealField &potential() const { return potential_; }
  double X() const { return X_; }
  double Y() const { return Y_; }
  std::size_t size() const { return grid_.size(); }

  void apply(std::span<const double> in, std::span<double> out) const {
    const auto v = potential_.values();
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = v[i] * in[i];
    for (std::size_t a = 0; a < 2; ++a) {
      const double h = grid_.spacing(a);
      detail::add_second_difference<double>(in, out, grid_, a, -0.5 / (h * h));
    }
  }

  void operator()(std::span<const double> in, std::span<double> out) const { apply(in, out); }

  /// Gershgorin bounds of the discrete operator.
  std::pair<double, double> spectral_bounds() const {
    const auto [lo, hi] = std::minmax_element(potential_.values().begin(), potential_.values().end());
    double kin = 0.0;
    for (std::size_t a = 0; a < 2; ++a) kin += 2.0 / (grid_.spacing(a) * grid_.spacing(a));
    return {*lo, *hi + kin};
  }

private:
  ModelParams params_;
  Grid grid_;
  double X_, Y_;
  RealField potential_;
};

inline RealField apply_bo_hamiltonian(const BOOperator &op, const RealField &f) {
  if (!(f.grid() == op.grid())) throw std::invalid_argument("apply_bo_hamiltonian: grid mismatch");
  RealField out(f.grid());
  op.apply(f.values(), out.values());
  return out;
}

/// Full Hamiltonian on the product grid (x, y, X, Y): electron kinetic energy
/// with unit mass, ion kinetic energy with mass M, and the complete potential.
class FullOperator {
public:
  FullOperator(ModelParams params, const Grid &electron, const Grid &nuclear)
      : params_(params), electron_(electron), nuclear_(nuclear),
        grid_(product_grid(electron, nuclear)), potential_(grid_.size()) {
    params_.validate();
    require_electron_grid(electron_);
    if (nuclear_.ndim() != 2) throw std::invalid_argument("nuclear grid must be two-dimensional");
    for (std::size_t a = 0; a < 4; ++a) detail::require_stencil_axis(grid_, a);
    const std::size_t nR = nuclear_.size();
    const std::size_t nX = nuclear_.dim(0), nY = nuclear_.dim(1);
    std::vector<double> vn(nR);
    for (std::size_t i = 0; i < nX; ++i) {
      for (std::size_t j = 0; j < nY; ++j) {
        vn[i * nY + j] = nuclear_potential(params_, nuclear_.coord(0, i), nuclear_.coord(1, j));
      }
    }
    const std::size_t ny = electron_.dim(1);
    for (std::size_t e = 0; e < electron_.size(); ++e) {
      const double x = electron_.coord(0, e / ny), y = electron_.coord(1, e % ny);
      double *row = potential_.data() + e * nR;
      for (std::size_t i = 0; i < nX; ++i) {
        const double X = nuclear_.coord(0, i);
        for (std::size_t j = 0; j < nY; ++j) {
          row[i * nY + j] = electron_potential(params_, x, y, X, nuclear_.coord(1, j)) +
                            vn[i * nY + j];
        }
      }
    }
    for (std::size_t a = 0; a < 4; ++a) {
      const double h = grid_.spacing(a);
      const double mass = a < 2 ? 1.0 : params_.M;
      coef_[a] = -0.5 / (mass * h * h);
    }
  }

  const Grid &grid() const { return grid_; }
  const Grid &electron_grid() const { return electron_; }
  const Grid &nuclear_grid() const { return nuclear_; }
  const ModelParams &params() const { return params_; }
  std::size_t size() const { return grid_.size(); }
  std::span<const double> potential() const { return potential_; }

  void apply(std::span<const double> in, std::span<double> out) const {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = potential_[i] * in[i];
    for (std::size_t a = 0; a < 4; ++a) {
      detail::add_second_difference<double>(in, out, grid_, a, coef_[a]);
    }
  }

  void operator()(std::span<const double> in, std::span<double> out) const { apply(in, out); }

  std::pair<double, double> spectral_bounds() const {
    const auto [lo, hi] = std::minmax_element(potential_.begin(), potential_.end());
    double kin = 0.0;
    for (double c : coef_) kin += -4.0 * c;
    return {*lo, *hi + kin};
  }

  double min_potential() const { return *std::min_element(potential_.begin(), potential_.end()); }

  /// Simultaneous mirror (x, X) -> (-x, -X).
  void reflect_x(std::span<const double> in, std::span<double> out) const {
    reflect<double>(in, out, grid_, {0, 2});
  }
  /// Simultaneous mirror (y, Y) -> (-y, -Y).
  void reflect_y(std::span<const double> in, std::span<double> out) const {
    reflect<double>(in, out, grid_, {1, 3});
  }

private:
  ModelParams params_;
  Grid electron_, nuclear_, grid_;
  std::vector<double> potential_;
  std::array<double, 4> coef_{};
};

inline RealField apply_full_hamiltonian(const FullOperator &op, const RealField &f) {
  if (!(f.grid() == op.grid())) throw std::invalid_argument("apply_full_hamiltonian: grid mismatch");
  RealField out(f.grid());
  op.apply(f.values(), out.values());
  return out;
}

} // namespace berryfact
