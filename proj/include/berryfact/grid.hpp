#pragma once

// Uniform rectangular grids, sampled fields, and the finite-difference /
// quadrature primitives everything else is built on.
//
// Layout is row-major: the last axis is contiguous. Electron-only fields use
// axis order (x, y); full fields use (x, y, X, Y).

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace berryfact {

template <typename T>
struct is_complex : std::false_type {};
template <typename T>
struct is_complex<std::complex<T>> : std::true_type {};
template <typename T>
inline constexpr bool is_complex_v = is_complex<T>::value;

template <typename T>
constexpr T conj_value(const T &v) {
  if constexpr (is_complex_v<T>) {
    return std::conj(v);
  } else {
    return v;
  }
}

template <typename T>
constexpr double abs2(const T &v) {
  if constexpr (is_complex_v<T>) {
    return std::norm(v);
  } else {
    return v * v;
  }
}

using Axes = std::vector<std::size_t>;

class Grid {
public:
  Grid() = default;

  Grid(std::vector<std::size_t> dims, std::vector<double> spacing,
       std::vector<double> origin)
      : dims_(std::move(dims)), spacing_(std::move(spacing)),
        origin_(std::move(origin)) {
    if (spacing_.size() != dims_.size() || origin_.size() != dims_.size()) {
      throw std::invalid_argument("Grid: dims, spacing and origin differ in length");
    }
    for (std::size_t a = 0; a < dims_.size(); ++a) {
      if (dims_[a] < 1) {
        throw std::invalid_argument("Grid: axis " + std::to_string(a) + " has no points");
      }
      if (!(spacing_[a] > 0.0) || !std::isfinite(spacing_[a])) {
        throw std::invalid_argument("Grid: spacing on axis " + std::to_string(a) +
                                    " must be positive");
      }
    }
    build_strides();
  }

  /// Grid over [-extent, extent] per axis with the given point counts. A
  /// single-point axis sits at 0 with unit spacing.
  static Grid symmetric(const std::vector<std::size_t> &points,
                        const std::vector<double> &extents) {
    if (points.size() != extents.size()) {
      throw std::invalid_argument("Grid::symmetric: points/extents length mismatch");
    }
    std::vector<double> h(points.size()), o(points.size());
    for (std::size_t a = 0; a < points.size(); ++a) {
      if (points[a] <= 1) {
        h[a] = 1.0;
        o[a] = 0.0;
      } else {
        h[a] = 2.0 * extents[a] / static_cast<double>(points[a] - 1);
        o[a] = -extents[a];
      }
    }
    return Grid(points, std::move(h), std::move(o));
  }

  std::size_t ndim() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  double spacing(std::size_t axis) const { return spacing_.at(axis); }
  double origin(std::size_t axis) const { return origin_.at(axis); }
  const std::vector<std::size_t> &dims() const { return dims_; }
  const std::vector<double> &spacings() const { return spacing_; }
  const std::vector<double> &origins() const { return origin_; }
  std::size_t stride(std::size_t axis) const { return strides_.at(axis); }
  std::size_t size() const { return size_; }

  double coord(std::size_t axis, std::size_t i) const {
    return origin_[axis] + static_cast<double>(i) * spacing_[axis];
  }

  double cell_volume() const {
    return std::accumulate(spacing_.begin(), spacing_.end(), 1.0,
                           std::multiplies<>());
  }

  double cell_volume(const Axes &axes) const {
    double v = 1.0;
    for (auto a : axes) v *= spacing(a);
    return v;
  }

  /// Nearest grid index along an axis, clamped to the grid.
  std::size_t nearest_index(std::size_t axis, double x) const {
    const double t = std::round((x - origin_[axis]) / spacing_[axis]);
    const double hi = static_cast<double>(dims_[axis] - 1);
    return static_cast<std::size_t>(std::clamp(t, 0.0, hi));
  }

  std::size_t ravel(std::span<const std::size_t> idx) const {
    std::size_t k = 0;
    for (std::size_t a = 0; a < dims_.size(); ++a) k += idx[a] * strides_[a];
    return k;
  }

  std::vector<std::size_t> unravel(std::size_t k) const {
    std::vector<std::size_t> idx(dims_.size());
    for (std::size_t a = 0; a < dims_.size(); ++a) {
      idx[a] = k / strides_[a];
      k %= strides_[a];
    }
    return idx;
  }

  /// Grid formed by the listed axes, in the listed order.
  Grid select(const Axes &axes) const {
    std::vector<std::size_t> d;
    std::vector<double> h, o;
    for (auto a : axes) {
      check_axis(a);
      d.push_back(dims_[a]);
      h.push_back(spacing_[a]);
      o.push_back(origin_[a]);
    }
    return Grid(std::move(d), std::move(h), std::move(o));
  }

  /// Axes not in the given set, ascending.
  Axes complement(const Axes &axes) const {
    Axes rest;
    for (std::size_t a = 0; a < dims_.size(); ++a) {
      if (std::find(axes.begin(), axes.end(), a) == axes.end()) rest.push_back(a);
    }
    return rest;
  }

  /// Whether each axis is symmetric about zero (reflection i -> n-1-i maps
  /// the grid onto itself).
  bool symmetric_about_zero(std::size_t axis) const {
    const double lo = coord(axis, 0);
    const double hi = coord(axis, dims_[axis] - 1);
    return std::abs(lo + hi) <= 1e-12 * std::max(1.0, std::abs(hi));
  }

  void check_axis(std::size_t axis) const {
    if (axis >= dims_.size()) {
      throw std::out_of_range("axis " + std::to_string(axis) +
                              " out of range for grid of dimension " +
                              std::to_string(dims_.size()));
    }
  }

  friend bool operator==(const Grid &a, const Grid &b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.origin_ == b.origin_;
  }

private:
  void build_strides() {
    strides_.assign(dims_.size(), 1);
    size_ = 1;
    for (std::size_t a = dims_.size(); a-- > 0;) {
      strides_[a] = size_;
      size_ *= dims_[a];
    }
  }

  std::vector<std::size_t> dims_;
  std::vector<double> spacing_;
  std::vector<double> origin_;
  std::vector<std::size_t> strides_;
  std::size_t size_ = 1;
};

/// Cartesian product grid: axes of `a` followed by axes of `b`.
inline Grid product_grid(const Grid &a, const Grid &b) {
  auto d = a.dims();
  auto h = a.spacings();
  auto o = a.origins();
  d.insert(d.end(), b.dims().begin(), b.dims().end());
  h.insert(h.end(), b.spacings().begin(), b.spacings().end());
  o.insert(o.end(), b.origins().begin(), b.origins().end());
  return Grid(std::move(d), std::move(h), std::move(o));
}

template <typename T = double>
class ScalarField {
public:
  using value_type = T;

  ScalarField() = default;
  explicit ScalarField(Grid grid) : grid_(std::move(grid)), values_(grid_.size(), T{}) {}
  ScalarField(Grid grid, std::vector<T> values)
      : grid_(std::move(grid)), values_(std::move(values)) {
    if (values_.size() != grid_.size()) {
      throw std::invalid_argument("ScalarField: value count " +
                                  std::to_string(values_.size()) +
                                  " does not match grid size " +
                                  std::to_string(grid_.size()));
    }
  }

  const Grid &grid() const { return grid_; }
  std::size_t size() const { return values_.size(); }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  T *data() { return values_.data(); }
  const T *data() const { return values_.data(); }

  T &operator[](std::size_t i) { return values_[i]; }
  const T &operator[](std::size_t i) const { return values_[i]; }

  ScalarField &operator+=(const ScalarField &o) {
    require_same_grid(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ScalarField &operator-=(const ScalarField &o) {
    require_same_grid(o);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ScalarField &operator*=(T s) {
    for (auto &v : values_) v *= s;
    return *this;
  }

  void require_same_grid(const ScalarField &o) const {
    if (!(grid_ == o.grid_)) throw std::invalid_argument("ScalarField: grid mismatch");
  }

private:
  Grid grid_;
  std::vector<T> values_;
};

using RealField = ScalarField<double>;
using ComplexField = ScalarField<std::complex<double>>;

namespace detail {

/// out += coef * (f[i-1] - 2 f[i] + f[i+1]) along `axis`, with zero samples
/// outside the grid (Dirichlet).
template <typename T, typename C>
void add_second_difference(std::span<const T> in, std::span<T> out, const Grid &g,
                           std::size_t axis, C coef) {
  const std::size_t n = g.dim(axis);
  const std::size_t s = g.stride(axis);
  const std::size_t outer = g.size() / (n * s);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * n * s;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = base + i * s;
      const T *c = in.data() + row;
      T *r = out.data() + row;
      for (std::size_t j = 0; j < s; ++j) r[j] -= T(2.0) * coef * c[j];
      if (i > 0) {
        const T *l = c - s;
        for (std::size_t j = 0; j < s; ++j) r[j] += coef * l[j];
      }
      if (i + 1 < n) {
        const T *u = c + s;
        for (std::size_t j = 0; j < s; ++j) r[j] += coef * u[j];
      }
    }
  }
}

inline void require_stencil_axis(const Grid &g, std::size_t axis) {
  g.check_axis(axis);
  if (g.dim(axis) < 3) {
    throw std::invalid_argument("axis " + std::to_string(axis) +
                                " needs at least 3 points for a central stencil");
  }
}

/// Visit every index, calling f(flat_index, reduced_index) where the reduced
/// index enumerates the grid formed by `keep` axes.
template <typename F>
void for_each_reduced(const Grid &g, const Axes &keep, F &&f) {
  const std::size_t nd = g.ndim();
  std::vector<std::size_t> keep_stride(nd, 0);
  {
    std::size_t s = 1;
    for (std::size_t q = keep.size(); q-- > 0;) {
      keep_stride[keep[q]] = s;
      s *= g.dim(keep[q]);
    }
  }
  std::vector<std::size_t> idx(nd, 0);
  std::size_t red = 0;
  for (std::size_t k = 0; k < g.size(); ++k) {
    f(k, red);
    // increment the multi-index, last axis fastest
    for (std::size_t a = nd; a-- > 0;) {
      if (++idx[a] < g.dim(a)) {
        red += keep_stride[a];
        break;
      }
      red -= keep_stride[a] * (idx[a] - 1);
      idx[a] = 0;
    }
  }
}

} // namespace detail

/// Sum of second derivatives over `axes` with the 3-point stencil.
template <typename T>
ScalarField<T> laplacian_apply(const ScalarField<T> &f, const Axes &axes) {
  for (auto a : axes) detail::require_stencil_axis(f.grid(), a);
  ScalarField<T> out(f.grid());
  for (auto a : axes) {
    const double h = f.grid().spacing(a);
    detail::add_second_difference<T>(f.values(), out.values(), f.grid(), a,
                                     T(1.0 / (h * h)));
  }
  return out;
}

/// Riemann sum over all axes.
template <typename T>
T integrate(const ScalarField<T> &f) {
  T s{};
  for (const auto &v : f.values()) s += v;
  return s * f.grid().cell_volume();
}

/// Riemann sum over `axes`; the result lives on the remaining axes (a
/// zero-dimensional grid when every axis is integrated).
template <typename T>
ScalarField<T> integrate(const ScalarField<T> &f, const Axes &axes) {
  if (axes.empty()) throw std::invalid_argument("integrate: empty axis set");
  for (auto a : axes) f.grid().check_axis(a);
  const Axes keep = f.grid().complement(axes);
  ScalarField<T> out(f.grid().select(keep));
  auto ov = out.values();
  auto fv = f.values();
  detail::for_each_reduced(f.grid(), keep,
                           [&](std::size_t k, std::size_t r) { ov[r] += fv[k]; });
  const double w = f.grid().cell_volume(axes);
  for (auto &v : ov) v *= w;
  return out;
}

/// Central difference along `axis`, first-order one-sided at the two ends.
template <typename T>
ScalarField<T> gradient(const ScalarField<T> &f, std::size_t axis) {
  detail::require_stencil_axis(f.grid(), axis);
  const Grid &g = f.grid();
  const std::size_t n = g.dim(axis);
  const std::size_t s = g.stride(axis);
  const std::size_t outer = g.size() / (n * s);
  const double h = g.spacing(axis);
  ScalarField<T> out(g);
  auto in = f.values();
  auto r = out.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        const std::size_t k = o * n * s + i * s + j;
        if (i == 0) {
          r[k] = (in[k + s] - in[k]) / h;
        } else if (i + 1 == n) {
          r[k] = (in[k] - in[k - s]) / h;
        } else {
          r[k] = (in[k + s] - in[k - s]) / (2.0 * h);
        }
      }
    }
  }
  return out;
}

/// ∫ conj(f) g over all axes.
template <typename T>
T inner_product(const ScalarField<T> &f, const ScalarField<T> &g) {
  f.require_same_grid(g);
  T s{};
  auto a = f.values();
  auto b = g.values();
  for (std::size_t i = 0; i < a.size(); ++i) s += conj_value(a[i]) * b[i];
  return s * f.grid().cell_volume();
}

/// ∫ conj(f) g over `axes`, leaving a field on the remaining axes.
template <typename T>
ScalarField<T> inner_product(const ScalarField<T> &f, const ScalarField<T> &g,
                             const Axes &axes) {
  f.require_same_grid(g);
  ScalarField<T> prod(f.grid());
  auto a = f.values();
  auto b = g.values();
  auto p = prod.values();
  for (std::size_t i = 0; i < a.size(); ++i) p[i] = conj_value(a[i]) * b[i];
  return integrate(prod, axes);
}

/// Quadrature inner product of two raw sample arrays on a grid with cell
/// volume `dv`.
template <typename T>
T dot(std::span<const T> a, std::span<const T> b, double dv) {
  T s{};
  for (std::size_t i = 0; i < a.size(); ++i) s += conj_value(a[i]) * b[i];
  return s * dv;
}

template <typename T>
double norm(const ScalarField<T> &f) {
  double s = 0.0;
  for (const auto &v : f.values()) s += abs2(v);
  return std::sqrt(s * f.grid().cell_volume());
}

/// Scale in place so that ∫|f|² = 1. Returns the previous norm.
template <typename T>
double normalize(ScalarField<T> &f) {
  const double n = norm(f);
  if (n == 0.0) throw std::invalid_argument("normalize: zero field");
  f *= T(1.0 / n);
  return n;
}

/// Sample a function of the coordinates onto a grid.
template <typename T = double, typename F>
ScalarField<T> sample(const Grid &g, F &&fn) {
  ScalarField<T> out(g);
  std::vector<double> x(g.ndim());
  for (std::size_t k = 0; k < g.size(); ++k) {
    auto idx = g.unravel(k);
    for (std::size_t a = 0; a < g.ndim(); ++a) x[a] = g.coord(a, idx[a]);
    out[k] = static_cast<T>(fn(std::span<const double>(x)));
  }
  return out;
}

} // namespace berryfact
