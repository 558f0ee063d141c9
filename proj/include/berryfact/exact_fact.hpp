#pragma once

// Full electron-nuclear eigenstates and their exact factorization
// Ψ(r,R) = χ(R) Φ(r;R) in the gauge χ = sqrt(∫|Ψ|² dr) ≥ 0.
//
// The full problem is solved in two stages. A Galerkin problem in the basis
// {δ_R ⊗ Φ^BO_n(·;R)} (the contracted problem, a few BO levels per nuclear
// point) gives variational approximations cheaply; those are lifted to the
// product grid and refined to grid eigenpairs by Chebyshev-filtered subspace
// iteration inside one symmetry sector at a time.

#include "berryfact/berry.hpp"
#include "berryfact/bo_surface.hpp"
#include "berryfact/eigensolve.hpp"
#include "berryfact/grid.hpp"
#include "berryfact/model.hpp"
#include "berryfact/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace berryfact {

/// Joint parity under (x, X) → (−x, −X) and (y, Y) → (−y, −Y).
struct Sector {
  int x = -1;
  int y = +1;

  std::string name() const { return std::string(x > 0 ? "+" : "-") + (y > 0 ? "+" : "-"); }
  friend bool operator==(const Sector &, const Sector &) = default;
};

inline Sector parse_sector(const std::string &s) {
  if (s.size() != 2 || (s[0] != '+' && s[0] != '-') || (s[1] != '+' && s[1] != '-')) {
    throw std::invalid_argument("sector must be two signs such as -+ (got '" + s + "')");
  }
  return {s[0] == '+' ? 1 : -1, s[1] == '+' ? 1 : -1};
}

inline void require_mirror_symmetric(const Grid &g, const char *what) {
  for (std::size_t a = 0; a < g.ndim(); ++a) {
    if (!g.symmetric_about_zero(a)) {
      throw std::invalid_argument(std::string(what) + " must be symmetric about zero on every axis");
    }
  }
}

/// Projector onto a symmetry sector of the full product-grid space.
class FullSectorProjector {
public:
  FullSectorProjector(const FullOperator &op, Sector s) : op_(&op), s_(s), tmp_(op.size()) {
    require_mirror_symmetric(op.grid(), "product grid");
  }
  void operator()(std::span<double> v) {
    op_->reflect_x(v, tmp_);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 * (v[i] + s_.x * tmp_[i]);
    op_->reflect_y(v, tmp_);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 * (v[i] + s_.y * tmp_[i]);
  }
  /// ⟨v|P_x v⟩ and ⟨v|P_y v⟩ for a Euclidean unit vector.
  std::pair<double, double> parities(std::span<const double> v) {
    op_->reflect_x(v, tmp_);
    double px = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) px += v[i] * tmp_[i];
    op_->reflect_y(v, tmp_);
    double py = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) py += v[i] * tmp_[i];
    return {px, py};
  }

private:
  const FullOperator *op_;
  Sector s_;
  std::vector<double> tmp_;
};

/// Overlaps of the BO levels between grid neighbours and between mirror
/// partners; everything the contracted problem needs besides the mass.
/// Holds a reference to the scan, which must outlive it.
class ContractedBasis {
public:
  ContractedBasis(const BOScanResult &scan, std::size_t levels, unsigned threads = 0)
      : scan_(&scan), nl_(levels) {
    if (levels < 1 || levels > scan.n_states()) {
      throw std::invalid_argument("ContractedBasis: levels must be in [1, scan n_states]");
    }
    const Grid &g = scan.nuclear_grid();
    for (std::size_t a = 0; a < 2; ++a) detail::require_stencil_axis(g, a);
    const std::size_t nR = g.size(), nY = g.dim(1), nX = g.dim(0);
    const std::size_t ne = scan.electron_grid().size();
    const double dv = scan.electron_grid().cell_volume();
    for (auto &s : S_) s.assign(nR * nl_ * nl_, 0.0);
    const bool mirror = g.symmetric_about_zero(0) && g.symmetric_about_zero(1) &&
                        scan.electron_grid().symmetric_about_zero(0) &&
                        scan.electron_grid().symmetric_about_zero(1);
    if (mirror) {
      for (auto &q : Q_) q.assign(nR * nl_ * nl_, 0.0);
    }
    parallel_for(nR, threads, [&](std::size_t r) {
      const std::size_t i = r / nY, j = r % nY;
      const std::size_t nb[2] = {i + 1 < nX ? r + nY : r, j + 1 < nY ? r + 1 : r};
      for (std::size_t a = 0; a < 2; ++a) {
        if (nb[a] == r) continue;
        for (std::size_t n = 0; n < nl_; ++n) {
          for (std::size_t m = 0; m < nl_; ++m) {
            S_[a][(r * nl_ + n) * nl_ + m] = dot<double>(scan.state(r, n), scan.state(nb[a], m), dv);
          }
        }
      }
      if (!mirror) return;
      std::vector<double> refl(ne);
      const std::size_t partner[2] = {(nX - 1 - i) * nY + j, i * nY + (nY - 1 - j)};
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t m = 0; m < nl_; ++m) {
          reflect<double>(scan.state(partner[a], m), refl, scan.electron_grid(), {a});
          for (std::size_t n = 0; n < nl_; ++n) {
            Q_[a][(r * nl_ + n) * nl_ + m] = dot<double>(scan.state(r, n), refl, dv);
          }
        }
      }
    });
  }

  const BOScanResult &scan() const { return *scan_; }
  std::size_t levels() const { return nl_; }
  std::size_t size() const { return scan_->nuclear_grid().size() * nl_; }
  bool has_mirrors() const { return !Q_[0].empty(); }

  /// n×m block ⟨Φ_n(R)|Φ_m(R + e_axis)⟩.
  const double *overlap(std::size_t axis, std::size_t r) const { return S_[axis].data() + r * nl_ * nl_; }
  /// n×m block ⟨Φ_n(R)|P Φ_m(R̄)⟩ with R̄ the mirror partner along `axis`.
  const double *mirror(std::size_t axis, std::size_t r) const { return Q_[axis].data() + r * nl_ * nl_; }

  /// Product-grid vector Σ_n c_{R,n} Φ_n(r;R), Euclidean normalisation
  /// preserved.
  void lift(std::span<const double> c, std::span<double> out) const {
    const Grid &g = scan_->nuclear_grid();
    const std::size_t nR = g.size(), ne = scan_->electron_grid().size();
    const double w = std::sqrt(scan_->electron_grid().cell_volume());
    std::vector<double> col(ne);
    for (std::size_t r = 0; r < nR; ++r) {
      std::fill(col.begin(), col.end(), 0.0);
      for (std::size_t n = 0; n < nl_; ++n) {
        const double cn = c[r * nl_ + n] * w;
        if (cn == 0.0) continue;
        auto s = scan_->state(r, n);
        for (std::size_t e = 0; e < ne; ++e) col[e] += cn * s[e];
      }
      for (std::size_t e = 0; e < ne; ++e) out[e * nR + r] = col[e];
    }
  }

private:
  const BOScanResult *scan_;
  std::size_t nl_;
  std::array<std::vector<double>, 2> S_;
  std::array<std::vector<double>, 2> Q_;
};

/// The full Hamiltonian restricted to the contracted basis at ion mass M.
class ContractedOperator {
public:
  ContractedOperator(const ContractedBasis &basis, double M) : basis_(&basis) {
    if (!(M > 0.0)) throw std::invalid_argument("ContractedOperator: mass must be positive");
    const Grid &g = basis.scan().nuclear_grid();
    for (std::size_t a = 0; a < 2; ++a) t_[a] = 0.5 / (M * g.spacing(a) * g.spacing(a));
  }
  std::size_t size() const { return basis_->size(); }

  void operator()(std::span<const double> in, std::span<double> out) const {
    const BOScanResult &scan = basis_->scan();
    const Grid &g = scan.nuclear_grid();
    const std::size_t nl = basis_->levels(), nY = g.dim(1), nX = g.dim(0);
    const double diag = 2.0 * (t_[0] + t_[1]);
    for (std::size_t r = 0; r < g.size(); ++r) {
      for (std::size_t n = 0; n < nl; ++n) out[r * nl + n] = (scan.energy(r, n) + diag) * in[r * nl + n];
    }
    for (std::size_t r = 0; r < g.size(); ++r) {
      const std::size_t i = r / nY, j = r % nY;
      const std::size_t nb[2] = {i + 1 < nX ? r + nY : r, j + 1 < nY ? r + 1 : r};
      for (std::size_t a = 0; a < 2; ++a) {
        if (nb[a] == r) continue;
        const double *S = basis_->overlap(a, r);
        const double *xr = in.data() + r * nl, *xq = in.data() + nb[a] * nl;
        double *yr = out.data() + r * nl, *yq = out.data() + nb[a] * nl;
        for (std::size_t n = 0; n < nl; ++n) {
          for (std::size_t m = 0; m < nl; ++m) {
            const double s = t_[a] * S[n * nl + m];
            yr[n] -= s * xq[m];
            yq[m] -= s * xr[n];
          }
        }
      }
    }
  }

private:
  const ContractedBasis *basis_;
  double t_[2];
};

/// Sector projector in the contracted basis, built from the mirror overlaps.
class ContractedSectorProjector {
public:
  ContractedSectorProjector(const ContractedBasis &basis, Sector s)
      : basis_(&basis), s_(s), tmp_(basis.size()) {
    if (!basis.has_mirrors()) {
      throw std::invalid_argument("sector projection needs grids symmetric about zero");
    }
  }
  void operator()(std::span<double> v) {
    apply_mirror(0, v);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 * (v[i] + s_.x * tmp_[i]);
    apply_mirror(1, v);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 * (v[i] + s_.y * tmp_[i]);
  }

private:
  void apply_mirror(std::size_t axis, std::span<const double> v) {
    const Grid &g = basis_->scan().nuclear_grid();
    const std::size_t nl = basis_->levels(), nX = g.dim(0), nY = g.dim(1);
    for (std::size_t r = 0; r < g.size(); ++r) {
      const std::size_t i = r / nY, j = r % nY;
      const std::size_t p = axis == 0 ? (nX - 1 - i) * nY + j : i * nY + (nY - 1 - j);
      const double *Q = basis_->mirror(axis, r);
      for (std::size_t n = 0; n < nl; ++n) {
        double acc = 0.0;
        for (std::size_t m = 0; m < nl; ++m) acc += Q[n * nl + m] * v[p * nl + m];
        tmp_[r * nl + n] = acc;
      }
    }
  }
  const ContractedBasis *basis_;
  Sector s_;
  std::vector<double> tmp_;
};

/// Nuclear profile of a state: χ(R), the polarization of Φ(R), and the
/// χ²-weighted population of each BO level.
struct StateProfile {
  RealField chi;
  std::vector<Vec2> polarization; ///< zero where Φ is undefined
  std::vector<double> level_weight;
};

/// Profile of a contracted coefficient vector (Euclidean unit norm).
inline StateProfile contracted_profile(const ContractedBasis &basis, std::span<const double> c) {
  const BOScanResult &scan = basis.scan();
  const Grid &g = scan.nuclear_grid();
  const std::size_t nl = basis.levels();
  const double dV = g.cell_volume();
  StateProfile p{RealField(g), std::vector<Vec2>(g.size(), Vec2{0.0, 0.0}), std::vector<double>(nl, 0.0)};
  for (std::size_t r = 0; r < g.size(); ++r) {
    double w = 0.0;
    for (std::size_t n = 0; n < nl; ++n) {
      const double cn = c[r * nl + n];
      w += cn * cn;
      p.level_weight[n] += cn * cn;
    }
    p.chi[r] = std::sqrt(w / dV);
    if (w > 0.0) {
      const double inv = 1.0 / std::sqrt(w);
      Vec2 v{0.0, 0.0};
      for (std::size_t n = 0; n < nl; ++n) {
        const auto &pn = scan.polarization(r, n);
        v[0] += c[r * nl + n] * pn[0] * inv;
        v[1] += c[r * nl + n] * pn[1] * inv;
      }
      p.polarization[r] = v;
    }
  }
  return p;
}

struct PLikeThresholds {
  double polarization_ratio = 0.5; ///< |p_Φ| relative to the larger BO pair value at the same R
  double manifold_weight = 0.5;    ///< population of BO levels 1 and 2
  double coherence = 0.5;          ///< |Σχ²p| / Σχ²|p|
  double region = 0.1;             ///< R with χ ≥ region·max χ enter the |p| maximum
};

struct PLikeClassification {
  enum class Verdict { SLike, PLike, Other };
  double energy = 0.0;
  double max_polarization = 0.0;  ///< max_R |p_Φ(R)| over the significant region
  double bo_polarization = 0.0;   ///< BO pair value at the same R
  double polarization_ratio = 0.0;
  double manifold_weight = 0.0;
  double ground_weight = 0.0;
  double coherence = 0.0;
  Verdict verdict = Verdict::Other;
};

inline const char *to_string(PLikeClassification::Verdict v) {
  switch (v) {
  case PLikeClassification::Verdict::SLike: return "s-like";
  case PLikeClassification::Verdict::PLike: return "p-like";
  default: return "other";
  }
}

/// A state is p-like when its conditional electronic state is polarized like
/// the BO pair (ratio), lives mostly in that pair (manifold weight), and keeps
/// one orientation across the nuclear density (coherence). Mostly-ground
/// states are s-like.
inline PLikeClassification classify_profile(const StateProfile &p, const BOScanResult &scan,
                                            double energy, const PLikeThresholds &th = {}) {
  PLikeClassification c;
  c.energy = energy;
  const Grid &g = scan.nuclear_grid();
  double chimax = 0.0;
  for (double v : p.chi.values()) chimax = std::max(chimax, v);
  double sx = 0.0, sy = 0.0, sabs = 0.0;
  std::size_t arg = g.size();
  for (std::size_t r = 0; r < g.size(); ++r) {
    const auto &v = p.polarization[r];
    const double mag = std::hypot(v[0], v[1]);
    const double w = p.chi[r] * p.chi[r];
    sx += w * v[0];
    sy += w * v[1];
    sabs += w * mag;
    if (p.chi[r] >= th.region * chimax && (arg == g.size() || mag > c.max_polarization)) {
      c.max_polarization = mag;
      arg = r;
    }
  }
  c.coherence = sabs > 0.0 ? std::hypot(sx, sy) / sabs : 0.0;
  if (arg < g.size()) {
    const auto &p1 = scan.polarization(arg, 1), &p2 = scan.polarization(arg, 2);
    c.bo_polarization = std::max(std::hypot(p1[0], p1[1]), std::hypot(p2[0], p2[1]));
    c.polarization_ratio = c.bo_polarization > 0.0 ? c.max_polarization / c.bo_polarization : 0.0;
  }
  c.ground_weight = p.level_weight.empty() ? 0.0 : p.level_weight[0];
  c.manifold_weight = (p.level_weight.size() > 1 ? p.level_weight[1] : 0.0) +
                      (p.level_weight.size() > 2 ? p.level_weight[2] : 0.0);
  if (c.ground_weight > 0.5) {
    c.verdict = PLikeClassification::Verdict::SLike;
  } else if (c.polarization_ratio >= th.polarization_ratio && c.manifold_weight >= th.manifold_weight &&
             c.coherence >= th.coherence) {
    c.verdict = PLikeClassification::Verdict::PLike;
  }
  return c;
}

/// Indices of the two lowest p-like entries (A then B).
inline std::pair<std::size_t, std::size_t> select_ab(const std::vector<PLikeClassification> &cls) {
  std::vector<std::size_t> order(cls.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cls[a].energy < cls[b].energy; });
  std::vector<std::size_t> p;
  for (auto i : order) {
    if (cls[i].verdict == PLikeClassification::Verdict::PLike) p.push_back(i);
  }
  if (p.size() < 2) {
    throw std::runtime_error("fewer than two p-like states among " + std::to_string(cls.size()) +
                             " computed states; increase k");
  }
  return {p[0], p[1]};
}

struct FullState {
  double energy = 0.0;
  double residual = 0.0;   ///< Euclidean ‖Hv − Ev‖ of the unit vector
  Sector sector;
  RealField psi;           ///< quadrature-normalised on (x, y, X, Y)
};

struct FullSolveOptions {
  std::size_t levels = 10;          ///< BO levels per nuclear point in the contracted basis
  std::size_t k = 0;                ///< contracted states per sector; 0 grows until A and B are bracketed
  std::size_t k_start = 40;
  std::size_t k_max = 640;
  double tol = 1e-8;
  std::uint64_t seed = 20140202;
  std::size_t max_iter = 1000;
  std::size_t degree = 40;
  std::size_t buffer = 8;           ///< extra vectors carried in each refinement block
  std::size_t max_cycles = 300;
  std::vector<Sector> sectors = {{-1, -1}, {-1, +1}, {+1, -1}, {+1, +1}};
  PLikeThresholds thresholds{};
  unsigned threads = 0;
};

struct ContractedSector {
  Sector sector;
  std::vector<EigenPair> pairs;                 ///< contracted eigenpairs, ascending
  std::vector<PLikeClassification> classes;
};

struct FullSolveResult {
  std::vector<ContractedSector> contracted;
  std::vector<FullState> states;   ///< refined grid eigenpairs, ascending in energy
};

namespace detail {

inline ContractedSector solve_contracted_sector(const ContractedBasis &basis, const ContractedOperator &op,
                                                Sector s, std::size_t k, const FullSolveOptions &opt) {
  ContractedSectorProjector proj(basis, s);
  EigenRequest req;
  req.k = k;
  req.tol = std::max(opt.tol, 1e-10);
  req.seed = opt.seed;
  req.max_iter = opt.max_iter;
  ContractedSector cs{s, lowest_eigenpairs(op, op.size(), req, proj), {}};
  for (const auto &p : cs.pairs) {
    const auto prof = contracted_profile(basis, std::span<const double>(p.vector.data(), p.vector.size()));
    cs.classes.push_back(classify_profile(prof, basis.scan(), p.value, opt.thresholds));
  }
  return cs;
}

} // namespace detail

/// Contracted stage: per sector, lowest-k Galerkin states. With k = 0 the
/// count doubles from k_start until every sector reaches above the second
/// lowest p-like energy found.
inline std::vector<ContractedSector> solve_contracted(const ContractedBasis &basis, double M,
                                                      const FullSolveOptions &opt) {
  ContractedOperator op(basis, M);
  const std::size_t cap = std::min(opt.k_max, op.size() / 4);
  std::vector<std::size_t> k(opt.sectors.size(), opt.k ? opt.k : std::min(opt.k_start, cap));
  std::vector<ContractedSector> out(opt.sectors.size());
  std::vector<bool> done(opt.sectors.size(), false);
  while (true) {
    for (std::size_t s = 0; s < opt.sectors.size(); ++s) {
      if (!done[s]) out[s] = detail::solve_contracted_sector(basis, op, opt.sectors[s], k[s], opt);
      done[s] = true;
    }
    if (opt.k) return out;
    std::vector<double> plike;
    for (const auto &cs : out) {
      for (const auto &c : cs.classes) {
        if (c.verdict == PLikeClassification::Verdict::PLike) plike.push_back(c.energy);
      }
    }
    std::sort(plike.begin(), plike.end());
    bool grow = false;
    for (std::size_t s = 0; s < out.size(); ++s) {
      const double top = out[s].pairs.back().value;
      if (plike.size() < 2 || top < plike[1]) {
        if (k[s] >= cap) continue;
        k[s] = std::min(2 * k[s], cap);
        done[s] = false;
        grow = true;
      }
    }
    if (!grow) return out;
  }
}

/// Refine the contracted states of one sector up to and including `wanted`
/// lowest, carrying `buffer` extra vectors.
inline std::vector<FullState> refine_sector(const FullOperator &op, const ContractedBasis &basis,
                                            const ContractedSector &cs, std::size_t wanted,
                                            const FullSolveOptions &opt) {
  if (wanted < 1) throw std::invalid_argument("refine_sector: nothing wanted");
  const std::size_t m = std::min(wanted + std::max<std::size_t>(opt.buffer, wanted / 2), cs.pairs.size());
  if (m <= wanted) {
    throw std::invalid_argument("refine_sector: the contracted solve has no buffer states beyond the wanted ones");
  }
  const std::size_t N = op.size();
  Eigen::MatrixXd block(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(m));
  for (std::size_t c = 0; c < m; ++c) {
    const auto &v = cs.pairs[c].vector;
    basis.lift(std::span<const double>(v.data(), v.size()),
               std::span<double>(block.col(static_cast<Eigen::Index>(c)).data(), N));
  }
  FullSectorProjector proj(op, cs.sector);
  RefineRequest req;
  req.wanted = wanted;
  req.tol = opt.tol;
  req.degree = opt.degree;
  req.max_cycles = opt.max_cycles;
  req.seed = opt.seed;
  req.upper_bound = op.spectral_bounds().second;
  auto pairs = refine_eigenpairs(op, std::move(block), req, proj);
  std::vector<FullState> out;
  const double scale = 1.0 / std::sqrt(op.grid().cell_volume());
  for (auto &p : pairs) {
    FullState s{p.value, p.residual, cs.sector, RealField(op.grid())};
    for (std::size_t i = 0; i < N; ++i) s.psi[i] = p.vector(static_cast<Eigen::Index>(i)) * scale;
    out.push_back(std::move(s));
  }
  return out;
}

/// Two-stage full solve. The contracted stage locates A and B; each sector
/// holding one of them is then refined on the product grid up to that state.
inline FullSolveResult solve_full(const ModelParams &params, const FullOperator &op,
                                  const ContractedBasis &basis, const FullSolveOptions &opt) {
  params.validate();
  if (!(op.nuclear_grid() == basis.scan().nuclear_grid()) ||
      !(op.electron_grid() == basis.scan().electron_grid())) {
    throw std::invalid_argument("solve_full: operator and BO scan grids differ");
  }
  if (opt.sectors.empty()) throw std::invalid_argument("solve_full: no symmetry sectors requested");
  FullSolveResult res;
  res.contracted = solve_contracted(basis, params.M, opt);
  std::vector<PLikeClassification> all;
  std::vector<std::pair<std::size_t, std::size_t>> where;
  for (std::size_t s = 0; s < res.contracted.size(); ++s) {
    for (std::size_t i = 0; i < res.contracted[s].classes.size(); ++i) {
      all.push_back(res.contracted[s].classes[i]);
      where.emplace_back(s, i);
    }
  }
  const auto [a, b] = select_ab(all);
  std::vector<std::size_t> wanted(res.contracted.size(), 0);
  for (auto t : {a, b}) {
    auto [s, i] = where[t];
    wanted[s] = std::max(wanted[s], i + 1);
  }
  for (std::size_t s = 0; s < res.contracted.size(); ++s) {
    if (wanted[s] == 0) continue;
    auto refined = refine_sector(op, basis, res.contracted[s], wanted[s], opt);
    for (auto &st : refined) res.states.push_back(std::move(st));
  }
  std::stable_sort(res.states.begin(), res.states.end(),
                   [](const FullState &x, const FullState &y) { return x.energy < y.energy; });
  return res;
}

/// Direct block-Krylov solve on the product grid, optionally inside one
/// sector. Practical on small grids; used to cross-check the two-stage path.
inline std::vector<FullState> solve_full_direct(const FullOperator &op, const EigenRequest &req,
                                                std::optional<Sector> sector = std::nullopt) {
  std::vector<EigenPair> pairs;
  if (sector) {
    FullSectorProjector proj(op, *sector);
    pairs = lowest_eigenpairs(op, op.size(), req, proj);
  } else {
    pairs = lowest_eigenpairs(op, op.size(), req);
  }
  std::vector<FullState> out;
  const double scale = 1.0 / std::sqrt(op.grid().cell_volume());
  FullSectorProjector probe(op, Sector{});
  for (auto &p : pairs) {
    auto [px, py] = probe.parities(std::span<const double>(p.vector.data(), p.vector.size()));
    FullState s{p.value, p.residual, Sector{px >= 0.0 ? 1 : -1, py >= 0.0 ? 1 : -1}, RealField(op.grid())};
    for (std::size_t i = 0; i < op.size(); ++i) s.psi[i] = p.vector(static_cast<Eigen::Index>(i)) * scale;
    out.push_back(std::move(s));
  }
  return out;
}

/// Ψ = χΦ with χ = sqrt(∫|Ψ|² dr). Φ is stored nuclear-point-major so each
/// conditional state is contiguous.
struct FactorizedState {
  std::string label;
  double energy = 0.0;
  Grid electron, nuclear;
  RealField psi;              ///< (x, y, X, Y)
  RealField chi;              ///< (X, Y), ≥ 0
  std::vector<double> phi;    ///< [R][r]
  std::vector<char> defined;  ///< Φ exists at R (χ above the floor)
  double chi_floor = 0.0;

  std::span<const double> phi_at(std::size_t r) const {
    return {phi.data() + r * electron.size(), electron.size()};
  }
  RealField phi_field(std::size_t r) const {
    auto s = phi_at(r);
    return RealField(electron, std::vector<double>(s.begin(), s.end()));
  }
  RealField chi_squared() const {
    RealField d(nuclear);
    for (std::size_t r = 0; r < nuclear.size(); ++r) d[r] = chi[r] * chi[r];
    return d;
  }
  bool is_defined(std::size_t r) const { return defined[r] != 0; }
};

inline constexpr double kChiFloorRelative = 1e-6;

/// Factorize a product-grid state; Φ is undefined (zero, flagged) where
/// χ ≤ floor_relative·max χ.
inline FactorizedState factorize(const RealField &psi, const Grid &electron, const Grid &nuclear,
                                 double energy = 0.0, double floor_relative = kChiFloorRelative) {
  if (!(psi.grid() == product_grid(electron, nuclear))) {
    throw std::invalid_argument("factorize: psi does not live on electron × nuclear grid");
  }
  const std::size_t ne = electron.size(), nR = nuclear.size();
  FactorizedState fs;
  fs.energy = energy;
  fs.electron = electron;
  fs.nuclear = nuclear;
  fs.psi = psi;
  fs.chi = RealField(nuclear);
  fs.phi.assign(ne * nR, 0.0);
  fs.defined.assign(nR, 0);
  const double dv = electron.cell_volume();
  std::vector<double> acc(nR, 0.0);
  for (std::size_t e = 0; e < ne; ++e) {
    const double *row = psi.data() + e * nR;
    for (std::size_t r = 0; r < nR; ++r) acc[r] += row[r] * row[r];
  }
  double chimax = 0.0;
  for (std::size_t r = 0; r < nR; ++r) {
    fs.chi[r] = std::sqrt(acc[r] * dv);
    chimax = std::max(chimax, fs.chi[r]);
  }
  fs.chi_floor = floor_relative * chimax;
  for (std::size_t r = 0; r < nR; ++r) fs.defined[r] = fs.chi[r] > fs.chi_floor ? 1 : 0;
  for (std::size_t e = 0; e < ne; ++e) {
    const double *row = psi.data() + e * nR;
    for (std::size_t r = 0; r < nR; ++r) {
      if (fs.defined[r]) fs.phi[r * ne + e] = row[r] / fs.chi[r];
    }
  }
  return fs;
}

/// Profile of a factorized state against the BO levels of a scan on the same
/// grids.
inline StateProfile factorized_profile(const FactorizedState &fs, const BOScanResult &scan) {
  if (!(fs.nuclear == scan.nuclear_grid()) || !(fs.electron == scan.electron_grid())) {
    throw std::invalid_argument("factorized_profile: grids differ from the scan");
  }
  const std::size_t nR = fs.nuclear.size(), nl = scan.n_states();
  const double dv = fs.electron.cell_volume(), dV = fs.nuclear.cell_volume();
  StateProfile p{fs.chi, std::vector<Vec2>(nR, Vec2{0.0, 0.0}), std::vector<double>(nl, 0.0)};
  for (std::size_t r = 0; r < nR; ++r) {
    if (!fs.is_defined(r)) continue;
    auto phi = fs.phi_at(r);
    p.polarization[r] = polarization_vector(phi, fs.electron);
    const double w = fs.chi[r] * fs.chi[r] * dV;
    for (std::size_t n = 0; n < nl; ++n) {
      const double o = dot<double>(scan.state(r, n), phi, dv);
      p.level_weight[n] += w * o * o;
    }
  }
  return p;
}

inline PLikeClassification classify_p_like(const FactorizedState &fs, const BOScanResult &scan,
                                           const PLikeThresholds &th = {}) {
  return classify_profile(factorized_profile(fs, scan), scan, fs.energy, th);
}

namespace detail {

/// Nuclear-grid neighbours of r along `axis`, or r itself at the edges.
inline std::pair<std::size_t, std::size_t> nuclear_neighbours(const Grid &g, std::size_t r, std::size_t axis) {
  const std::size_t nY = g.dim(1);
  const std::size_t idx = axis == 0 ? r / nY : r % nY;
  const std::size_t s = g.stride(axis);
  return {idx > 0 ? r - s : r, idx + 1 < g.dim(axis) ? r + s : r};
}

} // namespace detail

/// The conditional-state connection Im⟨Φ|∂Φ⟩ over defined points.
inline ConnectionField exact_connection(const FactorizedState &fs) {
  return connection_field<double>(
      fs.nuclear, [&](std::size_t r) { return fs.phi_at(r); },
      [&](std::size_t r) { return fs.is_defined(r); }, fs.electron.cell_volume());
}

/// ε^ex(R) = ⟨Φ|H^BO|Φ⟩ + Σ_ν ⟨∂_νΦ|∂_νΦ⟩/2M − Σ_ν (A^ex_ν)²/2M. NaN where Φ
/// or any stencil neighbour is undefined.
inline RealField exact_pes(const FactorizedState &fs, const ModelParams &params, unsigned threads = 0) {
  params.validate();
  const Grid &g = fs.nuclear;
  for (std::size_t a = 0; a < 2; ++a) detail::require_stencil_axis(g, a);
  const std::size_t ne = fs.electron.size(), nY = g.dim(1);
  const double dv = fs.electron.cell_volume();
  const auto A = exact_connection(fs);
  RealField eps(g);
  parallel_for(g.size(), threads, [&](std::size_t r) {
    eps[r] = std::numeric_limits<double>::quiet_NaN();
    if (!fs.is_defined(r) || !A.defined(r)) return;
    double grad = 0.0;
    for (std::size_t a = 0; a < 2; ++a) {
      auto [lo, hi] = detail::nuclear_neighbours(g, r, a);
      const double span = g.spacing(a) * static_cast<double>((hi - lo) / g.stride(a));
      auto fl = fs.phi_at(lo), fh = fs.phi_at(hi);
      double sq = 0.0;
      for (std::size_t e = 0; e < ne; ++e) {
        const double d = (fh[e] - fl[e]) / span;
        sq += d * d;
      }
      grad += sq * dv;
    }
    BOOperator op(params, fs.electron, g.coord(0, r / nY), g.coord(1, r % nY));
    std::vector<double> hphi(ne);
    auto phi = fs.phi_at(r);
    op(phi, hphi);
    const double ebo = dot<double>(phi, hphi, dv);
    const double a2 = A.AX[r] * A.AX[r] + A.AY[r] * A.AY[r];
    eps[r] = ebo + (grad - a2) / (2.0 * params.M);
  });
  return eps;
}

/// Per-R norm of (H^BO + U_en − ε^ex)Φ with, in the real gauge,
/// U_en Φ = (1/M)[−½∇²_R Φ − (∇_R χ/χ)·∇_R Φ]. NaN at grid-edge points and
/// wherever a stencil point is undefined.
inline RealField residual_conditional(const FactorizedState &fs, const ModelParams &params, const RealField &eps_ex,
                                      unsigned threads = 0) {
  const Grid &g = fs.nuclear;
  const std::size_t ne = fs.electron.size(), nY = g.dim(1), nX = g.dim(0);
  const double dv = fs.electron.cell_volume();
  const double M = params.M;
  RealField res(g);
  parallel_for(g.size(), threads, [&](std::size_t r) {
    res[r] = std::numeric_limits<double>::quiet_NaN();
    const std::size_t i = r / nY, j = r % nY;
    if (i == 0 || j == 0 || i + 1 == nX || j + 1 == nY) return;
    if (!std::isfinite(eps_ex[r]) || !fs.is_defined(r)) return;
    std::size_t nb[2][2];
    for (std::size_t a = 0; a < 2; ++a) {
      auto [lo, hi] = detail::nuclear_neighbours(g, r, a);
      if (!fs.is_defined(lo) || !fs.is_defined(hi)) return;
      nb[a][0] = lo;
      nb[a][1] = hi;
    }
    BOOperator op(params, fs.electron, g.coord(0, i), g.coord(1, j));
    std::vector<double> out(ne);
    auto phi = fs.phi_at(r);
    op(phi, out);
    const double chi = fs.chi[r];
    for (std::size_t a = 0; a < 2; ++a) {
      const double h = g.spacing(a);
      auto fl = fs.phi_at(nb[a][0]), fh = fs.phi_at(nb[a][1]);
      const double dchi = (fs.chi[nb[a][1]] - fs.chi[nb[a][0]]) / (2.0 * h);
      const double lap = -0.5 / (M * h * h), drift = -(dchi / chi) / (M * 2.0 * h);
      for (std::size_t e = 0; e < ne; ++e) {
        out[e] += lap * (fl[e] - 2.0 * phi[e] + fh[e]) + drift * (fh[e] - fl[e]);
      }
    }
    double s = 0.0;
    for (std::size_t e = 0; e < ne; ++e) {
      const double d = out[e] - eps_ex[r] * phi[e];
      s += d * d;
    }
    res[r] = std::sqrt(s * dv);
  });
  return res;
}

/// ‖(−Σ_ν ∇²_ν/2M + ε^ex − E)χ‖ over the nuclear points where ε^ex exists.
inline double residual_nuclear(const FactorizedState &fs, const ModelParams &params, const RealField &eps_ex) {
  const Grid &g = fs.nuclear;
  RealField lap = laplacian_apply(fs.chi, {0, 1});
  double s = 0.0;
  for (std::size_t r = 0; r < g.size(); ++r) {
    if (!std::isfinite(eps_ex[r])) continue;
    const double d = -lap[r] / (2.0 * params.M) + (eps_ex[r] - fs.energy) * fs.chi[r];
    s += d * d;
  }
  return std::sqrt(s * g.cell_volume());
}

/// Both sides of the nuclear current identity
///   Im[χ* ∇χ] + |χ|² A^ex = Im ∫ Ψ* ∇Ψ dr
/// (the common 1/M factor dropped), in the gauge χ = sqrt(∫|Ψ|²dr).
struct CurrentCheck {
  double max_rhs = 0.0;        ///< max |Im ∫Ψ*∇Ψ dr|, zero for real Ψ
  double max_lhs = 0.0;
  double max_difference = 0.0; ///< max |lhs − rhs|
};

template <typename T>
CurrentCheck current_identity_check(const ScalarField<T> &psi, const Grid &electron, const Grid &nuclear,
                                    double floor_relative = kChiFloorRelative) {
  if (!(psi.grid() == product_grid(electron, nuclear))) {
    throw std::invalid_argument("current_identity_check: psi does not live on electron × nuclear grid");
  }
  for (std::size_t a = 0; a < 2; ++a) detail::require_stencil_axis(nuclear, a);
  const std::size_t ne = electron.size(), nR = nuclear.size();
  const double dv = electron.cell_volume();
  // Φ per R, contiguous
  std::vector<double> chi(nR, 0.0);
  for (std::size_t e = 0; e < ne; ++e) {
    for (std::size_t r = 0; r < nR; ++r) chi[r] += abs2(psi[e * nR + r]);
  }
  double chimax = 0.0;
  for (auto &c : chi) {
    c = std::sqrt(c * dv);
    chimax = std::max(chimax, c);
  }
  CurrentCheck out;
  for (std::size_t r = 0; r < nR; ++r) {
    if (!(chi[r] > floor_relative * chimax)) continue;
    for (std::size_t a = 0; a < 2; ++a) {
      auto [lo, hi] = detail::nuclear_neighbours(nuclear, r, a);
      if (!(chi[lo] > floor_relative * chimax) || !(chi[hi] > floor_relative * chimax)) continue;
      const double span = nuclear.spacing(a) * static_cast<double>((hi - lo) / nuclear.stride(a));
      std::complex<double> rhs{0.0, 0.0}, conn{0.0, 0.0};
      for (std::size_t e = 0; e < ne; ++e) {
        const std::complex<double> c(psi[e * nR + r]), l(psi[e * nR + lo]), h(psi[e * nR + hi]);
        rhs += std::conj(c) * (h - l);
        conn += std::conj(c / chi[r]) * (h / chi[hi] - l / chi[lo]);
      }
      const double R = (rhs * dv / span).imag();
      // χ is real in this gauge, so Im[χ*∇χ] drops out
      const double L = chi[r] * chi[r] * (conn * dv / span).imag();
      out.max_rhs = std::max(out.max_rhs, std::abs(R));
      out.max_lhs = std::max(out.max_lhs, std::abs(L));
      out.max_difference = std::max(out.max_difference, std::abs(L - R));
    }
  }
  return out;
}

} // namespace berryfact
