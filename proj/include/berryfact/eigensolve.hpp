#pragma once

// Lowest eigenpairs of real-symmetric operators given only as a matrix-vector
// product.
//
//  * lowest_eigenpairs: restarted block Krylov-Schur (block Lanczos with full
//    reorthogonalisation and thick restarts).
//  * refine_eigenpairs: Chebyshev-filtered subspace iteration that polishes a
//    good starting block to full accuracy with little memory.
//  * dense_oracle: full spectrum of an explicit matrix, for verification.
//
// Vectors at this level are plain Euclidean-normalised Eigen vectors; the
// physics layers convert to quadrature-normalised fields.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace berryfact {

struct EigenRequest {
  std::size_t k = 1;              ///< number of lowest pairs wanted
  double tol = 1e-8;              ///< residual bound ‖Hv − λv‖ with ‖v‖ = 1
  std::size_t max_iter = 1000;    ///< restart cycles
  std::uint64_t seed = 20140202;  ///< start-vector seed
  std::size_t block_size = 2;
  std::size_t max_basis = 0;      ///< 0 picks a size from k and block_size

  void validate() const {
    if (k < 1) throw std::invalid_argument("EigenRequest: k must be at least 1");
    if (!(tol > 0.0)) throw std::invalid_argument("EigenRequest: tol must be positive");
    if (block_size < 1) throw std::invalid_argument("EigenRequest: block_size must be at least 1");
    if (max_iter < 1) throw std::invalid_argument("EigenRequest: max_iter must be at least 1");
  }
};

struct EigenPair {
  double value = 0.0;
  Eigen::VectorXd vector;
  double residual = 0.0;
};

class ConvergenceError : public std::runtime_error {
public:
  ConvergenceError(const std::string &what, std::vector<double> best)
      : std::runtime_error(what), best_residuals(std::move(best)) {}
  std::vector<double> best_residuals;
};

/// No-op projector for unrestricted problems.
struct NoProjection {
  void operator()(std::span<double>) const {}
};

namespace detail {

/// Start vectors: 53-bit uniform deviates in [-0.5, 0.5) from mt19937_64, which
/// is bit-reproducible across standard libraries (unlike the distributions).
inline void fill_random(double *v, std::size_t n, std::mt19937_64 &rng) {
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5;
  }
}

template <typename Apply>
void apply_col(Apply &apply, const double *in, double *out, std::size_t n) {
  apply(std::span<const double>(in, n), std::span<double>(out, n));
}

/// Orthonormalise the columns of W against the first `used` columns of V
/// and among themselves (classical Gram-Schmidt, applied twice). Columns that
/// collapse are replaced by fresh random vectors and get a zero row in R.
/// Returns R with W_in = V C + W_out R; C is accumulated into `coef` when
/// non-null.
template <typename Project>
Eigen::MatrixXd orthonormalize_block(const Eigen::MatrixXd &V, std::size_t used,
                                     Eigen::MatrixXd &W, std::mt19937_64 &rng,
                                     Project &project, Eigen::MatrixXd *coef = nullptr,
                                     bool *exhausted = nullptr) {
  const std::size_t n = static_cast<std::size_t>(W.rows());
  const std::size_t b = static_cast<std::size_t>(W.cols());
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(b, b);
  if (coef) coef->setZero(used, b);
  auto Vu = V.leftCols(used);
  for (std::size_t c = 0; c < b; ++c) {
    auto w = W.col(c);
    const double before = w.norm();
    for (int pass = 0; pass < 2; ++pass) {
      if (used > 0) {
        Eigen::VectorXd h = Vu.transpose() * w;
        w.noalias() -= Vu * h;
        if (coef) coef->col(c) += h;
      }
      if (c > 0) {
        Eigen::VectorXd h = W.leftCols(c).transpose() * w;
        w.noalias() -= W.leftCols(c) * h;
        R.col(c).head(c) += h;
      }
    }
    double nrm = w.norm();
    if (nrm > 1e-10 * std::max(before, 1e-300) && nrm > 1e-300) {
      R(c, c) = nrm;
      w /= nrm;
      continue;
    }
    // Breakdown: the block is (numerically) inside the current span.
    R(c, c) = 0.0;
    bool ok = false;
    for (int attempt = 0; attempt < 5 && !ok; ++attempt) {
      fill_random(w.data(), n, rng);
      project(std::span<double>(w.data(), n));
      const double b0 = w.norm();
      for (int pass = 0; pass < 2; ++pass) {
        if (used > 0) w.noalias() -= Vu * (Vu.transpose() * w).eval();
        if (c > 0) w.noalias() -= W.leftCols(c) * (W.leftCols(c).transpose() * w).eval();
      }
      nrm = w.norm();
      if (b0 > 0.0 && nrm > 1e-8 * b0) {
        w /= nrm;
        ok = true;
      }
    }
    if (!ok) {
      w.setZero();
      if (exhausted) *exhausted = true;
    }
  }
  return R;
}

inline void fix_sign(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index imax = 0;
  v.cwiseAbs().maxCoeff(&imax);
  if (v(imax) < 0.0) v = -v;
}

} // namespace detail

/// Explicit matrix of a linear map, built column by column.
template <typename Apply>
Eigen::MatrixXd materialize(Apply &&apply, std::size_t n) {
  Eigen::MatrixXd A(n, n);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  Eigen::VectorXd col(n);
  for (std::size_t j = 0; j < n; ++j) {
    e(static_cast<Eigen::Index>(j)) = 1.0;
    detail::apply_col(apply, e.data(), col.data(), n);
    A.col(static_cast<Eigen::Index>(j)) = col;
    e(static_cast<Eigen::Index>(j)) = 0.0;
  }
  return A;
}

inline constexpr std::size_t kDenseOracleCap = 20000;

/// Full spectrum of an explicit symmetric matrix, ascending.
inline std::vector<EigenPair> dense_oracle(const Eigen::MatrixXd &A,
                                           std::size_t cap = kDenseOracleCap) {
  if (A.rows() != A.cols()) throw std::invalid_argument("dense_oracle: matrix is not square");
  if (static_cast<std::size_t>(A.rows()) > cap) {
    throw std::invalid_argument("dense_oracle: dimension " + std::to_string(A.rows()) +
                                " exceeds cap " + std::to_string(cap));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  if (es.info() != Eigen::Success) throw std::runtime_error("dense_oracle: decomposition failed");
  std::vector<EigenPair> out(static_cast<std::size_t>(A.rows()));
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    auto &p = out[static_cast<std::size_t>(i)];
    p.value = es.eigenvalues()(i);
    p.vector = es.eigenvectors().col(i);
    detail::fix_sign(p.vector);
    p.residual = (A * p.vector - p.value * p.vector).norm();
  }
  return out;
}

namespace detail {

/// Dense path for small problems: restrict to range(P) explicitly, then
/// diagonalise.
template <typename Apply, typename Project>
std::vector<EigenPair> lowest_dense(Apply &apply, std::size_t n, std::size_t k,
                                    Project &project) {
  const auto N = static_cast<Eigen::Index>(n);
  Eigen::MatrixXd Q;
  if constexpr (std::is_same_v<std::decay_t<Project>, NoProjection>) {
    Q = Eigen::MatrixXd::Identity(N, N);
  } else {
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(N, N);
    for (Eigen::Index c = 0; c < N; ++c) project(std::span<double>(P.col(c).data(), n));
    P = 0.5 * (P + P.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ps(P);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < N; ++i) {
      if (ps.eigenvalues()(i) > 0.5) keep.push_back(i);
    }
    Q.resize(N, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t c = 0; c < keep.size(); ++c) {
      Q.col(static_cast<Eigen::Index>(c)) = ps.eigenvectors().col(keep[c]);
    }
  }
  if (static_cast<std::size_t>(Q.cols()) < k) {
    throw std::invalid_argument("lowest_eigenpairs: the projected space has only " +
                                std::to_string(Q.cols()) + " dimensions");
  }
  Eigen::MatrixXd HQ(N, Q.cols());
  for (Eigen::Index c = 0; c < Q.cols(); ++c) apply_col(apply, Q.col(c).data(), HQ.col(c).data(), n);
  Eigen::MatrixXd A = Q.transpose() * HQ;
  A = 0.5 * (A + A.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  std::vector<EigenPair> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto s = es.eigenvectors().col(static_cast<Eigen::Index>(i));
    auto &p = out[i];
    p.value = es.eigenvalues()(static_cast<Eigen::Index>(i));
    p.vector = Q * s;
    p.residual = (HQ * s - p.value * p.vector).norm();
    fix_sign(p.vector);
  }
  return out;
}

} // namespace detail

/// Lowest req.k eigenpairs of a symmetric operator, ascending. `project`
/// restricts the search to an invariant subspace (e.g. a symmetry sector); it
/// must be an orthogonal projector commuting with the operator.
template <typename Apply, typename Project = NoProjection>
std::vector<EigenPair> lowest_eigenpairs(Apply &&apply, std::size_t n,
                                         const EigenRequest &req,
                                         Project &&project = {}) {
  req.validate();
  if (req.k >= n) {
    throw std::invalid_argument("lowest_eigenpairs: k=" + std::to_string(req.k) +
                                " must be below the dimension " + std::to_string(n));
  }
  const std::size_t b = req.block_size;
  std::size_t m = req.max_basis;
  if (m == 0) m = std::max(2 * req.k + 4 * b, req.k + 40);
  m = std::max(m, req.k + 3 * b);
  // Basis plus residual block must fit in the space.
  if (m + b > n) return detail::lowest_dense(apply, n, req.k, project);

  std::mt19937_64 rng(req.seed);
  const auto N = static_cast<Eigen::Index>(n);
  const auto B = static_cast<Eigen::Index>(b);
  Eigen::MatrixXd V(N, static_cast<Eigen::Index>(m));
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  Eigen::MatrixXd W(N, B);

  for (Eigen::Index c = 0; c < B; ++c) {
    detail::fill_random(W.col(c).data(), n, rng);
    project(std::span<double>(W.col(c).data(), n));
  }
  detail::orthonormalize_block(V, 0, W, rng, project);
  V.leftCols(B) = W;
  std::size_t j = b; // basis size; columns [j-b, j) still need H applied

  std::vector<double> best(req.k, std::numeric_limits<double>::infinity());
  Eigen::MatrixXd Bres;
  Eigen::VectorXd hv(N);

  for (std::size_t cycle = 0; cycle < req.max_iter; ++cycle) {
    // H V = V T + W Bres E_last^T once the basis is full
    while (true) {
      const auto J = static_cast<Eigen::Index>(j);
      const auto jb = J - B;
      for (Eigen::Index c = 0; c < B; ++c) {
        detail::apply_col(apply, V.col(jb + c).data(), W.col(c).data(), n);
        project(std::span<double>(W.col(c).data(), n));
      }
      Eigen::MatrixXd C;
      bool exhausted = false;
      Eigen::MatrixXd R = detail::orthonormalize_block(V, j, W, rng, project, &C, &exhausted);
      // the projected space is smaller than the basis: solve it directly
      if (exhausted) return detail::lowest_dense(apply, n, req.k, project);
      T.block(0, jb, J, B) = C;
      T.block(jb, 0, B, J) = C.transpose();
      const Eigen::MatrixXd D = T.block(jb, jb, B, B);
      T.block(jb, jb, B, B) = 0.5 * (D + D.transpose());
      if (j + b > m) {
        Bres = R;
        break;
      }
      V.middleCols(J, B) = W;
      T.block(J, jb, B, B) = R;
      T.block(jb, J, B, B) = R.transpose();
      j += b;
    }

    const auto J = static_cast<Eigen::Index>(j);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(T.topLeftCorner(J, J));
    const Eigen::VectorXd theta = es.eigenvalues();
    const Eigen::MatrixXd S = es.eigenvectors();
    bool estimated = true;
    for (std::size_t i = 0; i < req.k; ++i) {
      const double r = (Bres * S.col(static_cast<Eigen::Index>(i)).tail(B)).norm();
      best[i] = std::min(best[i], r);
      if (r > req.tol) estimated = false;
    }

    if (estimated) {
      std::vector<EigenPair> out(req.k);
      bool ok = true;
      for (std::size_t i = 0; i < req.k; ++i) {
        auto &p = out[i];
        p.vector = V.leftCols(J) * S.col(static_cast<Eigen::Index>(i));
        p.vector.normalize();
        detail::apply_col(apply, p.vector.data(), hv.data(), n);
        project(std::span<double>(hv.data(), n));
        p.value = p.vector.dot(hv);
        p.residual = (hv - p.value * p.vector).norm();
        if (p.residual > req.tol) ok = false;
        detail::fix_sign(p.vector);
      }
      if (ok) {
        std::stable_sort(out.begin(), out.end(),
                         [](const EigenPair &x, const EigenPair &y) { return x.value < y.value; });
        return out;
      }
    }

    // Thick restart: keep the lowest p Ritz vectors; the residual block W
    // becomes the next pending block.
    const std::size_t p = std::clamp((req.k + j) / 2, req.k, j - 2 * b);
    const auto P = static_cast<Eigen::Index>(p);
    constexpr Eigen::Index chunk = 4096;
    for (Eigen::Index r0 = 0; r0 < N; r0 += chunk) {
      const Eigen::Index rows = std::min(chunk, N - r0);
      Eigen::MatrixXd tmp = V.block(r0, 0, rows, J) * S.leftCols(P);
      V.block(r0, 0, rows, P) = tmp;
    }
    const Eigen::MatrixXd coupling = Bres * S.block(J - B, 0, B, P);
    V.middleCols(P, B) = W;
    T.setZero();
    T.topLeftCorner(P, P) = theta.head(P).asDiagonal();
    T.block(P, 0, B, P) = coupling;
    T.block(0, P, P, B) = coupling.transpose();
    j = p + b;
  }
  std::string msg = "lowest_eigenpairs: no convergence after " + std::to_string(req.max_iter) +
                    " restarts; best residuals:";
  for (double r : best) msg += " " + std::to_string(r);
  throw ConvergenceError(msg, best);
}

struct RefineRequest {
  std::size_t wanted = 1;       ///< leading columns that must converge
  double tol = 1e-8;
  std::size_t degree = 40;      ///< Chebyshev filter degree per cycle
  std::size_t max_cycles = 200;
  double upper_bound = 0.0;     ///< bound on the largest eigenvalue
  std::uint64_t seed = 20140202;
};

/// Chebyshev-filtered subspace iteration starting from `block` (n × m,
/// m > wanted). Converges the lowest `wanted` eigenpairs of the span's
/// invariant subspace; the extra columns act as a buffer. Memory stays at one
/// block plus a few vectors.
template <typename Apply, typename Project = NoProjection>
std::vector<EigenPair> refine_eigenpairs(Apply &&apply, Eigen::MatrixXd block,
                                         const RefineRequest &req, Project &&project = {}) {
  const std::size_t n = static_cast<std::size_t>(block.rows());
  const std::size_t m = static_cast<std::size_t>(block.cols());
  if (req.wanted < 1 || req.wanted >= m) {
    throw std::invalid_argument("refine_eigenpairs: need 1 <= wanted < block columns");
  }
  if (req.degree < 1) throw std::invalid_argument("refine_eigenpairs: degree must be positive");
  const auto N = static_cast<Eigen::Index>(n);
  const auto Mc = static_cast<Eigen::Index>(m);
  std::mt19937_64 rng(req.seed);
  Eigen::VectorXd hv(N), y0(N), y1(N), y2(N);
  std::vector<double> best(req.wanted, std::numeric_limits<double>::infinity());

  for (Eigen::Index c = 0; c < Mc; ++c) project(std::span<double>(block.col(c).data(), n));

  for (std::size_t cycle = 0; cycle < req.max_cycles; ++cycle) {
    Eigen::MatrixXd empty;
    detail::orthonormalize_block(empty, 0, block, rng, project);

    // Rayleigh-Ritz
    Eigen::MatrixXd G(Mc, Mc);
    for (Eigen::Index c = 0; c < Mc; ++c) {
      detail::apply_col(apply, block.col(c).data(), hv.data(), n);
      project(std::span<double>(hv.data(), n));
      G.col(c) = block.transpose() * hv;
    }
    G = 0.5 * (G + G.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    const Eigen::VectorXd theta = es.eigenvalues();
    const Eigen::MatrixXd &S = es.eigenvectors();
    constexpr Eigen::Index chunk = 4096;
    for (Eigen::Index r0 = 0; r0 < N; r0 += chunk) {
      const Eigen::Index rows = std::min(chunk, N - r0);
      Eigen::MatrixXd tmp = block.middleRows(r0, rows) * S;
      block.middleRows(r0, rows) = tmp;
    }

    std::vector<EigenPair> out(req.wanted);
    bool ok = true;
    for (std::size_t i = 0; i < req.wanted; ++i) {
      auto col = block.col(static_cast<Eigen::Index>(i));
      detail::apply_col(apply, col.data(), hv.data(), n);
      project(std::span<double>(hv.data(), n));
      const double r = (hv - theta(static_cast<Eigen::Index>(i)) * col).norm();
      best[i] = std::min(best[i], r);
      out[i].value = theta(static_cast<Eigen::Index>(i));
      out[i].residual = r;
      if (r > req.tol) ok = false;
    }
    if (ok) {
      for (std::size_t i = 0; i < req.wanted; ++i) {
        out[i].vector = block.col(static_cast<Eigen::Index>(i));
        detail::fix_sign(out[i].vector);
      }
      return out;
    }

    // Filter: damp [cut, upper], amplify below cut.
    const double lower = theta(0);
    const double cut = theta(Mc - 1);
    const double upper = req.upper_bound;
    if (!(upper > cut)) {
      throw std::invalid_argument("refine_eigenpairs: upper bound must exceed the block's Ritz values");
    }
    const double e = 0.5 * (upper - cut);
    const double c0 = 0.5 * (upper + cut);
    const double sigma1 = e / (lower - c0);
    for (Eigen::Index c = 0; c < Mc; ++c) {
      // the projector commutes with the operator, so one pass at the end
      // removes the rounding drift
      y0 = block.col(c);
      detail::apply_col(apply, y0.data(), hv.data(), n);
      y1 = (hv - c0 * y0) * (sigma1 / e);
      double sigma = sigma1;
      for (std::size_t d = 1; d < req.degree; ++d) {
        const double sigma_new = 1.0 / (2.0 / sigma1 - sigma);
        detail::apply_col(apply, y1.data(), hv.data(), n);
        y2 = (hv - c0 * y1) * (2.0 * sigma_new / e) - (sigma * sigma_new) * y0;
        y0.swap(y1);
        y1.swap(y2);
        sigma = sigma_new;
      }
      project(std::span<double>(y1.data(), n));
      block.col(c) = y1;
    }
  }
  std::string msg = "refine_eigenpairs: no convergence after " + std::to_string(req.max_cycles) +
                    " cycles; best residuals:";
  for (double r : best) msg += " " + std::to_string(r);
  throw ConvergenceError(msg, best);
}

/// Upper bound on the largest eigenvalue from a short Lanczos run:
/// θ_max + |β_last|, inflated slightly. Used when no Gershgorin bound is at hand.
template <typename Apply>
double lanczos_upper_bound(Apply &&apply, std::size_t n, std::size_t steps = 30,
                           std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  steps = std::min(steps, n);
  const auto N = static_cast<Eigen::Index>(n);
  Eigen::MatrixXd Q(N, static_cast<Eigen::Index>(steps));
  Eigen::VectorXd q(N), w(N);
  detail::fill_random(q.data(), n, rng);
  q.normalize();
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(steps), static_cast<Eigen::Index>(steps));
  double beta = 0.0;
  std::size_t used = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    Q.col(static_cast<Eigen::Index>(s)) = q;
    detail::apply_col(apply, q.data(), w.data(), n);
    auto Qs = Q.leftCols(static_cast<Eigen::Index>(s + 1));
    for (int pass = 0; pass < 2; ++pass) {
      Eigen::VectorXd h = Qs.transpose() * w;
      w.noalias() -= Qs * h;
      T.col(static_cast<Eigen::Index>(s)).head(static_cast<Eigen::Index>(s + 1)) += h;
    }
    used = s + 1;
    beta = w.norm();
    if (beta < 1e-12) break;
    if (s + 1 < steps) {
      T(static_cast<Eigen::Index>(s + 1), static_cast<Eigen::Index>(s)) = beta;
      q = w / beta;
    }
  }
  const auto U = static_cast<Eigen::Index>(used);
  Eigen::MatrixXd Ts = T.topLeftCorner(U, U);
  Ts = 0.5 * (Ts + Ts.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Ts, Eigen::EigenvaluesOnly);
  const double top = es.eigenvalues()(U - 1);
  return top + beta + 1e-8 * std::abs(top);
}

} // namespace berryfact
