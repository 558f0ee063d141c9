// End-to-end acceptance run: BO scans and M = 10 exact factorization on the
// desk, default and fine presets, a mass sweep on default, and the property
// checks. Prints one PASS/FAIL line per criterion; exit status 1 if any fail.

#include "berryfact/experiments.hpp"

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace berryfact;
namespace fs = std::filesystem;

namespace {

constexpr double kPaperCI = -0.286;
constexpr double kPaperEA = -0.282;
constexpr double kPaperEB = -0.201;
constexpr double kEnergyTol = 0.01;
constexpr double kChiRatioMin = 1e-3;
constexpr double kConnectionMax = 1e-8;
constexpr double kJumpRatioMax = 5.0;
constexpr double kOracleTol = 1e-8;
constexpr double kLaplacianTol = 1e-12;
constexpr double kReconstructionTol = 1e-14;
constexpr double kMarginalTol = 1e-10;
constexpr double kSymmetryTol = 1e-8;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void log(const std::string &s) { fmt::print(stderr, "[acceptance] {}\n", s); }

struct PresetSummary {
  std::string name;
  double h = 0.0;
  std::optional<CIEstimate> upper, lower;
  double ci_energy = NAN; ///< mean of levels 1 and 2 at the refined upper intersection
  double E_A = NAN, E_B = NAN;
  double res_cond = NAN, res_nuc = NAN;
  double bo_seconds = 0.0, exact_seconds = 0.0;
};

RunConfig preset(const std::string &name) {
  RunConfig cfg = preset_config(name);
  cfg.model.M = 10.0;
  return cfg;
}

double degenerate_energy(const RunConfig &cfg, const CIEstimate &c) {
  auto lv = solve_bo_at(cfg.model, cfg.electron_grid(), c.X_refined, c.Y_refined, 3, bo_request(cfg));
  return 0.5 * (lv[1].energy + lv[2].energy);
}

double max_mirror_mismatch(const BOScanResult &scan, std::size_t axis) {
  const Grid &g = scan.nuclear_grid();
  const std::size_t nX = g.dim(0), nY = g.dim(1);
  double worst = 0.0;
  for (std::size_t i = 0; i < nX; ++i) {
    for (std::size_t j = 0; j < nY; ++j) {
      const std::size_t r = i * nY + j;
      const std::size_t p = axis == 0 ? (nX - 1 - i) * nY + j : i * nY + (nY - 1 - j);
      for (std::size_t n = 0; n < scan.n_states(); ++n) {
        worst = std::max(worst, std::abs(scan.energy(r, n) - scan.energy(p, n)));
      }
    }
  }
  return worst;
}

struct Line {
  bool pass = true;
  std::vector<std::string> notes;
  void require(bool ok, const std::string &what) {
    pass = pass && ok;
    notes.push_back((ok ? "" : "!") + what);
  }
};

void report(int id, const char *title, const Line &l) {
  std::string detail;
  for (const auto &n : l.notes) detail += (detail.empty() ? "" : "; ") + n;
  fmt::print("criterion {} {}: {} | {}\n", id, l.pass ? "PASS" : "FAIL", title, detail);
  std::fflush(stdout);
}

std::string slurp(const fs::path &p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

} // namespace

int main() {
  const auto t_start = Clock::now();
  std::map<std::string, PresetSummary> sum;
  Line c1, c2, c3, c4, c5, c6, c7;

  // ---- property checks that need no preset run
  {
    const std::size_t n = 40;
    const double h = 0.1;
    Grid g({n}, {h}, {0.0});
    auto op = [&](std::span<const double> in, std::span<double> out) {
      RealField f(g, std::vector<double>(in.begin(), in.end()));
      auto l = laplacian_apply(f, {0});
      for (std::size_t i = 0; i < n; ++i) out[i] = -0.5 * l[i];
    };
    const auto pairs = dense_oracle(materialize(op, n));
    double worst = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
      const double exact =
          (1.0 - std::cos(static_cast<double>(k) * std::numbers::pi / static_cast<double>(n + 1))) / (h * h);
      worst = std::max(worst, std::abs(pairs[k - 1].value - exact) / std::max(1.0, exact));
    }
    c7.require(worst <= kLaplacianTol, fmt::format("laplacian closed form {:.1e}", worst));

    // every problem under the oracle cap: BO problems on the desk electron
    // grid and a 7^4 full problem
    const RunConfig desk = preset("desk");
    double bo_worst = 0.0;
    for (auto [X, Y] : {std::pair{0.0, 1.2}, {0.0, -1.2}, {0.7, 0.4}, {-1.5, 2.0}, {0.0, 0.0}}) {
      BOOperator op(desk.model, desk.electron_grid(), X, Y);
      const auto dense = dense_oracle(materialize(op, op.size()));
      const auto lv = solve_bo_at(desk.model, desk.electron_grid(), X, Y, 4, bo_request(desk));
      for (std::size_t k = 0; k < 4; ++k) bo_worst = std::max(bo_worst, std::abs(lv[k].energy - dense[k].value));
    }
    c7.require(bo_worst <= kOracleTol, fmt::format("BO oracle {:.1e}", bo_worst));
    ModelParams p = desk.model;
    FullOperator fop(p, Grid::symmetric({7, 7}, {3.0, 3.0}), Grid::symmetric({7, 7}, {2.0, 2.0}));
    const auto dense = dense_oracle(materialize(fop, fop.size()));
    EigenRequest req;
    req.k = 6;
    req.tol = 1e-10;
    const auto it = solve_full_direct(fop, req);
    double full_worst = 0.0;
    for (std::size_t k = 0; k < 6; ++k) full_worst = std::max(full_worst, std::abs(it[k].energy - dense[k].value));
    c7.require(full_worst <= kOracleTol, fmt::format("full 7^4 oracle {:.1e}", full_worst));
  }

  // ---- manifest determinism on the desk preset
  {
    const auto base = fs::temp_directory_path() / fmt::format("berryfact_acceptance_{}", ::getpid());
    RunConfig cfg = preset("desk");
    const auto a = run_command("berry", cfg, base / "a");
    const auto b = run_command("berry", cfg, base / "b");
    bool same = a.headline == b.headline && a.files == b.files;
    for (const auto &f : a.files) same = same && slurp(base / "a" / f) == slurp(base / "b" / f);
    const auto ma = nlohmann::json::parse(slurp(base / "a" / "manifest.json"));
    const auto mb = nlohmann::json::parse(slurp(base / "b" / "manifest.json"));
    same = same && ma["headline"] == mb["headline"];
    c7.require(same, "manifest headlines and files bit-identical");
    fs::remove_all(base);
  }

  // ---- preset runs
  std::vector<MassPoint> sweep;
  for (const std::string name : {"desk", "default", "fine"}) {
    const RunConfig cfg = preset(name);
    PresetSummary &s = sum[name];
    s.name = name;
    auto t0 = Clock::now();
    BOStage bo = run_bo_stage(cfg);
    s.h = bo.scan.nuclear_grid().spacing(1);
    s.upper = bo.ci.upper;
    s.lower = bo.ci.lower;
    if (s.upper) s.ci_energy = degenerate_energy(cfg, *s.upper);
    s.bo_seconds = seconds_since(t0);
    log(fmt::format("{} BO stage {:.0f} s, CI energy {:.6f}", name, s.bo_seconds, s.ci_energy));

    if (name == "default") {
      for (const auto &l : bo_loops(bo, cfg.loop_margin)) {
        const bool one = l.path.name == "upper" || l.path.name == "lower";
        const double want = one ? std::numbers::pi : 0.0;
        c2.require(l.path.phase == want, fmt::format("{} state {} phase {:.17g} (seam crossings {})", l.path.name,
                                                     l.state, l.path.phase, l.seam_crossings));
      }
      const double mx = max_mirror_mismatch(bo.scan, 0), my = max_mirror_mismatch(bo.scan, 1);
      c7.require(mx <= kSymmetryTol && my <= kSymmetryTol,
                 fmt::format("BO surface mirror symmetry x {:.1e} y {:.1e}", mx, my));
    }

    t0 = Clock::now();
    ContractedBasis basis(bo.scan, cfg.bo_states, cfg.threads);
    try {
      ExactStage ex = run_exact_stage(cfg, bo, basis, 10.0);
      s.exact_seconds = seconds_since(t0);
      s.E_A = ex.A.fs.energy;
      s.E_B = ex.B.fs.energy;
      s.res_cond = ex.A.res_cond_median;
      s.res_nuc = ex.A.res_nuc;
      log(fmt::format("{} exact stage {:.0f} s, E_A {:.6f} E_B {:.6f} conditional residual {:.3e} nuclear residual {:.3e}", name,
                      s.exact_seconds, s.E_A, s.E_B, s.res_cond, s.res_nuc));
      if (name == "default") {
        const auto &A = ex.A;
        sweep.push_back({10.0, A.fs.energy, ex.B.fs.energy, A.deviation, A.deviation_significant, A.hdr50_area,
                         A.streamline_deviation});
        c4.require(A.chi_eq_upper > kChiRatioMin && A.chi_eq_lower > kChiRatioMin,
                   fmt::format("chi_A(R_eq)/max upper {:.3e} lower {:.3e}", A.chi_eq_upper, A.chi_eq_lower));
        for (const auto &L : A.loops) {
          c4.require(L.phase == 0.0, fmt::format("Phi_A {} phase {:.17g}", L.name, L.phase));
        }
        c4.require(A.connection_max < kConnectionMax,
                   fmt::format("max |A_ex| {:.1e} over {} points", A.connection_max, A.connection_defined));
        c5.require(A.diabatic.ratio <= kJumpRatioMax,
                   fmt::format("axis max jump {:.4e}, typical off-axis jump {:.4e}, ratio {:.3f}",
                               A.diabatic.axis_max_jump, A.diabatic.offaxis_typical_jump, A.diabatic.ratio));
        c5.require(A.diabatic.bo_swap, "BO levels 1 and 2 swap character on X = 0");

        // factorization identities on state A
        const auto &f = A.fs;
        const std::size_t nR = f.nuclear.size(), ne = f.electron.size();
        double psimax = 0.0, recon = 0.0, phinorm = 0.0, chinorm = 0.0;
        for (std::size_t e = 0; e < ne; ++e) {
          for (std::size_t r = 0; r < nR; ++r) {
            const double v = f.psi[e * nR + r];
            psimax = std::max(psimax, std::abs(v));
            if (f.is_defined(r)) recon = std::max(recon, std::abs(f.chi[r] * f.phi[r * ne + e] - v));
          }
        }
        for (std::size_t r = 0; r < nR; ++r) {
          chinorm += f.chi[r] * f.chi[r];
          if (!f.is_defined(r)) continue;
          double s2 = 0.0;
          for (double v : f.phi_at(r)) s2 += v * v;
          phinorm = std::max(phinorm, std::abs(s2 * f.electron.cell_volume() - 1.0));
        }
        chinorm = std::abs(chinorm * f.nuclear.cell_volume() - 1.0);
        c7.require(recon <= kReconstructionTol * std::max(1.0, psimax),
                   fmt::format("chi*Phi reconstruction {:.1e}", recon));
        c7.require(chinorm <= kMarginalTol && phinorm <= kMarginalTol,
                   fmt::format("marginal norms chi {:.1e} Phi {:.1e}", chinorm, phinorm));
        // mirror parities of the computed state
        ModelParams p = cfg.model;
        FullOperator op(p, f.electron, f.nuclear);
        std::vector<double> refl(f.psi.size());
        for (std::size_t axis = 0; axis < 2; ++axis) {
          std::span<const double> in(f.psi.data(), f.psi.size());
          axis == 0 ? op.reflect_x(in, refl) : op.reflect_y(in, refl);
          const double sign = axis == 0 ? A.sector.x : A.sector.y;
          double d = 0.0, n2 = 0.0;
          for (std::size_t i = 0; i < refl.size(); ++i) {
            d += (refl[i] - sign * f.psi[i]) * (refl[i] - sign * f.psi[i]);
            n2 += f.psi[i] * f.psi[i];
          }
          const double rel = std::sqrt(d / n2);
          c7.require(rel <= kSymmetryTol, fmt::format("state A {}-mirror parity {:.1e}", axis ? "y" : "x", rel));
        }
      }
    } catch (const std::exception &e) {
      log(fmt::format("{} exact stage failed: {}", name, e.what()));
      c3.require(false, name + " exact stage: " + e.what());
    }

    if (name == "default") {
      for (double M : {20.0, 50.0}) {
        t0 = Clock::now();
        try {
          ExactStage ex = run_exact_stage(cfg, bo, basis, M);
          sweep.push_back({M, ex.A.fs.energy, ex.B.fs.energy, ex.A.deviation, ex.A.deviation_significant,
                           ex.A.hdr50_area, ex.A.streamline_deviation});
          log(fmt::format("default M={} exact stage {:.0f} s, D {:.6e}", M, seconds_since(t0), ex.A.deviation));
        } catch (const std::exception &e) {
          c6.require(false, fmt::format("M={} exact stage: {}", M, e.what()));
        }
      }
    }
  }

  // ---- criterion 1
  {
    const auto &d = sum["default"], &f = sum["fine"];
    auto near = [&](const std::optional<CIEstimate> &c, double sign, double h) {
      return c && std::abs(c->X) <= h + 1e-12 && std::abs(c->Y - sign * 1.2) <= h + 1e-12;
    };
    c1.require(near(d.upper, 1.0, d.h) && near(d.lower, -1.0, d.h),
               fmt::format("default gap minima at ({:g},{:g}) and ({:g},{:g}), cell {:g}", d.upper ? d.upper->X : NAN,
                           d.upper ? d.upper->Y : NAN, d.lower ? d.lower->X : NAN, d.lower ? d.lower->Y : NAN, d.h));
    c1.require(std::abs(d.ci_energy - kPaperCI) <= kEnergyTol,
               fmt::format("default degenerate energy {:.6f}", d.ci_energy));
    c1.require(near(f.upper, 1.0, f.h) && near(f.lower, -1.0, f.h), "fine gap minima within one cell");
    c1.require(std::abs(f.ci_energy - kPaperCI) < std::abs(d.ci_energy - kPaperCI),
               fmt::format("fine {:.6f} closer than default (desk {:.6f})", f.ci_energy, sum["desk"].ci_energy));
    c1.require(d.bo_seconds <= 600.0, fmt::format("default scan {:.0f} s", d.bo_seconds));
  }

  // ---- criterion 3
  {
    const auto &k = sum["desk"], &d = sum["default"], &f = sum["fine"];
    c3.require(std::abs(d.E_A - kPaperEA) <= kEnergyTol, fmt::format("default E_A {:.6f}", d.E_A));
    c3.require(std::abs(d.E_B - kPaperEB) <= kEnergyTol, fmt::format("default E_B {:.6f}", d.E_B));
    auto trend = [](double a, double b, double c, double paper) {
      return std::abs(b - paper) < std::abs(a - paper) && std::abs(c - paper) < std::abs(b - paper);
    };
    c3.require(trend(k.E_A, d.E_A, f.E_A, kPaperEA),
               fmt::format("E_A desk {:.6f} -> default {:.6f} -> fine {:.6f}", k.E_A, d.E_A, f.E_A));
    c3.require(trend(k.E_B, d.E_B, f.E_B, kPaperEB),
               fmt::format("E_B desk {:.6f} -> default {:.6f} -> fine {:.6f}", k.E_B, d.E_B, f.E_B));
    c3.require(k.bo_seconds + k.exact_seconds <= 300.0,
               fmt::format("desk {:.0f} s", k.bo_seconds + k.exact_seconds));
    c3.require(d.bo_seconds + d.exact_seconds <= 3600.0,
               fmt::format("default {:.0f} s", d.bo_seconds + d.exact_seconds));
  }

  // ---- criterion 6
  {
    std::string series;
    for (const auto &p : sweep) series += fmt::format(" M={:g}:{:.6e}", p.M, p.deviation);
    bool dec = sweep.size() == 3;
    for (std::size_t i = 1; i < sweep.size(); ++i) dec = dec && sweep[i].deviation < sweep[i - 1].deviation;
    c6.require(dec, "D(M)" + series);
    std::string extra;
    for (const auto &p : sweep) {
      extra += fmt::format(" M={:g}: D over chi >= 0.1 max {:.6e}, hdr50 {:.4f}, streamline {:.4f}", p.M,
                           p.deviation_significant, p.hdr50_area, p.streamline_deviation);
    }
    c6.notes.push_back("(info)" + extra);
  }

  // ---- criterion 7: residuals under refinement on state A
  {
    const auto &k = sum["desk"], &d = sum["default"], &f = sum["fine"];
    c7.require(d.res_cond < k.res_cond && f.res_cond < d.res_cond,
               fmt::format("conditional residual median desk {:.3e} default {:.3e} fine {:.3e}", k.res_cond, d.res_cond, f.res_cond));
    c7.require(d.res_nuc < k.res_nuc && f.res_nuc < d.res_nuc,
               fmt::format("nuclear residual desk {:.3e} default {:.3e} fine {:.3e}", k.res_nuc, d.res_nuc, f.res_nuc));
  }

  report(1, "BO conical intersection", c1);
  report(2, "BO Berry phase", c2);
  report(3, "full spectrum at M=10", c3);
  report(4, "exact smoothness at finite M", c4);
  report(5, "diabatic shape", c5);
  report(6, "mass sweep", c6);
  report(7, "property suites", c7);
  const bool all = c1.pass && c2.pass && c3.pass && c4.pass && c5.pass && c6.pass && c7.pass;
  fmt::print("acceptance: {} ({:.0f} s)\n", all ? "all criteria pass" : "some criteria fail", seconds_since(t_start));
  return all ? 0 : 1;
}
