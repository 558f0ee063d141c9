#pragma once

// Run configuration, presets, manifests and the four experiment drivers
// behind the command-line tool. Every driver writes its data files into an
// output directory and returns the headline numbers it also records in the
// manifest.

#include "berryfact/berry.hpp"
#include "berryfact/bo_surface.hpp"
#include "berryfact/exact_fact.hpp"
#include "berryfact/field_io.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifndef BERRYFACT_VERSION
#define BERRYFACT_VERSION "unknown"
#endif

namespace berryfact {

inline constexpr const char *kVersion = BERRYFACT_VERSION;

/// Bad or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct GridSpec {
  double extent = 1.0;    ///< half-width; the axis spans [−extent, extent]
  std::size_t points = 3; ///< odd, so 0 is a grid line

  bool operator==(const GridSpec &) const = default;
};

struct RunConfig {
  ModelParams model;
  GridSpec electron{8.0, 49};
  GridSpec nuclear{4.0, 33};

  std::size_t k = 0;             ///< contracted states per sector; 0 grows automatically
  double tol = 1e-8;             ///< full-problem residual tolerance
  double bo_tol = 1e-9;          ///< electronic residual tolerance
  std::uint64_t seed = 20140202;
  std::size_t max_iter = 1000;
  std::size_t bo_states = 10;    ///< electronic levels per nuclear point
  std::size_t degree = 40;       ///< Chebyshev filter degree
  std::vector<Sector> sectors = {{-1, -1}, {-1, +1}, {+1, -1}, {+1, +1}};

  MirrorConvention mirror = MirrorConvention::Antisymmetric;
  std::size_t loop_margin = 2;
  std::vector<double> masses = {1.0, 10.0, 20.0, 50.0};

  std::string preset = "default";
  std::string experiment;
  std::string output = "out";
  unsigned threads = 0;

  Grid electron_grid() const {
    return Grid::symmetric({electron.points, electron.points}, {electron.extent, electron.extent});
  }
  Grid nuclear_grid() const {
    return Grid::symmetric({nuclear.points, nuclear.points}, {nuclear.extent, nuclear.extent});
  }

  void validate() const {
    try {
      model.validate();
    } catch (const std::invalid_argument &e) {
      throw ConfigError(e.what());
    }
    auto grid_ok = [](const GridSpec &g, const char *name, std::size_t min_points) {
      if (!(g.extent > 0.0) || !std::isfinite(g.extent)) {
        throw ConfigError(std::string(name) + ".extent must be positive");
      }
      if (g.points < min_points || g.points % 2 == 0) {
        throw ConfigError(std::string(name) + ".points must be odd and at least " + std::to_string(min_points));
      }
    };
    grid_ok(electron, "electron", 3);
    grid_ok(nuclear, "nuclear", 1);
    if (!(tol > 0.0) || !(bo_tol > 0.0)) throw ConfigError("solver tolerances must be positive");
    if (bo_states < 3) throw ConfigError("solver.bo_states must be at least 3");
    if (max_iter < 1 || degree < 1) throw ConfigError("solver.max_iter and solver.degree must be positive");
    if (sectors.empty()) throw ConfigError("solver.sectors is empty");
    if (loop_margin < 1) throw ConfigError("berry.margin must be at least 1");
    if (masses.empty()) throw ConfigError("mass_sweep.masses is empty");
    for (double m : masses) {
      if (!(m > 0.0) || !std::isfinite(m)) throw ConfigError("mass_sweep.masses must be positive");
    }
  }

  bool operator==(const RunConfig &o) const {
    auto params = [](const ModelParams &p) { return std::tuple{p.a, p.b, p.R0, p.L, p.M}; };
    return params(model) == params(o.model) && electron == o.electron && nuclear == o.nuclear && k == o.k &&
           tol == o.tol && bo_tol == o.bo_tol && seed == o.seed && max_iter == o.max_iter &&
           bo_states == o.bo_states && degree == o.degree && sectors == o.sectors && mirror == o.mirror &&
           loop_margin == o.loop_margin && masses == o.masses && preset == o.preset &&
           experiment == o.experiment && output == o.output && threads == o.threads;
  }
};

inline const std::vector<std::string> &preset_names() {
  static const std::vector<std::string> names{"desk", "default", "fine"};
  return names;
}

/// Presets fix the two grids and nothing else.
inline void apply_preset(RunConfig &cfg, const std::string &name) {
  if (name == "desk") {
    cfg.electron = {8.0, 33};
    cfg.nuclear = {4.0, 25};
  } else if (name == "default") {
    cfg.electron = {8.0, 49};
    cfg.nuclear = {4.0, 33};
  } else if (name == "fine") {
    cfg.electron = {8.0, 65};
    cfg.nuclear = {4.0, 41};
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected desk, default or fine)");
  }
  cfg.preset = name;
}

inline RunConfig preset_config(const std::string &name) {
  RunConfig cfg;
  apply_preset(cfg, name);
  return cfg;
}

namespace detail {

inline std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double config_double(const std::string &key, const std::string &v) {
  try {
    const double d = parse_double(trim(v));
    if (!std::isfinite(d)) throw FormatError("not finite");
    return d;
  } catch (const FormatError &) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline std::uint64_t config_uint(const std::string &key, const std::string &v) {
  const std::string t = trim(v);
  if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(t);
  } catch (const std::exception &) {
    throw ConfigError(key + ": integer out of range");
  }
}

inline std::vector<std::string> split_list(const std::string &v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline MirrorConvention parse_mirror(const std::string &key, const std::string &v) {
  const std::string t = trim(v);
  if (t == "symmetric") return MirrorConvention::Symmetric;
  if (t == "antisymmetric") return MirrorConvention::Antisymmetric;
  if (t == "fewest_seams") return MirrorConvention::FewestSeams;
  throw ConfigError(key + ": expected symmetric, antisymmetric or fewest_seams, got '" + v + "'");
}

inline const char *mirror_name(MirrorConvention m) {
  switch (m) {
  case MirrorConvention::Symmetric: return "symmetric";
  case MirrorConvention::Antisymmetric: return "antisymmetric";
  case MirrorConvention::FewestSeams: return "fewest_seams";
  }
  return "antisymmetric";
}

using Setter = std::function<void(RunConfig &, const std::string &key, const std::string &value)>;

inline const std::map<std::string, Setter> &config_setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["model.a"] = [](RunConfig &c, auto &k, auto &v) { c.model.a = config_double(k, v); };
    t["model.b"] = [](RunConfig &c, auto &k, auto &v) { c.model.b = config_double(k, v); };
    t["model.R0"] = [](RunConfig &c, auto &k, auto &v) { c.model.R0 = config_double(k, v); };
    t["model.L"] = [](RunConfig &c, auto &k, auto &v) { c.model.L = config_double(k, v); };
    t["model.M"] = [](RunConfig &c, auto &k, auto &v) { c.model.M = config_double(k, v); };
    t["electron.extent"] = [](RunConfig &c, auto &k, auto &v) { c.electron.extent = config_double(k, v); };
    t["electron.points"] = [](RunConfig &c, auto &k, auto &v) { c.electron.points = config_uint(k, v); };
    t["nuclear.extent"] = [](RunConfig &c, auto &k, auto &v) { c.nuclear.extent = config_double(k, v); };
    t["nuclear.points"] = [](RunConfig &c, auto &k, auto &v) { c.nuclear.points = config_uint(k, v); };
    t["solver.k"] = [](RunConfig &c, auto &k, auto &v) { c.k = config_uint(k, v); };
    t["solver.tol"] = [](RunConfig &c, auto &k, auto &v) { c.tol = config_double(k, v); };
    t["solver.bo_tol"] = [](RunConfig &c, auto &k, auto &v) { c.bo_tol = config_double(k, v); };
    t["solver.seed"] = [](RunConfig &c, auto &k, auto &v) { c.seed = config_uint(k, v); };
    t["solver.max_iter"] = [](RunConfig &c, auto &k, auto &v) { c.max_iter = config_uint(k, v); };
    t["solver.bo_states"] = [](RunConfig &c, auto &k, auto &v) { c.bo_states = config_uint(k, v); };
    t["solver.degree"] = [](RunConfig &c, auto &k, auto &v) { c.degree = config_uint(k, v); };
    t["solver.sectors"] = [](RunConfig &c, auto &k, auto &v) {
      c.sectors.clear();
      for (const auto &s : split_list(v)) {
        try {
          c.sectors.push_back(parse_sector(s));
        } catch (const std::invalid_argument &) {
          throw ConfigError(k + ": bad sector '" + s + "' (expected two of + and -)");
        }
      }
    };
    t["gauge.mirror"] = [](RunConfig &c, auto &k, auto &v) { c.mirror = parse_mirror(k, v); };
    t["berry.margin"] = [](RunConfig &c, auto &k, auto &v) { c.loop_margin = config_uint(k, v); };
    t["mass_sweep.masses"] = [](RunConfig &c, auto &k, auto &v) {
      c.masses.clear();
      for (const auto &s : split_list(v)) c.masses.push_back(config_double(k, s));
    };
    t["run.preset"] = [](RunConfig &c, auto &, auto &v) { apply_preset(c, trim(v)); };
    t["run.experiment"] = [](RunConfig &c, auto &, auto &v) { c.experiment = trim(v); };
    t["run.output"] = [](RunConfig &c, auto &, auto &v) { c.output = trim(v); };
    t["run.threads"] = [](RunConfig &c, auto &k, auto &v) {
      c.threads = static_cast<unsigned>(config_uint(k, v));
    };
    return t;
  }();
  return table;
}

} // namespace detail

/// Parse an INI-style `[section]` / `key = value` file. A `run.preset` key is
/// applied first so explicit grid keys in the same file win over it. Unknown
/// sections or keys are errors.
inline RunConfig parse_config(std::istream &is, RunConfig cfg = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error &e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  const auto &setters = detail::config_setters();
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto &[section, body] : tree) {
    if (body.empty()) throw ConfigError("key '" + section + "' is outside any section");
    for (const auto &[key, value] : body) {
      const std::string full = section + "." + key;
      if (!value.empty()) throw ConfigError("nested key under " + full);
      if (!setters.count(full)) throw ConfigError("unknown config key '" + full + "'");
      entries.emplace_back(full, value.data());
    }
  }
  for (const auto &[k, v] : entries) {
    if (k == "run.preset") setters.at(k)(cfg, k, v);
  }
  for (const auto &[k, v] : entries) {
    if (k != "run.preset") setters.at(k)(cfg, k, v);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config_string(const std::string &text, RunConfig cfg = {}) {
  std::istringstream is(text);
  return parse_config(is, std::move(cfg));
}

inline RunConfig load_config(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  return parse_config(is);
}

/// The fully resolved configuration as a config file; parsing it back gives
/// the same RunConfig.
inline std::string echo_config(const RunConfig &c) {
  using detail::mirror_name;
  auto num = [](double v) { return format_number(v); };
  std::string sectors, masses;
  for (const auto &s : c.sectors) sectors += (sectors.empty() ? "" : ", ") + s.name();
  for (double m : c.masses) masses += (masses.empty() ? "" : ", ") + num(m);
  std::string out;
  out += "[run]\n";
  out += "preset = " + c.preset + "\n";
  if (!c.experiment.empty()) out += "experiment = " + c.experiment + "\n";
  out += "output = " + c.output + "\n";
  out += fmt::format("threads = {}\n", c.threads);
  out += "\n[model]\n";
  out += "a = " + num(c.model.a) + "\nb = " + num(c.model.b) + "\nR0 = " + num(c.model.R0) + "\nL = " +
         num(c.model.L) + "\nM = " + num(c.model.M) + "\n";
  out += "\n[electron]\nextent = " + num(c.electron.extent) + fmt::format("\npoints = {}\n", c.electron.points);
  out += "\n[nuclear]\nextent = " + num(c.nuclear.extent) + fmt::format("\npoints = {}\n", c.nuclear.points);
  out += "\n[solver]\n";
  out += fmt::format("k = {}\n", c.k);
  out += "tol = " + num(c.tol) + "\nbo_tol = " + num(c.bo_tol) + "\n";
  out += fmt::format("seed = {}\nmax_iter = {}\nbo_states = {}\ndegree = {}\n", c.seed, c.max_iter,
                     c.bo_states, c.degree);
  out += "sectors = " + sectors + "\n";
  out += std::string("\n[gauge]\nmirror = ") + mirror_name(c.mirror) + "\n";
  out += fmt::format("\n[berry]\nmargin = {}\n", c.loop_margin);
  out += "\n[mass_sweep]\nmasses = " + masses + "\n";
  return out;
}

// ---------------------------------------------------------------- output ---

namespace detail {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Write through a temporary file and rename, so readers never see a
/// partial file.
inline void write_atomically(const std::filesystem::path &path, const std::string &text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << text;
    os.flush();
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string num(double v) { return format_number(v); }

/// Headline numbers become JSON numbers when finite and null otherwise.
inline nlohmann::json jnum(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

} // namespace detail

/// Collects output files for the manifest.
class OutputDir {
public:
  explicit OutputDir(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }
  const std::filesystem::path &path() const { return dir_; }
  const std::vector<std::string> &files() const { return files_; }

  std::filesystem::path add(const std::string &name) {
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
    return dir_ / name;
  }
  void field(const std::string &name, const RealField &f) { write_gfld(add(name), f); }
  void text(const std::string &name, const std::string &body) { detail::write_atomically(add(name), body); }

private:
  std::filesystem::path dir_;
  std::vector<std::string> files_;
};

struct CommandResult {
  std::string command;
  nlohmann::json headline = nlohmann::json::object();
  std::vector<std::string> files;
};

/// manifest.json: config echo, code version, timestamps, files, headline.
inline nlohmann::json make_manifest(const RunConfig &cfg, const CommandResult &res, const std::string &started,
                                    const std::string &finished) {
  nlohmann::json m;
  m["code_version"] = kVersion;
  m["command"] = res.command;
  m["config"] = echo_config(cfg);
  m["started"] = started;
  m["finished"] = finished;
  m["files"] = res.files;
  m["headline"] = res.headline;
  return m;
}

inline void write_manifest(const std::filesystem::path &dir, const nlohmann::json &manifest) {
  detail::write_atomically(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ------------------------------------------------------------- BO stage ---

struct BOStage {
  BOScanResult scan;
  SeamReport seams;
  CILocation ci;
};

inline EigenRequest bo_request(const RunConfig &cfg) {
  EigenRequest req;
  req.tol = cfg.bo_tol;
  req.seed = cfg.seed;
  req.max_iter = cfg.max_iter;
  return req;
}

/// Scan, gauge and gap minima.
inline BOStage run_bo_stage(const RunConfig &cfg) {
  cfg.validate();
  BOStage st;
  st.scan = scan_bo(cfg.model, cfg.electron_grid(), cfg.nuclear_grid(), cfg.bo_states, bo_request(cfg), cfg.threads);
  st.seams = fix_gauge_real(st.scan, kOverlapFloor, cfg.mirror);
  st.ci = locate_conical_intersections(st.scan);
  return st;
}

namespace detail {

inline nlohmann::json ci_json(const std::optional<CIEstimate> &c) {
  if (!c) return nullptr;
  return {{"X", c->X}, {"Y", c->Y}, {"X_refined", c->X_refined}, {"Y_refined", c->Y_refined},
          {"gap", c->gap}, {"energy", c->energy}};
}

inline std::string xy(const Grid &g, std::size_t r) {
  const std::size_t nY = g.dim(1);
  return num(g.coord(0, r / nY)) + "," + num(g.coord(1, r % nY));
}

} // namespace detail

/// Surfaces, gap, polarization vectors and the seam list.
inline CommandResult cmd_bo_scan(const RunConfig &cfg, const std::filesystem::path &out_dir,
                                 BOStage *keep = nullptr) {
  BOStage st = run_bo_stage(cfg);
  OutputDir out(out_dir);
  const Grid &g = st.scan.nuclear_grid();
  const std::size_t shown = std::min<std::size_t>(3, st.scan.n_states());
  for (std::size_t n = 0; n < shown; ++n) out.field(fmt::format("eps_bo_{}.gfld", n), st.scan.surface(n));
  out.field("gap.gfld", st.scan.gap());
  const bool stencil = g.dim(0) >= 3 && g.dim(1) >= 3;
  if (stencil) {
    for (std::size_t n = 1; n < shown; ++n) {
      out.field(fmt::format("eps_gbo_{}.gfld", n), generalized_bo_pes(st.scan, n, st.seams));
    }
  }
  std::string pol = "X,Y,state,px,py\n";
  for (std::size_t r = 0; r < g.size(); ++r) {
    for (std::size_t n = 0; n < shown; ++n) {
      const auto &p = st.scan.polarization(r, n);
      pol += detail::xy(g, r) + fmt::format(",{},", n) + detail::num(p[0]) + "," + detail::num(p[1]) + "\n";
    }
  }
  out.text("polarization.csv", pol);
  std::string seams = "state,kind,X1,Y1,X2,Y2,overlap\n";
  auto seam_row = [&](const SeamEdge &e, const char *kind) {
    seams += fmt::format("{},{},", e.state, kind) + detail::xy(g, e.from) + "," + detail::xy(g, e.to) + "," +
             detail::num(e.overlap) + "\n";
  };
  for (const auto &e : st.seams.edges) seam_row(e, to_string(e.kind));
  for (const auto &e : st.seams.singular) seam_row(e, "singular");
  out.text("seams.csv", seams);

  CommandResult res{"bo-scan", {}, {}};
  auto &h = res.headline;
  h["ci_upper"] = detail::ci_json(st.ci.upper);
  h["ci_lower"] = detail::ci_json(st.ci.lower);
  h["min_gap"] = st.ci.upper || st.ci.lower
                     ? nlohmann::json(std::min(st.ci.upper ? st.ci.upper->gap : INFINITY,
                                               st.ci.lower ? st.ci.lower->gap : INFINITY))
                     : nlohmann::json(nullptr);
  if (g.size() == 1) {
    nlohmann::json levels = nlohmann::json::array();
    for (std::size_t n = 0; n < st.scan.n_states(); ++n) levels.push_back(st.scan.energy(0, n));
    h["levels"] = levels;
  }
  nlohmann::json seam_counts = nlohmann::json::object();
  for (std::size_t n = 0; n < shown; ++n) {
    seam_counts[std::to_string(n)] = {{"L1", st.seams.count(n, SeamEdge::Kind::L1)},
                                      {"L2", st.seams.count(n, SeamEdge::Kind::L2)},
                                      {"other", st.seams.count(n, SeamEdge::Kind::Other)}};
  }
  h["seams"] = seam_counts;
  h["singular_edges"] = st.seams.singular.size();
  h["nuclear_points"] = g.size();
  res.files = out.files();
  if (keep) *keep = std::move(st);
  return res;
}

// ---------------------------------------------------------------- loops ---

/// Height at which loops are centred: the located upper gap minimum, or the
/// equilateral height when the scan has no upper half plane.
inline double loop_centre(const BOStage &st) {
  return st.ci.upper ? std::abs(st.ci.upper->Y_refined) : st.scan.params().equilateral_height();
}

/// Number of path edges that are seam edges of state n.
inline std::size_t seam_crossings(const LoopPath &p, const SeamReport &seams, std::size_t n) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < p.vertices.size(); ++i) {
    c += seams.is_seam(n, p.vertices[i], p.vertices[(i + 1) % p.vertices.size()]) ? 1 : 0;
  }
  return c;
}

struct LoopRecord {
  LoopPath path;
  std::size_t state = 0;
  std::size_t seam_crossings = 0;
};

inline std::vector<LoopRecord> bo_loops(const BOStage &st, std::size_t margin) {
  std::vector<LoopRecord> out;
  const double dv = st.scan.electron_grid().cell_volume();
  for (const auto &L : loop_battery(st.scan.nuclear_grid(), loop_centre(st), margin)) {
    for (std::size_t n = 1; n <= 2; ++n) {
      auto p = evaluate_loop<double>(L, [&](std::size_t r) { return st.scan.state(r, n); }, dv);
      out.push_back({p, n, seam_crossings(p, st.seams, n)});
    }
  }
  return out;
}

namespace detail {

inline std::string loop_vertices_csv(const Grid &g, const LoopPath &p) {
  std::string s = "X,Y\n";
  for (auto r : p.vertices) s += xy(g, r) + "\n";
  return s;
}

} // namespace detail

/// Wilson loops of the two gauge-fixed excited BO states over the standard
/// battery. The scan is recomputed from the configuration.
inline CommandResult cmd_berry(const RunConfig &cfg, const std::filesystem::path &out_dir,
                               const BOStage *given = nullptr) {
  std::optional<BOStage> own;
  if (!given) own = run_bo_stage(cfg);
  const BOStage &st = given ? *given : *own;
  OutputDir out(out_dir);
  const Grid &g = st.scan.nuclear_grid();
  auto loops = bo_loops(st, cfg.loop_margin);
  std::string csv = "loop,state,vertices_file,vertices,phase,min_overlap,negative_overlaps,seam_crossings\n";
  CommandResult res{"berry", {}, {}};
  for (const auto &l : loops) {
    const std::string vf = "loop_" + l.path.name + ".csv";
    if (l.state == 1) out.text(vf, detail::loop_vertices_csv(g, l.path));
    csv += fmt::format("{},{},{},{},", l.path.name, l.state, vf, l.path.vertices.size()) +
           detail::num(l.path.phase) + "," + detail::num(l.path.min_overlap) +
           fmt::format(",{},{}\n", l.path.negative_overlaps, l.seam_crossings);
    res.headline["loops"][l.path.name][std::to_string(l.state)] = l.path.phase;
  }
  out.text("loops.csv", csv);
  res.headline["loop_centre_Y"] = loop_centre(st);
  res.files = out.files();
  return res;
}

// --------------------------------------------------------- exact stage ---

/// Diabatic-shape check along the X = 0 column.
struct DiabaticCheck {
  double axis_max_jump = NAN;      ///< max |Δ_Y ε^ex| between adjacent points on X = 0
  double offaxis_typical_jump = NAN; ///< median |Δ_Y ε^ex| over columns with |X| > 2h_X
  double ratio = NAN;
  bool bo_swap = false;            ///< BO levels 1 and 2 exchange x/y character along X = 0
  std::size_t axis_points = 0;
};

struct ExactStateReport {
  std::string label;
  Sector sector;
  double residual = 0.0;
  FactorizedState fs;
  PLikeClassification cls;
  RealField eps_ex;
  RealField res_cond;
  double res_cond_median = NAN;
  double res_nuc = NAN;
  double chi_eq_upper = NAN; ///< χ at (0, ±Y_eq) relative to max χ (bilinear)
  double chi_eq_lower = NAN;
  double connection_max = NAN;
  std::size_t connection_defined = 0;
  std::vector<LoopPath> loops;
  CurrentCheck current;
  double deviation = NAN;    ///< max over |X| > 2h_X of |ε^ex − ε^BO_1|
  double deviation_significant = NAN; ///< the same, restricted to χ ≥ kSignificantChi·max χ
  double hdr50_area = NAN;   ///< smallest area holding half of |χ|²
  double streamline_deviation = NAN;
  DiabaticCheck diabatic;
};

struct ExactStage {
  double M = 0.0;
  std::vector<ContractedSector> contracted;
  std::vector<std::pair<double, PLikeClassification>> refined; ///< energy-ordered refined states
  ExactStateReport A, B;
};

/// Share of significant χ used by the region-restricted metrics.
inline constexpr double kSignificantChi = 0.1;

namespace detail {

inline double bilinear(const RealField &f, double X, double Y) {
  const Grid &g = f.grid();
  const std::size_t nX = g.dim(0), nY = g.dim(1);
  auto cell = [&](std::size_t a, double x, std::size_t n) {
    double t = (x - g.origin(a)) / g.spacing(a);
    t = std::clamp(t, 0.0, static_cast<double>(n - 1));
    std::size_t i = std::min(static_cast<std::size_t>(t), n > 1 ? n - 2 : 0);
    return std::pair{i, n > 1 ? t - static_cast<double>(i) : 0.0};
  };
  auto [i, tx] = cell(0, X, nX);
  auto [j, ty] = cell(1, Y, nY);
  auto at = [&](std::size_t a, std::size_t b) {
    return f[std::min(a, nX - 1) * nY + std::min(b, nY - 1)];
  };
  return (1 - tx) * (1 - ty) * at(i, j) + tx * (1 - ty) * at(i + 1, j) + (1 - tx) * ty * at(i, j + 1) +
         tx * ty * at(i + 1, j + 1);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return NAN;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  return 0.5 * (hi + *std::max_element(v.begin(), mid));
}

inline double chi_max(const FactorizedState &fs) {
  double m = 0.0;
  for (double c : fs.chi.values()) m = std::max(m, c);
  return m;
}

inline DiabaticCheck diabatic_check(const ExactStateReport &s, const BOScanResult &scan) {
  DiabaticCheck d;
  const Grid &g = s.fs.nuclear;
  const std::size_t nX = g.dim(0), nY = g.dim(1);
  const double hX = g.spacing(0), cmax = chi_max(s.fs);
  const std::size_t ic = g.nearest_index(0, 0.0);
  auto ok = [&](std::size_t r) { return std::isfinite(s.eps_ex[r]) && s.fs.chi[r] >= kSignificantChi * cmax; };
  std::vector<double> off;
  d.axis_max_jump = 0.0;
  for (std::size_t i = 0; i < nX; ++i) {
    for (std::size_t j = 0; j + 1 < nY; ++j) {
      const std::size_t r = i * nY + j, q = r + 1;
      if (!ok(r) || !ok(q)) continue;
      const double jump = std::abs(s.eps_ex[q] - s.eps_ex[r]);
      if (i == ic) {
        d.axis_max_jump = std::max(d.axis_max_jump, jump);
        ++d.axis_points;
      } else if (std::abs(g.coord(0, i)) > 2.0 * hX) {
        off.push_back(jump);
      }
    }
  }
  d.offaxis_typical_jump = median(off);
  d.ratio = d.axis_max_jump / d.offaxis_typical_jump;
  // level 1 is x-polarized on one side of Y_eq and y-polarized on the other
  const double yeq = scan.params().equilateral_height();
  int below = 0, above = 0;
  for (std::size_t j = 0; j < nY; ++j) {
    const double Y = g.coord(1, j);
    if (!(Y > 0.0)) continue;
    const auto &p = scan.polarization(ic * nY + j, 1);
    const int kind = std::abs(p[0]) > std::abs(p[1]) ? 1 : 2;
    if (Y < yeq) {
      below = below == 0 || below == kind ? kind : -1;
    } else {
      above = above == 0 || above == kind ? kind : -1;
    }
  }
  d.bo_swap = below > 0 && above > 0 && below != above;
  return d;
}

/// Largest angle between the polarization of Φ on the row nearest Y_eq and
/// its value at X = 0, over significant χ.
inline double streamline_deviation(const ExactStateReport &s, const StateProfile &prof, double yeq) {
  const Grid &g = s.fs.nuclear;
  const std::size_t nX = g.dim(0), nY = g.dim(1);
  const std::size_t j = g.nearest_index(1, yeq), ic = g.nearest_index(0, 0.0);
  const double cmax = chi_max(s.fs);
  const auto &p0 = prof.polarization[ic * nY + j];
  const double a0 = std::atan2(p0[1], p0[0]);
  double dev = 0.0;
  for (std::size_t i = 0; i < nX; ++i) {
    const std::size_t r = i * nY + j;
    if (s.fs.chi[r] < kSignificantChi * cmax) continue;
    const auto &p = prof.polarization[r];
    dev = std::max(dev, std::abs(wrap_phase(std::atan2(p[1], p[0]) - a0)));
  }
  return dev;
}

inline double hdr50(const FactorizedState &fs) {
  std::vector<double> d(fs.chi.values().begin(), fs.chi.values().end());
  for (auto &v : d) v *= v;
  std::sort(d.begin(), d.end(), std::greater<>());
  const double dV = fs.nuclear.cell_volume();
  double acc = 0.0;
  std::size_t n = 0;
  while (n < d.size() && acc < 0.5) acc += d[n++] * dV;
  return static_cast<double>(n) * dV;
}

inline ExactStateReport analyse_state(std::string label, FullState st, const PLikeClassification &cls,
                                      const BOStage &bo, const RunConfig &cfg, double M) {
  ExactStateReport s;
  s.label = std::move(label);
  s.sector = st.sector;
  s.residual = st.residual;
  s.cls = cls;
  ModelParams params = cfg.model;
  params.M = M;
  const Grid &eg = bo.scan.electron_grid(), &ng = bo.scan.nuclear_grid();
  s.current = current_identity_check(st.psi, eg, ng);
  s.fs = factorize(st.psi, eg, ng, st.energy);
  s.fs.label = s.label;
  s.eps_ex = exact_pes(s.fs, params, cfg.threads);
  s.res_cond = residual_conditional(s.fs, params, s.eps_ex, cfg.threads);
  s.res_nuc = residual_nuclear(s.fs, params, s.eps_ex);
  const double cmax = chi_max(s.fs);
  std::vector<double> vals;
  for (std::size_t r = 0; r < ng.size(); ++r) {
    if (std::isfinite(s.res_cond[r]) && s.fs.chi[r] > 10.0 * s.fs.chi_floor) vals.push_back(s.res_cond[r]);
  }
  s.res_cond_median = median(vals);
  const double yeq = params.equilateral_height();
  s.chi_eq_upper = bilinear(s.fs.chi, 0.0, yeq) / cmax;
  s.chi_eq_lower = bilinear(s.fs.chi, 0.0, -yeq) / cmax;
  const auto A = exact_connection(s.fs);
  s.connection_max = 0.0;
  for (std::size_t r = 0; r < ng.size(); ++r) {
    if (!A.defined(r)) continue;
    ++s.connection_defined;
    s.connection_max = std::max({s.connection_max, std::abs(A.AX[r]), std::abs(A.AY[r])});
  }
  for (const auto &L : loop_battery(ng, loop_centre(bo), cfg.loop_margin)) {
    s.loops.push_back(evaluate_loop<double>(L, [&](std::size_t r) { return s.fs.phi_at(r); }, eg.cell_volume()));
  }
  const double hX = ng.spacing(0);
  s.deviation = 0.0;
  s.deviation_significant = 0.0;
  for (std::size_t r = 0; r < ng.size(); ++r) {
    const double X = ng.coord(0, r / ng.dim(1));
    if (std::abs(X) <= 2.0 * hX || !std::isfinite(s.eps_ex[r])) continue;
    const double d = std::abs(s.eps_ex[r] - bo.scan.energy(r, 1));
    s.deviation = std::max(s.deviation, d);
    if (s.fs.chi[r] >= kSignificantChi * cmax) s.deviation_significant = std::max(s.deviation_significant, d);
  }
  s.hdr50_area = hdr50(s.fs);
  const auto prof = factorized_profile(s.fs, bo.scan);
  s.streamline_deviation = streamline_deviation(s, prof, yeq);
  s.diabatic = diabatic_check(s, bo.scan);
  return s;
}

} // namespace detail

inline FullSolveOptions full_options(const RunConfig &cfg) {
  FullSolveOptions opt;
  opt.levels = cfg.bo_states;
  opt.k = cfg.k;
  opt.tol = cfg.tol;
  opt.seed = cfg.seed;
  opt.max_iter = cfg.max_iter;
  opt.degree = cfg.degree;
  opt.sectors = cfg.sectors;
  opt.threads = cfg.threads;
  return opt;
}

/// Full eigenstates at mass M on the BO stage's grids, factorized; A and B
/// are the two lowest p-like refined states.
inline ExactStage run_exact_stage(const RunConfig &cfg, const BOStage &bo, const ContractedBasis &basis, double M) {
  ModelParams params = cfg.model;
  params.M = M;
  const Grid &eg = bo.scan.electron_grid(), &ng = bo.scan.nuclear_grid();
  FullOperator op(params, eg, ng);
  auto full = solve_full(params, op, basis, full_options(cfg));
  ExactStage ex;
  ex.M = M;
  ex.contracted = std::move(full.contracted);
  std::vector<PLikeClassification> cls;
  for (const auto &st : full.states) {
    auto fs = factorize(st.psi, eg, ng, st.energy);
    cls.push_back(classify_p_like(fs, bo.scan));
    ex.refined.emplace_back(st.energy, cls.back());
  }
  const auto [a, b] = select_ab(cls);
  ex.A = detail::analyse_state("A", std::move(full.states[a]), cls[a], bo, cfg, M);
  ex.B = detail::analyse_state("B", std::move(full.states[b]), cls[b], bo, cfg, M);
  return ex;
}

namespace detail {

inline void write_state_files(OutputDir &out, const ExactStateReport &s, const std::string &suffix) {
  const Grid &g = s.fs.nuclear;
  out.field("chi2_" + s.label + suffix + ".gfld", s.fs.chi_squared());
  out.field("eps_ex_" + s.label + suffix + ".gfld", s.eps_ex);
  std::string pol = "X,Y,chi,px,py,defined\n";
  for (std::size_t r = 0; r < g.size(); ++r) {
    Vec2 p{0.0, 0.0};
    if (s.fs.is_defined(r)) p = polarization_vector(s.fs.phi_at(r), s.fs.electron);
    pol += xy(g, r) + "," + num(s.fs.chi[r]) + "," + num(p[0]) + "," + num(p[1]) +
           fmt::format(",{}\n", s.fs.is_defined(r) ? 1 : 0);
  }
  out.text("pol_ex_" + s.label + suffix + ".csv", pol);
  std::string res = "X,Y,chi,residual_conditional\n";
  for (std::size_t r = 0; r < g.size(); ++r) {
    res += xy(g, r) + "," + num(s.fs.chi[r]) + "," + num(s.res_cond[r]) + "\n";
  }
  out.text("residuals_" + s.label + suffix + ".csv", res);
}

inline nlohmann::json state_json(const ExactStateReport &s) {
  nlohmann::json j;
  j["energy"] = s.fs.energy;
  j["sector"] = s.sector.name();
  j["solver_residual"] = s.residual;
  j["polarization_ratio"] = s.cls.polarization_ratio;
  j["manifold_weight"] = s.cls.manifold_weight;
  j["coherence"] = s.cls.coherence;
  j["chi_eq_upper_relative"] = jnum(s.chi_eq_upper);
  j["chi_eq_lower_relative"] = jnum(s.chi_eq_lower);
  j["connection_max"] = jnum(s.connection_max);
  j["connection_defined_points"] = s.connection_defined;
  for (const auto &L : s.loops) j["loops"][L.name] = L.phase;
  j["residual_conditional_median"] = jnum(s.res_cond_median);
  j["residual_nuclear"] = jnum(s.res_nuc);
  j["current_max_rhs"] = s.current.max_rhs;
  j["deviation_D"] = jnum(s.deviation);
  j["deviation_D_significant"] = jnum(s.deviation_significant);
  j["hdr50_area"] = jnum(s.hdr50_area);
  j["streamline_deviation"] = jnum(s.streamline_deviation);
  j["diabatic"] = {{"axis_max_jump", jnum(s.diabatic.axis_max_jump)},
                   {"offaxis_typical_jump", jnum(s.diabatic.offaxis_typical_jump)},
                   {"ratio", jnum(s.diabatic.ratio)},
                   {"bo_swap", s.diabatic.bo_swap}};
  return j;
}

} // namespace detail

/// Full solve at the configured mass: per-state files for A and B and the
/// headline numbers.
inline CommandResult cmd_full(const RunConfig &cfg, const std::filesystem::path &out_dir,
                              ExactStage *keep = nullptr, BOStage *keep_bo = nullptr) {
  BOStage bo = run_bo_stage(cfg);
  ContractedBasis basis(bo.scan, cfg.bo_states, cfg.threads);
  ExactStage ex = run_exact_stage(cfg, bo, basis, cfg.model.M);
  OutputDir out(out_dir);
  out.field("eps_bo_1.gfld", bo.scan.surface(1));
  out.field("eps_bo_2.gfld", bo.scan.surface(2));
  for (const auto *s : {&ex.A, &ex.B}) detail::write_state_files(out, *s, "");
  std::string spectrum = "energy,verdict,polarization_ratio,manifold_weight,ground_weight,coherence\n";
  for (const auto &[e, c] : ex.refined) {
    spectrum += detail::num(e) + "," + to_string(c.verdict) + "," + detail::num(c.polarization_ratio) + "," +
                detail::num(c.manifold_weight) + "," + detail::num(c.ground_weight) + "," +
                detail::num(c.coherence) + "\n";
  }
  out.text("spectrum.csv", spectrum);
  CommandResult res{"full", {}, {}};
  res.headline["M"] = ex.M;
  res.headline["ci_upper"] = detail::ci_json(bo.ci.upper);
  res.headline["E_A"] = ex.A.fs.energy;
  res.headline["E_B"] = ex.B.fs.energy;
  res.headline["A"] = detail::state_json(ex.A);
  res.headline["B"] = detail::state_json(ex.B);
  res.files = out.files();
  if (keep) *keep = std::move(ex);
  if (keep_bo) *keep_bo = std::move(bo);
  return res;
}

struct MassPoint {
  double M = 0.0;
  double E_A = NAN, E_B = NAN;
  double deviation = NAN;
  double deviation_significant = NAN;
  double hdr50_area = NAN;
  double streamline_deviation = NAN;
};

/// Repeat the exact stage per mass on one BO scan (the scan does not depend
/// on M). Writes per-mass χ_A², Φ_A polarization and |ε^ex_A − ε^BO_1|.
inline CommandResult cmd_mass_sweep(const RunConfig &cfg, const std::filesystem::path &out_dir,
                                    std::vector<MassPoint> *keep = nullptr) {
  BOStage bo = run_bo_stage(cfg);
  ContractedBasis basis(bo.scan, cfg.bo_states, cfg.threads);
  OutputDir out(out_dir);
  std::vector<MassPoint> pts;
  std::string summary = "M,E_A,E_B,D,D_significant,hdr50_area,streamline_deviation\n";
  CommandResult res{"mass-sweep", {}, {}};
  for (double M : cfg.masses) {
    ExactStage ex = run_exact_stage(cfg, bo, basis, M);
    const std::string suffix = "_M" + fmt::format("{:g}", M);
    const Grid &g = bo.scan.nuclear_grid();
    out.field("chi2_A" + suffix + ".gfld", ex.A.fs.chi_squared());
    RealField dev(g);
    for (std::size_t r = 0; r < g.size(); ++r) dev[r] = std::abs(ex.A.eps_ex[r] - bo.scan.energy(r, 1));
    out.field("dev_A" + suffix + ".gfld", dev);
    std::string pol = "X,Y,chi,px,py,defined\n";
    for (std::size_t r = 0; r < g.size(); ++r) {
      Vec2 p{0.0, 0.0};
      if (ex.A.fs.is_defined(r)) p = polarization_vector(ex.A.fs.phi_at(r), ex.A.fs.electron);
      pol += detail::xy(g, r) + "," + detail::num(ex.A.fs.chi[r]) + "," + detail::num(p[0]) + "," +
             detail::num(p[1]) + fmt::format(",{}\n", ex.A.fs.is_defined(r) ? 1 : 0);
    }
    out.text("pol_ex_A" + suffix + ".csv", pol);
    MassPoint mp{M,
                 ex.A.fs.energy,
                 ex.B.fs.energy,
                 ex.A.deviation,
                 ex.A.deviation_significant,
                 ex.A.hdr50_area,
                 ex.A.streamline_deviation};
    summary += detail::num(mp.M) + "," + detail::num(mp.E_A) + "," + detail::num(mp.E_B) + "," +
               detail::num(mp.deviation) + "," + detail::num(mp.deviation_significant) + "," +
               detail::num(mp.hdr50_area) + "," +
               detail::num(mp.streamline_deviation) + "\n";
    res.headline["masses"].push_back({{"M", mp.M},
                                      {"E_A", mp.E_A},
                                      {"E_B", mp.E_B},
                                      {"D", detail::jnum(mp.deviation)},
                                      {"D_significant", detail::jnum(mp.deviation_significant)},
                                      {"hdr50_area", detail::jnum(mp.hdr50_area)},
                                      {"streamline_deviation", detail::jnum(mp.streamline_deviation)}});
    pts.push_back(mp);
  }
  out.text("mass_sweep.csv", summary);
  res.files = out.files();
  if (keep) *keep = std::move(pts);
  return res;
}

/// Dispatch by command name, then write manifest.json and config.ini.
inline CommandResult run_command(const std::string &command, RunConfig cfg, const std::filesystem::path &out_dir) {
  cfg.validate();
  cfg.experiment = command;
  const std::string started = detail::utc_timestamp();
  CommandResult res;
  if (command == "bo-scan") {
    res = cmd_bo_scan(cfg, out_dir);
  } else if (command == "berry") {
    res = cmd_berry(cfg, out_dir);
  } else if (command == "full") {
    res = cmd_full(cfg, out_dir);
  } else if (command == "mass-sweep") {
    res = cmd_mass_sweep(cfg, out_dir);
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  detail::write_atomically(out_dir / "config.ini", echo_config(cfg));
  res.files.push_back("config.ini");
  write_manifest(out_dir, make_manifest(cfg, res, started, detail::utc_timestamp()));
  return res;
}

} // namespace berryfact
