#pragma once

// GFLD text format:
//
//   GFLD 1
//   <ndim> <d1> <d2> ...
//   <spacing per axis>
//   <origin per axis>
//   real | complex
//   one value per line (real and imaginary part for complex)
//
// Numbers are written with 17 significant digits so a write/read cycle is
// lossless. Undefined samples are written as `nan`.

#include "berryfact/grid.hpp"

#include <fmt/format.h>

#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>

namespace berryfact {

class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline std::string format_number(double v) { return fmt::format("{:.17g}", v); }

namespace detail {

inline double parse_double(const std::string &tok) {
  errno = 0;
  char *end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0' || errno == ERANGE) {
    throw FormatError("not a number: '" + tok + "'");
  }
  return v;
}

inline std::vector<std::string> split_ws(const std::string &line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

inline std::string next_line(std::istream &is, const char *what) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError(std::string("GFLD: missing ") + what);
  return line;
}

} // namespace detail

template <typename T>
void write_gfld(std::ostream &os, const ScalarField<T> &f) {
  const Grid &g = f.grid();
  std::string buf = "GFLD 1\n";
  buf += fmt::format("{}", g.ndim());
  for (auto d : g.dims()) buf += fmt::format(" {}", d);
  buf += "\n";
  for (std::size_t a = 0; a < g.ndim(); ++a) buf += (a ? " " : "") + format_number(g.spacing(a));
  buf += "\n";
  for (std::size_t a = 0; a < g.ndim(); ++a) buf += (a ? " " : "") + format_number(g.origin(a));
  buf += "\n";
  buf += is_complex_v<T> ? "complex\n" : "real\n";
  os << buf;
  for (const auto &v : f.values()) {
    if constexpr (is_complex_v<T>) {
      os << format_number(v.real()) << ' ' << format_number(v.imag()) << '\n';
    } else {
      os << format_number(v) << '\n';
    }
  }
}

template <typename T>
void write_gfld(const std::filesystem::path &path, const ScalarField<T> &f) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_gfld(os, f);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

using AnyField = std::variant<RealField, ComplexField>;

inline AnyField read_gfld_any(std::istream &is) {
  using detail::next_line;
  using detail::parse_double;
  using detail::split_ws;
  if (detail::split_ws(next_line(is, "header")) != std::vector<std::string>{"GFLD", "1"}) {
    throw FormatError("GFLD: bad header");
  }
  auto dl = split_ws(next_line(is, "dimensions"));
  if (dl.empty()) throw FormatError("GFLD: empty dimension line");
  const auto nd = static_cast<std::size_t>(std::stoul(dl[0]));
  if (dl.size() != nd + 1) throw FormatError("GFLD: dimension count mismatch");
  std::vector<std::size_t> dims(nd);
  for (std::size_t a = 0; a < nd; ++a) dims[a] = std::stoul(dl[a + 1]);
  auto read_reals = [&](const char *what) {
    auto t = split_ws(next_line(is, what));
    if (t.size() != nd) throw FormatError(std::string("GFLD: wrong count on ") + what + " line");
    std::vector<double> v(nd);
    for (std::size_t a = 0; a < nd; ++a) v[a] = parse_double(t[a]);
    return v;
  };
  auto h = read_reals("spacing");
  auto o = read_reals("origin");
  Grid g(dims, h, o);
  auto kind = split_ws(next_line(is, "value type"));
  if (kind.size() != 1 || (kind[0] != "real" && kind[0] != "complex")) {
    throw FormatError("GFLD: value type must be real or complex");
  }
  const bool cplx = kind[0] == "complex";
  std::string line;
  if (cplx) {
    std::vector<std::complex<double>> v;
    v.reserve(g.size());
    while (v.size() < g.size() && std::getline(is, line)) {
      auto t = split_ws(line);
      if (t.size() != 2) throw FormatError("GFLD: complex line needs two numbers");
      v.emplace_back(parse_double(t[0]), parse_double(t[1]));
    }
    if (v.size() != g.size()) throw FormatError("GFLD: truncated value list");
    if (std::getline(is, line) && !detail::split_ws(line).empty()) {
      throw FormatError("GFLD: trailing data");
    }
    return ComplexField(g, std::move(v));
  }
  std::vector<double> v;
  v.reserve(g.size());
  while (v.size() < g.size() && std::getline(is, line)) {
    auto t = split_ws(line);
    if (t.size() != 1) throw FormatError("GFLD: real line needs one number");
    v.push_back(parse_double(t[0]));
  }
  if (v.size() != g.size()) throw FormatError("GFLD: truncated value list");
  if (std::getline(is, line) && !detail::split_ws(line).empty()) {
    throw FormatError("GFLD: trailing data");
  }
  return RealField(g, std::move(v));
}

template <typename T>
ScalarField<T> read_gfld(std::istream &is) {
  auto any = read_gfld_any(is);
  if (auto *f = std::get_if<ScalarField<T>>(&any)) return std::move(*f);
  throw FormatError("GFLD: value type does not match the requested field type");
}

template <typename T>
ScalarField<T> read_gfld(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_gfld<T>(is);
}

} // namespace berryfact
