#pragma once

#include <cctype>
#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "geo.hpp"
#include "io.hpp"

namespace geomask {

// Regular grid geometry. Row 0 is the northern-most row (ASCII-grid order);
// `origin` is the lower-left corner of the grid.
struct GridSpec {
  Point origin;
  double cell_size = 1.0;
  std::size_t nrows = 0;
  std::size_t ncols = 0;

  std::size_t size() const { return nrows * ncols; }

  Point cell_center(std::size_t row, std::size_t col) const {
    return {origin.x + (static_cast<double>(col) + 0.5) * cell_size,
            origin.y + (static_cast<double>(nrows - row) - 0.5) * cell_size};
  }
  Point cell_center(std::size_t flat) const { return cell_center(flat / ncols, flat % ncols); }

  // Flat index of the cell holding p; the east and north edges belong to the
  // last column/row.
  std::optional<std::size_t> cell_of(const Point& p) const {
    const double fx = (p.x - origin.x) / cell_size;
    const double fy = (p.y - origin.y) / cell_size;
    if (!(fx >= 0.0 && fy >= 0.0 && fx <= static_cast<double>(ncols) && fy <= static_cast<double>(nrows)))
      return std::nullopt;
    auto col = static_cast<std::size_t>(fx);
    auto row_from_bottom = static_cast<std::size_t>(fy);
    if (col == ncols) --col;
    if (row_from_bottom == nrows) --row_from_bottom;
    return (nrows - 1 - row_from_bottom) * ncols + col;
  }

  BoundingBox bbox() const {
    BoundingBox b;
    b.expand(origin);
    b.expand(Point{origin.x + cell_size * static_cast<double>(ncols),
                   origin.y + cell_size * static_cast<double>(nrows)});
    return b;
  }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

// Gridded surface (population density or spatial covariate). Missing cells
// are NaN.
struct Raster {
  GridSpec grid;
  std::vector<double> values;

  Raster() = default;
  Raster(GridSpec g, std::vector<double> v) : grid(g), values(std::move(v)) {
    if (grid.nrows == 0 || grid.ncols == 0) throw InputError("raster dimensions must be positive");
    if (!(grid.cell_size > 0.0)) throw InputError("raster cell size must be positive");
    if (values.size() != grid.size()) throw InputError("raster value count does not match dimensions");
  }

  double at(std::size_t row, std::size_t col) const { return values[row * grid.ncols + col]; }

  // Value of the cell containing p, or nullopt outside the grid / at nodata.
  std::optional<double> sample(const Point& p) const {
    auto cell = grid.cell_of(p);
    if (!cell) return std::nullopt;
    const double v = values[*cell];
    if (std::isnan(v)) return std::nullopt;
    return v;
  }

  double sample_or_throw(const Point& p, const char* what = "raster") const {
    auto v = sample(p);
    if (!v)
      throw InputError(std::string(what) + " value missing at (" + io::fmt(p.x) + ", " + io::fmt(p.y) + ")");
    return *v;
  }
};

inline Raster parse_ascii_grid(const std::string& text) {
  std::istringstream in(text);
  GridSpec g;
  double nodata = -9999.0;
  bool have[5] = {false, false, false, false, false};
  std::string key;
  // Header keys are case-insensitive and may appear in any order.
  for (int k = 0; k < 6; ++k) {
    const auto pos = in.tellg();
    if (!(in >> key)) throw InputError("ASCII grid: truncated header");
    std::string lower;
    for (char c : key) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::string val;
    if (lower == "ncols" || lower == "nrows" || lower == "xllcorner" || lower == "yllcorner" ||
        lower == "cellsize" || lower == "nodata" || lower == "nodata_value") {
      in >> val;
      if (lower == "ncols") { g.ncols = static_cast<std::size_t>(io::parse_int(val, "ncols")); have[0] = true; }
      else if (lower == "nrows") { g.nrows = static_cast<std::size_t>(io::parse_int(val, "nrows")); have[1] = true; }
      else if (lower == "xllcorner") { g.origin.x = io::parse_double(val, "xllcorner"); have[2] = true; }
      else if (lower == "yllcorner") { g.origin.y = io::parse_double(val, "yllcorner"); have[3] = true; }
      else if (lower == "cellsize") { g.cell_size = io::parse_double(val, "cellsize"); have[4] = true; }
      else nodata = io::parse_double(val, "nodata");
    } else {
      in.seekg(pos);
      break;
    }
  }
  for (bool h : have)
    if (!h) throw InputError("ASCII grid: header requires ncols, nrows, xllcorner, yllcorner, cellsize");
  std::vector<double> values;
  values.reserve(g.nrows * g.ncols);
  std::string tok;
  while (in >> tok) {
    const double v = io::parse_double(tok, "grid value");
    values.push_back(v == nodata ? std::nan("") : v);
  }
  if (values.size() != g.nrows * g.ncols)
    throw InputError("ASCII grid: expected " + std::to_string(g.nrows * g.ncols) + " values, found " +
                     std::to_string(values.size()));
  for (double v : values)
    if (std::isinf(v)) throw InputError("ASCII grid: non-finite value");
  return Raster(g, std::move(values));
}

inline Raster read_ascii_grid(const std::string& path) { return parse_ascii_grid(io::read_file(path)); }

inline std::string format_ascii_grid(const Raster& r, double nodata = -9999.0) {
  std::ostringstream out;
  out << "ncols " << r.grid.ncols << '\n'
      << "nrows " << r.grid.nrows << '\n'
      << "xllcorner " << io::fmt(r.grid.origin.x) << '\n'
      << "yllcorner " << io::fmt(r.grid.origin.y) << '\n'
      << "cellsize " << io::fmt(r.grid.cell_size) << '\n'
      << "nodata " << io::fmt(nodata) << '\n';
  for (std::size_t row = 0; row < r.grid.nrows; ++row) {
    for (std::size_t col = 0; col < r.grid.ncols; ++col) {
      const double v = r.at(row, col);
      if (col) out << ' ';
      out << io::fmt(std::isnan(v) ? nodata : v);
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace geomask
