#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "frame.hpp"
#include "geo.hpp"
#include "raster.hpp"
#include "rng.hpp"

// Synthetic desk-scale inputs: an 80 x 80 km country of four areas with
// Gaussian-bump population and a lights-like covariate.
namespace geomask::desk {

inline constexpr double kSide = 80.0;

inline Geography geography() {
  const Point sw{0, 0}, se{kSide, 0}, ne{kSide, kSide}, nw{0, kSide};
  const Point s{45, 0}, e{kSide, 35}, n{38, kSide}, w{0, 42}, c{42, 38};
  return Geography({AdminArea(1, "South-West", {sw, s, c, w}), AdminArea(2, "South-East", {s, se, e, c}),
                    AdminArea(3, "North-East", {c, e, ne, n}), AdminArea(4, "North-West", {w, c, n, nw})});
}

struct Town {
  Point centre;
  double peak;
  double sd;
};

// Two towns per area, placed and sized from the seed.
inline std::vector<Town> towns(const Geography& geo, std::uint64_t seed) {
  std::vector<Town> out;
  for (const auto& a : geo.areas()) {
    Rng rng(stream_seed(seed, static_cast<std::uint64_t>(a.id())));
    const auto& b = a.bbox();
    for (int k = 0; k < 2; ++k) {
      Point p;
      do {
        p = {rng.uniform(b.xmin + 4, b.xmax - 4), rng.uniform(b.ymin + 4, b.ymax - 4)};
      } while (geo.locate(p) != a.id());
      out.push_back({p, rng.uniform(1500.0, 5000.0), rng.uniform(1.5, 4.0)});
    }
  }
  return out;
}

inline GridSpec grid(double cell = 1.0) {
  const auto n = static_cast<std::size_t>(std::llround(kSide / cell));
  return {{0.0, 0.0}, cell, n, n};
}

// People per square km: rural background plus towns.
inline Raster density(const Geography& geo, std::uint64_t seed, double cell = 1.0) {
  const GridSpec g = grid(cell);
  const auto ts = towns(geo, seed);
  std::vector<double> v(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) {
    const Point p = g.cell_center(k);
    double d = 20.0 + 10.0 * std::sin(p.x / 9.0) * std::cos(p.y / 13.0);
    for (const auto& t : ts) {
      const double r = distance(p, t.centre) / t.sd;
      d += t.peak * std::exp(-0.5 * r * r);
    }
    v[k] = d;
  }
  return Raster(g, std::move(v));
}

// Square root of a saturating lights index in [0, 63].
inline Raster covariate(const Raster& density) {
  std::vector<double> v(density.values.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = std::sqrt(63.0 * (1.0 - std::exp(-density.values[k] / 800.0)));
  return Raster(density.grid, std::move(v));
}

inline std::map<BlockKey, std::size_t> ea_counts(std::size_t urban = 150, std::size_t rural = 350) {
  std::map<BlockKey, std::size_t> m;
  for (int a = 1; a <= 4; ++a) {
    m[{a, Stratum::urban}] = urban;
    m[{a, Stratum::rural}] = rural;
  }
  return m;
}

inline std::map<BlockKey, std::size_t> cluster_counts(std::size_t urban = 5, std::size_t rural = 10) {
  return ea_counts(urban, rural);
}

}  // namespace geomask::desk
