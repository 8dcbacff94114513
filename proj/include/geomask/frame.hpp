#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "geo.hpp"
#include "io.hpp"
#include "raster.hpp"
#include "rng.hpp"

namespace geomask {

enum class Stratum : std::uint8_t { urban = 0, rural = 1 };

inline const char* to_string(Stratum s) { return s == Stratum::urban ? "urban" : "rural"; }

inline Stratum parse_stratum(std::string_view s) {
  if (s == "urban" || s == "U" || s == "u") return Stratum::urban;
  if (s == "rural" || s == "R" || s == "r") return Stratum::rural;
  throw InputError("unknown stratum '" + std::string(s) + "'");
}

// Sampling block (area i, stratum j).
struct BlockKey {
  int area = 0;
  Stratum stratum = Stratum::urban;

  friend auto operator<=>(const BlockKey&, const BlockKey&) = default;
};

inline std::string to_string(const BlockKey& b) {
  return std::to_string(b.area) + "/" + to_string(b.stratum);
}

struct EnumerationArea {
  std::size_t id = 0;
  Point location;
  int area = 0;
  Stratum stratum = Stratum::urban;
  double population = 0.0;  // N_ije
  double weight = 0.0;      // d_ije, sums to 1 within a block
};

class Masterframe {
public:
  Masterframe() = default;

  // EA ids must equal their position in `eas`.
  explicit Masterframe(std::vector<EnumerationArea> eas) : eas_(std::move(eas)) {
    for (std::size_t k = 0; k < eas_.size(); ++k) {
      if (eas_[k].id != k) throw InputError("masterframe EA ids must be 0..n-1 in order");
      blocks_[{eas_[k].area, eas_[k].stratum}].push_back(k);
    }
  }

  const std::vector<EnumerationArea>& eas() const { return eas_; }
  const EnumerationArea& ea(std::size_t id) const { return eas_.at(id); }
  std::size_t size() const { return eas_.size(); }
  bool empty() const { return eas_.empty(); }

  // EA ids of block E_ij (empty span when the block has no EAs).
  std::span<const std::size_t> block(const BlockKey& key) const {
    auto it = blocks_.find(key);
    if (it == blocks_.end()) return {};
    return it->second;
  }
  std::size_t block_size(const BlockKey& key) const { return block(key).size(); }
  const std::map<BlockKey, std::vector<std::size_t>>& blocks() const { return blocks_; }

  // Arithmetic mean of the block's EA coordinates.
  Point block_centroid(const BlockKey& key) const {
    auto ids = block(key);
    if (ids.empty()) throw InputError("empty block " + to_string(key));
    Point c;
    for (auto id : ids) {
      c.x += eas_[id].location.x;
      c.y += eas_[id].location.y;
    }
    c.x /= static_cast<double>(ids.size());
    c.y /= static_cast<double>(ids.size());
    return c;
  }

  std::vector<EnumerationArea>& mutable_eas() { return eas_; }

private:
  std::vector<EnumerationArea> eas_;
  std::map<BlockKey, std::vector<std::size_t>> blocks_;
};

struct Stratification {
  std::vector<std::optional<Stratum>> labels;  // per raster cell; nullopt outside all areas
  std::vector<int> cell_area;                  // per raster cell; -1 outside
  std::map<int, double> threshold;             // urban iff density >= threshold (and > 0)
  std::map<int, double> urban_share;           // achieved population-weighted share
  std::vector<std::string> warnings;
};

// Labels cells urban/rural within each area by thresholding density. The
// threshold is the largest density value whose "at least this dense" cell set
// carries a population share >= target, i.e. the smallest achievable share.
inline Stratification stratify(const Raster& density, const Geography& geo, double target) {
  if (!(target > 0.0 && target < 1.0)) throw InputError("urban fraction must lie in (0, 1)");
  const std::size_t ncell = density.grid.size();
  Stratification out;
  out.labels.assign(ncell, std::nullopt);
  out.cell_area.assign(ncell, -1);
  std::map<int, std::vector<std::size_t>> cells_by_area;
  for (std::size_t c = 0; c < ncell; ++c) {
    const double v = density.values[c];
    if (!std::isnan(v) && v < 0.0) throw InputError("density raster has negative values");
    if (auto a = geo.locate(density.grid.cell_center(c))) {
      out.cell_area[c] = *a;
      cells_by_area[*a].push_back(c);
    }
  }
  auto dens = [&](std::size_t c) {
    const double v = density.values[c];
    return std::isnan(v) ? 0.0 : v;
  };
  for (const auto& area : geo.areas()) {
    auto& cells = cells_by_area[area.id()];
    double total = 0.0;
    for (auto c : cells) total += dens(c);
    if (!(total > 0.0)) {
      for (auto c : cells) out.labels[c] = Stratum::rural;
      out.threshold[area.id()] = std::numeric_limits<double>::infinity();
      out.urban_share[area.id()] = 0.0;
      out.warnings.push_back("area " + std::to_string(area.id()) + ": zero population, all cells rural");
      continue;
    }
    std::vector<std::size_t> order = cells;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return dens(a) > dens(b); });
    double cum = 0.0;
    double thr = dens(order.front());
    for (std::size_t k = 0; k < order.size();) {
      const double v = dens(order[k]);
      if (v <= 0.0) break;
      while (k < order.size() && dens(order[k]) == v) cum += dens(order[k++]);
      thr = v;
      if (cum / total >= target) break;
    }
    double share = 0.0;
    for (auto c : cells) {
      const bool urban = dens(c) > 0.0 && dens(c) >= thr;
      out.labels[c] = urban ? Stratum::urban : Stratum::rural;
      if (urban) share += dens(c);
    }
    out.threshold[area.id()] = thr;
    out.urban_share[area.id()] = share / total;
  }
  return out;
}

// Draws EA locations per block: a cell of the block's stratum is chosen with
// probability proportional to density, then a point uniformly within the cell
// (restricted to the block's area). N_ije is the host cell's density; weights
// start uniform.
inline Masterframe generate_frame(const Raster& density, const Stratification& strata, const Geography& geo,
                                  const std::map<BlockKey, std::size_t>& counts, std::uint64_t seed) {
  const std::size_t ncell = density.grid.size();
  if (strata.labels.size() != ncell) throw InputError("stratification does not match density raster");
  std::vector<EnumerationArea> eas;
  for (const auto& [key, count] : counts) {
    if (count == 0) continue;
    geo.area(key.area);
    std::vector<std::size_t> cells;
    std::vector<double> cum;
    double total = 0.0;
    for (std::size_t c = 0; c < ncell; ++c) {
      const double v = density.values[c];
      if (strata.cell_area[c] != key.area || strata.labels[c] != key.stratum || std::isnan(v) || v <= 0.0) continue;
      total += v;
      cells.push_back(c);
      cum.push_back(total);
    }
    if (cells.empty())
      throw InputError("block " + to_string(key) + " has no populated cells but " + std::to_string(count) +
                       " EAs were requested");
    Rng rng(stream_seed(seed, static_cast<std::uint64_t>(key.area), static_cast<std::uint64_t>(key.stratum)));
    const double h = density.grid.cell_size;
    for (std::size_t k = 0; k < count; ++k) {
      const double u = rng.uniform() * total;
      auto pos = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
      pos = std::min(pos, cells.size() - 1);
      const std::size_t cell = cells[pos];
      const Point center = density.grid.cell_center(cell);
      Point p = center;
      bool placed = false;
      for (int attempt = 0; attempt < 1000; ++attempt) {
        const Point q{center.x + (rng.uniform() - 0.5) * h, center.y + (rng.uniform() - 0.5) * h};
        if (geo.locate(q) == key.area) {
          p = q;
          placed = true;
          break;
        }
      }
      if (!placed && geo.locate(center) != key.area)
        throw NumericalError("cannot place EA inside area " + std::to_string(key.area));
      EnumerationArea ea;
      ea.id = eas.size();
      ea.location = p;
      ea.area = key.area;
      ea.stratum = key.stratum;
      ea.population = density.values[cell];
      eas.push_back(ea);
    }
  }
  Masterframe frame(std::move(eas));
  for (const auto& [key, ids] : frame.blocks())
    for (auto id : ids) frame.mutable_eas()[id].weight = 1.0 / static_cast<double>(ids.size());
  return frame;
}

enum class Selection { uniform, pps };

inline Selection parse_selection(std::string_view s) {
  if (s == "uniform") return Selection::uniform;
  if (s == "pps") return Selection::pps;
  throw InputError("unknown selection '" + std::string(s) + "' (expected uniform|pps)");
}

// Sets the candidate prior weights d_ije: 1/m_ij (uniform) or N_ije / sum N (pps).
inline Masterframe set_weights(Masterframe frame, Selection mode) {
  for (const auto& [key, ids] : frame.blocks()) {
    if (mode == Selection::uniform) {
      for (auto id : ids) frame.mutable_eas()[id].weight = 1.0 / static_cast<double>(ids.size());
    } else {
      double total = 0.0;
      for (auto id : ids) total += frame.ea(id).population;
      if (!(total > 0.0)) throw InputError("pps weights: block " + to_string(key) + " has zero population");
      for (auto id : ids) frame.mutable_eas()[id].weight = frame.ea(id).population / total;
    }
  }
  return frame;
}

struct SampleDesign {
  std::map<BlockKey, std::size_t> clusters;
  int trials = 25;
  Selection selection = Selection::uniform;
};

struct SampledCluster {
  std::size_t cluster_id = 0;
  std::size_t ea_id = 0;
  Point location;  // true location s_ijk
  BlockKey block;
};

// Stratified sample without replacement; pps draws sequentially in proportion
// to the remaining EA weights.
inline std::vector<SampledCluster> draw_clusters(const Masterframe& frame, const SampleDesign& design,
                                                 std::uint64_t seed) {
  std::vector<SampledCluster> out;
  for (const auto& [key, count] : design.clusters) {
    if (count == 0) continue;
    auto ids = frame.block(key);
    if (count > ids.size())
      throw InputError("design requests " + std::to_string(count) + " clusters from block " + to_string(key) +
                       " of size " + std::to_string(ids.size()));
    Rng rng(stream_seed(seed, 1000003ULL + static_cast<std::uint64_t>(key.area),
                        static_cast<std::uint64_t>(key.stratum)));
    std::vector<std::size_t> pool(ids.begin(), ids.end());
    std::vector<std::size_t> chosen;
    if (design.selection == Selection::uniform) {
      for (std::size_t k = 0; k < count; ++k) {
        const std::size_t j = k + rng.index(pool.size() - k);
        std::swap(pool[k], pool[j]);
        chosen.push_back(pool[k]);
      }
    } else {
      std::vector<double> w;
      for (auto id : pool) w.push_back(frame.ea(id).weight);
      for (std::size_t k = 0; k < count; ++k) {
        double total = std::accumulate(w.begin(), w.end(), 0.0);
        if (!(total > 0.0)) throw InputError("pps design exhausted positive weights in block " + to_string(key));
        double u = rng.uniform() * total;
        std::size_t j = 0;
        for (; j + 1 < w.size(); ++j) {
          if (u < w[j]) break;
          u -= w[j];
        }
        chosen.push_back(pool[j]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
        w.erase(w.begin() + static_cast<std::ptrdiff_t>(j));
      }
    }
    for (auto id : chosen) {
      SampledCluster c;
      c.cluster_id = out.size();
      c.ea_id = id;
      c.location = frame.ea(id).location;
      c.block = key;
      out.push_back(c);
    }
  }
  return out;
}

inline std::string format_masterframe(const Masterframe& frame) {
  std::ostringstream out;
  out << "ea_id,area_id,stratum,x,y,population,weight\n";
  for (const auto& ea : frame.eas())
    out << ea.id << ',' << ea.area << ',' << to_string(ea.stratum) << ',' << io::fmt(ea.location.x) << ','
        << io::fmt(ea.location.y) << ',' << io::fmt(ea.population) << ',' << io::fmt(ea.weight) << '\n';
  return out.str();
}

inline Masterframe parse_masterframe(const std::string& text) {
  auto t = io::parse_csv(text);
  const auto ci = t.column("ea_id"), ca = t.column("area_id"), cs = t.column("stratum"), cx = t.column("x"),
             cy = t.column("y"), cp = t.column("population"), cw = t.column("weight");
  std::vector<EnumerationArea> eas;
  for (const auto& r : t.rows) {
    EnumerationArea ea;
    ea.id = static_cast<std::size_t>(io::parse_int(r[ci], "ea_id"));
    ea.area = static_cast<int>(io::parse_int(r[ca], "area_id"));
    ea.stratum = parse_stratum(r[cs]);
    ea.location = {io::parse_double(r[cx], "x"), io::parse_double(r[cy], "y")};
    ea.population = io::parse_double(r[cp], "population");
    ea.weight = io::parse_double(r[cw], "weight");
    eas.push_back(ea);
  }
  return Masterframe(std::move(eas));
}

inline std::string format_clusters(const std::vector<SampledCluster>& clusters) {
  std::ostringstream out;
  out << "cluster_id,ea_id,area_id,stratum,x,y\n";
  for (const auto& c : clusters)
    out << c.cluster_id << ',' << c.ea_id << ',' << c.block.area << ',' << to_string(c.block.stratum) << ','
        << io::fmt(c.location.x) << ',' << io::fmt(c.location.y) << '\n';
  return out.str();
}

inline std::vector<SampledCluster> parse_clusters(const std::string& text) {
  auto t = io::parse_csv(text);
  const auto ci = t.column("cluster_id"), ce = t.column("ea_id"), ca = t.column("area_id"),
             cs = t.column("stratum"), cx = t.column("x"), cy = t.column("y");
  std::vector<SampledCluster> out;
  for (const auto& r : t.rows) {
    SampledCluster c;
    c.cluster_id = static_cast<std::size_t>(io::parse_int(r[ci], "cluster_id"));
    c.ea_id = static_cast<std::size_t>(io::parse_int(r[ce], "ea_id"));
    c.block = {static_cast<int>(io::parse_int(r[ca], "area_id")), parse_stratum(r[cs])};
    c.location = {io::parse_double(r[cx], "x"), io::parse_double(r[cy], "y")};
    out.push_back(c);
  }
  return out;
}

}  // namespace geomask
