#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "frame.hpp"
#include "geo.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace geomask {

// DHS-style displacement: urban clusters up to 2 km; rural up to 5 km, with
// 1% of them up to 10 km.
struct JitterScheme {
  double urban_radius = 2.0;
  std::vector<double> rural_radii{5.0, 10.0};
  std::vector<double> rural_probs{0.99, 0.01};
  bool restrict_to_area = true;

  void validate() const {
    if (!(urban_radius > 0.0)) throw InputError("jitter: urban radius must be positive");
    if (rural_radii.empty() || rural_radii.size() != rural_probs.size())
      throw InputError("jitter: rural radii and probabilities must pair up");
    double total = 0.0;
    for (std::size_t k = 0; k < rural_radii.size(); ++k) {
      if (!(rural_radii[k] > 0.0)) throw InputError("jitter: rural radii must be positive");
      if (!(rural_probs[k] >= 0.0)) throw InputError("jitter: rural probabilities must be non-negative");
      total += rural_probs[k];
    }
    if (std::abs(total - 1.0) > 1e-12) throw InputError("jitter: rural probabilities must sum to 1");
  }

  // (radius, probability) branches for a stratum.
  std::vector<std::pair<double, double>> branches(Stratum s) const {
    if (s == Stratum::urban) return {{urban_radius, 1.0}};
    std::vector<std::pair<double, double>> out;
    for (std::size_t k = 0; k < rural_radii.size(); ++k) out.emplace_back(rural_radii[k], rural_probs[k]);
    return out;
  }

  double max_radius(Stratum s) const {
    double r = 0.0;
    for (auto [radius, prob] : branches(s))
      if (prob > 0.0) r = std::max(r, radius);
    return r;
  }

  std::vector<double> all_radii() const {
    std::vector<double> r{urban_radius};
    for (double x : rural_radii)
      if (std::find(r.begin(), r.end(), x) == r.end()) r.push_back(x);
    std::sort(r.begin(), r.end());
    return r;
  }
};

// Picks the displacement radius for one cluster.
inline double draw_radius(Stratum s, const JitterScheme& scheme, Rng& rng) {
  if (s == Stratum::urban) return scheme.urban_radius;
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t k = 0; k < scheme.rural_radii.size(); ++k) {
    cum += scheme.rural_probs[k];
    if (u < cum) return scheme.rural_radii[k];
  }
  return scheme.rural_radii.back();
}

// One draw of the unrestricted polar displacement law: angle uniform on
// (0, 2pi), radius uniform on (0, R).
inline Point displace_once(const Point& s, double radius, Rng& rng) {
  const double theta = 2.0 * std::numbers::pi * rng.uniform();
  const double r = radius * rng.uniform();
  return {s.x + r * std::cos(theta), s.y + r * std::sin(theta)};
}

inline constexpr int kMaxJitterAttempts = 100000;

// Displaces s with a fixed radius, redrawing until the point stays inside
// `area` when `restrict_to_area` is set.
inline Point displace(const Point& s, double radius, const AdminArea& area, bool restrict_to_area, Rng& rng) {
  for (int attempt = 0; attempt < kMaxJitterAttempts; ++attempt) {
    const Point p = displace_once(s, radius, rng);
    if (!restrict_to_area || area.contains(p)) return p;
  }
  throw NumericalError("jitter: no displaced point inside area " + std::to_string(area.id()) + " after " +
                       std::to_string(kMaxJitterAttempts) + " attempts");
}

inline Point jitter(const Point& s, Stratum stratum, const JitterScheme& scheme, const AdminArea& area, Rng& rng) {
  const double radius = draw_radius(stratum, scheme, rng);
  return displace(s, radius, area, scheme.restrict_to_area, rng);
}

inline Point jitter(const Point& s, Stratum stratum, const JitterScheme& scheme, const AdminArea& area,
                    std::uint64_t seed) {
  Rng rng(seed);
  return jitter(s, stratum, scheme, area, rng);
}

enum class LocationKind { exact, jittered, masked };

inline const char* to_string(LocationKind k) {
  switch (k) {
    case LocationKind::exact: return "exact";
    case LocationKind::jittered: return "jittered";
    case LocationKind::masked: return "masked";
  }
  return "?";
}

inline LocationKind parse_location_kind(std::string_view s) {
  if (s == "exact") return LocationKind::exact;
  if (s == "jittered") return LocationKind::jittered;
  if (s == "masked") return LocationKind::masked;
  throw InputError("unknown location kind '" + std::string(s) + "'");
}

// Reported location u_ijk.
struct LocationRecord {
  std::size_t cluster_id = 0;
  LocationKind kind = LocationKind::exact;
  std::optional<Point> point;  // absent for masked records
  BlockKey block;
};

inline LocationRecord mask(std::size_t cluster_id, const Point& s, Stratum stratum, const Geography& geo) {
  auto area = geo.locate(s);
  if (!area)
    throw InputError("mask: point (" + io::fmt(s.x) + ", " + io::fmt(s.y) + ") lies outside every area");
  return {cluster_id, LocationKind::masked, std::nullopt, {*area, stratum}};
}

// Prior probabilities over candidate EAs for one cluster.
struct CandidatePrior {
  std::vector<std::size_t> ea_ids;
  std::vector<double> probs;

  std::size_t size() const { return ea_ids.size(); }
};

// Normalizing constants C_{ije,R} = 1 / Pr(unrestricted displacement stays
// inside D_i), keyed by (EA id, radius).
class NormalizingTable {
public:
  struct Entry {
    double constant = 1.0;
    std::size_t draws = 0;
  };

  void set(std::size_t ea_id, double radius, Entry e) { entries_[{ea_id, radius}] = e; }

  std::optional<double> find(std::size_t ea_id, double radius) const {
    auto it = entries_.find({ea_id, radius});
    if (it == entries_.end()) return std::nullopt;
    return it->second.constant;
  }

  double at(std::size_t ea_id, double radius) const {
    auto c = find(ea_id, radius);
    if (!c)
      throw InputError("normalizing table has no entry for EA " + std::to_string(ea_id) + " at radius " +
                       io::fmt(radius));
    return *c;
  }

  std::size_t size() const { return entries_.size(); }
  const std::map<std::pair<std::size_t, double>, Entry>& entries() const { return entries_; }

private:
  std::map<std::pair<std::size_t, double>, Entry> entries_;
};

inline double normalizer(const Point& location, double radius, const AdminArea& area, std::size_t draws, Rng& rng) {
  if (draws < 1) throw InputError("normalizer: draws must be >= 1");
  std::size_t hits = 0;
  for (std::size_t k = 0; k < draws; ++k)
    if (area.contains(displace_once(location, radius, rng))) ++hits;
  if (hits == 0)
    throw NumericalError("normalizer: no displacement of (" + io::fmt(location.x) + ", " + io::fmt(location.y) +
                         ") with radius " + io::fmt(radius) + " stayed inside area " + std::to_string(area.id()));
  if (hits == draws) return 1.0;
  return static_cast<double>(draws) / static_cast<double>(hits);
}

inline double normalizer(const EnumerationArea& ea, double radius, const AdminArea& area, std::size_t draws,
                         std::uint64_t seed) {
  Rng rng(seed);
  return normalizer(ea.location, radius, area, draws, rng);
}

// Constants for every EA at the radii its stratum can use. Each (EA, radius)
// pair draws from its own RNG stream, so the table does not depend on
// evaluation order.
inline NormalizingTable build_normalizing_table(const Masterframe& frame, const Geography& geo,
                                                const JitterScheme& scheme, std::size_t draws, std::uint64_t seed) {
  NormalizingTable table;
  for (const auto& ea : frame.eas()) {
    const auto& area = geo.area(ea.area);
    for (auto [radius, prob] : scheme.branches(ea.stratum)) {
      if (prob <= 0.0) continue;
      Rng rng(stream_seed(seed, ea.id, static_cast<std::uint64_t>(std::llround(radius * 1000.0))));
      table.set(ea.id, radius, {normalizer(ea.location, radius, area, draws, rng), draws});
    }
  }
  return table;
}

inline std::string format_normalizing_table(const NormalizingTable& t) {
  std::ostringstream out;
  out << "ea_id,radius_km,constant,draws\n";
  for (const auto& [key, e] : t.entries())
    out << key.first << ',' << io::fmt(key.second) << ',' << io::fmt(e.constant) << ',' << e.draws << '\n';
  return out.str();
}

inline NormalizingTable parse_normalizing_table(const std::string& text) {
  auto csv = io::parse_csv(text);
  const auto ce = csv.column("ea_id"), cr = csv.column("radius_km"), cc = csv.column("constant"),
             cd = csv.column("draws");
  NormalizingTable t;
  for (const auto& r : csv.rows)
    t.set(static_cast<std::size_t>(io::parse_int(r[ce], "ea_id")), io::parse_double(r[cr], "radius_km"),
          {io::parse_double(r[cc], "constant"), static_cast<std::size_t>(io::parse_int(r[cd], "draws"))});
  return t;
}

// p(s = E_ije | u) = d_ije over the block.
inline CandidatePrior masking_prior(const BlockKey& block, const Masterframe& frame) {
  auto ids = frame.block(block);
  if (ids.empty()) throw InputError("masking prior: empty block " + to_string(block));
  CandidatePrior prior;
  double total = 0.0;
  for (auto id : ids) total += frame.ea(id).weight;
  if (!(total > 0.0)) throw InputError("masking prior: block " + to_string(block) + " has zero total weight");
  for (auto id : ids) {
    const double p = frame.ea(id).weight / total;
    if (p > 0.0) {
      prior.ea_ids.push_back(id);
      prior.probs.push_back(p);
    }
  }
  return prior;
}

// Candidate prior given a displaced report u: d_ije times the displacement
// density [2 pi R d]^-1 C_{ije,R} 1{0 < d < R}, mixed over the stratum's
// radius branches. Without area restriction every C is 1 and `table` may be
// null. A candidate at distance 0 dominates every finite-density candidate.
inline CandidatePrior displacement_prior(const Point& u, const BlockKey& block, const Masterframe& frame,
                                         const JitterScheme& scheme, const NormalizingTable* table) {
  if (!std::isfinite(u.x) || !std::isfinite(u.y)) throw InputError("displacement prior: non-finite report");
  auto ids = frame.block(block);
  if (ids.empty()) throw InputError("displacement prior: empty block " + to_string(block));
  if (scheme.restrict_to_area && table == nullptr)
    throw InputError("displacement prior: area-restricted scheme needs a normalizing table");
  const auto branches = scheme.branches(block.stratum);

  CandidatePrior prior;
  std::vector<double> w;
  std::vector<std::size_t> coincident;
  for (auto id : ids) {
    const auto& ea = frame.ea(id);
    const double d = distance(u, ea.location);
    if (d == 0.0) {
      if (ea.weight > 0.0) coincident.push_back(id);
      continue;
    }
    double dens = 0.0;
    for (auto [radius, prob] : branches) {
      if (prob <= 0.0 || !(d < radius)) continue;
      const double c = scheme.restrict_to_area ? table->at(id, radius) : 1.0;
      dens += prob * c / (2.0 * std::numbers::pi * radius * d);
    }
    const double weight = ea.weight * dens;
    if (weight > 0.0) {
      prior.ea_ids.push_back(id);
      w.push_back(weight);
    }
  }
  if (!coincident.empty()) {
    prior.ea_ids.clear();
    w.clear();
    for (auto id : coincident) {
      prior.ea_ids.push_back(id);
      w.push_back(frame.ea(id).weight);
    }
  }
  if (prior.ea_ids.empty())
    throw InputError("displacement prior: no candidate EA of block " + to_string(block) + " within " +
                     io::fmt(scheme.max_radius(block.stratum)) + " km of (" + io::fmt(u.x) + ", " + io::fmt(u.y) + ")");
  double total = 0.0;
  for (double x : w) total += x;
  prior.probs.reserve(w.size());
  for (double x : w) prior.probs.push_back(x / total);
  return prior;
}

inline std::string format_location_records(const std::vector<LocationRecord>& records) {
  std::ostringstream out;
  out << "cluster_id,kind,x,y,area_id,stratum\n";
  for (const auto& r : records) {
    out << r.cluster_id << ',' << to_string(r.kind) << ',';
    if (r.point) out << io::fmt(r.point->x) << ',' << io::fmt(r.point->y);
    else out << ',';
    out << ',' << r.block.area << ',' << to_string(r.block.stratum) << '\n';
  }
  return out.str();
}

inline std::vector<LocationRecord> parse_location_records(const std::string& text) {
  auto csv = io::parse_csv(text);
  const auto ci = csv.column("cluster_id"), ck = csv.column("kind"), cx = csv.column("x"), cy = csv.column("y"),
             ca = csv.column("area_id"), cs = csv.column("stratum");
  std::vector<LocationRecord> out;
  for (const auto& r : csv.rows) {
    LocationRecord rec;
    rec.cluster_id = static_cast<std::size_t>(io::parse_int(r[ci], "cluster_id"));
    rec.kind = parse_location_kind(r[ck]);
    if (rec.kind == LocationKind::masked) {
      if (!io::trim(r[cx]).empty() || !io::trim(r[cy]).empty())
        throw InputError("masked record " + std::to_string(rec.cluster_id) + " must not carry coordinates");
    } else {
      rec.point = Point{io::parse_double(r[cx], "x"), io::parse_double(r[cy], "y")};
    }
    rec.block = {static_cast<int>(io::parse_int(r[ca], "area_id")), parse_stratum(r[cs])};
    out.push_back(rec);
  }
  return out;
}

}  // namespace geomask
