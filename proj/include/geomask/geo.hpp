#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace geomask {

// Planar point in kilometre coordinates (easting, northing).
struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct BoundingBox {
  double xmin = std::numeric_limits<double>::infinity();
  double ymin = std::numeric_limits<double>::infinity();
  double xmax = -std::numeric_limits<double>::infinity();
  double ymax = -std::numeric_limits<double>::infinity();

  void expand(const Point& p) {
    xmin = std::min(xmin, p.x);
    ymin = std::min(ymin, p.y);
    xmax = std::max(xmax, p.x);
    ymax = std::max(ymax, p.y);
  }
  void expand(const BoundingBox& b) {
    xmin = std::min(xmin, b.xmin);
    ymin = std::min(ymin, b.ymin);
    xmax = std::max(xmax, b.xmax);
    ymax = std::max(ymax, b.ymax);
  }
  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  bool contains(const Point& p) const {
    return p.x >= xmin && p.x <= xmax && p.y >= ymin && p.y <= ymax;
  }
};

namespace detail {

inline double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline bool on_segment(const Point& p, const Point& a, const Point& b) {
  const double len = distance(a, b);
  const double scale = std::max({1.0, std::abs(a.x), std::abs(a.y), std::abs(b.x), std::abs(b.y)});
  if (std::abs(cross(a, b, p)) > 1e-12 * scale * std::max(len, 1e-300)) return false;
  const double tol = 1e-12 * scale;
  return p.x >= std::min(a.x, b.x) - tol && p.x <= std::max(a.x, b.x) + tol &&
         p.y >= std::min(a.y, b.y) - tol && p.y <= std::max(a.y, b.y) + tol;
}

inline bool segments_cross(const Point& a, const Point& b, const Point& c, const Point& d) {
  const double d1 = cross(c, d, a);
  const double d2 = cross(c, d, b);
  const double d3 = cross(a, b, c);
  const double d4 = cross(a, b, d);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)))
    return true;
  return on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b);
}

}  // namespace detail

// Administrative area D_i bounded by a simple polygon. The vertex list is
// stored open (the closing vertex is implicit).
class AdminArea {
public:
  AdminArea(int id, std::string name, std::vector<Point> boundary)
      : id_(id), name_(std::move(name)), boundary_(std::move(boundary)) {
    if (boundary_.size() > 1 && boundary_.front() == boundary_.back()) boundary_.pop_back();
    validate();
    for (const auto& p : boundary_) bbox_.expand(p);
  }

  int id() const { return id_; }
  const std::string& name() const { return name_; }
  const std::vector<Point>& boundary() const { return boundary_; }
  const BoundingBox& bbox() const { return bbox_; }

  double signed_area() const {
    double a = 0.0;
    const std::size_t n = boundary_.size();
    for (std::size_t k = 0; k < n; ++k) {
      const auto& p = boundary_[k];
      const auto& q = boundary_[(k + 1) % n];
      a += p.x * q.y - q.x * p.y;
    }
    return 0.5 * a;
  }
  double area() const { return std::abs(signed_area()); }

  bool on_boundary(const Point& p) const {
    const std::size_t n = boundary_.size();
    for (std::size_t k = 0; k < n; ++k)
      if (detail::on_segment(p, boundary_[k], boundary_[(k + 1) % n])) return true;
    return false;
  }

  // True when p is inside or on the boundary (crossing-number test).
  bool contains(const Point& p) const {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) return false;
    if (!bbox_.contains(p)) return false;
    if (on_boundary(p)) return true;
    bool inside = false;
    const std::size_t n = boundary_.size();
    for (std::size_t k = 0, j = n - 1; k < n; j = k++) {
      const auto& a = boundary_[k];
      const auto& b = boundary_[j];
      if ((a.y > p.y) != (b.y > p.y)) {
        const double xint = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
        if (p.x < xint) inside = !inside;
      }
    }
    return inside;
  }

  Point vertex_centroid() const {
    Point c;
    for (const auto& p : boundary_) {
      c.x += p.x;
      c.y += p.y;
    }
    c.x /= static_cast<double>(boundary_.size());
    c.y /= static_cast<double>(boundary_.size());
    return c;
  }

private:
  void validate() const {
    const std::string tag = "area " + std::to_string(id_) + ": ";
    if (boundary_.size() < 3) throw InputError(tag + "polygon needs at least 3 vertices");
    for (const auto& p : boundary_)
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw InputError(tag + "non-finite vertex");
    if (!(area() > 0.0)) throw InputError(tag + "degenerate polygon (zero area)");
    const std::size_t n = boundary_.size();
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) {
        const bool adjacent = (b == a + 1) || (a == 0 && b == n - 1);
        if (adjacent) continue;
        if (detail::segments_cross(boundary_[a], boundary_[(a + 1) % n], boundary_[b],
                                   boundary_[(b + 1) % n]))
          throw InputError(tag + "polygon is self-intersecting");
      }
    }
  }

  int id_;
  std::string name_;
  std::vector<Point> boundary_;
  BoundingBox bbox_;
};

// Collection of non-overlapping administrative areas, kept sorted by id.
class Geography {
public:
  Geography() = default;
  explicit Geography(std::vector<AdminArea> areas) : areas_(std::move(areas)) {
    std::sort(areas_.begin(), areas_.end(),
              [](const AdminArea& a, const AdminArea& b) { return a.id() < b.id(); });
    for (std::size_t k = 1; k < areas_.size(); ++k)
      if (areas_[k].id() == areas_[k - 1].id())
        throw InputError("duplicate area id " + std::to_string(areas_[k].id()));
    for (const auto& a : areas_) bbox_.expand(a.bbox());
  }

  const std::vector<AdminArea>& areas() const { return areas_; }
  const BoundingBox& bbox() const { return bbox_; }
  bool empty() const { return areas_.empty(); }

  const AdminArea& area(int id) const {
    auto it = std::lower_bound(areas_.begin(), areas_.end(), id,
                               [](const AdminArea& a, int v) { return a.id() < v; });
    if (it == areas_.end() || it->id() != id)
      throw InputError("unknown area id " + std::to_string(id));
    return *it;
  }

  // Containing area; points on a shared boundary resolve to the lowest id.
  std::optional<int> locate(const Point& p) const {
    for (const auto& a : areas_)
      if (a.contains(p)) return a.id();
    return std::nullopt;
  }

  // Number of uniformly sampled bounding-box points claimed by more than one
  // area. Zero for a valid partition (boundary hits have probability zero).
  std::size_t overlap_count(std::size_t samples, std::uint64_t seed) const {
    Rng rng(seed);
    std::size_t bad = 0;
    for (std::size_t s = 0; s < samples; ++s) {
      const Point p{rng.uniform(bbox_.xmin, bbox_.xmax), rng.uniform(bbox_.ymin, bbox_.ymax)};
      int hits = 0;
      for (const auto& a : areas_) hits += a.contains(p) ? 1 : 0;
      if (hits > 1) ++bad;
    }
    return bad;
  }

private:
  std::vector<AdminArea> areas_;
  BoundingBox bbox_;
};

inline std::optional<int> locate(const Geography& geo, const Point& p) { return geo.locate(p); }

// Text format: "area <id> <name>" followed by one "x y" line per vertex;
// areas separated by blank lines; '#' starts a comment.
inline Geography parse_geography(const std::string& text) {
  std::vector<AdminArea> areas;
  std::optional<int> id;
  std::string name;
  std::vector<Point> verts;
  auto flush = [&]() {
    if (id) areas.emplace_back(*id, name, verts);
    id.reset();
    name.clear();
    verts.clear();
  };
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = io::trim(line);
    if (t.empty()) {
      flush();
      continue;
    }
    auto tok = io::split_ws(t);
    const std::string where = "geography line " + std::to_string(lineno);
    if (tok[0] == "area") {
      flush();
      if (tok.size() < 2) throw InputError(where + ": expected 'area <id> <name>'");
      id = static_cast<int>(io::parse_int(tok[1], where + " area id"));
      const auto pos = t.find(tok[1]) + tok[1].size();
      name = io::trim(t.substr(pos));
    } else {
      if (!id) throw InputError(where + ": vertex before any 'area' header");
      if (tok.size() != 2) throw InputError(where + ": expected 'x y'");
      verts.push_back({io::parse_double(tok[0], where + " x"), io::parse_double(tok[1], where + " y")});
    }
  }
  flush();
  if (areas.empty()) throw InputError("geography contains no areas");
  return Geography(std::move(areas));
}

inline Geography read_geography(const std::string& path) { return parse_geography(io::read_file(path)); }

inline std::string format_geography(const Geography& geo) {
  std::ostringstream out;
  bool first = true;
  for (const auto& a : geo.areas()) {
    if (!first) out << '\n';
    first = false;
    out << "area " << a.id() << ' ' << a.name() << '\n';
    for (const auto& p : a.boundary()) out << io::fmt(p.x) << ' ' << io::fmt(p.y) << '\n';
  }
  return out.str();
}

}  // namespace geomask
