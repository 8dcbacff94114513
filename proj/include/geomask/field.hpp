#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "error.hpp"
#include "geo.hpp"
#include "gmrf.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace geomask {

// Matern hyperparameters phi = [log lambda, log kappa] with smoothness fixed
// at nu = 1.
struct MaternParams {
  static constexpr double nu = 1.0;

  double log_sd = 0.0;     // phi_1 = log lambda
  double log_kappa = 0.0;  // phi_2 = log kappa

  double sd() const { return std::exp(log_sd); }
  double variance() const { return std::exp(2.0 * log_sd); }
  double kappa() const { return std::exp(log_kappa); }
  double range() const { return std::sqrt(8.0) / kappa(); }

  void validate() const {
    if (!std::isfinite(log_sd) || !std::isfinite(log_kappa))
      throw InputError("Matern parameters must be finite (log_sd=" + io::fmt(log_sd) +
                       ", log_kappa=" + io::fmt(log_kappa) + ")");
  }

  friend bool operator==(const MaternParams&, const MaternParams&) = default;
};

// Practical range sqrt(8)/kappa for nu = 1.
inline double practical_range(double kappa) { return std::sqrt(8.0) / kappa; }
inline double kappa_for_range(double range) { return std::sqrt(8.0) / range; }

// Matern (nu = 1) correlation (kappa d) K_1(kappa d); 1 at d = 0.
inline double matern_corr(double d, double kappa) {
  const double x = kappa * d;
  if (x <= 0.0) return 1.0;
  if (x > 700.0) return 0.0;
  return x * std::cyl_bessel_k(1.0, x);
}

inline double matern_cov(double d, const MaternParams& params) {
  params.validate();
  return params.variance() * matern_corr(d, params.kappa());
}

inline double matern_cov(const Point& a, const Point& b, const MaternParams& params) {
  return matern_cov(distance(a, b), params);
}

// Regular lattice metadata for meshes built by build_mesh; enables O(1)
// point location.
struct StructuredGrid {
  Point origin;
  double spacing = 1.0;
  std::size_t nx = 0;  // intervals along x
  std::size_t ny = 0;  // intervals along y

  std::size_t node(std::size_t i, std::size_t j) const { return j * (nx + 1) + i; }
};

// Barycentric location of a point in a mesh triangle.
struct MeshLocation {
  std::array<int, 3> nodes{};
  std::array<double, 3> weights{};
};

class Mesh {
public:
  Mesh() = default;
  Mesh(std::vector<Point> nodes, std::vector<std::array<int, 3>> triangles, double extension = 0.0,
       std::optional<StructuredGrid> grid = std::nullopt)
      : nodes_(std::move(nodes)), triangles_(std::move(triangles)), extension_(extension), grid_(grid) {
    for (const auto& t : triangles_)
      for (int v : t)
        if (v < 0 || static_cast<std::size_t>(v) >= nodes_.size())
          throw InputError("mesh triangle references missing node " + std::to_string(v));
    for (const auto& p : nodes_) bbox_.expand(p);
  }

  const std::vector<Point>& nodes() const { return nodes_; }
  const std::vector<std::array<int, 3>>& triangles() const { return triangles_; }
  std::size_t node_count() const { return nodes_.size(); }
  double extension() const { return extension_; }
  const std::optional<StructuredGrid>& grid() const { return grid_; }
  const BoundingBox& bbox() const { return bbox_; }

  double triangle_area(std::size_t t) const {
    const auto& tri = triangles_[t];
    return 0.5 * detail::cross(nodes_[tri[0]], nodes_[tri[1]], nodes_[tri[2]]);
  }

  // Containing triangle and barycentric weights, or nullopt outside the mesh.
  std::optional<MeshLocation> locate(const Point& p) const {
    if (grid_) return locate_structured(p);
    for (std::size_t t = 0; t < triangles_.size(); ++t)
      if (auto loc = barycentric(t, p)) return loc;
    return std::nullopt;
  }

private:
  std::optional<MeshLocation> barycentric(std::size_t t, const Point& p) const {
    const auto& tri = triangles_[t];
    const Point& a = nodes_[tri[0]];
    const Point& b = nodes_[tri[1]];
    const Point& c = nodes_[tri[2]];
    const double det = detail::cross(a, b, c);
    const double l1 = detail::cross(p, b, c) / det;
    const double l2 = detail::cross(a, p, c) / det;
    const double l3 = 1.0 - l1 - l2;
    constexpr double tol = -1e-12;
    if (l1 < tol || l2 < tol || l3 < tol) return std::nullopt;
    return MeshLocation{tri, {l1, l2, l3}};
  }

  std::optional<MeshLocation> locate_structured(const Point& p) const {
    const auto& g = *grid_;
    const double fx = (p.x - g.origin.x) / g.spacing;
    const double fy = (p.y - g.origin.y) / g.spacing;
    constexpr double tol = 1e-9;
    const auto nx = static_cast<double>(g.nx);
    const auto ny = static_cast<double>(g.ny);
    if (!(fx >= -tol && fy >= -tol && fx <= nx + tol && fy <= ny + tol)) return std::nullopt;
    const double cx = std::clamp(fx, 0.0, nx);
    const double cy = std::clamp(fy, 0.0, ny);
    auto i = std::min(static_cast<std::size_t>(cx), g.nx - 1);
    auto j = std::min(static_cast<std::size_t>(cy), g.ny - 1);
    const double u = cx - static_cast<double>(i);
    const double v = cy - static_cast<double>(j);
    const auto n00 = static_cast<int>(g.node(i, j));
    const auto n10 = static_cast<int>(g.node(i + 1, j));
    const auto n01 = static_cast<int>(g.node(i, j + 1));
    const auto n11 = static_cast<int>(g.node(i + 1, j + 1));
    if (u >= v) return MeshLocation{{n00, n10, n11}, {1.0 - u, u - v, v}};
    return MeshLocation{{n00, n11, n01}, {1.0 - v, u, v - u}};
  }

  std::vector<Point> nodes_;
  std::vector<std::array<int, 3>> triangles_;
  double extension_ = 0.0;
  std::optional<StructuredGrid> grid_;
  BoundingBox bbox_;
};

// Structured triangulation: a square lattice of the given spacing covering
// the box enlarged by `extension` on every side, each square split along its
// south-west/north-east diagonal. The lattice is centred on the extended box.
inline Mesh build_mesh(const BoundingBox& box, double spacing, double extension) {
  if (!(spacing > 0.0)) throw InputError("mesh spacing must be positive");
  if (!(extension >= 0.0)) throw InputError("mesh extension must be non-negative");
  const double w = box.width() + 2.0 * extension;
  const double h = box.height() + 2.0 * extension;
  if (!(w > 0.0 && h > 0.0)) throw InputError("mesh bounding box is empty");
  if (spacing > w * (1.0 + 1e-12) || spacing > h * (1.0 + 1e-12))
    throw InputError("mesh spacing " + io::fmt(spacing) + " exceeds the extended bounding box");
  const auto nx = static_cast<std::size_t>(std::ceil(w / spacing - 1e-9));
  const auto ny = static_cast<std::size_t>(std::ceil(h / spacing - 1e-9));
  StructuredGrid g;
  g.spacing = spacing;
  g.nx = nx;
  g.ny = ny;
  g.origin = {box.xmin - extension - 0.5 * (static_cast<double>(nx) * spacing - w),
              box.ymin - extension - 0.5 * (static_cast<double>(ny) * spacing - h)};
  std::vector<Point> nodes;
  nodes.reserve((nx + 1) * (ny + 1));
  for (std::size_t j = 0; j <= ny; ++j)
    for (std::size_t i = 0; i <= nx; ++i)
      nodes.push_back({g.origin.x + static_cast<double>(i) * spacing, g.origin.y + static_cast<double>(j) * spacing});
  std::vector<std::array<int, 3>> tris;
  tris.reserve(2 * nx * ny);
  for (std::size_t j = 0; j < ny; ++j) {
    for (std::size_t i = 0; i < nx; ++i) {
      const auto n00 = static_cast<int>(g.node(i, j));
      const auto n10 = static_cast<int>(g.node(i + 1, j));
      const auto n01 = static_cast<int>(g.node(i, j + 1));
      const auto n11 = static_cast<int>(g.node(i + 1, j + 1));
      tris.push_back({n00, n10, n11});
      tris.push_back({n00, n11, n01});
    }
  }
  return Mesh(std::move(nodes), std::move(tris), extension, g);
}

// Lumped mass matrix (diagonal) and stiffness matrix of piecewise-linear
// elements.
struct FemMatrices {
  Vec c;  // diagonal of C~
  SpMat g;
};

inline FemMatrices fem_matrices(const Mesh& mesh) {
  const auto m = static_cast<Eigen::Index>(mesh.node_count());
  if (m == 0 || mesh.triangles().empty()) throw InputError("fem: empty mesh");
  FemMatrices fem;
  fem.c = Vec::Zero(m);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(mesh.triangles().size() * 9);
  const double scale = std::max(mesh.bbox().width(), mesh.bbox().height());
  for (std::size_t t = 0; t < mesh.triangles().size(); ++t) {
    const auto& tri = mesh.triangles()[t];
    const double signed_area = mesh.triangle_area(t);
    const double area = std::abs(signed_area);
    if (!(area > 1e-14 * scale * scale)) throw InputError("fem: degenerate triangle " + std::to_string(t));
    std::array<std::array<double, 2>, 3> grad{};
    for (int a = 0; a < 3; ++a) {
      const Point& p = mesh.nodes()[tri[(a + 1) % 3]];
      const Point& q = mesh.nodes()[tri[(a + 2) % 3]];
      // gradient of the hat function of vertex a: rotated opposite edge / (2 * signed area)
      grad[a] = {(p.y - q.y) / (2.0 * signed_area), (q.x - p.x) / (2.0 * signed_area)};
    }
    for (int a = 0; a < 3; ++a) {
      fem.c[tri[a]] += area / 3.0;
      for (int b = 0; b < 3; ++b)
        trips.emplace_back(tri[a], tri[b], area * (grad[a][0] * grad[b][0] + grad[a][1] * grad[b][1]));
    }
  }
  fem.g.resize(m, m);
  fem.g.setFromTriplets(trips.begin(), trips.end());
  return fem;
}

// Q(phi) = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G), tau^2 = 1/(4 pi kappa^2 lambda^2).
// The three component matrices share one sparsity pattern so assembling
// Q for new parameters only rescales stored values.
class SpdeOperator {
public:
  SpdeOperator() = default;
  explicit SpdeOperator(const FemMatrices& fem) {
    const auto m = fem.c.size();
    SpMat cmat(m, m);
    cmat.reserve(Eigen::VectorXi::Constant(m, 1));
    for (Eigen::Index k = 0; k < m; ++k) {
      if (!(fem.c[k] > 0.0)) throw InputError("fem: non-positive lumped mass at node " + std::to_string(k));
      cmat.insert(k, k) = fem.c[k];
    }
    cmat.makeCompressed();
    Vec cinv = fem.c.cwiseInverse();
    SpMat gcg = (fem.g * cinv.asDiagonal() * fem.g).pruned(0.0, 0.0);
    SpMat pattern = cmat + fem.g + gcg;
    pattern.makeCompressed();
    SpMat zero = 0.0 * pattern;
    c_ = zero + cmat;
    g_ = zero + fem.g;
    k_ = zero + gcg;
    c_.makeCompressed();
    g_.makeCompressed();
    k_.makeCompressed();
    if (c_.nonZeros() != pattern.nonZeros() || g_.nonZeros() != pattern.nonZeros() ||
        k_.nonZeros() != pattern.nonZeros())
      throw NumericalError("spde: component patterns do not align");
    q_ = pattern;
  }

  Eigen::Index size() const { return q_.rows(); }

  static double tau2(const MaternParams& p) {
    const double k2 = std::exp(2.0 * p.log_kappa);
    return 1.0 / (4.0 * std::numbers::pi * k2 * p.variance());
  }

  // Q with the fixed operator pattern.
  const SpMat& assemble(const MaternParams& p) {
    p.validate();
    const double k2 = std::exp(2.0 * p.log_kappa);
    const double t2 = tau2(p);
    const double a = t2 * k2 * k2;
    const double b = t2 * 2.0 * k2;
    const double* cv = c_.valuePtr();
    const double* gv = g_.valuePtr();
    const double* kv = k_.valuePtr();
    double* qv = q_.valuePtr();
    for (Eigen::Index k = 0; k < q_.nonZeros(); ++k) qv[k] = a * cv[k] + b * gv[k] + t2 * kv[k];
    return q_;
  }

  SpMat assemble(const MaternParams& p) const {
    SpdeOperator copy = *this;
    return copy.assemble(p);
  }

  const SpMat& pattern() const { return q_; }

private:
  SpMat c_, g_, k_, q_;
};

struct Precision {
  SpMat q;
  MaternParams params;
};

// Builds Q(phi) and checks positive definiteness.
inline Precision precision(const FemMatrices& fem, const MaternParams& params) {
  SpdeOperator op(fem);
  Precision out{op.assemble(params), params};
  SparseFactor f;
  if (!f.factorize(out.q))
    throw NumericalError("precision: Cholesky failed for log_sd=" + io::fmt(params.log_sd) +
                         ", log_kappa=" + io::fmt(params.log_kappa));
  return out;
}

// Sparse map from mesh weights to field values at points: row p holds the
// barycentric coordinates of point p.
struct Projector {
  SpMatRow a;

  Vec apply(const Vec& w) const { return a * w; }
};

inline MeshLocation locate_or_throw(const Mesh& mesh, const Point& p) {
  auto loc = mesh.locate(p);
  if (!loc) throw InputError("point (" + io::fmt(p.x) + ", " + io::fmt(p.y) + ") lies outside the mesh");
  return *loc;
}

inline Projector project(const Mesh& mesh, const std::vector<Point>& points) {
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(points.size() * 3);
  for (std::size_t r = 0; r < points.size(); ++r) {
    const auto loc = locate_or_throw(mesh, points[r]);
    for (int k = 0; k < 3; ++k)
      if (loc.weights[k] != 0.0) trips.emplace_back(static_cast<int>(r), loc.nodes[k], loc.weights[k]);
  }
  Projector p;
  p.a.resize(static_cast<Eigen::Index>(points.size()), static_cast<Eigen::Index>(mesh.node_count()));
  p.a.setFromTriplets(trips.begin(), trips.end());
  return p;
}

inline double field_at(const MeshLocation& loc, const Vec& w) {
  return loc.weights[0] * w[loc.nodes[0]] + loc.weights[1] * w[loc.nodes[1]] + loc.weights[2] * w[loc.nodes[2]];
}

// w = L^-T z with Q = L L^T (up to the fill-reducing permutation).
inline Vec sample_field(const Precision& prec, Rng& rng) {
  SparseFactor f;
  if (!f.factorize(prec.q))
    throw NumericalError("sample_field: Cholesky failed for log_sd=" + io::fmt(prec.params.log_sd) +
                         ", log_kappa=" + io::fmt(prec.params.log_kappa));
  return f.sample(rng);
}

inline Vec sample_field(const Precision& prec, std::uint64_t seed) {
  Rng rng(seed);
  return sample_field(prec, rng);
}

inline std::string format_mesh(const Mesh& mesh) {
  std::ostringstream out;
  out << "extension " << io::fmt(mesh.extension()) << '\n';
  if (const auto& g = mesh.grid())
    out << "grid " << io::fmt(g->origin.x) << ' ' << io::fmt(g->origin.y) << ' ' << io::fmt(g->spacing) << ' '
        << g->nx << ' ' << g->ny << '\n';
  for (const auto& p : mesh.nodes()) out << "node " << io::fmt(p.x) << ' ' << io::fmt(p.y) << '\n';
  for (const auto& t : mesh.triangles()) out << "tri " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
  return out.str();
}

inline Mesh parse_mesh(const std::string& text) {
  std::vector<Point> nodes;
  std::vector<std::array<int, 3>> tris;
  double extension = 0.0;
  std::optional<StructuredGrid> grid;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto tok = io::split_ws(line);
    if (tok.empty() || tok[0][0] == '#') continue;
    const std::string where = "mesh line " + std::to_string(lineno);
    if (tok[0] == "node" && tok.size() == 3) {
      nodes.push_back({io::parse_double(tok[1], where), io::parse_double(tok[2], where)});
    } else if (tok[0] == "tri" && tok.size() == 4) {
      tris.push_back({static_cast<int>(io::parse_int(tok[1], where)), static_cast<int>(io::parse_int(tok[2], where)),
                      static_cast<int>(io::parse_int(tok[3], where))});
    } else if (tok[0] == "extension" && tok.size() == 2) {
      extension = io::parse_double(tok[1], where);
    } else if (tok[0] == "grid" && tok.size() == 6) {
      StructuredGrid g;
      g.origin = {io::parse_double(tok[1], where), io::parse_double(tok[2], where)};
      g.spacing = io::parse_double(tok[3], where);
      g.nx = static_cast<std::size_t>(io::parse_int(tok[4], where));
      g.ny = static_cast<std::size_t>(io::parse_int(tok[5], where));
      grid = g;
    } else {
      throw InputError(where + ": unrecognized record '" + io::trim(line) + "'");
    }
  }
  if (grid && nodes.size() != (grid->nx + 1) * (grid->ny + 1))
    throw InputError("mesh grid metadata does not match node count");
  return Mesh(std::move(nodes), std::move(tris), extension, grid);
}

// Coordinate-list dump of a sparse matrix (upper and lower entries).
inline std::string format_sparse(const SpMat& q) {
  std::ostringstream out;
  out << "# rows " << q.rows() << " cols " << q.cols() << " nnz " << q.nonZeros() << '\n';
  for (Eigen::Index k = 0; k < q.outerSize(); ++k)
    for (SpMat::InnerIterator it(q, k); it; ++it)
      out << it.row() << ' ' << it.col() << ' ' << io::fmt(it.value()) << '\n';
  return out.str();
}

}  // namespace geomask
