#include <gtest/gtest.h>

#include <cmath>

#include <Eigen/Dense>

#include "geomask/field.hpp"
#include "support/oracles.hpp"

using namespace geomask;

namespace {

Eigen::MatrixXd dense_covariance(const SpMat& q) {
  Eigen::MatrixXd d(q);
  return d.llt().solve(Eigen::MatrixXd::Identity(d.rows(), d.cols()));
}

MaternParams params_for(double sd, double range) { return {std::log(sd), std::log(kappa_for_range(range))}; }

}  // namespace

TEST(Matern, BesselAgainstQuadrature) {
  EXPECT_NEAR(matern_cov(1.0, {0.0, 0.0}), 0.601907, 1e-6);
  EXPECT_NEAR(matern_corr(1.0, 1.0), oracle::bessel_k1(1.0), 1e-12);
  for (double x : {0.05, 0.3, 2.0, 5.0, 12.0}) EXPECT_NEAR(matern_corr(x, 1.0), oracle::matern_corr(x, 1.0), 1e-10);
  const MaternParams p{std::log(1.7), std::log(0.4)};
  EXPECT_DOUBLE_EQ(matern_cov(0.0, p), 1.7 * 1.7);
  EXPECT_THROW(matern_cov(1.0, MaternParams{NAN, 0.0}), InputError);
}

TEST(Matern, SymmetricAndDecreasing) {
  const MaternParams p{0.2, -1.0};
  EXPECT_EQ(matern_cov({1, 2}, {4, -3}, p), matern_cov({4, -3}, {1, 2}, p));
  double prev = matern_cov(0.0, p);
  EXPECT_GT(prev, 0.0);
  for (double d = 0.01; d < 40.0; d += 0.01) {
    const double c = matern_cov(d, p);
    EXPECT_LT(c, prev);
    EXPECT_GE(c, 0.0);
    prev = c;
  }
  EXPECT_NEAR(matern_corr(std::sqrt(8.0), 1.0), 0.1397, 1e-4);
}

TEST(Mesh, MinimalMesh) {
  const Mesh m = build_mesh({0, 0, 10, 10}, 10, 0);
  EXPECT_EQ(m.node_count(), 4u);
  EXPECT_EQ(m.triangles().size(), 2u);
  EXPECT_THROW(build_mesh({0, 0, 10, 10}, 11, 0), InputError);
  EXPECT_THROW(build_mesh({0, 0, 10, 10}, 0, 0), InputError);
}

TEST(Mesh, CoversExtendedBoxWithPositiveTriangles) {
  const BoundingBox box{3, -2, 41, 17};
  const Mesh m = build_mesh(box, 4, 6);
  for (std::size_t t = 0; t < m.triangles().size(); ++t) EXPECT_GT(m.triangle_area(t), 0.0);
  EXPECT_LE(m.bbox().xmin, box.xmin - 6);
  EXPECT_GE(m.bbox().xmax, box.xmax + 6);
  EXPECT_LE(m.bbox().ymin, box.ymin - 6);
  EXPECT_GE(m.bbox().ymax, box.ymax + 6);
  const Mesh half = build_mesh(box, 2, 6);
  const double ratio = static_cast<double>(half.node_count()) / static_cast<double>(m.node_count());
  EXPECT_GT(ratio, 3.0);
  EXPECT_LT(ratio, 4.5);
  // Structured location agrees with the brute-force triangle scan.
  const Mesh plain(m.nodes(), m.triangles());
  Rng rng(4);
  for (int k = 0; k < 2000; ++k) {
    const Point p{rng.uniform(box.xmin, box.xmax), rng.uniform(box.ymin, box.ymax)};
    const auto a = m.locate(p);
    ASSERT_TRUE(a.has_value());
    EXPECT_NEAR(field_at(*a, Vec::Ones(static_cast<Eigen::Index>(m.node_count()))), 1.0, 1e-12);
    const auto b = plain.locate(p);
    ASSERT_TRUE(b.has_value());
    Vec w = Vec::Zero(static_cast<Eigen::Index>(m.node_count()));
    for (std::size_t n = 0; n < m.node_count(); ++n) w[static_cast<Eigen::Index>(n)] = m.nodes()[n].x * 3 + 1;
    EXPECT_NEAR(field_at(*a, w), field_at(*b, w), 1e-9);
  }
  EXPECT_FALSE(m.locate({1000, 0}).has_value());
}

TEST(Mesh, TextRoundTrip) {
  const Mesh m = build_mesh({0, 0, 7, 5}, 2, 1);
  const Mesh again = parse_mesh(format_mesh(m));
  EXPECT_EQ(format_mesh(again), format_mesh(m));
  EXPECT_TRUE(again.grid().has_value());
  EXPECT_THROW(parse_mesh("node 0 0\ntri 0 1 2\n"), InputError);
  EXPECT_THROW(parse_mesh("vertex 0 0\n"), InputError);
}

TEST(Fem, SingleRightTriangle) {
  const Mesh m({{0, 0}, {1, 0}, {0, 1}}, {{0, 1, 2}});
  const auto fem = fem_matrices(m);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(fem.c[k], 1.0 / 6.0, 1e-15);
  const Eigen::Matrix3d expect = 0.5 * (Eigen::Matrix3d() << 2, -1, -1, -1, 1, 0, -1, 0, 1).finished();
  EXPECT_LT((Eigen::MatrixXd(fem.g) - expect).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(fem_matrices(Mesh({{0, 0}, {1, 0}, {2, 0}}, {{0, 1, 2}})), InputError);
}

TEST(Fem, NullSpaceAreaAndSymmetry) {
  const Mesh m = build_mesh({0, 0, 30, 20}, 3, 5);
  const auto fem = fem_matrices(m);
  const Vec ones = Vec::Ones(fem.c.size());
  EXPECT_LT((fem.g * ones).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(fem.c.sum(), m.bbox().width() * m.bbox().height(), 1e-9);
  EXPECT_LT((Eigen::MatrixXd(fem.g) - Eigen::MatrixXd(SpMat(fem.g.transpose()))).cwiseAbs().maxCoeff(), 1e-15);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(fem.g)};
  EXPECT_GT(es.eigenvalues().minCoeff(), -1e-10);
  EXPECT_GT(fem.c.minCoeff(), 0.0);
}

TEST(Precision, SparsityPatternAndRowCount) {
  const Mesh m = build_mesh({0, 0, 40, 40}, 4, 8);
  SpdeOperator op(fem_matrices(m));
  SpMat a = op.assemble(params_for(1.0, 10));
  SpMat b = op.assemble(params_for(3.0, 50));
  ASSERT_EQ(a.nonZeros(), b.nonZeros());
  for (Eigen::Index k = 0; k <= a.outerSize(); ++k) EXPECT_EQ(a.outerIndexPtr()[k], b.outerIndexPtr()[k]);
  for (Eigen::Index k = 0; k < a.nonZeros(); ++k) EXPECT_EQ(a.innerIndexPtr()[k], b.innerIndexPtr()[k]);
  for (Eigen::Index k = 0; k < a.outerSize(); ++k) EXPECT_LE(a.outerIndexPtr()[k + 1] - a.outerIndexPtr()[k], 19);
  EXPECT_LT((Eigen::MatrixXd(a) - Eigen::MatrixXd(SpMat(a.transpose()))).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NO_THROW(precision(fem_matrices(m), params_for(2.0, 15)));
}

TEST(Precision, FineMeshMatchesMatern) {
  const double range = 30.0, sd = 1.5;
  const Mesh m = build_mesh({0, 0, 30, 30}, 5, 60);
  const auto prec = precision(fem_matrices(m), params_for(sd, range));
  const auto cov = dense_covariance(prec.q);
  const auto& g = *m.grid();
  const auto centre = static_cast<Eigen::Index>(g.node(g.nx / 2, g.ny / 2));
  const auto away = static_cast<Eigen::Index>(g.node(g.nx / 2 + 6, g.ny / 2));
  ASSERT_NEAR(distance(m.nodes()[centre], m.nodes()[away]), range, 1e-9);
  EXPECT_NEAR(cov(centre, centre), sd * sd, 0.1 * sd * sd);
  const double corr = cov(centre, away) / std::sqrt(cov(centre, centre) * cov(away, away));
  EXPECT_NEAR(corr, 0.13, 0.03);
}

TEST(Precision, SmallMeshCorrelationsMatchMatern) {
  const double range = 10.0;
  const double h = 0.3 * range;
  const Mesh m = build_mesh({0, 0, 6 * h, 6 * h}, h, 0);
  ASSERT_LE(m.node_count(), 60u);
  const auto prec = precision(fem_matrices(m), params_for(1.0, range));
  const auto cov = dense_covariance(prec.q);
  const auto& g = *m.grid();
  std::vector<Eigen::Index> interior;
  for (std::size_t j = 2; j + 2 <= g.ny; ++j)
    for (std::size_t i = 2; i + 2 <= g.nx; ++i) interior.push_back(static_cast<Eigen::Index>(g.node(i, j)));
  int pairs = 0;
  for (auto a : interior)
    for (auto b : interior) {
      const double d = distance(m.nodes()[a], m.nodes()[b]);
      if (d < 0.3 * range - 1e-9 || d > 1.5 * range) continue;
      const double corr = cov(a, b) / std::sqrt(cov(a, a) * cov(b, b));
      const double expect = matern_corr(d, kappa_for_range(range));
      EXPECT_LT(std::abs(corr - expect) / expect, 0.15) << d;
      ++pairs;
    }
  EXPECT_GT(pairs, 0);
}

TEST(Projector, NodesCentroidsAndLinearExactness) {
  const Mesh m = build_mesh({0, 0, 20, 20}, 5, 0);
  const auto node = project(m, {m.nodes()[7]});
  EXPECT_EQ(node.a.nonZeros(), 1);
  EXPECT_DOUBLE_EQ(node.a.coeff(0, 7), 1.0);

  const auto& tri = m.triangles()[5];
  const Point c{(m.nodes()[tri[0]].x + m.nodes()[tri[1]].x + m.nodes()[tri[2]].x) / 3,
                (m.nodes()[tri[0]].y + m.nodes()[tri[1]].y + m.nodes()[tri[2]].y) / 3};
  const auto cen = project(m, {c});
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(cen.a.coeff(0, tri[k]), 1.0 / 3.0, 1e-12);

  Vec w(static_cast<Eigen::Index>(m.node_count()));
  for (std::size_t n = 0; n < m.node_count(); ++n)
    w[static_cast<Eigen::Index>(n)] = 2 * m.nodes()[n].x - m.nodes()[n].y;
  Rng rng(12);
  std::vector<Point> pts;
  for (int k = 0; k < 100; ++k) pts.push_back({rng.uniform(0, 20), rng.uniform(0, 20)});
  const auto proj = project(m, pts);
  const Vec f = proj.apply(w);
  for (int k = 0; k < 100; ++k) {
    EXPECT_NEAR(f[k], 2 * pts[static_cast<std::size_t>(k)].x - pts[static_cast<std::size_t>(k)].y, 1e-12);
    double row = 0.0;
    for (SpMatRow::InnerIterator it(proj.a, k); it; ++it) {
      EXPECT_GE(it.value(), 0.0);
      row += it.value();
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
  EXPECT_THROW(project(m, {{25, 5}}), InputError);
}

TEST(SampleField, MomentsAndDeterminism) {
  const Mesh m = build_mesh({0, 0, 12, 12}, 3, 3);
  const auto prec = precision(fem_matrices(m), params_for(1.2, 8));
  const auto cov = dense_covariance(prec.q);
  const Eigen::Index mm = prec.q.rows();
  const auto& g = *m.grid();
  const std::array<Eigen::Index, 3> sub{static_cast<Eigen::Index>(g.node(3, 3)),
                                        static_cast<Eigen::Index>(g.node(4, 3)),
                                        static_cast<Eigen::Index>(g.node(3, 4))};
  SparseFactor f;
  ASSERT_TRUE(f.factorize(prec.q));
  Rng rng(77);
  Vec mean = Vec::Zero(mm);
  Eigen::Matrix3d second = Eigen::Matrix3d::Zero();
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const Vec w = f.sample(rng);
    if (k < 10000) mean += w;
    Eigen::Vector3d s(w[sub[0]], w[sub[1]], w[sub[2]]);
    second += s * s.transpose();
  }
  mean /= 10000.0;
  for (Eigen::Index k = 0; k < mm; ++k) EXPECT_LT(std::abs(mean[k]), 4.0 * std::sqrt(cov(k, k)) / 100.0);
  second /= n;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) EXPECT_NEAR(second(a, b), cov(sub[a], sub[b]), 0.05 * std::abs(cov(sub[a], sub[b])));
  EXPECT_EQ(sample_field(prec, 5), sample_field(prec, 5));
  EXPECT_NE(sample_field(prec, 5), sample_field(prec, 6));
}
