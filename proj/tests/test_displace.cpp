#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "geomask/displace.hpp"
#include "support/oracles.hpp"

using namespace geomask;

namespace {

const double kPi = std::numbers::pi;

AdminArea big_square() { return AdminArea(1, "big", {{-100, -100}, {100, -100}, {100, 100}, {-100, 100}}); }

Masterframe frame_at(const std::vector<Point>& points, Stratum s, std::vector<double> weights = {}) {
  std::vector<EnumerationArea> eas;
  for (std::size_t k = 0; k < points.size(); ++k) {
    EnumerationArea ea;
    ea.id = k;
    ea.area = 1;
    ea.stratum = s;
    ea.location = points[k];
    ea.population = 1.0;
    ea.weight = weights.empty() ? 1.0 / static_cast<double>(points.size()) : weights[k];
    eas.push_back(ea);
  }
  return Masterframe(std::move(eas));
}

JitterScheme unrestricted() {
  JitterScheme s;
  s.restrict_to_area = false;
  return s;
}

}  // namespace

TEST(Displacement, RadiusIsUniformAndAngleIsIsotropic) {
  for (double R : {2.0, 5.0, 10.0}) {
    Rng rng(stream_seed(17, static_cast<std::uint64_t>(R)));
    std::vector<double> radii;
    double cx = 0.0, cy = 0.0;
    const int n = 100000;
    for (int k = 0; k < n; ++k) {
      const Point p = displace_once({3, -4}, R, rng);
      const double d = distance(p, {3, -4});
      radii.push_back(d);
      cx += (p.x - 3) / d;
      cy += (p.y + 4) / d;
    }
    EXPECT_GT(oracle::ks_pvalue(radii, [R](double r) { return std::clamp(r / R, 0.0, 1.0); }), 0.01) << R;
    EXPECT_LT(std::hypot(cx, cy) / n, 0.01) << R;
  }
}

TEST(Displacement, RuralLongRadiusShare) {
  const JitterScheme scheme;
  Rng rng(23);
  const int n = 100000;
  int longer = 0;
  for (int k = 0; k < n; ++k) longer += draw_radius(Stratum::rural, scheme, rng) == 10.0;
  EXPECT_NEAR(static_cast<double>(longer) / n, 0.01, 0.001);
  EXPECT_EQ(draw_radius(Stratum::urban, scheme, rng), 2.0);
}

TEST(Displacement, RestrictedJitterStaysInsideArea) {
  const AdminArea tri(1, "tri", {{0, 0}, {6, 0}, {0, 6}});
  const JitterScheme scheme;
  Rng rng(31);
  for (int k = 0; k < 2000; ++k) {
    const Point s{0.2, 0.2};
    const Point p = jitter(s, Stratum::rural, scheme, tri, rng);
    EXPECT_TRUE(tri.contains(p));
    EXPECT_LT(distance(p, s), 10.0);
  }
  const AdminArea sliver(2, "sliver", {{0, 0}, {1e-9, 0}, {0, 1e-9}});
  EXPECT_THROW(displace({1e-10, 1e-10}, 5.0, sliver, true, rng), NumericalError);
}

TEST(Normalizer, InteriorIsOneAndEdgeIsTwo) {
  const AdminArea area = big_square();
  Rng rng(41);
  EXPECT_EQ(normalizer({0, 0}, 5.0, area, 1000, rng), 1.0);
  const double c = normalizer({100, 0}, 5.0, area, 1000000, rng);
  EXPECT_NEAR(c, 2.0, 0.01);
  // Corner of a square keeps a quarter of the disc.
  EXPECT_NEAR(normalizer({100, 100}, 5.0, area, 1000000, rng), 4.0, 0.04);
}

TEST(Normalizer, TableRoundTripAndBranches) {
  const Geography geo({big_square()});
  auto frame = frame_at({{0, 0}, {99, 0}}, Stratum::rural);
  const JitterScheme scheme;
  const auto table = build_normalizing_table(frame, geo, scheme, 2000, 5);
  EXPECT_EQ(table.size(), 4u);
  EXPECT_EQ(table.at(0, 5.0), 1.0);
  EXPECT_EQ(table.at(0, 10.0), 1.0);
  EXPECT_GT(table.at(1, 10.0), 1.0);
  EXPECT_THROW(table.at(1, 2.0), InputError);
  const auto again = parse_normalizing_table(format_normalizing_table(table));
  EXPECT_EQ(format_normalizing_table(again), format_normalizing_table(table));
  const auto other = build_normalizing_table(frame, geo, scheme, 2000, 5);
  EXPECT_EQ(format_normalizing_table(other), format_normalizing_table(table));
}

TEST(DisplacementPrior, UrbanExample) {
  const auto frame = frame_at({{1, 0}, {2.5, 0}}, Stratum::urban);
  const auto p = displacement_prior({0, 0}, {1, Stratum::urban}, frame, unrestricted(), nullptr);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p.ea_ids[0], 0u);
  EXPECT_DOUBLE_EQ(p.probs[0], 1.0);
}

TEST(DisplacementPrior, RuralExampleMatchesDirectFormula) {
  const auto frame = frame_at({{1, 0}, {0, 7}}, Stratum::rural);
  const auto p = displacement_prior({0, 0}, {1, Stratum::rural}, frame, unrestricted(), nullptr);
  ASSERT_EQ(p.size(), 2u);
  const double a = 0.99 / (2 * kPi * 5 * 1) + 0.01 / (2 * kPi * 10 * 1);
  const double b = 0.01 / (2 * kPi * 10 * 7);
  EXPECT_NEAR(p.probs[0], a / (a + b), 1e-14);
  EXPECT_NEAR(p.probs[1], b / (a + b), 1e-14);
}

TEST(DisplacementPrior, UsesNormalizingConstants) {
  const Geography geo({big_square()});
  const auto frame = frame_at({{99, 0}, {97, 0}}, Stratum::urban, {0.5, 0.5});
  NormalizingTable table;
  table.set(0, 2.0, {1.9, 100});
  table.set(1, 2.0, {1.0, 100});
  const auto p = displacement_prior({98, 0}, {1, Stratum::urban}, frame, JitterScheme{}, &table);
  EXPECT_NEAR(p.probs[0], 1.9 / 2.9, 1e-14);
  EXPECT_THROW(displacement_prior({98, 0}, {1, Stratum::urban}, frame, JitterScheme{}, nullptr), InputError);
}

TEST(DisplacementPrior, CoincidentCandidateIsPointMass) {
  const auto frame = frame_at({{0, 0}, {0.001, 0}, {1, 1}}, Stratum::urban);
  const auto p = displacement_prior({0, 0}, {1, Stratum::urban}, frame, unrestricted(), nullptr);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p.ea_ids[0], 0u);
  EXPECT_EQ(p.probs[0], 1.0);
}

TEST(DisplacementPrior, NoCandidateIsAnError) {
  const auto frame = frame_at({{50, 50}}, Stratum::urban);
  EXPECT_THROW(displacement_prior({0, 0}, {1, Stratum::urban}, frame, unrestricted(), nullptr), InputError);
  EXPECT_THROW(displacement_prior({NAN, 0}, {1, Stratum::urban}, frame, unrestricted(), nullptr), InputError);
  EXPECT_THROW(displacement_prior({0, 0}, {2, Stratum::urban}, frame, unrestricted(), nullptr), InputError);
}

TEST(DisplacementPrior, SumsToOneAndContainsTrueSource) {
  const Geography geo({big_square()});
  Rng place(3);
  std::vector<Point> pts;
  for (int k = 0; k < 300; ++k) pts.push_back({place.uniform(-20, 20), place.uniform(-20, 20)});
  const auto frame = frame_at(pts, Stratum::rural);
  const JitterScheme scheme;
  const auto table = build_normalizing_table(frame, geo, scheme, 200, 1);
  Rng rng(8);
  for (int k = 0; k < 200; ++k) {
    const std::size_t src = rng.index(pts.size());
    const Point u = jitter(pts[src], Stratum::rural, scheme, geo.area(1), rng);
    const auto p = displacement_prior(u, {1, Stratum::rural}, frame, scheme, &table);
    double total = 0.0;
    for (double x : p.probs) {
      EXPECT_GT(x, 0.0);
      total += x;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_NE(std::find(p.ea_ids.begin(), p.ea_ids.end(), src), p.ea_ids.end());
  }
}

TEST(MaskingPrior, ProportionalToWeights) {
  const auto frame = frame_at({{0, 0}, {1, 0}, {2, 0}}, Stratum::urban, {0.2, 0.0, 0.8});
  const auto p = masking_prior({1, Stratum::urban}, frame);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_DOUBLE_EQ(p.probs[0], 0.2);
  EXPECT_DOUBLE_EQ(p.probs[1], 0.8);
  EXPECT_THROW(masking_prior({1, Stratum::rural}, frame), InputError);
}

TEST(LocationRecord, MaskAndRoundTrip) {
  const Geography geo({big_square()});
  std::vector<LocationRecord> recs{{0, LocationKind::exact, Point{1.5, -2}, {1, Stratum::urban}},
                                   {1, LocationKind::jittered, Point{0.125, 3}, {1, Stratum::rural}},
                                   mask(2, {4, 4}, Stratum::rural, geo)};
  EXPECT_FALSE(recs[2].point.has_value());
  EXPECT_EQ(recs[2].block.area, 1);
  const auto again = parse_location_records(format_location_records(recs));
  EXPECT_EQ(format_location_records(again), format_location_records(recs));
  EXPECT_THROW(mask(3, {500, 0}, Stratum::urban, geo), InputError);
  EXPECT_THROW(parse_location_records("cluster_id,kind,x,y,area_id,stratum\n0,masked,1,2,1,urban\n"), InputError);
}

TEST(JitterScheme, Validation) {
  JitterScheme s;
  s.rural_probs = {0.5, 0.4};
  EXPECT_THROW(s.validate(), InputError);
  s = JitterScheme{};
  s.urban_radius = 0;
  EXPECT_THROW(s.validate(), InputError);
  EXPECT_EQ(JitterScheme{}.all_radii(), (std::vector<double>{2, 5, 10}));
}
