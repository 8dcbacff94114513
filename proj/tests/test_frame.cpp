#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "geomask/frame.hpp"

using namespace geomask;

namespace {

// Areas laid out as a row of `n` squares of side `side`, rasterized at `cell`.
Geography strip(int n, double side) {
  std::vector<AdminArea> areas;
  for (int k = 0; k < n; ++k) {
    const double x0 = k * side;
    areas.emplace_back(k + 1, "a" + std::to_string(k + 1),
                       std::vector<Point>{{x0, 0}, {x0 + side, 0}, {x0 + side, side}, {x0, side}});
  }
  return Geography(std::move(areas));
}

Raster raster_over(const Geography& geo, double cell, auto density) {
  const auto& b = geo.bbox();
  GridSpec g{{b.xmin, b.ymin}, cell, static_cast<std::size_t>(std::llround(b.height() / cell)),
             static_cast<std::size_t>(std::llround(b.width() / cell))};
  std::vector<double> v(g.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = density(g.cell_center(k));
  return Raster(g, std::move(v));
}

Masterframe frame_of(std::vector<std::pair<BlockKey, std::vector<double>>> blocks) {
  std::vector<EnumerationArea> eas;
  for (const auto& [key, pops] : blocks)
    for (double p : pops) {
      EnumerationArea ea;
      ea.id = eas.size();
      ea.area = key.area;
      ea.stratum = key.stratum;
      ea.population = p;
      ea.location = {static_cast<double>(eas.size()), 0.0};
      eas.push_back(ea);
    }
  return Masterframe(std::move(eas));
}

}  // namespace

TEST(Stratify, UniformDensityGivesMinimalShareAtLeastTarget) {
  const Geography geo = strip(1, 10);
  const Raster r = raster_over(geo, 1.0, [](Point) { return 3.0; });
  const auto s = stratify(r, geo, 0.5);
  // Ties cannot be split: every cell shares the top density, so all are urban.
  EXPECT_DOUBLE_EQ(s.urban_share.at(1), 1.0);
  EXPECT_GE(s.urban_share.at(1), 0.5);
}

TEST(Stratify, TwoLevelDensity) {
  const Geography geo = strip(1, 10);
  const Raster r = raster_over(geo, 1.0, [](Point p) { return p.x < 5 ? 10.0 : 1.0; });
  const auto s = stratify(r, geo, 0.5);
  for (std::size_t c = 0; c < r.values.size(); ++c)
    EXPECT_EQ(*s.labels[c], r.values[c] == 10.0 ? Stratum::urban : Stratum::rural);
  EXPECT_NEAR(s.urban_share.at(1), 500.0 / 550.0, 1e-12);
}

TEST(Stratify, SortAndScanOracle) {
  const Geography geo = strip(1, 6);
  const Raster r = raster_over(geo, 1.0, [](Point p) { return 1.0 + std::fmod(p.x * 7.3 + p.y * 3.1, 5.0); });
  const double target = 0.99;
  const auto s = stratify(r, geo, target);
  // Oracle: the smallest set of top cells (ties included) reaching the target.
  std::vector<double> v = r.values;
  std::sort(v.begin(), v.end(), std::greater<>());
  double total = 0.0;
  for (double x : v) total += x;
  double cum = 0.0, thr = v.front();
  for (std::size_t k = 0; k < v.size();) {
    const double level = v[k];
    while (k < v.size() && v[k] == level) cum += v[k++];
    thr = level;
    if (cum / total >= target) break;
  }
  EXPECT_DOUBLE_EQ(s.threshold.at(1), thr);
  EXPECT_GE(s.urban_share.at(1), target);
  for (std::size_t c = 0; c < r.values.size(); ++c) EXPECT_EQ(*s.labels[c] == Stratum::urban, r.values[c] >= thr);
}

TEST(Stratify, ZeroDensityAreaIsRuralWithWarning) {
  const Geography geo = strip(2, 4);
  const Raster r = raster_over(geo, 1.0, [](Point p) { return p.x < 4 ? 0.0 : 2.0 + p.x; });
  const auto s = stratify(r, geo, 0.3);
  EXPECT_EQ(s.warnings.size(), 1u);
  for (std::size_t c = 0; c < r.values.size(); ++c)
    if (s.cell_area[c] == 1) EXPECT_EQ(*s.labels[c], Stratum::rural);
  EXPECT_THROW(stratify(r, geo, 1.0), InputError);
}

TEST(GenerateFrame, ReproducesTableOneBlockSizes) {
  // Eight provinces with published potential-cluster counts per stratum.
  const std::vector<std::pair<std::size_t, std::size_t>> table = {
      {7816, 4192}, {4268, 3569}, {12396, 3234}, {0, 10394}, {2230, 433}, {9787, 3041}, {19097, 6051}, {7383, 1419}};
  const Geography geo = strip(8, 20);
  const Raster r = raster_over(geo, 1.0, [](Point p) {
    const double cx = std::fmod(p.x, 20.0) - 10.0, cy = p.y - 10.0;
    return 50.0 + 5000.0 * std::exp(-(cx * cx + cy * cy) / 8.0);
  });
  const auto strata = stratify(r, geo, 0.3);
  std::map<BlockKey, std::size_t> counts;
  for (int a = 0; a < 8; ++a) {
    counts[{a + 1, Stratum::rural}] = table[static_cast<std::size_t>(a)].first;
    counts[{a + 1, Stratum::urban}] = table[static_cast<std::size_t>(a)].second;
  }
  const Masterframe frame = generate_frame(r, strata, geo, counts, 42);
  EXPECT_EQ(frame.size(), 95310u);
  EXPECT_EQ(frame.block_size({4, Stratum::rural}), 0u);
  EXPECT_EQ(frame.block_size({4, Stratum::urban}), 10394u);
  EXPECT_EQ(frame.block_size({2, Stratum::rural}), 4268u);
  for (const auto& [key, n] : counts) EXPECT_EQ(frame.block_size(key), n);
  for (const auto& ea : frame.eas()) ASSERT_EQ(geo.locate(ea.location), ea.area);
  for (const auto& [key, ids] : frame.blocks()) {
    double sum = 0.0;
    for (auto id : ids) sum += frame.ea(id).weight;
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }

  // 398 clusters across the 16 strata.
  SampleDesign design;
  std::size_t requested = 0;
  for (const auto& [key, n] : counts) {
    if (n == 0) continue;
    design.clusters[key] = std::min<std::size_t>(n, 25);
    requested += design.clusters[key];
  }
  design.clusters[{7, Stratum::rural}] += 398 - requested;
  const auto clusters = draw_clusters(frame, design, 3);
  std::set<std::size_t> ids;
  for (const auto& c : clusters) ids.insert(c.ea_id);
  EXPECT_EQ(clusters.size(), 398u);
  EXPECT_EQ(ids.size(), 398u);
}

TEST(GenerateFrame, DeterministicAndCellContained) {
  const Geography geo = strip(2, 5);
  const Raster r = raster_over(geo, 1.0, [](Point p) { return (p.x > 2 && p.x < 3 && p.y > 2 && p.y < 3) ? 100.0 : 1.0; });
  const auto strata = stratify(r, geo, 0.3);
  std::map<BlockKey, std::size_t> counts{{{1, Stratum::urban}, 3}, {{1, Stratum::rural}, 7}};
  const auto a = generate_frame(r, strata, geo, counts, 9);
  const auto b = generate_frame(r, strata, geo, counts, 9);
  EXPECT_EQ(format_masterframe(a), format_masterframe(b));
  // Single-cell urban stratum: all three EAs in that cell.
  for (auto id : a.block({1, Stratum::urban})) {
    EXPECT_GT(a.ea(id).location.x, 2.0);
    EXPECT_LT(a.ea(id).location.x, 3.0);
    EXPECT_DOUBLE_EQ(a.ea(id).population, 100.0);
  }
  EXPECT_TRUE(generate_frame(r, strata, geo, {}, 9).empty());
  // Area 2 is flat, so every cell is urban and the rural block is empty.
  EXPECT_THROW(generate_frame(r, strata, geo, {{{2, Stratum::rural}, 1}}, 9), InputError);
}

TEST(SetWeights, UniformAndPps) {
  auto f = frame_of({{{1, Stratum::urban}, {1, 1, 1, 1}}, {{2, Stratum::rural}, {1, 3}}});
  f = set_weights(f, Selection::uniform);
  for (auto id : f.block({1, Stratum::urban})) EXPECT_DOUBLE_EQ(f.ea(id).weight, 0.25);
  f = set_weights(f, Selection::pps);
  auto ids = f.block({2, Stratum::rural});
  EXPECT_DOUBLE_EQ(f.ea(ids[0]).weight, 0.25);
  EXPECT_DOUBLE_EQ(f.ea(ids[1]).weight, 0.75);
  EXPECT_THROW(set_weights(frame_of({{{1, Stratum::urban}, {0, 0}}}), Selection::pps), InputError);
}

TEST(DrawClusters, ExhaustiveAndInfeasible) {
  const auto f = set_weights(frame_of({{{1, Stratum::urban}, {1, 2, 3}}}), Selection::uniform);
  SampleDesign d;
  d.clusters[{1, Stratum::urban}] = 3;
  auto all = draw_clusters(f, d, 1);
  std::set<std::size_t> ids;
  for (const auto& c : all) ids.insert(c.ea_id);
  EXPECT_EQ(ids, (std::set<std::size_t>{0, 1, 2}));
  d.clusters[{1, Stratum::urban}] = 4;
  EXPECT_THROW(draw_clusters(f, d, 1), InputError);
}

TEST(DrawClusters, UniformInclusionFrequencies) {
  const auto f = set_weights(frame_of({{{1, Stratum::urban}, {1, 5, 20}}}), Selection::uniform);
  SampleDesign d;
  d.clusters[{1, Stratum::urban}] = 1;
  std::vector<double> hits(3, 0.0);
  const int reps = 100000;
  for (int r = 0; r < reps; ++r) hits[draw_clusters(f, d, static_cast<std::uint64_t>(r))[0].ea_id] += 1.0;
  const double p = 1.0 / 3.0, se = std::sqrt(p * (1 - p) / reps);
  for (double h : hits) EXPECT_NEAR(h / reps, p, 3 * se);
}

TEST(Masterframe, CsvRoundTrip) {
  const auto f = set_weights(frame_of({{{1, Stratum::urban}, {1.5, 2}}, {{3, Stratum::rural}, {7}}}), Selection::pps);
  const auto g = parse_masterframe(format_masterframe(f));
  EXPECT_EQ(format_masterframe(g), format_masterframe(f));
  EXPECT_THROW(parse_masterframe("ea_id,area_id,stratum,x,y,population,weight\n1,1,urban,0,0,1,1\n"), InputError);
}
