#include <gtest/gtest.h>

#include <cmath>

#include "geomask/geo.hpp"
#include "geomask/rng.hpp"
#include "support/oracles.hpp"

using namespace geomask;

namespace {

AdminArea unit_square(int id = 1) { return AdminArea(id, "square", {{0, 0}, {1, 0}, {1, 1}, {0, 1}}); }

// L shape: 2x2 square minus the upper-right unit square.
AdminArea l_shape() { return AdminArea(1, "L", {{0, 0}, {2, 0}, {2, 1}, {1, 1}, {1, 2}, {0, 2}}); }

}  // namespace

TEST(Distance, Examples) {
  EXPECT_EQ(distance({0, 0}, {0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(distance({0, 0}, {3, 4}), 5.0);
  const long double dx = 1.2L - (-2.1L), dy = -0.7L - 4.4L;
  EXPECT_NEAR(distance({1.2, -0.7}, {-2.1, 4.4}), static_cast<double>(std::sqrt(dx * dx + dy * dy)), 1e-14);
}

TEST(Distance, SymmetricAndTriangleInequality) {
  Rng rng(11);
  for (int k = 0; k < 10000; ++k) {
    const Point a{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const Point b{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const Point c{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    EXPECT_EQ(distance(a, b), distance(b, a));
    EXPECT_LE(distance(a, c), distance(a, b) + distance(b, c) + 1e-12);
    EXPECT_EQ(distance(a, a), 0.0);
  }
}

TEST(AdminArea, ContainsExamples) {
  const auto sq = unit_square();
  EXPECT_TRUE(sq.contains({0.5, 0.5}));
  EXPECT_FALSE(sq.contains({2, 2}));
  EXPECT_TRUE(sq.contains({0, 0.5}));  // on edge
  EXPECT_TRUE(sq.contains({1, 1}));    // vertex
  const auto l = l_shape();
  EXPECT_FALSE(l.contains({1.5, 1.5}));  // notch
  EXPECT_TRUE(l.contains({0.5, 1.5}));
  EXPECT_TRUE(l.contains({1.5, 0.5}));
}

TEST(AdminArea, AgreesWithWindingNumber) {
  const std::vector<Point> star{{0, 0}, {4, 1}, {6, -2}, {7, 3}, {10, 4}, {6, 6}, {5, 10}, {3, 5}, {-2, 6}, {1, 3}};
  const AdminArea area(1, "star", star);
  Rng rng(5);
  for (int k = 0; k < 10000; ++k) {
    const Point p{rng.uniform(-3, 11), rng.uniform(-3, 11)};
    if (area.on_boundary(p)) continue;
    EXPECT_EQ(area.contains(p), oracle::winding_number(star, p) != 0) << p.x << "," << p.y;
  }
}

TEST(AdminArea, RejectsDegeneratePolygons) {
  EXPECT_THROW(AdminArea(1, "two", {{0, 0}, {1, 0}}), InputError);
  EXPECT_THROW(AdminArea(1, "flat", {{0, 0}, {1, 0}, {2, 0}}), InputError);
  EXPECT_THROW(AdminArea(1, "bowtie", {{0, 0}, {1, 1}, {1, 0}, {0, 1}}), InputError);
  EXPECT_THROW(AdminArea(1, "nan", {{0, 0}, {1, NAN}, {1, 1}}), InputError);
}

TEST(AdminArea, ClosingVertexIsOptional) {
  const AdminArea closed(1, "c", {{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0, 0}});
  EXPECT_EQ(closed.boundary().size(), 4u);
  EXPECT_DOUBLE_EQ(closed.area(), 1.0);
}

TEST(Geography, LocateAndTieBreak) {
  // Areas 2 and 5 share the edge x = 1.
  const Geography geo({AdminArea(5, "east", {{1, 0}, {2, 0}, {2, 1}, {1, 1}}),
                       AdminArea(2, "west", {{0, 0}, {1, 0}, {1, 1}, {0, 1}})});
  EXPECT_EQ(geo.locate({0.5, 0.5}), 2);
  EXPECT_EQ(geo.locate({1.5, 0.5}), 5);
  EXPECT_EQ(geo.locate({1.0, 0.5}), 2);
  EXPECT_FALSE(geo.locate({3, 3}).has_value());
  EXPECT_EQ(geo.overlap_count(10000, 3), 0u);
}

TEST(Geography, LocateMatchesExhaustiveContains) {
  const Geography geo({AdminArea(1, "a", {{0, 0}, {5, 0}, {4, 4}, {0, 5}}),
                       AdminArea(2, "b", {{5, 0}, {10, 0}, {10, 5}, {4, 4}}),
                       AdminArea(3, "c", {{0, 5}, {4, 4}, {10, 5}, {10, 10}, {0, 10}})});
  Rng rng(9);
  for (int k = 0; k < 10000; ++k) {
    const Point p{rng.uniform(-1, 11), rng.uniform(-1, 11)};
    std::optional<int> expect;
    for (const auto& a : geo.areas())
      if (a.contains(p)) {
        expect = a.id();
        break;
      }
    EXPECT_EQ(geo.locate(p), expect);
  }
}

TEST(Geography, RejectsDuplicateIds) {
  EXPECT_THROW(Geography({unit_square(1), unit_square(1)}), InputError);
  const Geography geo({unit_square(1)});
  EXPECT_THROW(geo.area(7), InputError);
}

TEST(Geography, TextRoundTrip) {
  const std::string text =
      "# two areas\narea 1 West\n0 0\n1 0\n1 1\n0 1\n\narea 2 East\n1 0\n2 0\n2 1\n1 1\n";
  const Geography geo = parse_geography(text);
  ASSERT_EQ(geo.areas().size(), 2u);
  EXPECT_EQ(geo.area(2).name(), "East");
  const Geography again = parse_geography(format_geography(geo));
  EXPECT_EQ(format_geography(again), format_geography(geo));
  EXPECT_THROW(parse_geography("area 1 x\n0 0\n1 zero\n"), InputError);
}
