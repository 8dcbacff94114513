#include <gtest/gtest.h>

#include <cmath>

#include "geomask/raster.hpp"

using namespace geomask;

TEST(GridSpec, CellCentersAndLookup) {
  const GridSpec g{{10, 20}, 2.0, 3, 4};
  // Row 0 is the northern row.
  EXPECT_EQ(g.cell_center(0, 0), (Point{11, 25}));
  EXPECT_EQ(g.cell_center(2, 3), (Point{17, 21}));
  EXPECT_EQ(g.cell_of({11, 25}), 0u);
  EXPECT_EQ(g.cell_of({17.9, 20.1}), 11u);
  EXPECT_EQ(g.cell_of({18, 26}), 3u);  // north-east corner belongs to the last cell
  EXPECT_FALSE(g.cell_of({9.9, 21}).has_value());
  for (std::size_t k = 0; k < g.size(); ++k) EXPECT_EQ(g.cell_of(g.cell_center(k)), k);
}

TEST(Raster, AsciiGridRoundTrip) {
  const std::string text =
      "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1.5\nNODATA_value -9999\n1 2 3\n4 -9999 6\n";
  const Raster r = parse_ascii_grid(text);
  EXPECT_EQ(r.grid.ncols, 3u);
  EXPECT_EQ(r.grid.nrows, 2u);
  EXPECT_DOUBLE_EQ(r.at(0, 2), 3.0);
  EXPECT_TRUE(std::isnan(r.at(1, 1)));
  EXPECT_FALSE(r.sample({2.0, 0.5}).has_value());
  EXPECT_DOUBLE_EQ(*r.sample({0.5, 2.5}), 1.0);
  const Raster again = parse_ascii_grid(format_ascii_grid(r));
  EXPECT_EQ(again.grid, r.grid);
  EXPECT_EQ(format_ascii_grid(again), format_ascii_grid(r));
}

TEST(Raster, RejectsMalformedGrids) {
  EXPECT_THROW(parse_ascii_grid("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n"), InputError);
  EXPECT_THROW(parse_ascii_grid("ncols 2\nnrows 1\nxllcorner 0\ncellsize 1\n1 2\n"), InputError);
  EXPECT_THROW(parse_ascii_grid("ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nabc\n"), InputError);
  EXPECT_THROW(Raster(GridSpec{{0, 0}, 1.0, 0, 3}, {}), InputError);
}
