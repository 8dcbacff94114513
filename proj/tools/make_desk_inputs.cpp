// Writes the synthetic desk-scale inputs and a matching run configuration.
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "geomask/desk.hpp"
#include "geomask/error.hpp"
#include "geomask/geo.hpp"
#include "geomask/io.hpp"
#include "geomask/raster.hpp"

namespace fs = std::filesystem;
using namespace geomask;

int main(int argc, char** argv) {
  CLI::App app{"Generate desk-scale synthetic inputs"};
  std::string dir = "desk";
  std::uint64_t seed = 7;
  app.add_option("--out", dir, "Output directory");
  app.add_option("--seed", seed, "Seed for town placement");
  CLI11_PARSE(app, argc, argv);
  try {
    fs::create_directories(dir);
    const Geography geo = desk::geography();
    const Raster density = desk::density(geo, seed);
    io::write_file((fs::path(dir) / "geography.txt").string(), format_geography(geo));
    io::write_file((fs::path(dir) / "density.asc").string(), format_ascii_grid(density));
    io::write_file((fs::path(dir) / "covariate.asc").string(), format_ascii_grid(desk::covariate(density)));

    std::ostringstream cfg;
    cfg << "[paths]\ngeography = geography.txt\ndensity = density.asc\ncovariate = covariate.asc\n\n"
        << "[frame]\nurban_fraction = 0.3\ntrials = 25\nselection = uniform\nweights = uniform\n\n[frame.ea_counts]\n";
    for (const auto& [key, n] : desk::ea_counts()) cfg << key.area << '.' << to_string(key.stratum) << " = " << n << '\n';
    cfg << "\n[frame.clusters]\n";
    for (const auto& [key, n] : desk::cluster_counts())
      cfg << key.area << '.' << to_string(key.stratum) << " = " << n << '\n';
    cfg << "\n[scheme]\nurban_radius = 2\nrural_radii = 5 10\nrural_probs = 0.99 0.01\nrestrict_to_area = true\n"
        << "normalizer_draws = 1000\n\n"
        << "[mesh]\nspacing = 8\nextension = 32\n\n"
        << "[prior]\nbeta_variance = 100\nphi_sd = 1.5 1.5\n\n"
        << "[truth]\nbeta0 = -1.5\nbeta1 = 0.15\nlog_sd = " << io::fmt(std::log(0.5)) << "\nrange = 24\n\n"
        << "[chain]\niterations = 1000\nchains = 4\nthin = 1\ngrid_policy = rebuild\ngrid_steps = 5\ngrid_span = 2.5\n"
        << "sample_format = wide\n\n"
        << "[eval]\nscenarios = 1a 2a 3a 4a 5a 6a 1b 2b 3b 4b 5b 6b\nprediction_cell = 1\naggregate = 5\n"
        << "prediction_draws = 1000\n\n"
        << "[run]\nseed = 1\nout = out\n";
    io::write_file((fs::path(dir) / "desk.cfg").string(), cfg.str());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
