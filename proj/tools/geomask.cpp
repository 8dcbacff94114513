#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "geomask/chain.hpp"
#include "geomask/config.hpp"
#include "geomask/displace.hpp"
#include "geomask/eval.hpp"
#include "geomask/field.hpp"
#include "geomask/frame.hpp"
#include "geomask/geo.hpp"
#include "geomask/io.hpp"
#include "geomask/lgm.hpp"
#include "geomask/raster.hpp"

namespace fs = std::filesystem;
using namespace geomask;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInput = 2;
constexpr int kExitRhat = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> scenarios;
  std::optional<int> chains;
  std::optional<int> iterations;
  std::optional<std::string> out;
};

// Stream ids per command.
enum Stream : std::uint64_t { kFrame = 1, kSimulate = 2, kFit = 3, kNormalizer = 4 };

void write(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  io::write_file(path.string(), content);
}

std::string read(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw InputError("missing " + what + ": " + path.string());
  return io::read_file(path.string());
}

class Log {
public:
  template <class T>
  Log& operator<<(const T& v) {
    os_ << v;
    return *this;
  }
  void save(const fs::path& path) const { write(path, os_.str()); }

private:
  std::ostringstream os_;
};

// Inputs shared by every command.
struct Context {
  Config cfg;
  RunConfig run;
  std::uint64_t seed = 0;
  fs::path out;
  Geography geo;
  std::string geo_text;
  double domain = 0.0;

  static Context load(const Options& o) {
    if (o.config.empty()) throw InputError("--config is required");
    Context c{Config::load(o.config), {}, 0, {}, {}, {}, 0.0};
    c.run = load_run_config(c.cfg);
    if (o.seed) c.run.seed = o.seed;
    if (!c.run.seed) throw InputError("a seed is required ([run] seed or --seed)");
    c.seed = *c.run.seed;
    if (o.chains) c.run.chain.chains = *o.chains;
    if (o.iterations) c.run.chain.iterations = *o.iterations;
    if (!o.scenarios.empty()) {
      for (const auto& s : o.scenarios) parse_scenario(s);
      c.run.scenarios = o.scenarios;
    }
    c.out = o.out ? fs::path(*o.out) : fs::path(c.run.out);
    c.geo_text = io::read_file(c.run.geography.string());
    c.geo = parse_geography(c.geo_text);
    if (c.geo.empty()) throw InputError("geography has no areas");
    c.domain = c.run.domain > 0.0 ? c.run.domain : std::max(c.geo.bbox().width(), c.geo.bbox().height());
    if (!c.run.phi_mean_set) c.run.prior.phi_mean = PriorSpec::for_domain(c.domain).phi_mean;
    c.run.prior.validate();
    return c;
  }

  double mesh_spacing() const { return run.mesh_spacing > 0.0 ? run.mesh_spacing : domain / 10.0; }
  double mesh_extension() const {
    return run.mesh_extension >= 0.0 ? run.mesh_extension : 2.0 * practical_range(run.prior.phi_mean.kappa());
  }

  // Mesh cached under out/cache keyed by a hash of geography and mesh settings.
  Mesh mesh(Log& log) const {
    const std::string key = geo_text + "|" + io::fmt(mesh_spacing()) + "|" + io::fmt(mesh_extension());
    const fs::path path = out / "cache" / ("mesh-" + io::hex(io::fnv1a(key)) + ".txt");
    if (fs::exists(path)) {
      log << "mesh: " << path.filename().string() << '\n';
      return parse_mesh(io::read_file(path.string()));
    }
    Mesh m = build_mesh(geo.bbox(), mesh_spacing(), mesh_extension());
    write(path, format_mesh(m));
    log << "mesh: " << path.filename().string() << '\n';
    return parse_mesh(format_mesh(m));
  }

  fs::path frame_dir() const { return out / "frame"; }
  fs::path sim_dir() const { return out / "simulate"; }
  fs::path fit_dir(const std::string& id) const { return out / "fit" / id; }
};

std::string strata_grid(const Raster& density, const Stratification& s) {
  std::vector<double> v(s.labels.size(), std::nan(""));
  for (std::size_t k = 0; k < v.size(); ++k)
    if (s.labels[k]) v[k] = *s.labels[k] == Stratum::urban ? 1.0 : 0.0;
  return format_ascii_grid(Raster(density.grid, std::move(v)));
}

int cmd_frame(const Options& o) {
  Context c = Context::load(o);
  Log log;
  const Raster density = read_ascii_grid(c.run.density.string());
  const auto strata = stratify(density, c.geo, c.run.urban_fraction);
  for (const auto& w : strata.warnings) log << "warning: " << w << '\n';
  for (const auto& [area, share] : strata.urban_share)
    log << "area " << area << ": urban threshold " << io::fmt(strata.threshold.at(area)) << ", urban share "
        << io::fmt(share) << '\n';
  const std::uint64_t seed = stream_seed(c.seed, kFrame);
  Masterframe frame = set_weights(generate_frame(density, strata, c.geo, c.run.ea_counts, seed), c.run.weights);
  const auto clusters = draw_clusters(frame, c.run.design, stream_seed(seed, 1));
  log << "enumeration areas: " << frame.size() << "\nclusters: " << clusters.size() << '\n';
  for (const auto& [key, ids] : frame.blocks()) log << "block " << to_string(key) << ": " << ids.size() << " EAs\n";
  write(c.frame_dir() / "masterframe.csv", format_masterframe(frame));
  write(c.frame_dir() / "clusters.csv", format_clusters(clusters));
  write(c.frame_dir() / "strata.asc", strata_grid(density, strata));
  log.save(c.frame_dir() / "frame.log");
  return kExitOk;
}

struct FrameData {
  Masterframe frame;
  std::vector<SampledCluster> clusters;
};

FrameData load_frame(const Context& c) {
  return {parse_masterframe(read(c.frame_dir() / "masterframe.csv", "masterframe (run `frame` first)")),
          parse_clusters(read(c.frame_dir() / "clusters.csv", "cluster sample (run `frame` first)"))};
}

std::string format_observations(const ObservationSet& obs, const std::vector<SampledCluster>& clusters) {
  std::ostringstream os;
  os << "cluster_id,successes,trials,covariate\n";
  for (std::size_t k = 0; k < obs.size(); ++k)
    os << clusters[k].cluster_id << ',' << io::fmt(obs.obs[k].y) << ',' << obs.obs[k].n << ','
       << io::fmt(obs.obs[k].covariate) << '\n';
  return os.str();
}

const Regime kRegimes[] = {Regime::exact,       Regime::jittered_naive,  Regime::jittered_da,
                           Regime::masked_drop, Regime::masked_centroid, Regime::masked_da};

int cmd_simulate(const Options& o) {
  Context c = Context::load(o);
  Log log;
  const auto fd = load_frame(c);
  const Raster covariate = read_ascii_grid(c.run.covariate.string());
  const Mesh mesh = c.mesh(log);
  const FemMatrices fem = fem_matrices(mesh);
  const std::uint64_t seed = stream_seed(c.seed, kSimulate);
  const TruthSet truth = make_truth(c.run.truth_beta0, c.run.truth_beta1, c.run.truth_phi, fem, seed);
  log << "mesh nodes: " << mesh.node_count() << "\n";

  std::ostringstream tp;
  tp << "parameter,value\nbeta0," << io::fmt(truth.beta0) << "\nbeta1," << io::fmt(truth.beta1) << "\nphi1,"
     << io::fmt(truth.phi.log_sd) << "\nphi2," << io::fmt(truth.phi.log_kappa) << '\n';
  write(c.sim_dir() / "truth_parameters.csv", tp.str());
  std::ostringstream tw;
  tw << "node,w\n";
  for (Eigen::Index k = 0; k < truth.w.size(); ++k) tw << k + 1 << ',' << io::fmt(truth.w[k]) << '\n';
  write(c.sim_dir() / "truth_w.csv", tw.str());

  for (bool cov : {false, true}) {
    const auto obs = simulate_outcomes(truth, fd.clusters, covariate, c.run.design.trials, cov, mesh,
                                       stream_seed(seed, 0x7973ULL, cov ? 1 : 0));
    write(c.sim_dir() / (std::string("observations_") + (cov ? "b" : "a") + ".csv"),
          format_observations(obs, fd.clusters));
  }
  for (auto r : kRegimes) {
    const auto reported = apply_regime(fd.clusters, r, c.geo, fd.frame, c.run.scheme, stream_seed(seed, 0x7265ULL));
    std::vector<LocationRecord> recs;
    for (const auto& x : reported) recs.push_back(x.record);
    write(c.sim_dir() / (std::string("records_") + to_string(r) + ".csv"), format_location_records(recs));
    log << to_string(r) << ": " << recs.size() << " records\n";
  }
  log.save(c.sim_dir() / "simulate.log");
  return kExitOk;
}

TruthSet load_truth(const Context& c) {
  const auto tp = io::parse_csv(read(c.sim_dir() / "truth_parameters.csv", "truth (run `simulate` first)"));
  std::map<std::string, double> v;
  for (const auto& r : tp.rows) v[r[tp.column("parameter")]] = io::parse_double(r[tp.column("value")], "value");
  TruthSet t;
  t.beta0 = v.at("beta0");
  t.beta1 = v.at("beta1");
  t.phi = {v.at("phi1"), v.at("phi2")};
  const auto tw = io::parse_csv(read(c.sim_dir() / "truth_w.csv", "truth field (run `simulate` first)"));
  t.w.resize(static_cast<Eigen::Index>(tw.rows.size()));
  for (std::size_t k = 0; k < tw.rows.size(); ++k)
    t.w[static_cast<Eigen::Index>(k)] = io::parse_double(tw.rows[k][tw.column("w")], "w");
  return t;
}

ObservationSet load_observations(const Context& c, bool cov, const std::vector<SampledCluster>& clusters) {
  const auto t = io::parse_csv(read(c.sim_dir() / (std::string("observations_") + (cov ? "b" : "a") + ".csv"),
                                    "observations (run `simulate` first)"));
  std::map<std::size_t, std::pair<double, int>> by_id;
  for (const auto& r : t.rows)
    by_id[static_cast<std::size_t>(io::parse_int(r[t.column("cluster_id")], "cluster_id"))] = {
        io::parse_double(r[t.column("successes")], "successes"),
        static_cast<int>(io::parse_int(r[t.column("trials")], "trials"))};
  ObservationSet obs;
  obs.use_covariate = cov;
  for (const auto& cl : clusters) {
    auto it = by_id.find(cl.cluster_id);
    if (it == by_id.end()) throw InputError("observations lack cluster " + std::to_string(cl.cluster_id));
    Observation ob;
    ob.y = it->second.first;
    ob.n = it->second.second;
    ob.location = cl.location;
    ob.stratum = cl.block.stratum;
    obs.obs.push_back(ob);
  }
  return obs;
}

std::vector<ReportedCluster> load_reported(const Context& c, Regime r, const FrameData& fd) {
  const auto recs = parse_location_records(
      read(c.sim_dir() / (std::string("records_") + to_string(r) + ".csv"), "location records (run `simulate` first)"));
  std::map<std::size_t, std::size_t> index;
  for (std::size_t k = 0; k < fd.clusters.size(); ++k) index[fd.clusters[k].cluster_id] = k;
  std::vector<ReportedCluster> out;
  for (const auto& rec : recs) {
    auto it = index.find(rec.cluster_id);
    if (it == index.end()) throw InputError("record for unknown cluster " + std::to_string(rec.cluster_id));
    ReportedCluster rc{it->second, rec, rec.point};
    if (rec.kind == LocationKind::masked && r == Regime::masked_centroid) rc.resolved = fd.frame.block_centroid(rec.block);
    out.push_back(rc);
  }
  return out;
}

// Normalizing constants cached under out/cache keyed by frame, geography,
// scheme, draw count and seed.
NormalizingTable normalizer_table(const Context& c, const Masterframe& frame, Log& log) {
  std::ostringstream key;
  key << format_masterframe(frame) << '|' << c.geo_text << '|' << io::fmt(c.run.scheme.urban_radius);
  for (double r : c.run.scheme.rural_radii) key << ',' << io::fmt(r);
  for (double p : c.run.scheme.rural_probs) key << ',' << io::fmt(p);
  key << '|' << c.run.normalizer_draws << '|' << c.seed;
  const fs::path path = c.out / "cache" / ("normalizer-" + io::hex(io::fnv1a(key.str())) + ".csv");
  if (fs::exists(path)) {
    log << "normalizer table: " << path.filename().string() << '\n';
    return parse_normalizing_table(io::read_file(path.string()));
  }
  auto table = build_normalizing_table(frame, c.geo, c.run.scheme, c.run.normalizer_draws,
                                       stream_seed(c.seed, kNormalizer));
  const std::string text = format_normalizing_table(table);
  write(path, text);
  log << "normalizer table: " << path.filename().string() << '\n';
  return parse_normalizing_table(text);
}

std::vector<double> sd_of(const SurfaceSummary& s) {
  std::vector<double> v;
  for (double x : s.variance) v.push_back(std::sqrt(x));
  return v;
}

int cmd_fit(const Options& o) {
  Context c = Context::load(o);
  const auto fd = load_frame(c);
  const Raster covariate = read_ascii_grid(c.run.covariate.string());
  Log shared;
  const Mesh mesh = c.mesh(shared);
  const FemMatrices fem = fem_matrices(mesh);
  const TruthSet truth = load_truth(c);
  if (static_cast<std::size_t>(truth.w.size()) != mesh.node_count())
    throw InputError("truth field does not match the mesh (rerun `simulate`)");
  GridSpec pgrid;
  {
    const auto& b = c.geo.bbox();
    pgrid.origin = {b.xmin, b.ymin};
    pgrid.cell_size = c.run.prediction_cell;
    pgrid.ncols = static_cast<std::size_t>(std::ceil(b.width() / pgrid.cell_size - 1e-9));
    pgrid.nrows = static_cast<std::size_t>(std::ceil(b.height() / pgrid.cell_size - 1e-9));
  }
  const EvalGrid eval = make_eval_grid(make_prediction_grid(pgrid, c.geo), mesh, covariate, c.run.aggregate);

  bool converged = true;
  for (const auto& id : c.run.scenarios) {
    const Scenario sc = parse_scenario(id);
    Log log;
    log << "scenario " << sc.id << " (" << to_string(sc.regime) << (sc.covariate ? ", covariate" : "") << ")\n";
    const ObservationSet obs = load_observations(c, sc.covariate, fd.clusters);
    const auto reported = load_reported(c, sc.regime, fd);
    std::optional<NormalizingTable> table;
    if (sc.regime == Regime::jittered_da && c.run.scheme.restrict_to_area) table = normalizer_table(c, fd.frame, log);
    auto data = cluster_data(reported, obs, sc.regime, fd.frame, c.run.scheme, table ? &*table : nullptr, covariate, mesh);
    ChainConfig chain = c.run.chain;
    chain.seed = stream_seed(c.seed, kFit);
    const SampleStore store = run(std::move(data), sc.covariate, mesh, fem, c.run.prior, chain);
    const Diagnostics diag = diagnose(store);
    const fs::path dir = c.fit_dir(sc.id);
    for (std::size_t k = 0; k < store.chains.size(); ++k) {
      write(dir / ("chain_" + std::to_string(k + 1) + ".csv"), format_chain_samples(store, k, c.run.wide_samples));
      for (const auto& w : store.chains[k].warnings) log << "chain " << k + 1 << " warning: " << w << '\n';
    }
    write(dir / "diagnostics.csv", format_diagnostics(diag));
    write(dir / "parameters.csv", format_parameter_summary(summarize_parameters(store)));
    write(dir / "location_posterior.csv", format_location_posteriors(store));

    const auto thetas = thinned_thetas(store, c.run.prediction_draws);
    const MseReport m = evaluate_mse(thetas, store.n_fixed, eval, truth_surfaces(truth, eval, sc.covariate));
    write(dir / "mse.csv", format_mse(sc.id, m));
    const auto surf = predict_surface(thetas, store.n_fixed, eval.proj, &eval.covariate);
    write(dir / "prob_median.asc", format_ascii_grid(to_raster(eval.cells, surf.probability.median)));
    write(dir / "prob_lower.asc", format_ascii_grid(to_raster(eval.cells, surf.probability.lower)));
    write(dir / "prob_upper.asc", format_ascii_grid(to_raster(eval.cells, surf.probability.upper)));
    write(dir / "logit_median.asc", format_ascii_grid(to_raster(eval.cells, surf.logit.median)));
    write(dir / "logit_sd.asc", format_ascii_grid(to_raster(eval.cells, sd_of(surf.logit))));
    write(dir / "latent_median.asc", format_ascii_grid(to_raster(eval.cells, surf.latent.median)));
    write(dir / "latent_sd.asc", format_ascii_grid(to_raster(eval.cells, sd_of(surf.latent))));
    write(dir / "prob_median_coarse.asc",
          format_ascii_grid(aggregate_blocks(to_raster(eval.cells, surf.probability.median), c.run.aggregate)));

    log << "chains: " << store.chains.size() << ", draws per chain: " << store.draws_per_chain() << '\n';
    if (store.chains.size() < 2) {
      log << "R-hat not computed (single chain)\n";
    } else {
      log << "max R-hat: " << io::fmt(diag.max_rhat()) << '\n';
      if (!diag.converged()) {
        converged = false;
        log << "NOT CONVERGED: some R-hat >= 1.05\n";
        std::cerr << "scenario " << sc.id << ": R-hat " << io::fmt(diag.max_rhat()) << " >= 1.05\n";
      }
    }
    log.save(dir / "fit.log");
  }
  return converged ? kExitOk : kExitRhat;
}

int cmd_report(const Options& o) {
  Context c = Context::load(o);
  const fs::path fit = c.out / "fit";
  std::vector<Scenario> found;
  for (const auto& s : all_scenarios())
    if (fs::exists(fit / s.id / "parameters.csv") && fs::exists(fit / s.id / "mse.csv")) found.push_back(s);
  if (found.empty()) throw InputError("no fitted scenarios under " + fit.string() + " (run `fit` first)");

  std::ostringstream params, mse, comp;
  params << "scenario,parameter,median,lower95,upper95\n";
  mse << "scenario,surface,resolution,mse,bias2,variance\n";
  comp << "scenario,regime,covariate,beta0,beta1,phi1,phi2,mse_latent,mse_logit_p,bias2_logit_p\n";
  for (const auto& s : found) {
    const auto p = io::read_csv((fit / s.id / "parameters.csv").string());
    std::map<std::string, std::string> med;
    for (const auto& r : p.rows) {
      const auto& name = r[p.column("parameter")];
      if (name.rfind("w_", 0) == 0) continue;
      params << s.id << ',' << name << ',' << r[p.column("median")] << ',' << r[p.column("lower95")] << ','
             << r[p.column("upper95")] << '\n';
      med[name] = r[p.column("median")] + " (" + r[p.column("lower95")] + "; " + r[p.column("upper95")] + ")";
    }
    const auto m = io::read_csv((fit / s.id / "mse.csv").string());
    std::map<std::string, std::pair<std::string, std::string>> fine;
    for (const auto& r : m.rows) {
      mse << r[m.column("scenario")] << ',' << r[m.column("surface")] << ',' << r[m.column("resolution")] << ','
          << r[m.column("mse")] << ',' << r[m.column("bias2")] << ',' << r[m.column("variance")] << '\n';
      if (r[m.column("resolution")] == "fine") fine[r[m.column("surface")]] = {r[m.column("mse")], r[m.column("bias2")]};
    }
    auto cell = [&](const std::string& k) { return med.count(k) ? "\"" + med[k] + "\"" : std::string(); };
    comp << s.id << ',' << to_string(s.regime) << ',' << (s.covariate ? "yes" : "no") << ',' << cell("beta0") << ','
         << cell("beta1") << ',' << cell("phi1") << ',' << cell("phi2") << ',' << fine["latent"].first << ','
         << fine["logit_p"].first << ',' << fine["logit_p"].second << '\n';
  }
  write(c.out / "report" / "parameters.csv", params.str());
  write(c.out / "report" / "mse.csv", mse.str());
  write(c.out / "report" / "comparison.csv", comp.str());
  return kExitOk;
}

int cmd_audit(const Options& o) {
  Context c = Context::load(o);
  const auto fd = load_frame(c);
  for (const auto& id : c.run.scenarios) {
    const Scenario sc = parse_scenario(id);
    const auto recs = parse_location_records(read(c.sim_dir() / (std::string("records_") + to_string(sc.regime) + ".csv"),
                                                  "location records (run `simulate` first)"));
    std::map<std::size_t, std::vector<double>> post;
    const fs::path lp = c.fit_dir(sc.id) / "location_posterior.csv";
    if (uses_augmentation(sc.regime) && fs::exists(lp)) {
      const auto t = io::read_csv(lp.string());
      for (const auto& r : t.rows)
        post[static_cast<std::size_t>(io::parse_int(r[t.column("cluster_id")], "cluster_id"))].push_back(
            io::parse_double(r[t.column("probability")], "probability"));
    }
    const auto rep = disclosure_audit(recs, fd.frame, c.run.scheme, post);
    const fs::path dir = c.out / "audit" / sc.id;
    write(dir / "disclosure.csv", format_disclosure(rep));
    write(dir / "summary.csv", format_disclosure_summary(rep));
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial inference for cluster surveys with jittered or masked locations"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* sub, bool scenario, bool chain) {
    sub->add_option("--config", opt.config, "Run configuration file")->required();
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { opt.seed = s; }, "Global seed");
    sub->add_option_function<std::string>("--out", [&](const std::string& s) { opt.out = s; }, "Output directory");
    if (scenario)
      sub->add_option("--scenario", opt.scenarios, "Scenario id(s), e.g. 1a or masked-DA+cov");
    if (chain) {
      sub->add_option_function<int>("--chains", [&](const int& n) { opt.chains = n; }, "Number of chains");
      sub->add_option_function<int>("--iterations", [&](const int& n) { opt.iterations = n; }, "Iterations per chain");
    }
  };
  auto* frame = app.add_subcommand("frame", "Build the masterframe and draw the cluster sample");
  auto* simulate = app.add_subcommand("simulate", "Simulate truth, outcomes and location records");
  auto* fit = app.add_subcommand("fit", "Run the sampler for one or more scenarios");
  auto* report = app.add_subcommand("report", "Summarize fitted scenarios");
  auto* audit = app.add_subcommand("audit", "Disclosure-risk audit of reported locations");
  add_common(frame, false, false);
  add_common(simulate, false, false);
  add_common(fit, true, true);
  add_common(report, false, false);
  add_common(audit, true, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }
  try {
    if (*frame) return cmd_frame(opt);
    if (*simulate) return cmd_simulate(opt);
    if (*fit) return cmd_fit(opt);
    if (*report) return cmd_report(opt);
    if (*audit) return cmd_audit(opt);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
