#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "displace.hpp"
#include "error.hpp"
#include "field.hpp"
#include "io.hpp"
#include "lgm.hpp"
#include "rng.hpp"

namespace geomask {

enum class GridPolicy { rebuild, freeze };

inline GridPolicy parse_grid_policy(std::string_view s) {
  if (s == "rebuild") return GridPolicy::rebuild;
  if (s == "freeze") return GridPolicy::freeze;
  throw InputError("unknown grid policy '" + std::string(s) + "' (expected rebuild|freeze)");
}

struct ChainConfig {
  int iterations = 1000;
  int burn_in = -1;  // negative: iterations / 5
  int chains = 4;
  std::uint64_t seed = 1;
  GridPolicy grid_policy = GridPolicy::rebuild;
  int thin = 1;
  GridOptions grid{};
  int threads = 0;  // 0: GEOMASK_THREADS or hardware concurrency

  int effective_burn_in() const { return burn_in < 0 ? iterations / 5 : burn_in; }

  void validate() const {
    if (chains < 1) throw InputError("chains must be >= 1");
    if (thin < 1) throw InputError("thin must be >= 1");
    if (iterations < 1 || effective_burn_in() >= iterations)
      throw InputError("need iterations > burn-in >= 0");
    grid.validate();
  }
};

// Worker count: explicit request, else GEOMASK_THREADS, else hardware, capped
// by GEOMASK_THREADS when set.
inline int thread_budget(int requested, int tasks) {
  int cap = 0;
  if (const char* env = std::getenv("GEOMASK_THREADS")) {
    try {
      cap = static_cast<int>(io::parse_int(env, "GEOMASK_THREADS"));
    } catch (const InputError&) {
      throw InputError("GEOMASK_THREADS must be a positive integer");
    }
    if (cap < 1) throw InputError("GEOMASK_THREADS must be a positive integer");
  }
  int n = requested > 0 ? requested : (cap > 0 ? cap : static_cast<int>(std::thread::hardware_concurrency()));
  if (cap > 0) n = std::min(n, cap);
  return std::clamp(n, 1, std::max(1, tasks));
}

// Runs task(i) for i in [0, count) on up to `threads` workers. Results must
// be written to per-task slots; the first exception is rethrown.
template <class Task>
void parallel_for(int count, int threads, Task task) {
  if (threads <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) task(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(threads, count); ++t)
    pool.emplace_back([&] {
      for (int i; (i = next.fetch_add(1)) < count;) {
        try {
          task(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// One cluster as seen by the sampler: outcome plus its candidate set (a
// single candidate for exact or resolved locations).
struct ClusterData {
  std::size_t cluster_id = 0;
  double y = 0.0;
  int n = 25;
  Stratum stratum = Stratum::urban;
  std::vector<std::size_t> ea_ids;  // empty for exact clusters
  std::vector<double> log_prior;
  std::vector<Point> points;
  std::vector<double> covariate;
  std::vector<MeshLocation> mesh_locations;

  std::size_t size() const { return points.size(); }
  bool fixed() const { return points.size() == 1; }
};

// Exact-location cluster.
inline ClusterData exact_cluster(std::size_t cluster_id, double y, int n, Stratum stratum, const Point& location,
                                 double covariate, const Mesh& mesh) {
  ClusterData c;
  c.cluster_id = cluster_id;
  c.y = y;
  c.n = n;
  c.stratum = stratum;
  c.log_prior = {0.0};
  c.points = {location};
  c.covariate = {covariate};
  c.mesh_locations = {locate_or_throw(mesh, location)};
  return c;
}

// Cluster whose location is one of the candidate EAs in `prior`.
template <class CovariateAt>
ClusterData candidate_cluster(std::size_t cluster_id, double y, int n, Stratum stratum, const CandidatePrior& prior,
                              const Masterframe& frame, CovariateAt covariate_at, const Mesh& mesh) {
  if (prior.size() == 0) throw InputError("cluster " + std::to_string(cluster_id) + ": empty candidate set");
  ClusterData c;
  c.cluster_id = cluster_id;
  c.y = y;
  c.n = n;
  c.stratum = stratum;
  for (std::size_t k = 0; k < prior.size(); ++k) {
    if (!(prior.probs[k] > 0.0)) continue;
    const auto& ea = frame.ea(prior.ea_ids[k]);
    c.ea_ids.push_back(ea.id);
    c.log_prior.push_back(std::log(prior.probs[k]));
    c.points.push_back(ea.location);
    c.covariate.push_back(covariate_at(ea.location));
    c.mesh_locations.push_back(locate_or_throw(mesh, ea.location));
  }
  if (c.points.empty()) throw InputError("cluster " + std::to_string(cluster_id) + ": no candidate with positive prior");
  return c;
}

// Unnormalized log full-conditional weights of the candidates:
// log prior(e) + y eta_e - n log(1 + exp(eta_e)).
inline std::vector<double> location_log_weights(const std::vector<double>& log_prior, const std::vector<double>& eta,
                                                double y, int n) {
  if (log_prior.empty()) throw InputError("gibbs_location: empty candidate set");
  if (eta.size() != log_prior.size()) throw InputError("gibbs_location: eta and prior lengths differ");
  std::vector<double> lw(log_prior.size());
  for (std::size_t k = 0; k < lw.size(); ++k) lw[k] = log_prior[k] + y * eta[k] - n * log1pexp(eta[k]);
  return lw;
}

// Normalized probabilities from log weights (max-shifted).
inline std::vector<double> normalize_log_weights(const std::vector<double>& lw) {
  const double mx = *std::max_element(lw.begin(), lw.end());
  if (!std::isfinite(mx)) throw NumericalError("gibbs_location: no candidate has finite weight");
  std::vector<double> p(lw.size());
  double total = 0.0;
  for (std::size_t k = 0; k < lw.size(); ++k) total += (p[k] = std::exp(lw[k] - mx));
  for (auto& v : p) v /= total;
  return p;
}

inline std::size_t gibbs_location(const std::vector<double>& log_prior, const std::vector<double>& eta, double y, int n,
                                  Rng& rng) {
  if (log_prior.size() == 1) return 0;
  return sample_index(normalize_log_weights(location_log_weights(log_prior, eta, y, n)), rng);
}

// Linear predictor at every candidate of a cluster given theta = [beta, w].
inline std::vector<double> candidate_eta(const ClusterData& c, const Vec& theta, std::size_t n_fixed) {
  const auto p = static_cast<Eigen::Index>(n_fixed);
  const auto w = theta.tail(theta.size() - p);
  std::vector<double> eta(c.size());
  for (std::size_t k = 0; k < c.size(); ++k) {
    double e = theta[0];
    if (n_fixed > 1) e += theta[1] * c.covariate[k];
    const auto& loc = c.mesh_locations[k];
    for (int v = 0; v < 3; ++v) e += loc.weights[v] * w[loc.nodes[v]];
    eta[k] = e;
  }
  return eta;
}

inline std::size_t gibbs_location(const ClusterData& c, const Vec& theta, std::size_t n_fixed, Rng& rng) {
  if (c.fixed()) return 0;
  return gibbs_location(c.log_prior, candidate_eta(c, theta, n_fixed), c.y, c.n, rng);
}

struct StoredDraw {
  int iteration = 0;
  MaternParams phi;
  Vec theta;
  std::vector<std::uint32_t> locations;  // candidate index per cluster
};

struct ChainTrace {
  std::vector<StoredDraw> draws;
  std::vector<std::string> warnings;
  int grid_builds = 0;
};

// Post-burn-in states of every chain.
struct SampleStore {
  std::size_t n_fixed = 1;
  std::size_t mesh_size = 0;
  std::vector<std::size_t> monitored_nodes;
  std::vector<ClusterData> clusters;
  std::vector<ChainTrace> chains;

  std::size_t draws_per_chain() const { return chains.empty() ? 0 : chains.front().draws.size(); }

  std::vector<std::string> scalar_names() const {
    std::vector<std::string> names{"beta0"};
    if (n_fixed > 1) names.push_back("beta1");
    names.push_back("phi1");
    names.push_back("phi2");
    for (auto m : monitored_nodes) names.push_back("w_" + std::to_string(m + 1));
    return names;
  }

  std::vector<double> scalars(const StoredDraw& d) const {
    std::vector<double> v{d.theta[0]};
    if (n_fixed > 1) v.push_back(d.theta[1]);
    v.push_back(d.phi.log_sd);
    v.push_back(d.phi.log_kappa);
    for (auto m : monitored_nodes) v.push_back(d.theta[static_cast<Eigen::Index>(n_fixed + m)]);
    return v;
  }

  // traces[scalar][chain][draw]
  std::vector<std::vector<std::vector<double>>> traces() const {
    const auto names = scalar_names();
    std::vector<std::vector<std::vector<double>>> out(names.size(), std::vector<std::vector<double>>(chains.size()));
    for (std::size_t c = 0; c < chains.size(); ++c)
      for (const auto& d : chains[c].draws) {
        const auto v = scalars(d);
        for (std::size_t s = 0; s < v.size(); ++s) out[s][c].push_back(v[s]);
      }
    return out;
  }

  std::vector<Vec> pooled_thetas() const {
    std::vector<Vec> out;
    for (const auto& ch : chains)
      for (const auto& d : ch.draws) out.push_back(d.theta);
    return out;
  }
};

// Ten mesh nodes spread evenly through the node list.
inline std::vector<std::size_t> default_monitored_nodes(std::size_t m, std::size_t count = 10) {
  std::vector<std::size_t> out;
  if (m == 0) return out;
  count = std::min(count, m);
  for (std::size_t k = 0; k < count; ++k) out.push_back((2 * k + 1) * m / (2 * count));
  return out;
}

namespace detail {

inline ObservationSet observations_for(const std::vector<ClusterData>& clusters,
                                       const std::vector<std::uint32_t>& loc, bool use_covariate,
                                       std::vector<MeshLocation>& mesh_locs) {
  ObservationSet obs;
  obs.use_covariate = use_covariate;
  mesh_locs.clear();
  for (std::size_t k = 0; k < clusters.size(); ++k) {
    const auto& c = clusters[k];
    const auto e = loc[k];
    obs.obs.push_back({c.y, c.n, c.points[e], c.covariate[e], c.stratum});
    mesh_locs.push_back(c.mesh_locations[e]);
  }
  return obs;
}

// Refit Gaussians and weights on a fixed set of phi values.
inline HyperGrid refit_grid(LaplaceEngine& engine, const HyperGrid& frozen) {
  HyperGrid g = frozen;
  g.warnings.clear();
  g.evaluations = 0;
  for (auto& p : g.points) {
    auto fit = engine.fit(p.phi, nullptr, true);
    ++g.evaluations;
    p.log_posterior = fit.log_marginal + engine.prior().log_density(p.phi);
    p.mode = std::move(fit.mode);
    p.factor = std::move(fit.factor);
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& p : g.points) mx = std::max(mx, p.log_posterior);
  double total = 0.0;
  for (auto& p : g.points) total += (p.weight = std::exp(p.log_posterior - mx));
  for (auto& p : g.points) p.weight /= total;
  return g;
}

}  // namespace detail

// One chain of the location-augmented sampler: (a) Gibbs update of every
// unresolved cluster location given theta, (b) a joint draw of (theta, phi)
// from the grid mixture given the current locations.
inline ChainTrace run_chain(const std::vector<ClusterData>& clusters, bool use_covariate, const Mesh& mesh,
                            const SpdeOperator& op, const PriorSpec& prior, const ChainConfig& config, int chain) {
  Rng rng(stream_seed(config.seed, 0x6368ULL, static_cast<std::uint64_t>(chain)));
  LaplaceEngine engine(mesh, op, prior);
  ChainTrace trace;
  const std::size_t nc = clusters.size();

  // Initial locations drawn from the location priors.
  std::vector<std::uint32_t> loc(nc, 0);
  for (std::size_t k = 0; k < nc; ++k)
    if (!clusters[k].fixed()) {
      std::vector<double> p(clusters[k].log_prior.size());
      for (std::size_t e = 0; e < p.size(); ++e) p[e] = std::exp(clusters[k].log_prior[e]);
      double total = 0.0;
      for (double v : p) total += v;
      for (double& v : p) v /= total;
      loc[k] = static_cast<std::uint32_t>(sample_index(p, rng));
    }

  std::vector<MeshLocation> mesh_locs;
  auto rebuild = [&](const HyperGrid* previous) {
    engine.set_observations(detail::observations_for(clusters, loc, use_covariate, mesh_locs), mesh_locs);
    ++trace.grid_builds;
    if (previous && config.grid_policy == GridPolicy::freeze) return detail::refit_grid(engine, *previous);
    HyperGrid g = build_grid(engine, config.grid, previous);
    for (const auto& w : g.warnings) trace.warnings.push_back(w);
    return g;
  };

  HyperGrid grid = rebuild(nullptr);
  JointDraw current = sample_joint(grid, rng);
  const std::size_t p = grid.n_fixed;
  const int burn = config.effective_burn_in();
  int t = 1;
  try {
    for (; t <= config.iterations; ++t) {
      bool changed = false;
      for (std::size_t k = 0; k < nc; ++k) {
        if (clusters[k].fixed()) continue;
        const auto e = static_cast<std::uint32_t>(gibbs_location(clusters[k], current.theta, p, rng));
        changed = changed || e != loc[k];
        loc[k] = e;
      }
      if (changed) grid = rebuild(&grid);
      current = sample_joint(grid, rng);
      if (t > burn && (t - burn) % config.thin == 0) trace.draws.push_back({t, current.phi, current.theta, loc});
    }
  } catch (const Error& e) {
    std::ostringstream msg;
    msg << "chain " << chain << " failed at iteration " << t << ": " << e.what() << "; phi=(" << io::fmt(current.phi.log_sd)
        << ", " << io::fmt(current.phi.log_kappa) << "), beta0=" << io::fmt(current.theta[0]);
    throw NumericalError(msg.str());
  }
  return trace;
}

// Runs config.chains independent chains (in parallel, each with its own RNG
// stream); output does not depend on the thread count.
inline SampleStore run(std::vector<ClusterData> clusters, bool use_covariate, const Mesh& mesh, const FemMatrices& fem,
                       const PriorSpec& prior, const ChainConfig& config) {
  config.validate();
  if (clusters.empty()) throw InputError("run: no clusters");
  SampleStore store;
  store.n_fixed = use_covariate ? 2 : 1;
  store.mesh_size = mesh.node_count();
  store.monitored_nodes = default_monitored_nodes(store.mesh_size);
  store.clusters = std::move(clusters);
  store.chains.resize(static_cast<std::size_t>(config.chains));
  const SpdeOperator op(fem);
  parallel_for(config.chains, thread_budget(config.threads, config.chains), [&](int c) {
    store.chains[static_cast<std::size_t>(c)] = run_chain(store.clusters, use_covariate, mesh, op, prior, config, c);
  });
  return store;
}

// Classic Gelman-Rubin potential scale reduction factor.
inline double rhat(const std::vector<std::vector<double>>& chains) {
  if (chains.size() < 2) throw InputError("rhat: need at least 2 chains");
  const std::size_t n = chains.front().size();
  if (n < 10) throw InputError("rhat: need at least 10 draws per chain");
  for (const auto& c : chains)
    if (c.size() != n) throw InputError("rhat: chains must have equal length");
  const double m = static_cast<double>(chains.size());
  const double nn = static_cast<double>(n);
  std::vector<double> means;
  double w = 0.0;
  for (const auto& c : chains) {
    double mean = 0.0;
    for (double v : c) mean += v;
    mean /= nn;
    double ss = 0.0;
    for (double v : c) ss += (v - mean) * (v - mean);
    w += ss / (nn - 1.0);
    means.push_back(mean);
  }
  w /= m;
  double grand = 0.0;
  for (double v : means) grand += v;
  grand /= m;
  double b = 0.0;
  for (double v : means) b += (v - grand) * (v - grand);
  b *= nn / (m - 1.0);
  if (!(w > 0.0)) return std::numeric_limits<double>::infinity();
  return std::sqrt(((nn - 1.0) / nn * w + b / nn) / w);
}

struct Diagnostics {
  std::vector<std::string> names;
  std::vector<double> rhat;

  double max_rhat() const {
    double mx = 0.0;
    for (double r : rhat) mx = std::max(mx, r);
    return mx;
  }
  bool converged(double threshold = 1.05) const { return max_rhat() < threshold; }
};

inline Diagnostics diagnose(const SampleStore& store) {
  Diagnostics d;
  d.names = store.scalar_names();
  if (store.chains.size() < 2) {
    d.rhat.assign(d.names.size(), std::nan(""));
    return d;
  }
  for (const auto& tr : store.traces()) d.rhat.push_back(rhat(tr));
  return d;
}

// Visit frequencies of each candidate EA for cluster index `k` (position in
// store.clusters). Exact clusters give a point mass on their single point.
inline std::vector<double> location_posterior(const SampleStore& store, std::size_t k) {
  const auto& c = store.clusters.at(k);
  std::vector<double> freq(c.size(), 0.0);
  double total = 0.0;
  for (const auto& ch : store.chains)
    for (const auto& d : ch.draws) {
      freq[d.locations[k]] += 1.0;
      total += 1.0;
    }
  if (total == 0.0) throw InputError("location_posterior: empty sample store");
  for (auto& f : freq) f /= total;
  return freq;
}

// Posterior median and 95% interval of a pooled scalar.
struct ParameterSummary {
  std::string name;
  double median = 0.0, lower = 0.0, upper = 0.0, mean = 0.0;
};

inline std::vector<ParameterSummary> summarize_parameters(const SampleStore& store) {
  std::vector<ParameterSummary> out;
  const auto names = store.scalar_names();
  const auto traces = store.traces();
  for (std::size_t s = 0; s < names.size(); ++s) {
    std::vector<double> pooled;
    for (const auto& ch : traces[s]) pooled.insert(pooled.end(), ch.begin(), ch.end());
    if (pooled.empty()) throw InputError("summarize: empty sample store");
    double mean = 0.0;
    for (double v : pooled) mean += v;
    mean /= static_cast<double>(pooled.size());
    std::sort(pooled.begin(), pooled.end());
    out.push_back({names[s], sorted_quantile(pooled, 0.5), sorted_quantile(pooled, 0.025),
                   sorted_quantile(pooled, 0.975), mean});
  }
  return out;
}

// Per-chain sample CSV: wide `draw,phi1,phi2,beta0[,beta1],w_1..w_M` or long
// `draw,parameter,value`.
inline std::string format_chain_samples(const SampleStore& store, std::size_t chain, bool wide = true) {
  const auto& ch = store.chains.at(chain);
  std::ostringstream os;
  const std::size_t p = store.n_fixed;
  auto beta_name = [](std::size_t k) { return "beta" + std::to_string(k); };
  if (wide) {
    os << "draw,phi1,phi2";
    for (std::size_t k = 0; k < p; ++k) os << ',' << beta_name(k);
    for (std::size_t m = 0; m < store.mesh_size; ++m) os << ",w_" << m + 1;
    os << '\n';
    for (const auto& d : ch.draws) {
      os << d.iteration << ',' << io::fmt(d.phi.log_sd) << ',' << io::fmt(d.phi.log_kappa);
      for (Eigen::Index k = 0; k < d.theta.size(); ++k) os << ',' << io::fmt(d.theta[k]);
      os << '\n';
    }
  } else {
    os << "draw,parameter,value\n";
    for (const auto& d : ch.draws) {
      os << d.iteration << ",phi1," << io::fmt(d.phi.log_sd) << '\n';
      os << d.iteration << ",phi2," << io::fmt(d.phi.log_kappa) << '\n';
      for (std::size_t k = 0; k < p; ++k) os << d.iteration << ',' << beta_name(k) << ',' << io::fmt(d.theta[static_cast<Eigen::Index>(k)]) << '\n';
      for (std::size_t m = 0; m < store.mesh_size; ++m)
        os << d.iteration << ",w_" << m + 1 << ',' << io::fmt(d.theta[static_cast<Eigen::Index>(p + m)]) << '\n';
    }
  }
  return os.str();
}

inline std::string format_diagnostics(const Diagnostics& d) {
  std::ostringstream os;
  os << "parameter,rhat\n";
  for (std::size_t k = 0; k < d.names.size(); ++k) os << d.names[k] << ',' << io::fmt(d.rhat[k]) << '\n';
  return os.str();
}

inline std::string format_location_posteriors(const SampleStore& store) {
  std::ostringstream os;
  os << "cluster_id,ea_id,probability\n";
  for (std::size_t k = 0; k < store.clusters.size(); ++k) {
    const auto& c = store.clusters[k];
    if (c.ea_ids.empty()) continue;
    const auto freq = location_posterior(store, k);
    for (std::size_t e = 0; e < freq.size(); ++e)
      if (freq[e] > 0.0) os << c.cluster_id << ',' << c.ea_ids[e] << ',' << io::fmt(freq[e]) << '\n';
  }
  return os.str();
}

inline std::string format_parameter_summary(const std::vector<ParameterSummary>& rows) {
  std::ostringstream os;
  os << "parameter,median,lower95,upper95,mean\n";
  for (const auto& r : rows)
    os << r.name << ',' << io::fmt(r.median) << ',' << io::fmt(r.lower) << ',' << io::fmt(r.upper) << ',' << io::fmt(r.mean)
       << '\n';
  return os.str();
}

}  // namespace geomask
