#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chain.hpp"
#include "displace.hpp"
#include "error.hpp"
#include "field.hpp"
#include "frame.hpp"
#include "geo.hpp"
#include "io.hpp"
#include "lgm.hpp"
#include "raster.hpp"
#include "rng.hpp"

namespace geomask {

enum class Regime { exact, jittered_naive, jittered_da, masked_drop, masked_centroid, masked_da };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::exact: return "exact";
    case Regime::jittered_naive: return "jittered-naive";
    case Regime::jittered_da: return "jittered-DA";
    case Regime::masked_drop: return "masked-drop";
    case Regime::masked_centroid: return "masked-centroid";
    case Regime::masked_da: return "masked-DA";
  }
  return "?";
}

inline Regime parse_regime(std::string_view s) {
  for (auto r : {Regime::exact, Regime::jittered_naive, Regime::jittered_da, Regime::masked_drop,
                 Regime::masked_centroid, Regime::masked_da})
    if (s == to_string(r)) return r;
  throw InputError("unknown location regime '" + std::string(s) + "'");
}

inline bool is_masked(Regime r) {
  return r == Regime::masked_drop || r == Regime::masked_centroid || r == Regime::masked_da;
}
inline bool is_jittered(Regime r) { return r == Regime::jittered_naive || r == Regime::jittered_da; }
inline bool uses_augmentation(Regime r) { return r == Regime::jittered_da || r == Regime::masked_da; }

// Rows 1a-6b: the digit picks the location regime, the letter the covariate.
struct Scenario {
  std::string id;
  Regime regime = Regime::exact;
  bool covariate = false;
};

inline const std::vector<Scenario>& all_scenarios() {
  static const std::vector<Scenario> list = [] {
    const Regime regimes[] = {Regime::exact,        Regime::jittered_naive,  Regime::jittered_da,
                              Regime::masked_drop, Regime::masked_centroid, Regime::masked_da};
    std::vector<Scenario> v;
    for (char letter : {'a', 'b'})
      for (int k = 0; k < 6; ++k) v.push_back({std::to_string(k + 1) + letter, regimes[k], letter == 'b'});
    return v;
  }();
  return list;
}

inline Scenario parse_scenario(std::string_view id) {
  for (const auto& s : all_scenarios())
    if (s.id == id) return s;
  // Regime names select the covariate-free row; "<regime>+cov" the other.
  std::string name(id);
  bool cov = false;
  if (name.size() > 4 && name.ends_with("+cov")) {
    cov = true;
    name.resize(name.size() - 4);
  }
  Regime r;
  try {
    r = parse_regime(name);
  } catch (const InputError&) {
    throw InputError("unknown scenario '" + std::string(id) + "' (expected 1a-6b or a regime name)");
  }
  for (const auto& s : all_scenarios())
    if (s.regime == r && s.covariate == cov) return s;
  throw InputError("unknown scenario '" + std::string(id) + "'");
}

inline double covariate_at(const Raster& covariate, const Point& p) {
  auto v = covariate.sample(p);
  if (!v) throw InputError("covariate missing at (" + io::fmt(p.x) + ", " + io::fmt(p.y) + ")");
  return *v;
}

// Generative truth: parameters and mesh weights shared by every scenario of
// a replicate.
struct TruthSet {
  double beta0 = -1.5;
  double beta1 = 0.15;
  MaternParams phi{};
  Vec w;

  double latent_at(const MeshLocation& loc) const { return field_at(loc, w); }
};

inline TruthSet make_truth(double beta0, double beta1, const MaternParams& phi, const FemMatrices& fem,
                           std::uint64_t seed) {
  TruthSet t{beta0, beta1, phi, Vec()};
  t.w = sample_field(precision(fem, phi), stream_seed(seed, 0x7472ULL));
  return t;
}

// y ~ Binomial(n, expit(beta0 + beta1 z(s) + S~(s))) at the true locations;
// beta1 is used only when `use_covariate`.
inline ObservationSet simulate_outcomes(const TruthSet& truth, const std::vector<SampledCluster>& clusters,
                                        const Raster& covariate, int trials, bool use_covariate, const Mesh& mesh,
                                        std::uint64_t seed) {
  if (trials < 0) throw InputError("trials must be non-negative");
  Rng rng(seed);
  ObservationSet obs;
  obs.use_covariate = use_covariate;
  for (const auto& c : clusters) {
    const auto loc = mesh.locate(c.location);
    if (!loc)
      throw InputError("cluster " + std::to_string(c.cluster_id) + " lies outside the mesh");
    const double z = covariate_at(covariate, c.location);
    double eta = truth.beta0 + truth.latent_at(*loc);
    if (use_covariate) eta += truth.beta1 * z;
    Observation o;
    o.n = trials;
    o.y = rng.binomial(trials, expit(eta));
    o.location = c.location;
    o.covariate = z;
    o.stratum = c.block.stratum;
    obs.obs.push_back(o);
  }
  return obs;
}

// Reported location of one sampled cluster under a regime. `resolved` is the
// point used by non-augmented fits (true, jittered or centroid location).
struct ReportedCluster {
  std::size_t index = 0;  // position in the sampled cluster list
  LocationRecord record;
  std::optional<Point> resolved;
};

// Stratified half of the clusters: floor(n_b / 2) per (area, stratum) block,
// with the odd blocks' extra clusters alternately masked so that exactly
// floor(N / 2) are masked overall.
inline std::vector<bool> masked_subset(const std::vector<SampledCluster>& clusters, std::uint64_t seed) {
  std::map<BlockKey, std::vector<std::size_t>> by_block;
  for (std::size_t k = 0; k < clusters.size(); ++k) by_block[clusters[k].block].push_back(k);
  std::vector<bool> masked(clusters.size(), false);
  std::size_t odd = 0;
  std::size_t b = 0;
  for (auto& [key, members] : by_block) {
    Rng rng(stream_seed(seed, 0x6d61ULL, b++));
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.index(i)]);
    std::size_t take = members.size() / 2;
    if (members.size() % 2 == 1) take += (odd++ % 2 == 1) ? 1 : 0;
    for (std::size_t i = 0; i < take; ++i) masked[members[i]] = true;
  }
  return masked;
}

// Location records under a regime. Jittered regimes share one set of
// displaced points and masked regimes one masked subset, for a given seed.
inline std::vector<ReportedCluster> apply_regime(const std::vector<SampledCluster>& clusters, Regime regime,
                                                 const Geography& geo, const Masterframe& frame,
                                                 const JitterScheme& scheme, std::uint64_t seed) {
  std::vector<ReportedCluster> out;
  const std::vector<bool> masked = is_masked(regime) ? masked_subset(clusters, seed) : std::vector<bool>();
  for (std::size_t k = 0; k < clusters.size(); ++k) {
    const auto& c = clusters[k];
    ReportedCluster r;
    r.index = k;
    r.record.cluster_id = c.cluster_id;
    r.record.block = c.block;
    if (is_jittered(regime)) {
      const Point u = jitter(c.location, c.block.stratum, scheme, geo.area(c.block.area),
                             stream_seed(seed, 0x6a69ULL, c.cluster_id));
      r.record.kind = LocationKind::jittered;
      r.record.point = u;
      r.resolved = u;
    } else if (is_masked(regime) && masked[k]) {
      r.record = mask(c.cluster_id, c.location, c.block.stratum, geo);
      if (regime == Regime::masked_drop) continue;
      if (regime == Regime::masked_centroid) r.resolved = frame.block_centroid(c.block);
    } else {
      r.record.kind = LocationKind::exact;
      r.record.point = c.location;
      r.resolved = c.location;
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Sampler inputs for the reported clusters: a single fixed location for
// resolved records, the location prior over candidate EAs otherwise.
inline std::vector<ClusterData> cluster_data(const std::vector<ReportedCluster>& reported, const ObservationSet& obs,
                                             Regime regime, const Masterframe& frame, const JitterScheme& scheme,
                                             const NormalizingTable* table, const Raster& covariate, const Mesh& mesh) {
  std::vector<ClusterData> out;
  auto z = [&](const Point& p) { return covariate_at(covariate, p); };
  for (const auto& r : reported) {
    const auto& o = obs.obs.at(r.index);
    const bool augment = uses_augmentation(regime) && r.record.kind != LocationKind::exact;
    if (!augment) {
      if (!r.resolved) throw InputError("cluster " + std::to_string(r.record.cluster_id) + " has no usable location");
      out.push_back(exact_cluster(r.record.cluster_id, o.y, o.n, o.stratum, *r.resolved, z(*r.resolved), mesh));
      continue;
    }
    const CandidatePrior prior = r.record.kind == LocationKind::masked
                                     ? masking_prior(r.record.block, frame)
                                     : displacement_prior(*r.record.point, r.record.block, frame, scheme, table);
    out.push_back(candidate_cluster(r.record.cluster_id, o.y, o.n, o.stratum, prior, frame, z, mesh));
  }
  return out;
}

// Streaming per-cell mean and population variance over posterior draws.
class MseAccumulator {
public:
  explicit MseAccumulator(std::size_t cells) : mean_(cells, 0.0), m2_(cells, 0.0) {}

  void add(const Vec& draw) {
    if (static_cast<std::size_t>(draw.size()) != mean_.size()) throw InputError("mse: draw does not match grid");
    ++n_;
    const double nn = static_cast<double>(n_);
    for (std::size_t g = 0; g < mean_.size(); ++g) {
      const double x = draw[static_cast<Eigen::Index>(g)];
      const double d = x - mean_[g];
      mean_[g] += d / nn;
      m2_[g] += d * (x - mean_[g]);
    }
  }

  std::size_t count() const { return n_; }
  const std::vector<double>& mean() const { return mean_; }
  double variance(std::size_t g) const { return n_ ? m2_[g] / static_cast<double>(n_) : 0.0; }
  std::size_t size() const { return mean_.size(); }

private:
  std::vector<double> mean_;
  std::vector<double> m2_;
  std::size_t n_ = 0;
};

// Mean squared error (x100): squared bias of the posterior mean plus the
// posterior variance, averaged over cells.
struct MseEntry {
  double mse = 0.0;
  double bias2 = 0.0;
  double variance = 0.0;
};

inline MseEntry mse(const MseAccumulator& acc, const std::vector<double>& truth) {
  if (truth.size() != acc.size()) throw InputError("mse: truth grid does not match prediction grid");
  if (acc.count() == 0) throw InputError("mse: no posterior draws");
  MseEntry e;
  const double g = static_cast<double>(truth.size());
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const double b = acc.mean()[k] - truth[k];
    e.bias2 += b * b;
    e.variance += acc.variance(k);
  }
  e.bias2 *= 100.0 / g;
  e.variance *= 100.0 / g;
  e.mse = e.bias2 + e.variance;
  return e;
}

// Draws as columns (cells x draws).
inline MseEntry mse(const Eigen::MatrixXd& draws, const std::vector<double>& truth) {
  if (static_cast<std::size_t>(draws.rows()) != truth.size())
    throw InputError("mse: truth grid does not match prediction grid");
  MseAccumulator acc(truth.size());
  for (Eigen::Index k = 0; k < draws.cols(); ++k) acc.add(draws.col(k));
  return mse(acc, truth);
}

// Coarse-block membership of prediction cells (block means over the cells
// inside the geography).
struct BlockMap {
  std::vector<std::size_t> block_of;  // per prediction cell
  std::size_t blocks = 0;
  std::vector<double> counts;

  Vec apply(const Vec& fine) const {
    Vec out = Vec::Zero(static_cast<Eigen::Index>(blocks));
    for (std::size_t k = 0; k < block_of.size(); ++k) out[static_cast<Eigen::Index>(block_of[k])] += fine[static_cast<Eigen::Index>(k)];
    for (std::size_t b = 0; b < blocks; ++b) out[static_cast<Eigen::Index>(b)] /= counts[b];
    return out;
  }
  std::vector<double> apply(const std::vector<double>& fine) const {
    Vec v = apply(Eigen::Map<const Vec>(fine.data(), static_cast<Eigen::Index>(fine.size())));
    return {v.data(), v.data() + v.size()};
  }
};

// Same block layout as aggregate_blocks (anchored at the north-west corner).
inline BlockMap block_map(const PredictionGrid& pg, std::size_t factor) {
  if (factor == 0) throw InputError("aggregation factor must be positive");
  const std::size_t bcols = (pg.grid.ncols + factor - 1) / factor;
  std::map<std::size_t, std::size_t> index;
  BlockMap bm;
  for (auto cell : pg.cells) {
    const std::size_t r = cell / pg.grid.ncols, c = cell % pg.grid.ncols;
    const std::size_t key = (r / factor) * bcols + c / factor;
    auto [it, inserted] = index.try_emplace(key, index.size());
    bm.block_of.push_back(it->second);
  }
  bm.blocks = index.size();
  bm.counts.assign(bm.blocks, 0.0);
  for (auto b : bm.block_of) bm.counts[b] += 1.0;
  return bm;
}

struct MseReport {
  MseEntry latent_fine, logit_fine, latent_coarse, logit_coarse;
};

// Evaluation surfaces on the prediction cells.
struct EvalGrid {
  PredictionGrid cells;
  Projector proj;
  std::vector<double> covariate;
  BlockMap coarse;
};

inline EvalGrid make_eval_grid(const PredictionGrid& pg, const Mesh& mesh, const Raster& covariate,
                               std::size_t aggregate) {
  EvalGrid e{pg, project(mesh, pg.points), {}, block_map(pg, aggregate)};
  for (const auto& p : pg.points) e.covariate.push_back(covariate_at(covariate, p));
  return e;
}

struct TruthSurfaces {
  std::vector<double> latent, logit;
};

inline TruthSurfaces truth_surfaces(const TruthSet& truth, const EvalGrid& grid, bool use_covariate) {
  const Vec s = grid.proj.a * truth.w;
  TruthSurfaces t;
  for (Eigen::Index k = 0; k < s.size(); ++k) {
    t.latent.push_back(s[k]);
    double eta = truth.beta0 + s[k];
    if (use_covariate) eta += truth.beta1 * grid.covariate[static_cast<std::size_t>(k)];
    t.logit.push_back(eta);
  }
  return t;
}

// Evenly spaced subset of at most `limit` pooled draws (all when limit == 0).
inline std::vector<Vec> thinned_thetas(const SampleStore& store, std::size_t limit) {
  auto all = store.pooled_thetas();
  if (limit == 0 || all.size() <= limit) return all;
  std::vector<Vec> out;
  out.reserve(limit);
  for (std::size_t k = 0; k < limit; ++k) out.push_back(all[k * all.size() / limit]);
  return out;
}

inline MseReport evaluate_mse(const std::vector<Vec>& thetas, std::size_t n_fixed, const EvalGrid& grid,
                              const TruthSurfaces& truth) {
  const std::size_t g = grid.cells.size();
  MseAccumulator lf(g), ef(g), lc(grid.coarse.blocks), ec(grid.coarse.blocks);
  const auto p = static_cast<Eigen::Index>(n_fixed);
  for (const auto& th : thetas) {
    const Vec s = grid.proj.a * th.tail(th.size() - p);
    Vec eta = s.array() + th[0];
    if (n_fixed > 1)
      for (Eigen::Index k = 0; k < eta.size(); ++k) eta[k] += th[1] * grid.covariate[static_cast<std::size_t>(k)];
    lf.add(s);
    ef.add(eta);
    lc.add(grid.coarse.apply(s));
    ec.add(grid.coarse.apply(eta));
  }
  return {mse(lf, truth.latent), mse(ef, truth.logit), mse(lc, grid.coarse.apply(truth.latent)),
          mse(ec, grid.coarse.apply(truth.logit))};
}

// Disclosure risk of one reported cluster.
struct DisclosureEntry {
  std::size_t cluster_id = 0;
  LocationKind kind = LocationKind::jittered;
  std::size_t candidates = 0;
  double top_probability = std::nan("");
  double ratio = std::nan("");  // top / second; infinite for point masses
  bool unique = false;
  bool p95 = false;
  bool ratio5 = false;
  bool ratio2 = false;
};

struct DisclosureReport {
  std::vector<DisclosureEntry> clusters;

  std::size_t unique_count() const { return count([](const auto& e) { return e.unique; }); }
  // Clusters with between 2 and 5 candidates.
  std::size_t at_most_5_count() const {
    return count([](const auto& e) { return e.candidates >= 2 && e.candidates <= 5; });
  }
  std::size_t p95_count() const { return count([](const auto& e) { return e.p95; }); }
  std::size_t ratio5_count() const { return count([](const auto& e) { return e.ratio5; }); }
  std::size_t ratio2_count() const { return count([](const auto& e) { return e.ratio2; }); }

private:
  template <class F>
  std::size_t count(F f) const {
    return static_cast<std::size_t>(std::count_if(clusters.begin(), clusters.end(), f));
  }
};

// Number of block EAs within the stratum's maximum displacement radius of u
// (jittered records) or the block size (masked records).
inline std::size_t candidate_count(const LocationRecord& r, const Masterframe& frame, const JitterScheme& scheme) {
  if (r.kind == LocationKind::masked) return frame.block_size(r.block);
  if (!r.point) throw InputError("candidate_count: jittered record without a point");
  const double radius = scheme.max_radius(r.block.stratum);
  std::size_t n = 0;
  for (auto id : frame.block(r.block))
    if (distance(*r.point, frame.ea(id).location) <= radius) ++n;
  return n;
}

// Flags from candidate counts and (optional) per-candidate posterior
// probabilities; records absent from `posteriors` get count-based flags only.
inline DisclosureReport disclosure_audit(const std::vector<LocationRecord>& records, const Masterframe& frame,
                                         const JitterScheme& scheme,
                                         const std::map<std::size_t, std::vector<double>>& posteriors) {
  DisclosureReport rep;
  for (const auto& r : records) {
    if (r.kind == LocationKind::exact) continue;
    DisclosureEntry e;
    e.cluster_id = r.cluster_id;
    e.kind = r.kind;
    e.candidates = candidate_count(r, frame, scheme);
    if (e.candidates == 1) {
      e.top_probability = 1.0;
      e.ratio = std::numeric_limits<double>::infinity();
    } else if (auto it = posteriors.find(r.cluster_id); it != posteriors.end()) {
      std::vector<double> p = it->second;
      std::sort(p.begin(), p.end(), std::greater<>());
      e.top_probability = p.empty() ? 0.0 : p[0];
      const double second = p.size() > 1 ? p[1] : 0.0;
      e.ratio = second > 0.0 ? p[0] / second : std::numeric_limits<double>::infinity();
    }
    e.unique = e.candidates == 1;
    e.p95 = e.top_probability > 0.95;
    e.ratio5 = e.ratio > 5.0;
    e.ratio2 = e.ratio > 2.0;
    rep.clusters.push_back(e);
  }
  return rep;
}

inline std::string format_disclosure(const DisclosureReport& rep) {
  std::ostringstream os;
  os << "cluster_id,kind,candidates,top_probability,ratio,unique,p_gt_0.95,ratio_gt_5,ratio_gt_2\n";
  for (const auto& e : rep.clusters)
    os << e.cluster_id << ',' << to_string(e.kind) << ',' << e.candidates << ',' << io::fmt(e.top_probability) << ','
       << io::fmt(e.ratio) << ',' << e.unique << ',' << e.p95 << ',' << e.ratio5 << ',' << e.ratio2 << '\n';
  return os.str();
}

inline std::string format_disclosure_summary(const DisclosureReport& rep) {
  std::ostringstream os;
  os << "measure,count\n"
     << "clusters," << rep.clusters.size() << '\n'
     << "unique," << rep.unique_count() << '\n'
     << "at_most_5_candidates," << rep.at_most_5_count() << '\n'
     << "posterior_gt_0.95," << rep.p95_count() << '\n'
     << "ratio_gt_5," << rep.ratio5_count() << '\n'
     << "ratio_gt_2," << rep.ratio2_count() << '\n';
  return os.str();
}

inline std::string format_mse(const std::string& scenario, const MseReport& m, bool header = true) {
  std::ostringstream os;
  if (header) os << "scenario,surface,resolution,mse,bias2,variance\n";
  auto row = [&](const char* surface, const char* res, const MseEntry& e) {
    os << scenario << ',' << surface << ',' << res << ',' << io::fmt(e.mse) << ',' << io::fmt(e.bias2) << ','
       << io::fmt(e.variance) << '\n';
  };
  row("latent", "fine", m.latent_fine);
  row("logit_p", "fine", m.logit_fine);
  row("latent", "coarse", m.latent_coarse);
  row("logit_p", "coarse", m.logit_coarse);
  return os.str();
}

// Everything a scenario fit needs besides the regime: inputs shared by all
// scenarios of one replicate.
struct Study {
  Geography geo;
  Masterframe frame;
  JitterScheme scheme;
  Raster covariate;
  Mesh mesh;
  FemMatrices fem;
  PriorSpec prior;
  EvalGrid eval;
  std::vector<SampledCluster> clusters;
  int trials = 25;
  std::optional<NormalizingTable> table;  // required by jittered-DA with area restriction
};

struct ScenarioResult {
  Scenario scenario;
  SampleStore store;
  Diagnostics diagnostics;
  std::vector<ParameterSummary> parameters;
  MseReport mse;
  std::vector<ReportedCluster> reported;
  DisclosureReport disclosure;
};

// Fits one scenario on a replicate: outcomes come from `truth` (covariate on
// or off as the scenario says), locations from the regime.
inline ScenarioResult run_scenario(const Study& study, const TruthSet& truth, const Scenario& scenario,
                                   const ChainConfig& chain, std::uint64_t seed, std::size_t prediction_draws = 1000) {
  ScenarioResult res;
  res.scenario = scenario;
  const ObservationSet obs = simulate_outcomes(truth, study.clusters, study.covariate, study.trials, scenario.covariate,
                                               study.mesh, stream_seed(seed, 0x7973ULL, scenario.covariate ? 1 : 0));
  res.reported = apply_regime(study.clusters, scenario.regime, study.geo, study.frame, study.scheme,
                              stream_seed(seed, 0x7265ULL));
  const NormalizingTable* table = study.table ? &*study.table : nullptr;
  auto data = cluster_data(res.reported, obs, scenario.regime, study.frame, study.scheme, table, study.covariate,
                           study.mesh);
  res.store = run(std::move(data), scenario.covariate, study.mesh, study.fem, study.prior, chain);
  res.diagnostics = diagnose(res.store);
  res.parameters = summarize_parameters(res.store);
  res.mse = evaluate_mse(thinned_thetas(res.store, prediction_draws), res.store.n_fixed, study.eval,
                         truth_surfaces(truth, study.eval, scenario.covariate));
  if (uses_augmentation(scenario.regime)) {
    std::map<std::size_t, std::vector<double>> post;
    for (std::size_t k = 0; k < res.store.clusters.size(); ++k)
      if (!res.store.clusters[k].ea_ids.empty()) post[res.store.clusters[k].cluster_id] = location_posterior(res.store, k);
    std::vector<LocationRecord> recs;
    for (const auto& r : res.reported) recs.push_back(r.record);
    res.disclosure = disclosure_audit(recs, study.frame, study.scheme, post);
  }
  return res;
}

// Runs several scenarios against one shared truth.
inline std::vector<ScenarioResult> run_scenarios(const Study& study, const TruthSet& truth,
                                                 const std::vector<Scenario>& scenarios, const ChainConfig& chain,
                                                 std::uint64_t seed, std::size_t prediction_draws = 1000) {
  std::vector<ScenarioResult> out;
  for (const auto& s : scenarios) out.push_back(run_scenario(study, truth, s, chain, seed, prediction_draws));
  return out;
}

}  // namespace geomask
