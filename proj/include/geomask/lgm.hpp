#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "error.hpp"
#include "field.hpp"
#include "frame.hpp"
#include "gmrf.hpp"
#include "io.hpp"
#include "raster.hpp"
#include "rng.hpp"

namespace geomask {

// Likelihood family. `gaussian` (identity link, known variance) exists as a
// test hook for which the Laplace approximation is exact.
enum class Family { binomial, gaussian };

struct Observation {
  double y = 0.0;  // successes (binomial) or response (gaussian)
  int n = 25;      // trials
  Point location;
  double covariate = 0.0;
  Stratum stratum = Stratum::urban;
};

struct ObservationSet {
  std::vector<Observation> obs;
  bool use_covariate = false;
  Family family = Family::binomial;
  double gaussian_variance = 1.0;

  std::size_t n_fixed() const { return use_covariate ? 2 : 1; }
  std::size_t size() const { return obs.size(); }

  void validate() const {
    for (std::size_t k = 0; k < obs.size(); ++k) {
      const auto& o = obs[k];
      if (family == Family::binomial) {
        if (o.n < 0 || o.y < 0 || o.y > o.n || o.y != std::floor(o.y))
          throw InputError("observation " + std::to_string(k) + ": need integer 0 <= y <= n");
      }
      if (!std::isfinite(o.y) || !std::isfinite(o.covariate))
        throw InputError("observation " + std::to_string(k) + ": non-finite value");
    }
    if (family == Family::gaussian && !(gaussian_variance > 0.0))
      throw InputError("gaussian hook needs a positive variance");
  }
};

inline double expit(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log(1 + exp(eta)) without overflow.
inline double log1pexp(double eta) {
  if (eta > 0.0) return eta + std::log1p(std::exp(-eta));
  return std::log1p(std::exp(eta));
}

inline double log_choose(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

inline double binomial_logpmf(double y, int n, double eta) {
  return log_choose(n, static_cast<int>(y)) + y * eta - n * log1pexp(eta);
}

// Per-observation log-likelihood, score and negative curvature in eta.
struct PointwiseLik {
  double value;
  double score;
  double curvature;
};

inline PointwiseLik pointwise_lik(const ObservationSet& set, const Observation& o, double eta) {
  if (set.family == Family::binomial) {
    const double p = expit(eta);
    return {binomial_logpmf(o.y, o.n, eta), o.y - o.n * p, o.n * p * (1.0 - p)};
  }
  const double v = set.gaussian_variance;
  const double r = o.y - eta;
  return {-0.5 * r * r / v - 0.5 * std::log(2.0 * std::numbers::pi * v), r / v, 1.0 / v};
}

// theta = [beta, w].
struct LatentState {
  Vec beta;
  Vec w;

  Vec theta() const {
    Vec t(beta.size() + w.size());
    t << beta, w;
    return t;
  }
  static LatentState from_theta(const Vec& theta, std::size_t n_fixed) {
    const auto p = static_cast<Eigen::Index>(n_fixed);
    return {theta.head(p), theta.tail(theta.size() - p)};
  }
};

// Sum of binomial log-pmfs with eta = beta0 + beta1 z + (A w)_row.
inline double log_likelihood(const ObservationSet& set, const LatentState& state, const Projector& proj) {
  if (proj.a.rows() != static_cast<Eigen::Index>(set.size()) || proj.a.cols() != state.w.size())
    throw InputError("log_likelihood: projector shape does not match observations / weights");
  if (state.beta.size() != static_cast<Eigen::Index>(set.n_fixed()))
    throw InputError("log_likelihood: fixed-effect vector has the wrong length");
  const Vec field = proj.a * state.w;
  double total = 0.0;
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto& o = set.obs[k];
    double eta = state.beta[0] + field[static_cast<Eigen::Index>(k)];
    if (set.use_covariate) eta += state.beta[1] * o.covariate;
    total += pointwise_lik(set, o, eta).value;
  }
  return total;
}

// Priors: beta ~ N(0, beta_variance I); phi_k ~ N(phi_mean_k, phi_sd_k^2).
struct PriorSpec {
  double beta_variance = 100.0;
  MaternParams phi_mean{};
  std::array<double, 2> phi_sd{1.5, 1.5};

  // Prior mean at marginal variance 1 and practical range 20% of the domain.
  static PriorSpec for_domain(double domain_size) {
    PriorSpec p;
    p.phi_mean = {0.0, std::log(kappa_for_range(0.2 * domain_size))};
    return p;
  }

  void validate() const {
    if (!(beta_variance > 0.0) || !(phi_sd[0] > 0.0) || !(phi_sd[1] > 0.0))
      throw InputError("prior variances must be positive");
    phi_mean.validate();
  }

  double log_density(const MaternParams& phi) const {
    const double z1 = (phi.log_sd - phi_mean.log_sd) / phi_sd[0];
    const double z2 = (phi.log_kappa - phi_mean.log_kappa) / phi_sd[1];
    return -0.5 * (z1 * z1 + z2 * z2) - std::log(phi_sd[0]) - std::log(phi_sd[1]) - std::log(2.0 * std::numbers::pi);
  }
};

struct LaplaceOptions {
  double tolerance = 1e-8;  // max-norm of the gradient
  int max_iterations = 50;
};

// Gaussian approximation of theta | phi, y, s at its mode.
struct LaplaceFit {
  MaternParams phi;
  Vec mode;
  CholeskySnapshot factor;  // posterior precision at the mode (when kept)
  double log_marginal = 0.0;
  double log_likelihood = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
};

// Newton-Raphson fits of the conditional latent Gaussian model for fixed
// cluster locations. The posterior precision keeps a fixed sparsity pattern
// (Q's pattern plus dense fixed-effect rows) so the symbolic Cholesky is
// computed once per mesh.
class LaplaceEngine {
public:
  LaplaceEngine(const Mesh& mesh, SpdeOperator op, PriorSpec prior, bool spatial = true)
      : mesh_(&mesh), op_(std::move(op)), prior_(prior), spatial_(spatial) {
    prior_.validate();
    m_ = spatial_ ? static_cast<std::size_t>(op_.size()) : 0;
  }

  std::size_t n_fixed() const { return p_; }
  std::size_t dim() const { return p_ + m_; }
  std::size_t mesh_size() const { return m_; }
  bool spatial() const { return spatial_; }
  const PriorSpec& prior() const { return prior_; }
  const ObservationSet& observations() const { return obs_; }

  void set_observations(const ObservationSet& obs) {
    std::vector<MeshLocation> locs;
    if (spatial_) {
      locs.reserve(obs.size());
      for (const auto& o : obs.obs) locs.push_back(locate_or_throw(*mesh_, o.location));
    }
    set_observations(obs, locs);
  }

  // Variant taking precomputed mesh locations (one per observation).
  void set_observations(const ObservationSet& obs, const std::vector<MeshLocation>& locs) {
    obs.validate();
    if (spatial_ && locs.size() != obs.size()) throw InputError("mesh locations do not match observations");
    const std::size_t p = obs.n_fixed();
    if (p != p_) {
      p_ = p;
      pattern_ready_ = false;
    }
    obs_ = obs;
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(obs.size() * (p_ + 3));
    for (std::size_t r = 0; r < obs.size(); ++r) {
      const int row = static_cast<int>(r);
      trips.emplace_back(row, 0, 1.0);
      if (obs.use_covariate) trips.emplace_back(row, 1, obs.obs[r].covariate);
      if (spatial_)
        for (int k = 0; k < 3; ++k)
          if (locs[r].weights[k] != 0.0)
            trips.emplace_back(row, static_cast<int>(p_) + locs[r].nodes[k], locs[r].weights[k]);
    }
    b_.resize(static_cast<Eigen::Index>(obs.size()), static_cast<Eigen::Index>(dim()));
    b_.setFromTriplets(trips.begin(), trips.end());
    bt_ = b_.transpose();
    if (!pattern_ready_) build_pattern();
  }

  // Sets phi-dependent prior precision; returns false when Q is not SPD.
  void set_phi(const MaternParams& phi) {
    phi.validate();
    if (!pattern_ready_) build_pattern();
    if (phi_set_ && phi == phi_) return;
    phi_ = phi;
    const double beta_prec = 1.0 / prior_.beta_variance;
    const double* qv = nullptr;
    if (spatial_) {
      const SpMat& q = op_.assemble(phi);
      if (!qfactor_.factorize(q))
        throw NumericalError("precision: Cholesky failed for log_sd=" + io::fmt(phi.log_sd) +
                             ", log_kappa=" + io::fmt(phi.log_kappa));
      qv = q.valuePtr();
      log_det_prior_ = qfactor_.log_det();
    } else {
      log_det_prior_ = 0.0;
    }
    log_det_prior_ += static_cast<double>(p_) * std::log(beta_prec);
    double* pv = pmat_.valuePtr();
    for (std::size_t k = 0; k < source_.size(); ++k) {
      const int s = source_[k];
      pv[k] = s >= 0 ? qv[s] : (s == kBetaDiag ? beta_prec : 0.0);
    }
    phi_set_ = true;
  }

  // Log posterior of theta up to the phi-independent constant:
  // l(B theta) - theta' P theta / 2.
  double objective(const Vec& theta) const {
    const Vec eta = b_ * theta;
    double total = 0.0;
    for (std::size_t r = 0; r < obs_.size(); ++r)
      total += pointwise_lik(obs_, obs_.obs[r], eta[static_cast<Eigen::Index>(r)]).value;
    return total - 0.5 * theta.dot(pmat_.selfadjointView<Eigen::Lower>() * theta);
  }

  Vec gradient(const Vec& theta) const {
    const Vec eta = b_ * theta;
    Vec score(eta.size());
    for (std::size_t r = 0; r < obs_.size(); ++r)
      score[static_cast<Eigen::Index>(r)] = pointwise_lik(obs_, obs_.obs[r], eta[static_cast<Eigen::Index>(r)]).score;
    return bt_ * score - pmat_ * theta;
  }

  // Negative Hessian P + B' D B (full symmetric storage).
  SpMat neg_hessian(const Vec& theta) const {
    const Vec eta = b_ * theta;
    Vec curv(eta.size());
    for (std::size_t r = 0; r < obs_.size(); ++r)
      curv[static_cast<Eigen::Index>(r)] =
          pointwise_lik(obs_, obs_.obs[r], eta[static_cast<Eigen::Index>(r)]).curvature;
    SpMat bd = curv.asDiagonal() * b_;
    SpMat btdb = bt_ * bd;
    SpMat h = pmat_ + btdb;
    return h;
  }

  LaplaceFit fit(const MaternParams& phi, const Vec* start = nullptr, bool keep_factor = true,
                 const LaplaceOptions& options = {}) {
    set_phi(phi);
    Vec theta = Vec::Zero(static_cast<Eigen::Index>(dim()));
    if (start && start->size() == theta.size()) theta = *start;
    else if (last_mode_.size() == theta.size()) theta = last_mode_;

    double f = objective(theta);
    if (!std::isfinite(f)) {
      theta.setZero();
      f = objective(theta);
    }
    LaplaceFit out;
    out.phi = phi;
    int it = 0;
    double gnorm = 0.0;
    for (;; ++it) {
      const Vec g = gradient(theta);
      gnorm = g.lpNorm<Eigen::Infinity>();
      const SpMat h = neg_hessian(theta);
      if (!hfactor_.factorize(h))
        throw NumericalError("laplace: posterior precision not positive definite (log_sd=" + io::fmt(phi.log_sd) +
                             ", log_kappa=" + io::fmt(phi.log_kappa) + ")");
      if (gnorm < options.tolerance || it >= options.max_iterations) break;
      const Vec step = hfactor_.solve(g);
      double t = 1.0;
      bool accepted = false;
      for (int halving = 0; halving < 40; ++halving, t *= 0.5) {
        const Vec cand = theta + t * step;
        const double fc = objective(cand);
        if (std::isfinite(fc) && fc >= f - 1e-12 * std::max(1.0, std::abs(f))) {
          theta = cand;
          f = fc;
          accepted = true;
          break;
        }
      }
      if (!accepted) {
        if (gnorm > 1e-4)
          throw NumericalError("laplace: Newton iteration failed to improve (gradient " + io::fmt(gnorm) + ")");
        break;
      }
    }
    const Vec eta = b_ * theta;
    double loglik = 0.0;
    for (std::size_t r = 0; r < obs_.size(); ++r)
      loglik += pointwise_lik(obs_, obs_.obs[r], eta[static_cast<Eigen::Index>(r)]).value;
    out.mode = theta;
    out.iterations = it;
    out.gradient_norm = gnorm;
    out.log_likelihood = loglik;
    out.log_marginal = f + 0.5 * log_det_prior_ - 0.5 * hfactor_.log_det();
    if (keep_factor) out.factor = hfactor_.snapshot();
    last_mode_ = theta;
    return out;
  }

  void reset_start() { last_mode_.resize(0); }

private:
  static constexpr int kBetaDiag = -1;
  static constexpr int kZero = -2;

  // Pattern of the prior precision P: dense fixed-effect block and
  // fixed-effect/field coupling, plus Q's pattern. Posterior precisions
  // P + B'DB never leave this pattern.
  void build_pattern() {
    const auto p = static_cast<int>(p_);
    const auto d = static_cast<Eigen::Index>(dim());
    std::vector<Eigen::Triplet<double>> trips;
    for (int a = 0; a < p; ++a)
      for (int b = 0; b < static_cast<int>(d); ++b) {
        const double tag = (a == b) ? kBetaDiag : kZero;
        trips.emplace_back(a, b, tag);
        if (b >= p) trips.emplace_back(b, a, tag);
      }
    if (spatial_) {
      const SpMat& q = op_.pattern();
      for (Eigen::Index col = 0; col < q.outerSize(); ++col)
        for (Eigen::Index k = q.outerIndexPtr()[col]; k < q.outerIndexPtr()[col + 1]; ++k)
          trips.emplace_back(p + q.innerIndexPtr()[k], p + static_cast<int>(col), static_cast<double>(k));
    }
    pmat_.resize(d, d);
    pmat_.setFromTriplets(trips.begin(), trips.end());
    pmat_.makeCompressed();
    source_.resize(static_cast<std::size_t>(pmat_.nonZeros()));
    for (Eigen::Index k = 0; k < pmat_.nonZeros(); ++k) source_[static_cast<std::size_t>(k)] = static_cast<int>(pmat_.valuePtr()[k]);
    pattern_ready_ = true;
    phi_set_ = false;
    last_mode_.resize(0);
  }

  const Mesh* mesh_;
  SpdeOperator op_;
  PriorSpec prior_;
  bool spatial_;
  std::size_t m_ = 0;
  std::size_t p_ = 1;
  ObservationSet obs_;
  SpMatRow b_;
  SpMat bt_;
  SpMat pmat_;
  std::vector<int> source_;
  bool pattern_ready_ = false;
  bool phi_set_ = false;
  MaternParams phi_;
  double log_det_prior_ = 0.0;
  SparseFactor qfactor_;
  SparseFactor hfactor_;
  Vec last_mode_;
};

// One-shot Laplace fit.
inline LaplaceFit laplace_mode(const ObservationSet& obs, const MaternParams& phi, const PriorSpec& prior,
                               const Mesh& mesh, const FemMatrices& fem, bool spatial = true) {
  LaplaceEngine engine(mesh, SpdeOperator(fem), prior, spatial);
  engine.set_observations(obs);
  return engine.fit(phi);
}

struct GridOptions {
  int steps = 5;       // grid points per dimension
  double span = 2.5;   // half-width in posterior standard deviations
  double gradient_step = 1e-3;
  double hessian_step = 0.02;
  int max_iterations = 100;
  double gradient_tolerance = 1e-5;

  void validate() const {
    if (steps < 1 || !(span >= 0.0)) throw InputError("grid: steps must be >= 1 and span >= 0");
  }
};

struct GridPoint {
  MaternParams phi;
  double log_posterior = 0.0;  // Laplace log marginal + log prior
  double weight = 0.0;
  Vec mode;
  CholeskySnapshot factor;
};

// Mixture-of-Gaussians approximation of p(theta, phi | y, s): one Gaussian
// per hyperparameter grid point, mixed by the normalized grid weights.
struct HyperGrid {
  std::vector<GridPoint> points;
  MaternParams center;
  Eigen::Matrix2d covariance = Eigen::Matrix2d::Identity();
  bool fallback = false;
  std::vector<std::string> warnings;
  int evaluations = 0;
  std::size_t n_fixed = 1;

  std::array<double, 2> phi_mean() const {
    std::array<double, 2> m{0.0, 0.0};
    for (const auto& p : points) {
      m[0] += p.weight * p.phi.log_sd;
      m[1] += p.weight * p.phi.log_kappa;
    }
    return m;
  }

  Vec theta_mean() const {
    Vec m = Vec::Zero(points.front().mode.size());
    for (const auto& p : points) m += p.weight * p.mode;
    return m;
  }
};

namespace detail {

inline std::array<double, 2> to_array(const MaternParams& p) { return {p.log_sd, p.log_kappa}; }
inline MaternParams to_params(const Eigen::Vector2d& v) { return {v[0], v[1]}; }

}  // namespace detail

// Builds the hyperparameter grid: phi-hat maximizes the Laplace log marginal
// plus log prior (BFGS, finite-difference gradients); the grid spans
// +-span standard deviations along the eigenvectors of the inverse Hessian at
// phi-hat; each point is weighted by exp(log marginal + log prior).
inline HyperGrid build_grid(LaplaceEngine& engine, const GridOptions& options = {}, const HyperGrid* previous = nullptr) {
  options.validate();
  HyperGrid grid;
  grid.n_fixed = engine.n_fixed();
  const PriorSpec& prior = engine.prior();
  auto neg_post = [&](const Eigen::Vector2d& x) {
    ++grid.evaluations;
    const MaternParams phi = detail::to_params(x);
    try {
      const auto fit = engine.fit(phi, nullptr, false);
      return -(fit.log_marginal + prior.log_density(phi));
    } catch (const NumericalError&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  auto grad = [&](const Eigen::Vector2d& x) {
    Eigen::Vector2d g;
    const double h = options.gradient_step;
    for (int k = 0; k < 2; ++k) {
      Eigen::Vector2d a = x, b = x;
      a[k] += h;
      b[k] -= h;
      g[k] = (neg_post(a) - neg_post(b)) / (2.0 * h);
    }
    return g;
  };

  Eigen::Vector2d x(prior.phi_mean.log_sd, prior.phi_mean.log_kappa);
  Eigen::Matrix2d hinv = Eigen::Vector2d(prior.phi_sd[0] * prior.phi_sd[0], prior.phi_sd[1] * prior.phi_sd[1]).asDiagonal();
  if (previous && !previous->points.empty()) {
    x = Eigen::Vector2d(previous->center.log_sd, previous->center.log_kappa);
    hinv = previous->covariance;
  }
  bool ok = true;
  double fx = neg_post(x);
  if (!std::isfinite(fx)) {
    x = Eigen::Vector2d(prior.phi_mean.log_sd, prior.phi_mean.log_kappa);
    fx = neg_post(x);
    ok = std::isfinite(fx);
  }
  Eigen::Vector2d g = ok ? grad(x) : Eigen::Vector2d::Zero();
  for (int it = 0; ok && it < options.max_iterations; ++it) {
    if (!g.allFinite()) {
      ok = false;
      break;
    }
    if (g.lpNorm<Eigen::Infinity>() < options.gradient_tolerance) break;
    Eigen::Vector2d dir = -hinv * g;
    if (dir.dot(g) >= 0.0) {
      hinv = Eigen::Matrix2d::Identity();
      dir = -g;
    }
    const double len = dir.norm();
    if (len > 1.0) dir *= 1.0 / len;
    double t = 1.0;
    bool moved = false;
    Eigen::Vector2d xn;
    double fn = 0.0;
    for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
      xn = x + t * dir;
      fn = neg_post(xn);
      if (std::isfinite(fn) && fn <= fx + 1e-4 * t * g.dot(dir)) {
        moved = true;
        break;
      }
    }
    if (!moved) break;
    const Eigen::Vector2d gn = grad(xn);
    const Eigen::Vector2d s = xn - x;
    const Eigen::Vector2d y = gn - g;
    const double sy = s.dot(y);
    if (sy > 1e-12) {
      const double rho = 1.0 / sy;
      const Eigen::Matrix2d i2 = Eigen::Matrix2d::Identity();
      hinv = (i2 - rho * s * y.transpose()) * hinv * (i2 - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    x = xn;
    fx = fn;
    g = gn;
  }

  Eigen::Matrix2d cov;
  if (ok) {
    // Hessian of -log posterior by central differences.
    const double h = options.hessian_step;
    Eigen::Matrix2d hess;
    const double f0 = fx;
    for (int a = 0; a < 2; ++a) {
      Eigen::Vector2d xp = x, xm = x;
      xp[a] += h;
      xm[a] -= h;
      hess(a, a) = (neg_post(xp) - 2.0 * f0 + neg_post(xm)) / (h * h);
    }
    {
      Eigen::Vector2d pp = x, pm = x, mp = x, mm = x;
      pp += Eigen::Vector2d(h, h);
      pm += Eigen::Vector2d(h, -h);
      mp += Eigen::Vector2d(-h, h);
      mm += Eigen::Vector2d(-h, -h);
      hess(0, 1) = hess(1, 0) = (neg_post(pp) - neg_post(pm) - neg_post(mp) + neg_post(mm)) / (4.0 * h * h);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(hess);
    if (hess.allFinite() && es.eigenvalues().minCoeff() > 0.0) {
      cov = hess.inverse();
    } else {
      ok = false;
    }
  }
  if (!ok) {
    grid.fallback = true;
    grid.warnings.push_back("hyperparameter optimization failed; using prior-centred grid");
    x = Eigen::Vector2d(prior.phi_mean.log_sd, prior.phi_mean.log_kappa);
    cov = Eigen::Vector2d(prior.phi_sd[0] * prior.phi_sd[0], prior.phi_sd[1] * prior.phi_sd[1]).asDiagonal();
  }
  grid.center = detail::to_params(x);
  grid.covariance = cov;

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
  const Eigen::Matrix2d root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  std::vector<double> zs;
  if (options.steps == 1) zs.push_back(0.0);
  else
    for (int k = 0; k < options.steps; ++k)
      zs.push_back(-options.span + 2.0 * options.span * k / (options.steps - 1));

  Vec center_mode;
  {
    const auto fit = engine.fit(grid.center, nullptr, false);
    center_mode = fit.mode;
  }
  for (double z1 : zs) {
    for (double z2 : zs) {
      const Eigen::Vector2d phi_v = x + root * Eigen::Vector2d(z1, z2);
      const MaternParams phi = detail::to_params(phi_v);
      GridPoint gp;
      gp.phi = phi;
      try {
        auto fit = engine.fit(phi, &center_mode, true);
        ++grid.evaluations;
        gp.log_posterior = fit.log_marginal + prior.log_density(phi);
        gp.mode = std::move(fit.mode);
        gp.factor = std::move(fit.factor);
      } catch (const NumericalError& e) {
        grid.warnings.push_back(std::string("grid point dropped: ") + e.what());
        continue;
      }
      grid.points.push_back(std::move(gp));
    }
  }
  if (grid.points.empty()) throw NumericalError("grid: every hyperparameter grid point failed");
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& p : grid.points) mx = std::max(mx, p.log_posterior);
  double total = 0.0;
  for (auto& p : grid.points) total += (p.weight = std::exp(p.log_posterior - mx));
  for (auto& p : grid.points) p.weight /= total;
  return grid;
}

struct JointDraw {
  std::size_t grid_index = 0;
  MaternParams phi;
  Vec theta;
};

inline std::size_t sample_index(const std::vector<double>& weights, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    cum += weights[k];
    if (u < cum) return k;
  }
  for (std::size_t k = weights.size(); k-- > 0;)
    if (weights[k] > 0.0) return k;
  return weights.size() - 1;
}

// Grid point by weight, then theta from that point's Gaussian; phi stays on
// the grid.
inline JointDraw sample_joint(const HyperGrid& grid, Rng& rng) {
  std::vector<double> w;
  w.reserve(grid.points.size());
  for (const auto& p : grid.points) w.push_back(p.weight);
  JointDraw d;
  d.grid_index = sample_index(w, rng);
  const auto& gp = grid.points[d.grid_index];
  d.phi = gp.phi;
  d.theta = gp.mode + gp.factor.sample(rng);
  return d;
}

inline JointDraw sample_joint(const HyperGrid& grid, std::uint64_t seed) {
  Rng rng(seed);
  return sample_joint(grid, rng);
}

// Cells of a regular grid that fall inside the geography, with their centres.
struct PredictionGrid {
  GridSpec grid;
  std::vector<std::size_t> cells;
  std::vector<Point> points;

  std::size_t size() const { return cells.size(); }
};

inline PredictionGrid make_prediction_grid(const GridSpec& spec, const Geography& geo) {
  PredictionGrid pg;
  pg.grid = spec;
  for (std::size_t c = 0; c < spec.size(); ++c) {
    const Point p = spec.cell_center(c);
    if (geo.locate(p)) {
      pg.cells.push_back(c);
      pg.points.push_back(p);
    }
  }
  return pg;
}

// Cell-wise posterior summaries of one surface.
struct SurfaceSummary {
  std::vector<double> median, lower, upper, mean, variance;
};

// Per-draw surfaces on the prediction cells: rows are cells, columns draws.
struct SurfaceDraws {
  Eigen::MatrixXd eta;     // logit p = beta0 + beta1 z + S~
  Eigen::MatrixXd latent;  // S~ = A w
};

inline SurfaceDraws surface_draws(const std::vector<Vec>& thetas, std::size_t n_fixed, const Projector& proj,
                                  const std::vector<double>* covariate) {
  const auto g = proj.a.rows();
  const auto d = static_cast<Eigen::Index>(thetas.size());
  if (n_fixed > 1 && (!covariate || covariate->size() != static_cast<std::size_t>(g)))
    throw InputError("predict_surface: covariate values missing for prediction cells");
  if (covariate)
    for (std::size_t k = 0; k < covariate->size(); ++k)
      if (!std::isfinite((*covariate)[k])) throw InputError("predict_surface: covariate missing at cell " + std::to_string(k));
  SurfaceDraws out{Eigen::MatrixXd(g, d), Eigen::MatrixXd(g, d)};
  const auto p = static_cast<Eigen::Index>(n_fixed);
  for (Eigen::Index k = 0; k < d; ++k) {
    const Vec& th = thetas[static_cast<std::size_t>(k)];
    if (th.size() != p + proj.a.cols()) throw InputError("predict_surface: draw length does not match mesh");
    const Vec s = proj.a * th.tail(proj.a.cols());
    out.latent.col(k) = s;
    for (Eigen::Index c = 0; c < g; ++c) {
      double eta = th[0] + s[c];
      if (n_fixed > 1) eta += th[1] * (*covariate)[static_cast<std::size_t>(c)];
      out.eta(c, k) = eta;
    }
  }
  return out;
}

// Type-7 sample quantile of a sorted range.
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return std::nan("");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

template <class Transform>
SurfaceSummary summarize_draws(const Eigen::MatrixXd& draws, Transform transform) {
  SurfaceSummary s;
  const auto g = draws.rows();
  const auto d = draws.cols();
  std::vector<double> buf(static_cast<std::size_t>(d));
  for (Eigen::Index c = 0; c < g; ++c) {
    double sum = 0.0;
    for (Eigen::Index k = 0; k < d; ++k) sum += (buf[static_cast<std::size_t>(k)] = transform(draws(c, k)));
    const double mean = sum / static_cast<double>(d);
    double ss = 0.0;
    for (double v : buf) ss += (v - mean) * (v - mean);
    std::sort(buf.begin(), buf.end());
    s.mean.push_back(mean);
    s.variance.push_back(ss / static_cast<double>(d));
    s.median.push_back(sorted_quantile(buf, 0.5));
    s.lower.push_back(sorted_quantile(buf, 0.025));
    s.upper.push_back(sorted_quantile(buf, 0.975));
  }
  return s;
}

struct PredictedSurface {
  SurfaceSummary probability;  // expit(eta)
  SurfaceSummary logit;        // eta
  SurfaceSummary latent;       // S~
};

inline PredictedSurface predict_surface(const std::vector<Vec>& thetas, std::size_t n_fixed, const Projector& proj,
                                        const std::vector<double>* covariate) {
  if (thetas.empty()) throw InputError("predict_surface: no posterior draws");
  const auto draws = surface_draws(thetas, n_fixed, proj, covariate);
  PredictedSurface out;
  out.probability = summarize_draws(draws.eta, [](double e) { return expit(e); });
  out.logit = summarize_draws(draws.eta, [](double e) { return e; });
  out.latent = summarize_draws(draws.latent, [](double e) { return e; });
  return out;
}

// Surfaces from `count` joint draws of a grid mixture.
inline PredictedSurface predict_surface(const HyperGrid& grid, std::size_t count, const Projector& proj,
                                        const std::vector<double>* covariate, Rng& rng) {
  std::vector<Vec> thetas;
  thetas.reserve(count);
  for (std::size_t k = 0; k < count; ++k) thetas.push_back(sample_joint(grid, rng).theta);
  return predict_surface(thetas, grid.n_fixed, proj, covariate);
}

// Block means of a fine grid: each coarse cell averages the `factor` x
// `factor` fine cells it covers (NaN cells skipped; all-NaN blocks give NaN).
inline Raster aggregate_blocks(const Raster& fine, std::size_t factor) {
  if (factor == 0) throw InputError("aggregation factor must be positive");
  GridSpec g;
  g.cell_size = fine.grid.cell_size * static_cast<double>(factor);
  g.ncols = (fine.grid.ncols + factor - 1) / factor;
  g.nrows = (fine.grid.nrows + factor - 1) / factor;
  // Anchor blocks at the north-west corner so rows align with the fine grid.
  const double top = fine.grid.origin.y + fine.grid.cell_size * static_cast<double>(fine.grid.nrows);
  g.origin = {fine.grid.origin.x, top - g.cell_size * static_cast<double>(g.nrows)};
  std::vector<double> sum(g.size(), 0.0);
  std::vector<std::size_t> cnt(g.size(), 0);
  for (std::size_t r = 0; r < fine.grid.nrows; ++r)
    for (std::size_t c = 0; c < fine.grid.ncols; ++c) {
      const double v = fine.at(r, c);
      if (std::isnan(v)) continue;
      const std::size_t k = (r / factor) * g.ncols + c / factor;
      sum[k] += v;
      ++cnt[k];
    }
  std::vector<double> vals(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) vals[k] = cnt[k] ? sum[k] / static_cast<double>(cnt[k]) : std::nan("");
  return Raster(g, std::move(vals));
}

// Scatter per-cell values back onto the full grid (NaN elsewhere).
inline Raster to_raster(const PredictionGrid& pg, const std::vector<double>& values) {
  std::vector<double> full(pg.grid.size(), std::nan(""));
  for (std::size_t k = 0; k < pg.cells.size(); ++k) full[pg.cells[k]] = values[k];
  return Raster(pg.grid, std::move(full));
}

}  // namespace geomask
