#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chain.hpp"
#include "displace.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "frame.hpp"
#include "io.hpp"
#include "lgm.hpp"

namespace geomask {

// Sectioned key = value text:
//   [section]
//   key = value   # comment
class Config {
public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  static Config parse(const std::string& text, std::string origin = "config",
                      std::filesystem::path base = std::filesystem::path()) {
    Config c;
    c.origin_ = std::move(origin);
    c.base_ = std::move(base);
    std::string section;
    int lineno = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto end = text.find('\n', pos);
      std::string line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
      pos = end == std::string::npos ? text.size() + 1 : end + 1;
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const std::string t = io::trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']' || t.size() < 3) throw c.error_at(lineno, "malformed section header '" + t + "'");
        section = io::trim(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw c.error_at(lineno, "expected 'key = value', got '" + t + "'");
      const std::string key = io::trim(t.substr(0, eq));
      if (key.empty()) throw c.error_at(lineno, "empty key");
      if (section.empty()) throw c.error_at(lineno, "key '" + key + "' appears before any [section]");
      auto& sec = c.sections_[section];
      if (sec.count(key)) throw c.error_at(lineno, "duplicate key [" + section + "] " + key);
      sec[key] = {io::trim(t.substr(eq + 1)), lineno};
    }
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    std::string text;
    try {
      text = io::read_file(path.string());
    } catch (const Error& e) {
      throw InputError(std::string("cannot read config: ") + e.what());
    }
    return parse(text, path.string(), path.parent_path());
  }

  bool has(const std::string& section, const std::string& key) const { return find(section, key) != nullptr; }
  bool has_section(const std::string& section) const { return sections_.count(section) > 0; }

  const std::map<std::string, Entry>& section(const std::string& name) const {
    static const std::map<std::string, Entry> empty;
    auto it = sections_.find(name);
    return it == sections_.end() ? empty : it->second;
  }

  const Entry& require(const std::string& section, const std::string& key) const {
    if (auto e = find(section, key)) return *e;
    throw InputError(origin_ + ": missing required field [" + section + "] " + key);
  }

  std::string string(const std::string& section, const std::string& key, const std::string& def) const {
    auto e = find(section, key);
    return e ? e->value : def;
  }
  std::string string(const std::string& section, const std::string& key) const { return require(section, key).value; }

  double number(const std::string& section, const std::string& key, double def) const {
    auto e = find(section, key);
    return e ? to_double(section, key, *e, e->value) : def;
  }
  double number(const std::string& section, const std::string& key) const {
    const auto& e = require(section, key);
    return to_double(section, key, e, e.value);
  }

  long long integer(const std::string& section, const std::string& key, long long def) const {
    auto e = find(section, key);
    return e ? to_int(section, key, *e) : def;
  }

  bool boolean(const std::string& section, const std::string& key, bool def) const {
    auto e = find(section, key);
    if (!e) return def;
    if (e->value == "true" || e->value == "yes" || e->value == "1") return true;
    if (e->value == "false" || e->value == "no" || e->value == "0") return false;
    throw error_at(e->line, "[" + section + "] " + key + ": expected true or false, got '" + e->value + "'");
  }

  std::vector<double> numbers(const std::string& section, const std::string& key, std::vector<double> def) const {
    auto e = find(section, key);
    if (!e) return def;
    std::vector<double> out;
    for (const auto& tok : io::split_ws(e->value)) out.push_back(to_double(section, key, *e, tok));
    return out;
  }

  std::vector<std::string> words(const std::string& section, const std::string& key,
                                 std::vector<std::string> def) const {
    auto e = find(section, key);
    return e ? io::split_ws(e->value) : def;
  }

  // Path resolved against the config file's directory; must exist.
  std::filesystem::path existing_path(const std::string& section, const std::string& key) const {
    const auto& e = require(section, key);
    std::filesystem::path p(e.value);
    if (p.is_relative()) p = base_ / p;
    if (!std::filesystem::exists(p))
      throw error_at(e.line, "[" + section + "] " + key + ": file not found: " + p.string());
    return p;
  }

  InputError error_at(int line, const std::string& msg) const {
    return InputError(origin_ + ":" + std::to_string(line) + ": " + msg);
  }

  const std::string& origin() const { return origin_; }

private:
  const Entry* find(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return nullptr;
    auto k = s->second.find(key);
    return k == s->second.end() ? nullptr : &k->second;
  }

  double to_double(const std::string& section, const std::string& key, const Entry& e, const std::string& tok) const {
    try {
      return io::parse_double(tok, key);
    } catch (const InputError&) {
      throw error_at(e.line, "[" + section + "] " + key + ": expected a number, got '" + tok + "'");
    }
  }
  long long to_int(const std::string& section, const std::string& key, const Entry& e) const {
    try {
      return io::parse_int(e.value, key);
    } catch (const InputError&) {
      throw error_at(e.line, "[" + section + "] " + key + ": expected an integer, got '" + e.value + "'");
    }
  }

  std::string origin_;
  std::filesystem::path base_;
  std::map<std::string, std::map<std::string, Entry>> sections_;
};

// Validated run configuration.
struct RunConfig {
  std::filesystem::path geography, density, covariate;
  double urban_fraction = 0.3;
  std::map<BlockKey, std::size_t> ea_counts;
  SampleDesign design;
  Selection weights = Selection::uniform;
  JitterScheme scheme;
  std::size_t normalizer_draws = 1000;
  double mesh_spacing = 0.0;    // 0: a tenth of the domain
  double mesh_extension = -1.0; // negative: two prior-mean practical ranges
  PriorSpec prior;
  double domain = 0.0;          // 0: larger side of the geography's bounding box
  bool phi_mean_set = false;
  double truth_beta0 = -1.5, truth_beta1 = 0.15;
  MaternParams truth_phi{};
  ChainConfig chain;
  bool wide_samples = true;
  std::vector<std::string> scenarios;
  double prediction_cell = 1.0;
  std::size_t aggregate = 5;
  std::size_t prediction_draws = 1000;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

namespace detail {

inline std::map<BlockKey, std::size_t> block_table(const Config& c, const std::string& section) {
  std::map<BlockKey, std::size_t> out;
  for (const auto& [key, e] : c.section(section)) {
    const auto dot = key.find('.');
    if (dot == std::string::npos)
      throw c.error_at(e.line, "[" + section + "] " + key + ": expected '<area>.<urban|rural>'");
    BlockKey b;
    try {
      b.area = static_cast<int>(io::parse_int(key.substr(0, dot), "area"));
      b.stratum = parse_stratum(key.substr(dot + 1));
    } catch (const InputError&) {
      throw c.error_at(e.line, "[" + section + "] " + key + ": expected '<area>.<urban|rural>'");
    }
    const long long v = c.integer(section, key, 0);
    if (v < 0) throw c.error_at(e.line, "[" + section + "] " + key + ": count must be non-negative");
    out[b] = static_cast<std::size_t>(v);
  }
  return out;
}

}  // namespace detail

inline RunConfig load_run_config(const Config& c) {
  RunConfig r;
  r.geography = c.existing_path("paths", "geography");
  r.density = c.existing_path("paths", "density");
  r.covariate = c.existing_path("paths", "covariate");

  r.urban_fraction = c.number("frame", "urban_fraction", 0.3);
  r.ea_counts = detail::block_table(c, "frame.ea_counts");
  r.design.clusters = detail::block_table(c, "frame.clusters");
  if (r.ea_counts.empty()) throw InputError(c.origin() + ": missing required section [frame.ea_counts]");
  if (r.design.clusters.empty()) throw InputError(c.origin() + ": missing required section [frame.clusters]");
  r.design.trials = static_cast<int>(c.integer("frame", "trials", 25));
  auto sel = [&](const char* key) {
    try {
      return parse_selection(c.string("frame", key, "uniform"));
    } catch (const InputError& e) {
      throw c.error_at(c.require("frame", key).line, e.what());
    }
  };
  r.design.selection = sel("selection");
  r.weights = sel("weights");

  r.scheme.urban_radius = c.number("scheme", "urban_radius", 2.0);
  r.scheme.rural_radii = c.numbers("scheme", "rural_radii", {5.0, 10.0});
  r.scheme.rural_probs = c.numbers("scheme", "rural_probs", {0.99, 0.01});
  r.scheme.restrict_to_area = c.boolean("scheme", "restrict_to_area", true);
  r.scheme.validate();
  r.normalizer_draws = static_cast<std::size_t>(c.integer("scheme", "normalizer_draws", 1000));
  if (r.normalizer_draws < 1) throw InputError(c.origin() + ": [scheme] normalizer_draws must be >= 1");

  r.mesh_spacing = c.number("mesh", "spacing", 0.0);
  r.mesh_extension = c.number("mesh", "extension", -1.0);

  r.domain = c.number("prior", "domain", 0.0);
  r.prior.beta_variance = c.number("prior", "beta_variance", 100.0);
  const auto sd = c.numbers("prior", "phi_sd", {1.5, 1.5});
  if (sd.size() != 2) throw c.error_at(c.require("prior", "phi_sd").line, "[prior] phi_sd: expected two values");
  r.prior.phi_sd = {sd[0], sd[1]};
  if (c.has("prior", "phi_mean")) {
    const auto m = c.numbers("prior", "phi_mean", {});
    if (m.size() != 2) throw c.error_at(c.require("prior", "phi_mean").line, "[prior] phi_mean: expected two values");
    r.prior.phi_mean = {m[0], m[1]};
    r.phi_mean_set = true;
  }

  r.truth_beta0 = c.number("truth", "beta0", -1.5);
  r.truth_beta1 = c.number("truth", "beta1", 0.15);
  r.truth_phi.log_sd = c.number("truth", "log_sd", std::log(0.5));
  if (c.has("truth", "range") && c.has("truth", "log_kappa"))
    throw c.error_at(c.require("truth", "range").line, "[truth] give either range or log_kappa, not both");
  if (c.has("truth", "range")) {
    const double range = c.number("truth", "range");
    if (!(range > 0.0)) throw c.error_at(c.require("truth", "range").line, "[truth] range must be positive");
    r.truth_phi.log_kappa = std::log(kappa_for_range(range));
  } else {
    r.truth_phi.log_kappa = c.number("truth", "log_kappa", std::log(kappa_for_range(24.0)));
  }

  r.chain.iterations = static_cast<int>(c.integer("chain", "iterations", 1000));
  r.chain.burn_in = static_cast<int>(c.integer("chain", "burn_in", -1));
  r.chain.chains = static_cast<int>(c.integer("chain", "chains", 4));
  r.chain.thin = static_cast<int>(c.integer("chain", "thin", 1));
  try {
    r.chain.grid_policy = parse_grid_policy(c.string("chain", "grid_policy", "rebuild"));
  } catch (const InputError& e) {
    throw c.error_at(c.require("chain", "grid_policy").line, e.what());
  }
  r.chain.grid.steps = static_cast<int>(c.integer("chain", "grid_steps", 5));
  r.chain.grid.span = c.number("chain", "grid_span", 2.5);
  const auto fmt = c.string("chain", "sample_format", "wide");
  if (fmt != "wide" && fmt != "long")
    throw c.error_at(c.require("chain", "sample_format").line, "[chain] sample_format: expected wide or long");
  r.wide_samples = fmt == "wide";

  r.scenarios = c.words("eval", "scenarios", {"1a"});
  for (const auto& s : r.scenarios) {
    try {
      parse_scenario(s);
    } catch (const InputError& e) {
      throw c.error_at(c.require("eval", "scenarios").line, e.what());
    }
  }
  r.prediction_cell = c.number("eval", "prediction_cell", 1.0);
  if (!(r.prediction_cell > 0.0)) throw InputError(c.origin() + ": [eval] prediction_cell must be positive");
  r.aggregate = static_cast<std::size_t>(c.integer("eval", "aggregate", 5));
  if (r.aggregate < 1) throw InputError(c.origin() + ": [eval] aggregate must be >= 1");
  r.prediction_draws = static_cast<std::size_t>(c.integer("eval", "prediction_draws", 1000));

  if (c.has("run", "seed")) {
    const long long s = c.integer("run", "seed", 0);
    if (s < 0) throw c.error_at(c.require("run", "seed").line, "[run] seed must be non-negative");
    r.seed = static_cast<std::uint64_t>(s);
  }
  r.out = c.string("run", "out", "out");
  return r;
}

}  // namespace geomask
