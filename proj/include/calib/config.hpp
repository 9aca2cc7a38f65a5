#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "calib/acquisition.hpp"
#include "calib/constraints.hpp"
#include "calib/engine_sim.hpp"
#include "calib/geometry.hpp"
#include "calib/io.hpp"
#include "calib/pso.hpp"

namespace calib {

// Configuration failure with enough context to point at the offending line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, int line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what
                                    : what),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// Ordered key = value file with [dotted.section] headers, '#'/';' comments.
// Order of first appearance is preserved so a tree serializes back to the
// exact text it was parsed from (canonical form: one blank line between
// sections, no comments).
class ConfigTree {
 public:
  struct Entry {
    std::string section;
    std::string key;
    std::string value;
    int line = 0;
  };

  static ConfigTree parse(const std::string& text) {
    ConfigTree tree;
    std::string section;
    int line_no = 0;
    for (std::string_view raw : split(text, '\n')) {
      ++line_no;
      const std::size_t cut = raw.find_first_of("#;");
      if (cut != std::string_view::npos) raw = raw.substr(0, cut);
      const std::string_view line = trim(raw);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError("unterminated section header", line_no);
        section = std::string(trim(line.substr(1, line.size() - 2)));
        if (section.empty()) throw ConfigError("empty section name", line_no);
        continue;
      }
      const std::size_t eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError("expected key = value", line_no);
      const std::string key(trim(line.substr(0, eq)));
      const std::string value(trim(line.substr(eq + 1)));
      if (key.empty()) throw ConfigError("empty key", line_no);
      if (value.empty()) throw ConfigError("empty value for '" + key + "'", line_no);
      if (section.empty())
        throw ConfigError("key '" + key + "' outside any section", line_no);
      if (tree.find(section, key))
        throw ConfigError("duplicate key '" + section + "." + key + "'", line_no);
      tree.set(section, key, value, line_no);
    }
    return tree;
  }

  void set(const std::string& section, const std::string& key,
           const std::string& value, int line = 0) {
    entries_.push_back({section, key, value, line});
  }

  const Entry* find(const std::string& section, const std::string& key) const {
    for (const Entry& e : entries_)
      if (e.section == section && e.key == key) return &e;
    return nullptr;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  std::string serialize() const {
    std::string out;
    std::string open;
    bool first = true;
    for (const Entry& e : entries_) {
      if (e.section != open) {
        if (!first) out += "\n";
        out += "[" + e.section + "]\n";
        open = e.section;
        first = false;
      }
      out += e.key + " = " + e.value + "\n";
    }
    return out;
  }

 private:
  std::vector<Entry> entries_;
};

// Stable 64-bit FNV-1a over a string; used to fingerprint the parts of a
// config that an artifact depends on.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

namespace detail {

// Tracks which entries a consumer looked at so that leftovers (typos,
// misplaced keys) surface as errors with their line numbers.
class ConfigReader {
 public:
  explicit ConfigReader(const ConfigTree& tree) : tree_(tree) {}

  double number(const std::string& sec, const std::string& key, double fallback) {
    const ConfigTree::Entry* e = lookup(sec, key);
    if (!e) return fallback;
    try {
      return parse_double(e->value);
    } catch (const std::exception&) {
      throw ConfigError("expected a number for '" + sec + "." + key + "', got '" +
                            e->value + "'",
                        e->line);
    }
  }

  int integer(const std::string& sec, const std::string& key, int fallback) {
    const ConfigTree::Entry* e = lookup(sec, key);
    if (!e) return fallback;
    try {
      return static_cast<int>(parse_int(e->value));
    } catch (const std::exception&) {
      throw ConfigError("expected an integer for '" + sec + "." + key +
                            "', got '" + e->value + "'",
                        e->line);
    }
  }

  std::string text(const std::string& sec, const std::string& key,
                   const std::string& fallback) {
    const ConfigTree::Entry* e = lookup(sec, key);
    return e ? e->value : fallback;
  }

  void reject_leftovers() const {
    for (const ConfigTree::Entry& e : tree_.entries())
      if (!consumed_.count(e.section + "." + e.key))
        throw ConfigError("unknown key '" + e.section + "." + e.key + "'", e.line);
  }

  const ConfigTree::Entry* lookup(const std::string& sec, const std::string& key) {
    consumed_.insert(sec + "." + key);
    return tree_.find(sec, key);
  }

 private:
  const ConfigTree& tree_;
  std::set<std::string> consumed_;
};

inline void read_surface(ConfigReader& r, const std::string& sec,
                         QuadSurface& s) {
  s.c00 = r.number(sec, "c00", s.c00);
  s.c10 = r.number(sec, "c10", s.c10);
  s.c01 = r.number(sec, "c01", s.c01);
  s.c20 = r.number(sec, "c20", s.c20);
  s.c02 = r.number(sec, "c02", s.c02);
  s.c11 = r.number(sec, "c11", s.c11);
}

inline void write_surface(ConfigTree& t, const std::string& sec,
                          const QuadSurface& s) {
  t.set(sec, "c00", format_double(s.c00));
  t.set(sec, "c10", format_double(s.c10));
  t.set(sec, "c01", format_double(s.c01));
  t.set(sec, "c20", format_double(s.c20));
  t.set(sec, "c02", format_double(s.c02));
  t.set(sec, "c11", format_double(s.c11));
}

}  // namespace detail

// Complete description of one calibration run. Every field has a default;
// a config file only overrides, and serializing a RunConfig materializes
// all of them.
struct RunConfig {
  // run control
  std::uint64_t seed = 1;
  AcquisitionKind kind = AcquisitionKind::NEI;
  int max_iterations = 100;
  double budget_s = 300.0;      // engine-time stop [s]
  int n_sample = 25;            // buffered cycles per applied point
  double cycle_period_s = 0.1;  // 4-stroke at 1200 rpm
  double convergence_headroom = 0.001;  // GIE fraction, 0.1 percentage points

  EngineGeometry geometry{};
  double delta_ca = 0.2;
  AirPath air{};
  ActuatorBox box{};
  PlantParams plant = PlantParams::defaults();

  // next-cycle IMEP controller
  double controller_gain = 0.5;
  double controller_tol = 0.02;
  int controller_hold = 3;
  int controller_max_cycles = 60;

  // pressure basis pretraining
  int n_pc = 8;
  int basis_lattice = 5;     // settings lattice per axis
  int basis_q_levels = 3;    // fuel-energy levels per setting
  int basis_cycles = 4;      // noisy cycles per (setting, q)

  // weight model
  int gpr_budget = 40;  // hyperparameter search steps per PC

  ConstraintSpec constraints{};
  int n_mc = 4096;  // acquisition Monte Carlo draws

  // inner optimizer (box bounds mirror the actuator box)
  int pso_particles = 100;
  int pso_iterations = 100;
  double pso_c0 = 0.1;
  double pso_c1 = 0.01;
  double pso_c2 = 0.1;

  // initial applied point
  double initial_br = 0.8;
  double initial_soi = -45.0;

  // ground-truth sweep
  int oracle_n_br = 50;
  int oracle_n_soi = 50;

  static RunConfig from_tree(const ConfigTree& tree) {
    RunConfig c;
    detail::ConfigReader r(tree);

    const ConfigTree::Entry* seed = r.lookup("run", "seed");
    if (seed) {
      try {
        const long long v = std::stoll(seed->value);
        if (v < 0) throw std::invalid_argument("negative");
        c.seed = static_cast<std::uint64_t>(v);
      } catch (const std::exception&) {
        throw ConfigError("expected a non-negative integer for 'run.seed', got '" +
                              seed->value + "'",
                          seed->line);
      }
    }
    const ConfigTree::Entry* kind = r.lookup("run", "kind");
    if (kind) {
      std::string name = kind->value;
      std::transform(name.begin(), name.end(), name.begin(),
                     [](unsigned char ch) { return std::tolower(ch); });
      try {
        c.kind = parse_kind(name);
      } catch (const std::exception&) {
        throw ConfigError("unknown acquisition kind '" + kind->value + "'",
                          kind->line);
      }
    }
    c.max_iterations = r.integer("run", "max_iterations", c.max_iterations);
    c.budget_s = r.number("run", "budget_s", c.budget_s);
    c.n_sample = r.integer("run", "n_sample", c.n_sample);
    c.cycle_period_s = r.number("run", "cycle_period_s", c.cycle_period_s);
    c.convergence_headroom =
        r.number("run", "convergence_headroom", c.convergence_headroom);
    c.initial_br = r.number("run", "initial_br", c.initial_br);
    c.initial_soi = r.number("run", "initial_soi", c.initial_soi);

    c.geometry.bore = r.number("geometry", "bore", c.geometry.bore);
    c.geometry.stroke = r.number("geometry", "stroke", c.geometry.stroke);
    c.geometry.conrod_length =
        r.number("geometry", "conrod_length", c.geometry.conrod_length);
    c.geometry.compression_ratio =
        r.number("geometry", "compression_ratio", c.geometry.compression_ratio);
    c.delta_ca = r.number("geometry", "delta_ca", c.delta_ca);

    c.air.p_im = r.number("air", "p_im", c.air.p_im);
    c.air.t_im = r.number("air", "t_im", c.air.t_im);
    c.air.egr = r.number("air", "egr", c.air.egr);

    c.box.lo(0) = r.number("box", "br_lo", c.box.lo(0));
    c.box.hi(0) = r.number("box", "br_hi", c.box.hi(0));
    c.box.lo(1) = r.number("box", "soi_lo", c.box.lo(1));
    c.box.hi(1) = r.number("box", "soi_hi", c.box.hi(1));
    c.box.q_lo = r.number("box", "q_lo", c.box.q_lo);
    c.box.q_hi = r.number("box", "q_hi", c.box.q_hi);

    c.plant.wiebe_a = r.number("plant", "wiebe_a", c.plant.wiebe_a);
    c.plant.wiebe_m = r.number("plant", "wiebe_m", c.plant.wiebe_m);
    c.plant.kappa = r.number("plant", "kappa", c.plant.kappa);
    c.plant.br_ref = r.number("plant", "br_ref", c.plant.br_ref);
    c.plant.br_half = r.number("plant", "br_half", c.plant.br_half);
    c.plant.soi_ref = r.number("plant", "soi_ref", c.plant.soi_ref);
    c.plant.soi_half = r.number("plant", "soi_half", c.plant.soi_half);
    c.plant.eff_floor = r.number("plant", "eff_floor", c.plant.eff_floor);
    c.plant.eff_ceil = r.number("plant", "eff_ceil", c.plant.eff_ceil);
    c.plant.duration_floor =
        r.number("plant", "duration_floor", c.plant.duration_floor);
    c.plant.heat_loss = r.number("plant", "heat_loss", c.plant.heat_loss);
    c.plant.noise_ca50_std =
        r.number("plant", "noise_ca50_std", c.plant.noise_ca50_std);
    c.plant.noise_energy_std =
        r.number("plant", "noise_energy_std", c.plant.noise_energy_std);
    c.plant.instability_knee =
        r.number("plant", "instability_knee", c.plant.instability_knee);
    c.plant.instability_gain =
        r.number("plant", "instability_gain", c.plant.instability_gain);
    c.plant.instability_cap =
        r.number("plant", "instability_cap", c.plant.instability_cap);
    detail::read_surface(r, "plant.ca50", c.plant.ca50);
    detail::read_surface(r, "plant.duration", c.plant.duration);
    detail::read_surface(r, "plant.comb_eff", c.plant.comb_eff);

    c.controller_gain = r.number("controller", "gain", c.controller_gain);
    c.controller_tol = r.number("controller", "tol", c.controller_tol);
    c.controller_hold = r.integer("controller", "hold", c.controller_hold);
    c.controller_max_cycles =
        r.integer("controller", "max_cycles", c.controller_max_cycles);

    c.n_pc = r.integer("basis", "n_pc", c.n_pc);
    c.basis_lattice = r.integer("basis", "lattice", c.basis_lattice);
    c.basis_q_levels = r.integer("basis", "q_levels", c.basis_q_levels);
    c.basis_cycles = r.integer("basis", "cycles", c.basis_cycles);

    c.gpr_budget = r.integer("gpr", "budget", c.gpr_budget);

    c.constraints.imep_req =
        r.number("constraints", "imep_req", c.constraints.imep_req);
    c.constraints.cov_ub = r.number("constraints", "cov_ub", c.constraints.cov_ub);
    c.constraints.p_ub = r.number("constraints", "p_ub", c.constraints.p_ub);
    c.constraints.dp_ub = r.number("constraints", "dp_ub", c.constraints.dp_ub);
    c.constraints.beta_max =
        r.number("constraints", "beta_max", c.constraints.beta_max);
    c.n_mc = r.integer("acquisition", "n_mc", c.n_mc);

    c.pso_particles = r.integer("pso", "n_pso", c.pso_particles);
    c.pso_iterations = r.integer("pso", "iterations", c.pso_iterations);
    c.pso_c0 = r.number("pso", "c0", c.pso_c0);
    c.pso_c1 = r.number("pso", "c1", c.pso_c1);
    c.pso_c2 = r.number("pso", "c2", c.pso_c2);

    c.oracle_n_br = r.integer("oracle", "n_br", c.oracle_n_br);
    c.oracle_n_soi = r.integer("oracle", "n_soi", c.oracle_n_soi);

    r.reject_leftovers();
    c.validate();
    return c;
  }

  ConfigTree to_tree() const {
    ConfigTree t;
    t.set("run", "seed", std::to_string(seed));
    t.set("run", "kind", to_string(kind));
    t.set("run", "max_iterations", std::to_string(max_iterations));
    t.set("run", "budget_s", format_double(budget_s));
    t.set("run", "n_sample", std::to_string(n_sample));
    t.set("run", "cycle_period_s", format_double(cycle_period_s));
    t.set("run", "convergence_headroom", format_double(convergence_headroom));
    t.set("run", "initial_br", format_double(initial_br));
    t.set("run", "initial_soi", format_double(initial_soi));

    t.set("geometry", "bore", format_double(geometry.bore));
    t.set("geometry", "stroke", format_double(geometry.stroke));
    t.set("geometry", "conrod_length", format_double(geometry.conrod_length));
    t.set("geometry", "compression_ratio",
          format_double(geometry.compression_ratio));
    t.set("geometry", "delta_ca", format_double(delta_ca));

    t.set("air", "p_im", format_double(air.p_im));
    t.set("air", "t_im", format_double(air.t_im));
    t.set("air", "egr", format_double(air.egr));

    t.set("box", "br_lo", format_double(box.lo(0)));
    t.set("box", "br_hi", format_double(box.hi(0)));
    t.set("box", "soi_lo", format_double(box.lo(1)));
    t.set("box", "soi_hi", format_double(box.hi(1)));
    t.set("box", "q_lo", format_double(box.q_lo));
    t.set("box", "q_hi", format_double(box.q_hi));

    t.set("plant", "wiebe_a", format_double(plant.wiebe_a));
    t.set("plant", "wiebe_m", format_double(plant.wiebe_m));
    t.set("plant", "kappa", format_double(plant.kappa));
    t.set("plant", "br_ref", format_double(plant.br_ref));
    t.set("plant", "br_half", format_double(plant.br_half));
    t.set("plant", "soi_ref", format_double(plant.soi_ref));
    t.set("plant", "soi_half", format_double(plant.soi_half));
    t.set("plant", "eff_floor", format_double(plant.eff_floor));
    t.set("plant", "eff_ceil", format_double(plant.eff_ceil));
    t.set("plant", "duration_floor", format_double(plant.duration_floor));
    t.set("plant", "heat_loss", format_double(plant.heat_loss));
    t.set("plant", "noise_ca50_std", format_double(plant.noise_ca50_std));
    t.set("plant", "noise_energy_std", format_double(plant.noise_energy_std));
    t.set("plant", "instability_knee", format_double(plant.instability_knee));
    t.set("plant", "instability_gain", format_double(plant.instability_gain));
    t.set("plant", "instability_cap", format_double(plant.instability_cap));
    detail::write_surface(t, "plant.ca50", plant.ca50);
    detail::write_surface(t, "plant.duration", plant.duration);
    detail::write_surface(t, "plant.comb_eff", plant.comb_eff);

    t.set("controller", "gain", format_double(controller_gain));
    t.set("controller", "tol", format_double(controller_tol));
    t.set("controller", "hold", std::to_string(controller_hold));
    t.set("controller", "max_cycles", std::to_string(controller_max_cycles));

    t.set("basis", "n_pc", std::to_string(n_pc));
    t.set("basis", "lattice", std::to_string(basis_lattice));
    t.set("basis", "q_levels", std::to_string(basis_q_levels));
    t.set("basis", "cycles", std::to_string(basis_cycles));

    t.set("gpr", "budget", std::to_string(gpr_budget));

    t.set("constraints", "imep_req", format_double(constraints.imep_req));
    t.set("constraints", "cov_ub", format_double(constraints.cov_ub));
    t.set("constraints", "p_ub", format_double(constraints.p_ub));
    t.set("constraints", "dp_ub", format_double(constraints.dp_ub));
    t.set("constraints", "beta_max", format_double(constraints.beta_max));
    t.set("acquisition", "n_mc", std::to_string(n_mc));

    t.set("pso", "n_pso", std::to_string(pso_particles));
    t.set("pso", "iterations", std::to_string(pso_iterations));
    t.set("pso", "c0", format_double(pso_c0));
    t.set("pso", "c1", format_double(pso_c1));
    t.set("pso", "c2", format_double(pso_c2));

    t.set("oracle", "n_br", std::to_string(oracle_n_br));
    t.set("oracle", "n_soi", std::to_string(oracle_n_soi));
    return t;
  }

  void validate() const {
    if (geometry.bore <= 0.0 || geometry.stroke <= 0.0 ||
        geometry.conrod_length <= 0.5 * geometry.stroke ||
        geometry.compression_ratio <= 1.0)
      throw ConfigError("geometry: inconsistent crank mechanism");
    box.validate();
    plant.validate();
    constraints.validate();
    if (delta_ca <= 0.0) throw ConfigError("geometry.delta_ca must be > 0");
    if (air.p_im <= 0.0) throw ConfigError("air.p_im must be > 0");
    if (max_iterations < 1) throw ConfigError("run.max_iterations must be >= 1");
    if (budget_s <= 0.0) throw ConfigError("run.budget_s must be > 0");
    if (n_sample < 2) throw ConfigError("run.n_sample must be >= 2");
    if (cycle_period_s <= 0.0) throw ConfigError("run.cycle_period_s must be > 0");
    if (convergence_headroom <= 0.0)
      throw ConfigError("run.convergence_headroom must be > 0");
    if (initial_br < box.lo(0) || initial_br > box.hi(0) ||
        initial_soi < box.lo(1) || initial_soi > box.hi(1))
      throw ConfigError("run.initial point outside the actuator box");
    if (controller_gain <= 0.0) throw ConfigError("controller.gain must be > 0");
    if (controller_tol <= 0.0) throw ConfigError("controller.tol must be > 0");
    if (controller_hold < 1) throw ConfigError("controller.hold must be >= 1");
    if (controller_max_cycles < controller_hold)
      throw ConfigError("controller.max_cycles must cover the hold window");
    if (n_pc < 1) throw ConfigError("basis.n_pc must be >= 1");
    if (basis_lattice < 2) throw ConfigError("basis.lattice must be >= 2");
    if (basis_q_levels < 1) throw ConfigError("basis.q_levels must be >= 1");
    if (basis_cycles < 1) throw ConfigError("basis.cycles must be >= 1");
    if (gpr_budget < 1) throw ConfigError("gpr.budget must be >= 1");
    if (n_mc < 2) throw ConfigError("acquisition.n_mc must be >= 2");
    if (pso_particles < 1 || pso_iterations < 1)
      throw ConfigError("pso.n_pso and pso.iterations must be >= 1");
    if (oracle_n_br < 50 || oracle_n_soi < 50)
      throw ConfigError("oracle resolution below 50 x 50");
  }

  CrankGrid make_grid() const { return CrankGrid::with_resolution(delta_ca); }

  SwarmConfig make_swarm(std::uint64_t pso_seed) const {
    SwarmConfig sw;
    sw.n_pso = pso_particles;
    sw.iterations = pso_iterations;
    sw.c0 = pso_c0;
    sw.c1 = pso_c1;
    sw.c2 = pso_c2;
    sw.lo = box.lo;
    sw.hi = box.hi;
    sw.beta_max = constraints.beta_max;
    sw.seed = pso_seed;
    return sw;
  }

  // Canonical serialization of everything the ground-truth sweep depends
  // on; the cached oracle artifact is keyed by its hash, so seeds and
  // acquisition settings do not invalidate it.
  std::string oracle_signature() const {
    static const char* kSections[] = {"geometry",   "air",         "box",
                                      "plant",      "plant.ca50",  "plant.duration",
                                      "plant.comb_eff", "controller", "constraints",
                                      "oracle"};
    const ConfigTree full = to_tree();
    ConfigTree sig;
    for (const char* sec : kSections)
      for (const ConfigTree::Entry& e : full.entries())
        if (e.section == sec) sig.set(e.section, e.key, e.value);
    return sig.serialize();
  }

  std::string oracle_hash() const { return hex64(fnv1a(oracle_signature())); }
};

}  // namespace calib
