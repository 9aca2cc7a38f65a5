#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "calib/math/rng.hpp"

namespace calib {

// Constrained particle swarm over the 2-D actuator box. Feasibility rules:
// feasible beats infeasible, feasible ties resolve on acquisition value,
// infeasible ties resolve on violation probability.

struct SwarmConfig {
  int n_pso = 100;
  int iterations = 100;
  double c0 = 0.1;   // inertia
  double c1 = 0.01;  // cognitive pull
  double c2 = 0.1;   // social pull
  Eigen::Vector2d lo{0.7046, -75.0};
  Eigen::Vector2d hi{0.8188, -35.0};
  double beta_max = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_pso < 1 || iterations < 1)
      throw std::invalid_argument("SwarmConfig: counts must be >= 1");
    for (double c : {c0, c1, c2})
      if (c < 0.0 || c >= 1.0)
        throw std::invalid_argument("SwarmConfig: coefficients outside [0,1)");
    if (!(lo.array() < hi.array()).all())
      throw std::invalid_argument("SwarmConfig: empty box");
  }
};

struct Evaluated {
  double alpha = 0.0;  // acquisition value (higher is better)
  double beta4 = 1.0;  // total constraint violation probability
};

using Evaluator = std::function<Evaluated(const Eigen::Vector2d&)>;

// True when the candidate should replace the incumbent; ties keep the
// incumbent in every branch.
inline bool select_best(const Evaluated& candidate, const Evaluated& incumbent,
                        double beta_max) {
  const bool cand_ok = candidate.beta4 <= beta_max;
  const bool inc_ok = incumbent.beta4 <= beta_max;
  if (cand_ok && inc_ok) return candidate.alpha > incumbent.alpha;
  if (cand_ok != inc_ok) return cand_ok;
  return candidate.beta4 < incumbent.beta4;
}

struct Particle {
  Eigen::Vector2d x;
  Eigen::Vector2d v;
  Evaluated value;
  Eigen::Vector2d pbest_x;
  Evaluated pbest;
};

struct Swarm {
  SwarmConfig cfg;
  std::vector<Particle> particles;
  Eigen::Vector2d gbest_x;   // only ever a feasible position once one exists
  Evaluated gbest;
  bool feasible_found = false;
  Eigen::Vector2d fallback_x;  // minimum-beta position seen so far
  Evaluated fallback;
  Rng rng{0};
};

namespace detail {

inline void offer_to_global(Swarm& sw, const Eigen::Vector2d& x,
                            const Evaluated& val) {
  if (val.beta4 <= sw.cfg.beta_max) {
    if (!sw.feasible_found || val.alpha > sw.gbest.alpha) {
      sw.gbest_x = x;
      sw.gbest = val;
      sw.feasible_found = true;
    }
  }
  if (val.beta4 < sw.fallback.beta4) {
    sw.fallback_x = x;
    sw.fallback = val;
  }
}

inline const Eigen::Vector2d& guide(const Swarm& sw) {
  return sw.feasible_found ? sw.gbest_x : sw.fallback_x;
}

}  // namespace detail

// Particles on a uniform lattice spanning the box (row-major, first n_pso
// lattice points of the smallest square lattice that fits), velocities
// drawn N(0, (0.05 * box width)^2) per dimension.
inline Swarm init_swarm(const SwarmConfig& cfg, const Evaluator& evaluate) {
  cfg.validate();
  Swarm sw;
  sw.cfg = cfg;
  sw.rng = Rng(Rng::mix(cfg.seed, 0x50534f));
  sw.fallback.beta4 = std::numeric_limits<double>::infinity();

  const int m = static_cast<int>(std::ceil(std::sqrt(double(cfg.n_pso))));
  const Eigen::Vector2d width = cfg.hi - cfg.lo;
  sw.particles.reserve(static_cast<std::size_t>(cfg.n_pso));
  for (int k = 0; k < cfg.n_pso; ++k) {
    const int i = k / m, j = k % m;
    Particle p;
    p.x(0) = m > 1 ? cfg.lo(0) + width(0) * double(i) / double(m - 1)
                   : 0.5 * (cfg.lo(0) + cfg.hi(0));
    p.x(1) = m > 1 ? cfg.lo(1) + width(1) * double(j) / double(m - 1)
                   : 0.5 * (cfg.lo(1) + cfg.hi(1));
    p.v(0) = sw.rng.normal(0.0, 0.05 * width(0));
    p.v(1) = sw.rng.normal(0.0, 0.05 * width(1));
    p.value = evaluate(p.x);
    p.pbest_x = p.x;
    p.pbest = p.value;
    sw.particles.push_back(p);
  }
  for (const Particle& p : sw.particles)
    detail::offer_to_global(sw, p.x, p.value);
  return sw;
}

inline void step_swarm(Swarm& sw, const Evaluator& evaluate) {
  const SwarmConfig& cfg = sw.cfg;
  for (Particle& p : sw.particles) {
    // One scalar multiplier per pull per particle per iteration.
    const double x1 = sw.rng.uniform();
    const double x2 = sw.rng.uniform();
    const Eigen::Vector2d& g = detail::guide(sw);
    p.v = cfg.c0 * p.v + cfg.c1 * x1 * (p.pbest_x - p.x) +
          cfg.c2 * x2 * (g - p.x);
    p.x += p.v;
    for (int d = 0; d < 2; ++d) {  // clamp to the box, kill that velocity
      if (p.x(d) < cfg.lo(d)) {
        p.x(d) = cfg.lo(d);
        p.v(d) = 0.0;
      } else if (p.x(d) > cfg.hi(d)) {
        p.x(d) = cfg.hi(d);
        p.v(d) = 0.0;
      }
    }
    p.value = evaluate(p.x);
    if (select_best(p.value, p.pbest, cfg.beta_max)) {
      p.pbest_x = p.x;
      p.pbest = p.value;
    }
  }
  // Deterministic index-ordered reduction into the global best.
  for (const Particle& p : sw.particles)
    detail::offer_to_global(sw, p.x, p.value);
}

struct PsoResult {
  Eigen::Vector2d best;
  Evaluated value;
  bool feasible_found = false;  // false: best is the minimum-beta fallback
};

inline PsoResult run_pso(const SwarmConfig& cfg, const Evaluator& evaluate) {
  Swarm sw = init_swarm(cfg, evaluate);
  for (int l = 0; l < cfg.iterations; ++l) step_swarm(sw, evaluate);
  PsoResult r;
  r.feasible_found = sw.feasible_found;
  r.best = sw.feasible_found ? sw.gbest_x : sw.fallback_x;
  r.value = sw.feasible_found ? sw.gbest : sw.fallback;
  return r;
}

}  // namespace calib
