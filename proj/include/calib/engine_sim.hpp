#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "calib/geometry.hpp"
#include "calib/math/rng.hpp"
#include "calib/math/stats.hpp"
#include "calib/pcd.hpp"

namespace calib {

// Fuel-side actuators for one cycle.
struct FuelSettings {
  double q_fuel = 2022.7;  // total fuel energy [J/cycle]
  double br = 0.8;         // port-fuel energy fraction [-]
  double soi_di = -45.0;   // direct-injection start [CAD aTDC]
};

// Air-side boundary conditions, held constant over a run.
struct AirPath {
  double p_im = 1.0e5;  // intake manifold pressure [Pa]
  double t_im = 323.0;  // intake manifold temperature [K]
  double egr = 0.0;     // external EGR fraction [-]
};

// Admissible actuator ranges.
struct ActuatorBox {
  Eigen::Vector2d lo{0.7046, -75.0};  // (BR, SOI_DI)
  Eigen::Vector2d hi{0.8188, -35.0};
  double q_lo = 1639.6;  // [J/cycle]
  double q_hi = 2405.8;

  void validate() const {
    if (!(lo.array() < hi.array()).all() || q_lo >= q_hi)
      throw std::invalid_argument("ActuatorBox: empty range");
    if (lo(0) < 0.0 || hi(0) > 1.0)
      throw std::invalid_argument("ActuatorBox: blend ratio outside [0,1]");
    if (q_lo <= 0.0) throw std::invalid_argument("ActuatorBox: q_lo <= 0");
  }

  bool contains(const FuelSettings& s) const {
    return s.br >= lo(0) && s.br <= hi(0) && s.soi_di >= lo(1) &&
           s.soi_di <= hi(1) && s.q_fuel >= q_lo && s.q_fuel <= q_hi;
  }

  double clamp_q(double q) const { return std::clamp(q, q_lo, q_hi); }
};

// Quadratic response surface on normalized inputs u, v in [-1, 1].
struct QuadSurface {
  double c00 = 0.0, c10 = 0.0, c01 = 0.0;
  double c20 = 0.0, c02 = 0.0, c11 = 0.0;

  double eval(double u, double v) const {
    return c00 + c10 * u + c01 * v + c20 * u * u + c02 * v * v + c11 * u * v;
  }
};

// Synthetic single-zone plant: a Wiebe heat release whose placement,
// duration and completeness respond quadratically to (BR, SOI_DI), plus
// per-cycle Gaussian scatter on phasing and released energy. Late phasing
// amplifies the energy scatter, which is what makes cov(IMEP_g) climb
// toward the late-SOI edge of the box.
struct PlantParams {
  double wiebe_a = 6.9077552789821368;  // 99.9% burned at nominal duration
  double wiebe_m = 2.0;
  double kappa = 1.35;

  // Normalization of the response-surface inputs: u = (br - br_ref)/br_half.
  double br_ref = 0.7617, br_half = 0.0571;
  double soi_ref = -55.0, soi_half = 20.0;

  QuadSurface ca50;      // burn midpoint [CAD aTDC]
  QuadSurface duration;  // Wiebe duration [CAD]
  QuadSurface comb_eff;  // released fraction of q_fuel [-]
  double eff_floor = 0.30;
  double eff_ceil = 0.995;
  double duration_floor = 4.0;  // [CAD]
  // Lumped wall heat transfer, dQ_loss/dth = heat_loss * p * V; early burns
  // hold high pressure longer and therefore pay more.
  double heat_loss = 0.0045;  // [1/CAD]

  double noise_ca50_std = 0.8;     // [CAD]
  double noise_energy_std = 0.006; // fraction of released energy
  // Energy scatter grows by `instability_gain` per CAD of burn midpoint
  // beyond the knee, capped at `instability_cap` times the base level.
  double instability_knee = 14.0;  // [CAD aTDC]
  double instability_gain = 0.10;  // [1/CAD]
  double instability_cap = 3.0;

  static PlantParams defaults() {
    PlantParams p;
    p.ca50 = {9.0, 3.0, 10.0, 0.0, 2.0, 0.0};
    p.duration = {12.0, 1.8, 6.8, 0.2, 0.5, 0.7};
    p.comb_eff = {0.95, 0.020, -0.0325, -0.060, -0.055, -0.050};
    return p;
  }

  void validate() const {
    if (wiebe_a <= 0.0 || wiebe_m < 0.0)
      throw std::invalid_argument("PlantParams: bad Wiebe shape");
    if (kappa <= 1.0 || kappa >= 2.0)
      throw std::invalid_argument("PlantParams: kappa outside (1, 2)");
    if (br_half <= 0.0 || soi_half <= 0.0)
      throw std::invalid_argument("PlantParams: bad normalization");
    if (noise_ca50_std < 0.0 || noise_energy_std < 0.0)
      throw std::invalid_argument("PlantParams: negative noise std");
    if (eff_floor <= 0.0 || eff_ceil > 1.0 || eff_floor >= eff_ceil)
      throw std::invalid_argument("PlantParams: bad efficiency clamp");
    if (duration_floor <= 0.0)
      throw std::invalid_argument("PlantParams: duration floor <= 0");
    if (instability_gain < 0.0 || instability_cap < 1.0)
      throw std::invalid_argument("PlantParams: bad instability model");
    if (heat_loss < 0.0 || heat_loss > 0.05)
      throw std::invalid_argument("PlantParams: heat_loss outside [0, 0.05]");
  }

  double u_of(double br) const { return (br - br_ref) / br_half; }
  double v_of(double soi) const { return (soi - soi_ref) / soi_half; }
};

// Deterministic combustion descriptors for one cycle.
struct BurnEvent {
  double theta_soc = 0.0;  // start of combustion [CAD aTDC]
  double duration = 1.0;   // [CAD]
  double energy = 0.0;     // released heat [J]
};

struct CycleMetrics {
  double imep_g = 0.0;     // [Pa]
  double gie = 0.0;        // [-]
  double p_max = 0.0;      // [Pa]
  double dpdth_max = 0.0;  // [Pa/CAD]
};

inline double cov_imep(const std::vector<double>& imeps) {
  if (imeps.size() < 2)
    throw std::invalid_argument("cov_imep: need at least two cycles");
  const double m = mean(imeps);
  if (m <= 0.0) throw std::domain_error("cov_imep: non-positive mean IMEP");
  return std::sqrt(sample_variance(imeps)) / m;
}

// Integral next-cycle fuel-energy controller. The error is converted to
// work units through the displacement so the gain is dimensionless.
struct ControllerStep {
  double q_next = 0.0;
  bool clamped = false;
};

inline ControllerStep imep_controller_step(double measured_imep, double q_fuel,
                                           double target_imep, double gain,
                                           double v_d, const ActuatorBox& box) {
  const double raw = q_fuel + gain * (target_imep - measured_imep) * v_d;
  ControllerStep st;
  st.q_next = box.clamp_q(raw);
  st.clamped = st.q_next != raw;
  return st;
}

// The stochastic RCCI stand-in. Owns the per-run random stream; cycles are
// strictly sequential. The noiseless path is const and thread-safe, which
// is what the exhaustive oracle sweep leans on.
class EnginePlant {
 public:
  EnginePlant(const EngineGeometry& geom, const CrankGrid& grid,
              const AirPath& air, const PlantParams& params,
              const ActuatorBox& box, std::uint64_t seed)
      : geom_(geom), grid_(grid), air_(air), params_(params), box_(box),
        rng_(Rng::mix(seed, 0x454e474eull)) {
    params_.validate();
    box_.validate();
    if (air_.p_im <= 0.0) throw std::invalid_argument("EnginePlant: p_im <= 0");
    const Eigen::Index n = grid_.size();
    v_node_.resize(n);
    dv_node_.resize(n);
    v_mid_.resize(n - 1);
    dv_mid_.resize(n - 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      v_node_(i) = cylinder_volume(grid_.theta(i), geom_);
      dv_node_(i) = cylinder_volume_derivative(grid_.theta(i), geom_);
      if (i + 1 < n) {
        const double th = grid_.theta(i) + 0.5 * grid_.delta_ca;
        v_mid_(i) = cylinder_volume(th, geom_);
        dv_mid_(i) = cylinder_volume_derivative(th, geom_);
      }
    }
    dv_weights_ = grid_.trapezoid_weights().cwiseProduct(dv_node_);
  }

  const EngineGeometry& geometry() const { return geom_; }
  const CrankGrid& grid() const { return grid_; }
  const AirPath& air() const { return air_; }
  const PlantParams& params() const { return params_; }
  const ActuatorBox& box() const { return box_; }

  // Noiseless combustion descriptors at a setting.
  BurnEvent nominal_burn(const FuelSettings& s) const {
    const double u = params_.u_of(s.br);
    const double v = params_.v_of(s.soi_di);
    const double ca50 = params_.ca50.eval(u, v);
    const double dur =
        std::max(params_.duration_floor, params_.duration.eval(u, v));
    const double eff = std::clamp(params_.comb_eff.eval(u, v),
                                  params_.eff_floor, params_.eff_ceil);
    BurnEvent b;
    b.duration = dur;
    b.theta_soc = ca50 - y50() * dur;
    b.energy = eff * s.q_fuel;
    return b;
  }

  // One fired cycle with cycle-to-cycle scatter; consumes exactly two
  // normal draws (phasing, energy) regardless of the noise levels.
  PressureTrace run_cycle(const FuelSettings& s) {
    if (!box_.contains(s))
      throw std::invalid_argument("EnginePlant: settings outside actuator box");
    const double z_phase = rng_.normal();
    const double z_energy = rng_.normal();
    BurnEvent b = nominal_burn(s);
    const double ca50_nominal = b.theta_soc + y50() * b.duration;
    b.theta_soc += params_.noise_ca50_std * z_phase;
    const double ca50_cycle = ca50_nominal + params_.noise_ca50_std * z_phase;
    const double amp = std::min(
        params_.instability_cap,
        1.0 + params_.instability_gain *
                  std::max(0.0, ca50_cycle - params_.instability_knee));
    const double frac =
        1.0 + params_.noise_energy_std * amp * std::clamp(z_energy, -4.0, 4.0);
    b.energy *= std::max(0.0, frac);
    return integrate(b);
  }

  PressureTrace noiseless_cycle(const FuelSettings& s) const {
    if (!box_.contains(s))
      throw std::invalid_argument("EnginePlant: settings outside actuator box");
    return integrate(nominal_burn(s));
  }

  CycleMetrics measure(const PressureTrace& trace, double q_fuel) const {
    return metrics(trace, q_fuel, dv_weights_, geom_.displacement());
  }

  std::string save_rng() const { return rng_.save_state(); }
  void restore_rng(const std::string& s) { rng_.restore_state(s); }

  // First-law single-zone pressure with fixed kappa:
  //   dp/dth = -kappa (p/V) dV/dth + (kappa - 1)/V (dQ_burn - dQ_loss)/dth
  // integrated by RK4 across the grid from p(-180) = p_im. The heat-loss
  // model dQ_loss = heat_loss * p * V reduces to a linear damping of p.
  // Volumes at the nodes and midpoints are precomputed, so the right side
  // is pure arithmetic.
  PressureTrace integrate(const BurnEvent& b) const {
    const double a = params_.wiebe_a;
    const double m = params_.wiebe_m;
    const double kappa = params_.kappa;
    const double damp = (kappa - 1.0) * params_.heat_loss;
    auto dq = [&](double th) {
      const double y = (th - b.theta_soc) / b.duration;
      if (y <= 0.0) return 0.0;
      const double ym = std::pow(y, m);
      const double aym1 = a * ym * y;
      if (aym1 > 30.0) return 0.0;  // burn complete
      return b.energy * a * (m + 1.0) / b.duration * ym * std::exp(-aym1);
    };
    auto rhs = [&](double p, double v, double dv, double q_rate) {
      return -kappa * p / v * dv + (kappa - 1.0) / v * q_rate - damp * p;
    };

    PressureTrace t;
    t.grid = grid_;
    t.p_im = air_.p_im;
    t.pressure.resize(grid_.size());
    const double h = grid_.delta_ca;
    double p = air_.p_im;
    t.pressure(0) = p;
    for (Eigen::Index i = 0; i + 1 < grid_.size(); ++i) {
      const double th = grid_.theta(i);
      const double q0 = dq(th);
      const double qm = dq(th + 0.5 * h);
      const double q1 = dq(th + h);
      const double k1 = rhs(p, v_node_(i), dv_node_(i), q0);
      const double k2 = rhs(p + 0.5 * h * k1, v_mid_(i), dv_mid_(i), qm);
      const double k3 = rhs(p + 0.5 * h * k2, v_mid_(i), dv_mid_(i), qm);
      const double k4 = rhs(p + h * k3, v_node_(i + 1), dv_node_(i + 1), q1);
      p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      t.pressure(i + 1) = p;
    }
    return t;
  }

  // Fraction of the heat released by the burn midpoint, inverted: the
  // normalized angle where the Wiebe function crosses one half.
  double y50() const {
    return std::pow(std::log(2.0) / params_.wiebe_a,
                    1.0 / (params_.wiebe_m + 1.0));
  }

  static CycleMetrics metrics(const PressureTrace& trace, double q_fuel,
                              const Eigen::VectorXd& dv_weights, double v_d) {
    if (trace.pressure.size() != dv_weights.size())
      throw std::invalid_argument("metrics: trace/quadrature size mismatch");
    if (q_fuel <= 0.0) throw std::invalid_argument("metrics: q_fuel <= 0");
    CycleMetrics cm;
    const double work = trace.pressure.dot(dv_weights);
    cm.imep_g = work / v_d;
    cm.gie = work / q_fuel;
    cm.p_max = trace.pressure.maxCoeff();
    const Eigen::Index n = trace.pressure.size();
    const double two_delta = 2.0 * trace.grid.delta_ca;
    double dp_max = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 1; i + 1 < n; ++i) {
      const double dp = (trace.pressure(i + 1) - trace.pressure(i - 1)) / two_delta;
      if (dp > dp_max) dp_max = dp;
    }
    cm.dpdth_max = dp_max;
    return cm;
  }

 private:
  EngineGeometry geom_;
  CrankGrid grid_;
  AirPath air_;
  PlantParams params_;
  ActuatorBox box_;
  Rng rng_;
  Eigen::VectorXd v_node_, dv_node_, v_mid_, dv_mid_, dv_weights_;
};

// Gross metrics of one trace; the work integral uses the same trapezoid
// quadrature as the cost model.
inline CycleMetrics metrics(const PressureTrace& trace, double q_fuel,
                            const EngineGeometry& geom) {
  return EnginePlant::metrics(trace, q_fuel,
                              dv_quadrature_weights(trace.grid, geom),
                              geom.displacement());
}

// Runs the plant with the next-cycle controller until the measured IMEP
// holds within `tol` of the target for `hold` consecutive cycles, or the
// fuel bound pins the actuator (saturation).
struct ControllerRun {
  double q = 0.0;          // final fuel energy [J/cycle]
  int cycles = 0;          // fired cycles consumed
  bool converged = false;
  bool saturated = false;
};

namespace detail {

template <typename CycleFn>
ControllerRun converge_imep_impl(CycleFn&& imep_of, double q0,
                                 double target_imep, double gain, double v_d,
                                 const ActuatorBox& box, double tol, int hold,
                                 int max_cycles) {
  if (tol <= 0.0 || hold < 1 || max_cycles < 1)
    throw std::invalid_argument("converge_imep: bad tolerances");
  ControllerRun run;
  run.q = box.clamp_q(q0);
  int in_tol = 0;
  int pinned = 0;
  for (int c = 0; c < max_cycles; ++c) {
    const double measured = imep_of(run.q);
    ++run.cycles;
    const double err = std::abs(measured - target_imep);
    in_tol = err <= tol * target_imep ? in_tol + 1 : 0;
    if (in_tol >= hold) {
      run.converged = true;
      return run;
    }
    const ControllerStep st =
        imep_controller_step(measured, run.q, target_imep, gain, v_d, box);
    pinned = st.clamped && err > tol * target_imep ? pinned + 1 : 0;
    run.q = st.q_next;
    if (pinned >= 8) {  // actuator against its bound, target unreachable
      run.saturated = true;
      return run;
    }
  }
  // Ran out of cycles without a hold streak. Only a persistent pin at a fuel
  // bound counts as saturation; a noisy but reachable target just times out.
  run.saturated = pinned >= 3;
  return run;
}

}  // namespace detail

inline ControllerRun converge_imep(EnginePlant& plant, double br, double soi,
                                   double q0, double target_imep, double gain,
                                   double tol = 0.02, int hold = 3,
                                   int max_cycles = 60) {
  const double v_d = plant.geometry().displacement();
  return detail::converge_imep_impl(
      [&](double q) {
        const PressureTrace t = plant.run_cycle({q, br, soi});
        return metrics(t, q, plant.geometry()).imep_g;
      },
      q0, target_imep, gain, v_d, plant.box(), tol, hold, max_cycles);
}

// --- ground-truth oracle ---------------------------------------------------

struct OraclePoint {
  double br = 0.0, soi = 0.0;
  double q = 0.0;          // controller-converged fuel energy [J/cycle]
  double gie = 0.0;
  double imep_g = 0.0;     // [Pa]
  double p_max = 0.0;      // [Pa]
  double dpdth_max = 0.0;  // [Pa/CAD]
  bool feasible = false;
  bool saturated = false;
};

struct OracleResult {
  int n_br = 0, n_soi = 0;
  std::vector<OraclePoint> points;  // row-major over (br, soi)
  OraclePoint best;                 // feasible point of maximum GIE
  bool any_feasible = false;
};

// Noiseless exhaustive sweep: at every lattice point the IMEP controller is
// run to convergence and the true constraint values are recorded. Grid rows
// are striped across threads; the result layout is index-deterministic.
inline OracleResult grid_oracle(const EnginePlant& plant, double target_imep,
                                double band_halfwidth, double p_ub,
                                double dp_ub, int n_br, int n_soi,
                                double gain = 0.5) {
  if (n_br < 50 || n_soi < 50)
    throw std::invalid_argument("grid_oracle: resolution below 50 x 50");
  const ActuatorBox& box = plant.box();
  const double v_d = plant.geometry().displacement();
  const double q0 = 0.5 * (box.q_lo + box.q_hi);

  OracleResult res;
  res.n_br = n_br;
  res.n_soi = n_soi;
  res.points.resize(static_cast<std::size_t>(n_br) * n_soi);

  auto eval_point = [&](int i, int j) {
    OraclePoint pt;
    pt.br = box.lo(0) + (box.hi(0) - box.lo(0)) * double(i) / double(n_br - 1);
    pt.soi = box.lo(1) + (box.hi(1) - box.lo(1)) * double(j) / double(n_soi - 1);
    CycleMetrics cm;
    const ControllerRun run = detail::converge_imep_impl(
        [&](double q) {
          const PressureTrace t = plant.noiseless_cycle({q, pt.br, pt.soi});
          cm = metrics(t, q, plant.geometry());
          return cm.imep_g;
        },
        q0, target_imep, gain, v_d, box, 0.02, 3, 60);
    pt.q = run.q;
    pt.gie = cm.gie;
    pt.imep_g = cm.imep_g;
    pt.p_max = cm.p_max;
    pt.dpdth_max = cm.dpdth_max;
    pt.saturated = run.saturated;
    pt.feasible = !run.saturated &&
                  std::abs(cm.imep_g - target_imep) <= band_halfwidth &&
                  cm.p_max <= p_ub && cm.dpdth_max <= dp_ub;
    return pt;
  };

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const int n_threads = static_cast<int>(std::min(hw, 8u));
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) {
    workers.emplace_back([&, t]() {
      for (int i = t; i < n_br; i += n_threads)
        for (int j = 0; j < n_soi; ++j)
          res.points[static_cast<std::size_t>(i) * n_soi + j] = eval_point(i, j);
    });
  }
  for (auto& w : workers) w.join();

  for (const OraclePoint& pt : res.points) {
    if (!pt.feasible) continue;
    if (!res.any_feasible || pt.gie > res.best.gie) {
      res.best = pt;
      res.any_feasible = true;
    }
  }
  return res;
}

}  // namespace calib
