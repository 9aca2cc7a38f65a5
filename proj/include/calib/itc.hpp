#pragma once

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

#include "calib/geometry.hpp"
#include "calib/pcd.hpp"

namespace calib {

// Idealized (Otto) reference cycle: adiabatic compression from p_low,
// isochoric heat addition at TDC, adiabatic expansion from p_high.
struct OttoParams {
  double eta_itc = 0.0;  // 1 - r^(1-kappa)
  double p_low = 1.0e5;  // [Pa], intake manifold pressure
  double kappa = 1.35;
  EngineGeometry geom;

  static OttoParams from(const EngineGeometry& geom, double kappa, double p_im) {
    if (kappa <= 1.0 || kappa >= 2.0)
      throw std::invalid_argument("OttoParams: kappa outside (1, 2)");
    OttoParams p;
    p.geom = geom;
    p.kappa = kappa;
    p.p_low = p_im;
    p.eta_itc = 1.0 - std::pow(geom.compression_ratio, 1.0 - kappa);
    return p;
  }
};

struct OttoTrace {
  PressureTrace trace;
  double p_high = 0.0;     // expansion-branch reference pressure [Pa]
  bool degenerate = false; // p_high did not exceed the compression TDC pressure
};

// Otto pressure on the grid. TDC itself sits on the compression branch; the
// first expansion sample is one grid step later. p_high is not taken from a
// closed form but chosen so that the trapezoid gross work of the returned
// trace equals eta_itc * Q_fuel exactly, which is the property the cost
// model relies on.
inline OttoTrace otto_pressure(double q_fuel, double p_im,
                               const OttoParams& params, const CrankGrid& grid) {
  if (q_fuel <= 0.0) throw std::invalid_argument("otto_pressure: Q_fuel <= 0");
  const EngineGeometry& geom = params.geom;
  const double v_bdc = cylinder_volume(-180.0, geom);
  const double v_tdc = cylinder_volume(0.0, geom);
  const Eigen::VectorXd d = dv_quadrature_weights(grid, geom);
  const Eigen::Index i_tdc = grid.index_of(0.0);

  Eigen::VectorXd comp_shape = Eigen::VectorXd::Zero(grid.size());
  Eigen::VectorXd exp_shape = Eigen::VectorXd::Zero(grid.size());
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    const double v = cylinder_volume(grid.theta(i), geom);
    if (i <= i_tdc)
      comp_shape(i) = std::pow(v_bdc / v, params.kappa);
    else
      exp_shape(i) = std::pow(v_tdc / v, params.kappa);
  }

  const double work_target = params.eta_itc * q_fuel;
  const double comp_work = params.p_low * comp_shape.dot(d);  // < 0
  const double exp_unit_work = exp_shape.dot(d);              // > 0
  if (exp_unit_work <= 0.0)
    throw std::runtime_error("otto_pressure: non-positive expansion quadrature");
  const double p_high = (work_target - comp_work) / exp_unit_work;

  OttoTrace out;
  out.p_high = p_high;
  out.degenerate =
      p_high <= params.p_low * std::pow(geom.compression_ratio, params.kappa);
  out.trace.grid = grid;
  out.trace.p_im = p_im;
  out.trace.pressure = params.p_low * comp_shape + p_high * exp_shape;
  return out;
}

// Quadratic form of the energy-loss cost. The double volume integral over
// the basis factorizes into the outer product of a single vector
// g_i = integral of f_i dV, so Z1 is rank one by construction.
struct CostOperator {
  Eigen::MatrixXd z1;           // n_PC x n_PC, = imep_vector imep_vector^T
  Eigen::VectorXd imep_vector;  // [m^3] per unit weight
};

inline CostOperator build_cost_operator(const PcBasis& basis,
                                        const EngineGeometry& geom) {
  CostOperator op;
  op.imep_vector = basis.components * dv_quadrature_weights(basis.grid, geom);
  op.z1 = op.imep_vector * op.imep_vector.transpose();
  return op;
}

// Basis weights of the Otto reference. After projecting the Otto residual,
// the in-span work deficit left by basis truncation is folded back along the
// imep vector so that w_itc . g equals eta_itc * Q_fuel exactly; the cost
// then measures the true work gap to the ideal cycle rather than the gap to
// its slightly lossy projection.
inline WeightVector itc_weights(double q_fuel, double p_im,
                                const OttoParams& params, const PcBasis& basis) {
  const OttoTrace otto = otto_pressure(q_fuel, p_im, params, basis.grid);
  WeightVector w = project_weights(otto.trace, basis);
  const Eigen::VectorXd g =
      basis.components * dv_quadrature_weights(basis.grid, params.geom);
  const double g2 = g.squaredNorm();
  if (g2 <= 0.0) throw std::runtime_error("itc_weights: basis blind to work");
  w += g * ((params.eta_itc * q_fuel - g.dot(w)) / g2);
  return w;
}

// J = (w - w_itc)^T Z1 (w - w_itc), evaluated through the generating vector.
inline double cost(const WeightVector& w, const WeightVector& w_itc,
                   const CostOperator& op) {
  if (w.size() != op.imep_vector.size() || w_itc.size() != w.size())
    throw std::invalid_argument("cost: weight size mismatch");
  const double gap = op.imep_vector.dot(w - w_itc);
  return gap * gap;
}

}  // namespace calib
