#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "calib/math/stats.hpp"

namespace calib {

// Uniform crank-angle grid spanning the closed part of the cycle,
// [-180, 180] CAD aTDC inclusive at both ends.
struct CrankGrid {
  double delta_ca = 0.2;   // [CAD]
  Eigen::VectorXd theta;   // [CAD], size n = 360/delta_ca + 1

  static CrankGrid with_resolution(double delta_ca) {
    if (delta_ca <= 0.0) throw std::invalid_argument("CrankGrid: delta_ca <= 0");
    const double steps = 360.0 / delta_ca;
    const auto n = static_cast<std::size_t>(std::llround(steps));
    if (std::abs(steps - static_cast<double>(n)) > 1e-9)
      throw std::invalid_argument("CrankGrid: delta_ca must divide 360");
    CrankGrid g;
    g.delta_ca = delta_ca;
    g.theta.resize(static_cast<Eigen::Index>(n) + 1);
    for (Eigen::Index i = 0; i < g.theta.size(); ++i)
      g.theta(i) = -180.0 + delta_ca * static_cast<double>(i);
    return g;
  }

  Eigen::Index size() const { return theta.size(); }

  // Index of an angle that lies on the grid (within round-off).
  Eigen::Index index_of(double theta_deg) const {
    const double pos = (theta_deg + 180.0) / delta_ca;
    const auto i = static_cast<Eigen::Index>(std::llround(pos));
    if (i < 0 || i >= size() || std::abs(pos - static_cast<double>(i)) > 1e-6)
      throw std::invalid_argument("CrankGrid: angle not on grid");
    return i;
  }

  // Trapezoid quadrature weights in CAD: delta * (1/2, 1, ..., 1, 1/2).
  Eigen::VectorXd trapezoid_weights() const {
    Eigen::VectorXd w = Eigen::VectorXd::Constant(size(), delta_ca);
    w(0) *= 0.5;
    w(size() - 1) *= 0.5;
    return w;
  }
};

// Slider-crank single-cylinder geometry, SI units.
struct EngineGeometry {
  double bore = 0.130;              // [m]
  double stroke = 0.162;            // [m]
  double conrod_length = 0.255;     // [m]
  double compression_ratio = 17.2;  // [-]

  double displacement() const {
    return kPi / 4.0 * bore * bore * stroke;
  }

  double clearance_volume() const {
    if (compression_ratio <= 1.0)
      throw std::invalid_argument("EngineGeometry: compression ratio <= 1");
    return displacement() / (compression_ratio - 1.0);
  }
};

// Instantaneous cylinder volume [m^3] at crank angle theta [CAD aTDC].
inline double cylinder_volume(double theta_deg, const EngineGeometry& geom) {
  const double a = geom.stroke / 2.0;          // crank radius
  const double lam = geom.conrod_length / a;   // rod ratio L/a
  const double th = deg2rad(theta_deg);
  const double s = std::sin(th);
  const double root = std::sqrt(lam * lam - s * s);
  return geom.clearance_volume() +
         0.5 * geom.displacement() * (lam + 1.0 - std::cos(th) - root);
}

// dV/dtheta [m^3/CAD]; analytic derivative of cylinder_volume.
inline double cylinder_volume_derivative(double theta_deg,
                                         const EngineGeometry& geom) {
  const double a = geom.stroke / 2.0;
  const double lam = geom.conrod_length / a;
  const double th = deg2rad(theta_deg);
  const double s = std::sin(th);
  const double root = std::sqrt(lam * lam - s * s);
  const double per_rad =
      0.5 * geom.displacement() * s * (1.0 + std::cos(th) / root);
  return per_rad * kPi / 180.0;
}

inline Eigen::VectorXd volume_profile(const CrankGrid& grid,
                                      const EngineGeometry& geom) {
  Eigen::VectorXd v(grid.size());
  for (Eigen::Index i = 0; i < grid.size(); ++i)
    v(i) = cylinder_volume(grid.theta(i), geom);
  return v;
}

inline Eigen::VectorXd volume_derivative(const CrankGrid& grid,
                                         const EngineGeometry& geom) {
  Eigen::VectorXd dv(grid.size());
  for (Eigen::Index i = 0; i < grid.size(); ++i)
    dv(i) = cylinder_volume_derivative(grid.theta(i), geom);
  return dv;
}

// Weights d with x . d = integral of x dV over the cycle (trapezoid rule),
// i.e. d_a = w_a * dV/dtheta|_a. Cached by callers that integrate often.
inline Eigen::VectorXd dv_quadrature_weights(const CrankGrid& grid,
                                             const EngineGeometry& geom) {
  return grid.trapezoid_weights().cwiseProduct(volume_derivative(grid, geom));
}

}  // namespace calib
