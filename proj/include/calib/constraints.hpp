#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <stdexcept>

#include "calib/geometry.hpp"
#include "calib/gpr.hpp"
#include "calib/itc.hpp"
#include "calib/math/stats.hpp"
#include "calib/pcd.hpp"

namespace calib {

// Operability and safety limits. The IMEP band is imep_req*(1 +/- cov_ub/2),
// expressed in work units (times V_d) when compared against w . g.
struct ConstraintSpec {
  double imep_req = 4.0e5;  // [Pa] gross IMEP target
  double cov_ub = 0.10;     // allowed coefficient of variation of IMEP_g
  double p_ub = 200.0e5;    // [Pa] peak pressure limit
  double dp_ub = 25.0e5;    // [Pa/CAD] pressure rise limit
  double beta_max = 0.05;   // total violation probability threshold

  void validate() const {
    if (imep_req <= 0 || cov_ub <= 0 || p_ub <= 0 || dp_ub <= 0)
      throw std::invalid_argument("ConstraintSpec: limits must be positive");
    if (beta_max <= 0.0 || beta_max >= 1.0)
      throw std::invalid_argument("ConstraintSpec: beta_max outside (0,1)");
  }
};

// Gaussian summary of the four constraint functions, violation-positive:
// h > 0 means the constraint is broken.
//   h1: IMEP below the band     h2: IMEP above the band
//   h3: peak pressure limit     h4: pressure rise limit
struct ConstraintStats {
  std::array<double, 4> mu{};
  std::array<double, 4> var{};
  double work_mean = 0.0;    // w_hat . g [J], diagnostics
  double theta_pmax = 0.0;   // [CAD] location of the predicted peak pressure
  double theta_dpmax = 0.0;  // [CAD] location of the predicted max rise rate
};

// Immutable per-run context: everything constraint evaluation needs besides
// the candidate belief. Building it once avoids re-deriving the component
// derivative matrix for every optimizer particle.
struct ConstraintContext {
  ConstraintSpec spec;
  CostOperator op;
  double v_d = 0.0;              // displacement [m^3]
  Eigen::MatrixXd components;    // n_PC x n_CA (copy of the basis rows)
  Eigen::MatrixXd dcomponents;   // central differences, [1/CAD]
  Eigen::VectorXd p_mot;         // motored means at the run's p_im [Pa]
  Eigen::VectorXd dp_mot;        // central differences, [Pa/CAD]
  Eigen::VectorXd theta;         // grid angles [CAD]
};

inline ConstraintContext make_constraint_context(const PcBasis& basis,
                                                 const CostOperator& op,
                                                 const ConstraintSpec& spec,
                                                 const EngineGeometry& geom,
                                                 double p_im) {
  spec.validate();
  ConstraintContext ctx;
  ctx.spec = spec;
  ctx.op = op;
  ctx.v_d = geom.displacement();
  ctx.components = basis.components;
  ctx.p_mot = p_im * basis.motored_unit;
  ctx.theta = basis.grid.theta;
  const Eigen::Index n = basis.grid.size();
  const double two_delta = 2.0 * basis.grid.delta_ca;
  ctx.dcomponents = Eigen::MatrixXd::Zero(basis.components.rows(), n);
  ctx.dp_mot = Eigen::VectorXd::Zero(n);
  for (Eigen::Index a = 1; a + 1 < n; ++a) {
    ctx.dcomponents.col(a) =
        (basis.components.col(a + 1) - basis.components.col(a - 1)) / two_delta;
    ctx.dp_mot(a) = (ctx.p_mot(a + 1) - ctx.p_mot(a - 1)) / two_delta;
  }
  return ctx;
}

inline ConstraintStats constraint_stats(const WeightBelief& belief,
                                        const ConstraintContext& ctx) {
  if (belief.mean.size() != ctx.components.rows())
    throw std::invalid_argument("constraint_stats: belief size mismatch");
  ConstraintStats st;
  const Eigen::VectorXd& g = ctx.op.imep_vector;

  // IMEP band in work units.
  const double work = g.dot(belief.mean);
  const double work_var = (g.array().square() * belief.var.array()).sum();
  const double target = ctx.spec.imep_req * ctx.v_d;
  const double half_band = 0.5 * ctx.spec.cov_ub * target;
  st.work_mean = work;
  st.mu[0] = (target - half_band) - work;  // below the band
  st.mu[1] = work - (target + half_band);  // above the band
  st.var[0] = work_var;
  st.var[1] = work_var;

  // Peak pressure of the predicted mean trace.
  const Eigen::VectorXd p_mean =
      ctx.p_mot + ctx.components.transpose() * belief.mean;
  Eigen::Index a_p = 0;
  const double p_peak = p_mean.maxCoeff(&a_p);
  st.theta_pmax = ctx.theta(a_p);
  st.mu[2] = p_peak - ctx.spec.p_ub;
  st.var[2] =
      (ctx.components.col(a_p).array().square() * belief.var.array()).sum();

  // Maximum pressure rise rate; central differences exist on the interior.
  const Eigen::VectorXd dp_mean =
      ctx.dp_mot + ctx.dcomponents.transpose() * belief.mean;
  const Eigen::Index n = dp_mean.size();
  Eigen::Index a_dp = 1;
  for (Eigen::Index a = 2; a + 1 < n; ++a)
    if (dp_mean(a) > dp_mean(a_dp)) a_dp = a;
  st.theta_dpmax = ctx.theta(a_dp);
  st.mu[3] = dp_mean(a_dp) - ctx.spec.dp_ub;
  st.var[3] =
      (ctx.dcomponents.col(a_dp).array().square() * belief.var.array()).sum();
  return st;
}

// Convenience form matching the one-shot call pattern.
inline ConstraintStats constraint_stats(const WeightBelief& belief,
                                        const PcBasis& basis,
                                        const CostOperator& op,
                                        const ConstraintSpec& spec,
                                        const EngineGeometry& geom,
                                        double p_im) {
  return constraint_stats(belief,
                          make_constraint_context(basis, op, spec, geom, p_im));
}

struct ViolationProbability {
  std::array<double, 4> beta_tilde{};  // per-constraint violation probability
  double beta4 = 0.0;                  // total via the recursion
};

// beta_i = beta_{i-1} (1 - bt_i) + bt_i with beta_0 = 0; algebraically
// 1 - prod(1 - bt_i) for independent constraints.
inline double beta_recursion(const std::array<double, 4>& beta_tilde) {
  double beta = 0.0;
  for (double bt : beta_tilde) beta = beta * (1.0 - bt) + bt;
  return beta;
}

inline ViolationProbability violation_probability(const ConstraintStats& st) {
  ViolationProbability vp;
  for (int i = 0; i < 4; ++i) {
    if (st.var[i] > 0.0)
      vp.beta_tilde[i] = normal_cdf(st.mu[i] / std::sqrt(st.var[i]));
    else
      vp.beta_tilde[i] = st.mu[i] > 0.0 ? 1.0 : 0.0;
  }
  vp.beta4 = beta_recursion(vp.beta_tilde);
  return vp;
}

inline bool is_feasible(const ConstraintStats& st, const ConstraintSpec& spec) {
  return violation_probability(st).beta4 <= spec.beta_max;
}

}  // namespace calib
