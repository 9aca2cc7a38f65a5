#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "calib/gpr.hpp"
#include "calib/itc.hpp"
#include "calib/math/rng.hpp"

namespace calib {

enum class AcquisitionKind { EI, NEI, PI, NPI };

inline AcquisitionKind parse_kind(const std::string& s) {
  if (s == "ei") return AcquisitionKind::EI;
  if (s == "nei") return AcquisitionKind::NEI;
  if (s == "pi") return AcquisitionKind::PI;
  if (s == "npi") return AcquisitionKind::NPI;
  throw std::invalid_argument("unknown acquisition kind '" + s + "'");
}

inline std::string to_string(AcquisitionKind k) {
  switch (k) {
    case AcquisitionKind::EI: return "ei";
    case AcquisitionKind::NEI: return "nei";
    case AcquisitionKind::PI: return "pi";
    case AcquisitionKind::NPI: return "npi";
  }
  return "?";
}

// Distribution of the cost J induced by a Gaussian weight belief. Because
// Z1 is rank one, J = (g . (w - w_itc))^2 with a scalar Gaussian inside the
// square, captured here by mu_u and the per-component noise loadings.
struct CostDistribution {
  Eigen::VectorXd mean;   // weight belief mean
  Eigen::VectorXd var;    // weight belief variance (diagonal), >= 0
  WeightVector w_itc;
  CostOperator op;

  double mu_u = 0.0;          // g . (mean - w_itc)
  Eigen::VectorXd loadings;   // g_i * sqrt(var_i)

  static CostDistribution from(const WeightBelief& belief,
                               const WeightVector& w_itc,
                               const CostOperator& op) {
    if ((belief.var.array() < 0.0).any())
      throw std::invalid_argument("CostDistribution: negative variance");
    CostDistribution d;
    d.mean = belief.mean;
    d.var = belief.var;
    d.w_itc = w_itc;
    d.op = op;
    d.mu_u = op.imep_vector.dot(belief.mean - w_itc);
    d.loadings = op.imep_vector.cwiseProduct(belief.var.cwiseSqrt());
    return d;
  }

  double deterministic_cost() const { return mu_u * mu_u; }
};

// Shared standard-normal draws: one block for candidate distributions and
// an independent block for the incumbent, so the nested (noisy) acquisition
// pairs independent samples while all candidates in one optimizer sweep see
// common random numbers.
struct AcquisitionSampler {
  Eigen::MatrixXd z_cand;  // n_mc x n_PC
  Eigen::MatrixXd z_inc;   // n_mc x n_PC

  static AcquisitionSampler draw(int n_mc, int n_pc, std::uint64_t seed) {
    if (n_mc < 1) throw std::invalid_argument("AcquisitionSampler: n_mc < 1");
    AcquisitionSampler s;
    Rng rc(Rng::mix(seed, 1));
    Rng ri(Rng::mix(seed, 2));
    s.z_cand.resize(n_mc, n_pc);
    s.z_inc.resize(n_mc, n_pc);
    for (int j = 0; j < n_mc; ++j)
      for (int i = 0; i < n_pc; ++i) s.z_cand(j, i) = rc.normal();
    for (int j = 0; j < n_mc; ++j)
      for (int i = 0; i < n_pc; ++i) s.z_inc(j, i) = ri.normal();
    return s;
  }
};

// Cost samples tau_j = (mu_u + z_j . loadings)^2 for a given normal block.
inline Eigen::VectorXd cost_samples(const CostDistribution& d,
                                    const Eigen::MatrixXd& z) {
  if (z.cols() != d.loadings.size())
    throw std::invalid_argument("cost_samples: dimension mismatch");
  Eigen::VectorXd u = (z * d.loadings).array() + d.mu_u;
  return u.array().square();
}

// Monte-Carlo draws of J; spec'd entry point for distribution checks.
inline std::vector<double> sample_cost(const CostDistribution& d, int n,
                                       std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_cost: n < 1");
  Rng rng(Rng::mix(seed, 1));
  Eigen::MatrixXd z(n, d.loadings.size());
  for (int j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < d.loadings.size(); ++i) z(j, i) = rng.normal();
  const Eigen::VectorXd tau = cost_samples(d, z);
  return std::vector<double>(tau.data(), tau.data() + tau.size());
}

struct ObservedPoint {
  Eigen::Vector2d s;  // (BR, SOI_DI)
  double j_itc = 0.0;
  bool feasible = true;
};

struct BestObserved {
  double j = 0.0;
  Eigen::Vector2d s;
  std::size_t index = 0;
};

// Minimum observed cost among feasible history entries; ties keep the
// earliest entry.
inline BestObserved best_observed(const std::vector<ObservedPoint>& history) {
  const ObservedPoint* best = nullptr;
  std::size_t best_idx = 0;
  for (std::size_t i = 0; i < history.size(); ++i) {
    const ObservedPoint& p = history[i];
    if (!p.feasible) continue;
    if (best == nullptr || p.j_itc < best->j_itc) {
      best = &p;
      best_idx = i;
    }
  }
  if (best == nullptr)
    throw std::runtime_error(
        "best_observed: no feasible history yet; seed the loop with the "
        "initial operating point first");
  return {best->j_itc, best->s, best_idx};
}

// Improvement statistics from candidate samples. The nested variants pair
// candidate draws with independent incumbent draws; the plain variants
// compare against the fixed best observed cost. Improvement means a cost
// decrease throughout.
inline double improvement_value(AcquisitionKind kind,
                                const Eigen::VectorXd& tau_cand,
                                const Eigen::VectorXd* tau_inc,
                                double j_star) {
  const auto n = static_cast<double>(tau_cand.size());
  switch (kind) {
    case AcquisitionKind::EI:
      return (j_star - tau_cand.array()).max(0.0).sum() / n;
    case AcquisitionKind::PI:
      return (tau_cand.array() < j_star).cast<double>().sum() / n;
    case AcquisitionKind::NEI: {
      if (tau_inc == nullptr || tau_inc->size() != tau_cand.size())
        throw std::invalid_argument("improvement_value: incumbent samples");
      return (tau_inc->array() - tau_cand.array()).max(0.0).sum() / n;
    }
    case AcquisitionKind::NPI: {
      if (tau_inc == nullptr || tau_inc->size() != tau_cand.size())
        throw std::invalid_argument("improvement_value: incumbent samples");
      return (tau_cand.array() < tau_inc->array()).cast<double>().sum() / n;
    }
  }
  throw std::logic_error("improvement_value: bad kind");
}

inline double alpha(AcquisitionKind kind, const CostDistribution& candidate,
                    const CostDistribution& incumbent, double j_star,
                    const AcquisitionSampler& sampler) {
  const Eigen::VectorXd tau = cost_samples(candidate, sampler.z_cand);
  if (kind == AcquisitionKind::EI || kind == AcquisitionKind::PI)
    return improvement_value(kind, tau, nullptr, j_star);
  const Eigen::VectorXd tau_star = cost_samples(incumbent, sampler.z_inc);
  return improvement_value(kind, tau, &tau_star, j_star);
}

inline double alpha(AcquisitionKind kind, const CostDistribution& candidate,
                    const CostDistribution& incumbent, double j_star, int n_mc,
                    std::uint64_t seed) {
  if (n_mc < 1000)
    throw std::invalid_argument("alpha: n_mc below the sampling floor");
  const auto sampler = AcquisitionSampler::draw(
      n_mc, static_cast<int>(candidate.mean.size()), seed);
  return alpha(kind, candidate, incumbent, j_star, sampler);
}

}  // namespace calib
