#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "calib/math/nelder_mead.hpp"
#include "calib/math/rng.hpp"
#include "calib/math/stats.hpp"

namespace calib {

// Matern-3/2 kernel with per-dimension (ARD) length scales.
struct Hyperparams {
  double phi_f = 1.0;                        // signal scale
  Eigen::Array2d length{1.0, 1.0};           // per input dimension

  bool valid() const {
    return phi_f > 0.0 && (length > 0.0).all();
  }
};

inline double kernel(const Eigen::Vector2d& x, const Eigen::Vector2d& y,
                     const Hyperparams& hp) {
  const Eigen::Array2d d = (x - y).array() / hp.length;
  const double rho = std::sqrt((d * d).sum());
  const double a = std::sqrt(3.0) * rho;
  return hp.phi_f * hp.phi_f * (1.0 + a) * std::exp(-a);
}

// Summarized observations feeding the weight model: per setting, the mean
// and variance of the PC weights over the buffered cycles.
struct TrainingSet {
  Eigen::MatrixXd inputs;        // n x 2, raw (BR, SOI_DI)
  Eigen::MatrixXd weight_means;  // n x n_PC
  Eigen::MatrixXd weight_vars;   // n x n_PC, >= 0

  Eigen::Index size() const { return inputs.rows(); }
  Eigen::Index n_pc() const { return weight_means.cols(); }

  void append(const Eigen::Vector2d& s, const Eigen::VectorXd& mean,
              const Eigen::VectorXd& var) {
    if (inputs.rows() == 0 && inputs.cols() == 0) {
      inputs.resize(0, 2);
      weight_means.resize(0, mean.size());
      weight_vars.resize(0, var.size());
    }
    if (mean.size() != weight_means.cols() || var.size() != weight_vars.cols())
      throw std::invalid_argument("TrainingSet: inconsistent widths");
    if ((var.array() < 0.0).any())
      throw std::invalid_argument("TrainingSet: negative weight variance");
    const Eigen::Index n = inputs.rows();
    inputs.conservativeResize(n + 1, 2);
    weight_means.conservativeResize(n + 1, Eigen::NoChange);
    weight_vars.conservativeResize(n + 1, Eigen::NoChange);
    inputs.row(n) = s.transpose();
    weight_means.row(n) = mean.transpose();
    weight_vars.row(n) = var.transpose();
  }
};

struct WeightBelief {
  Eigen::VectorXd mean;  // n_PC
  Eigen::VectorXd var;   // n_PC, diagonal of the weight covariance
};

// One scalar-output GP in standardized coordinates, with the fixed
// per-point noise variances on the Gram diagonal.
class ScalarGpr {
 public:
  // Builds the posterior factorization for fixed hyperparameters, working
  // directly in raw units with a zero prior mean (no standardization).
  // Escalates jitter when the noisy Gram matrix is not numerically PD, and
  // rejects data that even jitter cannot reconcile (identical inputs with
  // contradicting noiseless outputs).
  static ScalarGpr build(const Eigen::MatrixXd& inputs,
                         const Eigen::VectorXd& outputs,
                         const Eigen::VectorXd& noise_var,
                         const Hyperparams& hp) {
    ScalarGpr m;
    m.init_identity(inputs, outputs);
    m.hp_ = hp;
    m.factorize(noise_var, true);
    return m;
  }

  // Maximizes the log marginal likelihood over log hyperparameters with a
  // multi-start simplex search: one warm start (or unit scales) plus four
  // random restarts sharing the evaluation budget.
  static ScalarGpr fit(const Eigen::MatrixXd& inputs,
                       const Eigen::VectorXd& outputs,
                       const Eigen::VectorXd& noise_var, int budget, Rng& rng,
                       const Hyperparams* warm = nullptr) {
    if (inputs.rows() < 3)
      throw std::invalid_argument("ScalarGpr::fit: need at least 3 points");
    ScalarGpr probe;
    probe.init_scaling(inputs, outputs);

    auto objective = [&probe, &noise_var](const Eigen::VectorXd& log_hp) {
      if (log_hp.cwiseAbs().maxCoeff() > std::log(1e3))
        return std::numeric_limits<double>::infinity();
      probe.hp_ = from_log(log_hp);
      if (!probe.factorize(noise_var, false))
        return std::numeric_limits<double>::infinity();
      return -probe.log_marginal_;
    };

    const int n_starts = 5;
    const int per_start = std::max(10, budget / n_starts);
    Eigen::VectorXd best_log(3);
    double best_val = std::numeric_limits<double>::infinity();
    for (int s = 0; s < n_starts; ++s) {
      Eigen::VectorXd x0(3);
      if (s == 0 && warm != nullptr && warm->valid())
        x0 = to_log(*warm);
      else if (s == 0)
        x0.setZero();
      else
        for (int i = 0; i < 3; ++i)
          x0(i) = rng.uniform(std::log(0.1), std::log(10.0));
      const NelderMeadResult res = nelder_mead(objective, x0, 0.4, per_start);
      if (res.value < best_val) {
        best_val = res.value;
        best_log = res.x;
      }
    }
    if (!std::isfinite(best_val))
      throw std::runtime_error("ScalarGpr::fit: no viable hyperparameters");

    ScalarGpr m;
    m.init_scaling(inputs, outputs);
    m.hp_ = from_log(best_log);
    m.factorize(noise_var, true);
    return m;
  }

  // Posterior of the latent function in raw units: {mean, variance}.
  std::pair<double, double> predict(const Eigen::Vector2d& s) const {
    const Eigen::Vector2d xs = scale_input(s);
    const Eigen::Index n = xs_.rows();
    Eigen::VectorXd k_star(n);
    for (Eigen::Index i = 0; i < n; ++i)
      k_star(i) = kernel(xs_.row(i).transpose(), xs, hp_);
    const double mean_s = k_star.dot(alpha_);
    const Eigen::VectorXd v = chol_.matrixL().solve(k_star);
    const double var_s = std::max(0.0, hp_.phi_f * hp_.phi_f - v.squaredNorm());
    return {out_mean_ + out_std_ * mean_s, out_std_ * out_std_ * var_s};
  }

  const Hyperparams& hyperparams() const { return hp_; }
  double log_marginal() const { return log_marginal_; }
  double jitter() const { return jitter_; }

 private:
  static Eigen::VectorXd to_log(const Hyperparams& hp) {
    Eigen::VectorXd v(3);
    v << std::log(hp.phi_f), std::log(hp.length(0)), std::log(hp.length(1));
    return v;
  }

  static Hyperparams from_log(const Eigen::VectorXd& v) {
    Hyperparams hp;
    hp.phi_f = std::exp(v(0));
    hp.length(0) = std::exp(v(1));
    hp.length(1) = std::exp(v(2));
    return hp;
  }

  Eigen::Vector2d scale_input(const Eigen::Vector2d& s) const {
    return (s - in_mean_).cwiseQuotient(in_std_);
  }

  void init_identity(const Eigen::MatrixXd& inputs,
                     const Eigen::VectorXd& outputs) {
    if (inputs.rows() != outputs.size() || inputs.cols() != 2)
      throw std::invalid_argument("ScalarGpr: bad training shapes");
    in_mean_.setZero();
    in_std_.setOnes();
    out_mean_ = 0.0;
    out_std_ = 1.0;
    xs_ = inputs;
    ys_ = outputs;
  }

  void init_scaling(const Eigen::MatrixXd& inputs,
                    const Eigen::VectorXd& outputs) {
    if (inputs.rows() != outputs.size() || inputs.cols() != 2)
      throw std::invalid_argument("ScalarGpr: bad training shapes");
    const auto n = static_cast<double>(inputs.rows());
    in_mean_ = inputs.colwise().mean().transpose();
    out_mean_ = outputs.mean();
    for (int j = 0; j < 2; ++j) {
      const double ss = (inputs.col(j).array() - in_mean_(j)).square().sum();
      in_std_(j) = n > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      if (in_std_(j) < 1e-12) in_std_(j) = 1.0;  // constant column
    }
    const double ss = (outputs.array() - out_mean_).square().sum();
    out_std_ = n > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    if (out_std_ < 1e-12) out_std_ = 1.0;  // constant output

    xs_.resize(inputs.rows(), 2);
    for (Eigen::Index i = 0; i < inputs.rows(); ++i)
      xs_.row(i) = scale_input(inputs.row(i).transpose()).transpose();
    ys_ = (outputs.array() - out_mean_) / out_std_;
  }

  // Returns false (or throws when `strict`) if no jitter level yields a
  // usable factorization. Noise variances arrive in raw units.
  bool factorize(const Eigen::VectorXd& noise_var, bool strict) {
    const Eigen::Index n = xs_.rows();
    if (noise_var.size() != n)
      throw std::invalid_argument("ScalarGpr: noise length mismatch");
    Eigen::MatrixXd gram(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        const double k = kernel(xs_.row(i).transpose(),
                                xs_.row(j).transpose(), hp_);
        gram(i, j) = k;
        gram(j, i) = k;
      }
    }
    const double out_var = out_std_ * out_std_;
    Eigen::VectorXd noise_scaled = noise_var / out_var;
    const double sig2 = hp_.phi_f * hp_.phi_f;

    for (double jitter : {0.0, 1e-8 * sig2, 1e-7 * sig2, 1e-6 * sig2,
                          1e-5 * sig2, 1e-4 * sig2}) {
      Eigen::MatrixXd k_noisy = gram;
      k_noisy.diagonal() += noise_scaled;
      k_noisy.diagonal().array() += jitter;
      chol_.compute(k_noisy);
      if (chol_.info() != Eigen::Success) continue;
      alpha_ = chol_.solve(ys_);
      if (!alpha_.allFinite()) continue;

      // Noiseless points must still be interpolated: jitter (or a sloppy
      // factorization of a singular Gram) may produce finite alpha on
      // contradictory data, but then the posterior mean misses the
      // training outputs and we reject the level.
      const Eigen::VectorXd post_at_train = gram * alpha_;
      const double tol = 1e-5 * std::max(1.0, ys_.cwiseAbs().maxCoeff());
      bool consistent = true;
      for (Eigen::Index i = 0; i < n && consistent; ++i)
        if (noise_scaled(i) < 1e-10 &&
            std::abs(ys_(i) - post_at_train(i)) > tol)
          consistent = false;
      if (!consistent) continue;

      jitter_ = jitter;
      const double half_logdet =
          Eigen::MatrixXd(chol_.matrixL()).diagonal().array().log().sum();
      log_marginal_ = -0.5 * ys_.dot(alpha_) - half_logdet -
                      0.5 * static_cast<double>(n) * std::log(2.0 * kPi);
      return true;
    }
    if (strict)
      throw std::runtime_error(
          "ScalarGpr: Gram matrix not positive definite for any jitter "
          "(contradictory noiseless observations?)");
    return false;
  }

  Eigen::Vector2d in_mean_{0.0, 0.0};
  Eigen::Vector2d in_std_{1.0, 1.0};
  double out_mean_ = 0.0;
  double out_std_ = 1.0;
  Eigen::MatrixXd xs_;
  Eigen::VectorXd ys_;
  Hyperparams hp_;
  Eigen::LLT<Eigen::MatrixXd> chol_;
  Eigen::VectorXd alpha_;
  double jitter_ = 0.0;
  double log_marginal_ = -std::numeric_limits<double>::infinity();
};

// Independent per-PC scalar models over a shared input set.
struct WeightGpr {
  std::vector<ScalarGpr> per_pc;

  WeightBelief predict(const Eigen::Vector2d& s) const {
    WeightBelief b;
    const auto n = static_cast<Eigen::Index>(per_pc.size());
    b.mean.resize(n);
    b.var.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto [m, v] = per_pc[static_cast<std::size_t>(i)].predict(s);
      b.mean(i) = m;
      b.var(i) = v;
    }
    return b;
  }
};

inline WeightGpr fit_weight_gpr(const TrainingSet& ts, int budget_per_pc,
                                std::uint64_t seed,
                                const WeightGpr* warm = nullptr) {
  WeightGpr model;
  model.per_pc.reserve(static_cast<std::size_t>(ts.n_pc()));
  for (Eigen::Index i = 0; i < ts.n_pc(); ++i) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(i)));
    const Hyperparams* w =
        warm != nullptr && i < static_cast<Eigen::Index>(warm->per_pc.size())
            ? &warm->per_pc[static_cast<std::size_t>(i)].hyperparams()
            : nullptr;
    model.per_pc.push_back(ScalarGpr::fit(ts.inputs, ts.weight_means.col(i),
                                          ts.weight_vars.col(i),
                                          budget_per_pc, rng, w));
  }
  return model;
}

}  // namespace calib
