#include <catch2/catch_amalgamated.hpp>

#include "calib/acquisition.hpp"
#include "calib/math/stats.hpp"

using namespace calib;

namespace {

// Minimal rank-one cost operator with a chosen generating vector.
CostOperator op_from(const Eigen::VectorXd& g) {
  CostOperator op;
  op.imep_vector = g;
  op.z1 = g * g.transpose();
  return op;
}

CostDistribution dist(const Eigen::VectorXd& mean, const Eigen::VectorXd& var,
                      const Eigen::VectorXd& w_itc, const Eigen::VectorXd& g) {
  WeightBelief b;
  b.mean = mean;
  b.var = var;
  return CostDistribution::from(b, w_itc, op_from(g));
}

// High-resolution trapezoid of E[max(J* - u^2, 0)] for u ~ N(m, s^2):
// the integrand is supported on |u| < sqrt(J*).
double ei_quadrature(double m, double s, double j_star) {
  if (j_star <= 0.0) return 0.0;
  const double lim = std::sqrt(j_star);
  const int n = 200001;
  const double h = 2.0 * lim / (n - 1);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = -lim + h * i;
    const double f = (j_star - u * u) * normal_pdf((u - m) / s) / s;
    acc += (i == 0 || i == n - 1) ? 0.5 * f : f;
  }
  return acc * h;
}

double pi_closed_form(double m, double s, double j_star) {
  if (j_star <= 0.0) return 0.0;
  const double lim = std::sqrt(j_star);
  return normal_cdf((lim - m) / s) - normal_cdf((-lim - m) / s);
}

}  // namespace

TEST_CASE("cost samples at zero variance are deterministic", "[acquisition]") {
  Eigen::VectorXd g(3), mean(3), witc(3);
  g << 1.0, -2.0, 0.5;
  mean << 0.4, 0.1, -0.3;
  witc << 0.1, 0.0, 0.2;
  const CostDistribution d = dist(mean, Eigen::VectorXd::Zero(3), witc, g);
  const auto samples = sample_cost(d, 64, 7);
  for (double s : samples) CHECK(s == d.deterministic_cost());
}

TEST_CASE("central samples follow chi-squared moments", "[acquisition]") {
  Eigen::VectorXd g(3), var(3);
  g << 2.0, 1.0, -1.0;
  // g-weighted variance sums to one: central chi^2 with one dof.
  for (int i = 0; i < 3; ++i) var(i) = (1.0 / 3.0) / (g(i) * g(i));
  const Eigen::VectorXd mean = Eigen::VectorXd::Ones(3);
  const CostDistribution d = dist(mean, var, mean, g);
  const int n = 4096;
  const auto samples = sample_cost(d, n, 123);
  double acc = 0.0;
  for (double s : samples) acc += s;
  CHECK(acc / n == Catch::Approx(1.0).margin(3.0 / std::sqrt(double(n))));
}

TEST_CASE("sample mean matches the analytic quadratic-form mean",
          "[acquisition]") {
  Rng rng(5);
  for (int rep = 0; rep < 5; ++rep) {
    Eigen::VectorXd g(4), mean(4), var(4), witc(4);
    for (int i = 0; i < 4; ++i) {
      g(i) = rng.normal(0.0, 1.0);
      mean(i) = rng.normal(0.0, 2.0);
      witc(i) = rng.normal(0.0, 2.0);
      var(i) = rng.uniform(0.0, 1.5);
    }
    const CostDistribution d = dist(mean, var, witc, g);
    const double mu_u = g.dot(mean - witc);
    const double var_u = (g.array().square() * var.array()).sum();
    const double expected = mu_u * mu_u + var_u;
    const int n = 40000;
    const auto samples = sample_cost(d, n, 1000 + rep);
    double acc = 0.0;
    for (double s : samples) acc += s;
    CHECK(acc / n ==
          Catch::Approx(expected).epsilon(5.0 / std::sqrt(double(n))));
  }
}

TEST_CASE("full-dimension sampling equals the rank-one reduction",
          "[acquisition]") {
  Eigen::VectorXd g(5), mean(5), var(5), witc(5);
  Rng rng(8);
  for (int i = 0; i < 5; ++i) {
    g(i) = rng.normal();
    mean(i) = rng.normal();
    witc(i) = rng.normal();
    var(i) = rng.uniform(0.1, 2.0);
  }
  const CostDistribution d = dist(mean, var, witc, g);
  const auto sampler = AcquisitionSampler::draw(256, 5, 99);
  const Eigen::VectorXd tau = cost_samples(d, sampler.z_cand);
  for (int j = 0; j < 256; ++j) {
    const Eigen::VectorXd w =
        mean + var.cwiseSqrt().cwiseProduct(sampler.z_cand.row(j).transpose());
    const double u = g.dot(w - witc);
    CHECK(tau(j) == Catch::Approx(u * u).epsilon(1e-12));
  }
}

TEST_CASE("best observed scans feasible history", "[acquisition]") {
  std::vector<ObservedPoint> history;
  CHECK_THROWS(best_observed(history));

  history.push_back({{0.75, -50.0}, 4.0, true});
  CHECK(best_observed(history).j == 4.0);
  CHECK(best_observed(history).index == 0);

  history.push_back({{0.76, -52.0}, 4.0, true});  // tie: earlier wins
  CHECK(best_observed(history).index == 0);

  history.push_back({{0.77, -54.0}, 1.0, false});  // infeasible: ignored
  CHECK(best_observed(history).j == 4.0);

  Rng rng(21);
  for (int k = 0; k < 50; ++k)
    history.push_back({{rng.uniform(0.7, 0.82), rng.uniform(-75.0, -35.0)},
                       rng.uniform(0.5, 9.0), rng.uniform() < 0.7});
  double best = 4.0;
  std::size_t best_idx = 0;
  for (std::size_t i = 0; i < history.size(); ++i)
    if (history[i].feasible && history[i].j_itc < best) {
      best = history[i].j_itc;
      best_idx = i;
    }
  CHECK(best_observed(history).j == best);
  CHECK(best_observed(history).index == best_idx);

  std::vector<ObservedPoint> infeasible(3, {{0.75, -50.0}, 1.0, false});
  CHECK_THROWS(best_observed(infeasible));
}

TEST_CASE("improvement degenerate anchors", "[acquisition]") {
  Eigen::VectorXd g(2), witc(2);
  g << 1.0, 1.0;
  witc << 0.0, 0.0;
  Eigen::VectorXd mean(2);
  mean << 1.0, 1.0;  // deterministic cost (g.mean)^2 = 4
  const CostDistribution cand = dist(mean, Eigen::VectorXd::Zero(2), witc, g);
  const double j_at = cand.deterministic_cost();

  // Candidate sits exactly at the incumbent cost: no strict improvement.
  CHECK(alpha(AcquisitionKind::EI, cand, cand, j_at, 2048, 3) == 0.0);
  CHECK(alpha(AcquisitionKind::PI, cand, cand, j_at, 2048, 3) == 0.0);

  // Candidate sits c below the incumbent: EI = c, PI = 1.
  const double c = 1.25;
  CHECK(alpha(AcquisitionKind::EI, cand, cand, j_at + c, 2048, 3) ==
        Catch::Approx(c).epsilon(1e-14));
  CHECK(alpha(AcquisitionKind::PI, cand, cand, j_at + c, 2048, 3) == 1.0);
}

TEST_CASE("monte-carlo improvement matches the 1-D quadrature oracle",
          "[acquisition]") {
  Rng rng(31);
  for (int rep = 0; rep < 6; ++rep) {
    const double m = rng.uniform(-1.0, 1.0);
    const double s = rng.uniform(0.4, 1.5);
    const double j_star = rng.uniform(0.5, 3.0);
    Eigen::VectorXd g(1), mean(1), var(1), witc(1);
    g << 1.0;
    mean << m;
    var << s * s;
    witc << 0.0;
    const CostDistribution cand = dist(mean, var, witc, g);
    const CostDistribution inc = dist(mean, Eigen::VectorXd::Zero(1), witc, g);

    const double ei = alpha(AcquisitionKind::EI, cand, inc, j_star, 50000,
                            2000 + rep);
    const double ei_ref = ei_quadrature(m, s, j_star);
    CHECK(ei == Catch::Approx(ei_ref).epsilon(0.02).margin(1e-4));

    const double pi = alpha(AcquisitionKind::PI, cand, inc, j_star, 50000,
                            2000 + rep);
    const double pi_ref = pi_closed_form(m, s, j_star);
    CHECK(pi == Catch::Approx(pi_ref).epsilon(0.02).margin(5e-3));
  }
}

TEST_CASE("noiseless incumbent collapses the nested forms", "[acquisition]") {
  Eigen::VectorXd g(3), witc(3);
  g << 1.0, -0.5, 2.0;
  witc << 0.1, 0.2, -0.1;
  Eigen::VectorXd c_mean(3), c_var(3), i_mean(3);
  c_mean << 0.5, 0.0, 0.3;
  c_var << 0.4, 0.2, 0.1;
  i_mean << 0.3, 0.1, 0.0;
  const CostDistribution cand = dist(c_mean, c_var, witc, g);
  const CostDistribution inc = dist(i_mean, Eigen::VectorXd::Zero(3), witc, g);
  const double j_star = inc.deterministic_cost();

  const auto sampler = AcquisitionSampler::draw(4096, 3, 17);
  CHECK(alpha(AcquisitionKind::NEI, cand, inc, j_star, sampler) ==
        alpha(AcquisitionKind::EI, cand, inc, j_star, sampler));
  CHECK(alpha(AcquisitionKind::NPI, cand, inc, j_star, sampler) ==
        alpha(AcquisitionKind::PI, cand, inc, j_star, sampler));
}

TEST_CASE("improvement bounds and determinism", "[acquisition]") {
  Rng rng(44);
  Eigen::VectorXd g(4), witc = Eigen::VectorXd::Zero(4);
  g << 1.0, 0.3, -0.7, 0.5;
  for (int rep = 0; rep < 4; ++rep) {
    Eigen::VectorXd mean(4), var(4), i_mean(4), i_var(4);
    for (int i = 0; i < 4; ++i) {
      mean(i) = rng.normal();
      var(i) = rng.uniform(0.0, 1.0);
      i_mean(i) = rng.normal();
      i_var(i) = rng.uniform(0.0, 0.5);
    }
    const CostDistribution cand = dist(mean, var, witc, g);
    const CostDistribution inc = dist(i_mean, i_var, witc, g);
    const double j_star = rng.uniform(0.1, 2.0);
    for (auto kind : {AcquisitionKind::EI, AcquisitionKind::NEI,
                      AcquisitionKind::PI, AcquisitionKind::NPI}) {
      const double a1 = alpha(kind, cand, inc, j_star, 2048, 5000 + rep);
      const double a2 = alpha(kind, cand, inc, j_star, 2048, 5000 + rep);
      CHECK(a1 == a2);  // bit-identical per seed
      CHECK(a1 >= 0.0);
      if (kind == AcquisitionKind::PI || kind == AcquisitionKind::NPI)
        CHECK(a1 <= 1.0);
    }
  }
  const CostDistribution cand =
      dist(Eigen::VectorXd::Ones(4), Eigen::VectorXd::Ones(4), witc, g);
  CHECK_THROWS(alpha(AcquisitionKind::EI, cand, cand, 1.0, 100, 1));
}

TEST_CASE("EI grows with cost variance at fixed mean cost", "[acquisition]") {
  // Holding E[J] = mu_u^2 + sigma_u^2 fixed while shifting mass from the
  // offset into the noise is a mean-preserving spread of the cost, and the
  // improvement max(J* - tau, 0) is convex in tau, so EI cannot decrease.
  Eigen::VectorXd g(1), witc(1);
  g << 1.0;
  witc << 0.0;
  const double mean_cost = 1.96;
  const double j_star = 1.0;
  const int n = 20000;
  double prev = -1.0;
  for (double sd : {0.2, 0.5, 0.9, 1.2, 1.39}) {
    Eigen::VectorXd mean(1), var(1);
    var << sd * sd;
    mean << std::sqrt(mean_cost - sd * sd);
    const CostDistribution cand = dist(mean, var, witc, g);
    const auto samples = sample_cost(cand, n, 77);
    double acc = 0.0, acc2 = 0.0;
    for (double t : samples) {
      const double h = std::max(j_star - t, 0.0);
      acc += h;
      acc2 += h * h;
    }
    const double ei = acc / n;
    const double se =
        std::sqrt(std::max(acc2 / n - ei * ei, 0.0) / double(n));
    CHECK(ei >= prev - 3.0 * se);
    prev = ei;
  }
}
