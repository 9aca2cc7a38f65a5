#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace calib {

struct NelderMeadResult {
  Eigen::VectorXd x;
  double value = std::numeric_limits<double>::infinity();
  int evals = 0;
};

// Downhill simplex minimization with an evaluation budget. Plain
// Nelder-Mead coefficients; deterministic for a given start.
inline NelderMeadResult nelder_mead(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x0, double step, int max_evals) {
  const int d = static_cast<int>(x0.size());
  NelderMeadResult out;

  std::vector<Eigen::VectorXd> pts(d + 1, x0);
  std::vector<double> val(d + 1);
  for (int i = 0; i < d; ++i) pts[i + 1](i) += step;
  for (int i = 0; i <= d; ++i) {
    val[i] = f(pts[i]);
    ++out.evals;
  }

  std::vector<int> order(d + 1);
  std::iota(order.begin(), order.end(), 0);
  auto sort_simplex = [&]() {
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return val[a] < val[b]; });
  };

  while (out.evals < max_evals) {
    sort_simplex();
    const int best = order[0], worst = order[d], second = order[d - 1];

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
    for (int i = 0; i <= d; ++i)
      if (i != worst) centroid += pts[i];
    centroid /= static_cast<double>(d);

    if ((pts[worst] - pts[best]).norm() < 1e-12) break;

    const Eigen::VectorXd refl = centroid + (centroid - pts[worst]);
    const double f_refl = f(refl);
    ++out.evals;

    if (f_refl < val[best]) {
      const Eigen::VectorXd expd = centroid + 2.0 * (centroid - pts[worst]);
      const double f_expd = f(expd);
      ++out.evals;
      if (f_expd < f_refl) {
        pts[worst] = expd;
        val[worst] = f_expd;
      } else {
        pts[worst] = refl;
        val[worst] = f_refl;
      }
    } else if (f_refl < val[second]) {
      pts[worst] = refl;
      val[worst] = f_refl;
    } else {
      const Eigen::VectorXd contr =
          centroid + 0.5 * ((f_refl < val[worst] ? refl : pts[worst]) - centroid);
      const double f_contr = f(contr);
      ++out.evals;
      if (f_contr < std::min(f_refl, val[worst])) {
        pts[worst] = contr;
        val[worst] = f_contr;
      } else {
        for (int i = 0; i <= d; ++i) {
          if (i == best) continue;
          pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
          val[i] = f(pts[i]);
          ++out.evals;
          if (out.evals >= max_evals) break;
        }
      }
    }
  }

  sort_simplex();
  out.x = pts[order[0]];
  out.value = val[order[0]];
  return out;
}

}  // namespace calib
