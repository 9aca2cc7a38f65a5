#include <catch2/catch_amalgamated.hpp>
#include <cstdio>

#include "calib/math/rng.hpp"
#include "calib/pcd.hpp"

using namespace calib;

namespace {

const EngineGeometry kGeom{};
const double kBar = 1.0e5;

CrankGrid coarse_grid() { return CrankGrid::with_resolution(1.0); }

Eigen::VectorXd gauss_bump(const CrankGrid& g, double center, double width) {
  Eigen::VectorXd b(g.size());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double z = (g.theta(i) - center) / width;
    b(i) = std::exp(-0.5 * z * z);
  }
  return b;
}

PressureTrace trace_from_residual(const CrankGrid& g, const Eigen::VectorXd& r,
                                  double p_im, double kappa) {
  PressureTrace t;
  t.grid = g;
  t.p_im = p_im;
  t.pressure = motored_pressure(g, p_im, kappa, kGeom) + r;
  return t;
}

}  // namespace

TEST_CASE("motored pressure anchors", "[pcd]") {
  const CrankGrid g = coarse_grid();
  const Eigen::VectorXd p = motored_pressure(g, kBar, 1.35, kGeom);
  CHECK(p(g.index_of(-180.0)) == Catch::Approx(kBar).epsilon(1e-12));
  // At TDC the volume ratio equals the compression ratio: 17.2^1.35.
  CHECK(p(g.index_of(0.0)) == Catch::Approx(46.5546861652230 * kBar).epsilon(1e-10));
  // Isothermal limit kappa -> 1+ approaches r * p_im.
  const Eigen::VectorXd p_iso = motored_pressure(g, kBar, 1.0 + 1e-6, kGeom);
  CHECK(p_iso(g.index_of(0.0)) == Catch::Approx(17.2 * kBar).epsilon(1e-4));
  CHECK_THROWS(motored_pressure(g, -1.0, 1.35, kGeom));
  CHECK_THROWS(motored_pressure(g, kBar, 2.5, kGeom));
}

TEST_CASE("motored cycle does no net work", "[pcd]") {
  const CrankGrid g = CrankGrid::with_resolution(0.2);
  const Eigen::VectorXd d = dv_quadrature_weights(g, kGeom);
  const double work = motored_pressure(g, kBar, 1.35, kGeom).dot(d);
  CHECK(std::abs(work) < 1e-6 * kBar * kGeom.displacement());
}

TEST_CASE("degenerate residuals are rejected", "[pcd]") {
  const CrankGrid g = coarse_grid();
  std::vector<PressureTrace> traces(4, trace_from_residual(
      g, Eigen::VectorXd::Zero(g.size()), kBar, 1.35));
  CHECK_THROWS(train_basis(traces, 2, 1.35, kGeom));
}

TEST_CASE("basis spans the generating shapes", "[pcd]") {
  const CrankGrid g = coarse_grid();
  const Eigen::VectorXd b1 = gauss_bump(g, -20.0, 15.0) * 5.0 * kBar;
  const Eigen::VectorXd b2 = gauss_bump(g, 30.0, 25.0) * 2.0 * kBar;
  Rng rng(42);
  std::vector<PressureTrace> traces;
  for (int k = 0; k < 6; ++k) {
    const Eigen::VectorXd r = rng.uniform(-1.0, 1.0) * b1 + rng.uniform(-1.0, 1.0) * b2;
    traces.push_back(trace_from_residual(g, r, kBar, 1.35));
  }
  const PcBasis basis = train_basis(traces, 2, 1.35, kGeom);

  // Everything in span{b1, b2} must reconstruct exactly from two components.
  for (const Eigen::VectorXd* b : {&b1, &b2}) {
    const Eigen::VectorXd w = basis.components * (*b);
    const Eigen::VectorXd back = basis.components.transpose() * w;
    CHECK((back - *b).norm() < 1e-8 * b->norm());
  }
  // And the training set is effectively rank two.
  CHECK(basis.eigenvalues(1) > 0.0);

  // Cross-check the leading subspace against Eigen's own SVD of the
  // two-column generator matrix.
  Eigen::MatrixXd gen(g.size(), 2);
  gen.col(0) = b1;
  gen.col(1) = b2;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(gen, Eigen::ComputeThinU);
  const Eigen::MatrixXd u = svd.matrixU();
  for (Eigen::Index i = 0; i < 2; ++i) {
    const Eigen::VectorXd dir = u.col(i);
    const Eigen::VectorXd back = basis.components.transpose() * (basis.components * dir);
    CHECK((back - dir).norm() < 1e-8);
  }
}

TEST_CASE("orthonormality and energy ordering", "[pcd]") {
  const CrankGrid g = coarse_grid();
  Rng rng(7);
  std::vector<PressureTrace> traces;
  for (int k = 0; k < 12; ++k) {
    Eigen::VectorXd r = Eigen::VectorXd::Zero(g.size());
    for (int m = 0; m < 5; ++m)
      r += rng.normal(0.0, kBar) * gauss_bump(g, rng.uniform(-60.0, 60.0),
                                              rng.uniform(5.0, 40.0));
    traces.push_back(trace_from_residual(g, r, kBar, 1.35));
  }
  const PcBasis basis = train_basis(traces, 6, 1.35, kGeom);
  const Eigen::MatrixXd gram =
      basis.components * basis.components.transpose();
  CHECK((gram - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-8);
  for (int i = 1; i < 6; ++i)
    CHECK(basis.eigenvalues(i) <= basis.eigenvalues(i - 1) * (1.0 + 1e-12));
}

TEST_CASE("projection basics", "[pcd]") {
  const CrankGrid g = coarse_grid();
  Rng rng(3);
  std::vector<PressureTrace> traces;
  for (int k = 0; k < 8; ++k) {
    const Eigen::VectorXd r =
        rng.normal(0.0, kBar) * gauss_bump(g, -10.0, 20.0) +
        rng.normal(0.0, kBar) * gauss_bump(g, 25.0, 12.0) +
        rng.normal(0.0, 0.1 * kBar) * gauss_bump(g, 0.0, 60.0);
    traces.push_back(trace_from_residual(g, r, kBar, 1.35));
  }
  const PcBasis basis = train_basis(traces, 3, 1.35, kGeom);

  SECTION("motored trace projects to zero") {
    const auto t = trace_from_residual(g, Eigen::VectorXd::Zero(g.size()),
                                       2.0 * kBar, 1.35);
    CHECK(project_weights(t, basis).norm() < 1e-9 * kBar);
  }
  SECTION("component direction projects to a unit coordinate") {
    const double c = 3.7 * kBar;
    const auto t = trace_from_residual(
        g, c * basis.components.row(1).transpose(), kBar, 1.35);
    const WeightVector w = project_weights(t, basis);
    CHECK(w(1) == Catch::Approx(c).epsilon(1e-10));
    CHECK(std::abs(w(0)) < 1e-8 * kBar);
    CHECK(std::abs(w(2)) < 1e-8 * kBar);
  }
  SECTION("projection is linear in the residual") {
    const Eigen::VectorXd r1 = gauss_bump(g, 5.0, 8.0) * kBar;
    const Eigen::VectorXd r2 = gauss_bump(g, -40.0, 30.0) * kBar;
    const double a = 1.7, b = -0.4;
    const WeightVector lhs = project_weights(
        trace_from_residual(g, a * r1 + b * r2, kBar, 1.35), basis);
    const WeightVector rhs =
        a * project_weights(trace_from_residual(g, r1, kBar, 1.35), basis) +
        b * project_weights(trace_from_residual(g, r2, kBar, 1.35), basis);
    CHECK((lhs - rhs).norm() < 1e-9 * kBar);
  }
  SECTION("round trip at full rank is the identity") {
    const PcBasis full = train_basis(traces, 8, 1.35, kGeom);
    for (const auto& t : traces) {
      const PressureTrace back =
          reconstruct(project_weights(t, full), full, t.p_im);
      CHECK((back.pressure - t.pressure).norm() < 1e-8 * t.pressure.norm());
    }
  }
  SECTION("truncation leaves exactly the discarded eigen-energy") {
    const PcBasis full = train_basis(traces, 8, 1.35, kGeom);
    const auto& t = traces[5];
    const Eigen::VectorXd resid = t.pressure - t.p_im * basis.motored_unit;
    const WeightVector w3 = project_weights(t, basis);
    const WeightVector w8 = project_weights(t, full);
    const double kept3 = w3.squaredNorm();
    const double kept8 = w8.squaredNorm();
    const double left3 =
        (resid - basis.components.transpose() * w3).squaredNorm();
    CHECK(kept3 + left3 == Catch::Approx(resid.squaredNorm()).epsilon(1e-10));
    CHECK(left3 >= kept8 - kept3 - 1e-6 * kBar * kBar);
  }
}

TEST_CASE("basis save/load round trip", "[pcd][io]") {
  const CrankGrid g = coarse_grid();
  Rng rng(11);
  std::vector<PressureTrace> traces;
  for (int k = 0; k < 6; ++k)
    traces.push_back(trace_from_residual(
        g, rng.normal(0.0, kBar) * gauss_bump(g, rng.uniform(-30.0, 30.0), 18.0) +
           rng.normal(0.0, kBar) * gauss_bump(g, 40.0, 9.0),
        kBar, 1.35));
  const PcBasis basis = train_basis(traces, 4, 1.35, kGeom);
  const std::string path = "pcd_roundtrip.csv";
  save_basis(path, basis);
  const PcBasis loaded = load_basis(path);
  std::remove(path.c_str());

  CHECK(loaded.n_pc() == basis.n_pc());
  CHECK(loaded.kappa == basis.kappa);
  CHECK(loaded.grid.size() == basis.grid.size());
  CHECK((loaded.components - basis.components).cwiseAbs().maxCoeff() == 0.0);
  CHECK((loaded.eigenvalues - basis.eigenvalues).cwiseAbs().maxCoeff() == 0.0);
  CHECK((loaded.motored_unit - basis.motored_unit).cwiseAbs().maxCoeff() == 0.0);
}
