#pragma once

#include <Eigen/Core>
#include <Eigen/SVD>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "calib/geometry.hpp"
#include "calib/io.hpp"

namespace calib {

using WeightVector = Eigen::VectorXd;

// One engine cycle's in-cylinder pressure sampled on a crank grid.
struct PressureTrace {
  CrankGrid grid;
  Eigen::VectorXd pressure;  // [Pa]
  double p_im = 1.0e5;       // intake manifold pressure [Pa]
};

inline bool same_grid(const CrankGrid& a, const CrankGrid& b) {
  return a.size() == b.size() && std::abs(a.delta_ca - b.delta_ca) < 1e-12;
}

// Adiabatic motored pressure p_im * (V(-180)/V(theta))^kappa.
inline Eigen::VectorXd motored_pressure(const CrankGrid& grid, double p_im,
                                        double kappa,
                                        const EngineGeometry& geom) {
  if (p_im <= 0.0) throw std::invalid_argument("motored_pressure: p_im <= 0");
  if (kappa <= 1.0 || kappa >= 2.0)
    throw std::invalid_argument("motored_pressure: kappa outside (1, 2)");
  const double v_bdc = cylinder_volume(-180.0, geom);
  Eigen::VectorXd p(grid.size());
  for (Eigen::Index i = 0; i < grid.size(); ++i)
    p(i) = p_im * std::pow(v_bdc / cylinder_volume(grid.theta(i), geom), kappa);
  return p;
}

// Orthonormal principal-component basis of pressure residuals
// (fired minus motored), rows ordered by descending captured variance.
struct PcBasis {
  Eigen::MatrixXd components;    // n_PC x n_CA, unit-norm rows
  Eigen::VectorXd eigenvalues;   // of the residual Gram matrix, descending
  Eigen::VectorXd motored_unit;  // motored pressure for p_im = 1
  CrankGrid grid;
  double kappa = 1.35;

  int n_pc() const { return static_cast<int>(components.rows()); }
};

// Top-n_pc left singular directions of the residual matrix whose column b is
// trace b minus its motored pressure. The thin SVD of the n_CA x n_obs
// residual matrix gives the same vectors as the Gram eigenproblem with
// better conditioning, since n_obs stays far below n_CA here.
inline PcBasis train_basis(const std::vector<PressureTrace>& traces, int n_pc,
                           double kappa, const EngineGeometry& geom) {
  if (n_pc < 1) throw std::invalid_argument("train_basis: n_pc < 1");
  if (static_cast<int>(traces.size()) < n_pc)
    throw std::invalid_argument("train_basis: fewer traces than components");
  const CrankGrid& grid = traces.front().grid;
  for (const auto& t : traces) {
    if (!same_grid(t.grid, grid))
      throw std::invalid_argument("train_basis: mismatched trace grids");
    if (t.pressure.size() != grid.size())
      throw std::invalid_argument("train_basis: trace length != grid size");
  }

  const Eigen::VectorXd motored_unit = motored_pressure(grid, 1.0, kappa, geom);
  Eigen::MatrixXd residuals(grid.size(), static_cast<Eigen::Index>(traces.size()));
  for (Eigen::Index b = 0; b < residuals.cols(); ++b) {
    const auto& t = traces[static_cast<std::size_t>(b)];
    residuals.col(b) = t.pressure - t.p_im * motored_unit;
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(residuals, Eigen::ComputeThinU);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double scale = residuals.cwiseAbs().maxCoeff();
  if (sv(0) <= 1e-12 * std::max(1.0, scale))
    throw std::runtime_error("train_basis: residuals are degenerate (all zero)");

  PcBasis basis;
  basis.grid = grid;
  basis.kappa = kappa;
  basis.motored_unit = motored_unit;
  basis.components = svd.matrixU().leftCols(n_pc).transpose();
  basis.eigenvalues = sv.head(n_pc).array().square();
  // Fix the sign ambiguity of each singular direction: the entry of largest
  // magnitude is made positive so retraining on identical data is stable.
  for (Eigen::Index i = 0; i < basis.components.rows(); ++i) {
    Eigen::Index j;
    basis.components.row(i).cwiseAbs().maxCoeff(&j);
    if (basis.components(i, j) < 0.0) basis.components.row(i) *= -1.0;
  }
  return basis;
}

// w_i = residual . f_i; least-squares optimal because the rows of the basis
// are orthonormal.
inline WeightVector project_weights(const PressureTrace& trace,
                                    const PcBasis& basis) {
  if (!same_grid(trace.grid, basis.grid))
    throw std::invalid_argument("project_weights: grid mismatch");
  return basis.components *
         (trace.pressure - trace.p_im * basis.motored_unit);
}

inline PressureTrace reconstruct(const WeightVector& w, const PcBasis& basis,
                                 double p_im) {
  if (w.size() != basis.components.rows())
    throw std::invalid_argument("reconstruct: weight count != basis size");
  PressureTrace t;
  t.grid = basis.grid;
  t.p_im = p_im;
  t.pressure = p_im * basis.motored_unit + basis.components.transpose() * w;
  return t;
}

// --- basis persistence (text, round-trip exact) ---------------------------

inline void save_basis(const std::string& path, const PcBasis& basis) {
  std::string out;
  out += "# pc_basis v1\n";
  out += "# n_pc," + std::to_string(basis.n_pc()) + "\n";
  out += "# n_ca," + std::to_string(basis.grid.size()) + "\n";
  out += "# delta_ca," + format_double(basis.grid.delta_ca) + "\n";
  out += "# kappa," + format_double(basis.kappa) + "\n";
  auto append_row = [&out](const Eigen::VectorXd& v) {
    for (Eigen::Index j = 0; j < v.size(); ++j) {
      if (j) out += ',';
      out += format_double(v(j));
    }
    out += '\n';
  };
  out += "# eigenvalues\n";
  append_row(basis.eigenvalues);
  out += "# motored_unit\n";
  append_row(basis.motored_unit);
  out += "# components\n";
  for (Eigen::Index i = 0; i < basis.components.rows(); ++i)
    append_row(basis.components.row(i));
  write_text_file(path, out);
}

inline PcBasis load_basis(const std::string& path) {
  const std::string text = read_text_file(path);
  std::vector<std::string_view> lines = split(text, '\n');
  std::size_t k = 0;
  auto next = [&]() -> std::string_view {
    while (k < lines.size() && trim(lines[k]).empty()) ++k;
    if (k >= lines.size()) throw std::runtime_error("load_basis: truncated file");
    return trim(lines[k++]);
  };
  auto header_value = [&](std::string_view key) -> std::string_view {
    const std::string_view line = next();
    const auto fields = split(line, ',');
    if (fields.size() != 2 || trim(fields[0]) != key)
      throw std::runtime_error("load_basis: expected header " + std::string(key));
    return trim(fields[1]);
  };
  auto parse_row = [&](Eigen::Index n) {
    const auto fields = split(next(), ',');
    if (static_cast<Eigen::Index>(fields.size()) != n)
      throw std::runtime_error("load_basis: bad row length");
    Eigen::VectorXd v(n);
    for (Eigen::Index j = 0; j < n; ++j) v(j) = parse_double(trim(fields[j]));
    return v;
  };

  if (next() != "# pc_basis v1") throw std::runtime_error("load_basis: bad magic");
  const auto n_pc = static_cast<Eigen::Index>(parse_int(header_value("# n_pc")));
  const auto n_ca = static_cast<Eigen::Index>(parse_int(header_value("# n_ca")));
  const double delta_ca = parse_double(header_value("# delta_ca"));
  const double kappa = parse_double(header_value("# kappa"));

  PcBasis basis;
  basis.grid = CrankGrid::with_resolution(delta_ca);
  if (basis.grid.size() != n_ca)
    throw std::runtime_error("load_basis: n_ca inconsistent with delta_ca");
  basis.kappa = kappa;
  if (next() != "# eigenvalues") throw std::runtime_error("load_basis: layout");
  basis.eigenvalues = parse_row(n_pc);
  if (next() != "# motored_unit") throw std::runtime_error("load_basis: layout");
  basis.motored_unit = parse_row(n_ca);
  if (next() != "# components") throw std::runtime_error("load_basis: layout");
  basis.components.resize(n_pc, n_ca);
  for (Eigen::Index i = 0; i < n_pc; ++i) basis.components.row(i) = parse_row(n_ca);
  return basis;
}

}  // namespace calib
