#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "calib/acquisition.hpp"
#include "calib/config.hpp"
#include "calib/constraints.hpp"
#include "calib/engine_sim.hpp"
#include "calib/geometry.hpp"
#include "calib/gpr.hpp"
#include "calib/io.hpp"
#include "calib/itc.hpp"
#include "calib/math/rng.hpp"
#include "calib/pcd.hpp"
#include "calib/pso.hpp"

namespace calib {

// --- history ----------------------------------------------------------------

// One applied candidate: controller transient, fixed-fuel buffer, weight
// summary, observed metrics, and the acquisition bookkeeping that chose it.
struct HistoryRecord {
  int k = 0;                   // 0 is the initial point, then one per BO step
  double br = 0.0;
  double soi = 0.0;
  double q = 0.0;              // controller-converged fuel energy [J/cycle]
  int cycles_ctrl = 0;         // transient cycles before the buffer
  int cycles_buffer = 0;       // cycles at frozen fuel feeding the summary
  double engine_time_s = 0.0;  // cumulative engine seconds at record end
  double j_itc = 0.0;          // cost of the mean weights at the converged q
  double imep = 0.0;           // buffer mean [Pa]
  double cov = 0.0;            // buffer std/mean of IMEP_g
  double p_max = 0.0;          // worst buffered peak pressure [Pa]
  double dpdth_max = 0.0;      // worst buffered rise rate [Pa/CAD]
  double gie = 0.0;            // imep * V_d / q
  bool feasible = false;       // measured stats inside every limit
  bool saturated = false;      // controller pinned at a fuel bound
  double alpha = 0.0;          // acquisition value of the winning candidate
  double beta_pred = 0.0;      // predicted violation probability
  Eigen::VectorXd w_mean;      // per-PC buffer means
  Eigen::VectorXd w_var;       // per-PC buffer sample variances
};

inline std::string history_header(int n_pc) {
  std::string h =
      "k,br,soi,q,cycles_ctrl,cycles_buffer,engine_time_s,j_itc,imep,cov,"
      "p_max,dpdth_max,gie,feasible,saturated,alpha,beta_pred";
  for (int i = 0; i < n_pc; ++i) h += ",w" + std::to_string(i);
  for (int i = 0; i < n_pc; ++i) h += ",s" + std::to_string(i);
  return h;
}

inline std::string history_row(const HistoryRecord& r) {
  std::string line = std::to_string(r.k);
  line += ',' + format_double(r.br);
  line += ',' + format_double(r.soi);
  line += ',' + format_double(r.q);
  line += ',' + std::to_string(r.cycles_ctrl);
  line += ',' + std::to_string(r.cycles_buffer);
  line += ',' + format_double(r.engine_time_s);
  line += ',' + format_double(r.j_itc);
  line += ',' + format_double(r.imep);
  line += ',' + format_double(r.cov);
  line += ',' + format_double(r.p_max);
  line += ',' + format_double(r.dpdth_max);
  line += ',' + format_double(r.gie);
  line += r.feasible ? ",1" : ",0";
  line += r.saturated ? ",1" : ",0";
  line += ',' + format_double(r.alpha);
  line += ',' + format_double(r.beta_pred);
  for (Eigen::Index i = 0; i < r.w_mean.size(); ++i)
    line += ',' + format_double(r.w_mean(i));
  for (Eigen::Index i = 0; i < r.w_var.size(); ++i)
    line += ',' + format_double(r.w_var(i));
  return line;
}

inline std::string write_history_csv(const std::vector<HistoryRecord>& history,
                                     int n_pc) {
  std::string text = history_header(n_pc) + '\n';
  for (const HistoryRecord& r : history) {
    if (r.w_mean.size() != n_pc || r.w_var.size() != n_pc)
      throw std::invalid_argument("write_history_csv: PC count mismatch");
    text += history_row(r) + '\n';
  }
  return text;
}

inline std::vector<HistoryRecord> parse_history_csv(const std::string& text) {
  std::vector<std::string_view> lines = split(text, '\n');
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw std::runtime_error("history CSV: empty file");

  const std::vector<std::string_view> head = split(trim(lines[0]), ',');
  constexpr std::size_t kFixed = 17;
  if (head.size() < kFixed || (head.size() - kFixed) % 2 != 0)
    throw std::runtime_error("history CSV: bad header");
  const int n_pc = static_cast<int>(head.size() - kFixed) / 2;
  if (std::string(trim(lines[0])) != history_header(n_pc))
    throw std::runtime_error("history CSV: unexpected header");

  auto flag = [](std::string_view f, const char* what) {
    if (f == "1") return true;
    if (f == "0") return false;
    throw std::runtime_error(std::string("history CSV: bad ") + what);
  };

  std::vector<HistoryRecord> out;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::vector<std::string_view> f = split(trim(lines[li]), ',');
    if (f.size() != head.size())
      throw std::runtime_error("history CSV: wrong field count on line " +
                               std::to_string(li + 1));
    HistoryRecord r;
    r.k = static_cast<int>(parse_int(f[0]));
    r.br = parse_double(f[1]);
    r.soi = parse_double(f[2]);
    r.q = parse_double(f[3]);
    r.cycles_ctrl = static_cast<int>(parse_int(f[4]));
    r.cycles_buffer = static_cast<int>(parse_int(f[5]));
    r.engine_time_s = parse_double(f[6]);
    r.j_itc = parse_double(f[7]);
    r.imep = parse_double(f[8]);
    r.cov = parse_double(f[9]);
    r.p_max = parse_double(f[10]);
    r.dpdth_max = parse_double(f[11]);
    r.gie = parse_double(f[12]);
    r.feasible = flag(f[13], "feasible flag");
    r.saturated = flag(f[14], "saturated flag");
    r.alpha = parse_double(f[15]);
    r.beta_pred = parse_double(f[16]);
    r.w_mean.resize(n_pc);
    r.w_var.resize(n_pc);
    for (int i = 0; i < n_pc; ++i) {
      r.w_mean(i) = parse_double(f[kFixed + static_cast<std::size_t>(i)]);
      r.w_var(i) =
          parse_double(f[kFixed + static_cast<std::size_t>(n_pc + i)]);
    }
    if (r.k != static_cast<int>(li) - 1)
      throw std::runtime_error("history CSV: non-contiguous iterations");
    out.push_back(std::move(r));
  }
  return out;
}

// --- buffer summary ----------------------------------------------------------

struct BufferSummary {
  Eigen::VectorXd mean;  // per-PC sample mean
  Eigen::VectorXd var;   // per-PC sample variance
};

inline BufferSummary summarize_buffer(const std::vector<PressureTrace>& cycles,
                                      const PcBasis& basis) {
  const auto n = static_cast<Eigen::Index>(cycles.size());
  if (n < 2)
    throw std::invalid_argument("summarize_buffer: need at least 2 cycles");
  Eigen::MatrixXd w(n, basis.n_pc());
  for (Eigen::Index i = 0; i < n; ++i)
    w.row(i) = project_weights(cycles[static_cast<std::size_t>(i)], basis)
                   .transpose();
  BufferSummary s;
  s.mean = w.colwise().mean().transpose();
  s.var = (w.rowwise() - s.mean.transpose()).colwise().squaredNorm()
              .transpose() /
          static_cast<double>(n - 1);
  return s;
}

// --- convergence -------------------------------------------------------------

// Earliest new-best event whose remaining gap to the final best GIE is under
// `headroom`, provided the run kept observing afterwards; a run that was still
// improving at its very last record has not converged.
inline std::optional<double> detect_convergence(
    const std::vector<HistoryRecord>& history, double headroom = 0.001) {
  struct Event {
    double t = 0.0;
    double gie = 0.0;
    std::size_t index = 0;
  };
  std::vector<Event> events;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < history.size(); ++i) {
    const HistoryRecord& r = history[i];
    if (!r.feasible || r.gie <= best) continue;
    best = r.gie;
    events.push_back({r.engine_time_s, r.gie, i});
  }
  if (events.empty()) return std::nullopt;
  const double final_best = events.back().gie;
  for (const Event& e : events) {
    if (final_best - e.gie >= headroom) continue;
    if (e.index + 1 < history.size()) return e.t;
  }
  return std::nullopt;
}

// --- checkpoint --------------------------------------------------------------

// Everything iterate() needs beyond the history itself: the plant RNG stream,
// the warm fuel state, and the hyperparameter warm starts.
struct Checkpoint {
  int next_k = 0;
  double engine_time_s = 0.0;
  double q_current = 0.0;
  std::string rng_state;
  std::vector<Hyperparams> warm_w;
  std::optional<Hyperparams> warm_q;
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  auto hp_line = [](const Hyperparams& hp) {
    return format_double(hp.phi_f) + ' ' + format_double(hp.length(0)) + ' ' +
           format_double(hp.length(1));
  };
  std::string text = "# calib_checkpoint v1\n";
  text += "next_k = " + std::to_string(ck.next_k) + '\n';
  text += "engine_time_s = " + format_double(ck.engine_time_s) + '\n';
  text += "q_current = " + format_double(ck.q_current) + '\n';
  text += "rng = " + ck.rng_state + '\n';
  text += "warm_w = " + std::to_string(ck.warm_w.size()) + '\n';
  for (std::size_t i = 0; i < ck.warm_w.size(); ++i)
    text += "warm_w" + std::to_string(i) + " = " + hp_line(ck.warm_w[i]) + '\n';
  if (ck.warm_q) text += "warm_q = " + hp_line(*ck.warm_q) + '\n';
  return text;
}

inline Checkpoint parse_checkpoint(const std::string& text) {
  std::vector<std::string_view> lines = split(text, '\n');
  if (lines.empty() || trim(lines[0]) != "# calib_checkpoint v1")
    throw std::runtime_error("checkpoint: bad magic");
  auto value_of = [&](std::size_t i, std::string_view key) {
    if (i >= lines.size())
      throw std::runtime_error("checkpoint: truncated file");
    const std::string_view line = trim(lines[i]);
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos || trim(line.substr(0, eq)) != key)
      throw std::runtime_error("checkpoint: expected key '" +
                               std::string(key) + "'");
    return trim(line.substr(eq + 1));
  };
  auto hp_of = [](std::string_view v) {
    const std::vector<std::string_view> parts = split(v, ' ');
    if (parts.size() != 3)
      throw std::runtime_error("checkpoint: bad hyperparameter line");
    Hyperparams hp;
    hp.phi_f = parse_double(parts[0]);
    hp.length(0) = parse_double(parts[1]);
    hp.length(1) = parse_double(parts[2]);
    return hp;
  };

  Checkpoint ck;
  ck.next_k = static_cast<int>(parse_int(value_of(1, "next_k")));
  ck.engine_time_s = parse_double(value_of(2, "engine_time_s"));
  ck.q_current = parse_double(value_of(3, "q_current"));
  ck.rng_state = std::string(value_of(4, "rng"));
  const auto n_warm =
      static_cast<std::size_t>(parse_int(value_of(5, "warm_w")));
  std::size_t li = 6;
  for (std::size_t i = 0; i < n_warm; ++i, ++li)
    ck.warm_w.push_back(hp_of(value_of(li, "warm_w" + std::to_string(i))));
  if (li < lines.size() && !trim(lines[li]).empty())
    ck.warm_q = hp_of(value_of(li, "warm_q"));
  return ck;
}

// --- basis pretraining -------------------------------------------------------

// Offline commissioning sweep on a dedicated plant instance: a settings
// lattice crossed with fuel levels, a few noisy cycles each. Pretraining is
// not charged against the run's engine-time budget.
inline std::vector<PressureTrace> basis_traces(const RunConfig& cfg) {
  EnginePlant plant(cfg.geometry, cfg.make_grid(), cfg.air, cfg.plant, cfg.box,
                    Rng::mix(cfg.seed, 0x42415349ull));
  const int nl = cfg.basis_lattice;
  const int nq = cfg.basis_q_levels;
  std::vector<PressureTrace> traces;
  traces.reserve(static_cast<std::size_t>(nl) * nl * nq * cfg.basis_cycles);
  for (int i = 0; i < nl; ++i) {
    for (int j = 0; j < nl; ++j) {
      FuelSettings s;
      s.br = cfg.box.lo(0) +
             (cfg.box.hi(0) - cfg.box.lo(0)) * (nl == 1 ? 0.5 : double(i) / (nl - 1));
      s.soi_di = cfg.box.lo(1) +
                 (cfg.box.hi(1) - cfg.box.lo(1)) * (nl == 1 ? 0.5 : double(j) / (nl - 1));
      for (int l = 0; l < nq; ++l) {
        s.q_fuel = cfg.box.q_lo +
                   (cfg.box.q_hi - cfg.box.q_lo) * (nq == 1 ? 0.5 : double(l) / (nq - 1));
        for (int c = 0; c < cfg.basis_cycles; ++c)
          traces.push_back(plant.run_cycle(s));
      }
    }
  }
  return traces;
}

inline PcBasis pretrain_basis(const RunConfig& cfg) {
  return train_basis(basis_traces(cfg), cfg.n_pc, cfg.plant.kappa,
                     cfg.geometry);
}

// --- calibration loop --------------------------------------------------------

class CalibrationLoop {
 public:
  CalibrationLoop(const RunConfig& cfg, PcBasis basis)
      : cfg_(cfg),
        basis_(std::move(basis)),
        plant_(cfg.geometry, cfg.make_grid(), cfg.air, cfg.plant, cfg.box,
               cfg.seed) {
    cfg_.validate();
    if (!same_grid(basis_.grid, cfg_.make_grid()))
      throw std::invalid_argument("CalibrationLoop: basis grid mismatch");
    if (basis_.n_pc() != cfg_.n_pc)
      throw std::invalid_argument("CalibrationLoop: basis PC count mismatch");
    op_ = build_cost_operator(basis_, cfg_.geometry);
    ctx_ = make_constraint_context(basis_, op_, cfg_.constraints,
                                   cfg_.geometry, cfg_.air.p_im);

    // The reference weights are affine in fuel energy (the Otto expansion
    // branch and the in-span work correction both scale linearly), so two
    // evaluations pin the whole family w_itc(q) = w_itc0 + q * w_itc1.
    const OttoParams otto =
        OttoParams::from(cfg_.geometry, cfg_.plant.kappa, cfg_.air.p_im);
    const Eigen::VectorXd w_a =
        itc_weights(cfg_.box.q_lo, cfg_.air.p_im, otto, basis_);
    const Eigen::VectorXd w_b =
        itc_weights(cfg_.box.q_hi, cfg_.air.p_im, otto, basis_);
    w_itc1_ = (w_b - w_a) / (cfg_.box.q_hi - cfg_.box.q_lo);
    w_itc0_ = w_a - cfg_.box.q_lo * w_itc1_;

    q_current_ = 0.5 * (cfg_.box.q_lo + cfg_.box.q_hi);
  }

  const RunConfig& config() const { return cfg_; }
  const PcBasis& basis() const { return basis_; }
  const std::vector<HistoryRecord>& history() const { return history_; }
  double engine_time_s() const { return engine_time_s_; }
  double q_current() const { return q_current_; }

  Eigen::VectorXd itc_reference(double q) const {
    return w_itc0_ + q * w_itc1_;
  }

  // Evaluates the initial point so the first PSO has a training point and a
  // feasible incumbent to improve on.
  void initialize() {
    if (!history_.empty())
      throw std::logic_error("CalibrationLoop: already initialized");
    apply_point(cfg_.initial_br, cfg_.initial_soi, 0.0, 0.0);
  }

  // One BO step: fit the weight and fuel models on the history, pick the
  // incumbent among feasible observations, maximize the acquisition under the
  // probabilistic constraints with PSO, and apply the winner to the plant.
  // Returns false without touching the plant once a budget is exhausted.
  bool iterate() {
    if (history_.empty())
      throw std::logic_error("CalibrationLoop: iterate before initialize");
    const int k = static_cast<int>(history_.size());
    if (k > cfg_.max_iterations) return false;
    if (engine_time_s_ >= cfg_.budget_s) return false;

    const WeightModel wmodel = fit_weights(k);
    const FuelModel qmodel = fit_fuel(k);

    std::vector<ObservedPoint> observed;
    observed.reserve(history_.size());
    bool any_feasible = false;
    for (const HistoryRecord& r : history_) {
      observed.push_back({{r.br, r.soi}, r.j_itc, r.feasible});
      any_feasible = any_feasible || r.feasible;
    }
    // With no feasible observation yet there is no valid incumbent; fall back
    // to the best cost seen anywhere so the search can keep moving.
    if (!any_feasible)
      for (ObservedPoint& p : observed) p.feasible = true;
    const BestObserved best = best_observed(observed);

    const AcquisitionSampler sampler = AcquisitionSampler::draw(
        cfg_.n_mc, basis_.n_pc(),
        Rng::mix(Rng::mix(cfg_.seed, 0x41435153ull), uint64_of(k)));
    const WeightBelief inc_belief = wmodel.predict(best.s);
    const CostDistribution inc_dist = CostDistribution::from(
        inc_belief, itc_reference(qmodel.predict(best.s)), op_);
    const Eigen::VectorXd tau_star = cost_samples(inc_dist, sampler.z_inc);
    const bool noisy = cfg_.kind == AcquisitionKind::NEI ||
                       cfg_.kind == AcquisitionKind::NPI;
    const double j_star = best.j;

    Evaluator evaluate = [&](const Eigen::Vector2d& x) {
      const WeightBelief b = wmodel.predict(x);
      const CostDistribution d =
          CostDistribution::from(b, itc_reference(qmodel.predict(x)), op_);
      Evaluated e;
      e.alpha = improvement_value(cfg_.kind, cost_samples(d, sampler.z_cand),
                                  noisy ? &tau_star : nullptr, j_star);
      e.beta4 = violation_probability(constraint_stats(b, ctx_)).beta4;
      return e;
    };

    const PsoResult found = run_pso(
        cfg_.make_swarm(Rng::mix(Rng::mix(cfg_.seed, 0x50534f21ull),
                                 uint64_of(k))),
        evaluate);
    apply_point(found.best(0), found.best(1), found.value.alpha,
                found.value.beta4);
    return true;
  }

  void run() {
    if (history_.empty()) initialize();
    while (iterate()) {
    }
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.next_k = static_cast<int>(history_.size());
    ck.engine_time_s = engine_time_s_;
    ck.q_current = q_current_;
    ck.rng_state = plant_.save_rng();
    ck.warm_w = warm_w_;
    ck.warm_q = warm_q_;
    return ck;
  }

  // Rebuilds the mid-run state saved by checkpoint(); continuing from here
  // reproduces the uninterrupted run exactly.
  void restore(const std::vector<HistoryRecord>& history,
               const Checkpoint& ck) {
    if (!history_.empty())
      throw std::logic_error("CalibrationLoop: restore on a started run");
    if (ck.next_k != static_cast<int>(history.size()))
      throw std::runtime_error("CalibrationLoop: checkpoint/history mismatch");
    for (const HistoryRecord& r : history)
      if (r.w_mean.size() != basis_.n_pc() || r.w_var.size() != basis_.n_pc())
        throw std::runtime_error("CalibrationLoop: history PC count mismatch");
    history_ = history;
    engine_time_s_ = ck.engine_time_s;
    q_current_ = ck.q_current;
    plant_.restore_rng(ck.rng_state);
    warm_w_ = ck.warm_w;
    warm_q_ = ck.warm_q;
  }

 private:
  // Per-PC posterior with an additive offset; the offset carries the output
  // mean in the fixed-hyperparameter fallback, where the GP itself is built
  // around zero.
  struct WeightModel {
    std::vector<ScalarGpr> per_pc;
    Eigen::VectorXd offset;

    WeightBelief predict(const Eigen::Vector2d& s) const {
      WeightBelief b;
      const auto n = static_cast<Eigen::Index>(per_pc.size());
      b.mean.resize(n);
      b.var.resize(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto [m, v] = per_pc[static_cast<std::size_t>(i)].predict(s);
        b.mean(i) = m + offset(i);
        b.var(i) = v;
      }
      return b;
    }
  };

  // Converged fuel energy as a function of the settings; constant until three
  // observations exist. Predictions never leave the actuator's fuel range.
  struct FuelModel {
    std::optional<ScalarGpr> gp;
    double fallback = 0.0;
    double lo = 0.0;
    double hi = 0.0;

    double predict(const Eigen::Vector2d& s) const {
      const double q = gp ? gp->predict(s).first : fallback;
      return std::clamp(q, lo, hi);
    }
  };

  static std::uint64_t uint64_of(int k) {
    return static_cast<std::uint64_t>(k);
  }

  // Runs the controller from the previous converged fuel, freezes the fuel,
  // buffers cfg.n_sample cycles, and appends the summarized record.
  HistoryRecord& apply_point(double br, double soi, double alpha,
                             double beta_pred) {
    const ControllerRun ctrl = converge_imep(
        plant_, br, soi, q_current_, cfg_.constraints.imep_req,
        cfg_.controller_gain, cfg_.controller_tol, cfg_.controller_hold,
        cfg_.controller_max_cycles);
    q_current_ = ctrl.q;

    std::vector<PressureTrace> buffer;
    buffer.reserve(static_cast<std::size_t>(cfg_.n_sample));
    std::vector<double> imeps;
    imeps.reserve(static_cast<std::size_t>(cfg_.n_sample));
    HistoryRecord r;
    for (int i = 0; i < cfg_.n_sample; ++i) {
      buffer.push_back(plant_.run_cycle({ctrl.q, br, soi}));
      const CycleMetrics m = metrics(buffer.back(), ctrl.q, cfg_.geometry);
      imeps.push_back(m.imep_g);
      r.p_max = std::max(r.p_max, m.p_max);
      r.dpdth_max = std::max(r.dpdth_max, m.dpdth_max);
    }
    const BufferSummary sum = summarize_buffer(buffer, basis_);

    engine_time_s_ +=
        (ctrl.cycles + cfg_.n_sample) * cfg_.cycle_period_s;

    r.k = static_cast<int>(history_.size());
    r.br = br;
    r.soi = soi;
    r.q = ctrl.q;
    r.cycles_ctrl = ctrl.cycles;
    r.cycles_buffer = cfg_.n_sample;
    r.engine_time_s = engine_time_s_;
    r.j_itc = cost(sum.mean, itc_reference(ctrl.q), op_);
    r.imep = mean(imeps);
    r.cov = cov_imep(imeps);
    r.gie = r.imep * cfg_.geometry.displacement() / ctrl.q;
    r.saturated = ctrl.saturated;
    const ConstraintSpec& cs = cfg_.constraints;
    const double half_band = 0.5 * cs.cov_ub * cs.imep_req;
    r.feasible = !ctrl.saturated &&
                 std::abs(r.imep - cs.imep_req) <= half_band &&
                 r.cov <= cs.cov_ub && r.p_max <= cs.p_ub &&
                 r.dpdth_max <= cs.dp_ub;
    r.alpha = alpha;
    r.beta_pred = beta_pred;
    r.w_mean = sum.mean;
    r.w_var = sum.var;
    history_.push_back(std::move(r));
    return history_.back();
  }

  // Heteroscedastic weight GPs: the buffer sample variance divided by the
  // buffer length is the noise variance of each recorded mean. Below three
  // points the marginal likelihood is too flat to optimize, so fixed
  // moderate hyperparameters around the centered outputs stand in.
  WeightModel fit_weights(int k) {
    const auto n = static_cast<Eigen::Index>(history_.size());
    const int n_pc = basis_.n_pc();
    TrainingSet ts;
    for (const HistoryRecord& r : history_)
      ts.append({r.br, r.soi}, r.w_mean,
                r.w_var / static_cast<double>(r.cycles_buffer));

    WeightModel model;
    model.offset = Eigen::VectorXd::Zero(n_pc);
    model.per_pc.reserve(static_cast<std::size_t>(n_pc));
    if (n >= 3) {
      const std::uint64_t base =
          Rng::mix(Rng::mix(cfg_.seed, 0x57454947ull), uint64_of(k));
      std::vector<Hyperparams> fitted;
      for (int i = 0; i < n_pc; ++i) {
        Rng rng(Rng::mix(base, static_cast<std::uint64_t>(i)));
        const Hyperparams* warm =
            warm_w_.size() == static_cast<std::size_t>(n_pc)
                ? &warm_w_[static_cast<std::size_t>(i)]
                : nullptr;
        model.per_pc.push_back(ScalarGpr::fit(ts.inputs, ts.weight_means.col(i),
                                              ts.weight_vars.col(i),
                                              cfg_.gpr_budget, rng, warm));
        fitted.push_back(model.per_pc.back().hyperparams());
      }
      warm_w_ = std::move(fitted);
    } else {
      for (int i = 0; i < n_pc; ++i) {
        const Eigen::VectorXd y = ts.weight_means.col(i);
        const double off = y.mean();
        const Eigen::VectorXd centered = (y.array() - off).matrix();
        const double spread = n > 1 ? std::sqrt(centered.squaredNorm() /
                                                static_cast<double>(n - 1))
                                    : 0.0;
        const double noise_sd = std::sqrt(ts.weight_vars.col(i).maxCoeff());
        Hyperparams hp;
        hp.phi_f = std::max({1e-8, spread, 10.0 * noise_sd});
        hp.length(0) = 0.5 * (cfg_.box.hi(0) - cfg_.box.lo(0));
        hp.length(1) = 0.5 * (cfg_.box.hi(1) - cfg_.box.lo(1));
        model.per_pc.push_back(
            ScalarGpr::build(ts.inputs, centered, ts.weight_vars.col(i), hp));
        model.offset(i) = off;
      }
    }
    return model;
  }

  // The acquisition needs the reference weights at candidates that were never
  // applied, so the converged fuel itself is regressed on the settings. Its
  // observation noise is taken as the controller tolerance band.
  FuelModel fit_fuel(int k) {
    const auto n = static_cast<Eigen::Index>(history_.size());
    FuelModel model;
    model.lo = cfg_.box.q_lo;
    model.hi = cfg_.box.q_hi;
    Eigen::MatrixXd inputs(n, 2);
    Eigen::VectorXd q(n), noise(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const HistoryRecord& r = history_[static_cast<std::size_t>(i)];
      inputs.row(i) << r.br, r.soi;
      q(i) = r.q;
      const double sd = cfg_.controller_tol * r.q;
      noise(i) = sd * sd;
    }
    if (n >= 3) {
      Rng rng(Rng::mix(Rng::mix(cfg_.seed, 0x4655454cull), uint64_of(k)));
      const Hyperparams* warm = warm_q_ ? &*warm_q_ : nullptr;
      model.gp = ScalarGpr::fit(inputs, q, noise, cfg_.gpr_budget, rng, warm);
      warm_q_ = model.gp->hyperparams();
    } else {
      model.fallback = q.mean();
    }
    return model;
  }

  RunConfig cfg_;
  PcBasis basis_;
  EnginePlant plant_;
  CostOperator op_;
  ConstraintContext ctx_;
  Eigen::VectorXd w_itc0_;
  Eigen::VectorXd w_itc1_;
  double q_current_ = 0.0;
  double engine_time_s_ = 0.0;
  std::vector<HistoryRecord> history_;
  std::vector<Hyperparams> warm_w_;
  std::optional<Hyperparams> warm_q_;
};

}  // namespace calib
