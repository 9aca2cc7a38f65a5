#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "calib/config.hpp"
#include "calib/engine_sim.hpp"
#include "calib/io.hpp"
#include "calib/itc.hpp"
#include "calib/loop.hpp"
#include "calib/pcd.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace calib;

namespace {

// Replaces (or appends) one entry, keeping the original file order so the
// resolved config stays reproducible.
ConfigTree with_override(const ConfigTree& in, const std::string& section,
                         const std::string& key, const std::string& value) {
  ConfigTree out;
  bool replaced = false;
  for (const ConfigTree::Entry& e : in.entries()) {
    if (e.section == section && e.key == key) {
      out.set(section, key, value, e.line);
      replaced = true;
    } else {
      out.set(e.section, e.key, e.value, e.line);
    }
  }
  if (!replaced) out.set(section, key, value, 0);
  return out;
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "runs";
  std::string kind;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
};

// Without --config the built-in defaults apply; the resolved.ini written next
// to the outputs still captures the full effective configuration either way.
RunConfig load_config(const CommonArgs& a) {
  ConfigTree tree;
  if (!a.config_path.empty()) {
    if (!fs::exists(a.config_path))
      throw ConfigError("no config file at " + a.config_path);
    tree = ConfigTree::parse(read_text_file(a.config_path));
  }
  for (const std::string& s : a.sets) {
    const std::size_t eq = s.find('=');
    const std::size_t dot = s.rfind('.', eq);
    if (eq == std::string::npos || dot == std::string::npos || dot == 0 ||
        dot + 1 == eq)
      throw ConfigError("--set expects section.key=value, got '" + s + "'");
    tree = with_override(tree, s.substr(0, dot), s.substr(dot + 1, eq - dot - 1),
                         std::string(trim(s.substr(eq + 1))));
  }
  if (!a.kind.empty()) tree = with_override(tree, "run", "kind", a.kind);
  if (a.seed) tree = with_override(tree, "run", "seed", std::to_string(*a.seed));
  return RunConfig::from_tree(tree);
}

void write_file_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  write_text_file(tmp.string(), text);
  fs::rename(tmp, path);
}

// --- oracle cache ------------------------------------------------------------

std::string oracle_csv(const OracleResult& res) {
  std::string text = "br,soi,q,gie,imep,p_max,dpdth_max,feasible,saturated\n";
  for (const OraclePoint& p : res.points) {
    text += format_double(p.br) + ',' + format_double(p.soi) + ',' +
            format_double(p.q) + ',' + format_double(p.gie) + ',' +
            format_double(p.imep_g) + ',' + format_double(p.p_max) + ',' +
            format_double(p.dpdth_max) + ',';
    text += p.feasible ? "1," : "0,";
    text += p.saturated ? "1\n" : "0\n";
  }
  return text;
}

OracleResult parse_oracle_csv(const std::string& text) {
  const std::vector<std::string_view> lines = split(text, '\n');
  if (lines.empty() ||
      trim(lines[0]) != "br,soi,q,gie,imep,p_max,dpdth_max,feasible,saturated")
    throw std::runtime_error("oracle cache: unexpected header");
  OracleResult res;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const std::vector<std::string_view> f = split(trim(lines[i]), ',');
    if (f.size() != 9)
      throw std::runtime_error("oracle cache: bad row " + std::to_string(i + 1));
    OraclePoint p;
    p.br = parse_double(f[0]);
    p.soi = parse_double(f[1]);
    p.q = parse_double(f[2]);
    p.gie = parse_double(f[3]);
    p.imep_g = parse_double(f[4]);
    p.p_max = parse_double(f[5]);
    p.dpdth_max = parse_double(f[6]);
    p.feasible = f[7] == "1";
    p.saturated = f[8] == "1";
    res.points.push_back(p);
    if (p.feasible && (!res.any_feasible || p.gie > res.best.gie)) {
      res.best = p;
      res.any_feasible = true;
    }
  }
  return res;
}

fs::path oracle_cache_path(const RunConfig& cfg, const fs::path& out) {
  return out / ("oracle_" + cfg.oracle_hash() + ".csv");
}

// Computes the sweep unless a cache for this exact plant-facing configuration
// already exists; the config hash in the filename is the cache key.
OracleResult ensure_oracle(const RunConfig& cfg, const fs::path& out,
                           bool announce) {
  const fs::path path = oracle_cache_path(cfg, out);
  if (fs::exists(path)) {
    if (announce) std::printf("oracle: reusing %s\n", path.string().c_str());
    return parse_oracle_csv(read_text_file(path.string()));
  }
  // Seeded from the configuration signature, not the run seed, so the cache
  // contents are a pure function of the plant-facing configuration no matter
  // which run computes them first.
  EnginePlant plant(cfg.geometry, cfg.make_grid(), cfg.air, cfg.plant, cfg.box,
                    fnv1a(cfg.oracle_signature()));
  const ConstraintSpec& cs = cfg.constraints;
  const OracleResult res =
      grid_oracle(plant, cs.imep_req, 0.5 * cs.cov_ub * cs.imep_req, cs.p_ub,
                  cs.dp_ub, cfg.oracle_n_br, cfg.oracle_n_soi,
                  cfg.controller_gain);
  fs::create_directories(out);
  write_file_atomic(path, oracle_csv(res));
  if (announce) std::printf("oracle: wrote %s\n", path.string().c_str());
  return res;
}

// --- run artifacts -----------------------------------------------------------

// Plant-truth cost in work units, comparable between history records and
// oracle rows: squared gap between the ideal-cycle work and measured work.
double work_gap_cost(const RunConfig& cfg, double q, double imep) {
  const OttoParams otto =
      OttoParams::from(cfg.geometry, cfg.plant.kappa, cfg.air.p_im);
  const double gap = otto.eta_itc * q - imep * cfg.geometry.displacement();
  return gap * gap;
}

const HistoryRecord* best_record(const std::vector<HistoryRecord>& history) {
  const HistoryRecord* best = nullptr;
  for (const HistoryRecord& r : history)
    if (r.feasible && (best == nullptr || r.j_itc < best->j_itc)) best = &r;
  return best;
}

ordered_json summarize_run(const RunConfig& cfg,
                           const std::vector<HistoryRecord>& history,
                           const OracleResult& oracle,
                           const std::string& oracle_file) {
  ordered_json j;
  j["kind"] = to_string(cfg.kind);
  j["seed"] = cfg.seed;
  j["records"] = history.size();
  j["iterations"] = history.empty() ? 0 : static_cast<int>(history.size()) - 1;
  j["engine_time_s"] = history.empty() ? 0.0 : history.back().engine_time_s;
  j["budget_s"] = cfg.budget_s;

  int sat = 0, band = 0, cov = 0, p = 0, dp = 0;
  const double half_band = 0.5 * cfg.constraints.cov_ub * cfg.constraints.imep_req;
  for (const HistoryRecord& r : history) {
    sat += r.saturated;
    band += std::abs(r.imep - cfg.constraints.imep_req) > half_band;
    cov += r.cov > cfg.constraints.cov_ub;
    p += r.p_max > cfg.constraints.p_ub;
    dp += r.dpdth_max > cfg.constraints.dp_ub;
  }
  j["violations"] = {{"saturated", sat}, {"imep_band", band},     {"cov", cov},
                     {"p_max", p},       {"dpdth_max", dp}};

  const auto conv = detect_convergence(history, cfg.convergence_headroom);
  j["convergence_time_s"] = conv ? ordered_json(*conv) : ordered_json(nullptr);

  const HistoryRecord* best = best_record(history);
  if (best != nullptr) {
    j["best"] = {{"k", best->k},         {"br", best->br},
                 {"soi", best->soi},     {"q", best->q},
                 {"j_itc", best->j_itc}, {"gie", best->gie},
                 {"imep", best->imep}};
  } else {
    j["best"] = nullptr;
  }

  j["oracle"] = {{"cache", oracle_file},
                 {"feasible", oracle.any_feasible}};
  if (oracle.any_feasible) {
    j["oracle"]["br"] = oracle.best.br;
    j["oracle"]["soi"] = oracle.best.soi;
    j["oracle"]["q"] = oracle.best.q;
    j["oracle"]["gie"] = oracle.best.gie;
  }
  if (best != nullptr && oracle.any_feasible) {
    j["delta"] = {
        {"br", best->br - oracle.best.br},
        {"soi", best->soi - oracle.best.soi},
        {"gie", oracle.best.gie - best->gie},
        {"j_work", work_gap_cost(cfg, best->q, best->imep) -
                       work_gap_cost(cfg, oracle.best.q, oracle.best.imep_g)}};
  } else {
    j["delta"] = nullptr;
  }
  return j;
}

int cmd_run(const CommonArgs& args) {
  const RunConfig cfg = load_config(args);
  const std::string resolved = cfg.to_tree().serialize();

  const fs::path out(args.out_dir);
  const fs::path dir =
      out / ("run_" + to_string(cfg.kind) + "_seed" + std::to_string(cfg.seed));
  fs::create_directories(dir);

  const fs::path resolved_path = dir / "resolved.ini";
  if (fs::exists(resolved_path) &&
      read_text_file(resolved_path.string()) != resolved)
    throw ConfigError(dir.string() +
                      " holds artifacts of a different configuration; "
                      "use another --out or remove the directory");
  write_file_atomic(resolved_path, resolved);

  const fs::path basis_path = dir / "basis.txt";
  PcBasis basis;
  if (fs::exists(basis_path)) {
    basis = load_basis(basis_path.string());
  } else {
    basis = pretrain_basis(cfg);
    save_basis(basis_path.string(), basis);
  }

  CalibrationLoop loop(cfg, basis);

  const fs::path history_path = dir / "history.csv";
  const fs::path ck_path = dir / "checkpoint.txt";
  if (fs::exists(history_path) && fs::exists(ck_path)) {
    std::vector<HistoryRecord> history =
        parse_history_csv(read_text_file(history_path.string()));
    const Checkpoint ck = parse_checkpoint(read_text_file(ck_path.string()));
    // A write interrupted between the two files can leave one extra record;
    // the checkpoint names the last completed iteration.
    if (static_cast<int>(history.size()) > ck.next_k)
      history.resize(static_cast<std::size_t>(ck.next_k));
    loop.restore(history, ck);
    std::printf("resuming %s at iteration %d\n", dir.string().c_str(),
                ck.next_k);
  }

  const auto persist = [&]() {
    write_file_atomic(history_path,
                      write_history_csv(loop.history(), cfg.n_pc));
    write_file_atomic(ck_path, serialize_checkpoint(loop.checkpoint()));
  };
  if (loop.history().empty()) {
    loop.initialize();
    persist();
  }
  while (loop.iterate()) persist();
  persist();

  const OracleResult oracle = ensure_oracle(cfg, out, false);
  const std::string oracle_file =
      oracle_cache_path(cfg, out).filename().string();
  const ordered_json summary =
      summarize_run(cfg, loop.history(), oracle, oracle_file);
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");

  const HistoryRecord* best = best_record(loop.history());
  if (best != nullptr && oracle.any_feasible) {
    std::printf(
        "%s: %d iterations in %.1f engine-s, best gie %.4f at "
        "(%.4f, %.1f), oracle gap %.2e\n",
        dir.string().c_str(), static_cast<int>(loop.history().size()) - 1,
        loop.engine_time_s(), best->gie, best->br, best->soi,
        oracle.best.gie - best->gie);
  } else {
    std::printf("%s: no feasible observation\n", dir.string().c_str());
  }
  return 0;
}

int cmd_oracle(const CommonArgs& args) {
  const RunConfig cfg = load_config(args);
  const OracleResult res = ensure_oracle(cfg, fs::path(args.out_dir), true);
  if (!res.any_feasible) {
    std::printf("oracle: no feasible point on the grid\n");
    return 0;
  }
  std::printf("oracle optimum: gie %.4f at (%.4f, %.1f), q %.1f\n",
              res.best.gie, res.best.br, res.best.soi, res.best.q);
  return 0;
}

// --- plot data ---------------------------------------------------------------

int cmd_plot(const std::string& run_dir, std::string out_dir) {
  const fs::path dir(run_dir);
  if (out_dir.empty()) out_dir = run_dir;
  const std::vector<HistoryRecord> history =
      parse_history_csv(read_text_file((dir / "history.csv").string()));
  fs::create_directories(out_dir);

  std::string best_csv = "k,engine_time_s,best_j_itc,best_gie\n";
  double best_j = std::numeric_limits<double>::infinity();
  double best_gie = -std::numeric_limits<double>::infinity();
  for (const HistoryRecord& r : history) {
    if (r.feasible) {
      best_j = std::min(best_j, r.j_itc);
      best_gie = std::max(best_gie, r.gie);
    }
    best_csv += std::to_string(r.k) + ',' + format_double(r.engine_time_s) +
                ',' + format_double(best_j) + ',' + format_double(best_gie) +
                '\n';
  }

  std::string iter_csv =
      "k,engine_time_s,j_itc,imep,cov,p_max,dpdth_max,alpha,beta_pred,"
      "feasible,saturated\n";
  for (const HistoryRecord& r : history) {
    iter_csv += std::to_string(r.k) + ',' + format_double(r.engine_time_s) +
                ',' + format_double(r.j_itc) + ',' + format_double(r.imep) +
                ',' + format_double(r.cov) + ',' + format_double(r.p_max) +
                ',' + format_double(r.dpdth_max) + ',' +
                format_double(r.alpha) + ',' + format_double(r.beta_pred);
    iter_csv += r.feasible ? ",1" : ",0";
    iter_csv += r.saturated ? ",1\n" : ",0\n";
  }

  std::string settings_csv = "k,engine_time_s,br,soi,q\n";
  for (const HistoryRecord& r : history)
    settings_csv += std::to_string(r.k) + ',' +
                    format_double(r.engine_time_s) + ',' +
                    format_double(r.br) + ',' + format_double(r.soi) + ',' +
                    format_double(r.q) + '\n';

  const fs::path out(out_dir);
  write_file_atomic(out / "plot_best.csv", best_csv);
  write_file_atomic(out / "plot_iterations.csv", iter_csv);
  write_file_atomic(out / "plot_settings.csv", settings_csv);
  std::printf("wrote plot_best.csv, plot_iterations.csv, plot_settings.csv "
              "in %s\n",
              out.string().c_str());
  return 0;
}

// --- comparison table ----------------------------------------------------------

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct RunDeltas {
  double br = 0.0, soi = 0.0, j = 0.0, gie = 0.0, conv_s = 0.0;
};

int cmd_compare(const std::string& runs_dir) {
  const fs::path root(runs_dir);
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "history.csv") &&
        fs::exists(e.path() / "resolved.ini"))
      dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty())
    throw std::runtime_error("no completed runs under " + runs_dir);

  std::map<std::string, std::vector<RunDeltas>> by_kind;
  for (const fs::path& dir : dirs) {
    const RunConfig cfg = RunConfig::from_tree(
        ConfigTree::parse(read_text_file((dir / "resolved.ini").string())));
    const std::vector<HistoryRecord> history =
        parse_history_csv(read_text_file((dir / "history.csv").string()));
    const OracleResult oracle = ensure_oracle(cfg, root, false);
    const HistoryRecord* best = best_record(history);
    if (best == nullptr || !oracle.any_feasible) {
      std::fprintf(stderr, "compare: skipping %s (no feasible solution)\n",
                   dir.string().c_str());
      continue;
    }
    RunDeltas d;
    d.br = best->br - oracle.best.br;
    d.soi = best->soi - oracle.best.soi;
    d.j = work_gap_cost(cfg, best->q, best->imep) -
          work_gap_cost(cfg, oracle.best.q, oracle.best.imep_g);
    d.gie = oracle.best.gie - best->gie;
    // Runs still improving at budget end count as converging at the budget,
    // mirroring how the anchor time bounds every reported figure.
    const auto conv = detect_convergence(history, cfg.convergence_headroom);
    d.conv_s = conv ? *conv : cfg.budget_s;
    by_kind[to_string(cfg.kind)].push_back(d);
  }
  if (by_kind.empty()) throw std::runtime_error("compare: no usable runs");

  std::string csv = "kind,runs,delta_br,delta_soi,delta_j,delta_gie,"
                    "convergence_s\n";
  std::printf("%-5s %5s %12s %12s %14s %12s %14s\n", "kind", "runs",
              "d_br", "d_soi", "d_J", "d_gie", "conv[s]");
  for (const auto& [kind, deltas] : by_kind) {
    std::vector<double> br, soi, j, gie, conv;
    for (const RunDeltas& d : deltas) {
      br.push_back(d.br);
      soi.push_back(d.soi);
      j.push_back(d.j);
      gie.push_back(d.gie);
      conv.push_back(d.conv_s);
    }
    csv += kind + ',' + std::to_string(deltas.size()) + ',' +
           format_double(median(br)) + ',' + format_double(median(soi)) + ',' +
           format_double(median(j)) + ',' + format_double(median(gie)) + ',' +
           format_double(median(conv)) + '\n';
    std::printf("%-5s %5zu %12.4e %12.4e %14.4e %12.4e %14.1f\n", kind.c_str(),
                deltas.size(), median(br), median(soi), median(j), median(gie),
                median(conv));
  }
  write_file_atomic(root / "compare.csv", csv);
  std::printf("wrote %s\n", (root / "compare.csv").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"closed-loop engine calibration toolkit"};
  app.require_subcommand(1);

  CommonArgs run_args;
  CLI::App* run = app.add_subcommand("run", "execute one calibration run");
  run->add_option("--config", run_args.config_path,
                  "config file (built-in defaults when omitted)");
  run->add_option("--out", run_args.out_dir, "artifact directory");
  run->add_option("--kind", run_args.kind, "acquisition kind override");
  run->add_option("--seed", run_args.seed, "seed override");
  run->add_option("--set", run_args.sets,
                  "config override as section.key=value");

  CommonArgs oracle_args;
  CLI::App* oracle =
      app.add_subcommand("oracle", "compute or reuse the ground-truth sweep");
  oracle->add_option("--config", oracle_args.config_path,
                     "config file (built-in defaults when omitted)");
  oracle->add_option("--out", oracle_args.out_dir, "artifact directory");
  oracle->add_option("--set", oracle_args.sets,
                     "config override as section.key=value");

  std::string plot_run, plot_out;
  CLI::App* plot =
      app.add_subcommand("plot-data", "emit tidy CSVs from a finished run");
  plot->add_option("--run", plot_run, "run directory")->required();
  plot->add_option("--out", plot_out, "output directory (default: run dir)");

  std::string compare_runs;
  CLI::App* compare =
      app.add_subcommand("compare", "aggregate runs against the oracle");
  compare->add_option("--runs", compare_runs, "directory of run artifacts")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) return cmd_run(run_args);
    if (oracle->parsed()) return cmd_oracle(oracle_args);
    if (plot->parsed()) return cmd_plot(plot_run, plot_out);
    if (compare->parsed()) return cmd_compare(compare_runs);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
