#ifndef SILICOSIS_CLI_RUNNER_HPP
#define SILICOSIS_CLI_RUNNER_HPP

// Executes a validated RunConfig: runs the experiment, writes the CSV
// artifacts and summary.json into the output directory and maps the outcome
// to an exit code (0 pass, 1 check failure, 2 usage/config, 3 numerical abort).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <system_error>
#include <thread>
#include <vector>

#include "json.hpp"
#include "silicosis/analysis.hpp"
#include "silicosis/cli/run_config.hpp"
#include "silicosis/integrator.hpp"
#include "silicosis/moments.hpp"

namespace silicosis::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitCheckFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kSchemaVersion = 1;

/// Environment variable consulted for the output directory when --out is absent.
inline constexpr const char* kOutputEnv = "SILICOSIS_OUT";

/// Shortest round-trip decimal form, identical on every run.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline nlohmann::json json_number(double v) {
  if (std::isfinite(v)) return v;
  return format_number(v);
}

struct CheckRecord {
  std::string name;
  /// Library operation whose result is being judged.
  std::string operation;
  double value = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

class CheckList {
 public:
  void add(std::string name, std::string operation, double value, double tolerance, bool pass) {
    records_.push_back({std::move(name), std::move(operation), value, tolerance, pass});
  }
  /// Passes when value < tolerance.
  void below(std::string name, std::string operation, double value, double tolerance) {
    add(std::move(name), std::move(operation), value, tolerance, value < tolerance);
  }
  bool all_pass() const {
    return std::all_of(records_.begin(), records_.end(), [](const CheckRecord& r) { return r.pass; });
  }
  const std::vector<CheckRecord>& records() const { return records_; }

  nlohmann::json to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& r : records_)
      arr.push_back({{"name", r.name},
                     {"operation", r.operation},
                     {"value", json_number(r.value)},
                     {"tolerance", json_number(r.tolerance)},
                     {"pass", r.pass}});
    return arr;
  }

 private:
  std::vector<CheckRecord> records_;
};

struct RunOutcome {
  int exit_code = kExitPass;
  nlohmann::json summary;
  std::filesystem::path out_dir;
};

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::filesystem::filesystem_error("cannot write", path, std::make_error_code(std::errc::io_error));
  out << content;
  if (!out) throw std::filesystem::filesystem_error("write failed", path, std::make_error_code(std::errc::io_error));
}

/// Trajectory on a uniform grid.  Narrow form: moments plus the first m_out
/// cohorts; wide form: every cohort.
inline std::string trajectory_csv(const Trajectory& traj, std::size_t grid_points, std::size_t m_out,
                                  bool wide) {
  const std::size_t n = traj.system().order();
  const std::size_t cols = wide ? n + 1 : std::min(n + 1, m_out);
  std::string out = wide ? "t,x" : "t,x,M_total,X_total,U_total,Q,P";
  for (std::size_t i = 0; i < cols; ++i) out += ",M_" + std::to_string(i);
  out += '\n';
  for (double t : uniform_grid(traj.t_begin(), traj.t_end(), grid_points)) {
    const State s = dense_eval(traj, t);
    out += format_number(t) + "," + format_number(s.x);
    if (!wide) {
      const auto m = compute_moments(s, traj.system().rates());
      for (double v : {m.total_macrophages, m.total_quartz, m.total_matter, m.Q, m.P})
        out += "," + format_number(v);
    }
    for (std::size_t i = 0; i < cols; ++i) out += "," + format_number(s.M[i]);
    out += '\n';
  }
  return out;
}

inline TruncatedSystem make_system(const RunConfig& cfg, std::size_t n) {
  return TruncatedSystem(cfg.model, realize_coefficients(cfg.k, cfg.p, cfg.q, n));
}

inline nlohmann::json stats_json(const IntegratorStats& s) {
  return {{"accepted", s.accepted},         {"rejected", s.rejected},
          {"rhs_evals", s.rhs_evals},       {"jacobian_evals", s.jacobian_evals},
          {"factorizations", s.factorizations}, {"clamped", s.clamped}};
}

inline std::vector<double> check_times(double t0, double T, std::size_t count) {
  std::vector<double> ts;
  for (std::size_t j = 1; j <= count; ++j)
    ts.push_back(j == count ? t0 + T : t0 + T * static_cast<double>(j) / static_cast<double>(count));
  return ts;
}

template <class F>
double max_abs_over(const std::vector<double>& ts, F&& f) {
  double worst = 0.0;
  for (double t : ts) worst = std::max(worst, std::abs(f(t)));
  return worst;
}

class Session {
 public:
  Session(const RunConfig& cfg, std::filesystem::path dir) : cfg_(cfg), dir_(std::move(dir)) {}

  void write_trajectory(const Trajectory& traj) {
    write_file(dir_ / "trajectory.csv", trajectory_csv(traj, cfg_.output.grid, cfg_.output.m_out, false));
    files_.push_back("trajectory.csv");
    if (cfg_.output.wide_csv) {
      write_file(dir_ / "trajectory_wide.csv", trajectory_csv(traj, cfg_.output.grid, cfg_.output.m_out, true));
      files_.push_back("trajectory_wide.csv");
    }
  }
  void write_table(const std::string& name, const std::string& content) {
    write_file(dir_ / name, content);
    files_.push_back(name);
  }

  /// Cone, norm growth and the integrated balances along one trajectory.
  void trajectory_checks(const Trajectory& traj) {
    const auto& chk = cfg_.checks;
    double min_component = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < traj.size(); ++k) {
      const State s = traj.state(k);
      min_component = std::min(min_component, s.x);
      for (double m : s.M) min_component = std::min(min_component, m);
    }
    checks.add("cone", "integrate", min_component, 0.0, min_component >= 0.0);
    const NormBoundReport nb = norm_bound_check(traj, chk.slack);
    checks.add("norm_growth_bound", "norm_bound_check", nb.max_excess, chk.slack, nb.max_excess <= chk.slack);
    checks.add("cohort_bound", "norm_bound_check", nb.max_cohort_excess, chk.slack,
               nb.max_cohort_excess <= chk.slack);

    const auto ts = check_times(traj.t_begin(), traj.t_end() - traj.t_begin(), chk.sample_times);
    checks.below("mass_balance", "mass_balance_residual",
                 max_abs_over(ts, [&](double t) { return mass_balance_residual(traj, t); }), chk.residual_tol);
    checks.below("quartz_balance", "quartz_balance_residual",
                 max_abs_over(ts, [&](double t) { return quartz_balance_residual(traj, t); }), chk.residual_tol);
    checks.below("macrophage_balance", "macrophage_balance_residual",
                 max_abs_over(ts, [&](double t) { return macrophage_balance_residual(traj, t); }),
                 chk.residual_tol);
    checks.below("free_quartz_equation", "x_equation_residual",
                 max_abs_over(ts, [&](double t) { return x_equation_residual(traj, t); }), chk.residual_tol);
    results["integrator_stats"] = stats_json(traj.stats());
    results["samples"] = traj.size();
    const auto m = compute_moments(traj.state(traj.size() - 1), traj.system().rates());
    results["final"] = {{"t", m.t},
                        {"total_macrophages", m.total_macrophages},
                        {"total_quartz", m.total_quartz},
                        {"total_matter", m.total_matter},
                        {"Q", m.Q},
                        {"P", m.P}};
  }

  void simulate() {
    const auto sys = make_system(cfg_, cfg_.n);
    const Trajectory traj = integrate(sys, cfg_.initial.project(cfg_.n), cfg_.T, cfg_.integrator);
    write_trajectory(traj);
    trajectory_checks(traj);
  }

  void verify() {
    const std::size_t n = cfg_.n;
    const std::size_t mid = std::max<std::size_t>(1, n / 2);
    const auto sys = make_system(cfg_, n);
    IntegratorConfig icfg = cfg_.integrator;
    icfg.flux_cohorts = {1, mid};
    icfg.cohort_integrals = true;
    const State y0 = cfg_.initial.project(n);
    const Trajectory traj = integrate(sys, y0, cfg_.T, icfg);
    write_trajectory(traj);
    trajectory_checks(traj);

    const auto& chk = cfg_.checks;
    const double mu = 1.0 + chk.gamma;
    const auto ts = check_times(0.0, cfg_.T, chk.sample_times);
    std::vector<double> ones(n + 1, 1.0), linear(n + 1);
    for (std::size_t i = 0; i <= n; ++i) linear[i] = static_cast<double>(i);
    const MomentWeights power{power_weights(n, mu), 0.0, 0.0};
    struct Identity {
      const char* name;
      MomentWeights w;
      std::size_t m;
    };
    for (const Identity& id : {Identity{"moment_identity_g1", {ones, 0.0, 0.0}, 1},
                               Identity{"moment_identity_gi", {linear, 0.0, 0.0}, 1},
                               Identity{"moment_identity_power", power, 1},
                               Identity{"moment_identity_power_tail", power, mid}}) {
      checks.below(id.name, "moment_identity_residual",
                   max_abs_over(ts, [&](double t) { return moment_identity_residual(traj, id.w, id.m, 0.0, t); }),
                   chk.residual_tol);
    }

    const GronwallReport gr = gronwall_check(traj, fitted_weights(power_weights(n, mu), sys.rates()), chk.slack);
    checks.add("gronwall_envelope", "gronwall_check", gr.margin, 0.0, gr.ok && gr.margin >= 0.0);
    results["gronwall"] = {{"C1", json_number(gr.C1)},
                           {"C2", json_number(gr.C2)},
                           {"rate", json_number(gr.rate)},
                           {"margin", json_number(gr.margin)},
                           {"C1_fitted", json_number(gr.C1_fitted)},
                           {"C1_literal", json_number(gr.C1_literal)},
                           {"literal_holds", gr.literal_holds},
                           {"margin_literal", json_number(gr.margin_literal)}};

    const InvarianceReport inv = invariance_check(traj, chk.gamma, chk.slack);
    checks.add("invariance_envelope", "invariance_check", inv.margin, 0.0, inv.ok);
    results["invariance"] = {{"gamma", chk.gamma}, {"max_norm", json_number(inv.max_norm)},
                             {"margin", json_number(inv.margin)}};

    const double h = std::min(1e-4, cfg_.T / (4.0 * static_cast<double>(chk.sample_times)));
    std::vector<double> interior;
    for (std::size_t j = 0; j < chk.sample_times; ++j)
      interior.push_back(cfg_.T * (static_cast<double>(j) + 0.5) / static_cast<double>(chk.sample_times));
    checks.below("differential_form", "differential_form_check", differential_form_check(traj, interior, h),
                 chk.differential_tol);

    IntegratorConfig other = cfg_.integrator;
    other.cohort_integrals = false;
    other.max_step = std::min(other.max_step, cfg_.T / 100.0);
    other.initial_step = 1e-3 * cfg_.T;
    IntegratorConfig base = cfg_.integrator;
    base.cohort_integrals = false;
    checks.below("uniqueness", "uniqueness_probe", uniqueness_probe(sys, y0, cfg_.T, base, other),
                 chk.uniqueness_tol);
  }

  void converge() {
    const bool parallel = std::thread::hardware_concurrency() > 1;
    const ConvergenceReport rep = convergence_study(cfg_.model, cfg_.k, cfg_.p, cfg_.q, cfg_.initial,
                                                    cfg_.n_ladder, cfg_.T, cfg_.integrator, cfg_.output.grid,
                                                    parallel);
    std::string table = "n_coarse,n_fine,gap,x_gap\n";
    auto rows = nlohmann::json::array();
    for (std::size_t j = 0; j < rep.gaps.size(); ++j) {
      table += std::to_string(rep.n_ladder[j]) + "," + std::to_string(rep.n_ladder[j + 1]) + "," +
               format_number(rep.gaps[j]) + "," + format_number(rep.x_gaps[j]) + "\n";
      rows.push_back({{"n_coarse", rep.n_ladder[j]}, {"n_fine", rep.n_ladder[j + 1]},
                      {"gap", rep.gaps[j]}, {"x_gap", rep.x_gaps[j]}});
    }
    write_table("gaps.csv", table);
    results["gaps"] = rows;
    checks.add("gaps_decreasing", "convergence_study", rep.gaps.back(), 0.0, rep.decreasing);
    checks.below("final_gap", "convergence_study", rep.gaps.back(), cfg_.checks.converge_tol);

    const std::size_t n = cfg_.n_ladder.back();
    IntegratorConfig icfg = cfg_.integrator;
    icfg.cohort_integrals = false;
    write_trajectory(integrate(make_system(cfg_, n), cfg_.initial.project(n), cfg_.T, icfg));
  }

  void equilibrium() {
    const auto sys = make_system(cfg_, cfg_.n);
    const EquilibriumResult eq = find_equilibrium(sys, cfg_.x_bracket, cfg_.equilibrium_tol);
    std::string table = "i,M_star\n";
    for (std::size_t i = 0; i < eq.M_star.size(); ++i)
      table += std::to_string(i) + "," + format_number(eq.M_star[i]) + "\n";
    write_table("equilibrium.csv", table);
    results["x_star"] = eq.x_star;
    results["residual"] = eq.residual;
    results["tail_mass"] = eq.tail_mass;
    results["iterations"] = eq.iterations;
    checks.add("equilibrium_residual", "find_equilibrium", eq.residual, cfg_.equilibrium_tol,
               eq.residual <= cfg_.equilibrium_tol);

    State star = State::zero(cfg_.n);
    star.x = eq.x_star;
    star.M = eq.M_star;
    IntegratorConfig icfg = cfg_.integrator;
    icfg.cohort_integrals = false;
    const Trajectory drift = integrate(sys, star, 1.0, icfg);
    const double moved = norm_mu_difference(drift.state(drift.size() - 1), star, 1.0);
    checks.below("equilibrium_fixed_point", "integrate", moved, 10.0 * cfg_.equilibrium_tol);
    write_trajectory(integrate(sys, star, cfg_.T, icfg));
  }

  void semigroup() {
    const auto sys = make_system(cfg_, cfg_.n);
    const State y0 = cfg_.initial.project(cfg_.n);
    const double mu = 1.0 + cfg_.checks.gamma;
    IntegratorConfig icfg = cfg_.integrator;
    icfg.cohort_integrals = false;
    std::string table = "t,s,residual\n";
    auto rows = nlohmann::json::array();
    for (auto [t, s] : cfg_.semigroup_pairs) {
      const double res = semigroup_residual(sys, y0, t, s, icfg, mu);
      table += format_number(t) + "," + format_number(s) + "," + format_number(res) + "\n";
      rows.push_back({{"t", t}, {"s", s}, {"residual", res}});
      const std::string name = "semigroup(" + format_number(t) + "," + format_number(s) + ")";
      if (t == 0.0 || s == 0.0)
        checks.add(name, "semigroup_residual", res, 0.0, res == 0.0);
      else
        checks.below(name, "semigroup_residual", res, cfg_.checks.semigroup_tol);
    }
    write_table("semigroup.csv", table);
    results["mu"] = mu;
    results["pairs"] = rows;
    write_trajectory(integrate(sys, y0, cfg_.T, icfg));
  }

  CheckList checks;
  nlohmann::json results = nlohmann::json::object();
  std::vector<std::string> files_;

 private:
  const RunConfig& cfg_;
  std::filesystem::path dir_;
};

inline nlohmann::json config_echo(const RunConfig& cfg) {
  nlohmann::json j = {{"r", cfg.model.r},
                      {"alpha", cfg.model.alpha},
                      {"T", cfg.T},
                      {"method", to_string(cfg.integrator.method)},
                      {"rel_tol", cfg.integrator.rel_tol},
                      {"abs_tol", cfg.integrator.abs_tol}};
  if (cfg.command == Command::converge)
    j["n_ladder"] = cfg.n_ladder;
  else
    j["n"] = cfg.n;
  return j;
}

}  // namespace detail

/// Output directory precedence: explicit --out, then $SILICOSIS_OUT, then the
/// config's output.dir, then ./out.
inline std::filesystem::path resolve_output_dir(const std::optional<std::string>& cli_out, const RunConfig& cfg) {
  if (cli_out && !cli_out->empty()) return *cli_out;
  if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
  if (!cfg.output.dir.empty()) return cfg.output.dir;
  return "out";
}

/// Runs an already validated config and writes every artifact into `dir`.
inline RunOutcome run(const RunConfig& cfg, const std::filesystem::path& dir,
                      std::optional<std::uint64_t> seed = std::nullopt) {
  RunOutcome outcome;
  outcome.out_dir = dir;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    outcome.exit_code = kExitUsage;
    outcome.summary = {{"schema_version", kSchemaVersion},
                       {"status", "error"},
                       {"error", {{"name", "OutputError"}, {"message", "cannot create " + dir.string()}}}};
    return outcome;
  }

  detail::Session session(cfg, dir);
  nlohmann::json summary = {{"schema_version", kSchemaVersion},
                            {"command", to_string(cfg.command)},
                            {"config", detail::config_echo(cfg)}};
  if (seed) summary["seed"] = *seed;
  try {
    switch (cfg.command) {
      case Command::simulate: session.simulate(); break;
      case Command::verify: session.verify(); break;
      case Command::converge: session.converge(); break;
      case Command::equilibrium: session.equilibrium(); break;
      case Command::semigroup: session.semigroup(); break;
    }
    outcome.exit_code = session.checks.all_pass() ? kExitPass : kExitCheckFailure;
    summary["status"] = outcome.exit_code == kExitPass ? "pass" : "fail";
  } catch (const Error& e) {
    outcome.exit_code = kExitNumerical;
    summary["status"] = "error";
    summary["error"] = {{"name", e.name()}, {"message", e.what()}};
  } catch (const std::filesystem::filesystem_error& e) {
    outcome.exit_code = kExitUsage;
    summary["status"] = "error";
    summary["error"] = {{"name", "OutputError"}, {"message", e.what()}};
  }
  summary["checks"] = session.checks.to_json();
  summary["results"] = session.results;
  summary["files"] = session.files_;
  outcome.summary = summary;
  try {
    detail::write_file(dir / "summary.json", summary.dump(2) + "\n");
  } catch (const std::filesystem::filesystem_error&) {
    outcome.exit_code = kExitUsage;
  }
  return outcome;
}

/// Entry point shared by the executable and the tests: loads the config,
/// resolves the output directory, runs, and reports problems on `err`.
inline int run_command(Command command, const std::string& config_path, const std::optional<std::string>& cli_out,
                       std::optional<std::uint64_t> seed, std::ostream& err = std::cerr) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path, command);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
  const RunOutcome outcome = run(cfg, resolve_output_dir(cli_out, cfg), seed);
  if (outcome.exit_code == kExitNumerical) {
    const auto& e = outcome.summary["error"];
    err << e["name"].get<std::string>() << ": " << e["message"].get<std::string>() << "\n";
  } else if (outcome.exit_code == kExitCheckFailure) {
    for (const auto& c : outcome.summary["checks"])
      if (!c["pass"].get<bool>())
        err << "check failed: " << c["name"].get<std::string>() << " (" << c["operation"].get<std::string>()
            << ") value=" << c["value"].dump() << " tolerance=" << c["tolerance"].dump() << "\n";
  } else if (outcome.exit_code == kExitUsage && outcome.summary.contains("error")) {
    err << outcome.summary["error"]["message"].get<std::string>() << "\n";
  }
  return outcome.exit_code;
}

}  // namespace silicosis::cli

#endif  // SILICOSIS_CLI_RUNNER_HPP
