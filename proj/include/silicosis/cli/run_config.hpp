#ifndef SILICOSIS_CLI_RUN_CONFIG_HPP
#define SILICOSIS_CLI_RUN_CONFIG_HPP

// JSON experiment description, validated into a fully realized RunConfig
// before anything is integrated.  Errors carry the JSON path of the
// offending field.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"
#include "silicosis/analysis.hpp"
#include "silicosis/errors.hpp"
#include "silicosis/integrator.hpp"
#include "silicosis/model.hpp"

namespace silicosis::cli {

enum class Command { simulate, converge, equilibrium, verify, semigroup };

inline const char* to_string(Command c) {
  switch (c) {
    case Command::simulate: return "simulate";
    case Command::converge: return "converge";
    case Command::equilibrium: return "equilibrium";
    case Command::verify: return "verify";
    case Command::semigroup: return "semigroup";
  }
  return "?";
}

inline std::optional<Command> parse_command(const std::string& s) {
  for (Command c : {Command::simulate, Command::converge, Command::equilibrium, Command::verify,
                    Command::semigroup})
    if (s == to_string(c)) return c;
  return std::nullopt;
}

class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& what)
      : Error("ConfigError", (path.empty() ? std::string("<root>") : path) + ": " + what),
        path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

struct OutputSpec {
  std::string dir;  // empty: decided by the runner
  std::size_t m_out = 32;
  std::size_t grid = 101;
  bool wide_csv = false;
};

struct CheckSpec {
  double residual_tol = 1e-6;
  double semigroup_tol = 1e-7;
  double uniqueness_tol = 1e-6;
  double differential_tol = 1e-5;
  double converge_tol = 1e-6;
  double gamma = 0.5;
  double slack = 1e-6;
  std::size_t sample_times = 10;
};

struct RunConfig {
  Command command = Command::simulate;
  ModelParams model;
  CoefficientFamily k, p, q;
  InitialData initial;
  std::size_t n = 0;
  std::vector<std::size_t> n_ladder;
  double T = 1.0;
  IntegratorConfig integrator;
  OutputSpec output;
  CheckSpec checks;
  std::vector<std::pair<double, double>> semigroup_pairs;
  std::optional<std::pair<double, double>> x_bracket;
  double equilibrium_tol = 1e-12;
};

namespace detail {

using json = nlohmann::json;

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline void only_keys(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ConfigError(path, "expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError(join(path, it.key()), "unknown field");
  }
}

inline const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

inline double number(const json& v, const std::string& path) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  }
  if (!v.is_number()) throw ConfigError(path, "expected a number");
  const double d = v.get<double>();
  if (std::isnan(d)) throw ConfigError(path, "expected a number");
  return d;
}

inline double number_or(const json& obj, const std::string& path, const char* key, double fallback) {
  const json* v = find(obj, key);
  return v ? number(*v, join(path, key)) : fallback;
}

inline std::size_t count(const json& v, const std::string& path) {
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError(path, "expected a nonnegative integer");
  return static_cast<std::size_t>(v.get<long long>());
}

inline std::size_t count_or(const json& obj, const std::string& path, const char* key, std::size_t fallback) {
  const json* v = find(obj, key);
  return v ? count(*v, join(path, key)) : fallback;
}

inline std::vector<double> numbers(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(number(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline CoefficientFamily parse_family(const json& v, const std::string& path, RateRole role) {
  only_keys(v, path, {"kind", "amplitude", "exponent", "values", "tail"});
  const json* kind = find(v, "kind");
  if (!kind || !kind->is_string()) throw ConfigError(join(path, "kind"), "expected power_law, constant or table");
  const auto k = kind->get<std::string>();
  CoefficientFamily fam;
  if (k == "power_law") {
    fam = CoefficientFamily::power_law(number_or(v, path, "amplitude", 0.0),
                                       number_or(v, path, "exponent", 0.0));
  } else if (k == "constant") {
    fam = CoefficientFamily::constant(number_or(v, path, "amplitude", 0.0));
  } else if (k == "table") {
    const json* vals = find(v, "values");
    if (!vals) throw ConfigError(join(path, "values"), "required for a table family");
    TailRule tail = TailRule::constant_extend;
    if (const json* t = find(v, "tail")) {
      if (*t == "constant_extend")
        tail = TailRule::constant_extend;
      else if (*t == "zero_extend")
        tail = TailRule::zero_extend;
      else
        throw ConfigError(join(path, "tail"), "expected constant_extend or zero_extend");
    }
    fam = CoefficientFamily::table(numbers(*vals, join(path, "values")), tail);
  } else {
    throw ConfigError(join(path, "kind"), "expected power_law, constant or table");
  }
  try {
    fam.validate(role);
  } catch (const Error& e) {
    throw ConfigError(path, e.what());
  }
  return fam;
}

inline InitialData parse_initial(const json& v, const std::string& path) {
  only_keys(v, path, {"x0", "M", "geometric"});
  const double x0 = number_or(v, path, "x0", 0.0);
  const json* list = find(v, "M");
  const json* geo = find(v, "geometric");
  if (list && geo) throw ConfigError(path, "give either M or geometric, not both");
  InitialData d;
  if (geo) {
    const std::string gp = join(path, "geometric");
    only_keys(*geo, gp, {"b", "rho"});
    d = InitialData::geometric(x0, number_or(*geo, gp, "b", 0.0), number_or(*geo, gp, "rho", 0.0));
  } else {
    d = InitialData::explicit_list(x0, list ? numbers(*list, join(path, "M")) : std::vector<double>{});
  }
  try {
    d.validate();
  } catch (const Error& e) {
    throw ConfigError(path, e.what());
  }
  return d;
}

inline IntegratorConfig parse_integrator(const json& v, const std::string& path) {
  only_keys(v, path, {"method", "rel_tol", "abs_tol", "max_step", "initial_step", "negativity_floor",
                      "max_steps"});
  IntegratorConfig c;
  if (const json* m = find(v, "method")) {
    if (*m == "dormand_prince")
      c.method = Method::dormand_prince;
    else if (*m == "bdf")
      c.method = Method::bdf;
    else
      throw ConfigError(join(path, "method"), "expected dormand_prince or bdf");
  }
  c.rel_tol = number_or(v, path, "rel_tol", c.rel_tol);
  c.abs_tol = number_or(v, path, "abs_tol", c.abs_tol);
  c.max_step = number_or(v, path, "max_step", c.max_step);
  c.initial_step = number_or(v, path, "initial_step", c.initial_step);
  c.negativity_floor = number_or(v, path, "negativity_floor", c.negativity_floor);
  c.max_steps = count_or(v, path, "max_steps", c.max_steps);
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(path, e.what());
  }
  return c;
}

inline std::pair<double, double> parse_pair(const json& v, const std::string& path) {
  const auto xs = numbers(v, path);
  if (xs.size() != 2) throw ConfigError(path, "expected a pair [a, b]");
  return {xs[0], xs[1]};
}

}  // namespace detail

/// Parses and validates a config document.  `command` (from the command
/// line) wins over the optional "command" field, and the two must agree
/// when both are present.
inline RunConfig parse_run_config(const nlohmann::json& doc, std::optional<Command> command = std::nullopt) {
  using namespace detail;
  only_keys(doc, "", {"command", "model", "coefficients", "initial", "n", "n_ladder", "T", "integrator",
                      "output", "checks", "semigroup", "equilibrium"});
  RunConfig cfg;

  std::optional<Command> from_doc;
  if (const json* c = find(doc, "command")) {
    if (!c->is_string() || !parse_command(c->get<std::string>()))
      throw ConfigError("command", "expected simulate, converge, equilibrium, verify or semigroup");
    from_doc = parse_command(c->get<std::string>());
  }
  if (command && from_doc && *command != *from_doc)
    throw ConfigError("command", std::string("config asks for ") + to_string(*from_doc) +
                                     " but the command line asks for " + to_string(*command));
  if (!command && !from_doc) throw ConfigError("command", "no command given");
  cfg.command = command ? *command : *from_doc;

  const json* model = find(doc, "model");
  if (!model) throw ConfigError("model", "required");
  only_keys(*model, "model", {"r", "alpha"});
  cfg.model.r = number_or(*model, "model", "r", 0.0);
  cfg.model.alpha = number_or(*model, "model", "alpha", 0.0);
  try {
    cfg.model.validate();
  } catch (const Error& e) {
    throw ConfigError("model", e.what());
  }

  const json* coeffs = find(doc, "coefficients");
  if (!coeffs) throw ConfigError("coefficients", "required");
  only_keys(*coeffs, "coefficients", {"k", "p", "q"});
  for (auto [key, role, dst] : {std::tuple{"k", RateRole::k, &cfg.k}, std::tuple{"p", RateRole::p, &cfg.p},
                                std::tuple{"q", RateRole::q, &cfg.q}}) {
    const json* f = find(*coeffs, key);
    if (!f) throw ConfigError(join("coefficients", key), "required");
    *dst = parse_family(*f, join("coefficients", key), role);
  }

  cfg.initial = find(doc, "initial") ? parse_initial(doc["initial"], "initial")
                                     : InitialData::explicit_list(0.0, {});

  cfg.n = count_or(doc, "", "n", 0);
  if (const json* ladder = find(doc, "n_ladder")) {
    if (!ladder->is_array()) throw ConfigError("n_ladder", "expected an array of integers");
    for (std::size_t i = 0; i < ladder->size(); ++i)
      cfg.n_ladder.push_back(count((*ladder)[i], "n_ladder[" + std::to_string(i) + "]"));
  }
  if (cfg.command == Command::converge) {
    if (cfg.n_ladder.size() < 2) throw ConfigError("n_ladder", "converge needs at least two rungs");
    for (std::size_t i = 0; i < cfg.n_ladder.size(); ++i) {
      if (cfg.n_ladder[i] < 2) throw ConfigError("n_ladder[" + std::to_string(i) + "]", "must be >= 2");
      if (i > 0 && cfg.n_ladder[i] <= cfg.n_ladder[i - 1])
        throw ConfigError("n_ladder[" + std::to_string(i) + "]", "ladder must be strictly increasing");
    }
  } else if (cfg.n < 2) {
    throw ConfigError("n", "truncation order must be an integer >= 2");
  }

  cfg.T = number_or(doc, "", "T", cfg.T);
  if (!(cfg.T > 0.0) || !std::isfinite(cfg.T)) throw ConfigError("T", "must be finite and > 0");

  if (const json* integ = find(doc, "integrator")) cfg.integrator = parse_integrator(*integ, "integrator");

  if (const json* out = find(doc, "output")) {
    only_keys(*out, "output", {"dir", "m_out", "grid", "wide_csv"});
    if (const json* d = find(*out, "dir")) {
      if (!d->is_string()) throw ConfigError("output.dir", "expected a string");
      cfg.output.dir = d->get<std::string>();
    }
    cfg.output.m_out = count_or(*out, "output", "m_out", cfg.output.m_out);
    cfg.output.grid = count_or(*out, "output", "grid", cfg.output.grid);
    if (const json* w = find(*out, "wide_csv")) {
      if (!w->is_boolean()) throw ConfigError("output.wide_csv", "expected true or false");
      cfg.output.wide_csv = w->get<bool>();
    }
    if (cfg.output.m_out < 1) throw ConfigError("output.m_out", "must be >= 1");
    if (cfg.output.grid < 2) throw ConfigError("output.grid", "must be >= 2");
  }

  if (const json* chk = find(doc, "checks")) {
    only_keys(*chk, "checks", {"residual_tol", "semigroup_tol", "uniqueness_tol", "differential_tol",
                               "converge_tol", "gamma", "slack", "sample_times"});
    auto& c = cfg.checks;
    for (auto [key, dst] : {std::pair{"residual_tol", &c.residual_tol}, std::pair{"semigroup_tol", &c.semigroup_tol},
                            std::pair{"uniqueness_tol", &c.uniqueness_tol},
                            std::pair{"differential_tol", &c.differential_tol},
                            std::pair{"converge_tol", &c.converge_tol}, std::pair{"slack", &c.slack}}) {
      *dst = number_or(*chk, "checks", key, *dst);
      if (!(*dst > 0.0)) throw ConfigError(join("checks", key), "must be > 0");
    }
    c.gamma = number_or(*chk, "checks", "gamma", c.gamma);
    if (!(c.gamma >= 0.0 && c.gamma <= 1.0)) throw ConfigError("checks.gamma", "must lie in [0,1]");
    c.sample_times = count_or(*chk, "checks", "sample_times", c.sample_times);
    if (c.sample_times < 1) throw ConfigError("checks.sample_times", "must be >= 1");
  }

  if (const json* sg = find(doc, "semigroup")) {
    only_keys(*sg, "semigroup", {"pairs"});
    if (const json* pairs = find(*sg, "pairs")) {
      if (!pairs->is_array()) throw ConfigError("semigroup.pairs", "expected an array of [t, s] pairs");
      for (std::size_t i = 0; i < pairs->size(); ++i) {
        const std::string path = "semigroup.pairs[" + std::to_string(i) + "]";
        auto pr = parse_pair((*pairs)[i], path);
        if (!(pr.first >= 0.0 && pr.second >= 0.0)) throw ConfigError(path, "times must be >= 0");
        cfg.semigroup_pairs.push_back(pr);
      }
    }
  }
  if (cfg.semigroup_pairs.empty()) cfg.semigroup_pairs = {{0.5, 0.5}, {1.0, 2.0}, {0.0, 3.0}, {3.0, 0.0}};

  if (const json* eq = find(doc, "equilibrium")) {
    only_keys(*eq, "equilibrium", {"x_bracket", "tol"});
    if (const json* b = find(*eq, "x_bracket")) {
      auto pr = parse_pair(*b, "equilibrium.x_bracket");
      if (!(pr.first >= 0.0 && pr.second > pr.first))
        throw ConfigError("equilibrium.x_bracket", "must satisfy 0 <= lo < hi");
      cfg.x_bracket = pr;
    }
    cfg.equilibrium_tol = number_or(*eq, "equilibrium", "tol", cfg.equilibrium_tol);
    if (!(cfg.equilibrium_tol > 0.0)) throw ConfigError("equilibrium.tol", "must be > 0");
  }
  return cfg;
}

inline RunConfig parse_run_config_text(const std::string& text, std::optional<Command> command = std::nullopt) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", std::string("not valid JSON: ") + e.what());
  }
  return parse_run_config(doc, command);
}

inline RunConfig load_run_config(const std::string& path, std::optional<Command> command = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("", "cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config_text(buf.str(), command);
}

}  // namespace silicosis::cli

#endif  // SILICOSIS_CLI_RUN_CONFIG_HPP
