#pragma once

// Command-line front end: estimate, asymptotics, simulate.
//
// Exit codes: 0 success, 1 input/configuration/numerical error,
// 2 no solution in the admissible region, 3 iteration limit or singular Jacobian.

#include "vcee/config.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace vcee::cli {

struct Options {
  std::string command;
  std::string config;
  std::string output;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

inline json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + " is not valid JSON (" + e.what() + ")");
  }
  config::check_schema(j);
  return j;
}

inline std::filesystem::path base_dir(const std::string& path) {
  return std::filesystem::path(path).parent_path();
}

inline std::string output_path(const Options& o, const json& cfg) {
  if (!o.output.empty()) return o.output;
  return cfg.value("output", std::string());
}

inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << text;
}

inline int exit_code(SolveStatus s) {
  switch (s) {
  case SolveStatus::Converged: return 0;
  case SolveStatus::NoSolution: return 2;
  case SolveStatus::MaxIterations:
  case SolveStatus::SingularJacobian: return 3;
  }
  return 1;
}

inline int cmd_estimate(const Options& o, std::ostream& out, std::ostream& err) {
  const json cfg = load_config(o.config);
  const auto base = base_dir(o.config);
  config::require(cfg.contains("model"), "model", "missing");
  const LmmSpec spec = model_from_json(cfg.at("model"), base);
  const auto y = config::vector_field(cfg, "y", base);
  config::require(y.has_value(), "y", "missing (give y or y_file)");
  config::require(y->size() == spec.N(), "y",
                  "has " + std::to_string(y->size()) + " values, model has N=" +
                      std::to_string(spec.N()));
  config::require(cfg.contains("method"), "method", "missing");
  const MethodChoice mc = method_from_json(cfg.at("method"));

  EstimationResult res;
  if (mc.tag == Method::PR) {
    res.method = Method::PR;
    if (spec.family == ModelFamily::FayHerriot) {
      res.psi_raw = Vector::Constant(1, closed_form_pr_fh(spec, *y));
    } else if (spec.family == ModelFamily::NestedError) {
      res.psi_raw = closed_form_pr_ner(spec, *y);
    } else {
      throw ConfigError("method: PR needs a fh or ner model");
    }
    res.psi_hat = res.psi_raw.cwiseMax(0.0);
    for (Eigen::Index a = 0; a < res.psi_raw.size(); ++a) {
      res.truncated.push_back(res.psi_raw(a) < 0.0);
    }
    res.beta_hat = coefficient_matrix(CoefficientMap::OLS, spec, res.psi_hat) * *y;
    res.converged = true;
    res.status = SolveStatus::Converged;
  } else {
    res = try_solve_ee(spec, WeightScheme{mc.kind, {}}, mc.map, *y, options_from_json(cfg));
  }

  json doc;
  doc["schema"] = schema_version;
  doc["model"] = model_to_json(spec);
  doc["method"] = to_string(mc.tag) == "Custom"
                      ? json{{"weights", to_string(mc.kind)}, {"map", to_string(mc.map)}}
                      : json(to_string(mc.tag));
  doc["psi"] = to_json(res.converged ? res.psi_hat : res.psi_raw);
  doc["result"] = result_to_json(res);
  emit(output_path(o, cfg), doc.dump(2) + "\n", out);
  const int code = exit_code(res.status);
  if (code != 0) err << "estimate: " << to_string(res.status) << ": " << res.message << "\n";
  return code;
}

inline int cmd_asymptotics(const Options& o, std::ostream& out, std::ostream&) {
  const json cfg = load_config(o.config);
  const auto base = base_dir(o.config);
  config::require(cfg.contains("model"), "model", "missing");
  const LmmSpec spec = model_from_json(cfg.at("model"), base);
  config::require(cfg.contains("psi"), "psi", "missing (asymptotics are evaluated at a given psi)");
  const Vector psi = config::vector_from(cfg.at("psi"), "psi");
  config::require(psi.size() == spec.k, "psi", "expected " + std::to_string(spec.k) + " values");
  config::require(cfg.contains("method"), "method", "missing");
  const MethodChoice mc = method_from_json(cfg.at("method"));
  if (mc.tag == Method::PR && spec.family != ModelFamily::FayHerriot) {
    throw ConfigError("method: PR asymptotics are only available in the fh model (use Q)");
  }
  const AsymptoticsReport r =
      asymptotics_report(spec, WeightScheme{mc.kind, {}}, psi, to_string(mc.tag));
  json doc = report_to_json(r);
  doc["schema"] = schema_version;
  emit(output_path(o, cfg), doc.dump(2) + "\n", out);
  return 0;
}

inline int cmd_simulate(const Options& o, std::ostream& out, std::ostream&) {
  const json cfg = load_config(o.config);
  SimulationConfig sc = simulation_from_json(cfg, base_dir(o.config));
  if (o.seed) sc.seed = *o.seed;
  if (o.threads) sc.threads = *o.threads;
  const SimulationReport report = run_simulation(sc);

  std::ostringstream csv;
  write_simulation_csv(csv, report);
  const std::string path = output_path(o, cfg);
  emit(path, csv.str(), out);

  json meta;
  meta["schema"] = schema_version;
  json echo = cfg;
  echo["numeric"]["seed"] = sc.seed;
  echo["numeric"]["threads"] = sc.threads;
  meta["config"] = std::move(echo);
  meta["report"] = simulation_to_json(report);
  if (!path.empty()) emit(path + ".json", meta.dump(2) + "\n", out);
  return 0;
}

/// Parse arguments and run; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Variance-component estimation by unbiased estimating equations"};
  app.require_subcommand(1);
  Options o;
  for (const char* name : {"estimate", "asymptotics", "simulate"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", o.config, "JSON run configuration")->required();
    sub->add_option("--output", o.output, "output file (default: config \"output\" or stdout)");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { o.seed = s; }, "override the config seed");
    sub->add_option_function<int>(
        "--threads", [&](const int& t) { o.threads = t; }, "worker threads");
    sub->callback([&o, name] { o.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  try {
    if (o.threads && *o.threads < 1) throw ConfigError("--threads: must be at least 1");
    if (o.command == "estimate") return cmd_estimate(o, out, err);
    if (o.command == "asymptotics") return cmd_asymptotics(o, out, err);
    return cmd_simulate(o, out, err);
  } catch (const std::exception& e) {
    err << o.command << ": " << e.what() << "\n";
    return 1;
  }
}

} // namespace vcee::cli
