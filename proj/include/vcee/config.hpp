#pragma once

// JSON run configurations ("schema": "vc-estim/1") and JSON / CSV output of
// estimation, asymptotics and simulation results.

#include "vcee/io.hpp"
#include "vcee/simulation.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>

namespace vcee {

using json = nlohmann::json;

inline constexpr const char* schema_version = "vc-estim/1";

class ConfigError : public Error {
public:
  using Error::Error;
};

inline json to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline json to_json(const Matrix& M) {
  json out = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) out.push_back(to_json(Vector(M.row(i).transpose())));
  return out;
}

inline json to_json(const std::vector<Matrix>& list) {
  json out = json::array();
  for (const auto& M : list) out.push_back(to_json(M));
  return out;
}

namespace config {

inline void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

inline Vector vector_from(const json& j, const std::string& field) {
  if (j.is_number()) return Vector::Constant(1, j.get<double>());
  require(j.is_array(), field, "expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    require(j[i].is_number(), field, "element " + std::to_string(i) + " is not a number");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline Matrix matrix_from(const json& j, const std::string& field) {
  require(j.is_array() && !j.empty(), field, "expected a non-empty array of rows");
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  require(cols > 0, field, "rows must be non-empty arrays");
  Matrix M(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < j.size(); ++i) {
    require(j[i].is_array() && j[i].size() == cols, field,
            "row " + std::to_string(i) + " does not have " + std::to_string(cols) + " entries");
    M.row(static_cast<Eigen::Index>(i)) =
        vector_from(j[i], field + "[" + std::to_string(i) + "]").transpose();
  }
  return M;
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

/// Vector given inline under `key` or as a CSV file under `key + "_file"`.
inline std::optional<Vector> vector_field(const json& j, const std::string& key,
                                          const std::filesystem::path& base) {
  if (j.contains(key)) return vector_from(j.at(key), key);
  if (j.contains(key + "_file")) {
    return read_csv_vector(resolve(base, j.at(key + "_file").get<std::string>()).string());
  }
  return std::nullopt;
}

inline std::optional<Matrix> matrix_field(const json& j, const std::string& key,
                                          const std::filesystem::path& base) {
  if (j.contains(key)) return matrix_from(j.at(key), key);
  if (j.contains(key + "_file")) {
    return read_csv(resolve(base, j.at(key + "_file").get<std::string>()).string());
  }
  return std::nullopt;
}

inline void check_schema(const json& j) {
  require(j.is_object(), "config", "expected a JSON object");
  require(j.contains("schema"), "schema", "missing (expected \"" + std::string(schema_version) +
                                              "\")");
  require(j.at("schema") == schema_version, "schema",
          "unsupported version " + j.at("schema").dump());
}

} // namespace config

/// Build the model from a "model" block. Supported:
///   {"type":"fh", "D":[...] | "D_file":path | "design":{"repeats":r}, "X"/"X_file"?}
///   {"type":"ner", "n":[...] | "design":{"repeats":r,"covariate_seed":s}, "X"/"X_file"}
/// plus optional "Ke", "Kv".
inline LmmSpec model_from_json(const json& model, const std::filesystem::path& base = ".") {
  using namespace config;
  require(model.is_object(), "model", "expected an object");
  require(model.contains("type"), "model.type", "missing (fh or ner)");
  const std::string type = model.at("type").get<std::string>();
  LmmSpec spec;
  const auto X = matrix_field(model, "X", base);
  if (type == "fh") {
    std::optional<Vector> D = vector_field(model, "D", base);
    if (!D && model.contains("design")) {
      D = fh_design_variances(model.at("design").value("repeats", 3));
    }
    require(D.has_value(), "model.D", "missing (give D, D_file or design)");
    spec = make_fay_herriot(*D, X);
  } else if (type == "ner") {
    std::vector<int> n;
    Matrix Xn;
    if (model.contains("n")) {
      const Vector nv = vector_from(model.at("n"), "model.n");
      for (Eigen::Index i = 0; i < nv.size(); ++i) {
        require(nv(i) == std::floor(nv(i)) && nv(i) >= 1, "model.n",
                "cluster sizes must be positive integers");
        n.push_back(static_cast<int>(nv(i)));
      }
    } else if (model.contains("design")) {
      n = ner_design_sizes(model.at("design").value("repeats", 3));
    }
    require(!n.empty(), "model.n", "missing (give n or design)");
    if (X) {
      Xn = *X;
    } else {
      require(model.contains("design"), "model.X", "missing (give X, X_file or design)");
      Eigen::Index N = 0;
      for (int v : n) N += v;
      Xn = ner_design_covariates(N, model.at("design").value("covariate_seed", 7ULL));
    }
    spec = make_nested_error(n, Xn);
  } else {
    throw ConfigError("model.type: unknown model type '" + type + "' (expected fh or ner)");
  }
  spec.Ke = model.value("Ke", 0.0);
  spec.Kv = model.value("Kv", 0.0);
  return spec;
}

/// Self-contained description of a model with all data inlined.
inline json model_to_json(const LmmSpec& spec) {
  json j;
  if (spec.family == ModelFamily::FayHerriot) {
    j["type"] = "fh";
    j["D"] = to_json(spec.D);
  } else if (spec.family == ModelFamily::NestedError) {
    j["type"] = "ner";
    j["n"] = spec.cluster_sizes;
  } else {
    throw Error("only Fay-Herriot and nested-error models can be serialized");
  }
  j["X"] = to_json(spec.X);
  j["Ke"] = spec.Ke;
  j["Kv"] = spec.Kv;
  return j;
}

struct MethodChoice {
  Method tag = Method::RE;
  WeightKind kind = WeightKind::RE;
  CoefficientMap map = CoefficientMap::GLS;
};

inline MethodChoice method_from_json(const json& j) {
  MethodChoice mc;
  if (j.is_string()) {
    const auto m = method_from_string(j.get<std::string>());
    if (!m) throw ConfigError("method: unknown method '" + j.get<std::string>() + "'");
    mc.tag = *m;
    if (*m != Method::PR) std::tie(mc.kind, mc.map) = method_definition(*m);
    else {
      mc.kind = WeightKind::Q;
      mc.map = CoefficientMap::OLS;
    }
    return mc;
  }
  config::require(j.is_object(), "method", "expected a name or {\"weights\", \"map\"}");
  const std::string w = j.value("weights", "RE");
  const std::string map = j.value("map", "GLS");
  if (w == "RE") mc.kind = WeightKind::RE;
  else if (w == "FH") mc.kind = WeightKind::FH;
  else if (w == "Q") mc.kind = WeightKind::Q;
  else throw ConfigError("method.weights: unknown weight kind '" + w + "'");
  if (map == "GLS") mc.map = CoefficientMap::GLS;
  else if (map == "OLS") mc.map = CoefficientMap::OLS;
  else throw ConfigError("method.map: unknown coefficient map '" + map + "'");
  mc.tag = method_tag(mc.kind, mc.map);
  return mc;
}

inline EstimationOptions options_from_json(const json& root) {
  EstimationOptions o;
  if (root.contains("numeric")) {
    const json& n = root.at("numeric");
    o.solver.tol = n.value("tol", o.solver.tol);
    o.solver.max_iterations = n.value("max_iterations", o.solver.max_iterations);
    config::require(o.solver.tol > 0.0, "numeric.tol", "must be positive");
    config::require(o.solver.max_iterations > 0, "numeric.max_iterations", "must be positive");
  }
  return o;
}

inline json result_to_json(const EstimationResult& r) {
  json j;
  j["method"] = to_string(r.method);
  j["psi_hat"] = to_json(r.psi_hat);
  j["psi_raw"] = to_json(r.psi_raw);
  j["truncated"] = r.truncated;
  j["beta_hat"] = to_json(r.beta_hat);
  j["iterations"] = r.iterations;
  j["converged"] = r.converged;
  j["residual_norm"] = r.residual_norm;
  j["status"] = to_string(r.status);
  if (!r.message.empty()) j["message"] = r.message;
  return j;
}

inline json report_to_json(const AsymptoticsReport& r) {
  json j;
  j["method"] = r.method;
  j["psi"] = to_json(r.psi);
  j["A"] = to_json(r.A);
  j["B"] = to_json(r.B);
  j["Btilde"] = to_json(r.Btilde);
  j["K"] = to_json(r.K);
  j["H"] = to_json(r.H);
  j["Ktilde"] = to_json(r.Ktilde);
  j["cov"] = to_json(r.cov);
  j["bias"] = to_json(r.bias);
  j["unbiased"] = r.unbiased;
  j["efficiency_gap_min_eigenvalue"] = r.efficiency_gap_min_eigenvalue;
  return j;
}

inline SimulationConfig simulation_from_json(const json& root,
                                             const std::filesystem::path& base = ".") {
  using namespace config;
  require(root.contains("model"), "model", "missing");
  SimulationConfig c;
  c.spec = model_from_json(root.at("model"), base);
  require(root.contains("psi_true"), "psi_true", "missing");
  c.psi_true = vector_from(root.at("psi_true"), "psi_true");
  require(c.psi_true.size() == c.spec.k, "psi_true",
          "expected " + std::to_string(c.spec.k) + " values");
  c.beta_true = root.contains("beta_true") ? vector_from(root.at("beta_true"), "beta_true")
                                           : Vector::Zero(c.spec.p());
  require(c.beta_true.size() == c.spec.p(), "beta_true",
          "expected " + std::to_string(c.spec.p()) + " values");
  if (root.contains("estimators")) {
    c.estimators.clear();
    for (const auto& e : root.at("estimators")) {
      const auto m = method_from_string(e.get<std::string>());
      require(m.has_value(), "estimators", "unknown estimator '" + e.get<std::string>() + "'");
      c.estimators.push_back(*m);
    }
  }
  const json numeric = root.value("numeric", json::object());
  c.replications = numeric.value("replications", root.value("replications", std::int64_t{1000}));
  require(c.replications >= 1, "numeric.replications", "must be at least 1");
  c.seed = numeric.value("seed", root.value("seed", std::uint64_t{1}));
  c.threads = numeric.value("threads", 1);
  c.first_replication = numeric.value("first_replication", std::int64_t{0});
  c.truncate = root.value("truncate", true);
  c.options = options_from_json(root);
  if (root.contains("distribution")) {
    const json& d = root.at("distribution");
    const std::string type = d.value("type", "gaussian");
    if (type == "gaussian") c.generator.dist = Distribution::Gaussian;
    else if (type == "shifted-gamma") c.generator.dist = Distribution::ShiftedGamma;
    else throw ConfigError("distribution.type: unknown distribution '" + type + "'");
    c.generator.Ke = d.value("Ke", c.spec.Ke);
    c.generator.Kv = d.value("Kv", c.spec.Kv);
    require(c.generator.Ke >= 0.0 && c.generator.Kv >= 0.0, "distribution",
            "kurtosis targets must be non-negative");
  }
  return c;
}

inline std::string component_name(Eigen::Index a) { return "psi" + std::to_string(a + 1); }

inline void write_simulation_csv(std::ostream& out, const SimulationReport& r) {
  out << "estimator,psi_component,rmse,rmse_raw,bias,n_fail,n_nosolution\n";
  for (const auto& s : r.estimators) {
    for (Eigen::Index a = 0; a < s.rmse.size(); ++a) {
      out << to_string(s.method) << ',' << component_name(a) << ',' << format_double(s.rmse(a))
          << ',' << format_double(s.rmse_raw(a)) << ',' << format_double(s.bias(a)) << ','
          << s.n_fail << ',' << s.n_nosolution << '\n';
    }
  }
}

inline json simulation_to_json(const SimulationReport& r) {
  json j;
  j["seed"] = r.seed;
  j["replications"] = r.replications;
  j["first_replication"] = r.first_replication;
  j["truncate"] = r.truncate;
  j["wall_seconds"] = r.wall_seconds;
  j["note"] = r.exclusion_note;
  json list = json::array();
  for (const auto& s : r.estimators) {
    json e;
    e["estimator"] = to_string(s.method);
    e["rmse"] = to_json(s.rmse);
    e["rmse_raw"] = to_json(s.rmse_raw);
    e["rmse_stderr"] = to_json(s.rmse_stderr);
    e["bias"] = to_json(s.bias);
    e["bias_raw"] = to_json(s.bias_raw);
    e["bias_stderr"] = to_json(s.bias_stderr);
    e["n_ok"] = s.n_ok;
    e["n_fail"] = s.n_fail;
    e["n_nosolution"] = s.n_nosolution;
    list.push_back(std::move(e));
  }
  j["estimators"] = std::move(list);
  return j;
}

} // namespace vcee
