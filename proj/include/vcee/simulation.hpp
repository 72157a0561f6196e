#pragma once

// Monte Carlo harness: draws y from a Fay-Herriot or nested-error model
// (or any LmmSpec), runs a list of estimators on every draw and aggregates
// root-MSE and bias per estimator and component.
//
// Replication r draws from its own generator seeded from (seed, r), so the
// report does not depend on the thread count or on scheduling.

#include "vcee/closed_forms.hpp"
#include "vcee/structured.hpp"

#include <atomic>
#include <chrono>
#include <cstdint>
#include <random>
#include <thread>

namespace vcee {

enum class Distribution { Gaussian, ShiftedGamma };

inline std::string to_string(Distribution d) {
  return d == Distribution::Gaussian ? "gaussian" : "shifted-gamma";
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t r) {
  return splitmix64(splitmix64(seed) ^ splitmix64(r + 0x632be59bd9b4e019ULL));
}

/// Standardized (mean 0, variance 1) draws with a given excess kurtosis.
/// Positive kurtosis uses a centred gamma, (G - a) / sqrt(a) with shape
/// a = 6 / K; zero kurtosis is Gaussian.
class StandardizedSampler {
public:
  StandardizedSampler(Distribution dist, double kurtosis)
      : gamma_(dist == Distribution::ShiftedGamma && kurtosis > 0.0) {
    if (dist == Distribution::ShiftedGamma && kurtosis < 0.0) {
      throw Error("the shifted-gamma generator needs non-negative excess kurtosis");
    }
    if (gamma_) {
      shape_ = 6.0 / kurtosis;
      gamma_dist_ = std::gamma_distribution<double>(shape_, 1.0);
    }
  }

  template <class Rng>
  double operator()(Rng& rng) {
    if (!gamma_) return normal_(rng);
    return (gamma_dist_(rng) - shape_) / std::sqrt(shape_);
  }

private:
  bool gamma_;
  double shape_ = 0.0;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::gamma_distribution<double> gamma_dist_;
};

struct GeneratorSpec {
  Distribution dist = Distribution::Gaussian;
  double Ke = 0.0; ///< target excess kurtosis of the standardized errors
  double Kv = 0.0; ///< target excess kurtosis of the standardized effects
};

/// One draw y = X beta + Z Rv^{1/2} xi_v + Re^{1/2} xi_e.
template <class Rng>
Vector generate(const LmmSpec& spec, const Vector& psi, const Vector& beta, Rng& rng,
                const GeneratorSpec& gen = {}) {
  check_psi(spec, psi);
  if (beta.size() != spec.p()) {
    throw DimensionMismatch("beta has length " + std::to_string(beta.size()) +
                            ", expected p=" + std::to_string(spec.p()));
  }
  StandardizedSampler ev(gen.dist, gen.Ke), vv(gen.dist, gen.Kv);
  const Eigen::Index m = spec.m(), N = spec.N();
  Vector xi_v(m), xi_e(N);
  for (Eigen::Index i = 0; i < m; ++i) xi_v(i) = vv(rng);
  for (Eigen::Index i = 0; i < N; ++i) xi_e(i) = ev(rng);

  Vector y = spec.X * beta;
  if (spec.family != ModelFamily::Generic) {
    // Both bundled models have diagonal Rv and Re.
    const Vector rv = spec.Rv.value(psi).diagonal();
    const Vector re = spec.Re.value(psi).diagonal();
    y += spec.Z * rv.cwiseMax(0.0).cwiseSqrt().cwiseProduct(xi_v);
    y += re.cwiseMax(0.0).cwiseSqrt().cwiseProduct(xi_e);
  } else {
    y += spec.Z * (symmetric_sqrt(spec.Rv.value(psi)) * xi_v);
    y += symmetric_sqrt(spec.Re.value(psi)) * xi_e;
  }
  return y;
}

inline Vector generate(const LmmSpec& spec, const Vector& psi, const Vector& beta,
                       std::uint64_t seed, const GeneratorSpec& gen = {}) {
  std::mt19937_64 rng(stream_seed(seed, 0));
  return generate(spec, psi, beta, rng, gen);
}

struct SimulationConfig {
  LmmSpec spec;
  Vector psi_true;
  Vector beta_true;
  std::vector<Method> estimators{Method::RE, Method::ORE, Method::FH, Method::Q};
  std::int64_t replications = 1000;
  std::int64_t first_replication = 0; ///< replication indices start here
  std::uint64_t seed = 1;
  GeneratorSpec generator;
  bool truncate = true;        ///< rmse/bias on max(psi, 0); raw values are also reported
  bool keep_estimates = false; ///< store per-replication raw estimates
  int threads = 1;
  EstimationOptions options;
};

enum class RepOutcome : std::uint8_t { Ok, NoSolution, Fail };

struct EstimatorSummary {
  Method method = Method::Custom;
  Vector rmse, rmse_raw, bias, bias_raw;
  Vector mean_raw, variance_raw; ///< of the raw estimates over successful replications
  Vector rmse_stderr, bias_stderr;
  std::int64_t n_ok = 0, n_fail = 0, n_nosolution = 0;
  std::vector<Vector> estimates;        ///< raw, when keep_estimates
  std::vector<RepOutcome> outcomes;     ///< when keep_estimates
};

struct SimulationReport {
  std::uint64_t seed = 0;
  std::int64_t replications = 0;
  std::int64_t first_replication = 0;
  bool truncate = true;
  double wall_seconds = 0.0;
  std::vector<EstimatorSummary> estimators;
  std::string exclusion_note =
      "replications without a solution are counted in n_nosolution and excluded from rmse and "
      "bias; solver failures likewise in n_fail";
};

namespace detail {

struct RepResult {
  RepOutcome outcome = RepOutcome::Fail;
  Vector psi_raw;
};

inline RepResult run_estimator(const LmmSpec& spec, const std::optional<BlockModel>& bm,
                               Method method, const Vector& y,
                               const EstimationOptions& options) {
  RepResult out;
  try {
    if (method == Method::PR) {
      if (spec.family == ModelFamily::FayHerriot) {
        out.psi_raw = Vector::Constant(1, closed_form_pr_fh(spec, y));
      } else if (spec.family == ModelFamily::NestedError) {
        out.psi_raw = closed_form_pr_ner(spec, y);
      } else {
        throw Error("PR estimator is only defined for the Fay-Herriot and nested-error models");
      }
      out.outcome = RepOutcome::Ok;
      return out;
    }
    const auto [kind, map] = method_definition(method);
    const EstimationResult res = bm ? block_try_solve(spec, *bm, kind, map, y, options)
                                    : try_solve_ee(spec, WeightScheme{kind, {}}, map, y, options);
    out.psi_raw = res.psi_raw;
    out.outcome = res.converged ? RepOutcome::Ok
                  : res.status == SolveStatus::NoSolution ? RepOutcome::NoSolution
                                                          : RepOutcome::Fail;
  } catch (const Error&) {
    out.outcome = RepOutcome::Fail;
  }
  return out;
}

} // namespace detail

inline void validate(const SimulationConfig& c) {
  if (c.replications < 1) throw Error("replications must be at least 1");
  if (c.first_replication < 0) throw Error("first_replication must be non-negative");
  if (c.estimators.empty()) throw Error("no estimators selected");
  check_psi(c.spec, c.psi_true);
  if (c.beta_true.size() != c.spec.p()) {
    throw DimensionMismatch("beta has length " + std::to_string(c.beta_true.size()) +
                            ", expected p=" + std::to_string(c.spec.p()));
  }
  if (c.threads < 1) throw Error("threads must be at least 1");
  validate_design(c.spec);
}

inline SimulationReport run_simulation(const SimulationConfig& config) {
  validate(config);
  const auto t0 = std::chrono::steady_clock::now();
  const LmmSpec& spec = config.spec;
  std::optional<BlockModel> bm;
  if (spec.family != ModelFamily::Generic) bm = BlockModel::from_spec(spec);

  const auto R = config.replications;
  const auto E = static_cast<std::int64_t>(config.estimators.size());
  std::vector<detail::RepResult> results(static_cast<std::size_t>(R * E));

  std::atomic<std::int64_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::int64_t r = next.fetch_add(1);
      if (r >= R) return;
      const auto index = static_cast<std::uint64_t>(config.first_replication + r);
      std::mt19937_64 rng(stream_seed(config.seed, index));
      const Vector y = generate(spec, config.psi_true, config.beta_true, rng, config.generator);
      for (std::int64_t e = 0; e < E; ++e) {
        results[static_cast<std::size_t>(r * E + e)] =
            detail::run_estimator(spec, bm, config.estimators[e], y, config.options);
      }
    }
  };
  const int nthreads = static_cast<int>(std::min<std::int64_t>(config.threads, R));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  SimulationReport report;
  report.seed = config.seed;
  report.replications = R;
  report.first_replication = config.first_replication;
  report.truncate = config.truncate;
  const Eigen::Index k = spec.k;
  for (std::int64_t e = 0; e < E; ++e) {
    EstimatorSummary s;
    s.method = config.estimators[e];
    Vector sum_sq = Vector::Zero(k), sum_sq_raw = Vector::Zero(k), sum_err = Vector::Zero(k),
           sum_err_raw = Vector::Zero(k), sum_sq4 = Vector::Zero(k), sum_raw = Vector::Zero(k),
           sum_raw2 = Vector::Zero(k);
    for (std::int64_t r = 0; r < R; ++r) {
      const auto& res = results[static_cast<std::size_t>(r * E + e)];
      if (config.keep_estimates) {
        s.outcomes.push_back(res.outcome);
        s.estimates.push_back(res.outcome == RepOutcome::Ok
                                  ? res.psi_raw
                                  : Vector::Constant(k, std::numeric_limits<double>::quiet_NaN()));
      }
      if (res.outcome == RepOutcome::NoSolution) {
        ++s.n_nosolution;
        continue;
      }
      if (res.outcome == RepOutcome::Fail) {
        ++s.n_fail;
        continue;
      }
      ++s.n_ok;
      const Vector used = config.truncate ? res.psi_raw.cwiseMax(0.0) : res.psi_raw;
      const Vector err = used - config.psi_true;
      const Vector err_raw = res.psi_raw - config.psi_true;
      sum_err += err;
      sum_err_raw += err_raw;
      sum_sq += err.cwiseAbs2();
      sum_sq4 += err.cwiseAbs2().cwiseAbs2();
      sum_sq_raw += err_raw.cwiseAbs2();
      sum_raw += res.psi_raw;
      sum_raw2 += res.psi_raw.cwiseAbs2();
    }
    const double n = static_cast<double>(s.n_ok);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (s.n_ok == 0) {
      s.rmse = s.rmse_raw = s.bias = s.bias_raw = s.mean_raw = s.variance_raw = s.rmse_stderr =
          s.bias_stderr = Vector::Constant(k, nan);
    } else {
      const Vector mse = sum_sq / n;
      s.rmse = mse.cwiseSqrt();
      s.rmse_raw = (sum_sq_raw / n).cwiseSqrt();
      s.bias = sum_err / n;
      s.bias_raw = sum_err_raw / n;
      s.mean_raw = sum_raw / n;
      s.variance_raw = s.rmse_stderr = s.bias_stderr = Vector::Constant(k, nan);
      if (s.n_ok > 1) {
        const Vector var_err = ((sum_sq - n * s.bias.cwiseAbs2()) / (n - 1)).cwiseMax(0.0);
        s.bias_stderr = (var_err / n).cwiseSqrt();
        s.variance_raw =
            ((sum_raw2 - n * s.mean_raw.cwiseAbs2()) / (n - 1)).cwiseMax(0.0);
        const Vector var_sq = ((sum_sq4 - n * mse.cwiseAbs2()) / (n - 1)).cwiseMax(0.0);
        // delta method: se(sqrt(mse)) = se(mse) / (2 sqrt(mse))
        s.rmse_stderr = (var_sq / n).cwiseSqrt().cwiseQuotient(2.0 * s.rmse);
      }
    }
    report.estimators.push_back(std::move(s));
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

/// D-pattern (0.7, 0.6, 0.5, 0.4, 0.3), each value used `repeats` times in a row.
inline Vector fh_design_variances(int repeats) {
  static constexpr double pattern[] = {0.7, 0.6, 0.5, 0.4, 0.3};
  Vector D(5 * repeats);
  for (int g = 0; g < 5; ++g) {
    for (int r = 0; r < repeats; ++r) D(g * repeats + r) = pattern[g];
  }
  return D;
}

/// Cluster sizes (5, 5, 6, 6, 7), each used `repeats` times in a row.
inline std::vector<int> ner_design_sizes(int repeats) {
  static constexpr int pattern[] = {5, 5, 6, 6, 7};
  std::vector<int> n;
  for (int g : pattern) {
    for (int r = 0; r < repeats; ++r) n.push_back(g);
  }
  return n;
}

/// Covariates (1, z1, z2) with z drawn once from N(0, 1) using `seed`.
inline Matrix ner_design_covariates(Eigen::Index N, std::uint64_t seed) {
  std::mt19937_64 rng(stream_seed(seed, 0xC0FFEEULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix X(N, 3);
  for (Eigen::Index i = 0; i < N; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = normal(rng);
    X(i, 2) = normal(rng);
  }
  return X;
}

} // namespace vcee
