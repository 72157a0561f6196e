#pragma once

// Root finding for k-dimensional estimating equations.
//
// The equation is a callable `std::optional<Vector> f(const Vector&)` which
// returns std::nullopt at points where it cannot be evaluated (for example
// when Sigma(psi) is not positive definite). Such points are treated as
// lying outside the admissible region.
//
// k = 1: bracket a sign change (expanding upwards to a cap, or downwards until
//        the admissible boundary), then safeguarded Newton with bisection.
// k > 1: damped Newton with a central-difference Jacobian, backtracking on the
//        residual norm, restarted from rescaled starting points.

#include "vcee/model.hpp"

#include <cmath>
#include <optional>
#include <string>

namespace vcee {

enum class SolveStatus { Converged, NoSolution, MaxIterations, SingularJacobian };

inline std::string to_string(SolveStatus s) {
  switch (s) {
  case SolveStatus::Converged: return "converged";
  case SolveStatus::NoSolution: return "no_solution";
  case SolveStatus::MaxIterations: return "max_iterations";
  case SolveStatus::SingularJacobian: return "singular_jacobian";
  }
  return "?";
}

struct SolverOptions {
  double tol = 1e-9;         ///< on the Euclidean norm of the equation value
  int max_iterations = 200;  ///< per Newton attempt
  double fd_step = 1e-6;     ///< relative central-difference step
  double cap_factor = 1e6;   ///< k = 1: upper search limit = cap_factor * start scale
  int restarts = 4;          ///< k > 1: additional rescaled starting points
  int polish_steps = 4;      ///< extra Newton steps after reaching tol
};

struct RootResult {
  Vector x;
  Vector fx;
  double residual_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  SolveStatus status = SolveStatus::NoSolution;
  std::string message;
};

namespace detail {

inline double fd_step(double x, double rel) { return rel * std::max(1.0, std::abs(x)); }

inline bool in_box(const FeasibleRegion& box, const Vector& x) { return box.contains(x); }

template <class F>
std::optional<Vector> eval_in(F& f, const FeasibleRegion& box, const Vector& x) {
  if (!in_box(box, x) || !x.allFinite()) return std::nullopt;
  auto v = f(x);
  if (v && !v->allFinite()) return std::nullopt;
  return v;
}

/// Central-difference Jacobian J(i, j) = d f_i / d x_j, falling back to a
/// one-sided difference next to the admissible boundary.
template <class F>
std::optional<Matrix> fd_jacobian(F& f, const FeasibleRegion& box, const Vector& x,
                                  const Vector& fx, double rel) {
  const Eigen::Index k = x.size();
  Matrix J(fx.size(), k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const double h = fd_step(x(j), rel);
    Vector xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    auto fp = eval_in(f, box, xp);
    auto fm = eval_in(f, box, xm);
    if (fp && fm) {
      J.col(j) = (*fp - *fm) / (2.0 * h);
    } else if (fp) {
      J.col(j) = (*fp - fx) / h;
    } else if (fm) {
      J.col(j) = (fx - *fm) / h;
    } else {
      return std::nullopt;
    }
  }
  return J;
}

template <class F>
RootResult scalar_root(F& f, const Vector& start, const FeasibleRegion& box,
                       const SolverOptions& opt) {
  RootResult res;
  int evals = 0;
  auto call = [&](double x) -> std::optional<double> {
    ++evals;
    auto v = eval_in(f, box, Vector::Constant(1, x));
    if (!v) return std::nullopt;
    return (*v)(0);
  };
  auto finish = [&](double x, double fx, SolveStatus status, std::string msg) {
    res.x = Vector::Constant(1, x);
    res.fx = Vector::Constant(1, fx);
    res.residual_norm = std::abs(fx);
    res.status = status;
    res.message = std::move(msg);
    res.iterations = evals;
    return res;
  };

  double x0 = std::clamp(start(0), box.lower(0), box.upper(0));
  auto f0 = call(x0);
  if (!f0) {
    res.x = Vector::Constant(1, x0);
    res.status = SolveStatus::NoSolution;
    res.message = "starting point is not admissible";
    return res;
  }

  // Bracket: pos has f > 0, neg has f < 0.
  double pos = x0, neg = x0, fpos = *f0, fneg = *f0;
  const double scale = std::max(std::abs(x0), 1e-3);
  const int max_evals = 60 * opt.max_iterations;
  if (std::abs(*f0) <= opt.tol) {
    pos = neg = x0;
  } else if (*f0 > 0) {
    const double cap = std::min(box.upper(0), opt.cap_factor * std::max(1.0, std::abs(x0)));
    double step = 0.5 * scale;
    bool found = false;
    while (!found) {
      double x = std::min(pos + step, cap);
      auto fx = call(x);
      if (!fx) break;
      if (*fx <= 0) {
        neg = x;
        fneg = *fx;
        found = true;
      } else {
        pos = x;
        fpos = *fx;
        if (x >= cap) break;
        step *= 2.0;
      }
      if (evals > max_evals) break;
    }
    if (!found) {
      return finish(pos, fpos, SolveStatus::NoSolution,
                    "estimating equation stays positive up to the search cap");
    }
  } else {
    double step = 0.5 * scale;
    bool found = false;
    while (!found && evals <= max_evals) {
      double x = neg - step;
      if (x < box.lower(0)) x = box.lower(0);
      if (x >= neg) break; // already at the lower bound
      auto fx = call(x);
      if (!fx) {
        step *= 0.5;
        if (step < 1e-15 * std::max(1.0, std::abs(neg))) break;
        continue;
      }
      if (*fx >= 0) {
        pos = x;
        fpos = *fx;
        found = true;
      } else {
        neg = x;
        fneg = *fx;
        step *= 2.0;
      }
    }
    if (!found) {
      return finish(neg, fneg, SolveStatus::NoSolution,
                    "estimating equation stays negative down to the admissible boundary");
    }
  }

  // Safeguarded Newton inside the bracket.
  double x = std::abs(fpos) < std::abs(fneg) ? pos : neg;
  double fx = std::abs(fpos) < std::abs(fneg) ? fpos : fneg;
  int iter = 0;
  while (std::abs(fx) > opt.tol) {
    if (++iter > opt.max_iterations) {
      return finish(x, fx, SolveStatus::MaxIterations, "bracketed search did not converge");
    }
    const double lo = std::min(pos, neg), hi = std::max(pos, neg);
    if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(x))) {
      break; // sign change between adjacent floating-point values
    }
    double slope = (fpos - fneg) / (pos - neg);
    const double h = fd_step(x, opt.fd_step);
    auto fp = call(x + h);
    auto fm = call(x - h);
    if (fp && fm) slope = (*fp - *fm) / (2.0 * h);
    double trial = x - fx / slope;
    if (!(trial > lo && trial < hi) || !std::isfinite(trial)) trial = 0.5 * (lo + hi);
    auto ft = call(trial);
    if (!ft) {
      trial = 0.5 * (lo + hi);
      ft = call(trial);
      if (!ft) return finish(x, fx, SolveStatus::NoSolution, "lost admissibility inside bracket");
    }
    if (*ft > 0) {
      pos = trial;
      fpos = *ft;
    } else {
      neg = trial;
      fneg = *ft;
    }
    // Force progress if Newton keeps landing on the same side.
    if (std::abs(*ft) > 0.5 * std::abs(fx)) {
      const double mid = 0.5 * (std::min(pos, neg) + std::max(pos, neg));
      auto fmid = call(mid);
      if (fmid) {
        if (*fmid > 0) {
          pos = mid;
          fpos = *fmid;
        } else {
          neg = mid;
          fneg = *fmid;
        }
        if (std::abs(*fmid) < std::abs(*ft)) {
          trial = mid;
          ft = fmid;
        }
      }
    }
    x = trial;
    fx = *ft;
  }

  // Polish towards the floating-point root.
  for (int s = 0; s < opt.polish_steps && fx != 0.0; ++s) {
    const double h = fd_step(x, opt.fd_step);
    auto fp = call(x + h);
    auto fm = call(x - h);
    if (!fp || !fm) break;
    const double slope = (*fp - *fm) / (2.0 * h);
    if (slope == 0.0 || !std::isfinite(slope)) break;
    const double trial = x - fx / slope;
    auto ft = call(trial);
    if (!ft || std::abs(*ft) >= std::abs(fx)) break;
    x = trial;
    fx = *ft;
  }
  return finish(x, fx, SolveStatus::Converged, "");
}

template <class F>
RootResult newton_attempt(F& f, const Vector& start, const FeasibleRegion& box,
                          const SolverOptions& opt) {
  RootResult res;
  res.x = start;
  auto f0 = eval_in(f, box, start);
  if (!f0) {
    res.status = SolveStatus::NoSolution;
    res.message = "starting point is not admissible";
    return res;
  }
  Vector x = start, fx = *f0;
  double norm = fx.norm();
  auto set = [&](SolveStatus s, std::string msg, int it) {
    res.x = x;
    res.fx = fx;
    res.residual_norm = norm;
    res.status = s;
    res.message = std::move(msg);
    res.iterations = it;
    return res;
  };

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    if (norm <= opt.tol) {
      for (int s = 0; s < opt.polish_steps; ++s) {
        auto J = fd_jacobian(f, box, x, fx, opt.fd_step);
        if (!J) break;
        Eigen::FullPivLU<Matrix> lu(*J);
        if (!lu.isInvertible()) break;
        Vector trial = x - lu.solve(fx);
        auto ft = eval_in(f, box, trial);
        if (!ft || ft->norm() >= norm) break;
        x = trial;
        fx = *ft;
        norm = fx.norm();
      }
      return set(SolveStatus::Converged, "", iter);
    }
    auto J = fd_jacobian(f, box, x, fx, opt.fd_step);
    if (!J) return set(SolveStatus::NoSolution, "Jacobian not computable", iter);
    Eigen::FullPivLU<Matrix> lu(*J);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) {
      return set(SolveStatus::SingularJacobian, "Jacobian is singular", iter);
    }
    const Vector step = -lu.solve(fx);
    double lambda = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls, lambda *= 0.5) {
      Vector trial = x + lambda * step;
      auto ft = eval_in(f, box, trial);
      if (ft && ft->norm() <= (1.0 - 1e-4 * lambda) * norm) {
        x = trial;
        fx = *ft;
        norm = fx.norm();
        accepted = true;
        break;
      }
    }
    if (!accepted) return set(SolveStatus::NoSolution, "line search stalled", iter);
  }
  return set(SolveStatus::MaxIterations, "Newton iteration limit reached", opt.max_iterations);
}

} // namespace detail

/// Solve f(x) = 0 over the admissible part of `box`, starting at `start`.
template <class F>
RootResult find_root(F&& f, const Vector& start, const FeasibleRegion& box,
                     const SolverOptions& opt = {}) {
  if (start.size() == 1) return detail::scalar_root(f, start, box, opt);

  static constexpr double factors[] = {1.0, 0.5, 2.0, 0.2, 5.0, 0.05, 20.0};
  RootResult best;
  int total_iterations = 0;
  bool any_max_iter = false, all_singular = true;
  const int attempts = std::min<int>(1 + opt.restarts, std::size(factors));
  for (int r = 0; r < attempts; ++r) {
    Vector s = start;
    // Rescale the leading (random-effect) components; keep the last fixed.
    for (Eigen::Index j = 0; j + 1 < s.size(); ++j) s(j) *= factors[r];
    RootResult attempt = detail::newton_attempt(f, s, box, opt);
    total_iterations += attempt.iterations;
    if (attempt.status == SolveStatus::Converged) {
      attempt.iterations = total_iterations;
      return attempt;
    }
    any_max_iter = any_max_iter || attempt.status == SolveStatus::MaxIterations;
    all_singular = all_singular && attempt.status == SolveStatus::SingularJacobian;
    if (r == 0 || attempt.residual_norm < best.residual_norm) best = attempt;
  }
  best.iterations = total_iterations;
  if (all_singular) {
    best.status = SolveStatus::SingularJacobian;
  } else if (any_max_iter) {
    best.status = SolveStatus::MaxIterations;
  } else {
    best.status = SolveStatus::NoSolution;
    best.message = "no root found after Newton restarts: " + best.message;
  }
  return best;
}

} // namespace vcee
