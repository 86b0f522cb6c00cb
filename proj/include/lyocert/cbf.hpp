#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core.hpp"

namespace lyocert {

/// Spherical obstacle in joint space. The safety function is the distance to
/// its surface: h_q(q) = ||q - center|| - radius.
struct Obstacle {
    Vec center;
    double radius = 0.0;
};

inline void validate_obstacle(const Obstacle& obs) {
    if (obs.center.empty())
        throw std::invalid_argument("Obstacle: center must be non-empty");
    if (!all_finite(obs.center) || !std::isfinite(obs.radius))
        throw std::invalid_argument("Obstacle: center and radius must be finite");
    if (!(obs.radius > 0.0)) throw std::invalid_argument("Obstacle: radius must be > 0");
}

/// Parameters of the safe-velocity constraint
///     grad_h_i(q) . v >= -alpha * (h_i(q) - epsilon_c)   for every obstacle i,
/// with the shrinkage epsilon_c = epsilon / alpha always derived on demand and
/// never stored, so epsilon_c() == epsilon / alpha holds bitwise.
struct SafetySpec {
    std::vector<Obstacle> obstacles;
    double alpha = 1.0;
    double epsilon = 0.0;

    double epsilon_c() const { return epsilon / alpha; }
};

inline void validate_safety_spec(const SafetySpec& spec) {
    if (!std::isfinite(spec.alpha) || !(spec.alpha > 0.0))
        throw std::invalid_argument("SafetySpec: alpha must be > 0");
    if (!std::isfinite(spec.epsilon) || !(spec.epsilon >= 0.0))
        throw std::invalid_argument("SafetySpec: epsilon must be >= 0");
    for (const Obstacle& obs : spec.obstacles) {
        validate_obstacle(obs);
        if (obs.center.size() != spec.obstacles.front().center.size())
            throw std::invalid_argument(
                "SafetySpec: all obstacles must share one joint-space dimension");
    }
}

/// Outcome of the min-norm filter at one state.
struct FilterResult {
    Vec v_safe;
    std::vector<std::size_t> active_constraints;  // obstacle indices with positive multiplier
    bool modified = false;                        // v_safe differs from v_ref
    bool gradient_singularity = false;            // state was at an obstacle center
};

/// The constraint set admits no velocity at all: a nonnegative combination of
/// the listed rows has zero net gradient yet demands a strictly positive
/// right-hand side. `active_set` holds the obstacle indices of that witness.
class FilterInfeasible : public std::runtime_error {
  public:
    std::vector<std::size_t> active_set;

    explicit FilterInfeasible(std::vector<std::size_t> indices)
        : std::runtime_error(describe(indices)), active_set(std::move(indices)) {}

  private:
    static std::string describe(const std::vector<std::size_t>& indices) {
        std::string msg = "safe_velocity: constraint set infeasible (certified by constraints";
        for (std::size_t i : indices) msg += " " + std::to_string(i);
        msg += ")";
        return msg;
    }
};

/// Signed distance to the obstacle surface; negative inside.
inline double h_q(const Vec& q, const Obstacle& obs) {
    if (q.size() != obs.center.size())
        throw std::invalid_argument("h_q: dimension mismatch between q and obstacle center");
    return norm(sub(q, obs.center)) - obs.radius;
}

/// Unit outward gradient (q - center)/||q - center||; undefined at the center.
inline Vec grad_h_q(const Vec& q, const Obstacle& obs) {
    if (q.size() != obs.center.size())
        throw std::invalid_argument("grad_h_q: dimension mismatch between q and obstacle center");
    Vec diff = sub(q, obs.center);
    const double dist = norm(diff);
    if (dist == 0.0)
        throw std::domain_error("grad_h_q: gradient undefined at the obstacle center");
    for (double& v : diff) v /= dist;
    return diff;
}

namespace detail {

/// Result of solving the symmetric system M x = rhs with full pivoting.
/// When the system is inconsistent, `null_dir` holds d with M d = 0 and
/// dot(rhs, d) > 0 — the witness that no solution exists.
struct SymmetricSolve {
    bool consistent = true;
    Vec x;
    Vec null_dir;
};

inline SymmetricSolve solve_symmetric(const Mat& m0, const Vec& rhs0) {
    const std::size_t n = rhs0.size();
    SymmetricSolve out;
    if (n == 0) return out;

    Mat m = m0;
    Vec rhs = rhs0;
    double scale = 0.0;
    for (double v : m.data) scale = std::max(scale, std::abs(v));
    const double tol = std::max(scale, 1.0) * 1e-13;

    // Gauss elimination with full pivoting: row swaps mirror onto rhs,
    // column swaps are recorded in col_of (position -> original column).
    std::vector<std::size_t> col_of(n);
    std::iota(col_of.begin(), col_of.end(), 0);
    std::size_t rank = n;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t pr = k, pc = k;
        double best = 0.0;
        for (std::size_t i = k; i < n; ++i) {
            for (std::size_t j = k; j < n; ++j) {
                const double a = std::abs(m(i, j));
                if (a > best) {
                    best = a;
                    pr = i;
                    pc = j;
                }
            }
        }
        if (best <= tol) {
            rank = k;
            break;
        }
        if (pr != k) {
            for (std::size_t j = 0; j < n; ++j) std::swap(m(k, j), m(pr, j));
            std::swap(rhs[k], rhs[pr]);
        }
        if (pc != k) {
            for (std::size_t i = 0; i < n; ++i) std::swap(m(i, k), m(i, pc));
            std::swap(col_of[k], col_of[pc]);
        }
        for (std::size_t i = k + 1; i < n; ++i) {
            const double f = m(i, k) / m(k, k);
            if (f == 0.0) continue;
            for (std::size_t j = k; j < n; ++j) m(i, j) -= f * m(k, j);
            rhs[i] -= f * rhs[k];
        }
    }

    // Pivot variables from the leading rank x rank triangle; positions >= rank
    // (free variables) must already be set in y.
    auto back_substitute = [&](const Vec& target, Vec& y) {
        for (std::size_t ii = rank; ii-- > 0;) {
            double s = target[ii];
            for (std::size_t j = ii + 1; j < n; ++j) s -= m(ii, j) * y[j];
            y[ii] = s / m(ii, ii);
        }
    };
    auto unpermute = [&](const Vec& y) {
        Vec d(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) d[col_of[j]] = y[j];
        return d;
    };

    double residual_scale = std::max(scale, 1.0);
    for (double v : rhs0) residual_scale = std::max(residual_scale, std::abs(v));
    bool consistent = true;
    for (std::size_t i = rank; i < n; ++i)
        if (std::abs(rhs[i]) > residual_scale * 1e-12) consistent = false;

    if (consistent) {
        Vec y(n, 0.0);
        back_substitute(rhs, y);
        out.x = unpermute(y);
        return out;
    }

    // Inconsistent: rhs0 has a component in null(M), because range and null
    // space are orthogonal complements for symmetric M. Scan the null basis
    // spanned by the free columns for the vector with the largest overlap
    // against rhs0 and orient it so the overlap is positive.
    out.consistent = false;
    double best_overlap = 0.0;
    for (std::size_t f = rank; f < n; ++f) {
        Vec y(n, 0.0);
        y[f] = 1.0;
        // Row ii of the triangle reads m(ii,ii)*y[ii] + sum_{j>ii} m(ii,j)*y[j] = 0,
        // and the sum already picks up the unit free coordinate y[f].
        back_substitute(Vec(n, 0.0), y);
        const Vec d = unpermute(y);
        const double overlap = dot(rhs0, d);
        if (std::abs(overlap) > std::abs(best_overlap)) {
            best_overlap = overlap;
            out.null_dir = d;
        }
    }
    if (out.null_dir.empty())
        throw std::runtime_error("solve_symmetric: internal error, no null direction found");
    if (best_overlap < 0.0)
        for (double& v : out.null_dir) v = -v;
    return out;
}

/// Minimize ||v - v_ref||^2 subject to A v >= b by an active-set method on
/// the dual:  min_{mu >= 0}  (1/2) mu^T (A A^T) mu + (A v_ref - b)^T mu,
/// with the primal recovered as v = v_ref + A^T mu. The dual gradient equals
/// the primal slack A v - b, so the most violated constraint is the steepest
/// dual descent coordinate. Entry ties break toward the lowest index, and the
/// iteration stops once every slack is >= -kkt_tol.
///
/// Throws FilterInfeasible when the dual ray test certifies that no v exists:
/// a direction d >= 0 with A^T d = 0 and b^T d > 0.
inline Vec min_norm_qp(const Mat& a, const Vec& b, const Vec& v_ref,
                       std::vector<std::size_t>& active_out, double kkt_tol = 1e-10) {
    const std::size_t m = a.rows;
    const std::size_t n = a.cols;
    active_out.clear();
    if (m == 0) return v_ref;

    Mat q(m, m);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i; j < m; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += a(i, k) * a(j, k);
            q(i, j) = s;
            q(j, i) = s;
        }
    }
    Vec c(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += a(i, k) * v_ref[k];
        c[i] = s - b[i];
    }

    Vec mu(m, 0.0);
    std::vector<std::size_t> work;  // ascending indices with mu free

    auto primal = [&]() {
        Vec v = v_ref;
        for (std::size_t idx : work)
            for (std::size_t k = 0; k < n; ++k) v[k] += a(idx, k) * mu[idx];
        return v;
    };
    auto subproblem = [&]() {
        const std::size_t w = work.size();
        Mat qw(w, w);
        Vec rw(w);
        for (std::size_t r = 0; r < w; ++r) {
            rw[r] = -c[work[r]];
            for (std::size_t s = 0; s < w; ++s) qw(r, s) = q(work[r], work[s]);
        }
        return solve_symmetric(qw, rw);
    };

    const std::size_t iter_cap = 100 * (m + 2) * (m + 2);
    std::size_t spent = 0;
    while (true) {
        if (++spent > iter_cap)
            throw std::runtime_error("min_norm_qp: active-set iteration limit exceeded");

        const Vec v = primal();
        std::size_t enter = m;
        double worst = -kkt_tol;
        for (std::size_t i = 0; i < m; ++i) {
            if (std::binary_search(work.begin(), work.end(), i)) continue;
            double slack = -b[i];
            for (std::size_t k = 0; k < n; ++k) slack += a(i, k) * v[k];
            if (slack < worst) {
                worst = slack;
                enter = i;
            }
        }
        if (enter == m) break;
        work.insert(std::upper_bound(work.begin(), work.end(), enter), enter);

        // Inner loop: pull the working-set multipliers to the unconstrained
        // optimum of the restricted dual, shedding variables pinned at zero.
        while (true) {
            if (++spent > iter_cap)
                throw std::runtime_error("min_norm_qp: active-set iteration limit exceeded");

            const SymmetricSolve sol = subproblem();
            if (!sol.consistent) {
                // Unbounded descent ray of the restricted dual. Blocked by a
                // multiplier heading negative -> drop it; unblocked -> the
                // primal constraints indexed by d > 0 are jointly infeasible.
                const Vec& d = sol.null_dir;
                double step = std::numeric_limits<double>::infinity();
                std::size_t drop = work.size();
                for (std::size_t k = 0; k < work.size(); ++k) {
                    if (d[k] < 0.0) {
                        const double t = mu[work[k]] / -d[k];
                        if (t < step) {
                            step = t;
                            drop = k;
                        }
                    }
                }
                if (drop == work.size()) {
                    std::vector<std::size_t> certificate;
                    for (std::size_t k = 0; k < work.size(); ++k)
                        if (d[k] > 0.0) certificate.push_back(work[k]);
                    throw FilterInfeasible(std::move(certificate));
                }
                for (std::size_t k = 0; k < work.size(); ++k) mu[work[k]] += step * d[k];
                mu[work[drop]] = 0.0;
                work.erase(work.begin() + static_cast<std::ptrdiff_t>(drop));
                continue;
            }

            bool all_positive = true;
            for (std::size_t k = 0; k < work.size(); ++k)
                if (!(sol.x[k] > 0.0)) all_positive = false;
            if (all_positive) {
                for (std::size_t k = 0; k < work.size(); ++k) mu[work[k]] = sol.x[k];
                break;
            }

            // Partial step toward the subproblem optimum; the first variable
            // to reach zero leaves the working set (lowest index on ties).
            double step = 1.0;
            std::size_t drop = work.size();
            for (std::size_t k = 0; k < work.size(); ++k) {
                if (sol.x[k] > 0.0) continue;
                const double cur = mu[work[k]];
                const double denom = cur - sol.x[k];
                const double ratio = denom > 0.0 ? cur / denom : 0.0;
                if (ratio < step) {
                    step = ratio;
                    drop = k;
                }
            }
            for (std::size_t k = 0; k < work.size(); ++k) {
                const std::size_t idx = work[k];
                mu[idx] += step * (sol.x[k] - mu[idx]);
            }
            if (drop == work.size()) break;  // defensive: full step taken
            mu[work[drop]] = 0.0;
            work.erase(work.begin() + static_cast<std::ptrdiff_t>(drop));
        }
    }

    for (std::size_t idx : work)
        if (mu[idx] > 0.0) active_out.push_back(idx);
    if (active_out.empty()) return v_ref;  // bitwise fixed point when inactive
    return primal();
}

}  // namespace detail

/// Min-norm safe-velocity filter: project v_ref onto the set
///     { v : grad_h_i(q) . v >= -alpha (h_i(q) - epsilon_c) for all i }.
/// At an obstacle center the gradient offers no direction, so the filter
/// commands zero velocity and flags the event instead of guessing.
inline FilterResult safe_velocity(const Vec& q, const Vec& v_ref, const SafetySpec& spec) {
    validate_safety_spec(spec);
    if (!spec.obstacles.empty() && q.size() != spec.obstacles.front().center.size())
        throw std::invalid_argument("safe_velocity: q dimension does not match the obstacles");
    if (v_ref.size() != q.size())
        throw std::invalid_argument("safe_velocity: v_ref dimension does not match q");
    if (!all_finite(q) || !all_finite(v_ref))
        throw std::invalid_argument("safe_velocity: q and v_ref must be finite");

    FilterResult result;
    for (std::size_t i = 0; i < spec.obstacles.size(); ++i) {
        if (norm(sub(q, spec.obstacles[i].center)) == 0.0) {
            result.v_safe = Vec(q.size(), 0.0);
            result.active_constraints = {i};
            result.gradient_singularity = true;
            result.modified = result.v_safe != v_ref;
            return result;
        }
    }

    const std::size_t k = spec.obstacles.size();
    Mat a(k, q.size());
    Vec b(k);
    const double eps_c = spec.epsilon_c();
    for (std::size_t i = 0; i < k; ++i) {
        const Vec g = grad_h_q(q, spec.obstacles[i]);
        for (std::size_t j = 0; j < q.size(); ++j) a(i, j) = g[j];
        b[i] = -spec.alpha * (h_q(q, spec.obstacles[i]) - eps_c);
    }

    result.v_safe = detail::min_norm_qp(a, b, v_ref, result.active_constraints);
    result.modified = result.v_safe != v_ref;
    return result;
}

/// Class-K gain of the barrier built from the certificate:
///     alpha_e = k1 (lambda - alpha) / C_h,
/// valid only when the certified decay rate strictly exceeds the barrier
/// rate. C_h bounds the gradient norm of the safety function and is 1 for
/// the distance-to-sphere family.
inline double alpha_e(double k1, double lambda, double alpha, double c_h = 1.0) {
    if (!std::isfinite(k1) || !(k1 > 0.0))
        throw std::invalid_argument("alpha_e: k1 must be > 0");
    if (!std::isfinite(c_h) || !(c_h > 0.0))
        throw std::invalid_argument("alpha_e: C_h must be > 0");
    if (!std::isfinite(alpha) || !(alpha > 0.0))
        throw std::invalid_argument("alpha_e: alpha must be > 0");
    if (!std::isfinite(lambda) || !(lambda > alpha))
        throw std::invalid_argument("alpha_e: requires lambda > alpha");
    return k1 * (lambda - alpha) / c_h;
}

/// Membership test for the certified initial set: with k1 the smallest
/// eigenvalue of P, the composite barrier
///     h_V = -V(e0) + alpha_e * min_i h_i(q0) + d_margin
/// must be non-negative (boundary included). d_margin leaves room for an
/// explicit disturbance allowance; 0 applies the nominal condition.
inline bool check_initial_set(const Vec& q0, const Vec& e0, const LyapunovCandidate& cand,
                              const SafetySpec& spec, double lambda, double d_margin = 0.0) {
    validate_safety_spec(spec);
    if (spec.obstacles.empty()) return true;
    const double k1 = spectral_bounds(cand).first;
    const double ae = alpha_e(k1, lambda, spec.alpha, 1.0);
    double min_h = std::numeric_limits<double>::infinity();
    for (const Obstacle& obs : spec.obstacles) min_h = std::min(min_h, h_q(q0, obs));
    return -eval_V(cand, e0) + ae * min_h + d_margin >= 0.0;
}

inline nlohmann::json spec_to_json(const SafetySpec& spec) {
    nlohmann::json obstacles = nlohmann::json::array();
    for (const Obstacle& o : spec.obstacles)
        obstacles.push_back({{"center", o.center}, {"radius", o.radius}});
    return {{"obstacles", obstacles}, {"alpha", spec.alpha}, {"epsilon", spec.epsilon}};
}

inline SafetySpec spec_from_json(const nlohmann::json& j) {
    SafetySpec spec;
    spec.alpha = j.at("alpha").get<double>();
    spec.epsilon = j.at("epsilon").get<double>();
    for (const auto& jo : j.at("obstacles")) {
        Obstacle o;
        o.center = jo.at("center").get<std::vector<double>>();
        o.radius = jo.at("radius").get<double>();
        spec.obstacles.push_back(std::move(o));
    }
    validate_safety_spec(spec);
    return spec;
}

}  // namespace lyocert
