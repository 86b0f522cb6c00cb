#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lyocert/core.hpp"
#include "lyocert/dataio.hpp"
#include "lyocert/nn.hpp"

namespace lyocert {

struct BisectionConfig {
    double lambda_min = 0.0;
    double lambda_max = 20.0;
    double resolution = 0.25;
    TrainConfig train_cfg;
    bool warm_start = false;  ///< reuse the last converged weights at the next midpoint

    void validate() const {
        if (lambda_min < 0.0 || lambda_max < 0.0)
            throw std::invalid_argument("BisectionConfig: bracket must be >= 0");
        if (!(lambda_min < lambda_max))
            throw std::invalid_argument("BisectionConfig: lambda_min must be < lambda_max");
        if (!(resolution > 0.0))
            throw std::invalid_argument("BisectionConfig: resolution must be > 0");
    }
};

struct Certificate {
    double lambda_best = 0.0;
    double epsilon = 0.0;
    LyapunovCandidate candidate;
    double gamma = 0.0;
    std::size_t n_train = 0;
    std::vector<std::pair<double, bool>> history;  ///< (lambda tried, converged)
    bool never_converged = false;
    std::vector<double> training_loss_history;  ///< loss curve of the accepted run
};

namespace detail {

template <typename T>
struct BisectionTrace {
    double lambda_best;
    std::optional<T> best;
    std::vector<std::pair<double, bool>> history;
};

/// Bracket shrinking on a feasibility callable. The callable receives a
/// midpoint and returns the trained artifact on success, nullopt on failure.
/// Failures shrink the upper bound; successes raise the lower bound and
/// record the midpoint as the best feasible rate so far. The loop body runs
/// at least once and stops as soon as the bracket is narrower than the
/// resolution.
template <typename F>
auto bisect_core(double lo, double hi, double resolution, F&& feasible)
    -> BisectionTrace<std::decay_t<decltype(*feasible(lo))>> {
    BisectionTrace<std::decay_t<decltype(*feasible(lo))>> trace;
    trace.lambda_best = lo;
    do {
        const double mid = 0.5 * (lo + hi);
        auto result = feasible(mid);
        trace.history.emplace_back(mid, result.has_value());
        if (result.has_value()) {
            trace.best = std::move(result);
            trace.lambda_best = mid;
            lo = mid;
        } else {
            hi = mid;
        }
    } while (hi - lo >= resolution);
    return trace;
}

}  // namespace detail

/// Smallest non-negative eps such that Vdot + lambda*V - eps <= 0 at every
/// sample. Reduction runs left to right over trajectories and samples.
inline double compute_epsilon(const LyapunovCandidate& cand, const Dataset& ds, double lambda) {
    detail::require_derivatives(ds, "compute_epsilon");
    double eps = 0.0;
    for (const Trajectory& tr : ds.trajectories)
        for (std::size_t k = 0; k < tr.size(); ++k)
            eps = std::max(eps, residual(cand, tr.x[k], tr.xdot[k], lambda, 0.0));
    return eps;
}

/// Binary search for the largest decay rate the trainer can certify on the
/// dataset, then the violation slack at that rate. If no midpoint converges
/// the certificate keeps lambda_best == lambda_min, carries the last
/// attempt's factor, and is flagged never_converged.
inline Certificate bisect_lambda(const Dataset& ds, const BisectionConfig& cfg) {
    cfg.validate();
    detail::require_derivatives(ds, "bisect_lambda");

    std::optional<LyapunovCandidate> last_attempt;
    std::optional<NetworkParams> warm;

    // Each midpoint retrains from scratch unless warm starts are enabled, in
    // which case the previous converged weights seed the first restart.
    auto feasibility = [&](double lambda) -> std::optional<TrainResult> {
        TrainConfig tc = cfg.train_cfg;
        tc.lambda = lambda;
        const NetworkParams* init = cfg.warm_start && warm ? &*warm : nullptr;
        TrainResult result = train(ds, tc, init);
        last_attempt = result.candidate;
        if (!result.converged) return std::nullopt;
        if (cfg.warm_start) warm = result.params;
        return result;
    };

    auto trace = detail::bisect_core(cfg.lambda_min, cfg.lambda_max, cfg.resolution, feasibility);

    Certificate cert;
    cert.lambda_best = trace.lambda_best;
    cert.gamma = cfg.train_cfg.gamma;
    cert.n_train = ds.size();
    cert.history = std::move(trace.history);
    if (trace.best) {
        cert.candidate = trace.best->candidate;
        cert.training_loss_history = trace.best->loss_history;
    } else {
        cert.never_converged = true;
        cert.candidate = *last_attempt;
    }
    cert.epsilon = compute_epsilon(cert.candidate, ds, cert.lambda_best);
    return cert;
}

/// Counts test samples violating Vdot + lambda_best*V - epsilon <= 0.
/// Returns (violations, total sample count).
inline std::pair<std::size_t, std::size_t> validate_certificate(const Certificate& cert,
                                                                const Dataset& test) {
    detail::require_derivatives(test, "validate_certificate");
    if (test.dim() != cert.candidate.dim())
        throw std::invalid_argument("validate_certificate: state dimension mismatch");
    std::size_t violations = 0, total = 0;
    for (const Trajectory& tr : test.trajectories) {
        for (std::size_t k = 0; k < tr.size(); ++k) {
            ++total;
            if (residual(cert.candidate, tr.x[k], tr.xdot[k], cert.lambda_best, 0.0) -
                    cert.epsilon > 0.0)
                ++violations;
        }
    }
    return {violations, total};
}

/// Coarser per-trajectory count: a trajectory violates if any of its samples
/// does. Returns (violating trajectories, trajectory count). Reported beside
/// the per-sample count, which is the one used downstream.
inline std::pair<std::size_t, std::size_t> validate_certificate_per_trajectory(
    const Certificate& cert, const Dataset& test) {
    detail::require_derivatives(test, "validate_certificate_per_trajectory");
    if (test.dim() != cert.candidate.dim())
        throw std::invalid_argument("validate_certificate_per_trajectory: state dimension mismatch");
    std::size_t violations = 0;
    for (const Trajectory& tr : test.trajectories) {
        for (std::size_t k = 0; k < tr.size(); ++k) {
            if (residual(cert.candidate, tr.x[k], tr.xdot[k], cert.lambda_best, 0.0) -
                    cert.epsilon > 0.0) {
                ++violations;
                break;
            }
        }
    }
    return {violations, test.size()};
}

inline nlohmann::json certificate_to_json(const Certificate& cert, std::uint64_t seed) {
    nlohmann::json j;
    const std::size_t n = cert.candidate.dim();
    j["n"] = n;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t c = 0; c < n; ++c) row.push_back(c <= i ? cert.candidate.L.at(i, c) : 0.0);
        rows.push_back(row);
    }
    j["L"] = rows;
    j["lambda"] = cert.lambda_best;
    j["gamma"] = cert.gamma;
    j["epsilon"] = cert.epsilon;
    j["seed"] = seed;
    j["n_train"] = cert.n_train;
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& [lambda, ok] : cert.history) hist.push_back({lambda, ok});
    j["history"] = hist;
    j["never_converged"] = cert.never_converged;
    return j;
}

inline Certificate certificate_from_json(const nlohmann::json& j) {
    Certificate cert;
    const std::size_t n = j.at("n").get<std::size_t>();
    std::vector<double> entries;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c <= i; ++c)
            entries.push_back(j.at("L").at(i).at(c).get<double>());
    cert.candidate = LyapunovCandidate(CholeskyFactor(n, std::move(entries)));
    cert.lambda_best = j.at("lambda").get<double>();
    cert.gamma = j.at("gamma").get<double>();
    if (j.contains("epsilon") && !j.at("epsilon").is_null())
        cert.epsilon = j.at("epsilon").get<double>();
    if (j.contains("n_train")) cert.n_train = j.at("n_train").get<std::size_t>();
    if (j.contains("history"))
        for (const auto& h : j.at("history"))
            cert.history.emplace_back(h.at(0).get<double>(), h.at(1).get<bool>());
    if (j.contains("never_converged")) cert.never_converged = j.at("never_converged").get<bool>();
    return cert;
}

inline Certificate load_certificate(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open certificate: " + path.string());
    return certificate_from_json(nlohmann::json::parse(in));
}

}  // namespace lyocert
