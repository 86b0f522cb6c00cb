#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cbf.hpp"
#include "certify.hpp"
#include "core.hpp"
#include "dataio.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace lyocert {

/// Decoupled velocity-controlled plant: per joint,
///     M_i qdd_i = -K_i (qd_i - v_cmd_i) + d_i,
/// i.e. a rigid body under an exponentially stable inner velocity loop with
/// analytic tracking rate K_i / M_i, plus a bounded disturbance d.
struct PlantConfig {
    std::size_t n_joints = 2;
    Vec inertia{1.0, 1.0};
    Vec velocity_gain{3.0, 5.0};
    double disturbance_bound = 0.0;
    double dt = 0.008;
    std::uint64_t seed = 0;
};

inline void validate_plant(const PlantConfig& cfg) {
    if (cfg.n_joints < 1) throw std::invalid_argument("PlantConfig: n_joints must be >= 1");
    if (cfg.inertia.size() != cfg.n_joints || cfg.velocity_gain.size() != cfg.n_joints)
        throw std::invalid_argument(
            "PlantConfig: inertia and velocity_gain must list one entry per joint");
    if (!all_finite(cfg.inertia) || !all_finite(cfg.velocity_gain))
        throw std::invalid_argument("PlantConfig: inertia and velocity_gain must be finite");
    double max_rate = 0.0;
    for (std::size_t i = 0; i < cfg.n_joints; ++i) {
        if (!(cfg.inertia[i] > 0.0))
            throw std::invalid_argument("PlantConfig: inertia must be > 0 per joint");
        if (!(cfg.velocity_gain[i] > 0.0))
            throw std::invalid_argument("PlantConfig: velocity_gain must be > 0 per joint");
        max_rate = std::max(max_rate, cfg.velocity_gain[i] / cfg.inertia[i]);
    }
    if (!std::isfinite(cfg.disturbance_bound) || cfg.disturbance_bound < 0.0)
        throw std::invalid_argument("PlantConfig: disturbance_bound must be >= 0");
    if (!std::isfinite(cfg.dt) || !(cfg.dt > 0.0))
        throw std::invalid_argument("PlantConfig: dt must be > 0");
    if (!(cfg.dt * max_rate < 0.5))
        throw std::invalid_argument(
            "PlantConfig: dt too coarse for the velocity loop (require dt * max(K/M) < 0.5)");
}

struct PlantState {
    Vec q;
    Vec qd;
};

/// One control period: the disturbance is redrawn uniformly from
/// [-d_bar, d_bar] per joint and held, the command is held, and the joint
/// dynamics are integrated with classical RK4.
inline PlantState step(const PlantState& state, const Vec& v_cmd, const PlantConfig& cfg,
                       Rng& rng) {
    const std::size_t n = cfg.n_joints;
    if (state.q.size() != n || state.qd.size() != n || v_cmd.size() != n)
        throw std::invalid_argument("step: state/command dimension mismatch");

    Vec d(n, 0.0);
    if (cfg.disturbance_bound > 0.0)
        for (std::size_t i = 0; i < n; ++i)
            d[i] = rng.uniform(-cfg.disturbance_bound, cfg.disturbance_bound);

    auto accel = [&](const Vec& qd) {
        Vec a(n);
        for (std::size_t i = 0; i < n; ++i)
            a[i] = (-cfg.velocity_gain[i] * (qd[i] - v_cmd[i]) + d[i]) / cfg.inertia[i];
        return a;
    };
    auto shifted = [&](const Vec& base, const Vec& rate, double h) {
        Vec r(n);
        for (std::size_t i = 0; i < n; ++i) r[i] = base[i] + h * rate[i];
        return r;
    };

    const double h = cfg.dt;
    const Vec k1q = state.qd, k1v = accel(state.qd);
    const Vec qd2 = shifted(state.qd, k1v, h / 2.0);
    const Vec k2q = qd2, k2v = accel(qd2);
    const Vec qd3 = shifted(state.qd, k2v, h / 2.0);
    const Vec k3q = qd3, k3v = accel(qd3);
    const Vec qd4 = shifted(state.qd, k3v, h);
    const Vec k4q = qd4, k4v = accel(qd4);

    PlantState out;
    out.q.resize(n);
    out.qd.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.q[i] = state.q[i] + h / 6.0 * (k1q[i] + 2.0 * k2q[i] + 2.0 * k3q[i] + k4q[i]);
        out.qd[i] = state.qd[i] + h / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
    }
    return out;
}

/// Velocity-tracking-error rollouts for certification: each trajectory starts
/// from qd0 ~ Unif([0,1]^n), commands the constant reference, and records
/// x = qd_ref - qd with numerically differentiated xdot attached. Rollout r
/// uses the derived stream (cfg.seed, r), so results are independent of any
/// parallel execution order.
inline Dataset generate_training_data(const PlantConfig& cfg, std::size_t n_t, double duration,
                                      const Vec& reference_velocity = {}) {
    validate_plant(cfg);
    if (n_t < 1) throw std::invalid_argument("generate_training_data: n_T must be >= 1");
    if (!std::isfinite(duration) || !(duration > 0.0))
        throw std::invalid_argument("generate_training_data: duration must be > 0");
    const std::size_t steps =
        static_cast<std::size_t>(std::llround(duration / cfg.dt));
    if (steps < 2)
        throw std::invalid_argument(
            "generate_training_data: duration must cover at least two steps");
    Vec v_ref = reference_velocity.empty() ? Vec(cfg.n_joints, 0.0) : reference_velocity;
    if (v_ref.size() != cfg.n_joints)
        throw std::invalid_argument(
            "generate_training_data: reference velocity dimension mismatch");

    Dataset ds;
    ds.role = Role::train;
    ds.trajectories.resize(n_t);
    parallel_for(n_t, [&](std::size_t r) {
        Rng rng(derive_seed(cfg.seed, r));
        PlantState s;
        s.q = Vec(cfg.n_joints, 0.0);
        s.qd.resize(cfg.n_joints);
        for (std::size_t i = 0; i < cfg.n_joints; ++i) s.qd[i] = rng.uniform01();

        Trajectory traj;
        traj.dt = cfg.dt;
        traj.source_id = "rollout_" + std::to_string(r);
        for (std::size_t k = 0; k <= steps; ++k) {
            traj.t.push_back(static_cast<double>(k) * cfg.dt);
            traj.x.push_back(sub(v_ref, s.qd));
            if (k < steps) s = step(s, v_ref, cfg, rng);
        }
        ds.trajectories[r] = differentiate(traj);
    });
    return ds;
}

/// Closed-loop scenario description: waypoints are tracked with a
/// proportional position loop, each for an equal share of the duration.
struct ScenarioConfig {
    std::vector<Vec> waypoints;
    double k_p = 1.0;
    double duration = 5.0;
    Vec q0;   // empty -> zeros
    Vec qd0;  // empty -> zeros
    double d_margin = 0.0;
    bool use_filter = true;
};

struct ScenarioTrace {
    double dt = 0.0;
    std::vector<double> t;
    std::vector<Vec> q;
    std::vector<Vec> qd;
    std::vector<Vec> cmd;
    std::vector<Vec> h;  // per-sample, one entry per obstacle
};

struct ScenarioResult {
    ScenarioTrace trace;
    double min_h = std::numeric_limits<double>::infinity();
    bool violated = false;
    double filter_activity = 0.0;
    double max_speed = 0.0;
    bool initial_check_ok = true;
    bool singularity_event = false;
    std::optional<double> infeasible_at;
};

inline void validate_scenario(const ScenarioConfig& scn, const PlantConfig& cfg) {
    if (scn.waypoints.empty())
        throw std::invalid_argument("ScenarioConfig: at least one waypoint required");
    for (const Vec& wp : scn.waypoints)
        if (wp.size() != cfg.n_joints || !all_finite(wp))
            throw std::invalid_argument("ScenarioConfig: waypoint dimension mismatch");
    if (!std::isfinite(scn.k_p) || !(scn.k_p > 0.0))
        throw std::invalid_argument("ScenarioConfig: k_p must be > 0");
    if (!std::isfinite(scn.duration) || !(scn.duration > 0.0))
        throw std::invalid_argument("ScenarioConfig: duration must be > 0");
    if (!scn.q0.empty() && scn.q0.size() != cfg.n_joints)
        throw std::invalid_argument("ScenarioConfig: q0 dimension mismatch");
    if (!scn.qd0.empty() && scn.qd0.size() != cfg.n_joints)
        throw std::invalid_argument("ScenarioConfig: qd0 dimension mismatch");
    if (!std::isfinite(scn.d_margin))
        throw std::invalid_argument("ScenarioConfig: d_margin must be finite");
}

/// Run the closed loop: v_ref = k_p (waypoint - q), passed through the
/// min-norm safe-velocity filter, then one plant step; repeated for the whole
/// duration. A failed initial-set check is recorded, not fatal; a filter
/// infeasibility halts the run safely (zero command) at the recorded time.
inline ScenarioResult run_scenario(const PlantConfig& cfg, const SafetySpec& spec,
                                   const ScenarioConfig& scn, const Certificate& cert) {
    validate_plant(cfg);
    validate_safety_spec(spec);
    validate_scenario(scn, cfg);
    if (!spec.obstacles.empty() && spec.obstacles.front().center.size() != cfg.n_joints)
        throw std::invalid_argument("run_scenario: obstacle dimension does not match the plant");

    const std::size_t steps =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scn.duration / cfg.dt)));
    PlantState s;
    s.q = scn.q0.empty() ? Vec(cfg.n_joints, 0.0) : scn.q0;
    s.qd = scn.qd0.empty() ? Vec(cfg.n_joints, 0.0) : scn.qd0;

    ScenarioResult result;
    ScenarioTrace& trace = result.trace;
    trace.dt = cfg.dt;
    Rng rng(derive_seed(cfg.seed, 0));

    auto h_values = [&](const Vec& q) {
        Vec h(spec.obstacles.size());
        for (std::size_t i = 0; i < spec.obstacles.size(); ++i) h[i] = h_q(q, spec.obstacles[i]);
        return h;
    };
    auto record = [&](double t, const Vec& q, const Vec& qd, const Vec& cmd) {
        trace.t.push_back(t);
        trace.q.push_back(q);
        trace.qd.push_back(qd);
        trace.cmd.push_back(cmd);
        trace.h.push_back(h_values(q));
    };

    std::size_t modified_steps = 0;
    std::size_t executed_steps = 0;
    Vec last_cmd(cfg.n_joints, 0.0);
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * cfg.dt;
        const std::size_t wp_index =
            std::min(scn.waypoints.size() - 1, k * scn.waypoints.size() / steps);
        Vec v_ref(cfg.n_joints);
        for (std::size_t j = 0; j < cfg.n_joints; ++j)
            v_ref[j] = scn.k_p * (scn.waypoints[wp_index][j] - s.q[j]);

        Vec cmd = v_ref;
        if (scn.use_filter) {
            try {
                const FilterResult fr = safe_velocity(s.q, v_ref, spec);
                cmd = fr.v_safe;
                if (fr.modified) ++modified_steps;
                if (fr.gradient_singularity) result.singularity_event = true;
            } catch (const FilterInfeasible&) {
                result.infeasible_at = t;
                record(t, s.q, s.qd, Vec(cfg.n_joints, 0.0));
                break;
            }
        }
        if (k == 0) {
            // Initial-set membership with the commanded tracking error. An
            // ill-posed check (alpha >= certified lambda) counts as a failure
            // but never aborts the run.
            try {
                result.initial_check_ok = check_initial_set(
                    s.q, sub(cmd, s.qd), cert.candidate, spec, cert.lambda_best, scn.d_margin);
            } catch (const std::invalid_argument&) {
                result.initial_check_ok = false;
            }
        }
        record(t, s.q, s.qd, cmd);
        s = step(s, cmd, cfg, rng);
        last_cmd = cmd;
        ++executed_steps;
    }
    if (!result.infeasible_at)
        record(static_cast<double>(steps) * cfg.dt, s.q, s.qd, last_cmd);

    for (const Vec& h : trace.h)
        for (double v : h) result.min_h = std::min(result.min_h, v);
    for (const Vec& qd : trace.qd) result.max_speed = std::max(result.max_speed, norm(qd));
    result.violated = result.min_h < 0.0;
    result.filter_activity =
        (scn.use_filter && executed_steps > 0)
            ? static_cast<double>(modified_steps) / static_cast<double>(executed_steps)
            : 0.0;
    return result;
}

/// Waypoint-list convenience form of run_scenario.
inline ScenarioResult run_scenario(const PlantConfig& cfg, const SafetySpec& spec,
                                   const std::vector<Vec>& reference, double k_p,
                                   const Certificate& cert, double duration = 5.0) {
    ScenarioConfig scn;
    scn.waypoints = reference;
    scn.k_p = k_p;
    scn.duration = duration;
    return run_scenario(cfg, spec, scn, cert);
}

/// Conservatism sweep over (alpha, epsilon): rows follow `alphas`, columns
/// follow `epsilons`. Cells run independently with the same plant seed; a
/// cell that throws is marked failed and excluded from the verdicts.
struct SweepResult {
    std::vector<double> alphas;
    std::vector<double> epsilons;
    Mat min_h;                                // alphas.size() x epsilons.size()
    std::vector<std::vector<bool>> cell_ok;   // same shape
    std::vector<bool> row_monotone;  // fixed alpha: min_h non-decreasing as epsilon grows
    std::vector<bool> col_monotone;  // fixed epsilon: min_h non-increasing as alpha grows
    bool all_monotone = true;
    double tie_tolerance = 1e-4;
};

inline SweepResult sweep_table(const PlantConfig& cfg, const SafetySpec& spec_template,
                               const std::vector<double>& alphas,
                               const std::vector<double>& epsilons, const ScenarioConfig& scn,
                               const Certificate& cert, double tie_tolerance = 1e-4) {
    if (alphas.empty() || epsilons.empty())
        throw std::invalid_argument("sweep_table: alpha and epsilon grids must be non-empty");
    for (double a : alphas)
        if (!std::isfinite(a) || !(a > 0.0))
            throw std::invalid_argument("sweep_table: alphas must be > 0");
    for (double e : epsilons)
        if (!std::isfinite(e) || e < 0.0)
            throw std::invalid_argument("sweep_table: epsilons must be >= 0");

    SweepResult out;
    out.alphas = alphas;
    out.epsilons = epsilons;
    out.tie_tolerance = tie_tolerance;
    const std::size_t rows = alphas.size(), cols = epsilons.size();
    out.min_h = Mat(rows, cols, std::numeric_limits<double>::quiet_NaN());
    out.cell_ok.assign(rows, std::vector<bool>(cols, false));

    parallel_for(rows * cols, [&](std::size_t cell) {
        const std::size_t i = cell / cols, j = cell % cols;
        SafetySpec spec = spec_template;
        spec.alpha = alphas[i];
        spec.epsilon = epsilons[j];
        try {
            const ScenarioResult r = run_scenario(cfg, spec, scn, cert);
            out.min_h(i, j) = r.min_h;
            out.cell_ok[i][j] = true;
        } catch (const std::exception&) {
            // marked failed via NaN + cell_ok = false
        }
    });

    out.row_monotone.assign(rows, true);
    out.col_monotone.assign(cols, true);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j + 1 < cols; ++j) {
            if (!out.cell_ok[i][j] || !out.cell_ok[i][j + 1]) continue;
            if (out.min_h(i, j + 1) < out.min_h(i, j) - tie_tolerance) out.row_monotone[i] = false;
        }
    for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t i = 0; i + 1 < rows; ++i) {
            if (!out.cell_ok[i][j] || !out.cell_ok[i + 1][j]) continue;
            if (out.min_h(i + 1, j) > out.min_h(i, j) + tie_tolerance) out.col_monotone[j] = false;
        }
    for (bool b : out.row_monotone) out.all_monotone = out.all_monotone && b;
    for (bool b : out.col_monotone) out.all_monotone = out.all_monotone && b;
    return out;
}

/// Trace CSV: `t,q0..,qd0..,cmd0..,h0..` with 17-significant-digit cells.
inline void save_scenario_csv(const ScenarioTrace& trace, const std::filesystem::path& path) {
    const std::size_t n = trace.q.empty() ? 0 : trace.q.front().size();
    const std::size_t k = trace.h.empty() ? 0 : trace.h.front().size();
    std::string out = "t";
    for (std::size_t j = 0; j < n; ++j) out += ",q" + std::to_string(j);
    for (std::size_t j = 0; j < n; ++j) out += ",qd" + std::to_string(j);
    for (std::size_t j = 0; j < n; ++j) out += ",cmd" + std::to_string(j);
    for (std::size_t j = 0; j < k; ++j) out += ",h" + std::to_string(j);
    out += "\n";
    for (std::size_t r = 0; r < trace.t.size(); ++r) {
        out += format_double(trace.t[r]);
        for (std::size_t j = 0; j < n; ++j) out += "," + format_double(trace.q[r][j]);
        for (std::size_t j = 0; j < n; ++j) out += "," + format_double(trace.qd[r][j]);
        for (std::size_t j = 0; j < n; ++j) out += "," + format_double(trace.cmd[r][j]);
        for (std::size_t j = 0; j < k; ++j) out += "," + format_double(trace.h[r][j]);
        out += "\n";
    }
    write_file_atomic(path, out);
}

inline nlohmann::json scenario_summary_json(const ScenarioResult& result) {
    nlohmann::json j{{"min_h", result.min_h},
                     {"violated", result.violated},
                     {"filter_activity", result.filter_activity},
                     {"max_speed", result.max_speed},
                     {"initial_check_ok", result.initial_check_ok},
                     {"singularity_event", result.singularity_event},
                     {"samples", result.trace.t.size()}};
    if (result.infeasible_at)
        j["infeasible_at"] = *result.infeasible_at;
    else
        j["infeasible_at"] = nullptr;
    return j;
}

inline nlohmann::json plant_to_json(const PlantConfig& cfg) {
    return {{"n_joints", cfg.n_joints},
            {"inertia", cfg.inertia},
            {"velocity_gain", cfg.velocity_gain},
            {"disturbance_bound", cfg.disturbance_bound},
            {"dt", cfg.dt},
            {"seed", cfg.seed}};
}

inline PlantConfig plant_from_json(const nlohmann::json& j) {
    PlantConfig cfg;
    cfg.n_joints = j.value("n_joints", cfg.n_joints);
    cfg.inertia = j.value("inertia", cfg.inertia);
    cfg.velocity_gain = j.value("velocity_gain", cfg.velocity_gain);
    cfg.disturbance_bound = j.value("disturbance_bound", cfg.disturbance_bound);
    cfg.dt = j.value("dt", cfg.dt);
    cfg.seed = j.value("seed", cfg.seed);
    validate_plant(cfg);
    return cfg;
}

inline nlohmann::json scenario_to_json(const ScenarioConfig& scn) {
    nlohmann::json waypoints = nlohmann::json::array();
    for (const Vec& wp : scn.waypoints) waypoints.push_back(wp);
    nlohmann::json j{{"waypoints", waypoints},
                     {"k_p", scn.k_p},
                     {"duration", scn.duration},
                     {"d_margin", scn.d_margin},
                     {"use_filter", scn.use_filter}};
    if (!scn.q0.empty()) j["q0"] = scn.q0;
    if (!scn.qd0.empty()) j["qd0"] = scn.qd0;
    return j;
}

inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
    ScenarioConfig scn;
    if (j.contains("waypoints"))
        for (const auto& wp : j.at("waypoints"))
            scn.waypoints.push_back(wp.get<std::vector<double>>());
    scn.k_p = j.value("k_p", scn.k_p);
    scn.duration = j.value("duration", scn.duration);
    scn.q0 = j.value("q0", scn.q0);
    scn.qd0 = j.value("qd0", scn.qd0);
    scn.d_margin = j.value("d_margin", scn.d_margin);
    scn.use_filter = j.value("use_filter", scn.use_filter);
    return scn;
}

}  // namespace lyocert
