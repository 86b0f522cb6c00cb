#pragma once

// Shared oracles and builders for the test suite. Everything here is computed
// by a route independent of the library code under test: closed-form linear
// algebra, brute-force search, or textbook integration written from scratch.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lyocert/core.hpp"
#include "lyocert/dataio.hpp"

namespace support {

using Mat2 = std::array<std::array<double, 2>, 2>;

/// The worked linear system xdot = A x with A = [[0, 1], [-1, -2]]: a double
/// eigenvalue at -1, so a quadratic certificate exists exactly for decay
/// rates below 2.
inline Mat2 example_system() { return {{{0.0, 1.0}, {-1.0, -2.0}}}; }

/// Necessary-and-sufficient Hurwitz test for a 2x2 matrix: both eigenvalues
/// have negative real part iff trace < 0 and det > 0.
inline bool hurwitz2(const Mat2& a) {
    const double tr = a[0][0] + a[1][1];
    const double det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    return tr < 0.0 && det > 0.0;
}

/// Feasibility oracle for certifying rate lambda on the linear system:
/// V = x'Px with Vdot <= -lambda V exists iff A + (lambda/2) I is Hurwitz.
inline bool rate_feasible(const Mat2& a, double lambda) {
    Mat2 shifted = a;
    shifted[0][0] += lambda / 2.0;
    shifted[1][1] += lambda / 2.0;
    return hurwitz2(shifted);
}

/// Classical RK4 rollout of xdot = A x, independent of the library's
/// integrator. Derivatives are attached exactly as A x at each sample.
inline lyocert::Trajectory rollout_linear(const Mat2& a, const lyocert::Vec& x0, double dt,
                                          std::size_t steps, const std::string& source_id) {
    auto deriv = [&](const lyocert::Vec& x) {
        return lyocert::Vec{a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]};
    };
    lyocert::Trajectory traj;
    traj.dt = dt;
    traj.source_id = source_id;
    lyocert::Vec x = x0;
    for (std::size_t k = 0; k <= steps; ++k) {
        traj.t.push_back(static_cast<double>(k) * dt);
        traj.x.push_back(x);
        traj.xdot.push_back(deriv(x));
        const lyocert::Vec k1 = deriv(x);
        const lyocert::Vec x2{x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1]};
        const lyocert::Vec k2 = deriv(x2);
        const lyocert::Vec x3{x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1]};
        const lyocert::Vec k3 = deriv(x3);
        const lyocert::Vec x4{x[0] + dt * k3[0], x[1] + dt * k3[1]};
        const lyocert::Vec k4 = deriv(x4);
        x = {x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
             x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])};
    }
    return traj;
}

/// Dataset of RK4 rollouts of the worked linear system from deterministic
/// random initial conditions in [-1, 1]^2 \ {tiny}, exact derivatives.
inline lyocert::Dataset linear_dataset(std::size_t n_trajectories, double dt, double duration,
                                       std::uint32_t seed) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<double> box(-1.0, 1.0);
    lyocert::Dataset ds;
    ds.role = lyocert::Role::train;
    const std::size_t steps = static_cast<std::size_t>(std::llround(duration / dt));
    for (std::size_t i = 0; i < n_trajectories; ++i) {
        lyocert::Vec x0{box(gen), box(gen)};
        if (std::abs(x0[0]) + std::abs(x0[1]) < 0.2) x0 = {0.7, -0.4};  // keep away from origin
        ds.trajectories.push_back(rollout_linear(example_system(), x0, dt, steps,
                                                 "linear_" + std::to_string(i)));
    }
    return ds;
}

/// Dataset made of explicit (x, xdot) pairs packed into one trajectory.
inline lyocert::Dataset point_dataset(
    const std::vector<std::pair<lyocert::Vec, lyocert::Vec>>& samples) {
    lyocert::Trajectory tr;
    tr.dt = 0.1;
    tr.source_id = "points";
    for (std::size_t k = 0; k < samples.size(); ++k) {
        tr.t.push_back(0.1 * static_cast<double>(k));
        tr.x.push_back(samples[k].first);
        tr.xdot.push_back(samples[k].second);
    }
    lyocert::Dataset ds;
    ds.trajectories.push_back(std::move(tr));
    return ds;
}

/// Candidate built directly from lower-triangular entries (row-major).
inline lyocert::LyapunovCandidate candidate(std::size_t n, std::vector<double> entries) {
    return lyocert::LyapunovCandidate(lyocert::CholeskyFactor(n, std::move(entries)));
}

/// The factor reported in the worked example: L = [[0.715, 0], [0.609, 0.0819]].
inline lyocert::LyapunovCandidate example_candidate() {
    return candidate(2, {0.715, 0.609, 0.0819});
}

/// Unique scratch directory under the system temp root.
inline std::filesystem::path scratch_dir(const std::string& tag) {
    static std::uint64_t counter = 0;
    const auto dir = std::filesystem::temp_directory_path() /
                     ("lyocert_test_" + tag + "_" + std::to_string(++counter));
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path);
    out << content;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace support
