#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include <json.hpp>

namespace lyocert {

/// High-confidence bound on the true violation rate of a binary condition,
/// estimated from c_hat observed violations in m test samples:
///   c_bar = c_hat/m + sqrt(ln(1/delta) / (2m)),
/// which holds with probability at least 1 - delta.
struct ViolationBound {
    std::size_t c_hat = 0;
    std::size_t m = 0;
    double delta = 0.0;
    double c_bar = 0.0;
};

inline ViolationBound chernoff_bound(std::size_t c_hat, std::size_t m, double delta) {
    if (m < 1) throw std::invalid_argument("chernoff_bound: m must be >= 1");
    if (c_hat > m) throw std::invalid_argument("chernoff_bound: c_hat must be <= m");
    if (!(delta > 0.0) || delta > 1.0)
        throw std::invalid_argument("chernoff_bound: delta must be in (0, 1]");
    ViolationBound b;
    b.c_hat = c_hat;
    b.m = m;
    b.delta = delta;
    b.c_bar = static_cast<double>(c_hat) / static_cast<double>(m) +
              std::sqrt(std::log(1.0 / delta) / (2.0 * static_cast<double>(m)));
    return b;
}

/// Smallest m such that a clean test run (c_hat = 0) certifies a violation
/// rate of at most target_bound at confidence 1 - delta. The closed form
/// ceil(ln(1/delta) / (2 b^2)) is nudged to the exact boundary in case the
/// ceiling landed a step off.
inline std::size_t required_samples(double target_bound, double delta) {
    if (!(target_bound > 0.0))
        throw std::invalid_argument("required_samples: target_bound must be > 0");
    if (!(delta > 0.0) || delta >= 1.0)
        throw std::invalid_argument("required_samples: delta must be in (0, 1)");
    const double raw = std::log(1.0 / delta) / (2.0 * target_bound * target_bound);
    std::size_t m = raw < 1.0 ? 1 : static_cast<std::size_t>(std::ceil(raw));
    while (chernoff_bound(0, m, delta).c_bar > target_bound) ++m;
    while (m > 1 && chernoff_bound(0, m - 1, delta).c_bar <= target_bound) --m;
    return m;
}

inline nlohmann::json bound_to_json(const ViolationBound& b) {
    return {{"c_hat", b.c_hat}, {"m", b.m}, {"delta", b.delta}, {"c_bar", b.c_bar}};
}

}  // namespace lyocert
