#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lyocert {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Vec sub(const Vec& a, const Vec& b) {
    Vec r(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
    return r;
}

inline Vec scaled(const Vec& a, double s) {
    Vec r(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] * s;
    return r;
}

inline bool all_finite(const Vec& a) {
    for (double v : a)
        if (!std::isfinite(v)) return false;
    return true;
}

/// Dense row-major matrix, just big enough for this library's needs.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
};

inline Vec mat_vec(const Mat& m, const Vec& x) {
    Vec y(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) s += m(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

/// Lower-triangular factor with strictly positive diagonal. Entries are
/// stored row-major over the lower triangle: (0,0), (1,0), (1,1), (2,0), ...
struct CholeskyFactor {
    std::size_t n = 0;
    std::vector<double> entries;

    CholeskyFactor() = default;
    CholeskyFactor(std::size_t dim, std::vector<double> vals) : n(dim), entries(std::move(vals)) {
        if (entries.size() != n * (n + 1) / 2)
            throw std::invalid_argument("CholeskyFactor: expected " +
                                        std::to_string(n * (n + 1) / 2) + " entries, got " +
                                        std::to_string(entries.size()));
        for (std::size_t i = 0; i < n; ++i) {
            double d = at(i, i);
            if (!std::isfinite(d) || d <= 0.0)
                throw std::invalid_argument("CholeskyFactor: diagonal entry " +
                                            std::to_string(i) + " must be strictly positive");
        }
        if (!all_finite(entries))
            throw std::invalid_argument("CholeskyFactor: non-finite entry");
    }

    static CholeskyFactor identity(std::size_t dim) {
        std::vector<double> vals(dim * (dim + 1) / 2, 0.0);
        CholeskyFactor f;
        f.n = dim;
        f.entries = std::move(vals);
        for (std::size_t i = 0; i < dim; ++i) f.entries[i * (i + 1) / 2 + i] = 1.0;
        return f;
    }

    /// Element (i, j) with j <= i.
    double at(std::size_t i, std::size_t j) const { return entries[i * (i + 1) / 2 + j]; }

    /// Full square form with the strictly-upper zeros made explicit.
    Mat dense() const {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) m(i, j) = at(i, j);
        return m;
    }
};

/// Quadratic form V(x) = x^T P x with P = L L^T cached at construction.
/// P is assembled entry-by-entry from the same products on both sides of the
/// diagonal, so it is symmetric bitwise, and positive definite because L has
/// a strictly positive diagonal.
struct LyapunovCandidate {
    CholeskyFactor L;
    Mat P;

    LyapunovCandidate() = default;
    explicit LyapunovCandidate(CholeskyFactor factor) : L(std::move(factor)), P(L.n, L.n) {
        const std::size_t n = L.n;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k <= j; ++k) s += L.at(i, k) * L.at(j, k);
                P(i, j) = s;
                P(j, i) = s;
            }
        }
    }

    std::size_t dim() const { return L.n; }
};

inline void check_dim(const LyapunovCandidate& cand, const Vec& x, const char* who) {
    if (x.size() != cand.dim())
        throw std::invalid_argument(std::string(who) + ": dimension mismatch (state has " +
                                    std::to_string(x.size()) + " entries, candidate expects " +
                                    std::to_string(cand.dim()) + ")");
}

/// V(x) = x^T P x. Zero exactly at x = 0, positive elsewhere.
inline double eval_V(const LyapunovCandidate& cand, const Vec& x) {
    check_dim(cand, x, "eval_V");
    return dot(x, mat_vec(cand.P, x));
}

/// d/dt V(x(t)) = 2 x^T P xdot by the chain rule on the quadratic form.
inline double eval_Vdot(const LyapunovCandidate& cand, const Vec& x, const Vec& xdot) {
    check_dim(cand, x, "eval_Vdot");
    check_dim(cand, xdot, "eval_Vdot");
    return 2.0 * dot(x, mat_vec(cand.P, xdot));
}

/// Stability residual Vdot + lambda*V + gamma. Non-positive residual at a
/// sample means the decay condition holds there with margin gamma.
inline double residual(const LyapunovCandidate& cand, const Vec& x, const Vec& xdot,
                       double lambda, double gamma) {
    if (lambda < 0.0) throw std::invalid_argument("residual: lambda must be >= 0");
    if (gamma < 0.0) throw std::invalid_argument("residual: gamma must be >= 0");
    return eval_Vdot(cand, x, xdot) + lambda * eval_V(cand, x) + gamma;
}

namespace detail {

/// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps. The matrix is
/// tiny here (state dimensions of a few), so convergence is immediate.
inline std::vector<double> jacobi_eigenvalues(Mat a, double tol = 1e-12, int max_sweeps = 100) {
    const std::size_t n = a.rows;
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a(i, i)));
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off = std::max(off, std::abs(a(p, q)));
        if (off <= tol * std::max(scale, 1e-300)) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) <= tol * std::max(scale, 1e-300) * 1e-2) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
    return eig;
}

}  // namespace detail

/// Extreme eigenvalues (k1, k2) of P, giving the sandwich
/// k1*||x||^2 <= V(x) <= k2*||x||^2. Closed form up to n = 2, Jacobi above.
inline std::pair<double, double> spectral_bounds(const LyapunovCandidate& cand) {
    const std::size_t n = cand.dim();
    if (n == 1) {
        const double p = cand.P(0, 0);
        return {p, p};
    }
    if (n == 2) {
        const double a = cand.P(0, 0), b = cand.P(0, 1), c = cand.P(1, 1);
        const double mean = 0.5 * (a + c);
        const double rad = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
        return {mean - rad, mean + rad};
    }
    std::vector<double> eig = detail::jacobi_eigenvalues(cand.P);
    double lo = eig[0], hi = eig[0];
    for (double e : eig) {
        lo = std::min(lo, e);
        hi = std::max(hi, e);
    }
    return {lo, hi};
}

}  // namespace lyocert
