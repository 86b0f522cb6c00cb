#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "lyocert/core.hpp"
#include "lyocert/dataio.hpp"
#include "lyocert/rng.hpp"

namespace lyocert {

inline double softplus(double t) {
    return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

inline double sigmoid(double t) {
    return t > 0.0 ? 1.0 / (1.0 + std::exp(-t)) : 1.0 - 1.0 / (1.0 + std::exp(t));
}

/// Maps the network's raw output to a Cholesky factor. The first n slots are
/// the diagonal and pass through softplus, so they stay strictly positive for
/// any parameter values; the remaining n(n-1)/2 slots are taken as the
/// strictly-lower entries in row-major order, unchanged.
inline CholeskyFactor assemble_L(const Vec& raw, std::size_t n) {
    if (raw.size() != n * (n + 1) / 2)
        throw std::invalid_argument("assemble_L: expected " + std::to_string(n * (n + 1) / 2) +
                                    " raw values, got " + std::to_string(raw.size()));
    std::vector<double> entries(raw.size(), 0.0);
    std::size_t off = n;
    for (std::size_t i = 0; i < n; ++i) {
        entries[i * (i + 1) / 2 + i] = softplus(raw[i]);
        for (std::size_t j = 0; j < i; ++j) entries[i * (i + 1) / 2 + j] = raw[off++];
    }
    return CholeskyFactor(n, std::move(entries));
}

struct DenseLayer {
    Mat W;
    Vec b;
};

/// Two-hidden-layer perceptron, 32 units each, rectifier activations, linear
/// output of width n(n+1)/2. The input is the concatenated state and state
/// derivative (2n values); see InputMode for how it is fed during training.
struct NetworkParams {
    std::size_t state_dim = 0;
    DenseLayer l0, l1, l2;

    static constexpr std::size_t kHidden = 32;

    std::size_t input_dim() const { return 2 * state_dim; }
    std::size_t output_dim() const { return state_dim * (state_dim + 1) / 2; }

    static NetworkParams init(std::size_t state_dim, Rng& rng) {
        NetworkParams p;
        p.state_dim = state_dim;
        auto make = [&rng](std::size_t out, std::size_t in) {
            DenseLayer l{Mat(out, in), Vec(out, 0.0)};
            const double bound = 1.0 / std::sqrt(static_cast<double>(in));
            for (double& w : l.W.data) w = rng.uniform(-bound, bound);
            for (double& b : l.b) b = rng.uniform(-bound, bound);
            return l;
        };
        p.l0 = make(kHidden, p.input_dim());
        p.l1 = make(kHidden, kHidden);
        p.l2 = make(p.output_dim(), kHidden);
        return p;
    }

    std::size_t parameter_count() const {
        return l0.W.data.size() + l0.b.size() + l1.W.data.size() + l1.b.size() +
               l2.W.data.size() + l2.b.size();
    }

    double* flat(std::size_t k) {
        DenseLayer* layers[] = {&l0, &l1, &l2};
        for (DenseLayer* l : layers) {
            if (k < l->W.data.size()) return &l->W.data[k];
            k -= l->W.data.size();
            if (k < l->b.size()) return &l->b[k];
            k -= l->b.size();
        }
        throw std::out_of_range("NetworkParams::flat");
    }
};

/// Gradient accumulator with the same layout as NetworkParams.
struct NetworkGrads {
    DenseLayer l0, l1, l2;

    explicit NetworkGrads(const NetworkParams& p)
        : l0{Mat(p.l0.W.rows, p.l0.W.cols), Vec(p.l0.b.size(), 0.0)},
          l1{Mat(p.l1.W.rows, p.l1.W.cols), Vec(p.l1.b.size(), 0.0)},
          l2{Mat(p.l2.W.rows, p.l2.W.cols), Vec(p.l2.b.size(), 0.0)} {}

    const double* flat(std::size_t k) const {
        const DenseLayer* layers[] = {&l0, &l1, &l2};
        for (const DenseLayer* l : layers) {
            if (k < l->W.data.size()) return &l->W.data[k];
            k -= l->W.data.size();
            if (k < l->b.size()) return &l->b[k];
            k -= l->b.size();
        }
        throw std::out_of_range("NetworkGrads::flat");
    }
};

enum class InputMode {
    constant,   ///< network evaluated once on an all-ones token; L depends on parameters only
    per_sample  ///< literal reading: L recomputed from each sample's (x, xdot)
};

struct TrainConfig {
    double lambda = 0.0;
    double gamma = 1e-3;
    double learning_rate = 1e-2;
    int max_epochs = 5000;
    int restarts = 3;
    std::uint64_t seed = 0;
    InputMode input_mode = InputMode::constant;

    void validate() const {
        if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
        if (!(gamma > 0.0)) throw std::invalid_argument("TrainConfig: gamma must be > 0");
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (max_epochs < 1) throw std::invalid_argument("TrainConfig: max_epochs must be >= 1");
        if (restarts < 1) throw std::invalid_argument("TrainConfig: restarts must be >= 1");
    }
};

struct TrainResult {
    bool converged = false;
    double final_loss = std::numeric_limits<double>::infinity();
    int epochs_used = 0;
    LyapunovCandidate candidate;
    std::vector<double> loss_history;
    NetworkParams params;  ///< weights behind `candidate`, usable as a warm start
};

namespace detail {

struct ForwardCache {
    Vec z1, a1, z2, a2, raw;
};

inline ForwardCache forward(const NetworkParams& p, const Vec& u) {
    ForwardCache c;
    c.z1 = mat_vec(p.l0.W, u);
    for (std::size_t i = 0; i < c.z1.size(); ++i) c.z1[i] += p.l0.b[i];
    c.a1 = c.z1;
    for (double& v : c.a1) v = std::max(v, 0.0);
    c.z2 = mat_vec(p.l1.W, c.a1);
    for (std::size_t i = 0; i < c.z2.size(); ++i) c.z2[i] += p.l1.b[i];
    c.a2 = c.z2;
    for (double& v : c.a2) v = std::max(v, 0.0);
    c.raw = mat_vec(p.l2.W, c.a2);
    for (std::size_t i = 0; i < c.raw.size(); ++i) c.raw[i] += p.l2.b[i];
    return c;
}

/// Backpropagates d(loss)/d(raw) through the network, adding into g.
inline void backward(const NetworkParams& p, const Vec& u, const ForwardCache& c,
                     const Vec& draw, NetworkGrads& g) {
    for (std::size_t i = 0; i < draw.size(); ++i) {
        g.l2.b[i] += draw[i];
        for (std::size_t j = 0; j < c.a2.size(); ++j) g.l2.W(i, j) += draw[i] * c.a2[j];
    }
    Vec dz2(c.a2.size(), 0.0);
    for (std::size_t j = 0; j < dz2.size(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < draw.size(); ++i) s += p.l2.W(i, j) * draw[i];
        dz2[j] = c.z2[j] > 0.0 ? s : 0.0;
    }
    for (std::size_t i = 0; i < dz2.size(); ++i) {
        g.l1.b[i] += dz2[i];
        for (std::size_t j = 0; j < c.a1.size(); ++j) g.l1.W(i, j) += dz2[i] * c.a1[j];
    }
    Vec dz1(c.a1.size(), 0.0);
    for (std::size_t j = 0; j < dz1.size(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < dz2.size(); ++i) s += p.l1.W(i, j) * dz2[i];
        dz1[j] = c.z1[j] > 0.0 ? s : 0.0;
    }
    for (std::size_t i = 0; i < dz1.size(); ++i) {
        g.l0.b[i] += dz1[i];
        for (std::size_t j = 0; j < u.size(); ++j) g.l0.W(i, j) += dz1[i] * u[j];
    }
}

/// d(residual)/dP for one sample: G = 2 x xdot^T + lambda x x^T.
/// d(f(P))/dL with P = L L^T is ((G + G^T) L) restricted to the lower triangle.
inline void accumulate_dP(const Vec& x, const Vec& xdot, double lambda, double weight, Mat& dP) {
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            dP(i, j) += weight * (2.0 * x[i] * xdot[j] + lambda * x[i] * x[j]);
}

/// Maps d(loss)/dP into d(loss)/d(raw), applying the softplus derivative on
/// the diagonal slots.
inline Vec raw_gradient(const Mat& dP, const CholeskyFactor& L, const Vec& raw) {
    const std::size_t n = L.n;
    Mat dL(n, n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b <= a; ++b) {
            double s = 0.0;
            // L(j, b) vanishes for j < b, and at() must not be read there: the
            // packed layout would alias a different entry, not return zero.
            for (std::size_t j = b; j < n; ++j) s += (dP(a, j) + dP(j, a)) * L.at(j, b);
            dL(a, b) = s;
        }
    }
    Vec draw(raw.size(), 0.0);
    std::size_t off = n;
    for (std::size_t i = 0; i < n; ++i) {
        draw[i] = dL(i, i) * sigmoid(raw[i]);
        for (std::size_t j = 0; j < i; ++j) draw[off++] = dL(i, j);
    }
    return draw;
}

inline Vec constant_token(std::size_t input_dim) { return Vec(input_dim, 1.0); }

inline Vec sample_input(const Vec& x, const Vec& xdot) {
    Vec u(x.size() * 2);
    for (std::size_t i = 0; i < x.size(); ++i) {
        u[i] = x[i];
        u[x.size() + i] = xdot[i];
    }
    return u;
}

inline void require_derivatives(const Dataset& ds, const char* who) {
    if (ds.trajectories.empty()) throw std::invalid_argument(std::string(who) + ": empty dataset");
    if (!ds.has_derivatives())
        throw std::invalid_argument(std::string(who) + ": dataset is missing derivatives");
}

}  // namespace detail

/// Mean hinge loss over every sample of the dataset: mean(max(0, residual)).
inline double loss(const LyapunovCandidate& cand, const Dataset& ds, double lambda,
                   double gamma) {
    detail::require_derivatives(ds, "loss");
    double sum = 0.0;
    std::size_t count = 0;
    for (const Trajectory& tr : ds.trajectories) {
        for (std::size_t k = 0; k < tr.size(); ++k) {
            sum += std::max(0.0, residual(cand, tr.x[k], tr.xdot[k], lambda, gamma));
            ++count;
        }
    }
    return sum / static_cast<double>(count);
}

namespace detail {

/// Loss and parameter gradient for one epoch. Returns the loss; the gradient
/// of the mean hinge is written into g.
inline double epoch_loss_and_grad(const NetworkParams& p, const Dataset& ds,
                                  const TrainConfig& cfg, NetworkGrads& g) {
    const std::size_t n = p.state_dim;
    const double inv_count = 1.0 / static_cast<double>(ds.sample_count());
    double sum = 0.0;

    if (cfg.input_mode == InputMode::constant) {
        const Vec u = constant_token(p.input_dim());
        const ForwardCache cache = forward(p, u);
        const CholeskyFactor L = assemble_L(cache.raw, n);
        const LyapunovCandidate cand(L);
        Mat dP(n, n);
        for (const Trajectory& tr : ds.trajectories) {
            for (std::size_t k = 0; k < tr.size(); ++k) {
                const double h = residual(cand, tr.x[k], tr.xdot[k], cfg.lambda, cfg.gamma);
                if (h > 0.0) {
                    sum += h;
                    accumulate_dP(tr.x[k], tr.xdot[k], cfg.lambda, inv_count, dP);
                }
            }
        }
        const Vec draw = raw_gradient(dP, L, cache.raw);
        backward(p, u, cache, draw, g);
        return sum * inv_count;
    }

    // per-sample mode: each sample owns its forward pass and factor
    for (const Trajectory& tr : ds.trajectories) {
        for (std::size_t k = 0; k < tr.size(); ++k) {
            const Vec u = sample_input(tr.x[k], tr.xdot[k]);
            const ForwardCache cache = forward(p, u);
            const CholeskyFactor L = assemble_L(cache.raw, n);
            const LyapunovCandidate cand(L);
            const double h = residual(cand, tr.x[k], tr.xdot[k], cfg.lambda, cfg.gamma);
            if (h > 0.0) {
                sum += h;
                Mat dP(n, n);
                accumulate_dP(tr.x[k], tr.xdot[k], cfg.lambda, inv_count, dP);
                const Vec draw = raw_gradient(dP, L, cache.raw);
                backward(p, u, cache, draw, g);
            }
        }
    }
    return sum * inv_count;
}

inline void sgd_step(NetworkParams& p, const NetworkGrads& g, double lr) {
    auto apply = [lr](DenseLayer& l, const DenseLayer& gl) {
        for (std::size_t i = 0; i < l.W.data.size(); ++i) l.W.data[i] -= lr * gl.W.data[i];
        for (std::size_t i = 0; i < l.b.size(); ++i) l.b[i] -= lr * gl.b[i];
    };
    apply(p.l0, g.l0);
    apply(p.l1, g.l1);
    apply(p.l2, g.l2);
}

/// Extracts the frozen candidate a trained network represents. In constant
/// mode this is the factor at the fixed token. In per-sample mode the factor
/// varies across inputs, so the candidate is the one among all training
/// inputs whose fixed reuse gives the smallest worst-case residual.
inline LyapunovCandidate extract_candidate(const NetworkParams& p, const Dataset& ds,
                                           const TrainConfig& cfg) {
    const std::size_t n = p.state_dim;
    if (cfg.input_mode == InputMode::constant) {
        const ForwardCache cache = forward(p, constant_token(p.input_dim()));
        return LyapunovCandidate(assemble_L(cache.raw, n));
    }
    std::optional<LyapunovCandidate> best;
    double best_worst = std::numeric_limits<double>::infinity();
    for (const Trajectory& tr : ds.trajectories) {
        for (std::size_t k = 0; k < tr.size(); ++k) {
            const Vec u = sample_input(tr.x[k], tr.xdot[k]);
            const LyapunovCandidate cand(assemble_L(forward(p, u).raw, n));
            double worst = -std::numeric_limits<double>::infinity();
            for (const Trajectory& tr2 : ds.trajectories)
                for (std::size_t k2 = 0; k2 < tr2.size(); ++k2)
                    worst = std::max(worst, residual(cand, tr2.x[k2], tr2.xdot[k2], cfg.lambda,
                                                     cfg.gamma));
            if (worst < best_worst) {
                best_worst = worst;
                best = cand;
            }
        }
    }
    return *best;
}

}  // namespace detail

/// Full-batch gradient descent on the hinge loss, with random restarts.
/// Converged means some restart reached loss exactly zero, i.e. every
/// training sample satisfies the margined decay constraint. Deterministic
/// for a fixed config and seed. `warm_init`, when given, seeds the first
/// restart's parameters instead of a random initialization.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg,
                         const NetworkParams* warm_init = nullptr) {
    cfg.validate();
    detail::require_derivatives(ds, "train");
    const std::size_t n = ds.dim();

    TrainResult best;
    for (int restart = 0; restart < cfg.restarts; ++restart) {
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(restart)));
        NetworkParams params = (restart == 0 && warm_init != nullptr)
                                   ? *warm_init
                                   : NetworkParams::init(n, rng);

        std::vector<double> history;
        history.reserve(static_cast<std::size_t>(cfg.max_epochs));
        bool converged = false;
        for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
            NetworkGrads grads(params);
            const double l = detail::epoch_loss_and_grad(params, ds, cfg, grads);
            history.push_back(l);
            if (l == 0.0) {
                converged = true;
                break;
            }
            detail::sgd_step(params, grads, cfg.learning_rate);
        }

        TrainResult result;
        result.candidate = detail::extract_candidate(params, ds, cfg);
        result.final_loss = loss(result.candidate, ds, cfg.lambda, cfg.gamma);
        result.converged = converged && result.final_loss == 0.0;
        result.epochs_used = static_cast<int>(history.size());
        result.loss_history = std::move(history);
        result.params = std::move(params);

        if (result.final_loss < best.final_loss) best = std::move(result);
        if (best.converged) break;
    }
    return best;
}

/// Compares analytic loss gradients against central finite differences
/// (step 1e-5) over every parameter. Returns the largest relative error,
/// where the denominator is floored at 1 so near-zero gradients compare
/// absolutely.
///
/// The hinge and the rectifiers make the objective piecewise; a sample that
/// sits within the probe step of a kink would contaminate the difference
/// quotient with one-sided noise. The comparison therefore freezes the
/// nonsmooth choices made at the evaluation point — the rectifier masks and
/// the set of samples with a positive hinge — and differences that smooth
/// branch, which is exactly the branch the analytic gradient differentiates.
inline double gradient_check(NetworkParams params, const Dataset& ds, const TrainConfig& cfg) {
    detail::require_derivatives(ds, "gradient_check");
    NetworkGrads grads(params);
    detail::epoch_loss_and_grad(params, ds, cfg, grads);

    const std::size_t n = params.state_dim;
    const double inv_count = 1.0 / static_cast<double>(ds.sample_count());

    struct FrozenPass {
        Vec u;
        std::vector<char> m1, m2;
        std::vector<std::pair<const Vec*, const Vec*>> active;
    };
    std::vector<FrozenPass> passes;
    auto freeze = [&](const Vec& u) {
        FrozenPass fp;
        fp.u = u;
        const detail::ForwardCache cache = detail::forward(params, u);
        for (double z : cache.z1) fp.m1.push_back(z > 0.0 ? 1 : 0);
        for (double z : cache.z2) fp.m2.push_back(z > 0.0 ? 1 : 0);
        passes.push_back(std::move(fp));
        return LyapunovCandidate(assemble_L(cache.raw, n));
    };
    if (cfg.input_mode == InputMode::constant) {
        const LyapunovCandidate cand = freeze(detail::constant_token(params.input_dim()));
        for (const Trajectory& tr : ds.trajectories)
            for (std::size_t k = 0; k < tr.size(); ++k)
                if (residual(cand, tr.x[k], tr.xdot[k], cfg.lambda, cfg.gamma) > 0.0)
                    passes.back().active.push_back({&tr.x[k], &tr.xdot[k]});
    } else {
        for (const Trajectory& tr : ds.trajectories)
            for (std::size_t k = 0; k < tr.size(); ++k) {
                const LyapunovCandidate cand = freeze(detail::sample_input(tr.x[k], tr.xdot[k]));
                if (residual(cand, tr.x[k], tr.xdot[k], cfg.lambda, cfg.gamma) > 0.0)
                    passes.back().active.push_back({&tr.x[k], &tr.xdot[k]});
                else
                    passes.pop_back();
            }
    }

    auto frozen_loss = [&](const NetworkParams& p) {
        double sum = 0.0;
        for (const FrozenPass& fp : passes) {
            Vec a1 = mat_vec(p.l0.W, fp.u);
            for (std::size_t i = 0; i < a1.size(); ++i)
                a1[i] = fp.m1[i] ? a1[i] + p.l0.b[i] : 0.0;
            Vec a2 = mat_vec(p.l1.W, a1);
            for (std::size_t i = 0; i < a2.size(); ++i)
                a2[i] = fp.m2[i] ? a2[i] + p.l1.b[i] : 0.0;
            Vec raw = mat_vec(p.l2.W, a2);
            for (std::size_t i = 0; i < raw.size(); ++i) raw[i] += p.l2.b[i];
            const LyapunovCandidate cand(assemble_L(raw, n));
            for (const auto& [x, xdot] : fp.active)
                sum += residual(cand, *x, *xdot, cfg.lambda, cfg.gamma);
        }
        return sum * inv_count;
    };

    const double step = 1e-5;
    double worst = 0.0;
    for (std::size_t k = 0; k < params.parameter_count(); ++k) {
        double* pk = params.flat(k);
        const double saved = *pk;
        *pk = saved + step;
        const double up = frozen_loss(params);
        *pk = saved - step;
        const double down = frozen_loss(params);
        *pk = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double analytic = *grads.flat(k);
        const double rel = std::abs(analytic - numeric) /
                           std::max({1.0, std::abs(analytic), std::abs(numeric)});
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace lyocert
