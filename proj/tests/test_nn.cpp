// Tests for the Cholesky-head network: output assembly, hinge loss, training,
// and backpropagation checked against central finite differences.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <utility>
#include <vector>

#include <lyocert/nn.hpp>

#include "support.hpp"

using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using lyocert::Dataset;
using lyocert::InputMode;
using lyocert::NetworkParams;
using lyocert::Rng;
using lyocert::TrainConfig;
using lyocert::Trajectory;
using lyocert::Vec;

namespace {

using support::point_dataset;

NetworkParams zero_params(std::size_t state_dim) {
    Rng rng(1);
    NetworkParams p = NetworkParams::init(state_dim, rng);
    for (std::size_t k = 0; k < p.parameter_count(); ++k) *p.flat(k) = 0.0;
    return p;
}

}  // namespace

TEST_CASE("assemble_L applies softplus to diagonal slots only", "[nn]") {
    const auto l = lyocert::assemble_L({0.0, 0.0, 0.0}, 2);
    CHECK_THAT(l.at(0, 0), WithinAbs(std::log(2.0), 1e-15));
    CHECK_THAT(l.at(1, 1), WithinAbs(std::log(2.0), 1e-15));
    CHECK(l.at(1, 0) == 0.0);

    // A deeply negative diagonal slot maps to a tiny but strictly positive
    // value; off-diagonal slots pass through unchanged.
    const auto l2 = lyocert::assemble_L({-50.0, 0.0, 1.25}, 2);
    CHECK(l2.at(0, 0) > 0.0);
    CHECK_THAT(l2.at(0, 0), WithinRel(std::exp(-50.0), 1e-8));
    CHECK(l2.at(1, 0) == 1.25);
}

TEST_CASE("assemble_L rejects the wrong number of raw values", "[nn]") {
    CHECK_NOTHROW(lyocert::assemble_L({0.1, 0.2, 0.3, 0.4, 0.5, 0.6}, 3));
    CHECK_THROWS_AS(lyocert::assemble_L({0.1, 0.2, 0.3, 0.4, 0.5}, 3), std::invalid_argument);
    CHECK_THROWS_AS(lyocert::assemble_L({}, 1), std::invalid_argument);
}

TEST_CASE("assemble_L keeps the diagonal strictly positive for random raws", "[nn]") {
    std::mt19937_64 gen(31);
    std::uniform_real_distribution<double> wide(-30.0, 30.0);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + static_cast<std::size_t>(gen() % 4);
        Vec raw(n * (n + 1) / 2);
        for (double& v : raw) v = wide(gen);
        const auto l = lyocert::assemble_L(raw, n);
        for (std::size_t i = 0; i < n; ++i) CHECK(l.at(i, i) > 0.0);
    }
}

TEST_CASE("loss is the mean of hinged residuals", "[nn]") {
    const auto ident = support::candidate(2, {1.0, 0.0, 1.0});  // P = I

    // Every sample decaying: hinge inactive everywhere.
    const auto quiet = point_dataset({{{1.0, 0.0}, {-1.0, 0.0}}, {{0.0, 2.0}, {0.0, -0.5}}});
    CHECK(lyocert::loss(ident, quiet, 0.0, 0.0) == 0.0);

    // With P = I and lambda = 0 the residual is 2 x.xdot: one sample at 0.4.
    const auto single = point_dataset({{{1.0, 0.0}, {0.2, 0.0}}});
    CHECK(lyocert::loss(ident, single, 0.0, 0.0) == 0.4);

    // Residuals (-1, 0.5) hinge to (0, 0.5); the mean is 0.25.
    const auto mixed =
        point_dataset({{{1.0, 0.0}, {-0.5, 0.0}}, {{1.0, 0.0}, {0.25, 0.0}}});
    CHECK(lyocert::loss(ident, mixed, 0.0, 0.0) == 0.25);

    // gamma shifts every residual before the hinge.
    CHECK_THAT(lyocert::loss(ident, single, 0.0, 0.1), WithinAbs(0.5, 1e-15));
}

TEST_CASE("loss requires derivatives and a nonempty dataset", "[nn]") {
    const auto ident = support::candidate(2, {1.0, 0.0, 1.0});
    Dataset empty;
    CHECK_THROWS_WITH(lyocert::loss(ident, empty, 0.0, 0.0), ContainsSubstring("empty"));

    Dataset bare = point_dataset({{{1.0, 0.0}, {0.2, 0.0}}});
    bare.trajectories[0].xdot.clear();
    CHECK_THROWS_WITH(lyocert::loss(ident, bare, 0.0, 0.0),
                      ContainsSubstring("missing derivatives"));
}

TEST_CASE("loss is monotone in the decay rate", "[nn]") {
    const auto ds = support::linear_dataset(3, 0.05, 1.0, 3);
    const auto cand = support::example_candidate();
    double prev = -1.0;
    for (double lambda : {0.0, 0.5, 1.0, 2.0, 5.0, 12.0}) {
        const double cur = lyocert::loss(cand, ds, lambda, 1e-3);
        CHECK(cur >= prev);
        prev = cur;
    }
}

TEST_CASE("training certifies the stable linear system at lambda = 1", "[nn][slow]") {
    const auto ds = support::linear_dataset(8, 0.02, 1.0, 7);
    TrainConfig cfg;
    cfg.lambda = 1.0;
    cfg.seed = 11;
    const auto result = lyocert::train(ds, cfg);

    REQUIRE(result.converged);
    CHECK(result.final_loss == 0.0);
    CHECK(result.epochs_used >= 1);
    CHECK(result.loss_history.size() == static_cast<std::size_t>(result.epochs_used));
    CHECK(result.loss_history.back() == 0.0);
    CHECK(result.candidate.dim() == 2);

    // Convergence flag soundness: every training sample satisfies the
    // margined decay constraint with the returned candidate.
    for (const auto& tr : ds.trajectories)
        for (std::size_t k = 0; k < tr.size(); ++k)
            CHECK(lyocert::residual(result.candidate, tr.x[k], tr.xdot[k], cfg.lambda,
                                    cfg.gamma) <= 0.0);
}

TEST_CASE("training cannot certify a rate beyond the spectral ceiling", "[nn][slow]") {
    // The worked system has a double eigenvalue at -1, so no quadratic
    // certificate exists for decay rate 10; the trainer must report failure.
    const auto ds = support::linear_dataset(6, 0.02, 1.0, 7);
    TrainConfig cfg;
    cfg.lambda = 10.0;
    cfg.max_epochs = 1200;
    cfg.restarts = 2;
    cfg.seed = 11;
    const auto result = lyocert::train(ds, cfg);
    CHECK_FALSE(result.converged);
    CHECK(result.final_loss > 0.0);
}

TEST_CASE("a zero network at the origin sample is a fixed point of training", "[nn]") {
    // V(0) = 0 and Vdot(0) = 0 leave only the gamma margin, and the gradient
    // vanishes because both quadratic terms are zero at x = 0: the loss must
    // sit at exactly gamma for every epoch.
    const auto ds = point_dataset({{{0.0, 0.0}, {0.0, 0.0}}});
    const NetworkParams frozen = zero_params(2);
    TrainConfig cfg;
    cfg.gamma = 1e-3;
    cfg.max_epochs = 40;
    cfg.restarts = 1;
    const auto result = lyocert::train(ds, cfg, &frozen);

    CHECK_FALSE(result.converged);
    CHECK(result.epochs_used == 40);
    for (double l : result.loss_history) CHECK(l == 1e-3);
    CHECK(result.final_loss == 1e-3);
}

TEST_CASE("training is deterministic for a fixed seed", "[nn]") {
    const auto ds = support::linear_dataset(3, 0.04, 0.8, 21);
    TrainConfig cfg;
    cfg.lambda = 1.0;
    cfg.max_epochs = 300;
    cfg.restarts = 1;
    cfg.seed = 77;
    const auto a = lyocert::train(ds, cfg);
    const auto b = lyocert::train(ds, cfg);
    REQUIRE(a.loss_history.size() == b.loss_history.size());
    for (std::size_t k = 0; k < a.loss_history.size(); ++k)
        CHECK(a.loss_history[k] == b.loss_history[k]);
    CHECK(a.candidate.L.entries == b.candidate.L.entries);
}

TEST_CASE("train validates its configuration", "[nn]") {
    const auto ds = point_dataset({{{1.0, 0.0}, {-1.0, 0.0}}});
    TrainConfig cfg;

    cfg.gamma = 0.0;
    CHECK_THROWS_AS(lyocert::train(ds, cfg), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.lambda = -0.5;
    CHECK_THROWS_AS(lyocert::train(ds, cfg), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(lyocert::train(ds, cfg), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.max_epochs = 0;
    CHECK_THROWS_AS(lyocert::train(ds, cfg), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.restarts = 0;
    CHECK_THROWS_AS(lyocert::train(ds, cfg), std::invalid_argument);

    Dataset bare = point_dataset({{{1.0, 0.0}, {-1.0, 0.0}}});
    bare.trajectories[0].xdot.clear();
    CHECK_THROWS_WITH(lyocert::train(bare, TrainConfig{}),
                      ContainsSubstring("missing derivatives"));
}

TEST_CASE("analytic gradients match central finite differences", "[nn][slow]") {
    TrainConfig cfg;
    cfg.lambda = 0.7;
    for (int instance = 0; instance < 20; ++instance) {
        Rng rng(100 + static_cast<std::uint64_t>(instance));
        const auto params = NetworkParams::init(2, rng);
        const auto ds =
            support::linear_dataset(2, 0.05, 0.45, 200 + static_cast<std::uint32_t>(instance));
        const double err = lyocert::gradient_check(params, ds, cfg);
        INFO("instance " << instance);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("gradients also check out in per-sample input mode", "[nn][slow]") {
    TrainConfig cfg;
    cfg.lambda = 0.4;
    cfg.input_mode = InputMode::per_sample;
    for (int instance = 0; instance < 3; ++instance) {
        Rng rng(500 + static_cast<std::uint64_t>(instance));
        const auto params = NetworkParams::init(2, rng);
        const auto ds =
            support::linear_dataset(2, 0.05, 0.4, 600 + static_cast<std::uint32_t>(instance));
        CHECK(lyocert::gradient_check(params, ds, cfg) < 1e-4);
    }
}

TEST_CASE("a strictly inactive hinge has exactly zero gradient", "[nn]") {
    // Zero parameters give L = ln(2) I, and x decaying along xdot = -x keeps
    // every residual well below zero at lambda = 0.3, so neither the analytic
    // nor the finite-difference gradient sees any active sample.
    std::vector<std::pair<Vec, Vec>> samples;
    for (int k = 0; k < 8; ++k) {
        const double s = std::exp(-0.1 * k);
        samples.push_back({{0.8 * s, 0.6 * s}, {-0.8 * s, -0.6 * s}});
    }
    const auto ds = point_dataset(samples);
    TrainConfig cfg;
    cfg.lambda = 0.3;
    CHECK(lyocert::gradient_check(zero_params(2), ds, cfg) == 0.0);
}

TEST_CASE("a single active sample matches finite differences", "[nn]") {
    // xdot = +x makes the residual 2 x'Px + lambda x'Px + gamma, strictly
    // positive for any positive-definite P, so the hinge is guaranteed active.
    const auto ds = point_dataset({{{1.0, 0.5}, {1.0, 0.5}}});
    Rng rng(99);
    const auto params = NetworkParams::init(2, rng);
    TrainConfig cfg;
    cfg.lambda = 1.0;
    CHECK(lyocert::gradient_check(params, ds, cfg) < 1e-4);
}

TEST_CASE("per-sample input mode trains deterministically", "[nn][slow]") {
    const auto ds = support::linear_dataset(2, 0.05, 0.5, 5);
    TrainConfig cfg;
    cfg.lambda = 0.2;
    cfg.max_epochs = 400;
    cfg.restarts = 1;
    cfg.input_mode = InputMode::per_sample;
    const auto a = lyocert::train(ds, cfg);
    const auto b = lyocert::train(ds, cfg);
    CHECK(a.candidate.dim() == 2);
    CHECK(a.final_loss >= 0.0);
    CHECK(a.final_loss == b.final_loss);
    CHECK(a.candidate.L.entries == b.candidate.L.entries);
}

TEST_CASE("config defaults match the documented contract", "[nn]") {
    const TrainConfig cfg;
    CHECK(cfg.lambda == 0.0);
    CHECK(cfg.gamma == 1e-3);
    CHECK(cfg.learning_rate == 1e-2);
    CHECK(cfg.max_epochs == 5000);
    CHECK(cfg.restarts == 3);
    CHECK(cfg.input_mode == InputMode::constant);
}
