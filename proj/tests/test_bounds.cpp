// Tests for the Chernoff violation bound and its sample-count inverse.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include <lyocert/bounds.hpp>

using Catch::Matchers::WithinAbs;
using lyocert::chernoff_bound;
using lyocert::required_samples;

TEST_CASE("chernoff_bound reproduces the reference confidence figures", "[bounds]") {
    // 3 violations out of 499 at 99% confidence: 3/499 + sqrt(ln(100)/998).
    const auto b = chernoff_bound(3, 499, 0.01);
    CHECK_THAT(b.c_bar, WithinAbs(0.07394, 5e-5));
    // Cross-check against an independent evaluation of the closed form.
    CHECK_THAT(b.c_bar, WithinAbs(3.0 / 499.0 + std::sqrt(std::log(100.0) / 998.0), 1e-15));

    // delta = 1 kills the confidence term entirely.
    CHECK(chernoff_bound(0, 100, 1.0).c_bar == 0.0);

    // Clean run at 99% confidence: pure confidence radius.
    CHECK_THAT(chernoff_bound(0, 100, 0.01).c_bar, WithinAbs(0.1517427, 1e-6));
}

TEST_CASE("chernoff_bound stores its inputs and satisfies the defining identity", "[bounds]") {
    const auto b = chernoff_bound(7, 123, 0.05);
    CHECK(b.c_hat == 7);
    CHECK(b.m == 123);
    CHECK(b.delta == 0.05);
    const double expected =
        7.0 / 123.0 + std::sqrt(std::log(1.0 / 0.05) / (2.0 * 123.0));
    CHECK(b.c_bar == expected);
}

TEST_CASE("chernoff_bound rejects out-of-domain parameters", "[bounds]") {
    CHECK_THROWS_AS(chernoff_bound(0, 0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(chernoff_bound(11, 10, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(chernoff_bound(0, 10, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(chernoff_bound(0, 10, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(chernoff_bound(0, 10, 1.5), std::invalid_argument);
    CHECK_NOTHROW(chernoff_bound(10, 10, 1.0));
}

TEST_CASE("c_bar decreases as confidence is relaxed (larger delta)", "[bounds]") {
    double prev = chernoff_bound(2, 50, 0.001).c_bar;
    for (double delta : {0.01, 0.05, 0.2, 0.5, 0.99}) {
        const double cur = chernoff_bound(2, 50, delta).c_bar;
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("confidence radius shrinks strictly with more samples", "[bounds]") {
    double prev = chernoff_bound(0, 10, 0.01).c_bar;
    for (std::size_t m : {20, 50, 100, 1000, 10000}) {
        const double cur = chernoff_bound(0, m, 0.01).c_bar;
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("required_samples matches the closed-form inverse", "[bounds]") {
    // ceil(ln(100) / (2 * 0.01)) = ceil(230.2585...) = 231.
    CHECK(required_samples(0.1, 0.01) == 231);
    // delta = 1/e gives ln(1/delta) = 1, so m = ceil(1 / (2 * 0.25)) = 2; the
    // boundary holds exactly because log(1/exp(-1.0)) evaluates to 1.0.
    CHECK(required_samples(0.5, std::exp(-1.0)) == 2);
    // A loose target needs only a single sample once the radius fits.
    CHECK(required_samples(1.0, 0.5) == 1);
}

TEST_CASE("required_samples is the exact threshold", "[bounds]") {
    std::mt19937_64 gen(20250819);
    std::uniform_real_distribution<double> target_dist(0.02, 0.8);
    std::uniform_real_distribution<double> delta_dist(0.001, 0.8);
    for (int trial = 0; trial < 200; ++trial) {
        const double target = target_dist(gen);
        const double delta = delta_dist(gen);
        const std::size_t m = required_samples(target, delta);
        CHECK(chernoff_bound(0, m, delta).c_bar <= target);
        if (m > 1) CHECK(chernoff_bound(0, m - 1, delta).c_bar > target);
    }
}

TEST_CASE("required_samples rejects out-of-domain parameters", "[bounds]") {
    CHECK_THROWS_AS(required_samples(0.0, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(required_samples(-0.5, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(required_samples(0.1, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(required_samples(0.1, 1.0), std::invalid_argument);
}

TEST_CASE("bound report serializes all four fields", "[bounds]") {
    const auto j = lyocert::bound_to_json(chernoff_bound(3, 499, 0.01));
    CHECK(j["c_hat"] == 3);
    CHECK(j["m"] == 499);
    CHECK(j["delta"] == 0.01);
    CHECK(j["c_bar"].get<double>() > 0.0);
}
