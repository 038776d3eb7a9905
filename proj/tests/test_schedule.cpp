#include <cmath>
#include <vector>

#include "diffaug/errors.hpp"
#include "diffaug/random.hpp"
#include "diffaug/schedule.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace diffaug;

namespace {

std::vector<double> cumprod_oracle(const std::vector<double>& betas) {
    std::vector<double> out(betas.size());
    double p = 1.0;
    for (size_t t = 0; t < betas.size(); ++t) {
        p *= 1.0 - betas[t];
        out[t] = p;
    }
    return out;
}

}  // namespace

TEST_CASE("schedule: single-element linear") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1, 1e-4, 0.02);
    REQUIRE(s.T == 1);
    CHECK(s.betas[0] == 1e-4);
    CHECK(s.alpha_bars[0] == doctest::Approx(0.9999).epsilon(1e-12));
    CHECK(s.posterior_variances[0] == 0.0);
}

TEST_CASE("schedule: linear interpolation endpoints are exact") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
    CHECK(s.betas.front() == 1e-4);
    CHECK(s.betas.back() == 0.02);
}

TEST_CASE("schedule: alpha_bars match the plain cumulative-product oracle") {
    for (const ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
        for (const int T : {1, 10, 200, 1000}) {
            const NoiseSchedule s = make_schedule(kind, T);
            const std::vector<double> oracle = cumprod_oracle(s.betas);
            for (int t = 0; t < T; ++t)
                CHECK(testutil::rel_err(s.alpha_bars[static_cast<size_t>(t)],
                                        oracle[static_cast<size_t>(t)]) < 1e-10);
        }
    }
}

TEST_CASE("schedule: alpha_bars and SNR strictly decreasing") {
    for (const ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
        for (const int T : {1, 10, 200, 1000}) {
            const NoiseSchedule s = make_schedule(kind, T);
            for (int t = 1; t < T; ++t) {
                const double a0 = s.alpha_bars[static_cast<size_t>(t) - 1];
                const double a1 = s.alpha_bars[static_cast<size_t>(t)];
                CHECK(a1 < a0);
                CHECK(a1 / (1.0 - a1) < a0 / (1.0 - a0));
            }
        }
    }
}

TEST_CASE("schedule: invariants of the derived arrays") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 200);
    CHECK(s.alpha_bars[0] == s.alphas[0]);
    CHECK(s.posterior_variances[0] == 0.0);
    for (int t = 0; t < s.T; ++t) {
        CHECK(s.betas[static_cast<size_t>(t)] > 0.0);
        CHECK(s.betas[static_cast<size_t>(t)] < 1.0);
    }
    for (int t = 1; t < s.T; ++t) {
        const double expect = s.betas[static_cast<size_t>(t)] *
                              (1.0 - s.alpha_bar_prev(t)) / (1.0 - s.alpha_bars[static_cast<size_t>(t)]);
        CHECK(testutil::rel_err(s.posterior_variances[static_cast<size_t>(t)], expect) < 1e-12);
    }
}

TEST_CASE("schedule: construction errors") {
    CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 0), Error);
    CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 10, 0.0, 0.02), Error);
    CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 10, 0.03, 0.02), Error);
    CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 10, 1e-4, 1.0), Error);
    try {
        make_schedule(ScheduleKind::linear, -3);
        FAIL("expected NonPositiveT");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonPositiveT);
    }
}

TEST_CASE("q_sample: degenerate closed forms") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 200);
    Rng rng(11);
    const Tensor x0 = rng.gaussian_tensor({1, 4, 4});
    const Tensor zero = Tensor::zeros({1, 4, 4});

    const Tensor xt = q_sample(x0, 57, zero, s);
    const double a = std::sqrt(s.alpha_bars[57]);
    for (int64_t i = 0; i < x0.size(); ++i) CHECK(xt[i] == a * x0[i]);

    const Tensor eps = rng.gaussian_tensor({1, 4, 4});
    const Tensor xe = q_sample(zero, 57, eps, s);
    const double b = std::sqrt(1.0 - s.alpha_bars[57]);
    for (int64_t i = 0; i < eps.size(); ++i) CHECK(xe[i] == b * eps[i]);
}

TEST_CASE("q_sample: ones at t = T-1 against the oracle") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 200);
    const Tensor ones = Tensor::full({1, 2, 2}, 1.0);
    const Tensor xt = q_sample(ones, 199, ones, s);
    const double abar = cumprod_oracle(s.betas).back();
    const double expect = std::sqrt(abar) + std::sqrt(1.0 - abar);
    for (int64_t i = 0; i < xt.size(); ++i) CHECK(testutil::rel_err(xt[i], expect) < 1e-10);
}

TEST_CASE("q_sample: errors") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 10);
    const Tensor x0 = Tensor::zeros({1, 2, 2});
    CHECK_THROWS_AS(q_sample(x0, 10, x0, s), Error);
    CHECK_THROWS_AS(q_sample(x0, -1, x0, s), Error);
    CHECK_THROWS_AS(q_sample(x0, 3, Tensor::zeros({1, 2, 3}), s), Error);
}

TEST_CASE("posterior_params: zero prediction and t = 0 convention") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 200);
    Rng rng(5);
    const Tensor x_t = rng.gaussian_tensor({1, 3, 3});
    const Tensor zero = Tensor::zeros({1, 3, 3});

    const PosteriorParams p = posterior_params(x_t, zero, 42, s);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alphas[42]);
    for (int64_t i = 0; i < x_t.size(); ++i)
        CHECK(testutil::rel_err(p.mean[i], x_t[i] * inv_sqrt_alpha) < 1e-14);
    CHECK(p.variance == s.posterior_variances[42]);

    CHECK(posterior_params(x_t, zero, 0, s).variance == 0.0);
    CHECK(posterior_params(x_t, zero, 42, s, VarianceKind::beta).variance == s.betas[42]);
}

TEST_CASE("posterior_params: the two closed forms of the mean agree") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 200);
    Rng rng(7);
    const Tensor x0 = rng.gaussian_tensor({1, 4, 4});
    const Tensor eps = rng.gaussian_tensor({1, 4, 4});
    for (const int t : {1, s.T / 2, s.T - 1}) {
        const Tensor x_t = q_sample(x0, t, eps, s);
        const PosteriorParams p = posterior_params(x_t, eps, t, s);
        const double abar = s.alpha_bars[static_cast<size_t>(t)];
        const double abar_prev = s.alpha_bar_prev(t);
        const double beta = s.betas[static_cast<size_t>(t)];
        const double alpha = s.alphas[static_cast<size_t>(t)];
        const double c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
        const double ct = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
        for (int64_t i = 0; i < x0.size(); ++i)
            CHECK(std::abs(p.mean[i] - (c0 * x0[i] + ct * x_t[i])) < 1e-8);
    }
}

TEST_CASE("predict_x0_from_eps: inverse, degenerate, and clamp") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 200);
    Rng rng(9);
    const Tensor x0 = rng.gaussian_tensor({1, 4, 4});
    const Tensor eps = rng.gaussian_tensor({1, 4, 4});
    for (const int t : {0, 57, 199}) {
        const Tensor back = predict_x0_from_eps(q_sample(x0, t, eps, s), eps, t, s);
        for (int64_t i = 0; i < x0.size(); ++i) CHECK(std::abs(back[i] - x0[i]) < 1e-9);
    }

    const Tensor x_t = rng.gaussian_tensor({1, 2, 2});
    const Tensor zero = Tensor::zeros({1, 2, 2});
    const Tensor direct = predict_x0_from_eps(x_t, zero, 31, s);
    const double inv = 1.0 / std::sqrt(s.alpha_bars[31]);
    for (int64_t i = 0; i < x_t.size(); ++i) CHECK(testutil::rel_err(direct[i], x_t[i] * inv) < 1e-14);

    Tensor big = Tensor::full({1, 1, 1}, 1.7 * std::sqrt(s.alpha_bars[10]));
    CHECK(predict_x0_from_eps(big, Tensor::zeros({1, 1, 1}), 10, s, /*clamp=*/true)[0] == 1.0);
}

TEST_CASE("schedule: purity and respaced rebuild consistency") {
    const NoiseSchedule a = make_schedule(ScheduleKind::cosine, 50);
    const NoiseSchedule b = make_schedule(ScheduleKind::cosine, 50);
    CHECK(a.betas == b.betas);
    CHECK(a.alpha_bars == b.alpha_bars);

    const NoiseSchedule rebuilt = schedule_from_betas(a.kind, a.betas, a.beta_start, a.beta_end);
    CHECK(rebuilt.alpha_bars == a.alpha_bars);
    CHECK(rebuilt.posterior_variances == a.posterior_variances);
}
