#include <cmath>
#include <vector>

#include "diffaug/backbone.hpp"
#include "diffaug/errors.hpp"
#include "diffaug/random.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace diffaug;

namespace {

Tensor random_batch(int n, int size, uint64_t seed) {
    Rng rng(seed);
    Tensor x({n, 1, size, size});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
    return x;
}

// The output conv starts at zero (so the init-time prediction is zero);
// nudge it so internal differences can reach the output.
void unzero_output(ParameterStore& ps) {
    Tensor& w = ps.get_mutable("out.conv.w");
    for (int64_t i = 0; i < w.size(); ++i) w[i] = 0.05 * static_cast<double>(i % 7) - 0.1;
}

}  // namespace

TEST_CASE("backbone: sinusoidal embedding layout") {
    const int dim = 8;
    const Tensor e = sinusoidal_embedding(5, dim);
    REQUIRE(e.shape() == std::vector<int>{dim});
    for (int i = 0; i < dim / 2; ++i) {
        const double w = std::pow(10000.0, -2.0 * i / dim);
        CHECK(e[i] == doctest::Approx(std::sin(5.0 * w)).epsilon(1e-12));
        CHECK(e[i + dim / 2] == doctest::Approx(std::cos(5.0 * w)).epsilon(1e-12));
    }
    const Tensor zero = sinusoidal_embedding(0, dim);
    for (int i = 0; i < dim / 2; ++i) {
        CHECK(zero[i] == 0.0);
        CHECK(zero[i + dim / 2] == 1.0);
    }
}

TEST_CASE("backbone: config validation") {
    BackboneConfig bad = testutil::tiny_backbone();
    bad.base_channels = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = testutil::tiny_backbone();
    bad.channel_multipliers = {};
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = testutil::tiny_backbone();
    bad.norm_groups = 3;
    CHECK_THROWS_AS(bad.validate(), Error);

    const BackboneConfig ok = testutil::tiny_backbone();
    CHECK(ok.attention_at(4));
    CHECK_FALSE(ok.attention_at(8));
    BackboneConfig defaults;
    defaults.class_count = 5;
    CHECK(defaults.resolved_embedding_dim() == 256);
}

TEST_CASE("backbone: output matches input shape") {
    const DenoiserUNet unet(testutil::tiny_backbone(3, 8));
    ParameterStore ps;
    Rng rng(1);
    unet.init_params(ps, rng);
    ps.require_all_finite();
    CHECK(ps.total_parameters() > 0);

    const Tensor x = random_batch(2, 8, 2);
    const Tensor eps = unet.forward_eval(ps, x, {0, 9}, {0, 2}, 10);
    REQUIRE(eps.shape() == std::vector<int>{2, 1, 8, 8});
    // Zero-initialized output conv: the freshly built net predicts zero noise.
    for (int64_t i = 0; i < eps.size(); ++i) CHECK(eps[i] == 0.0);
}

TEST_CASE("backbone: evaluation is deterministic") {
    const DenoiserUNet unet(testutil::tiny_backbone(3, 8));
    ParameterStore ps;
    Rng rng(3);
    unet.init_params(ps, rng);
    unzero_output(ps);
    const Tensor x = random_batch(2, 8, 4);
    const Tensor a = unet.forward_eval(ps, x, {1, 5}, {0, 1}, 10);
    const Tensor b = unet.forward_eval(ps, x, {1, 5}, {0, 1}, 10);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("backbone: outputs depend on t and y; y=-1 is a distinct unconditional mode") {
    const DenoiserUNet unet(testutil::tiny_backbone(3, 8));
    ParameterStore ps;
    Rng rng(5);
    unet.init_params(ps, rng);
    unzero_output(ps);
    const Tensor x = random_batch(1, 8, 6);

    const Tensor base = unet.forward_eval(ps, x, {3}, {1}, 10);
    const Tensor other_t = unet.forward_eval(ps, x, {7}, {1}, 10);
    const Tensor other_y = unet.forward_eval(ps, x, {3}, {2}, 10);
    const Tensor uncond = unet.forward_eval(ps, x, {3}, {-1}, 10);

    double dt = 0, dy = 0, du = 0;
    for (int64_t i = 0; i < base.size(); ++i) {
        dt = std::max(dt, std::abs(base[i] - other_t[i]));
        dy = std::max(dy, std::abs(base[i] - other_y[i]));
        du = std::max(du, std::abs(base[i] - uncond[i]));
    }
    CHECK(dt > 1e-8);
    CHECK(dy > 1e-8);
    CHECK(du > 1e-8);

    const Tensor uncond2 = unet.forward_eval(ps, x, {3}, {-1}, 10);
    for (int64_t i = 0; i < uncond.size(); ++i) CHECK(uncond[i] == uncond2[i]);
}

TEST_CASE("backbone: per-sample independence in a batch") {
    const DenoiserUNet unet(testutil::tiny_backbone(3, 8));
    ParameterStore ps;
    Rng rng(7);
    unet.init_params(ps, rng);
    unzero_output(ps);

    const Tensor x2 = random_batch(2, 8, 8);
    Tensor x1({1, 1, 8, 8});
    for (int64_t i = 0; i < x1.size(); ++i) x1[i] = x2[i];

    const Tensor batched = unet.forward_eval(ps, x2, {2, 6}, {0, 1}, 10);
    const Tensor solo = unet.forward_eval(ps, x1, {2}, {0}, 10);
    for (int64_t i = 0; i < solo.size(); ++i)
        CHECK(batched[i] == doctest::Approx(solo[i]).epsilon(1e-12));
}

TEST_CASE("backbone: invalid timestep and class are rejected") {
    const DenoiserUNet unet(testutil::tiny_backbone(3, 8));
    ParameterStore ps;
    Rng rng(9);
    unet.init_params(ps, rng);
    const Tensor x = random_batch(1, 8, 10);
    CHECK_THROWS_AS(unet.forward_eval(ps, x, {10}, {0}, 10), Error);
    CHECK_THROWS_AS(unet.forward_eval(ps, x, {-1}, {0}, 10), Error);
    CHECK_THROWS_AS(unet.forward_eval(ps, x, {3}, {3}, 10), Error);
    CHECK_THROWS_AS(unet.forward_eval(ps, x, {3}, {0, 1}, 10), Error);
}

TEST_CASE("backbone: training graph reaches every parameter") {
    const DenoiserUNet unet(testutil::tiny_backbone(3, 8));
    ParameterStore ps;
    Rng rng(11);
    unet.init_params(ps, rng);

    ad::Graph g(true);
    Rng drop(1);
    const Tensor x = random_batch(2, 8, 12);
    ad::Ref eps = unet.forward(g, ps, g.leaf(x), {0, 5}, {0, -1}, 10, drop);
    Tensor target(g.val(eps).shape());
    g.backward(ad::mse_loss(g, eps, target));

    size_t with_grad = 0;
    for (const auto& [name, grad] : g.param_grads()) {
        (void)name;
        REQUIRE(grad != nullptr);
        ++with_grad;
    }
    // Every built parameter participates except the class embedding when only
    // unconditional rows are used; here row 0 is used, so all participate.
    CHECK(with_grad == ps.names().size());
}
