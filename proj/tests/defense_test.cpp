#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedleak/defense.hpp"
#include "support/testutil.hpp"

using namespace fedleak;
using namespace fedleak::defense;

TEST_CASE("sigma0 = 0 is the identity") {
    Rng rng(1);
    TensorMap delta{{"a", testutil::random_tensor(Shape{5}, rng)}, {"b", testutil::random_tensor(Shape{3}, rng)}};
    TensorMap buffers{{"m", testutil::random_tensor(Shape{2}, rng)}};
    auto res = percentile_gaussian(delta, buffers, 0.0, 95.0, rng);
    CHECK(res.delta == delta);
    CHECK(res.buffers == buffers);
    CHECK(res.sigma == 0.0);
}

TEST_CASE("nearest-rank percentile on 1..100") {
    TensorMap delta;
    Tensor t(Shape{100});
    for (int i = 0; i < 100; ++i) t[i] = i + 1;
    delta.emplace("w", t);
    CHECK(abs_percentile(delta, 95.0) == 95.0);
    CHECK(abs_percentile(delta, 100.0) == 100.0);
    CHECK(abs_percentile(delta, 1.0) == 1.0);
    // Sign is irrelevant: the percentile is over absolute values.
    for (int i = 0; i < 100; ++i) delta.at("w")[i] = -(i + 1);
    CHECK(abs_percentile(delta, 95.0) == 95.0);

    Rng rng(2);
    TensorMap d2{{"w", Tensor{Shape{4}, {1.0, 2.0, 3.0, 4.0}}}};
    auto res = percentile_gaussian(d2, {}, 10.0, 95.0, rng);
    CHECK(res.sigma == 40.0);  // ceil(0.95*4) = 4th smallest = 4, times 10
}

TEST_CASE("noise has the calibrated standard deviation") {
    Rng rng(3);
    TensorMap delta{{"w", Tensor(Shape{200000}, 1.0)}};  // percentile = 1, sigma = sigma0
    const double sigma0 = 10.0;
    auto res = percentile_gaussian(delta, {}, sigma0, 95.0, rng);
    CHECK(res.sigma == sigma0);
    double mean = 0.0, sq = 0.0;
    const Tensor& noised = res.delta.at("w");
    for (std::int64_t i = 0; i < noised.numel(); ++i) {
        const double n = noised[i] - 1.0;
        mean += n;
        sq += n * n;
    }
    mean /= static_cast<double>(noised.numel());
    const double std = std::sqrt(sq / static_cast<double>(noised.numel()) - mean * mean);
    CHECK(std == doctest::Approx(sigma0).epsilon(0.05));
}

TEST_CASE("all-zero update is returned unchanged") {
    Rng rng(4);
    TensorMap delta{{"w", Tensor(Shape{8}, 0.0)}};
    auto res = percentile_gaussian(delta, {}, 5.0, 95.0, rng);
    CHECK(res.degenerate);
    CHECK(res.delta == delta);
}

TEST_CASE("buffers stay clean unless asked") {
    Rng rng(5);
    TensorMap delta{{"w", Tensor(Shape{64}, 0.5)}};
    TensorMap buffers{{"m", Tensor(Shape{4}, 2.0)}};
    auto clean = percentile_gaussian(delta, buffers, 3.0, 95.0, rng);
    CHECK(clean.buffers == buffers);
    auto noised = percentile_gaussian(delta, buffers, 3.0, 95.0, rng, /*noise_bn_buffers=*/true);
    CHECK(!(noised.buffers == buffers));
}

TEST_CASE("mechanisms are deterministic given the seed") {
    TensorMap delta{{"w", Tensor(Shape{32}, 0.25)}};
    Rng r1(6), r2(6);
    auto a = percentile_gaussian(delta, {}, 2.0, 95.0, r1);
    auto b = percentile_gaussian(delta, {}, 2.0, 95.0, r2);
    CHECK(a.delta == b.delta);
}

TEST_CASE("noised update is unbiased") {
    // Mean over many seeds converges to the clean update; 3-sigma bound on
    // the mean of all noise draws.
    TensorMap delta{{"w", Tensor(Shape{64}, 0.5)}};
    const double sigma = 0.5 * 2.0;  // percentile 0.5 * sigma0 2
    const int seeds = 400;
    double acc = 0.0;
    std::int64_t count = 0;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(static_cast<std::uint64_t>(1000 + s));
        auto res = percentile_gaussian(delta, {}, 2.0, 95.0, rng);
        for (std::int64_t i = 0; i < res.delta.at("w").numel(); ++i) {
            acc += res.delta.at("w")[i] - 0.5;
            ++count;
        }
    }
    const double bound = 3.0 * sigma / std::sqrt(static_cast<double>(count));
    CHECK(std::abs(acc / static_cast<double>(count)) < bound);
}

TEST_CASE("dp-sgd without clipping or noise is the plain mean") {
    Rng rng(7);
    std::vector<TensorMap> grads;
    for (int i = 0; i < 3; ++i) grads.push_back({{"w", testutil::random_tensor(Shape{4}, rng, -0.1, 0.1)}});
    Rng noise(8);
    auto mean = dp_sgd_step(grads, 100.0, 0.0, noise);  // norms are far below the bound
    for (std::int64_t i = 0; i < 4; ++i) {
        const double want = (grads[0].at("w")[i] + grads[1].at("w")[i] + grads[2].at("w")[i]) / 3.0;
        CHECK(mean.at("w")[i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("dp-sgd clips a single oversized gradient to the bound") {
    const double clip = 0.7;
    TensorMap g{{"w", Tensor{Shape{2}, {2 * clip * 0.6, 2 * clip * 0.8}}}};  // norm = 2*clip
    Rng noise(9);
    auto out = dp_sgd_step({g}, clip, 0.0, noise);
    CHECK(global_l2_norm(out) == doctest::Approx(clip).epsilon(1e-12));
}

TEST_CASE("dp-sgd matches a scripted clip-mean-noise oracle") {
    Rng rng(10);
    std::vector<TensorMap> grads;
    for (int i = 0; i < 3; ++i)
        grads.push_back({{"a", testutil::random_tensor(Shape{3}, rng, -2.0, 2.0)},
                         {"b", testutil::random_tensor(Shape{2}, rng, -2.0, 2.0)}});
    const double clip = 1.0, mult = 0.5;
    Rng noise(11);
    auto got = dp_sgd_step(grads, clip, mult, noise);

    // Scripted oracle: same arithmetic written out longhand, same noise stream.
    Rng oracle_noise(11);
    std::map<std::string, Tensor> sum{{"a", Tensor(Shape{3}, 0.0)}, {"b", Tensor(Shape{2}, 0.0)}};
    for (const auto& g : grads) {
        double norm2 = 0.0;
        for (const auto& [name, t] : g)
            for (std::int64_t i = 0; i < t.numel(); ++i) norm2 += t[i] * t[i];
        const double scale = std::min(1.0, clip / std::sqrt(norm2));
        for (const auto& [name, t] : g)
            for (std::int64_t i = 0; i < t.numel(); ++i) sum.at(name)[i] += t[i] * scale;
    }
    for (auto& [name, t] : sum)
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = (t[i] + oracle_noise.normal(0.0, mult * clip)) / 3.0;

    for (const auto& [name, t] : got)
        for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == doctest::Approx(sum.at(name)[i]).epsilon(1e-12));
}

TEST_CASE("post-clip per-example norms never exceed the bound") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        TensorMap g{{"w", testutil::random_tensor(Shape{6}, rng, -3.0, 3.0)}};
        const double clip = rng.uniform(0.1, 2.0);
        const double norm = global_l2_norm(g);
        const double scale = norm > clip ? clip / norm : 1.0;
        TensorMap clipped = g;
        for (auto& [name, t] : clipped)
            for (std::int64_t i = 0; i < t.numel(); ++i) t[i] *= scale;
        CHECK(global_l2_norm(clipped) <= clip + 1e-9);
    }
}

TEST_CASE("dp-sgd rejects a non-positive clip bound") {
    Rng rng(13);
    std::vector<TensorMap> grads{{{"w", Tensor(Shape{2}, 0.1)}}};
    CHECK_THROWS_AS(dp_sgd_step(grads, 0.0, 0.0, rng), ConfigError);
}
