#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedleak/attack.hpp"
#include "support/testutil.hpp"

using namespace fedleak;
using namespace fedleak::attack;

namespace {

struct DeskRun {
    ingest::Dataset data;
    std::vector<ingest::ClientShard> shards;
    FederationPlan plan;
    model::ModelState global;
    fl::ModelUpdate update;
};

// One client, one recorded local epoch against a seeded model.
DeskRun desk_run(int n_train, int batch_size, double lr, std::uint64_t seed, int size = 8) {
    DeskRun r;
    r.data = ingest::make_synthetic_dataset(
        {.count = std::max(2 * n_train, 8), .classes = 2, .size = size, .channels = 1, .seed = seed});
    r.plan.seed = seed_mix(seed, 1);
    ClientConfig c;
    c.id = "c";
    c.batch_size = batch_size;
    c.n_train = n_train;
    r.plan.clients = {c};
    r.shards = ingest::partition(r.data, r.plan);
    auto arch = model::make_architecture("cnn2", 1, size, size, 2, {}, {4, 8});
    r.global = model::init_model(arch, seed_mix(seed, 2));
    r.update = fl::local_train(r.global, r.shards[0], r.plan.clients[0], 0, lr, r.plan.seed);
    return r;
}

// Ground truth in reconstruction order: image i of the shard is row i.
Tensor truth_images(const DeskRun& r) {
    const auto& train = r.shards[0].train;
    const auto& first = train.samples[0].image;
    Tensor x(Shape{static_cast<int>(train.size()), first.dim(0), first.dim(1), first.dim(2)});
    for (std::size_t i = 0; i < train.size(); ++i)
        std::copy(train.samples[i].image.data(), train.samples[i].image.data() + first.numel(),
                  x.data() + static_cast<std::int64_t>(i) * first.numel());
    return x;
}

// Label logits whose softmax is exactly one-hot in fp64.
Tensor truth_labels(const DeskRun& r) {
    const auto& train = r.shards[0].train;
    Tensor y(Shape{static_cast<int>(train.size()), 2}, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) y.at2(static_cast<int>(i), train.samples[i].label) = 1000.0;
    return y;
}

}  // namespace

TEST_CASE("grad_match_loss trivial and oracle cases") {
    TensorMap a{{"x", Tensor{Shape{2}, {1.0, 2.0}}}, {"y", Tensor{Shape{1}, {3.0}}}};
    CHECK(grad_match_loss(a, a) == 0.0);

    TensorMap sim{{"l0", Tensor{Shape{1}, {3.0}}}, {"l1", Tensor{Shape{2}, {0.0, 4.0}}}};
    TensorMap tgt{{"l0", Tensor{Shape{1}, {0.0}}}, {"l1", Tensor{Shape{2}, {0.0, 0.0}}}};
    CHECK(grad_match_loss(sim, tgt) == doctest::Approx(7.0).epsilon(1e-12));

    Rng rng(3);
    TensorMap s2{{"a", testutil::random_tensor(Shape{4}, rng)}, {"b", testutil::random_tensor(Shape{3}, rng)}};
    TensorMap t2{{"a", testutil::random_tensor(Shape{4}, rng)}, {"b", testutil::random_tensor(Shape{3}, rng)}};
    double want = 0.0;
    for (const auto& [name, s] : s2) {
        double sq = 0.0;
        for (std::int64_t i = 0; i < s.numel(); ++i) {
            const double d = s[i] - t2.at(name)[i];
            sq += d * d;
        }
        want += std::sqrt(sq);
    }
    CHECK(grad_match_loss(s2, t2) == doctest::Approx(want).epsilon(1e-12));

    TensorMap wrong{{"a", Tensor(Shape{4}, 0.0)}};
    CHECK_THROWS_AS(grad_match_loss(s2, wrong), std::invalid_argument);
}

TEST_CASE("bn_loss trivial and oracle cases") {
    model::NamedStats stats;
    stats.emplace("layer0", model::BNStats{Tensor(Shape{2}, 0.5), Tensor(Shape{2}, 1.5)});
    TensorMap buffers{{"layer0.running_mean", Tensor(Shape{2}, 0.5)}, {"layer0.running_var", Tensor(Shape{2}, 1.5)}};
    CHECK(bn_loss(stats, buffers) == 0.0);

    // One layer: mean difference of norm 1, variance difference of norm 2.
    model::NamedStats s2;
    s2.emplace("layer0", model::BNStats{Tensor{Shape{2}, {1.5, 0.5}}, Tensor{Shape{2}, {1.5, 3.5}}});
    CHECK(bn_loss(s2, buffers) == doctest::Approx(3.0).epsilon(1e-12));

    Rng rng(5);
    model::NamedStats s3;
    s3.emplace("layer0", model::BNStats{testutil::random_tensor(Shape{2}, rng), testutil::random_tensor(Shape{2}, rng, 0.1, 2.0)});
    double want = 0.0;
    {
        const auto& st = s3.at("layer0");
        double m = 0.0, v = 0.0;
        for (int i = 0; i < 2; ++i) {
            m += (st.mean[i] - 0.5) * (st.mean[i] - 0.5);
            v += (st.var[i] - 1.5) * (st.var[i] - 1.5);
        }
        want = std::sqrt(m) + std::sqrt(v);
    }
    CHECK(bn_loss(s3, buffers) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("prior_loss trivial cases and the checkerboard stencil") {
    CHECK(prior_loss(Tensor(Shape{1, 4, 4}, 0.7), 1.0, 0.0) == 0.0);  // constant image, pure TV
    CHECK(prior_loss(Tensor(Shape{1, 4, 4}, 0.0), 1.0, 1.0) == 0.0);  // zero image

    Tensor checker(Shape{1, 2, 2});
    checker.at3(0, 0, 0) = 0.0;
    checker.at3(0, 0, 1) = 1.0;
    checker.at3(0, 1, 0) = 1.0;
    checker.at3(0, 1, 1) = 0.0;
    CHECK(total_variation(checker) == doctest::Approx(4.0).epsilon(1e-12));

    Tensor two_channel(Shape{2, 2, 2});
    for (int c = 0; c < 2; ++c) {
        two_channel.at3(c, 0, 0) = 0.0;
        two_channel.at3(c, 0, 1) = 1.0;
        two_channel.at3(c, 1, 0) = 1.0;
        two_channel.at3(c, 1, 1) = 0.0;
    }
    CHECK(total_variation(two_channel) == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("init_attack_network copies the right states") {
    auto r = desk_run(4, 2, 0.1, 71);
    auto round0 = model::init_model(r.global.arch, 999);
    AttackConfig cfg;

    auto p = init_attack_network(r.global, round0, r.update, cfg);
    CHECK(p.net_params == r.global.params);
    CHECK(p.target_buffers == r.update.buffers);
    CHECK(p.drift_start == r.global.buffers);
    CHECK(p.m_images == 4);
    CHECK(p.batches == fl::epoch_batches(4, 2, r.update.batch_seed));

    cfg.use_global_ckpt = false;
    auto p0 = init_attack_network(r.global, round0, r.update, cfg);
    CHECK(p0.net_params == round0.params);

    cfg.use_global_ckpt = true;
    cfg.known_batch_order = false;
    cfg.seed = 17;
    auto pw = init_attack_network(r.global, round0, r.update, cfg);
    CHECK(pw.batches != p.batches);
}

TEST_CASE("fixed point: ground truth replay zeroes the match terms") {
    for (const auto& [n, b] : std::vector<std::pair<int, int>>{{1, 1}, {4, 2}, {6, 4}}) {
        auto r = desk_run(n, b, 0.1, 100 + static_cast<std::uint64_t>(n));
        auto p = init_attack_network(r.global, r.global, r.update, AttackConfig{});
        AttackConfig cfg;  // prior weights irrelevant here; read raw components
        auto breakdown = attack_loss(p, cfg, truth_images(r), truth_labels(r), cfg.w_bn);
        CHECK(breakdown.grad < 1e-6);
        CHECK(breakdown.bn < 1e-6);
    }
}

TEST_CASE("fixed point holds for the single-step mode on a one-step client") {
    auto r = desk_run(1, 1, 0.1, 200);
    AttackConfig cfg;
    cfg.match_mode = MatchMode::SingleStep;
    auto p = init_attack_network(r.global, r.global, r.update, cfg);
    auto breakdown = attack_loss(p, cfg, truth_images(r), truth_labels(r), cfg.w_bn);
    CHECK(breakdown.grad < 1e-6);
    CHECK(breakdown.bn < 1e-6);
}

TEST_CASE("zero client learning rate still drifts the statistics") {
    auto r = desk_run(4, 2, 0.0, 300);
    for (const auto& [name, d] : r.update.delta)
        for (std::int64_t i = 0; i < d.numel(); ++i) CHECK(d[i] == 0.0);
    AttackConfig cfg;
    auto p = init_attack_network(r.global, r.global, r.update, cfg);
    auto at_truth = attack_loss(p, cfg, truth_images(r), truth_labels(r), cfg.w_bn);
    CHECK(at_truth.grad < 1e-9);
    CHECK(at_truth.bn < 1e-9);
    // The intercepted buffers moved even though the weights did not.
    bool moved = false;
    for (const auto& [name, b] : r.update.buffers)
        if (!(b == r.global.buffers.at(name))) moved = true;
    CHECK(moved);
}

TEST_CASE("away from the truth the match terms are positive") {
    auto r = desk_run(2, 1, 0.1, 400);
    AttackConfig cfg;
    auto p = init_attack_network(r.global, r.global, r.update, cfg);
    Rng rng(9);
    Tensor x = testutil::random_tensor(Shape{2, 1, 8, 8}, rng, 0.0, 1.0);
    Tensor y = testutil::random_tensor(Shape{2, 2}, rng, 0.0, 1.0);
    auto b = attack_loss(p, cfg, x, y, cfg.w_bn);
    CHECK(b.grad > 1e-4);
    CHECK(b.bn > 1e-4);
}

TEST_CASE("attack loss input gradients match finite differences") {
    auto r = desk_run(1, 1, 0.1, 500);
    AttackConfig cfg;
    cfg.w_tv = 1e-3;
    cfg.w_l2 = 1e-4;
    auto p = init_attack_network(r.global, r.global, r.update, cfg);

    Rng rng(11);
    Tensor x = testutil::random_tensor(Shape{1, 1, 8, 8}, rng, 0.05, 0.95);
    Tensor y = testutil::random_tensor(Shape{1, 2}, rng, 0.0, 1.0);
    auto [gx, gy] = attack_loss_gradients(p, cfg, x, y, cfg.w_bn);

    auto f_x = [&](const Tensor& t) { return attack_loss(p, cfg, t, y, cfg.w_bn).total; };
    auto f_y = [&](const Tensor& t) { return attack_loss(p, cfg, x, t, cfg.w_bn).total; };
    auto fd_x = testutil::finite_diff(f_x, x, 1e-6);
    auto fd_y = testutil::finite_diff(f_y, y, 1e-6);
    CHECK(testutil::max_rel_err(gx.vec(), fd_x, 1e-5) < 1e-3);
    CHECK(testutil::max_rel_err(gy.vec(), fd_y, 1e-5) < 1e-3);
}

TEST_CASE("invert is deterministic, clamped, and tracks its trajectory") {
    auto r = desk_run(1, 1, 0.1, 600);
    AttackConfig cfg;
    cfg.iterations = 30;
    cfg.learning_rate = 0.05;
    cfg.seed = 3;
    cfg.use_prior = false;
    auto p = init_attack_network(r.global, r.global, r.update, cfg);

    auto a = invert(p, std::nullopt, cfg);
    auto b = invert(p, std::nullopt, cfg);
    CHECK(a.images == b.images);
    CHECK(a.label_logits == b.label_logits);
    CHECK(a.best_loss == b.best_loss);
    CHECK(!a.diverged);
    CHECK(a.trajectory.size() == 30);
    for (std::int64_t i = 0; i < a.images.numel(); ++i) {
        CHECK(a.images[i] >= 0.0);
        CHECK(a.images[i] <= 1.0);
    }
    // Breakdown invariant: total equals the weighted component sum.
    for (const auto& t : a.trajectory) {
        const double want = cfg.w_grad * t.grad + a.effective_w_bn * t.bn + cfg.w_tv * t.tv + cfg.w_l2 * t.l2;
        CHECK(t.total == doctest::Approx(want).epsilon(1e-9));
    }
    // The optimizer makes progress on the total.
    CHECK(a.best_loss < a.trajectory.front().total);
}

TEST_CASE("prior initialization starts near the prior") {
    auto r = desk_run(1, 1, 0.1, 700);
    ingest::PriorImage prior{Tensor(Shape{1, 8, 8}, 0.5), "flat"};
    AttackConfig cfg;
    cfg.iterations = 1;
    cfg.init_jitter = 0.0;
    auto p = init_attack_network(r.global, r.global, r.update, cfg);
    auto res = invert(p, prior, cfg);
    // One iteration: best snapshot is the (jitter-free) prior itself.
    for (std::int64_t i = 0; i < res.images.numel(); ++i) CHECK(res.images[i] == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("grayscale constraint ties the channels together") {
    // Color model, grayscale reconstruction: all channels stay identical.
    ingest::Dataset ds = ingest::make_synthetic_dataset({.count = 8, .classes = 2, .size = 8, .channels = 3, .seed = 800});
    FederationPlan plan;
    plan.seed = 801;
    ClientConfig c;
    c.id = "c";
    c.batch_size = 1;
    c.n_train = 1;
    plan.clients = {c};
    auto shards = ingest::partition(ds, plan);
    auto arch = model::make_architecture("cnn2", 3, 8, 8, 2, {}, {4, 8});
    auto global = model::init_model(arch, 802);
    auto update = fl::local_train(global, shards[0], plan.clients[0], 0, 0.1, plan.seed);

    AttackConfig cfg;
    cfg.iterations = 10;
    cfg.grayscale = true;
    cfg.use_prior = false;
    auto p = init_attack_network(global, global, update, cfg);
    auto res = invert(p, std::nullopt, cfg);
    REQUIRE(res.images.shape() == Shape{1, 3, 8, 8});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            CHECK(res.images.at4(0, 0, y, x) == res.images.at4(0, 1, y, x));
            CHECK(res.images.at4(0, 0, y, x) == res.images.at4(0, 2, y, x));
        }
}
