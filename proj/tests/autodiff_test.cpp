#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedleak/autodiff.hpp"
#include "fedleak/rng.hpp"
#include "support/testutil.hpp"

using namespace fedleak;
namespace ad = fedleak::ad;

TEST_CASE("elementwise and reduction values") {
    ad::Graph g;
    auto a = g.constant(Tensor{Shape{3}, {1.0, 2.0, 3.0}});
    auto b = g.constant(Tensor{Shape{3}, {4.0, 0.5, -1.0}});
    CHECK(g.val(g.add(a, b)).vec() == std::vector<double>{5.0, 2.5, 2.0});
    CHECK(g.val(g.mul(a, b)).vec() == std::vector<double>{4.0, 1.0, -3.0});
    CHECK(g.scalar_val(g.reduce_sum(a)) == 6.0);
    CHECK(g.scalar_val(ad::mean(g, a)) == 2.0);
    CHECK(g.scalar_val(ad::l2_norm(g, g.constant(Tensor{Shape{2}, {3.0, 4.0}}))) == doctest::Approx(5.0));
}

TEST_CASE("matmul matches hand computation") {
    ad::Graph g;
    auto a = g.constant(Tensor{Shape{2, 3}, {1, 2, 3, 4, 5, 6}});
    auto b = g.constant(Tensor{Shape{3, 2}, {7, 8, 9, 10, 11, 12}});
    auto c = g.matmul(a, b);
    CHECK(g.val(c).vec() == std::vector<double>{58, 64, 139, 154});
    CHECK(g.val(g.transpose(c)).vec() == std::vector<double>{58, 139, 64, 154});
}

TEST_CASE("gather and scatter are adjoint") {
    // <gather(x), y> == <x, scatter(y)> for random maps, the property the
    // backward pass relies on.
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int in_n = 5 + static_cast<int>(rng.uniform_int(10));
        const int out_n = 5 + static_cast<int>(rng.uniform_int(10));
        auto map = std::make_shared<std::vector<int>>();
        for (int i = 0; i < out_n; ++i)
            map->push_back(rng.uniform() < 0.2 ? -1 : static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(in_n))));
        ad::Graph g;
        Tensor x = testutil::random_tensor(Shape{in_n}, rng);
        Tensor y = testutil::random_tensor(Shape{out_n}, rng);
        auto gx = g.gather(g.constant(x), map, Shape{out_n});
        auto sy = g.scatter(g.constant(y), map, Shape{in_n});
        double lhs = 0.0, rhs = 0.0;
        for (int i = 0; i < out_n; ++i) lhs += g.val(gx)[i] * y[i];
        for (int i = 0; i < in_n; ++i) rhs += g.val(sy)[i] * x[i];
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
}

namespace {

// A lumpy scalar function exercising most of the op set.
double lumpy(const Tensor& x) {
    ad::Graph g;
    auto v = g.constant(x);
    auto a = g.mul(g.add_scalar(g.square(v), 0.5), g.exp(g.scale(v, 0.3)));
    auto b = g.div(a, g.add_scalar(g.square(v), 1.0));
    auto c = g.log(g.add_scalar(g.square(b), 1.0));
    return g.scalar_val(g.reduce_sum(c));
}

ad::Var lumpy_var(ad::Graph& g, ad::Var v) {
    auto a = g.mul(g.add_scalar(g.square(v), 0.5), g.exp(g.scale(v, 0.3)));
    auto b = g.div(a, g.add_scalar(g.square(v), 1.0));
    return g.reduce_sum(g.log(g.add_scalar(g.square(b), 1.0)));
}

}  // namespace

TEST_CASE("first-order gradients match finite differences") {
    Rng rng(7);
    Tensor x = testutil::random_tensor(Shape{6}, rng, -1.5, 1.5);
    ad::Graph g;
    auto v = g.constant(x);
    auto out = lumpy_var(g, v);
    auto grads = g.gradients(out, {v});
    auto fd = testutil::finite_diff(lumpy, x);
    CHECK(testutil::max_rel_err(g.val(grads[0]).vec(), fd) < 1e-6);
}

TEST_CASE("second-order gradients match finite differences") {
    // d/dx of ||dL/dx||^2 checked against finite differences of the
    // first-order gradient computed analytically.
    Rng rng(13);
    Tensor x = testutil::random_tensor(Shape{5}, rng, -1.2, 1.2);

    auto grad_normsq = [](const Tensor& pt) {
        ad::Graph g;
        auto v = g.constant(pt);
        auto out = lumpy_var(g, v);
        auto grads = g.gradients(out, {v});
        return g.scalar_val(g.reduce_sum(g.square(grads[0])));
    };

    ad::Graph g;
    auto v = g.constant(x);
    auto out = lumpy_var(g, v);
    auto grads = g.gradients(out, {v});
    auto normsq = g.reduce_sum(g.square(grads[0]));
    auto second = g.gradients(normsq, {v});

    auto fd = testutil::finite_diff(grad_normsq, x, 1e-5);
    CHECK(testutil::max_rel_err(g.val(second[0]).vec(), fd, 1e-6) < 1e-4);
}

TEST_CASE("conv, pooling, batch norm gradients vs finite differences") {
    Rng rng(29);
    const Shape xshape{2, 2, 6, 6};
    const Shape wshape{3, 2, 3, 3};
    Tensor x0 = testutil::random_tensor(xshape, rng);
    Tensor w0 = testutil::random_tensor(wshape, rng, -0.5, 0.5);
    Tensor gamma0 = testutil::random_tensor(Shape{3}, rng, 0.5, 1.5);
    Tensor beta0 = testutil::random_tensor(Shape{3}, rng, -0.2, 0.2);

    auto network = [&](ad::Graph& g, ad::Var x, ad::Var w, ad::Var gamma, ad::Var beta) {
        auto c = ad::conv2d(g, x, w, 1, 1);
        auto bn = ad::batch_norm_train(g, c, gamma, beta, 1e-5);
        auto r = ad::relu(g, bn.y);
        auto p = ad::max_pool2(g, r);
        return g.reduce_sum(g.square(p));
    };

    ad::Graph g;
    auto xv = g.constant(x0);
    auto wv = g.constant(w0);
    auto gv = g.constant(gamma0);
    auto bv = g.constant(beta0);
    auto out = network(g, xv, wv, gv, bv);
    auto grads = g.gradients(out, {xv, wv, gv, bv});

    auto eval_at = [&](const Tensor& x, const Tensor& w, const Tensor& gm, const Tensor& bt) {
        ad::Graph h;
        return h.scalar_val(network(h, h.constant(x), h.constant(w), h.constant(gm), h.constant(bt)));
    };
    auto fd_x = testutil::finite_diff([&](const Tensor& t) { return eval_at(t, w0, gamma0, beta0); }, x0, 1e-6);
    auto fd_w = testutil::finite_diff([&](const Tensor& t) { return eval_at(x0, t, gamma0, beta0); }, w0, 1e-6);
    auto fd_g = testutil::finite_diff([&](const Tensor& t) { return eval_at(x0, w0, t, beta0); }, gamma0, 1e-6);
    auto fd_b = testutil::finite_diff([&](const Tensor& t) { return eval_at(x0, w0, gamma0, t); }, beta0, 1e-6);

    CHECK(testutil::max_rel_err(g.val(grads[0]).vec(), fd_x, 1e-5) < 2e-4);
    CHECK(testutil::max_rel_err(g.val(grads[1]).vec(), fd_w, 1e-5) < 2e-4);
    CHECK(testutil::max_rel_err(g.val(grads[2]).vec(), fd_g, 1e-5) < 2e-4);
    CHECK(testutil::max_rel_err(g.val(grads[3]).vec(), fd_b, 1e-5) < 2e-4);
}

TEST_CASE("softmax cross entropy against one-hot targets") {
    ad::Graph g;
    auto z = g.constant(Tensor{Shape{2, 3}, {2.0, -1.0, 0.5, 0.0, 3.0, 1.0}});
    auto t = g.constant(Tensor{Shape{2, 3}, {1, 0, 0, 0, 1, 0}});
    auto loss = ad::soft_cross_entropy(g, z, t);
    // Reference values from direct evaluation of -log softmax.
    const double l0 = -(2.0 - std::log(std::exp(2.0) + std::exp(-1.0) + std::exp(0.5)));
    const double l1 = -(3.0 - std::log(std::exp(0.0) + std::exp(3.0) + std::exp(1.0)));
    CHECK(g.scalar_val(loss) == doctest::Approx(0.5 * (l0 + l1)).epsilon(1e-12));

    auto grads = g.gradients(loss, {z});
    // d/dz = (softmax - target) / N.
    auto sm = g.val(ad::softmax(g, z));
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) {
            const double want = (sm.at2(r, c) - g.val(t).at2(r, c)) / 2.0;
            CHECK(g.val(grads[0]).at2(r, c) == doctest::Approx(want).epsilon(1e-10));
        }
}

TEST_CASE("gradient of a simulated sgd step flows to the input") {
    // One SGD step on a 1-layer model, then match against a fixed target
    // delta; checks d(match)/d(input) against finite differences. This is the
    // attack's core double-backward pattern in miniature.
    Rng rng(41);
    Tensor x0 = testutil::random_tensor(Shape{1, 4}, rng);
    Tensor w0 = testutil::random_tensor(Shape{4, 3}, rng, -0.5, 0.5);
    Tensor target = testutil::random_tensor(Shape{4, 3}, rng, -0.1, 0.1);
    const double lr = 0.3;

    auto match_loss = [&](const Tensor& x) {
        ad::Graph g;
        auto xv = g.constant(x);
        auto wv = g.constant(w0);
        auto logits = g.matmul(xv, wv);
        auto loss = g.reduce_sum(g.square(logits));
        auto gw = g.gradients(loss, {wv})[0];
        auto delta = g.scale(gw, -lr);
        return g.scalar_val(g.reduce_sum(g.square(g.sub(delta, g.constant(target)))));
    };

    ad::Graph g;
    auto xv = g.constant(x0);
    auto wv = g.constant(w0);
    auto logits = g.matmul(xv, wv);
    auto loss = g.reduce_sum(g.square(logits));
    auto gw = g.gradients(loss, {wv})[0];
    auto delta = g.scale(gw, -lr);
    auto match = g.reduce_sum(g.square(g.sub(delta, g.constant(target))));
    auto gx = g.gradients(match, {xv})[0];

    auto fd = testutil::finite_diff(match_loss, x0, 1e-6);
    CHECK(testutil::max_rel_err(g.val(gx).vec(), fd, 1e-6) < 1e-5);
}

TEST_CASE("disconnected wrt yields zero gradient") {
    ad::Graph g;
    auto a = g.constant(Tensor{Shape{2}, {1.0, 2.0}});
    auto b = g.constant(Tensor{Shape{2}, {3.0, 4.0}});
    auto out = g.reduce_sum(g.square(a));
    auto grads = g.gradients(out, {b});
    CHECK(g.val(grads[0]).vec() == std::vector<double>{0.0, 0.0});
}
