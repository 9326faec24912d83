#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedleak/tensor.hpp"

// Reverse-mode autodiff over a define-by-run graph. The backward pass emits
// ordinary graph nodes instead of writing into buffers, so any gradient is
// itself a differentiable graph value. That closure property is what allows
// differentiating a simulated SGD epoch (gradients of gradients) with respect
// to the synthetic input images.
//
// The op set is deliberately tiny. Every structural operation (slicing,
// padding, broadcasting, im2col, pooling selection) is a Gather or Scatter
// with a precomputed index map; Gather and Scatter are adjoint to each other
// under the same map, which keeps the op set closed under differentiation.
// Data-dependent nonlinearity patterns (ReLU masks, pool argmax, softmax
// shifts) are frozen as constants at forward time, the usual convention for
// higher-order differentiation of piecewise-linear networks.

namespace fedleak::ad {

using IndexMap = std::shared_ptr<const std::vector<int>>;

enum class Op : std::uint8_t {
    Constant,
    Gather,     // out[i] = map[i] >= 0 ? a[map[i]] : 0
    Scatter,    // out[map[i]] += a[i]
    Add,
    Sub,
    Neg,
    Mul,
    Div,
    Scale,      // a * s
    AddScalar,  // a + s
    Square,
    Sqrt,
    Exp,
    Log,
    MatMul,
    Transpose,
    Reshape,
    ReduceSum,  // -> scalar
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    Graph() { nodes_.reserve(1024); }

    Var constant(Tensor v) { return push(Op::Constant, -1, -1, std::move(v)); }
    Var scalar(double v) { return constant(Tensor::scalar(v)); }

    // Note: push() may reallocate the node arena, so no reference obtained
    // from val() is valid across it; ops copy what they need first.
    Var gather(Var a, IndexMap map, Shape out_shape) {
        const Tensor& av = val(a);
        Shape in_shape = av.shape();
        Tensor out(std::move(out_shape));
        if (static_cast<std::int64_t>(map->size()) != out.numel())
            throw std::invalid_argument("gather: map size does not match output");
        for (std::size_t i = 0; i < map->size(); ++i) {
            const int src = (*map)[i];
            out[static_cast<std::int64_t>(i)] = src >= 0 ? av[src] : 0.0;
        }
        Var r = push(Op::Gather, a.id, -1, std::move(out));
        nodes_.back().map = std::move(map);
        nodes_.back().in_shape = std::move(in_shape);
        return r;
    }

    Var scatter(Var a, IndexMap map, Shape out_shape) {
        const Tensor& av = val(a);
        Shape in_shape = av.shape();
        if (static_cast<std::int64_t>(map->size()) != av.numel())
            throw std::invalid_argument("scatter: map size does not match input");
        Tensor out(std::move(out_shape), 0.0);
        for (std::size_t i = 0; i < map->size(); ++i) {
            const int dst = (*map)[i];
            if (dst >= 0) out[dst] += av[static_cast<std::int64_t>(i)];
        }
        Var r = push(Op::Scatter, a.id, -1, std::move(out));
        nodes_.back().map = std::move(map);
        nodes_.back().in_shape = std::move(in_shape);
        return r;
    }

    Var add(Var a, Var b) { return binary(Op::Add, a, b); }
    Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
    Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
    Var div(Var a, Var b) { return binary(Op::Div, a, b); }

    Var neg(Var a) { return unary(Op::Neg, a); }
    Var square(Var a) { return unary(Op::Square, a); }
    Var sqrt(Var a) { return unary(Op::Sqrt, a); }
    Var exp(Var a) { return unary(Op::Exp, a); }
    Var log(Var a) { return unary(Op::Log, a); }

    Var scale(Var a, double s) {
        Tensor out = val(a);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
        Var r = push(Op::Scale, a.id, -1, std::move(out));
        nodes_.back().s = s;
        return r;
    }

    Var add_scalar(Var a, double s) {
        Tensor out = val(a);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += s;
        Var r = push(Op::AddScalar, a.id, -1, std::move(out));
        nodes_.back().s = s;
        return r;
    }

    Var matmul(Var a, Var b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
            throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                                        shape_str(bv.shape()));
        const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        Tensor out(Shape{m, n}, 0.0);
        const double* pa = av.data();
        const double* pb = bv.data();
        double* po = out.data();
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                const double x = pa[static_cast<std::int64_t>(i) * k + kk];
                if (x == 0.0) continue;
                const double* brow = pb + static_cast<std::int64_t>(kk) * n;
                double* orow = po + static_cast<std::int64_t>(i) * n;
                for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
            }
        return push(Op::MatMul, a.id, b.id, std::move(out));
    }

    Var transpose(Var a) {
        const Tensor& av = val(a);
        if (av.ndim() != 2) throw std::invalid_argument("transpose: expected 2-d tensor");
        const int m = av.dim(0), n = av.dim(1);
        Tensor out(Shape{n, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at2(j, i) = av.at2(i, j);
        return push(Op::Transpose, a.id, -1, std::move(out));
    }

    Var reshape(Var a, Shape shape) {
        const Tensor& av = val(a);
        Shape in_shape = av.shape();
        if (shape_numel(shape) != av.numel())
            throw std::invalid_argument("reshape: numel mismatch " + shape_str(av.shape()) + " -> " + shape_str(shape));
        Tensor out(std::move(shape), av.vec());
        Var r = push(Op::Reshape, a.id, -1, std::move(out));
        nodes_.back().in_shape = std::move(in_shape);
        return r;
    }

    Var reduce_sum(Var a) {
        Shape in_shape = val(a).shape();
        Var r = push(Op::ReduceSum, a.id, -1, Tensor::scalar(val(a).sum()));
        nodes_.back().in_shape = std::move(in_shape);
        return r;
    }

    const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    double scalar_val(Var v) const { return val(v)[0]; }
    std::size_t size() const { return nodes_.size(); }

    // Builds gradient nodes of a scalar `out` with respect to each var in
    // `wrt`. Disconnected vars get a zero gradient of matching shape. Can be
    // called repeatedly, including on values produced by earlier calls.
    std::vector<Var> gradients(Var out, const std::vector<Var>& wrt) {
        if (val(out).numel() != 1) throw std::invalid_argument("gradients: output must be scalar");
        const int frozen = static_cast<int>(nodes_.size());

        // Nodes that feed into `out`.
        std::vector<char> anc(static_cast<std::size_t>(frozen), 0);
        {
            std::vector<int> stack{out.id};
            anc[static_cast<std::size_t>(out.id)] = 1;
            while (!stack.empty()) {
                const int i = stack.back();
                stack.pop_back();
                for (int in : {nodes_[static_cast<std::size_t>(i)].a, nodes_[static_cast<std::size_t>(i)].b})
                    if (in >= 0 && !anc[static_cast<std::size_t>(in)]) {
                        anc[static_cast<std::size_t>(in)] = 1;
                        stack.push_back(in);
                    }
            }
        }
        // Nodes reachable from the wrt set.
        std::vector<char> need(static_cast<std::size_t>(frozen), 0);
        for (Var w : wrt) {
            if (w.id >= frozen) throw std::invalid_argument("gradients: wrt var created after output");
            need[static_cast<std::size_t>(w.id)] = 1;
        }
        for (int i = 0; i < frozen; ++i) {
            const int a = nodes_[static_cast<std::size_t>(i)].a;
            const int b = nodes_[static_cast<std::size_t>(i)].b;
            if ((a >= 0 && need[static_cast<std::size_t>(a)]) || (b >= 0 && need[static_cast<std::size_t>(b)]))
                need[static_cast<std::size_t>(i)] = 1;
        }

        std::vector<Var> grad(static_cast<std::size_t>(frozen));
        grad[static_cast<std::size_t>(out.id)] = scalar(1.0);

        auto active = [&](int i) { return anc[static_cast<std::size_t>(i)] && need[static_cast<std::size_t>(i)]; };
        auto accumulate = [&](int target, Var g) {
            if (target < 0 || !active(target)) return;
            Var& slot = grad[static_cast<std::size_t>(target)];
            slot = slot.valid() ? add(slot, g) : g;
        };

        for (int i = out.id; i >= 0; --i) {
            if (!active(i)) continue;
            const Var g = grad[static_cast<std::size_t>(i)];
            if (!g.valid()) continue;
            // Copy the node header; emitting new nodes may reallocate nodes_.
            const Op op = nodes_[static_cast<std::size_t>(i)].op;
            const int a = nodes_[static_cast<std::size_t>(i)].a;
            const int b = nodes_[static_cast<std::size_t>(i)].b;
            const double s = nodes_[static_cast<std::size_t>(i)].s;
            const IndexMap map = nodes_[static_cast<std::size_t>(i)].map;
            const Shape in_shape = nodes_[static_cast<std::size_t>(i)].in_shape;
            const Var self{i};
            const Var va{a}, vb{b};
            switch (op) {
                case Op::Constant:
                    break;
                case Op::Gather:
                    accumulate(a, scatter(g, map, in_shape));
                    break;
                case Op::Scatter:
                    accumulate(a, gather(g, map, in_shape));
                    break;
                case Op::Add:
                    accumulate(a, g);
                    accumulate(b, g);
                    break;
                case Op::Sub:
                    accumulate(a, g);
                    accumulate(b, neg(g));
                    break;
                case Op::Neg:
                    accumulate(a, neg(g));
                    break;
                case Op::Mul:
                    accumulate(a, mul(g, vb));
                    accumulate(b, mul(g, va));
                    break;
                case Op::Div:
                    accumulate(a, div(g, vb));
                    accumulate(b, neg(div(mul(g, self), vb)));
                    break;
                case Op::Scale:
                    accumulate(a, scale(g, s));
                    break;
                case Op::AddScalar:
                    accumulate(a, g);
                    break;
                case Op::Square:
                    accumulate(a, scale(mul(g, va), 2.0));
                    break;
                case Op::Sqrt:
                    accumulate(a, div(g, scale(self, 2.0)));
                    break;
                case Op::Exp:
                    accumulate(a, mul(g, self));
                    break;
                case Op::Log:
                    accumulate(a, div(g, va));
                    break;
                case Op::MatMul:
                    accumulate(a, matmul(g, transpose(vb)));
                    accumulate(b, matmul(transpose(va), g));
                    break;
                case Op::Transpose:
                    accumulate(a, transpose(g));
                    break;
                case Op::Reshape:
                    accumulate(a, reshape(g, in_shape));
                    break;
                case Op::ReduceSum: {
                    auto bmap = std::make_shared<std::vector<int>>(static_cast<std::size_t>(shape_numel(in_shape)), 0);
                    accumulate(a, gather(g, std::move(bmap), in_shape));
                    break;
                }
            }
        }

        std::vector<Var> result;
        result.reserve(wrt.size());
        for (Var w : wrt) {
            Var g = grad[static_cast<std::size_t>(w.id)];
            result.push_back(g.valid() ? g : constant(Tensor(val(w).shape(), 0.0)));
        }
        return result;
    }

private:
    struct Node {
        Op op;
        int a = -1;
        int b = -1;
        double s = 0.0;
        IndexMap map;
        Shape in_shape;
        Tensor value;
    };

    Var push(Op op, int a, int b, Tensor value) {
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size() - 1)};
    }

    Var binary(Op op, Var a, Var b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (!av.same_shape(bv))
            throw std::invalid_argument("elementwise op shape mismatch: " + shape_str(av.shape()) + " vs " +
                                        shape_str(bv.shape()));
        Tensor out(av.shape());
        const std::int64_t n = av.numel();
        switch (op) {
            case Op::Add:
                for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
                break;
            case Op::Sub:
                for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
                break;
            case Op::Mul:
                for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
                break;
            case Op::Div:
                for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] / bv[i];
                break;
            default:
                throw std::logic_error("not a binary op");
        }
        return push(op, a.id, b.id, std::move(out));
    }

    Var unary(Op op, Var a) {
        const Tensor& av = val(a);
        Tensor out(av.shape());
        const std::int64_t n = av.numel();
        switch (op) {
            case Op::Neg:
                for (std::int64_t i = 0; i < n; ++i) out[i] = -av[i];
                break;
            case Op::Square:
                for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * av[i];
                break;
            case Op::Sqrt:
                for (std::int64_t i = 0; i < n; ++i) out[i] = std::sqrt(av[i]);
                break;
            case Op::Exp:
                for (std::int64_t i = 0; i < n; ++i) out[i] = std::exp(av[i]);
                break;
            case Op::Log:
                for (std::int64_t i = 0; i < n; ++i) out[i] = std::log(av[i]);
                break;
            default:
                throw std::logic_error("not a unary op");
        }
        return push(op, a.id, -1, std::move(out));
    }

    std::vector<Node> nodes_;
};

// ---- composite helpers ----

inline Var mean(Graph& g, Var a) { return g.scale(g.reduce_sum(a), 1.0 / static_cast<double>(g.val(a).numel())); }

// sqrt(sum(v^2) + eps). The epsilon keeps the derivative finite when the
// argument is exactly zero (the attack's fixed point); it perturbs the value
// by at most 5e-13.
inline Var l2_norm(Graph& g, Var a, double eps = 1e-24) {
    return g.sqrt(g.add_scalar(g.reduce_sum(g.square(a)), eps));
}

// |v| as v * sign(v) with the sign frozen from the forward value.
inline Var abs_val(Graph& g, Var a) {
    const Tensor& av = g.val(a);
    Tensor sign(av.shape());
    for (std::int64_t i = 0; i < av.numel(); ++i) sign[i] = av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
    return g.mul(a, g.constant(std::move(sign)));
}

inline Var relu(Graph& g, Var a) {
    const Tensor& av = g.val(a);
    Tensor mask(av.shape());
    for (std::int64_t i = 0; i < av.numel(); ++i) mask[i] = av[i] > 0.0 ? 1.0 : 0.0;
    return g.mul(a, g.constant(std::move(mask)));
}

// Cached index-map builders. Maps depend only on static shapes, so they are
// shared across the many graphs an attack run builds.
namespace maps {

inline IndexMap cached(const std::string& key, const std::function<std::vector<int>()>& build) {
    thread_local std::unordered_map<std::string, IndexMap> cache;
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    auto m = std::make_shared<const std::vector<int>>(build());
    cache.emplace(key, m);
    return m;
}

// [N,C,H,W] -> per-channel id, for channel reductions/broadcasts.
inline IndexMap channel_of(int n, int c, int h, int w) {
    const std::string key = "ch:" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w);
    return cached(key, [=] {
        std::vector<int> m(static_cast<std::size_t>(n) * c * h * w);
        std::size_t i = 0;
        for (int in = 0; in < n; ++in)
            for (int ic = 0; ic < c; ++ic)
                for (int s = 0; s < h * w; ++s) m[i++] = ic;
        return m;
    });
}

// [N,K] -> row id.
inline IndexMap row_of(int n, int k) {
    const std::string key = "row:" + std::to_string(n) + "," + std::to_string(k);
    return cached(key, [=] {
        std::vector<int> m(static_cast<std::size_t>(n) * k);
        std::size_t i = 0;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < k; ++c) m[i++] = r;
        return m;
    });
}

// [N,C,H,W] -> (n,c) id, for global average pooling.
inline IndexMap sample_channel_of(int n, int c, int h, int w) {
    const std::string key = "nc:" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w);
    return cached(key, [=] {
        std::vector<int> m(static_cast<std::size_t>(n) * c * h * w);
        std::size_t i = 0;
        for (int in = 0; in < n; ++in)
            for (int ic = 0; ic < c; ++ic)
                for (int s = 0; s < h * w; ++s) m[i++] = in * c + ic;
        return m;
    });
}

struct ConvDims {
    int n, c, h, w, oc, kh, kw, stride, pad;
    int oh() const { return (h + 2 * pad - kh) / stride + 1; }
    int ow() const { return (w + 2 * pad - kw) / stride + 1; }
};

// im2col map: output [N*OH*OW, C*KH*KW], entries index into flat [N,C,H,W]
// (or -1 for zero padding).
inline IndexMap im2col(const ConvDims& d) {
    const std::string key = "i2c:" + std::to_string(d.n) + "," + std::to_string(d.c) + "," + std::to_string(d.h) + "," +
                            std::to_string(d.w) + "," + std::to_string(d.oc) + "," + std::to_string(d.kh) + "," +
                            std::to_string(d.kw) + "," + std::to_string(d.stride) + "," + std::to_string(d.pad);
    return cached(key, [=] {
        const int oh = d.oh(), ow = d.ow();
        std::vector<int> m(static_cast<std::size_t>(d.n) * oh * ow * d.c * d.kh * d.kw);
        std::size_t i = 0;
        for (int in = 0; in < d.n; ++in)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x)
                    for (int ic = 0; ic < d.c; ++ic)
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int sy = y * d.stride + ky - d.pad;
                                const int sx = x * d.stride + kx - d.pad;
                                m[i++] = (sy < 0 || sy >= d.h || sx < 0 || sx >= d.w)
                                             ? -1
                                             : ((in * d.c + ic) * d.h + sy) * d.w + sx;
                            }
        return m;
    });
}

// Permutes matmul output [N*OH*OW, OC] into [N, OC, OH, OW].
inline IndexMap conv_out_permute(const ConvDims& d) {
    const std::string key = "cop:" + std::to_string(d.n) + "," + std::to_string(d.oc) + "," + std::to_string(d.oh()) +
                            "," + std::to_string(d.ow());
    return cached(key, [=] {
        const int oh = d.oh(), ow = d.ow();
        std::vector<int> m(static_cast<std::size_t>(d.n) * d.oc * oh * ow);
        std::size_t i = 0;
        for (int in = 0; in < d.n; ++in)
            for (int oc = 0; oc < d.oc; ++oc)
                for (int y = 0; y < oh; ++y)
                    for (int x = 0; x < ow; ++x) m[i++] = ((in * oh + y) * ow + x) * d.oc + oc;
        return m;
    });
}

}  // namespace maps

// 2-d convolution, no bias. x: [N,C,H,W], w: [OC,C,KH,KW].
inline Var conv2d(Graph& g, Var x, Var w, int stride, int pad) {
    const Shape xs = g.val(x).shape();
    const Shape ws = g.val(w).shape();
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
        throw std::invalid_argument("conv2d: bad shapes " + shape_str(xs) + " / " + shape_str(ws));
    maps::ConvDims d{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad};
    const int oh = d.oh(), ow = d.ow();
    Var cols = g.gather(x, maps::im2col(d), Shape{d.n * oh * ow, d.c * d.kh * d.kw});
    Var wmat = g.reshape(w, Shape{d.oc, d.c * d.kh * d.kw});
    Var prod = g.matmul(cols, g.transpose(wmat));  // [N*OH*OW, OC]
    return g.gather(prod, maps::conv_out_permute(d), Shape{d.n, d.oc, oh, ow});
}

// 2x2/stride-2 average pooling (linear).
inline Var avg_pool2(Graph& g, Var x) {
    const Shape s = g.val(x).shape();
    const int n = s[0], c = s[1], h = s[2], w = s[3];
    const int oh = h / 2, ow = w / 2;
    const std::string key = "avgp:" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w);
    auto map = maps::cached(key, [=] {
        std::vector<int> m(static_cast<std::size_t>(n) * c * h * w, -1);
        for (int in = 0; in < n; ++in)
            for (int ic = 0; ic < c; ++ic)
                for (int y = 0; y < h; ++y)
                    for (int x2 = 0; x2 < w; ++x2) {
                        if (y / 2 >= oh || x2 / 2 >= ow) continue;
                        m[static_cast<std::size_t>(((in * c + ic) * h + y) * w + x2)] =
                            ((in * c + ic) * oh + y / 2) * ow + x2 / 2;
                    }
        return m;
    });
    return g.scale(g.scatter(x, map, Shape{n, c, oh, ow}), 0.25);
}

// 2x2/stride-2 max pooling; the argmax pattern is frozen from forward values.
inline Var max_pool2(Graph& g, Var x) {
    const Tensor& xv = g.val(x);
    const Shape& s = xv.shape();
    const int n = s[0], c = s[1], h = s[2], w = s[3];
    const int oh = h / 2, ow = w / 2;
    auto map = std::make_shared<std::vector<int>>(static_cast<std::size_t>(n) * c * oh * ow);
    std::size_t i = 0;
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic)
            for (int y = 0; y < oh; ++y)
                for (int x2 = 0; x2 < ow; ++x2) {
                    int best = -1;
                    double bv = -1e300;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const int idx = ((in * c + ic) * h + (2 * y + dy)) * w + (2 * x2 + dx);
                            if (xv[idx] > bv) {
                                bv = xv[idx];
                                best = idx;
                            }
                        }
                    (*map)[i++] = best;
                }
    return g.gather(x, std::move(map), Shape{n, c, oh, ow});
}

// Per-channel mean over (N,H,W). x: [N,C,H,W] -> [C].
inline Var channel_mean(Graph& g, Var x) {
    const Shape s = g.val(x).shape();
    const double inv = 1.0 / (static_cast<double>(s[0]) * s[2] * s[3]);
    return g.scale(g.scatter(x, maps::channel_of(s[0], s[1], s[2], s[3]), Shape{s[1]}), inv);
}

inline Var channel_broadcast(Graph& g, Var per_channel, const Shape& full) {
    return g.gather(per_channel, maps::channel_of(full[0], full[1], full[2], full[3]), full);
}

// Train-mode batch normalization. Returns the normalized activations plus the
// biased batch statistics used for normalization.
struct BatchNormOut {
    Var y;
    Var mean;  // [C]
    Var var;   // [C], biased
};

inline BatchNormOut batch_norm_train(Graph& g, Var x, Var gamma, Var beta, double eps) {
    const Shape full = g.val(x).shape();
    Var mu = channel_mean(g, x);
    Var centered = g.sub(x, channel_broadcast(g, mu, full));
    Var var = channel_mean(g, g.square(centered));
    Var denom = g.sqrt(g.add_scalar(var, eps));
    Var xn = g.div(centered, channel_broadcast(g, denom, full));
    Var y = g.add(g.mul(xn, channel_broadcast(g, gamma, full)), channel_broadcast(g, beta, full));
    return {y, mu, var};
}

inline Var batch_norm_eval(Graph& g, Var x, Var gamma, Var beta, Var running_mean, Var running_var, double eps) {
    const Shape full = g.val(x).shape();
    Var centered = g.sub(x, channel_broadcast(g, running_mean, full));
    Var denom = g.sqrt(g.add_scalar(running_var, eps));
    Var xn = g.div(centered, channel_broadcast(g, denom, full));
    return g.add(g.mul(xn, channel_broadcast(g, gamma, full)), channel_broadcast(g, beta, full));
}

// Global average pooling [N,C,H,W] -> [N,C].
inline Var global_avg_pool(Graph& g, Var x) {
    const Shape s = g.val(x).shape();
    const double inv = 1.0 / (static_cast<double>(s[2]) * s[3]);
    return g.scale(g.scatter(x, maps::sample_channel_of(s[0], s[1], s[2], s[3]), Shape{s[0] * s[1]}), inv);
}

// Row-wise log-softmax for [N,K] logits; the max shift is a frozen constant.
inline Var log_softmax(Graph& g, Var z) {
    const Tensor& zv = g.val(z);
    const int n = zv.dim(0), k = zv.dim(1);
    Tensor shift(Shape{n, k});
    for (int r = 0; r < n; ++r) {
        double m = zv.at2(r, 0);
        for (int c = 1; c < k; ++c) m = std::max(m, zv.at2(r, c));
        for (int c = 0; c < k; ++c) shift.at2(r, c) = m;
    }
    Var zs = g.sub(z, g.constant(std::move(shift)));
    Var sums = g.scatter(g.exp(zs), maps::row_of(n, k), Shape{n});  // [N]
    Var lse = g.gather(g.log(sums), maps::row_of(n, k), Shape{n, k});
    return g.sub(zs, lse);
}

inline Var softmax(Graph& g, Var z) { return g.exp(log_softmax(g, z)); }

// Mean over rows of -sum_k target * log_softmax(logits). `target` rows are
// expected to sum to 1; with one-hot rows this is plain cross-entropy.
inline Var soft_cross_entropy(Graph& g, Var logits, Var target) {
    const int n = g.val(logits).dim(0);
    Var per = g.mul(target, log_softmax(g, logits));
    return g.scale(g.reduce_sum(per), -1.0 / static_cast<double>(n));
}

}  // namespace fedleak::ad
