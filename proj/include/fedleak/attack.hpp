#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedleak/autodiff.hpp"
#include "fedleak/dataset.hpp"
#include "fedleak/fl.hpp"
#include "fedleak/model.hpp"
#include "fedleak/rng.hpp"

// Epoch-wise gradient inversion. Given a round's global checkpoint and an
// intercepted client update, the attack optimizes trainable images and label
// logits so that a full simulation of the client's local epoch — the same
// batch order, the same SGD steps, and the same BN running-statistic drift —
// reproduces the intercepted weight change and end-of-epoch BN buffers.
//
// The loss is
//     w_grad * sum_l ||sim_delta_l - delta_l||_2
//   + w_bn   * sum_l (||sim_mean_l - mean_l||_2 + ||sim_var_l - var_l||_2)
//   + w_tv * TV(x) + w_l2 * ||x||^2
// and is differentiated through the simulated SGD steps (second order).
//
// With use_bn_loss=false the attack reproduces the fixed-statistics baseline:
// the simulation runs in eval mode against the intercepted buffers, no drift
// is modeled, and the BN term is dropped. With use_global_ckpt=false the
// attack network starts from the round-0 model instead of the round's global
// checkpoint. Both arms are expected to fail against BN-updating clients.

namespace fedleak::attack {

using TensorMap = ckpt::TensorMap;

enum class MatchMode { WeightChange, SingleStep };

struct AttackConfig {
    int iterations = 2000;
    double learning_rate = 0.01;  // Adam step size on the inputs
    bool cosine_decay = true;
    double decay_start = 0.5;  // fraction of the run before cosine decay kicks in
    double w_grad = 1.0;
    double w_bn = 1e-3;         // scaled by L_grad/L_BN at init when bn_auto_scale
    bool bn_auto_scale = true;
    double w_tv = 1e-4;
    double w_l2 = 1e-6;
    bool use_bn_loss = true;
    bool use_global_ckpt = true;
    bool use_prior = true;
    bool grayscale = false;
    bool known_batch_order = true;
    MatchMode match_mode = MatchMode::WeightChange;
    int restarts = 1;
    std::uint64_t seed = 0;
    double init_jitter = 0.02;  // breaks symmetry between same-prior copies
    int diverge_patience = 3;

    void validate() const {
        if (iterations < 1) throw ConfigError("attack.iterations: must be >= 1");
        if (learning_rate <= 0) throw ConfigError("attack.lr: must be > 0");
        if (w_grad < 0 || w_bn < 0 || w_tv < 0 || w_l2 < 0) throw ConfigError("attack weights must be >= 0");
        if (restarts < 1) throw ConfigError("attack.restarts: must be >= 1");
    }
};

// Raw (unweighted) loss components; total carries the configured weights.
struct AttackLossBreakdown {
    double total = 0.0;
    double grad = 0.0;
    double bn = 0.0;
    double tv = 0.0;
    double l2 = 0.0;
};

struct ReconstructionResult {
    Tensor images;        // [M,C,H,W], clamped to [0,1]
    Tensor label_logits;  // [M,num_classes]
    std::vector<int> labels;
    std::vector<AttackLossBreakdown> trajectory;
    double best_loss = 0.0;
    int best_iteration = -1;
    bool diverged = false;
    double effective_w_bn = 0.0;
    std::string config_digest;
};

// Everything constant during one inversion.
struct AttackProblem {
    model::Architecture arch;
    TensorMap net_params;      // attack network weights (global ckpt, or round-0 in the ablation arm)
    TensorMap drift_start;     // BN buffers at the client's epoch start
    TensorMap target_buffers;  // intercepted end-of-epoch buffers
    TensorMap target_delta;    // intercepted weight change
    std::vector<std::vector<int>> batches;  // reconstruction-row indices per local iteration
    double client_lr = 0.0;
    int m_images = 0;
    int num_classes = 0;
};

// Spec'd attack-network initialization: weights from the round's global
// checkpoint (or the round-0 model in the ablation arm); BN buffer slots from
// the intercepted update. The drift recurrence starts from the checkpoint's
// buffers — the state the client's epoch actually started from.
inline AttackProblem init_attack_network(const model::ModelState& global_ckpt,
                                         const model::ModelState& round0_ckpt, const fl::ModelUpdate& update,
                                         const AttackConfig& cfg) {
    const model::ModelState& source = cfg.use_global_ckpt ? global_ckpt : round0_ckpt;
    for (const auto& [name, t] : source.params)
        if (!update.delta.count(name) || update.delta.at(name).shape() != t.shape())
            throw std::invalid_argument("init_attack_network: update does not match architecture at " + name);

    AttackProblem p;
    p.arch = source.arch;
    p.net_params = source.params;
    p.drift_start = source.buffers;
    p.target_buffers = update.buffers;
    p.target_delta = update.delta;
    p.client_lr = update.learning_rate;
    p.m_images = update.n_train;
    p.num_classes = source.arch.num_classes;
    const std::uint64_t order_seed =
        cfg.known_batch_order ? update.batch_seed : seed_mix(cfg.seed, "withheld-order");
    p.batches = fl::epoch_batches(update.n_train, update.batch_size, order_seed);
    return p;
}

// --- standalone loss pieces (tensor level) ---

// sum_l ||a_l - b_l||_2 over matching layer sets.
inline double grad_match_loss(const TensorMap& sim, const TensorMap& target) {
    if (sim.size() != target.size()) throw std::invalid_argument("grad_match_loss: layer sets differ");
    double total = 0.0;
    for (const auto& [name, s] : sim) {
        const auto it = target.find(name);
        if (it == target.end() || !it->second.same_shape(s))
            throw std::invalid_argument("grad_match_loss: layer mismatch at " + name);
        Tensor d = s;
        d -= it->second;
        total += d.l2_norm();
    }
    return total;
}

// sum_l ||mean_l - target_mean_l||_2 + sum_l ||var_l - target_var_l||_2.
inline double bn_loss(const model::NamedStats& stats, const TensorMap& target_buffers) {
    double total = 0.0;
    for (const auto& [layer, st] : stats) {
        Tensor dm = st.mean;
        dm -= target_buffers.at(layer + ".running_mean");
        Tensor dv = st.var;
        dv -= target_buffers.at(layer + ".running_var");
        total += dm.l2_norm() + dv.l2_norm();
    }
    return total;
}

// Total variation: sum of absolute horizontal and vertical neighbor
// differences over a [M,C,H,W] (or [C,H,W]) stack.
inline double total_variation(const Tensor& x) {
    const bool batched = x.ndim() == 4;
    const int m = batched ? x.dim(0) : 1;
    const int c = batched ? x.dim(1) : x.dim(0);
    const int h = batched ? x.dim(2) : x.dim(1);
    const int w = batched ? x.dim(3) : x.dim(2);
    const double* data = x.data();
    double tv = 0.0;
    for (int i = 0; i < m * c; ++i) {
        const double* plane = data + static_cast<std::int64_t>(i) * h * w;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                if (xx + 1 < w) tv += std::abs(plane[y * w + xx + 1] - plane[y * w + xx]);
                if (y + 1 < h) tv += std::abs(plane[(y + 1) * w + xx] - plane[y * w + xx]);
            }
    }
    return tv;
}

inline double prior_loss(const Tensor& x, double w_tv, double w_l2) {
    double sq = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) sq += x[i] * x[i];
    return w_tv * total_variation(x) + w_l2 * sq;
}

// --- graph construction ---

namespace detail {

inline ad::Var gather_rows(ad::Graph& g, ad::Var src, const std::vector<int>& rows, int row_width) {
    auto map = std::make_shared<std::vector<int>>();
    map->reserve(rows.size() * static_cast<std::size_t>(row_width));
    for (int r : rows)
        for (int k = 0; k < row_width; ++k) map->push_back(r * row_width + k);
    return g.gather(src, std::move(map), Shape{static_cast<int>(rows.size()), row_width});
}

inline ad::Var expand_gray(ad::Graph& g, ad::Var x_gray, int channels) {
    const Shape& s = g.val(x_gray).shape();  // [M,1,H,W]
    const int m = s[0], h = s[2], w = s[3];
    auto map = std::make_shared<std::vector<int>>();
    map->reserve(static_cast<std::size_t>(m) * channels * h * w);
    for (int i = 0; i < m; ++i)
        for (int c = 0; c < channels; ++c)
            for (int p = 0; p < h * w; ++p) map->push_back(i * h * w + p);
    return g.gather(x_gray, std::move(map), Shape{m, channels, h, w});
}

inline ad::Var tv_term(ad::Graph& g, ad::Var x) {
    const Shape& s = g.val(x).shape();  // [M,C,H,W]
    const int planes = s[0] * s[1], h = s[2], w = s[3];
    const std::string key_base = std::to_string(planes) + "," + std::to_string(h) + "," + std::to_string(w);
    auto horiz_a = ad::maps::cached("tvha:" + key_base, [&] {
        std::vector<int> mp;
        for (int i = 0; i < planes; ++i)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx + 1 < w; ++xx) mp.push_back((i * h + y) * w + xx + 1);
        return mp;
    });
    auto horiz_b = ad::maps::cached("tvhb:" + key_base, [&] {
        std::vector<int> mp;
        for (int i = 0; i < planes; ++i)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx + 1 < w; ++xx) mp.push_back((i * h + y) * w + xx);
        return mp;
    });
    auto vert_a = ad::maps::cached("tvva:" + key_base, [&] {
        std::vector<int> mp;
        for (int i = 0; i < planes; ++i)
            for (int y = 0; y + 1 < h; ++y)
                for (int xx = 0; xx < w; ++xx) mp.push_back((i * h + y + 1) * w + xx);
        return mp;
    });
    auto vert_b = ad::maps::cached("tvvb:" + key_base, [&] {
        std::vector<int> mp;
        for (int i = 0; i < planes; ++i)
            for (int y = 0; y + 1 < h; ++y)
                for (int xx = 0; xx < w; ++xx) mp.push_back((i * h + y) * w + xx);
        return mp;
    });
    const Shape hshape{planes * h * (w - 1)};
    const Shape vshape{planes * (h - 1) * w};
    ad::Var dh = g.sub(g.gather(x, horiz_a, hshape), g.gather(x, horiz_b, hshape));
    ad::Var dv = g.sub(g.gather(x, vert_a, vshape), g.gather(x, vert_b, vshape));
    return g.add(g.reduce_sum(ad::abs_val(g, dh)), g.reduce_sum(ad::abs_val(g, dv)));
}

}  // namespace detail

struct LossVars {
    ad::Var grad;  // raw components
    ad::Var bn;
    ad::Var tv;
    ad::Var l2;
};

// Simulates the client's epoch over the trainable inputs and assembles the
// raw loss components. x_full: [M,C,H,W]; y_logits: [M,num_classes].
inline LossVars build_attack_loss(ad::Graph& g, const AttackProblem& p, const AttackConfig& cfg, ad::Var x_full,
                                  ad::Var y_logits) {
    const Shape& xs = g.val(x_full).shape();
    const int m = xs[0], channels = xs[1], height = xs[2], width = xs[3];
    const int row_width = channels * height * width;

    std::map<std::string, ad::Var> params;
    for (const auto& [name, t] : p.net_params) params.emplace(name, g.constant(t));
    const std::map<std::string, ad::Var> start_vars = params;
    std::map<std::string, ad::Var> eval_buffers;
    if (!cfg.use_bn_loss)
        for (const auto& [name, t] : p.target_buffers) eval_buffers.emplace(name, g.constant(t));

    std::map<std::string, ad::Var> drift;  // running stats being simulated
    if (cfg.use_bn_loss)
        for (const auto& [name, t] : p.drift_start) drift.emplace(name, g.constant(t));

    std::vector<std::string> param_names;
    std::vector<ad::Var> param_vars;
    auto refresh_param_vars = [&] {
        param_names.clear();
        param_vars.clear();
        for (const auto& [name, v] : params) {
            param_names.push_back(name);
            param_vars.push_back(v);
        }
    };

    const ad::Var targets = ad::softmax(g, y_logits);
    const ad::Var x_flat = g.reshape(x_full, Shape{m, row_width});

    auto run_batch = [&](const std::vector<int>& rows) {
        ad::Var xb = g.reshape(detail::gather_rows(g, x_flat, rows, row_width),
                               Shape{static_cast<int>(rows.size()), channels, height, width});
        ad::Var tb = detail::gather_rows(g, targets, rows, p.num_classes);
        model::GraphForward fw =
            cfg.use_bn_loss
                ? model::forward_graph(g, p.arch, params, xb, model::Mode::Train)
                : model::forward_graph(g, p.arch, params, xb, model::Mode::Eval, &eval_buffers);
        ad::Var loss = ad::soft_cross_entropy(g, fw.logits, tb);
        refresh_param_vars();
        auto grads = g.gradients(loss, param_vars);
        if (cfg.use_bn_loss)
            for (const auto& [li, bn] : fw.stats) {
                const std::string layer = "layer" + std::to_string(li);
                const double mom = p.arch.bn.momentum;
                ad::Var& mean = drift.at(layer + ".running_mean");
                ad::Var& var = drift.at(layer + ".running_var");
                mean = g.add(g.scale(mean, 1.0 - mom), g.scale(bn.mean, mom));
                var = g.add(g.scale(var, 1.0 - mom), g.scale(bn.var, mom));
            }
        return grads;
    };

    if (cfg.match_mode == MatchMode::WeightChange) {
        for (const auto& rows : p.batches) {
            auto grads = run_batch(rows);
            for (std::size_t i = 0; i < param_names.size(); ++i)
                params.at(param_names[i]) = g.sub(params.at(param_names[i]), g.scale(grads[i], p.client_lr));
        }
    } else {
        // Single-step reading of the matching objective: one joint batch, the
        // simulated change is -lr * grad.
        std::vector<int> all(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i) all[static_cast<std::size_t>(i)] = i;
        auto grads = run_batch(all);
        for (std::size_t i = 0; i < param_names.size(); ++i)
            params.at(param_names[i]) = g.add(start_vars.at(param_names[i]), g.scale(grads[i], -p.client_lr));
    }

    LossVars out;
    out.grad = g.scalar(0.0);
    for (const auto& [name, v] : params) {
        ad::Var sim_delta = g.sub(v, start_vars.at(name));
        out.grad = g.add(out.grad, ad::l2_norm(g, g.sub(sim_delta, g.constant(p.target_delta.at(name)))));
    }

    if (cfg.use_bn_loss) {
        out.bn = g.scalar(0.0);
        for (const auto& [name, v] : drift)
            out.bn = g.add(out.bn, ad::l2_norm(g, g.sub(v, g.constant(p.target_buffers.at(name)))));
    } else {
        out.bn = g.scalar(0.0);
    }
    out.tv = detail::tv_term(g, x_full);
    out.l2 = g.reduce_sum(g.square(x_full));
    return out;
}

// Forward-only evaluation of the attack objective at a given (x, y); used by
// the fixed-point oracle and the finite-difference checks.
inline AttackLossBreakdown attack_loss(const AttackProblem& p, const AttackConfig& cfg, const Tensor& x,
                                       const Tensor& y, double effective_w_bn) {
    ad::Graph g;
    auto parts = build_attack_loss(g, p, cfg, g.constant(x), g.constant(y));
    AttackLossBreakdown b;
    b.grad = g.scalar_val(parts.grad);
    b.bn = g.scalar_val(parts.bn);
    b.tv = g.scalar_val(parts.tv);
    b.l2 = g.scalar_val(parts.l2);
    b.total = cfg.w_grad * b.grad + effective_w_bn * b.bn + cfg.w_tv * b.tv + cfg.w_l2 * b.l2;
    return b;
}

// d(total)/dx and d(total)/dy at a point; the gradient-sanity harness.
inline std::pair<Tensor, Tensor> attack_loss_gradients(const AttackProblem& p, const AttackConfig& cfg,
                                                       const Tensor& x, const Tensor& y, double effective_w_bn) {
    ad::Graph g;
    auto xv = g.constant(x);
    auto yv = g.constant(y);
    auto parts = build_attack_loss(g, p, cfg, xv, yv);
    ad::Var total = g.add(g.add(g.scale(parts.grad, cfg.w_grad), g.scale(parts.bn, effective_w_bn)),
                          g.add(g.scale(parts.tv, cfg.w_tv), g.scale(parts.l2, cfg.w_l2)));
    auto grads = g.gradients(total, {xv, yv});
    return {g.val(grads[0]), g.val(grads[1])};
}

namespace detail {

struct Adam {
    double lr;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    Tensor m, v;
    int t = 0;

    explicit Adam(const Shape& shape, double lr_) : lr(lr_), m(shape, 0.0), v(shape, 0.0) {}

    void step(Tensor& param, const Tensor& grad, double lr_scale) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        for (std::int64_t i = 0; i < param.numel(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            param[i] -= lr * lr_scale * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
};

inline std::string config_digest(const AttackConfig& cfg, const AttackProblem& p) {
    std::ostringstream os;
    os << cfg.iterations << '|' << cfg.learning_rate << '|' << cfg.w_grad << '|' << cfg.w_bn << '|' << cfg.w_tv << '|'
       << cfg.w_l2 << '|' << cfg.use_bn_loss << cfg.use_global_ckpt << cfg.use_prior << cfg.grayscale
       << cfg.known_batch_order << cfg.bn_auto_scale << '|' << static_cast<int>(cfg.match_mode) << '|' << cfg.restarts
       << '|' << cfg.seed << '|' << p.m_images << '|' << p.client_lr;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : os.str()) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    std::ostringstream hex;
    hex << std::hex << h;
    return hex.str();
}

}  // namespace detail

// One seeded optimization run.
inline ReconstructionResult invert_once(const AttackProblem& p, const std::optional<ingest::PriorImage>& prior,
                                        const AttackConfig& cfg, std::uint64_t run_seed) {
    const int full_channels = p.arch.in_channels;
    const int opt_channels = cfg.grayscale ? 1 : full_channels;
    const int h = p.arch.height, w = p.arch.width;
    Rng rng(seed_mix(run_seed, "invert"));

    // x in its optimized parameterization; expanded to full channels on use.
    Tensor x(Shape{p.m_images, opt_channels, h, w});
    if (cfg.use_prior && prior) {
        Tensor base = prior->image;
        if (base.dim(0) != opt_channels) base = img::convert_channels(base, opt_channels);
        for (int i = 0; i < p.m_images; ++i)
            for (std::int64_t k = 0; k < base.numel(); ++k)
                x[static_cast<std::int64_t>(i) * base.numel() + k] =
                    std::clamp(base[k] + (cfg.init_jitter > 0 ? rng.normal(0.0, cfg.init_jitter) : 0.0), 0.0, 1.0);
    } else {
        for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform();
    }
    Tensor y(Shape{p.m_images, p.num_classes});
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = rng.uniform();

    detail::Adam adam_x(x.shape(), cfg.learning_rate);
    detail::Adam adam_y(y.shape(), cfg.learning_rate);

    ReconstructionResult res;
    res.config_digest = detail::config_digest(cfg, p);
    res.best_loss = std::numeric_limits<double>::infinity();
    double effective_w_bn = cfg.w_bn;
    int nonfinite_streak = 0;

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        ad::Graph g;
        auto xv = g.constant(x);
        auto yv = g.constant(y);
        ad::Var x_full = cfg.grayscale && full_channels > 1 ? detail::expand_gray(g, xv, full_channels) : xv;
        auto parts = build_attack_loss(g, p, cfg, x_full, yv);

        AttackLossBreakdown b;
        b.grad = g.scalar_val(parts.grad);
        b.bn = g.scalar_val(parts.bn);
        b.tv = g.scalar_val(parts.tv);
        b.l2 = g.scalar_val(parts.l2);
        if (iter == 0 && cfg.bn_auto_scale && cfg.use_bn_loss && b.bn > 1e-12 && b.grad > 0)
            effective_w_bn = cfg.w_bn * b.grad / b.bn;
        b.total = cfg.w_grad * b.grad + effective_w_bn * b.bn + cfg.w_tv * b.tv + cfg.w_l2 * b.l2;
        res.trajectory.push_back(b);

        if (!std::isfinite(b.total)) {
            if (++nonfinite_streak >= cfg.diverge_patience) {
                res.diverged = true;
                break;
            }
            continue;  // keep the last finite state
        }
        nonfinite_streak = 0;

        if (b.total < res.best_loss) {
            res.best_loss = b.total;
            res.best_iteration = iter;
            res.images = g.val(x_full);
            res.label_logits = y;
        }

        ad::Var total = g.add(g.add(g.scale(parts.grad, cfg.w_grad), g.scale(parts.bn, effective_w_bn)),
                              g.add(g.scale(parts.tv, cfg.w_tv), g.scale(parts.l2, cfg.w_l2)));
        auto grads = g.gradients(total, {xv, yv});
        double lr_scale = 1.0;
        if (cfg.cosine_decay) {
            const int start = static_cast<int>(cfg.decay_start * cfg.iterations);
            if (iter >= start && cfg.iterations > start)
                lr_scale = 0.5 * (1.0 + std::cos(3.14159265358979323846 * (iter - start) / (cfg.iterations - start)));
        }
        adam_x.step(x, g.val(grads[0]), lr_scale);
        adam_y.step(y, g.val(grads[1]), lr_scale);
        x = clamp01(std::move(x));
    }

    if (res.best_iteration < 0) {
        // Never saw a finite loss; report the (clamped) initial state.
        ad::Graph g;
        auto xv = g.constant(x);
        res.images = cfg.grayscale && full_channels > 1 ? g.val(detail::expand_gray(g, xv, full_channels)) : x;
        res.label_logits = y;
        res.diverged = true;
    }
    res.images = clamp01(std::move(res.images));
    res.effective_w_bn = effective_w_bn;
    for (int i = 0; i < p.m_images; ++i) {
        int best = 0;
        for (int k = 1; k < p.num_classes; ++k)
            if (res.label_logits.at2(i, k) > res.label_logits.at2(i, best)) best = k;
        res.labels.push_back(best);
    }
    return res;
}

// Multi-restart driver: best total loss wins.
inline ReconstructionResult invert(const AttackProblem& problem, const std::optional<ingest::PriorImage>& prior,
                                   const AttackConfig& cfg) {
    cfg.validate();
    std::optional<ReconstructionResult> best;
    for (int r = 0; r < cfg.restarts; ++r) {
        auto res = invert_once(problem, prior, cfg, seed_mix(cfg.seed, static_cast<std::uint64_t>(r)));
        if (!best || (!res.diverged && best->diverged) ||
            (res.diverged == best->diverged && res.best_loss < best->best_loss))
            best = std::move(res);
    }
    return *best;
}

inline ReconstructionResult invert_update(const model::ModelState& global_ckpt, const model::ModelState& round0_ckpt,
                                          const fl::ModelUpdate& update,
                                          const std::optional<ingest::PriorImage>& prior, const AttackConfig& cfg) {
    return invert(init_attack_network(global_ckpt, round0_ckpt, update, cfg), prior, cfg);
}

}  // namespace fedleak::attack
