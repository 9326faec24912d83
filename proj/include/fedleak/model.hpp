#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedleak/autodiff.hpp"
#include "fedleak/checkpoint.hpp"
#include "fedleak/errors.hpp"
#include "fedleak/rng.hpp"
#include "fedleak/tensor.hpp"

// Small image classifiers with BatchNorm. Forward passes are built on the
// autodiff graph, so parameter gradients stay differentiable with respect to
// the input images — the property the inversion attack depends on.
//
// Parameter naming: conv block i owns layer{i}.weight / layer{i}.gamma /
// layer{i}.beta plus buffers layer{i}.running_mean / layer{i}.running_var;
// the linear head is layer{L}.weight (no bias, BN provides the shifts).

namespace fedleak::model {

using TensorMap = ckpt::TensorMap;

struct BNConfig {
    double momentum = 0.1;
    double epsilon = 1e-5;

    void validate() const {
        if (!(momentum > 0.0 && momentum <= 1.0)) throw ConfigError("model.bn_momentum: must be in (0, 1]");
        if (!(epsilon > 0.0)) throw ConfigError("model.bn_epsilon: must be > 0");
    }
};

enum class Mode { Train, Eval };

struct Batch {
    Tensor images;  // [N,C,H,W]
    std::vector<int> labels;
};

// One convolution with its BatchNorm; `pool` applies 2x2 max pooling after
// the activation. Residual wiring uses numbered slots: a conv can save its
// input to a slot, run as a projection branch over a slot (replacing the
// slot's content, main path untouched), or add a slot to its output before
// the activation.
struct ConvSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int pad = 1;
    bool pool = false;
    bool relu = true;
    int save_input = -1;     // slot to store this conv's input in
    int add_saved = -1;      // slot added to the post-BN output
    int project_saved = -1;  // slot this conv reads from and writes back to
};

struct Architecture {
    std::string name;
    int in_channels = 1;
    int height = 16;
    int width = 16;
    int num_classes = 2;
    std::vector<ConvSpec> convs;
    int feature_width = 0;  // channels entering the head
    bool avg_pool = false;  // 2x2 average pooling instead of max
    BNConfig bn;

    int head_index() const { return static_cast<int>(convs.size()); }
    std::string head_weight_name() const { return "layer" + std::to_string(head_index()) + ".weight"; }
    static std::string weight_name(int i) { return "layer" + std::to_string(i) + ".weight"; }
    static std::string gamma_name(int i) { return "layer" + std::to_string(i) + ".gamma"; }
    static std::string beta_name(int i) { return "layer" + std::to_string(i) + ".beta"; }
    static std::string mean_name(int i) { return "layer" + std::to_string(i) + ".running_mean"; }
    static std::string var_name(int i) { return "layer" + std::to_string(i) + ".running_var"; }
};

// Registry. "cnn4" is the desk default; "cnn2"/"cnn3" are smaller instances
// of the same pattern; "resmini" is a residual variant with projection skips.
inline Architecture make_architecture(const std::string& name, int in_channels, int height, int width,
                                      int num_classes, BNConfig bn = {}, std::vector<int> channels = {},
                                      bool avg_pool = false) {
    bn.validate();
    Architecture arch;
    arch.name = name;
    arch.in_channels = in_channels;
    arch.height = height;
    arch.width = width;
    arch.num_classes = num_classes;
    arch.avg_pool = avg_pool;
    arch.bn = bn;

    auto plain_cnn = [&](int blocks, std::vector<int> widths) {
        if (widths.empty()) {
            widths = {8, 16, 32, 32, 64, 64};
            widths.resize(static_cast<std::size_t>(blocks));
        }
        int h = height, c = in_channels;
        for (int i = 0; i < blocks; ++i) {
            ConvSpec spec;
            spec.in_channels = c;
            spec.out_channels = widths[static_cast<std::size_t>(i)];
            spec.pool = h > 1 && h % 2 == 0;
            arch.convs.push_back(spec);
            c = spec.out_channels;
            if (spec.pool) h /= 2;
        }
        arch.feature_width = c;
    };

    if (name == "cnn4") {
        plain_cnn(4, std::move(channels));
    } else if (name == "cnn3") {
        plain_cnn(3, std::move(channels));
    } else if (name == "cnn2") {
        plain_cnn(2, std::move(channels));
    } else if (name == "resmini") {
        const int c0 = channels.empty() ? 16 : channels[0];
        const int c1 = channels.size() > 1 ? channels[1] : 2 * c0;
        // stem with pool
        arch.convs.push_back({in_channels, c0, 3, 1, true, true, -1, -1, -1});
        // unit 1: two convs, identity skip
        arch.convs.push_back({c0, c0, 3, 1, false, true, 0, -1, -1});
        arch.convs.push_back({c0, c0, 3, 1, true, true, -1, 0, -1});
        // unit 2: widen with a 1x1 projection skip
        arch.convs.push_back({c0, c1, 3, 1, false, true, 1, -1, -1});
        arch.convs.push_back({c0, c1, 1, 0, false, false, -1, -1, 1});
        arch.convs.push_back({c1, c1, 3, 1, true, true, -1, 1, -1});
        arch.feature_width = c1;
    } else {
        throw ConfigError("model.arch: unknown architecture '" + name + "'");
    }
    return arch;
}

struct ModelState {
    Architecture arch;
    TensorMap params;
    TensorMap buffers;
};

inline ModelState init_model(const Architecture& arch, std::uint64_t seed) {
    Rng rng(seed_mix(seed, "model-init"));
    ModelState s;
    s.arch = arch;
    for (std::size_t i = 0; i < arch.convs.size(); ++i) {
        const auto& c = arch.convs[i];
        Tensor w(Shape{c.out_channels, c.in_channels, c.kernel, c.kernel});
        const double std = std::sqrt(2.0 / (static_cast<double>(c.in_channels) * c.kernel * c.kernel));
        for (std::int64_t k = 0; k < w.numel(); ++k) w[k] = rng.normal(0.0, std);
        const int li = static_cast<int>(i);
        s.params.emplace(Architecture::weight_name(li), std::move(w));
        s.params.emplace(Architecture::gamma_name(li), Tensor(Shape{c.out_channels}, 1.0));
        s.params.emplace(Architecture::beta_name(li), Tensor(Shape{c.out_channels}, 0.0));
        s.buffers.emplace(Architecture::mean_name(li), Tensor(Shape{c.out_channels}, 0.0));
        s.buffers.emplace(Architecture::var_name(li), Tensor(Shape{c.out_channels}, 1.0));
    }
    Tensor head(Shape{arch.num_classes, arch.feature_width});
    const double std = std::sqrt(1.0 / static_cast<double>(arch.feature_width));
    for (std::int64_t k = 0; k < head.numel(); ++k) head[k] = rng.normal(0.0, std);
    s.params.emplace(arch.head_weight_name(), std::move(head));
    return s;
}

struct BNStats {
    Tensor mean;  // [C]
    Tensor var;   // [C], biased
};

using NamedStats = std::map<std::string, BNStats>;  // keyed by "layer{i}"

// Graph-level forward. In train mode normalization uses batch statistics and
// per-layer stats vars are returned; in eval mode the supplied running
// buffers are used and no stats are produced.
struct GraphForward {
    ad::Var logits;
    ad::Var features;  // pooled penultimate activations, [N, feature_width]
    std::vector<std::pair<int, ad::BatchNormOut>> stats;  // conv index -> stats (train mode only)
};

inline GraphForward forward_graph(ad::Graph& g, const Architecture& arch,
                                  const std::map<std::string, ad::Var>& params, ad::Var images, Mode mode,
                                  const std::map<std::string, ad::Var>* buffers = nullptr,
                                  bool check_finite = false) {
    if (mode == Mode::Eval && buffers == nullptr)
        throw std::invalid_argument("forward_graph: eval mode requires running statistics");
    const Shape in_shape = g.val(images).shape();
    if (in_shape.size() != 4 || in_shape[1] != arch.in_channels || in_shape[2] != arch.height ||
        in_shape[3] != arch.width)
        throw std::invalid_argument("forward_graph: input shape " + shape_str(in_shape) + " does not match architecture");

    GraphForward out;
    std::map<int, ad::Var> saved;
    ad::Var x = images;
    for (std::size_t i = 0; i < arch.convs.size(); ++i) {
        const auto& spec = arch.convs[i];
        const int li = static_cast<int>(i);
        const ad::Var input = spec.project_saved >= 0 ? saved.at(spec.project_saved) : x;
        if (spec.save_input >= 0) saved[spec.save_input] = input;

        ad::Var y = ad::conv2d(g, input, params.at(Architecture::weight_name(li)), 1, spec.pad);
        if (mode == Mode::Train) {
            auto bn = ad::batch_norm_train(g, y, params.at(Architecture::gamma_name(li)),
                                           params.at(Architecture::beta_name(li)), arch.bn.epsilon);
            y = bn.y;
            out.stats.emplace_back(li, bn);
        } else {
            y = ad::batch_norm_eval(g, y, params.at(Architecture::gamma_name(li)),
                                    params.at(Architecture::beta_name(li)), buffers->at(Architecture::mean_name(li)),
                                    buffers->at(Architecture::var_name(li)), arch.bn.epsilon);
        }
        if (check_finite && !g.val(y).all_finite())
            throw std::runtime_error("forward: non-finite activations at layer" + std::to_string(li));
        if (spec.project_saved >= 0) {
            saved[spec.project_saved] = y;  // main path continues from x
            continue;
        }
        if (spec.add_saved >= 0) y = g.add(y, saved.at(spec.add_saved));
        if (spec.relu) y = ad::relu(g, y);
        if (spec.pool) y = arch.avg_pool ? ad::avg_pool2(g, y) : ad::max_pool2(g, y);
        x = y;
    }

    ad::Var feat = ad::global_avg_pool(g, x);  // [N*C] flattened
    const int n = in_shape[0];
    out.features = g.reshape(feat, Shape{n, arch.feature_width});
    out.logits = g.matmul(out.features, g.transpose(params.at(arch.head_weight_name())));
    return out;
}

inline std::map<std::string, ad::Var> lift(ad::Graph& g, const TensorMap& tensors) {
    std::map<std::string, ad::Var> vars;
    for (const auto& [name, t] : tensors) vars.emplace(name, g.constant(t));
    return vars;
}

struct ForwardResult {
    Tensor logits;
    NamedStats batch_stats;  // empty in eval mode
};

inline ForwardResult forward(const ModelState& state, const Tensor& images, Mode mode) {
    ad::Graph g;
    auto params = lift(g, state.params);
    auto buffers = lift(g, state.buffers);
    auto fw = forward_graph(g, state.arch, params, g.constant(images), mode, &buffers);
    ForwardResult res;
    res.logits = g.val(fw.logits);
    for (const auto& [li, bn] : fw.stats)
        res.batch_stats.emplace("layer" + std::to_string(li), BNStats{g.val(bn.mean), g.val(bn.var)});
    return res;
}

inline Tensor one_hot(const std::vector<int>& labels, int num_classes) {
    Tensor t(Shape{static_cast<int>(labels.size()), num_classes}, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw std::invalid_argument("one_hot: label " + std::to_string(labels[i]) + " out of range");
        t.at2(static_cast<int>(i), labels[i]) = 1.0;
    }
    return t;
}

struct LossGrads {
    double loss = 0.0;
    TensorMap grads;        // same keys as params
    NamedStats batch_stats; // train mode only
};

// Cross-entropy loss and exact parameter gradients. Soft-target form: with
// one-hot rows this is standard cross-entropy, and the attack can substitute
// arbitrary target distributions through the same code path.
inline LossGrads loss_and_grads(const ModelState& state, const Batch& batch, Mode mode) {
    if (batch.labels.empty()) throw std::invalid_argument("loss_and_grads: empty batch");
    ad::Graph g;
    auto params = lift(g, state.params);
    auto buffers = lift(g, state.buffers);
    auto fw = forward_graph(g, state.arch, params, g.constant(batch.images), mode, &buffers, /*check_finite=*/true);
    auto target = g.constant(one_hot(batch.labels, state.arch.num_classes));
    auto loss = ad::soft_cross_entropy(g, fw.logits, target);
    if (!std::isfinite(g.scalar_val(loss))) throw std::runtime_error("loss_and_grads: non-finite loss");

    std::vector<std::string> names;
    std::vector<ad::Var> vars;
    for (const auto& [name, v] : params) {
        names.push_back(name);
        vars.push_back(v);
    }
    auto grads = g.gradients(loss, vars);

    LossGrads res;
    res.loss = g.scalar_val(loss);
    for (std::size_t i = 0; i < names.size(); ++i) res.grads.emplace(names[i], g.val(grads[i]));
    for (const auto& [li, bn] : fw.stats)
        res.batch_stats.emplace("layer" + std::to_string(li), BNStats{g.val(bn.mean), g.val(bn.var)});
    return res;
}

// Eq. 3-4 momentum update of the running statistics:
//   mean' = (1-m)*mean + m*batch_mean,  var' = (1-m)*var + m*batch_var.
inline TensorMap bn_update(const TensorMap& buffers, const NamedStats& batch_stats, double momentum) {
    TensorMap out = buffers;
    for (const auto& [layer, stats] : batch_stats) {
        for (std::int64_t i = 0; i < stats.var.numel(); ++i)
            if (stats.var[i] < 0.0) throw std::invalid_argument("bn_update: negative batch variance at " + layer);
        Tensor& mean = out.at(layer + ".running_mean");
        Tensor& var = out.at(layer + ".running_var");
        for (std::int64_t i = 0; i < mean.numel(); ++i) {
            mean[i] = (1.0 - momentum) * mean[i] + momentum * stats.mean[i];
            var[i] = (1.0 - momentum) * var[i] + momentum * stats.var[i];
        }
    }
    return out;
}

// Penultimate features (eval mode): global-average-pooled activations.
inline std::vector<double> forward_features(const ModelState& state, const Tensor& image) {
    ad::Graph g;
    auto params = lift(g, state.params);
    auto buffers = lift(g, state.buffers);
    Tensor batch(Shape{1, image.dim(0), image.dim(1), image.dim(2)}, image.vec());
    auto fw = forward_graph(g, state.arch, params, g.constant(batch), Mode::Eval, &buffers);
    return g.val(fw.features).vec();
}

inline double evaluate_accuracy(const ModelState& state, const std::vector<Tensor>& images,
                                const std::vector<int>& labels) {
    if (images.empty()) return 0.0;
    int correct = 0;
    const int chunk = 64;
    for (std::size_t start = 0; start < images.size(); start += chunk) {
        const std::size_t end = std::min(images.size(), start + chunk);
        const int n = static_cast<int>(end - start);
        Tensor batch(Shape{n, state.arch.in_channels, state.arch.height, state.arch.width});
        for (int i = 0; i < n; ++i) {
            const Tensor& im = images[start + static_cast<std::size_t>(i)];
            std::copy(im.data(), im.data() + im.numel(), batch.data() + static_cast<std::int64_t>(i) * im.numel());
        }
        auto fw = forward(state, batch, Mode::Eval);
        for (int i = 0; i < n; ++i) {
            int best = 0;
            for (int k = 1; k < state.arch.num_classes; ++k)
                if (fw.logits.at2(i, k) > fw.logits.at2(i, best)) best = k;
            if (best == labels[start + static_cast<std::size_t>(i)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(images.size());
}

// --- serialization ---

inline nlohmann::json arch_to_json(const Architecture& a) {
    std::vector<int> widths;
    for (const auto& c : a.convs) widths.push_back(c.out_channels);
    return {{"name", a.name},        {"in_channels", a.in_channels}, {"height", a.height},
            {"width", a.width},      {"num_classes", a.num_classes}, {"bn_momentum", a.bn.momentum},
            {"bn_epsilon", a.bn.epsilon}, {"widths", widths},        {"pool", a.avg_pool ? "avg" : "max"}};
}

inline Architecture arch_from_json(const nlohmann::json& j) {
    BNConfig bn{j.at("bn_momentum").get<double>(), j.at("bn_epsilon").get<double>()};
    std::vector<int> widths = j.value("widths", std::vector<int>{});
    const std::string name = j.at("name").get<std::string>();
    std::vector<int> channels;
    if (name == "resmini" && widths.size() >= 3) channels = {widths[0], widths[3 < widths.size() ? 3 : widths.size() - 1]};
    else channels = widths;
    return make_architecture(name, j.at("in_channels").get<int>(), j.at("height").get<int>(),
                             j.at("width").get<int>(), j.at("num_classes").get<int>(), bn, channels,
                             j.value("pool", "max") == "avg");
}

inline void save_model(const std::string& path, const ModelState& state, nlohmann::json extra_meta = {}) {
    TensorMap all = state.params;
    for (const auto& [name, t] : state.buffers) all.emplace(name, t);
    nlohmann::json meta = {{"arch", arch_to_json(state.arch)}};
    if (!extra_meta.is_null())
        for (auto& [k, v] : extra_meta.items()) meta[k] = v;
    ckpt::save(path, all, meta);
}

inline ModelState load_model(const std::string& path) {
    auto loaded = ckpt::load(path);
    ModelState s;
    s.arch = arch_from_json(loaded.meta.at("arch"));
    for (auto& [name, t] : loaded.tensors) {
        if (name.find(".running_") != std::string::npos)
            s.buffers.emplace(name, std::move(t));
        else
            s.params.emplace(name, std::move(t));
    }
    return s;
}

}  // namespace fedleak::model
