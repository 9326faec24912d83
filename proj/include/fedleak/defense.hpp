#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "fedleak/errors.hpp"
#include "fedleak/rng.hpp"
#include "fedleak/tensor.hpp"

// Differential-privacy mechanisms. Two flavors: a percentile-calibrated
// Gaussian applied to outgoing model updates, and DP-SGD style per-example
// clipping plus noise applied inside local training. Both are pure functions
// of their inputs and an explicit RNG.

namespace fedleak::defense {

using TensorMap = std::map<std::string, Tensor>;

enum class Mechanism { None, PercentileGaussian, DpSgd };

struct DPConfig {
    Mechanism mechanism = Mechanism::None;
    double sigma0 = 0.0;            // noise scale multiplier for the Gaussian mechanism
    double q = 95.0;                // percentile of |delta| used to calibrate sigma
    bool percentile_interpolate = false;  // nearest-rank by default
    bool noise_bn_buffers = false;  // buffers are statistics, left clean by default
    double clip_norm = 1.0;         // DP-SGD l2 clip bound C
    double noise_multiplier = 0.0;  // DP-SGD sigma relative to C

    void validate() const {
        if (sigma0 < 0) throw ConfigError("dp.sigma0: must be >= 0");
        if (!(q > 0 && q <= 100)) throw ConfigError("dp.q: must be in (0, 100]");
        if (clip_norm <= 0) throw ConfigError("dp.clip_norm: must be > 0");
        if (noise_multiplier < 0) throw ConfigError("dp.noise_multiplier: must be >= 0");
    }
};

inline const char* mechanism_name(Mechanism m) {
    switch (m) {
        case Mechanism::None: return "none";
        case Mechanism::PercentileGaussian: return "percentile_gaussian";
        case Mechanism::DpSgd: return "dp_sgd";
    }
    return "none";
}

inline Mechanism mechanism_from_name(const std::string& s) {
    if (s == "none") return Mechanism::None;
    if (s == "percentile_gaussian") return Mechanism::PercentileGaussian;
    if (s == "dp_sgd") return Mechanism::DpSgd;
    throw ConfigError("dp.mechanism: unknown mechanism '" + s + "'");
}

// qth percentile of the absolute values pooled over every layer.
// Nearest-rank on the sorted values; optionally linear interpolation.
inline double abs_percentile(const TensorMap& tensors, double q, bool interpolate = false) {
    std::vector<double> flat;
    for (const auto& [name, t] : tensors)
        for (std::int64_t i = 0; i < t.numel(); ++i) flat.push_back(std::abs(t[i]));
    if (flat.empty()) throw std::invalid_argument("abs_percentile: empty update");
    std::sort(flat.begin(), flat.end());
    const auto n = flat.size();
    if (!interpolate) {
        std::size_t rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(n)));
        rank = std::min(std::max<std::size_t>(rank, 1), n);
        return flat[rank - 1];
    }
    const double pos = q / 100.0 * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, n - 1);
    const double frac = pos - static_cast<double>(lo);
    return flat[lo] * (1.0 - frac) + flat[hi] * frac;
}

struct GaussianResult {
    TensorMap delta;
    TensorMap buffers;
    double sigma = 0.0;      // calibrated noise stddev
    bool degenerate = false; // all-zero update, nothing was noised
};

// delta' = delta + N(0, sigma) per entry, sigma = percentile(|delta|, q) * sigma0.
// Buffers are passed through untouched unless noise_bn_buffers is set.
inline GaussianResult percentile_gaussian(const TensorMap& delta, const TensorMap& buffers, double sigma0, double q,
                                          Rng& rng, bool noise_bn_buffers = false, bool interpolate = false) {
    GaussianResult res;
    res.delta = delta;
    res.buffers = buffers;
    if (sigma0 == 0.0) return res;
    res.sigma = abs_percentile(delta, q, interpolate) * sigma0;
    if (res.sigma == 0.0) {
        res.degenerate = true;
        return res;
    }
    for (auto& [name, t] : res.delta)
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] += rng.normal(0.0, res.sigma);
    if (noise_bn_buffers)
        for (auto& [name, t] : res.buffers)
            for (std::int64_t i = 0; i < t.numel(); ++i) t[i] += rng.normal(0.0, res.sigma);
    return res;
}

inline double global_l2_norm(const TensorMap& grads) {
    double s = 0.0;
    for (const auto& [name, t] : grads)
        for (std::int64_t i = 0; i < t.numel(); ++i) s += t[i] * t[i];
    return std::sqrt(s);
}

// DP-SGD step: clip each per-example gradient to l2 norm C, average, then add
// N(0, sigma_dp * C / B) per entry (noise on the sum divided by batch size).
inline TensorMap dp_sgd_step(const std::vector<TensorMap>& per_example_grads, double clip_norm,
                             double noise_multiplier, Rng& rng) {
    if (clip_norm <= 0) throw ConfigError("dp.clip_norm: must be > 0");
    if (per_example_grads.empty()) throw std::invalid_argument("dp_sgd_step: need at least one example gradient");

    const double batch = static_cast<double>(per_example_grads.size());
    TensorMap sum;
    for (const auto& [name, t] : per_example_grads.front()) sum.emplace(name, Tensor(t.shape(), 0.0));
    for (const auto& g : per_example_grads) {
        const double norm = global_l2_norm(g);
        const double scale = norm > clip_norm ? clip_norm / norm : 1.0;
        for (const auto& [name, t] : g) {
            Tensor& acc = sum.at(name);
            for (std::int64_t i = 0; i < t.numel(); ++i) acc[i] += t[i] * scale;
        }
    }
    const double noise_std = noise_multiplier * clip_norm;
    for (auto& [name, t] : sum)
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            if (noise_std > 0.0) t[i] += rng.normal(0.0, noise_std);
            t[i] /= batch;
        }
    return sum;
}

}  // namespace fedleak::defense
