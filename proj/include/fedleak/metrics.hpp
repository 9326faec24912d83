#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "fedleak/model.hpp"
#include "fedleak/rng.hpp"
#include "fedleak/tensor.hpp"

// Leakage quantification: windowed SSIM, the relative data-leakage value
// (RDLV), embedding-space identifiability (IIP), and bootstrap confidence
// intervals.

namespace fedleak::metrics {

// --- SSIM ---
// Reference parameterization: 11x11 Gaussian window (sigma 1.5), K1=0.01,
// K2=0.03, dynamic range 1.0; filtered in "valid" mode and averaged over
// window positions and channels. Images smaller than the window fall back to
// the largest odd window that fits.

namespace detail {

inline std::vector<double> gaussian_kernel(int radius, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + radius)];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Separable valid-mode Gaussian filter of one [H,W] plane.
inline std::vector<double> filter_valid(const double* plane, int h, int w, const std::vector<double>& kern) {
    const int radius = static_cast<int>(kern.size() / 2);
    const int oh = h - 2 * radius, ow = w - 2 * radius;
    std::vector<double> rows(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int i = 0; i < static_cast<int>(kern.size()); ++i) acc += kern[static_cast<std::size_t>(i)] * plane[y * w + x + i];
            rows[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int i = 0; i < static_cast<int>(kern.size()); ++i) acc += kern[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>(y + i) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    return out;
}

}  // namespace detail

inline double ssim(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (a.ndim() != 3) throw std::invalid_argument("ssim: expected [C,H,W] images");
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);

    int window = std::min(11, std::min(h, w));
    if (window % 2 == 0) --window;
    if (window < 1) throw std::invalid_argument("ssim: image too small");
    const auto kern = detail::gaussian_kernel(window / 2, 1.5);

    constexpr double k1 = 0.01, k2 = 0.03, range = 1.0;
    const double c1 = (k1 * range) * (k1 * range);
    const double c2 = (k2 * range) * (k2 * range);

    double total = 0.0;
    for (int ch = 0; ch < c; ++ch) {
        const double* pa = a.data() + static_cast<std::int64_t>(ch) * h * w;
        const double* pb = b.data() + static_cast<std::int64_t>(ch) * h * w;
        std::vector<double> aa(static_cast<std::size_t>(h) * w), bb(aa.size()), ab(aa.size());
        for (std::size_t i = 0; i < aa.size(); ++i) {
            aa[i] = pa[i] * pa[i];
            bb[i] = pb[i] * pb[i];
            ab[i] = pa[i] * pb[i];
        }
        const auto mu_a = detail::filter_valid(pa, h, w, kern);
        const auto mu_b = detail::filter_valid(pb, h, w, kern);
        const auto m_aa = detail::filter_valid(aa.data(), h, w, kern);
        const auto m_bb = detail::filter_valid(bb.data(), h, w, kern);
        const auto m_ab = detail::filter_valid(ab.data(), h, w, kern);

        double acc = 0.0;
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double va = m_aa[i] - mu_a[i] * mu_a[i];
            const double vb = m_bb[i] - mu_b[i] * mu_b[i];
            const double cov = m_ab[i] - mu_a[i] * mu_b[i];
            acc += ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2)) /
                   ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
        }
        total += acc / static_cast<double>(mu_a.size());
    }
    return total / static_cast<double>(c);
}

// Relative data-leakage value of a reconstruction I against training image T
// and attack prior P: (SSIM(T,I) - SSIM(T,P)) / SSIM(T,P).
inline double rdlv(const Tensor& training_image, const Tensor& reconstruction, const Tensor& prior) {
    const double base = ssim(training_image, prior);
    if (base == 0.0) throw std::domain_error("rdlv: SSIM(T, P) is zero, value undefined");
    return (ssim(training_image, reconstruction) - base) / base;
}

inline double rdlv_from_ssim(double ssim_ti, double ssim_tp) {
    if (ssim_tp == 0.0) throw std::domain_error("rdlv: SSIM(T, P) is zero, value undefined");
    return (ssim_ti - ssim_tp) / ssim_tp;
}

// --- embeddings ---

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual int width() const = 0;
    virtual std::vector<double> embed(const Tensor& image) const = 0;
};

// Penultimate-layer features of a trained task model (the desk stand-in for
// an externally pretrained feature extractor).
class ModelEmbedder : public Embedder {
public:
    explicit ModelEmbedder(model::ModelState state) : state_(std::move(state)) {}
    int width() const override { return state_.arch.feature_width; }
    std::vector<double> embed(const Tensor& image) const override { return model::forward_features(state_, image); }

private:
    model::ModelState state_;
};

// Raw pixels as features; handy for tests and tiny pools.
class PixelEmbedder : public Embedder {
public:
    explicit PixelEmbedder(int width) : width_(width) {}
    int width() const override { return width_; }
    std::vector<double> embed(const Tensor& image) const override {
        return std::vector<double>(image.data(), image.data() + image.numel());
    }

private:
    int width_;
};

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0.0 ? dot / denom : 0.0;
}

// --- IIP ---

struct PoolImage {
    Tensor image;
    int image_id = 0;  // unique per distinct image
    bool attacked_client_train = false;
};

struct IIPMatch {
    int reconstruction = 0;
    int matched_image_id = 0;
    double cosine = 0.0;
    bool exact = false;  // matched image belongs to the attacked client's train set
};

struct IIPResult {
    double score = 0.0;          // m / N, N = number of reconstructions
    int unique_exact_matches = 0;  // m
    int num_reconstructions = 0;   // N
    int pool_size = 0;
    std::vector<IIPMatch> matches;
};

// FL-adapted IIP: the candidate pool is every training and validation image
// of every client; a reconstruction scores an exact match iff any of its k
// nearest pool images (cosine similarity over embeddings) belongs to the
// attacked client's training set. m counts unique matched training images.
inline IIPResult iip(const std::vector<Tensor>& reconstructions, const std::vector<PoolImage>& pool,
                     const Embedder& embedder, int k = 1) {
    if (reconstructions.empty()) throw std::invalid_argument("iip: empty reconstruction set");
    if (pool.empty()) throw std::invalid_argument("iip: empty candidate pool");
    if (k < 1) throw std::invalid_argument("iip: k must be >= 1");

    std::vector<std::vector<double>> pool_emb;
    pool_emb.reserve(pool.size());
    for (const auto& p : pool) pool_emb.push_back(embedder.embed(p.image));

    IIPResult res;
    res.num_reconstructions = static_cast<int>(reconstructions.size());
    res.pool_size = static_cast<int>(pool.size());
    std::set<int> matched_ids;
    for (std::size_t r = 0; r < reconstructions.size(); ++r) {
        const auto emb = embedder.embed(reconstructions[r]);
        std::vector<std::pair<double, std::size_t>> scored;
        scored.reserve(pool.size());
        for (std::size_t i = 0; i < pool.size(); ++i) scored.emplace_back(cosine_similarity(emb, pool_emb[i]), i);
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
        });

        IIPMatch match;
        match.reconstruction = static_cast<int>(r);
        match.matched_image_id = pool[scored.front().second].image_id;
        match.cosine = scored.front().first;
        for (int j = 0; j < std::min<int>(k, static_cast<int>(scored.size())); ++j) {
            const auto& cand = pool[scored[static_cast<std::size_t>(j)].second];
            if (cand.attacked_client_train) {
                match.exact = true;
                match.matched_image_id = cand.image_id;
                match.cosine = scored[static_cast<std::size_t>(j)].first;
                break;
            }
        }
        if (match.exact) matched_ids.insert(match.matched_image_id);
        res.matches.push_back(match);
    }
    res.unique_exact_matches = static_cast<int>(matched_ids.size());
    res.score = static_cast<double>(res.unique_exact_matches) / static_cast<double>(res.num_reconstructions);
    return res;
}

// --- bootstrap ---

struct ConfidenceInterval {
    double lo = 0.0;
    double hi = 0.0;
    double mean = 0.0;
};

// Percentile bootstrap CI of the mean.
inline ConfidenceInterval bootstrap_ci(const std::vector<double>& values, int trials = 1000, double level = 0.95,
                                       std::uint64_t seed = 0) {
    if (values.empty()) throw std::invalid_argument("bootstrap_ci: need at least one value");
    if (trials < 1) throw std::invalid_argument("bootstrap_ci: trials must be >= 1");
    Rng rng(seed_mix(seed, "bootstrap"));
    const std::size_t n = values.size();

    double point = 0.0;
    for (double v : values) point += v;
    point /= static_cast<double>(n);

    std::vector<double> means(static_cast<std::size_t>(trials));
    for (int t = 0; t < trials; ++t) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += values[rng.uniform_int(n)];
        means[static_cast<std::size_t>(t)] = acc / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    const double alpha = (1.0 - level) / 2.0;
    auto at_quantile = [&](double q) {
        const double pos = q * static_cast<double>(trials - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, static_cast<std::size_t>(trials - 1));
        const double frac = pos - static_cast<double>(lo);
        return means[lo] * (1.0 - frac) + means[hi] * frac;
    };
    return {at_quantile(alpha), at_quantile(1.0 - alpha), point};
}

}  // namespace fedleak::metrics
