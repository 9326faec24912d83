#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "fedleak/rng.hpp"

// Exact (O(N^2)) t-SNE for the 2-d embedding scatter plots. Deterministic in
// the seed; desk pools are a few hundred points, so no tree approximation.

namespace fedleak::tsne {

struct Options {
    int iterations = 500;
    double perplexity = 0.0;  // 0: min(30, (N-1)/3)
    double learning_rate = 200.0;
    int exaggeration_iters = 100;
    double exaggeration = 12.0;
    std::uint64_t seed = 0;
};

inline std::vector<std::array<double, 2>> project_2d(const std::vector<std::vector<double>>& embeddings,
                                                     const Options& opt = {}) {
    const int n = static_cast<int>(embeddings.size());
    if (n < 2) throw std::invalid_argument("project_2d: need at least two embeddings");
    const std::size_t dim = embeddings.front().size();
    for (const auto& e : embeddings)
        if (e.size() != dim) throw std::invalid_argument("project_2d: inconsistent embedding widths");

    std::vector<double> d2(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double d = embeddings[static_cast<std::size_t>(i)][k] - embeddings[static_cast<std::size_t>(j)][k];
                acc += d * d;
            }
            d2[static_cast<std::size_t>(i) * n + j] = d2[static_cast<std::size_t>(j) * n + i] = acc;
        }

    const double perplexity = opt.perplexity > 0 ? opt.perplexity : std::max(1.0, std::min(30.0, (n - 1) / 3.0));
    const double target_entropy = std::log(perplexity);

    // Conditional probabilities with per-point bandwidth found by bisection.
    std::vector<double> p(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        double beta = 1.0, beta_lo = 0.0, beta_hi = 1e300;
        std::vector<double> row(static_cast<std::size_t>(n));
        for (int tries = 0; tries < 50; ++tries) {
            double sum = 0.0;
            for (int j = 0; j < n; ++j) {
                row[static_cast<std::size_t>(j)] = j == i ? 0.0 : std::exp(-beta * d2[static_cast<std::size_t>(i) * n + j]);
                sum += row[static_cast<std::size_t>(j)];
            }
            if (sum <= 0.0) sum = 1e-300;
            double entropy = 0.0;
            for (int j = 0; j < n; ++j)
                if (row[static_cast<std::size_t>(j)] > 0.0) {
                    const double pj = row[static_cast<std::size_t>(j)] / sum;
                    entropy -= pj * std::log(pj);
                }
            const double diff = entropy - target_entropy;
            if (std::abs(diff) < 1e-5) break;
            if (diff > 0) {
                beta_lo = beta;
                beta = beta_hi >= 1e300 ? beta * 2.0 : (beta + beta_hi) / 2.0;
            } else {
                beta_hi = beta;
                beta = beta_lo <= 0.0 ? beta / 2.0 : (beta + beta_lo) / 2.0;
            }
        }
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += row[static_cast<std::size_t>(j)];
        if (sum <= 0.0) {
            // Degenerate neighborhood (identical points): uniform row.
            for (int j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] = j == i ? 0.0 : 1.0;
            sum = static_cast<double>(n - 1);
        }
        for (int j = 0; j < n; ++j) p[static_cast<std::size_t>(i) * n + j] = row[static_cast<std::size_t>(j)] / sum;
    }
    // Symmetrize.
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double v = (p[static_cast<std::size_t>(i) * n + j] + p[static_cast<std::size_t>(j) * n + i]) /
                             (2.0 * static_cast<double>(n));
            p[static_cast<std::size_t>(i) * n + j] = p[static_cast<std::size_t>(j) * n + i] = std::max(v, 1e-12);
        }

    Rng rng(seed_mix(opt.seed, "tsne"));
    std::vector<std::array<double, 2>> y(static_cast<std::size_t>(n));
    for (auto& pt : y) pt = {rng.normal(0.0, 1e-4), rng.normal(0.0, 1e-4)};
    std::vector<std::array<double, 2>> velocity(static_cast<std::size_t>(n), {0.0, 0.0});

    std::vector<double> q(static_cast<std::size_t>(n) * n);
    for (int iter = 0; iter < opt.iterations; ++iter) {
        const double exag = iter < opt.exaggeration_iters ? opt.exaggeration : 1.0;
        double qsum = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) {
                const double dy0 = y[static_cast<std::size_t>(i)][0] - y[static_cast<std::size_t>(j)][0];
                const double dy1 = y[static_cast<std::size_t>(i)][1] - y[static_cast<std::size_t>(j)][1];
                const double v = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                q[static_cast<std::size_t>(i) * n + j] = q[static_cast<std::size_t>(j) * n + i] = v;
                qsum += 2.0 * v;
            }
        const double momentum = iter < 250 ? 0.5 : 0.8;
        for (int i = 0; i < n; ++i) {
            double g0 = 0.0, g1 = 0.0;
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const double kernel = q[static_cast<std::size_t>(i) * n + j];
                const double coeff =
                    4.0 * (exag * p[static_cast<std::size_t>(i) * n + j] - kernel / qsum) * kernel;
                g0 += coeff * (y[static_cast<std::size_t>(i)][0] - y[static_cast<std::size_t>(j)][0]);
                g1 += coeff * (y[static_cast<std::size_t>(i)][1] - y[static_cast<std::size_t>(j)][1]);
            }
            velocity[static_cast<std::size_t>(i)][0] = momentum * velocity[static_cast<std::size_t>(i)][0] - opt.learning_rate * g0;
            velocity[static_cast<std::size_t>(i)][1] = momentum * velocity[static_cast<std::size_t>(i)][1] - opt.learning_rate * g1;
            y[static_cast<std::size_t>(i)][0] += velocity[static_cast<std::size_t>(i)][0];
            y[static_cast<std::size_t>(i)][1] += velocity[static_cast<std::size_t>(i)][1];
        }
    }
    return y;
}

}  // namespace fedleak::tsne
