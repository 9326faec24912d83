#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fedleak/rng.hpp"
#include "fedleak/tensor.hpp"

namespace testutil {

// Central finite differences of a scalar function at x, one entry at a time.
inline std::vector<double> finite_diff(const std::function<double(const fedleak::Tensor&)>& f,
                                       const fedleak::Tensor& x, double h = 1e-6) {
    std::vector<double> g(static_cast<std::size_t>(x.numel()));
    fedleak::Tensor xp = x;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double orig = xp[i];
        xp[i] = orig + h;
        const double fp = f(xp);
        xp[i] = orig - h;
        const double fm = f(xp);
        xp[i] = orig;
        g[static_cast<std::size_t>(i)] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double denom = std::max(std::abs(want[i]), floor);
        worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
    }
    return worst;
}

inline fedleak::Tensor random_tensor(fedleak::Shape shape, fedleak::Rng& rng, double lo = -1.0, double hi = 1.0) {
    fedleak::Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Unique scratch directory under the build tree, wiped on construction.
class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(std::filesystem::temp_directory_path() / ("fedleak_test_" + name)) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    const std::filesystem::path& path() const { return path_; }
    std::string str() const { return path_.string(); }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
