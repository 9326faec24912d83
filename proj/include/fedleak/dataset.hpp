#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedleak/errors.hpp"
#include "fedleak/image_io.hpp"
#include "fedleak/plan.hpp"
#include "fedleak/rng.hpp"
#include "fedleak/tensor.hpp"

// Dataset ingest: CSV-manifest loading, prior-image computation, and the
// deterministic partition of a dataset into per-client shards.

namespace fedleak::ingest {

struct Sample {
    Tensor image;  // [C,H,W], values in [0,1]
    int label = 0;
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;
    int channels = 1;
    int height = 0;
    int width = 0;

    std::size_t size() const { return samples.size(); }
    int num_classes() const { return static_cast<int>(class_names.size()); }
    bool empty() const { return samples.empty(); }

    Dataset subset(const std::vector<int>& indices) const {
        Dataset d;
        d.class_names = class_names;
        d.channels = channels;
        d.height = height;
        d.width = width;
        d.samples.reserve(indices.size());
        for (int i : indices) d.samples.push_back(samples.at(static_cast<std::size_t>(i)));
        return d;
    }
};

struct PriorImage {
    Tensor image;  // [C,H,W]
    std::string source;
};

struct ClientShard {
    std::string client_id;
    Dataset train;
    Dataset valid;
    // Indices into the source dataset, for pool bookkeeping (IIP ownership).
    std::vector<int> train_indices;
    std::vector<int> valid_indices;
};

struct LoadOptions {
    int target_height = 0;  // 0 = keep native size
    int target_width = 0;
    int force_channels = 0;  // 0 = infer from first image
};

inline Dataset load_dataset(const std::string& root, const std::string& manifest_path, const LoadOptions& opt = {}) {
    std::ifstream mf(manifest_path);
    if (!mf) throw std::runtime_error("load_dataset: cannot open manifest " + manifest_path);

    std::vector<std::pair<std::string, std::string>> rows;  // path, label
    std::string line;
    while (std::getline(mf, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty() || line == "path,label") continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("load_dataset: malformed manifest line '" + line + "'");
        rows.emplace_back(line.substr(0, comma), line.substr(comma + 1));
    }
    if (rows.empty()) throw std::runtime_error("load_dataset: empty dataset (manifest " + manifest_path + ")");
    std::sort(rows.begin(), rows.end());

    std::set<std::string> label_set;
    for (const auto& [p, l] : rows) label_set.insert(l);
    std::vector<std::string> class_names(label_set.begin(), label_set.end());
    auto label_index = [&](const std::string& l) {
        const auto it = std::lower_bound(class_names.begin(), class_names.end(), l);
        return static_cast<int>(it - class_names.begin());
    };

    Dataset ds;
    ds.class_names = class_names;
    for (const auto& [rel, label] : rows) {
        const std::string full = (std::filesystem::path(root) / rel).string();
        if (!std::filesystem::exists(full)) throw std::runtime_error("load_dataset: missing file " + full);
        Tensor image = img::load_image(full);
        if (opt.force_channels > 0) image = img::convert_channels(image, opt.force_channels);
        if (opt.target_height > 0 && opt.target_width > 0)
            image = img::resize_bilinear(image, opt.target_height, opt.target_width);
        if (ds.samples.empty()) {
            ds.channels = image.dim(0);
            ds.height = image.dim(1);
            ds.width = image.dim(2);
        } else if (image.dim(0) != ds.channels || image.dim(1) != ds.height || image.dim(2) != ds.width) {
            throw std::runtime_error("load_dataset: image " + full + " has shape " + shape_str(image.shape()) +
                                     ", expected " + shape_str(Shape{ds.channels, ds.height, ds.width}));
        }
        ds.samples.push_back({std::move(image), label_index(label)});
    }
    return ds;
}

// Pixel-wise arithmetic mean over every image of the corpus.
inline PriorImage compute_prior(const Dataset& prior_corpus, const std::string& source = "prior") {
    if (prior_corpus.empty()) throw std::invalid_argument("compute_prior: empty prior corpus");
    Tensor mean(Shape{prior_corpus.channels, prior_corpus.height, prior_corpus.width}, 0.0);
    for (const auto& s : prior_corpus.samples) mean += s.image;
    mean *= 1.0 / static_cast<double>(prior_corpus.size());
    return {std::move(mean), source};
}

inline void check_prior_shape(const PriorImage& prior, const Dataset& task) {
    const Shape want{task.channels, task.height, task.width};
    if (prior.image.shape() != want)
        throw std::runtime_error("prior image shape " + shape_str(prior.image.shape()) + " does not match dataset " +
                                 shape_str(want));
}

class PartitionError : public std::runtime_error {
public:
    explicit PartitionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic partition into client shards. Class-balanced draws when
// requested; clients with share_train_with take their images from the named
// client's already-built shard (the Table-I high-risk pattern); everything
// else is drawn without replacement, so non-sharing shards never overlap.
inline std::vector<ClientShard> partition(const Dataset& dataset, const FederationPlan& plan) {
    plan.validate();
    Rng rng(seed_mix(plan.seed, "partition"));

    const int num_classes = dataset.num_classes();
    std::vector<std::vector<int>> pools(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < dataset.size(); ++i)
        pools[static_cast<std::size_t>(dataset.samples[i].label)].push_back(static_cast<int>(i));
    for (auto& p : pools) rng.shuffle(p);
    std::vector<std::size_t> cursor(static_cast<std::size_t>(num_classes), 0);

    auto draw_class = [&](int cls, const std::string& ctx) {
        auto& pool = pools[static_cast<std::size_t>(cls)];
        auto& cur = cursor[static_cast<std::size_t>(cls)];
        if (cur >= pool.size())
            throw PartitionError("partition: insufficient samples of class '" + dataset.class_names[static_cast<std::size_t>(cls)] +
                                 "' for " + ctx);
        return pool[cur++];
    };

    auto draw_many = [&](int count, bool balanced, const std::string& ctx) {
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(count));
        if (balanced) {
            const int per_class = count / num_classes;
            for (int c = 0; c < num_classes; ++c)
                for (int k = 0; k < per_class; ++k) out.push_back(draw_class(c, ctx));
            for (int c = 0; c < count - per_class * num_classes; ++c) out.push_back(draw_class(c % num_classes, ctx));
        } else {
            for (int k = 0; k < count; ++k) out.push_back(draw_class(k % num_classes, ctx));
        }
        return out;
    };

    std::map<std::string, ClientShard> built;
    // Non-sharing clients first so sharers are resolvable regardless of plan order.
    for (int pass = 0; pass < 2; ++pass) {
        for (const auto& c : plan.clients) {
            const bool sharing = c.share_train_with || c.share_valid_with;
            if ((pass == 0) == sharing) continue;

            ClientShard shard;
            shard.client_id = c.id;
            if (c.share_train_with) {
                const auto it = built.find(*c.share_train_with);
                if (it == built.end() || static_cast<int>(it->second.train_indices.size()) < c.n_train)
                    throw PartitionError("partition: client '" + c.id + "' cannot share " + std::to_string(c.n_train) +
                                         " train images from '" + *c.share_train_with + "'");
                std::vector<int> donor = it->second.train_indices;
                rng.shuffle(donor);
                shard.train_indices.assign(donor.begin(), donor.begin() + c.n_train);
            } else {
                shard.train_indices = draw_many(c.n_train, c.balanced, "client '" + c.id + "' train");
            }
            if (c.share_valid_with) {
                const auto it = built.find(*c.share_valid_with);
                if (it == built.end())
                    throw PartitionError("partition: client '" + c.id + "' shares valid with unbuilt '" +
                                         *c.share_valid_with + "'");
                shard.valid_indices = it->second.valid_indices;
            } else if (c.n_valid > 0) {
                shard.valid_indices = draw_many(c.n_valid, c.balanced, "client '" + c.id + "' valid");
            }
            shard.train = dataset.subset(shard.train_indices);
            shard.valid = dataset.subset(shard.valid_indices);
            built.emplace(c.id, std::move(shard));
        }
    }

    std::vector<ClientShard> shards;
    shards.reserve(plan.clients.size());
    for (const auto& c : plan.clients) shards.push_back(built.at(c.id));
    return shards;
}

// Reserved splits carved off a dataset before partitioning: held-out test
// images, an optional centralized pretraining pool, and an optional held-out
// pool for the synthetic-mean prior fallback. Deterministic in the seed.
struct SplitResult {
    Dataset remainder;
    Dataset test;
    Dataset pretrain;
    Dataset prior_pool;
    std::vector<int> remainder_indices;  // into the source dataset
};

inline SplitResult reserve_splits(const Dataset& dataset, int test_count, int pretrain_count, int prior_count,
                                  std::uint64_t seed) {
    const int total = static_cast<int>(dataset.size());
    if (test_count + pretrain_count + prior_count > total)
        throw ConfigError("splits: reserved " + std::to_string(test_count + pretrain_count + prior_count) +
                          " samples but dataset has " + std::to_string(total));
    Rng rng(seed_mix(seed, "splits"));
    // Round-robin across classes so every split sees every class.
    std::vector<std::vector<int>> pools(static_cast<std::size_t>(dataset.num_classes()));
    for (int i = 0; i < total; ++i) pools[static_cast<std::size_t>(dataset.samples[static_cast<std::size_t>(i)].label)].push_back(i);
    for (auto& p : pools) rng.shuffle(p);

    std::vector<int> order;
    order.reserve(static_cast<std::size_t>(total));
    for (std::size_t k = 0; order.size() < static_cast<std::size_t>(total); ++k)
        for (const auto& p : pools)
            if (k < p.size()) order.push_back(p[k]);

    SplitResult res;
    auto take = [&](int count) {
        std::vector<int> idx(order.begin(), order.begin() + count);
        order.erase(order.begin(), order.begin() + count);
        std::sort(idx.begin(), idx.end());
        return idx;
    };
    res.test = dataset.subset(take(test_count));
    res.pretrain = dataset.subset(take(pretrain_count));
    res.prior_pool = dataset.subset(take(prior_count));
    std::sort(order.begin(), order.end());
    res.remainder_indices = order;
    res.remainder = dataset.subset(order);
    return res;
}

// --- synthetic data generation (desk-scale experiments and tests) ---

struct SynthOptions {
    int count = 64;
    int classes = 2;
    int size = 16;
    int channels = 1;
    std::uint64_t seed = 0;
    double shared_amp = 0.24;   // structure common to the corpus
    double blob_amp = 0.20;     // class-position blob
    double texture_amp = 0.10;  // per-image sinusoid mixture
};

// Synthetic corpus with three ingredients: a low-frequency pattern shared by
// every image (so a mean prior is a meaningful baseline), a small blob at a
// class-specific position (the classification signal), and a per-image
// sinusoid texture (the individually identifying content an inversion attack
// would have to recover).
inline Dataset make_synthetic_dataset(const SynthOptions& opt) {
    constexpr double pi = 3.14159265358979323846;
    Rng rng(seed_mix(opt.seed, "synth"));
    Dataset ds;
    ds.channels = opt.channels;
    ds.height = opt.size;
    ds.width = opt.size;
    for (int c = 0; c < opt.classes; ++c) ds.class_names.push_back("class" + std::to_string(c));

    struct Wave {
        double a, fx, fy, phase;
    };
    std::vector<Wave> shared;
    for (int k = 0; k < 5; ++k)
        shared.push_back({opt.shared_amp * rng.uniform(0.6, 1.0), rng.uniform(0.5, 2.2), rng.uniform(0.5, 2.2),
                          rng.uniform(0.0, 2.0 * pi)});

    for (int i = 0; i < opt.count; ++i) {
        const int label = i % opt.classes;
        Tensor image(Shape{opt.channels, opt.size, opt.size});
        const double angle = 2.0 * pi * label / opt.classes;
        const double cx = 0.5 + 0.27 * std::cos(angle) + rng.uniform(-0.03, 0.03);
        const double cy = 0.5 + 0.27 * std::sin(angle) + rng.uniform(-0.03, 0.03);
        const double width = rng.uniform(0.16, 0.20);
        std::vector<Wave> texture;
        for (int k = 0; k < 8; ++k)
            texture.push_back({opt.texture_amp * rng.uniform(0.5, 1.0), rng.uniform(1.5, 4.0), rng.uniform(1.5, 4.0),
                               rng.uniform(0.0, 2.0 * pi)});
        for (int ch = 0; ch < opt.channels; ++ch) {
            const double gain = opt.channels == 1 ? 1.0 : 0.75 + 0.25 * std::cos(angle + 2.0 * ch);
            const double shift = opt.channels == 1 ? 0.0 : 0.6 * ch;
            for (int y = 0; y < opt.size; ++y)
                for (int x = 0; x < opt.size; ++x) {
                    const double fx = (x + 0.5) / opt.size;
                    const double fy = (y + 0.5) / opt.size;
                    double v = 0.45;
                    for (const auto& w : shared) v += w.a * std::sin(2.0 * pi * (w.fx * fx + w.fy * fy) + w.phase);
                    const double d2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
                    v += opt.blob_amp * gain * std::exp(-d2 / (2.0 * width * width));
                    for (const auto& w : texture)
                        v += w.a * std::sin(2.0 * pi * (w.fx * fx + w.fy * fy) + w.phase + shift);
                    image.at3(ch, y, x) = std::min(1.0, std::max(0.0, v));
                }
        }
        ds.samples.push_back({std::move(image), label});
    }
    return ds;
}

// Writes a dataset as 8-bit PNGs plus a path,label manifest; returns the
// manifest path. Loading it back quantizes pixels to the /255 grid.
inline std::string write_dataset(const Dataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    manifest << "path,label\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::ostringstream name;
        name << "img_" << std::setw(4) << std::setfill('0') << i << ".png";
        img::save_image((std::filesystem::path(dir) / name.str()).string(), ds.samples[i].image);
        manifest << name.str() << ',' << ds.class_names[static_cast<std::size_t>(ds.samples[i].label)] << '\n';
    }
    const std::string mpath = (std::filesystem::path(dir) / "manifest.csv").string();
    std::ofstream mf(mpath);
    mf << manifest.str();
    return mpath;
}

}  // namespace fedleak::ingest
