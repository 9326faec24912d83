#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "fedleak/dataset.hpp"
#include "support/testutil.hpp"

using namespace fedleak;
using namespace fedleak::ingest;

namespace {

Dataset quantized(Dataset ds) {
    // Push through the 8-bit PNG grid the way a loaded dataset would be.
    for (auto& s : ds.samples)
        for (std::int64_t i = 0; i < s.image.numel(); ++i)
            s.image[i] = std::lround(s.image[i] * 255.0) / 255.0;
    return ds;
}

}  // namespace

TEST_CASE("load_dataset enumerates manifest rows sorted by path") {
    testutil::TempDir dir("ingest_load");
    Rng rng(3);
    for (int i = 0; i < 4; ++i) {
        Tensor im = testutil::random_tensor(Shape{1, 8, 8}, rng, 0.0, 1.0);
        img::save_image(dir.str() + "/im" + std::to_string(i) + ".png", im);
    }
    std::ofstream(dir.str() + "/manifest.csv")
        << "path,label\nim3.png,covid\nim0.png,normal\nim1.png,covid\nim2.png,normal\n";

    auto ds = load_dataset(dir.str(), dir.str() + "/manifest.csv");
    CHECK(ds.size() == 4);
    CHECK(ds.class_names == std::vector<std::string>{"covid", "normal"});
    CHECK(ds.channels == 1);
    // Sorted by path: im0(normal=1), im1(covid=0), im2(normal=1), im3(covid=0).
    CHECK(ds.samples[0].label == 1);
    CHECK(ds.samples[1].label == 0);
    CHECK(ds.samples[2].label == 1);
    CHECK(ds.samples[3].label == 0);
}

TEST_CASE("load_dataset error paths") {
    testutil::TempDir dir("ingest_errors");
    std::ofstream(dir.str() + "/empty.csv") << "path,label\n";
    CHECK_THROWS_WITH_AS(load_dataset(dir.str(), dir.str() + "/empty.csv"),
                         doctest::Contains("empty dataset"), std::runtime_error);

    std::ofstream(dir.str() + "/missing.csv") << "path,label\nnope.png,a\n";
    CHECK_THROWS_WITH_AS(load_dataset(dir.str(), dir.str() + "/missing.csv"),
                         doctest::Contains("nope.png"), std::runtime_error);
}

TEST_CASE("png round-trip is bit-identical for 8x8 gray images") {
    testutil::TempDir dir("ingest_roundtrip");
    auto ds = quantized(make_synthetic_dataset({.count = 6, .classes = 2, .size = 8, .channels = 1, .seed = 9}));
    write_dataset(ds, dir.str());
    auto loaded = load_dataset(dir.str(), dir.str() + "/manifest.csv");
    REQUIRE(loaded.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(loaded.samples[i].image == ds.samples[i].image);
        CHECK(loaded.samples[i].label == ds.samples[i].label);
    }
}

TEST_CASE("rgb png round-trip") {
    testutil::TempDir dir("ingest_rgb");
    auto ds = quantized(make_synthetic_dataset({.count = 3, .classes = 3, .size = 8, .channels = 3, .seed = 5}));
    write_dataset(ds, dir.str());
    auto loaded = load_dataset(dir.str(), dir.str() + "/manifest.csv");
    CHECK(loaded.channels == 3);
    for (std::size_t i = 0; i < ds.size(); ++i) CHECK(loaded.samples[i].image == ds.samples[i].image);
}

TEST_CASE("compute_prior trivial cases") {
    Dataset ds;
    ds.channels = 1;
    ds.height = 2;
    ds.width = 2;
    ds.class_names = {"a"};
    ds.samples.push_back({Tensor(Shape{1, 2, 2}, 0.0), 0});
    ds.samples.push_back({Tensor(Shape{1, 2, 2}, 1.0), 0});
    auto prior = compute_prior(ds);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(prior.image[i] == 0.5);

    Dataset one;
    one.channels = 1;
    one.height = 2;
    one.width = 2;
    one.class_names = {"a"};
    Rng rng(1);
    one.samples.push_back({testutil::random_tensor(Shape{1, 2, 2}, rng, 0.0, 1.0), 0});
    CHECK(compute_prior(one).image == one.samples[0].image);

    CHECK_THROWS_AS(compute_prior(Dataset{}), std::invalid_argument);
}

TEST_CASE("compute_prior matches per-pixel mean oracle") {
    Rng rng(77);
    Dataset ds;
    ds.channels = 1;
    ds.height = 5;
    ds.width = 4;
    ds.class_names = {"a"};
    for (int i = 0; i < 10; ++i) ds.samples.push_back({testutil::random_tensor(Shape{1, 5, 4}, rng, 0.0, 1.0), 0});

    auto prior = compute_prior(ds);
    for (std::int64_t p = 0; p < prior.image.numel(); ++p) {
        double sum = 0.0;
        for (const auto& s : ds.samples) sum += s.image[p];
        CHECK(prior.image[p] == doctest::Approx(sum / 10.0).epsilon(1e-6));
    }
}

namespace {

FederationPlan two_client_plan() {
    FederationPlan plan;
    plan.seed = 42;
    ClientConfig a;
    a.id = "A";
    a.batch_size = 4;
    a.n_train = 8;
    a.n_valid = 4;
    ClientConfig b;
    b.id = "B";
    b.batch_size = 4;
    b.n_train = 32;
    b.n_valid = 4;
    plan.clients = {a, b};
    return plan;
}

}  // namespace

TEST_CASE("partition produces class-balanced disjoint shards") {
    auto ds = make_synthetic_dataset({.count = 64, .classes = 2, .size = 8, .channels = 1, .seed = 4});
    auto plan = two_client_plan();
    auto shards = partition(ds, plan);
    REQUIRE(shards.size() == 2);

    auto count_class = [](const Dataset& d, int cls) {
        int n = 0;
        for (const auto& s : d.samples) n += s.label == cls ? 1 : 0;
        return n;
    };
    CHECK(count_class(shards[0].train, 0) == 4);
    CHECK(count_class(shards[0].train, 1) == 4);
    CHECK(count_class(shards[1].train, 0) == 16);
    CHECK(count_class(shards[1].train, 1) == 16);

    // Union of non-sharing shards has no duplicates; train and valid disjoint.
    std::set<int> seen;
    for (const auto& shard : shards) {
        for (int i : shard.train_indices) CHECK(seen.insert(i).second);
        for (int i : shard.valid_indices) CHECK(seen.insert(i).second);
    }
}

TEST_CASE("high-risk client draws its image from the sharer's shard") {
    auto ds = make_synthetic_dataset({.count = 64, .classes = 2, .size = 8, .channels = 1, .seed = 4});
    auto plan = two_client_plan();
    ClientConfig hr;
    hr.id = "HR";
    hr.batch_size = 1;
    hr.n_train = 1;
    hr.n_valid = 4;
    hr.share_train_with = "A";
    hr.share_valid_with = "A";
    plan.clients.push_back(hr);

    auto shards = partition(ds, plan);
    const auto& a = shards[0];
    const auto& h = shards[2];
    REQUIRE(h.train_indices.size() == 1);
    CHECK(std::count(a.train_indices.begin(), a.train_indices.end(), h.train_indices[0]) == 1);
    CHECK(h.valid_indices == a.valid_indices);
}

TEST_CASE("partition is deterministic in the seed") {
    auto ds = make_synthetic_dataset({.count = 64, .classes = 2, .size = 8, .channels = 1, .seed = 4});
    auto plan = two_client_plan();
    auto s1 = partition(ds, plan);
    auto s2 = partition(ds, plan);
    for (std::size_t i = 0; i < s1.size(); ++i) {
        CHECK(s1[i].train_indices == s2[i].train_indices);
        CHECK(s1[i].valid_indices == s2[i].valid_indices);
    }
    plan.seed = 43;
    auto s3 = partition(ds, plan);
    CHECK(s1[1].train_indices != s3[1].train_indices);
}

TEST_CASE("partition rejects oversubscribed plans") {
    auto ds = make_synthetic_dataset({.count = 16, .classes = 2, .size = 8, .channels = 1, .seed = 4});
    auto plan = two_client_plan();  // needs 48 samples
    CHECK_THROWS_AS(partition(ds, plan), PartitionError);
}

TEST_CASE("reserve_splits carves disjoint class-covering splits") {
    auto ds = make_synthetic_dataset({.count = 40, .classes = 2, .size = 8, .channels = 1, .seed = 6});
    auto split = reserve_splits(ds, 10, 6, 4, 123);
    CHECK(split.test.size() == 10);
    CHECK(split.pretrain.size() == 6);
    CHECK(split.prior_pool.size() == 4);
    CHECK(split.remainder.size() == 20);
    const auto again = reserve_splits(ds, 10, 6, 4, 123);
    CHECK(again.remainder_indices == split.remainder_indices);
    CHECK_THROWS_AS(reserve_splits(ds, 30, 10, 4, 1), ConfigError);
}
