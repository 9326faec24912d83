#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedleak/report.hpp"
#include "support/testutil.hpp"

using namespace fedleak;
using nlohmann::json;

namespace {

// Small but real experiment: writes a dataset to disk and returns a config
// with a 2-client plan plus a fast attack setting.
json desk_config_json(const std::string& data_dir) {
    ingest::SynthOptions so;
    so.count = 72;
    so.size = 16;
    so.seed = 31;
    auto ds = ingest::make_synthetic_dataset(so);
    ingest::write_dataset(ds, data_dir);

    json j;
    j["seed"] = 404;
    j["dataset"] = {{"root", data_dir}, {"manifest", "manifest.csv"}};
    j["splits"] = {{"test", 16}, {"prior", 8}};
    j["prior"] = {{"mode", "heldout"}};
    j["model"] = {{"arch", "cnn2"}, {"widths", {4, 6}}};
    j["federation"]["rounds"] = 3;
    j["federation"]["lr"] = 0.1;
    json a = {{"id", "a"}, {"batch_size", 4}, {"n_train", 8}, {"n_valid", 4}};
    json hr = {{"id", "hr"}, {"batch_size", 1}, {"n_train", 1}, {"n_valid", 4},
               {"share_train_with", "a"}, {"share_valid_with", "a"}};
    j["federation"]["clients"] = json::array({a, hr});
    j["attack"] = {{"iterations", 20}, {"lr", 0.05}, {"cosine_decay", false}, {"seed", 5}};
    j["sweep"] = {{"sigma0", {0.0, 10.0}}, {"clients", {"a", "hr"}}, {"rounds", {2}}, {"attack_seeds", {1}}};
    j["metrics"] = {{"bootstrap_trials", 200}};
    return j;
}

}  // namespace

TEST_CASE("config parsing applies defaults and validates fields") {
    testutil::TempDir dir("report_cfg");
    auto j = desk_config_json(dir.str() + "/data");
    auto cfg = config::parse_experiment(j);
    CHECK(cfg.seed == 404);
    CHECK(cfg.federation.clients.size() == 2);
    CHECK(cfg.federation.clients[1].share_train_with == "a");
    CHECK(cfg.attack.iterations == 20);
    CHECK(cfg.metrics.bootstrap_trials == 200);
    CHECK(cfg.sweep.sigma0 == std::vector<double>{0.0, 10.0});

    json bad = j;
    bad.erase("dataset");
    CHECK_THROWS_WITH_AS(config::parse_experiment(bad), doctest::Contains("dataset.root"), ConfigError);

    bad = j;
    bad["federation"]["clients"][0]["batch_size"] = 0;
    CHECK_THROWS_WITH_AS(config::parse_experiment(bad), doctest::Contains("batch_size"), ConfigError);

    bad = j;
    bad["sweep"]["rounds"] = {7};
    CHECK_THROWS_WITH_AS(config::parse_experiment(bad), doctest::Contains("sweep.rounds"), ConfigError);

    bad = j;
    bad["attack"]["match_mode"] = "telepathy";
    CHECK_THROWS_WITH_AS(config::parse_experiment(bad), doctest::Contains("match_mode"), ConfigError);
}

TEST_CASE("federate writes a complete, reproducible run directory") {
    testutil::TempDir dir("report_fed");
    auto cfg = config::parse_experiment(desk_config_json(dir.str() + "/data"));
    auto data = report::prepare(cfg);
    auto r1 = report::run_federate(data, dir.str() + "/run1");
    auto r2 = report::run_federate(data, dir.str() + "/run2");

    for (int t = 0; t < 3; ++t) {
        const std::string rd = dir.str() + "/run1/round_" + std::to_string(t);
        CHECK(std::filesystem::exists(rd + "/global.ckpt"));
        CHECK(std::filesystem::exists(rd + "/client_a.update"));
        CHECK(std::filesystem::exists(rd + "/client_hr.update"));
        CHECK(std::filesystem::exists(rd + "/log.json"));
    }
    CHECK(std::filesystem::exists(dir.str() + "/run1/prior.ckpt"));
    CHECK(std::filesystem::exists(dir.str() + "/run1/prior.png"));
    CHECK(std::filesystem::exists(dir.str() + "/run1/config.json"));

    // Same config, same seed: byte-identical index.
    CHECK(report::detail::read_text(dir.str() + "/run1/index.json") ==
          report::detail::read_text(dir.str() + "/run2/index.json"));
}

TEST_CASE("attack cell writes reconstructions, losses, and result metadata") {
    testutil::TempDir dir("report_atk");
    auto cfg = config::parse_experiment(desk_config_json(dir.str() + "/data"));
    auto data = report::prepare(cfg);
    report::run_federate(data, dir.str() + "/run");

    auto reloaded = report::reload_run_context(dir.str() + "/run");
    attack::AttackConfig acfg = reloaded.cfg.attack;
    acfg.use_global_ckpt = false;  // exercise the ablation arm plumbing
    auto cell = report::run_attack(reloaded, dir.str() + "/run", "hr", 2, acfg, dir.str() + "/atk");

    CHECK(std::filesystem::exists(dir.str() + "/atk/recon_0.png"));
    CHECK(std::filesystem::exists(dir.str() + "/atk/losses.csv"));
    auto result = json::parse(report::detail::read_text(dir.str() + "/atk/result.json"));
    CHECK(result.at("client") == "hr");
    CHECK(result.at("round") == 2);
    CHECK(result.at("arms").at("use_global_ckpt") == false);
    CHECK(result.at("arms").at("use_bn_loss") == true);
    REQUIRE(result.at("records").size() == 1);
    CHECK(result.at("records")[0].contains("rdlv"));
    CHECK(cell.records[0].matched_train_position == 0);

    // Unknown round and client are config errors.
    CHECK_THROWS_AS(report::run_attack(reloaded, dir.str() + "/run", "hr", 9, acfg, dir.str() + "/atk2"), ConfigError);
    CHECK_THROWS_AS(report::run_attack(reloaded, dir.str() + "/run", "nope", 2, acfg, dir.str() + "/atk3"),
                    ConfigError);
}

TEST_CASE("sweep produces the full cell grid and resumes idempotently") {
    testutil::TempDir dir("report_sweep");
    auto cfg = config::parse_experiment(desk_config_json(dir.str() + "/data"));
    auto res = report::run_sweep(cfg, dir.str() + "/sweep", 2);

    int fed_cells = 0, atk_cells = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir.str() + "/sweep/cells")) {
        const auto name = entry.path().filename().string();
        if (name.rfind("fed_", 0) == 0) ++fed_cells;
        if (name.rfind("atk_", 0) == 0) ++atk_cells;
    }
    CHECK(fed_cells == 2);   // sigma0 in {0, 10}
    CHECK(atk_cells == 4);   // 2 settings x 2 clients x 1 round x 1 seed

    const std::string metrics1 = report::detail::read_text(res.metrics_path);
    const std::string report1 = report::detail::read_text(res.report_path);

    // Resume: delete the outputs, keep the cells; everything is rebuilt
    // byte-identically without recomputing cells (fast).
    std::filesystem::remove(res.report_path);
    std::filesystem::remove(res.metrics_path);
    auto res2 = report::run_sweep(cfg, dir.str() + "/sweep", 1);
    CHECK(report::detail::read_text(res2.metrics_path) == metrics1);
    CHECK(report::detail::read_text(res2.report_path) == report1);

    // Report contents: every record traceable, accuracy present.
    auto report = json::parse(report1);
    REQUIRE(report.at("settings").size() == 2);
    for (const auto& setting : report.at("settings")) {
        CHECK(setting.contains("test_accuracy"));
        for (const auto& client : setting.at("clients"))
            for (const auto& round : client.at("rounds"))
                for (const auto& cell : round.at("cells"))
                    for (const auto& rec : cell.at("result").at("records")) {
                        const std::string dir_name = cell.at("dir").get<std::string>();
                        const std::string png = rec.at("reconstruction").get<std::string>();
                        CHECK(std::filesystem::exists(dir.str() + "/sweep/cells/" + dir_name + "/" + png));
                    }
    }
    // metrics.csv has the documented header and one row per (client, round, setting).
    CHECK(metrics1.rfind("client,round,sigma0,ssim,ssim_prior,rdlv,rdlv_lo,rdlv_hi,iip,cosine\n", 0) == 0);
    CHECK(std::count(metrics1.begin(), metrics1.end(), '\n') == 1 + 4);
}

TEST_CASE("plots render from a report with bands and scatter") {
    testutil::TempDir dir("report_plot");
    auto cfg = config::parse_experiment(desk_config_json(dir.str() + "/data"));
    report::run_sweep(cfg, dir.str() + "/sweep", 2);
    auto report = json::parse(report::detail::read_text(dir.str() + "/sweep/report.json"));

    auto written = report::render_plots(report, dir.str() + "/plots");
    CHECK(!written.empty());
    for (const auto& name : written) {
        CHECK(std::filesystem::exists(dir.str() + "/plots/" + name + ".svg"));
        CHECK(std::filesystem::exists(dir.str() + "/plots/" + name + ".png"));
        // Rendered PNGs must decode back.
        auto im = img::read_png(dir.str() + "/plots/" + name + ".png");
        CHECK(im.width > 0);
    }

    // CI band sanity in the report data feeding the plots.
    for (const auto& setting : report.at("settings"))
        for (const auto& client : setting.at("clients"))
            if (client.contains("rdlv")) {
                CHECK(client.at("rdlv").at("lo").get<double>() <= client.at("rdlv").at("mean").get<double>() + 1e-12);
                CHECK(client.at("rdlv").at("mean").get<double>() <= client.at("rdlv").at("hi").get<double>() + 1e-12);
            }

    // Scatter cardinality: reconstructions + originals of attacked clients.
    REQUIRE(report.contains("embedding_scatter"));
    int originals = 0, recons = 0;
    for (const auto& p : report.at("embedding_scatter"))
        p.at("original").get<bool>() ? ++originals : ++recons;
    CHECK(originals == 9);  // client a train (8) + hr train (1), at sigma0 = 0
    CHECK(recons == 2 * (8 + 1));  // per setting: a's 8 + hr's 1
}

TEST_CASE("single-record report still renders") {
    testutil::TempDir dir("report_single");
    auto j = desk_config_json(dir.str() + "/data");
    j["sweep"] = {{"sigma0", {0.0}}, {"clients", {"hr"}}, {"rounds", {2}}, {"attack_seeds", {1}}};
    auto cfg = config::parse_experiment(j);
    report::run_sweep(cfg, dir.str() + "/sweep", 1);
    auto report = json::parse(report::detail::read_text(dir.str() + "/sweep/report.json"));
    auto written = report::render_plots(report, dir.str() + "/plots");
    CHECK(!written.empty());
}
