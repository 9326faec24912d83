#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "fedleak/config.hpp"
#include "fedleak/report.hpp"

using namespace fedleak;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct DpFlags {
    std::string mech;
    double sigma0 = -1.0;
    double q = -1.0;
    double clip_norm = -1.0;
    double noise_mult = -1.0;

    void add_to(CLI::App* app) {
        app->add_option("--dp-mech", mech, "override DP mechanism for every client (none|percentile_gaussian|dp_sgd)");
        app->add_option("--sigma0", sigma0, "Gaussian mechanism noise multiplier");
        app->add_option("--q", q, "percentile for noise calibration");
        app->add_option("--clip-norm", clip_norm, "DP-SGD l2 clip norm");
        app->add_option("--noise-mult", noise_mult, "DP-SGD noise multiplier");
    }

    void apply(config::ExperimentConfig& cfg) const {
        if (mech.empty() && sigma0 < 0 && q < 0 && clip_norm < 0 && noise_mult < 0) return;
        for (auto& c : cfg.federation.clients) {
            if (!mech.empty()) c.dp.mechanism = defense::mechanism_from_name(mech);
            if (sigma0 >= 0) c.dp.sigma0 = sigma0;
            if (q >= 0) c.dp.q = q;
            if (clip_norm >= 0) c.dp.clip_norm = clip_norm;
            if (noise_mult >= 0) c.dp.noise_multiplier = noise_mult;
            c.dp.validate();
        }
    }
};

int run_synth(const std::string& out, int count, int classes, int size, int channels, std::uint64_t seed,
              double shared_amp, double blob_amp, double tex_amp) {
    ingest::SynthOptions opt;
    opt.count = count;
    opt.classes = classes;
    opt.size = size;
    opt.channels = channels;
    opt.seed = seed;
    opt.shared_amp = shared_amp;
    opt.blob_amp = blob_amp;
    opt.texture_amp = tex_amp;
    auto ds = ingest::make_synthetic_dataset(opt);
    const auto manifest = ingest::write_dataset(ds, out);
    std::cout << "wrote " << ds.size() << " images (" << classes << " classes, " << size << "x" << size << ", "
              << channels << "ch) under " << out << "\n"
              << "manifest: " << manifest << "\n";
    return 0;
}

int run_federate(const std::string& config_path, const std::string& out, const DpFlags& dp) {
    auto cfg = config::load_experiment(config_path);
    dp.apply(cfg);
    auto data = report::prepare(cfg);
    auto res = report::run_federate(data, out);
    std::cout << "federation complete: " << cfg.federation.rounds << " rounds, best round " << res.run.best_round
              << " (mean val acc " << std::fixed << std::setprecision(3);
    double best_acc = 0.0;
    for (const auto& log : res.run.logs)
        if (log.round == res.run.best_round) best_acc = log.mean_val_accuracy;
    std::cout << best_acc << ")\n";
    if (!data.splits.test.empty()) std::cout << "test accuracy (best model): " << res.test_acc << "\n";
    std::cout << "run directory: " << out << "\n";
    return 0;
}

int run_attack_cmd(const std::string& run_dir, const std::string& client, int round, const std::string& out,
                   CLI::App* cmd, int iterations, double lr, std::uint64_t seed, int restarts,
                   const std::string& match_mode, bool no_bn, bool no_ckpt, bool no_prior, bool grayscale,
                   bool unknown_order) {
    auto data = report::reload_run_context(run_dir);
    attack::AttackConfig acfg = data.cfg.attack;
    if (cmd->count("--iterations")) acfg.iterations = iterations;
    if (cmd->count("--lr")) acfg.learning_rate = lr;
    if (cmd->count("--seed")) acfg.seed = seed;
    if (cmd->count("--restarts")) acfg.restarts = restarts;
    if (cmd->count("--match-mode")) {
        if (match_mode == "weight_change")
            acfg.match_mode = attack::MatchMode::WeightChange;
        else if (match_mode == "single_step")
            acfg.match_mode = attack::MatchMode::SingleStep;
        else
            throw ConfigError("--match-mode: expected weight_change|single_step");
    }
    if (no_bn) acfg.use_bn_loss = false;
    if (no_ckpt) acfg.use_global_ckpt = false;
    if (no_prior) acfg.use_prior = false;
    if (grayscale) acfg.grayscale = true;
    if (unknown_order) acfg.known_batch_order = false;
    acfg.validate();

    std::string out_dir = out;
    if (out_dir.empty())
        out_dir = run_dir + "/attacks/" + client + "_r" + std::to_string(round) + "_s" + std::to_string(acfg.seed);
    auto cell = report::run_attack(data, run_dir, client, round, acfg, out_dir);
    std::cout << "attack complete: " << cell.recon.images.dim(0) << " reconstructions, best loss "
              << cell.recon.best_loss << (cell.recon.diverged ? " (diverged)" : "") << "\n";
    for (const auto& rec : cell.records)
        std::cout << "  recon_" << rec.index << ".png  ssim=" << std::fixed << std::setprecision(4) << rec.ssim
                  << "  rdlv=" << std::showpos << rec.rdlv << std::noshowpos << "\n";
    std::cout << "attack directory: " << out_dir << "\n";
    return 0;
}

int run_sweep_cmd(const std::string& config_path, const std::string& out, int workers, const DpFlags& dp) {
    auto cfg = config::load_experiment(config_path);
    dp.apply(cfg);
    auto res = report::run_sweep(cfg, out, workers);
    std::cout << "sweep complete\nreport:  " << res.report_path << "\nmetrics: " << res.metrics_path << "\n";
    return 0;
}

int run_report_cmd(const std::string& sweep_dir) {
    auto cfg = config::parse_experiment(
        nlohmann::json::parse(report::detail::read_text(sweep_dir + "/config.json")));
    report::assemble_report(cfg, sweep_dir);
    std::cout << "report: " << sweep_dir << "/report.json\nmetrics: " << sweep_dir << "/metrics.csv\n";
    return 0;
}

int run_plot_cmd(const std::string& report_path, const std::string& out) {
    auto report = nlohmann::json::parse(report::detail::read_text(report_path));
    auto written = report::render_plots(report, out);
    for (const auto& name : written) std::cout << out << "/" << name << ".{svg,png}\n";
    if (written.empty()) std::cout << "no plottable data in " << report_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedleak: federated-learning gradient-leakage audit toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic image-classification dataset");
    std::string synth_out = "data";
    int synth_count = 480, synth_classes = 2, synth_size = 16, synth_channels = 1;
    std::uint64_t synth_seed = 0;
    double shared_amp = 0.16, blob_amp = 0.22, tex_amp = 0.13;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--count", synth_count, "number of images");
    synth->add_option("--classes", synth_classes, "number of classes");
    synth->add_option("--size", synth_size, "image side length");
    synth->add_option("--channels", synth_channels, "1 (gray) or 3 (rgb)");
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--shared-amp", shared_amp, "shared low-frequency structure amplitude");
    synth->add_option("--blob-amp", blob_amp, "class blob amplitude");
    synth->add_option("--tex-amp", tex_amp, "per-image texture amplitude");

    // federate
    auto* federate = app.add_subcommand("federate", "run a federation and record every client update");
    std::string fed_config, fed_out = "runs/run";
    DpFlags fed_dp;
    federate->add_option("--config", fed_config, "experiment config (json)")->required();
    federate->add_option("--out", fed_out, "run directory");
    fed_dp.add_to(federate);

    // attack
    auto* atk = app.add_subcommand("attack", "invert a recorded client update");
    std::string atk_run, atk_client, atk_out;
    int atk_round = 0, atk_iterations = 0, atk_restarts = 1;
    double atk_lr = 0.0;
    std::uint64_t atk_seed = 0;
    std::string atk_match;
    bool no_bn = false, no_ckpt = false, no_prior = false, atk_gray = false, unknown_order = false;
    atk->add_option("--run", atk_run, "run directory from federate")->required();
    atk->add_option("--client", atk_client, "client id")->required();
    atk->add_option("--round", atk_round, "federation round")->required();
    atk->add_option("--out", atk_out, "attack output directory");
    atk->add_option("--iterations", atk_iterations, "attack iterations");
    atk->add_option("--lr", atk_lr, "attack learning rate");
    atk->add_option("--seed", atk_seed, "attack seed");
    atk->add_option("--restarts", atk_restarts, "multi-seed restarts, best loss wins");
    atk->add_option("--match-mode", atk_match, "weight_change|single_step");
    atk->add_flag("--no-bn-loss", no_bn, "fixed-statistics baseline (no BN loss, eval-mode simulation)");
    atk->add_flag("--no-global-ckpt", no_ckpt, "initialize the attack network from the round-0 model");
    atk->add_flag("--no-prior", no_prior, "initialize reconstructions from noise");
    atk->add_flag("--grayscale", atk_gray, "force single-channel reconstructions");
    atk->add_flag("--unknown-batch-order", unknown_order, "withhold the client's recorded batch order");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "cross product of clients x rounds x DP settings");
    std::string sweep_config, sweep_out = "sweeps/sweep";
    int workers = 1;
    DpFlags sweep_dp;
    sweep->add_option("--config", sweep_config, "experiment config (json)")->required();
    sweep->add_option("--out", sweep_out, "sweep directory");
    sweep->add_option("--workers", workers, "parallel attack cells")->check(CLI::PositiveNumber);
    sweep_dp.add_to(sweep);

    // report
    auto* rep = app.add_subcommand("report", "recompile report.json/metrics.csv from sweep cells");
    std::string rep_dir;
    rep->add_option("--sweep", rep_dir, "sweep directory")->required();

    // plot
    auto* plt = app.add_subcommand("plot", "render charts from a report");
    std::string plot_report, plot_out = "plots";
    plt->add_option("--report", plot_report, "report.json path")->required();
    plt->add_option("--out", plot_out, "plot output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) ? kExitConfig : 0;
    }

    try {
        if (synth->parsed())
            return run_synth(synth_out, synth_count, synth_classes, synth_size, synth_channels, synth_seed,
                             shared_amp, blob_amp, tex_amp);
        if (federate->parsed()) return run_federate(fed_config, fed_out, fed_dp);
        if (atk->parsed())
            return run_attack_cmd(atk_run, atk_client, atk_round, atk_out, atk, atk_iterations, atk_lr, atk_seed,
                                  atk_restarts, atk_match, no_bn, no_ckpt, no_prior, atk_gray, unknown_order);
        if (sweep->parsed()) return run_sweep_cmd(sweep_config, sweep_out, workers, sweep_dp);
        if (rep->parsed()) return run_report_cmd(rep_dir);
        if (plt->parsed()) return run_plot_cmd(plot_report, plot_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ingest::PartitionError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
