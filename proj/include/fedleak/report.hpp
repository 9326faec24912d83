#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fedleak/attack.hpp"
#include "fedleak/config.hpp"
#include "fedleak/metrics.hpp"
#include "fedleak/plot.hpp"
#include "fedleak/tsne.hpp"

// Experiment orchestration: prepare data from a config, run federations,
// attack recorded updates, sweep DP settings, and compile leakage reports.
// Sweep cells are content-addressed so interrupted sweeps resume cleanly.

namespace fedleak::report {

using nlohmann::json;

namespace detail {

inline std::uint64_t fnv64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

inline std::string read_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

}  // namespace detail

struct ExperimentData {
    config::ExperimentConfig cfg;
    ingest::SplitResult splits;
    std::optional<ingest::PriorImage> prior;
    std::vector<ingest::ClientShard> shards;  // over splits.remainder
    model::ModelState initial;
    std::string dataset_digest;
};

inline ExperimentData prepare(const config::ExperimentConfig& cfg) {
    ExperimentData data;
    data.cfg = cfg;

    ingest::LoadOptions opt;
    opt.target_height = cfg.dataset.image_size;
    opt.target_width = cfg.dataset.image_size;
    opt.force_channels = cfg.dataset.channels;
    const std::string manifest = (std::filesystem::path(cfg.dataset.root) / cfg.dataset.manifest).string();
    auto dataset = ingest::load_dataset(cfg.dataset.root, manifest, opt);
    data.dataset_digest = detail::hex(detail::fnv64(detail::read_text(manifest)) ^
                                      detail::fnv64(cfg.dataset.root + "|" + std::to_string(dataset.size())));

    data.splits = ingest::reserve_splits(dataset, cfg.splits.test, cfg.splits.pretrain, cfg.splits.prior, cfg.seed);

    switch (cfg.prior.mode) {
        case config::PriorMode::Heldout:
            data.prior = ingest::compute_prior(data.splits.prior_pool, "heldout");
            break;
        case config::PriorMode::Corpus: {
            const std::string pm = (std::filesystem::path(cfg.prior.root) / cfg.prior.manifest).string();
            auto corpus = ingest::load_dataset(cfg.prior.root, pm, opt);
            data.prior = ingest::compute_prior(corpus, "corpus");
            ingest::check_prior_shape(*data.prior, dataset);
            break;
        }
        case config::PriorMode::None:
            break;
    }

    data.shards = ingest::partition(data.splits.remainder, cfg.federation);

    auto arch = model::make_architecture(cfg.model.arch, dataset.channels, dataset.height, dataset.width,
                                         dataset.num_classes(), cfg.model.bn, cfg.model.widths, cfg.model.avg_pool);
    data.initial = model::init_model(arch, seed_mix(cfg.seed, "init"));
    if (cfg.model.warm_start_epochs > 0)
        data.initial = fl::centralized_train(data.initial, data.splits.pretrain, cfg.model.warm_start_epochs,
                                             cfg.model.warm_start_batch, cfg.model.warm_start_lr,
                                             seed_mix(cfg.seed, "warm"));
    return data;
}

inline double test_accuracy(const model::ModelState& state, const ingest::Dataset& test) {
    std::vector<Tensor> images;
    std::vector<int> labels;
    for (const auto& s : test.samples) {
        images.push_back(s.image);
        labels.push_back(s.label);
    }
    return model::evaluate_accuracy(state, images, labels);
}

struct FederateResult {
    std::string run_dir;
    fl::RunResult run;
    double test_acc = 0.0;
};

// Runs a federation and persists everything an attack or report needs later:
// the config snapshot, the prior, and the best-model test accuracy.
inline FederateResult run_federate(const ExperimentData& data, const std::string& run_dir) {
    FederateResult res;
    res.run_dir = run_dir;
    res.run = fl::run_federation(data.cfg.federation, data.shards, data.initial, run_dir);
    res.test_acc = data.splits.test.empty() ? 0.0 : test_accuracy(res.run.best_state, data.splits.test);

    detail::write_text(run_dir + "/config.json", data.cfg.raw.dump(2) + "\n");
    if (data.prior) {
        ckpt::save(run_dir + "/prior.ckpt", {{"prior", data.prior->image}}, {{"source", data.prior->source}});
        img::save_image(run_dir + "/prior.png", data.prior->image);
    }
    auto index = json::parse(detail::read_text(run_dir + "/index.json"));
    index["test_accuracy"] = res.test_acc;
    index["dataset_digest"] = data.dataset_digest;
    detail::write_text(run_dir + "/index.json", index.dump(2) + "\n");
    return res;
}

// Reloads the experiment context a run directory was created from.
inline ExperimentData reload_run_context(const std::string& run_dir) {
    auto cfg = config::parse_experiment(json::parse(detail::read_text(run_dir + "/config.json")));
    return prepare(cfg);
}

struct ReconstructionRecord {
    int index = 0;
    int label = 0;
    int matched_train_position = -1;  // position in the attacked client's train set
    double ssim = 0.0;
    double ssim_prior = 0.0;
    double rdlv = 0.0;
};

struct AttackCellResult {
    std::string dir;
    attack::ReconstructionResult recon;
    std::vector<ReconstructionRecord> records;
    std::string client_id;
    int round = 0;
    int n_train = 0;
    int batch_size = 0;
    int n_iterations = 0;
};

inline Tensor nth_image(const Tensor& stack, int i) {
    Tensor im(Shape{stack.dim(1), stack.dim(2), stack.dim(3)});
    std::copy(stack.data() + static_cast<std::int64_t>(i) * im.numel(),
              stack.data() + static_cast<std::int64_t>(i + 1) * im.numel(), im.data());
    return im;
}

// Inverts one recorded update and scores the reconstructions against the
// client's training images (best-match SSIM, per the leakage protocol).
inline AttackCellResult run_attack(const ExperimentData& data, const std::string& run_dir,
                                   const std::string& client_id, int round, const attack::AttackConfig& acfg,
                                   const std::string& out_dir) {
    const std::string round_dir = run_dir + "/round_" + std::to_string(round);
    if (!std::filesystem::exists(round_dir + "/global.ckpt"))
        throw ConfigError("attack: round " + std::to_string(round) + " not found in " + run_dir);
    const std::string update_path = round_dir + "/client_" + client_id + ".update";
    if (!std::filesystem::exists(update_path))
        throw ConfigError("attack: no update for client '" + client_id + "' at round " + std::to_string(round));

    auto global = model::load_model(round_dir + "/global.ckpt");
    auto round0 = model::load_model(run_dir + "/round_0/global.ckpt");
    auto update = fl::load_update(update_path);

    AttackCellResult cell;
    cell.dir = out_dir;
    cell.client_id = client_id;
    cell.round = round;
    cell.n_train = update.n_train;
    cell.batch_size = update.batch_size;
    cell.n_iterations = update.n_iterations;

    auto problem = attack::init_attack_network(global, round0, update, acfg);
    cell.recon = attack::invert(problem, data.prior, acfg);

    std::filesystem::create_directories(out_dir);
    const ingest::ClientShard* shard = nullptr;
    for (const auto& s : data.shards)
        if (s.client_id == client_id) shard = &s;
    if (!shard) throw ConfigError("attack: client '" + client_id + "' not in plan");

    std::ostringstream losses;
    losses << "iteration,grad,bn,tv,l2,total\n";
    for (std::size_t i = 0; i < cell.recon.trajectory.size(); ++i) {
        const auto& t = cell.recon.trajectory[i];
        losses << i << ',' << t.grad << ',' << t.bn << ',' << t.tv << ',' << t.l2 << ',' << t.total << '\n';
    }
    detail::write_text(out_dir + "/losses.csv", losses.str());

    json jrecords = json::array();
    for (int m = 0; m < cell.recon.images.dim(0); ++m) {
        Tensor im = nth_image(cell.recon.images, m);
        std::ostringstream name;
        name << "recon_" << m << ".png";
        img::save_image(out_dir + "/" + name.str(), im);

        ReconstructionRecord rec;
        rec.index = m;
        rec.label = cell.recon.labels[static_cast<std::size_t>(m)];
        double best = -2.0;
        for (std::size_t t = 0; t < shard->train.size(); ++t) {
            const double v = metrics::ssim(shard->train.samples[t].image, im);
            if (v > best) {
                best = v;
                rec.matched_train_position = static_cast<int>(t);
            }
        }
        rec.ssim = best;
        if (data.prior) {
            rec.ssim_prior =
                metrics::ssim(shard->train.samples[static_cast<std::size_t>(rec.matched_train_position)].image,
                              data.prior->image);
            rec.rdlv = metrics::rdlv_from_ssim(rec.ssim, rec.ssim_prior);
        }
        cell.records.push_back(rec);
        jrecords.push_back({{"reconstruction", name.str()},
                            {"label", rec.label},
                            {"matched_train_position", rec.matched_train_position},
                            {"ssim", rec.ssim},
                            {"ssim_prior", rec.ssim_prior},
                            {"rdlv", rec.rdlv}});
    }

    json result{{"client", client_id},
                {"round", round},
                {"n_train", cell.n_train},
                {"batch_size", cell.batch_size},
                {"n_iterations", cell.n_iterations},
                {"best_loss", cell.recon.best_loss},
                {"best_iteration", cell.recon.best_iteration},
                {"diverged", cell.recon.diverged},
                {"effective_w_bn", cell.recon.effective_w_bn},
                {"config_digest", cell.recon.config_digest},
                {"arms",
                 {{"use_bn_loss", acfg.use_bn_loss},
                  {"use_global_ckpt", acfg.use_global_ckpt},
                  {"use_prior", acfg.use_prior},
                  {"known_batch_order", acfg.known_batch_order}}},
                {"attack_seed", acfg.seed},
                {"records", jrecords}};
    detail::write_text(out_dir + "/result.json", result.dump(2) + "\n");
    return cell;
}

// --- sweep ---

struct SweepSetting {
    std::string name;  // "sigma0_10" or "dp_sgd_0"
    defense::DPConfig dp;
    double sigma0 = 0.0;  // convenience axis value (dp-sgd settings use -1)
};

inline std::vector<SweepSetting> sweep_settings(const config::SweepConfig& sweep) {
    std::vector<SweepSetting> out;
    for (double s0 : sweep.sigma0) {
        SweepSetting s;
        std::ostringstream name;
        name << "sigma0_" << s0;
        s.name = name.str();
        s.sigma0 = s0;
        if (s0 > 0) {
            s.dp.mechanism = defense::Mechanism::PercentileGaussian;
            s.dp.sigma0 = s0;
        }
        out.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < sweep.dp_sgd.size(); ++i) {
        SweepSetting s;
        s.name = "dp_sgd_" + std::to_string(i);
        s.dp = sweep.dp_sgd[i];
        s.sigma0 = -1.0;
        out.push_back(std::move(s));
    }
    return out;
}

inline config::ExperimentConfig with_dp(const config::ExperimentConfig& base, const defense::DPConfig& dp) {
    config::ExperimentConfig cfg = base;
    for (auto& c : cfg.federation.clients) c.dp = dp;
    json jdp = fl::dp_to_json(dp);
    if (cfg.raw.contains("federation"))
        for (auto& jc : cfg.raw["federation"]["clients"]) jc["dp"] = jdp;
    return cfg;
}

// A sweep cell is done when its marker matches the cell's config hash.
inline bool cell_done(const std::string& dir, const std::string& digest) {
    const std::string marker = dir + "/done";
    return std::filesystem::exists(marker) && detail::read_text(marker) == digest;
}

inline void mark_done(const std::string& dir, const std::string& digest) { detail::write_text(dir + "/done", digest); }

struct SweepResult {
    std::string report_path;
    std::string metrics_path;
};

inline json assemble_report(const config::ExperimentConfig& cfg, const std::string& out_dir);

inline SweepResult run_sweep(const config::ExperimentConfig& cfg, const std::string& out_dir, int workers = 1) {
    std::filesystem::create_directories(out_dir + "/cells");
    detail::write_text(out_dir + "/config.json", cfg.raw.dump(2) + "\n");

    const auto settings = sweep_settings(cfg.sweep);
    std::vector<std::string> clients = cfg.sweep.clients;
    if (clients.empty())
        for (const auto& c : cfg.federation.clients) clients.push_back(c.id);
    std::vector<int> rounds = cfg.sweep.rounds;
    if (rounds.empty()) rounds.push_back(cfg.federation.rounds - 1);

    struct Job {
        std::string fed_dir;
        std::string cell_dir;
        std::string digest;
        config::ExperimentConfig cfg;
        std::string client;
        int round;
        attack::AttackConfig acfg;
    };
    std::vector<Job> jobs;

    for (const auto& setting : settings) {
        auto scfg = with_dp(cfg, setting.dp);
        const std::string fed_digest =
            detail::hex(detail::fnv64(scfg.raw.dump() + "|fed|" + fl::dp_to_json(setting.dp).dump()));
        const std::string fed_dir = out_dir + "/cells/fed_" + setting.name + "_" + fed_digest.substr(0, 10);
        if (!cell_done(fed_dir, fed_digest)) {
            std::filesystem::remove_all(fed_dir);
            auto data = prepare(scfg);
            run_federate(data, fed_dir);
            mark_done(fed_dir, fed_digest);
        }
        for (const auto& client : clients)
            for (int round : rounds)
                for (std::uint64_t seed : cfg.sweep.attack_seeds) {
                    Job job;
                    job.fed_dir = fed_dir;
                    job.cfg = scfg;
                    job.client = client;
                    job.round = round;
                    job.acfg = cfg.attack;
                    job.acfg.seed = seed;
                    job.digest = detail::hex(detail::fnv64(fed_digest + "|" + client + "|" + std::to_string(round) +
                                                           "|" + std::to_string(seed) + "|" +
                                                           attack::detail::config_digest(job.acfg, {})));
                    job.cell_dir = out_dir + "/cells/atk_" + setting.name + "_" + client + "_r" +
                                   std::to_string(round) + "_s" + std::to_string(seed) + "_" + job.digest.substr(0, 10);
                    jobs.push_back(std::move(job));
                }
    }

    std::mutex mu;
    std::size_t next = 0;
    auto worker = [&] {
        for (;;) {
            std::size_t idx;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= jobs.size()) return;
                idx = next++;
            }
            const Job& job = jobs[idx];
            if (cell_done(job.cell_dir, job.digest)) continue;
            std::filesystem::remove_all(job.cell_dir);
            auto data = prepare(job.cfg);
            run_attack(data, job.fed_dir, job.client, job.round, job.acfg, job.cell_dir);
            mark_done(job.cell_dir, job.digest);
        }
    };
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    assemble_report(cfg, out_dir);
    return {out_dir + "/report.json", out_dir + "/metrics.csv"};
}

// Compiles report.json + metrics.csv (+ embedding coordinates) from the
// persisted sweep cells. Pure function of the cell directories.
inline json assemble_report(const config::ExperimentConfig& cfg, const std::string& out_dir) {
    const auto settings = sweep_settings(cfg.sweep);
    json report;
    report["config"] = cfg.raw;
    report["settings"] = json::array();

    std::ostringstream csv;
    csv << "client,round,sigma0,ssim,ssim_prior,rdlv,rdlv_lo,rdlv_hi,iip,cosine\n";

    std::vector<std::vector<double>> scatter_embeddings;
    std::vector<double> scatter_sigma0;
    std::vector<int> scatter_ring;  // 1 = original image

    for (const auto& setting : settings) {
        // Locate the setting's federation dir.
        std::string fed_dir;
        for (const auto& entry : std::filesystem::directory_iterator(out_dir + "/cells"))
            if (entry.is_directory() && entry.path().filename().string().rfind("fed_" + setting.name + "_", 0) == 0)
                fed_dir = entry.path().string();
        if (fed_dir.empty()) continue;

        auto scfg = with_dp(cfg, setting.dp);
        auto data = prepare(scfg);
        auto index = json::parse(detail::read_text(fed_dir + "/index.json"));
        auto best_state = model::load_model(fed_dir + "/best.ckpt");
        metrics::ModelEmbedder embedder(best_state);

        // Shared candidate pool: every client's train+valid images, dedup by
        // dataset index.
        std::set<int> added;
        std::vector<metrics::PoolImage> pool_base;
        for (const auto& shard : data.shards) {
            for (std::size_t j = 0; j < shard.train_indices.size(); ++j)
                if (added.insert(shard.train_indices[j]).second)
                    pool_base.push_back({shard.train.samples[j].image, shard.train_indices[j], false});
            for (std::size_t j = 0; j < shard.valid_indices.size(); ++j)
                if (added.insert(shard.valid_indices[j]).second)
                    pool_base.push_back({shard.valid.samples[j].image, shard.valid_indices[j], false});
        }

        json jsetting;
        jsetting["name"] = setting.name;
        jsetting["sigma0"] = setting.sigma0;
        jsetting["dp"] = fl::dp_to_json(setting.dp);
        jsetting["run_dir"] = fed_dir;
        jsetting["test_accuracy"] = index.value("test_accuracy", 0.0);
        jsetting["clients"] = json::array();

        std::vector<std::string> clients = cfg.sweep.clients;
        if (clients.empty())
            for (const auto& c : cfg.federation.clients) clients.push_back(c.id);
        std::vector<int> rounds = cfg.sweep.rounds;
        if (rounds.empty()) rounds.push_back(cfg.federation.rounds - 1);

        for (const auto& client : clients) {
            const ingest::ClientShard* shard = nullptr;
            for (const auto& s : data.shards)
                if (s.client_id == client) shard = &s;
            std::set<int> attacked_train(shard->train_indices.begin(), shard->train_indices.end());
            auto pool = pool_base;
            for (auto& p : pool) p.attacked_client_train = attacked_train.count(p.image_id) > 0;

            json jclient;
            jclient["id"] = client;
            jclient["rounds"] = json::array();
            std::vector<double> rdlvs, ssims, ssim_priors;

            for (int round : rounds) {
                // Collect this (setting, client, round)'s cells across seeds.
                double best_loss = std::numeric_limits<double>::infinity();
                std::string best_cell;
                json jcells = json::array();
                std::vector<double> round_rdlvs, round_ssims, round_priors;
                for (const auto& entry : std::filesystem::directory_iterator(out_dir + "/cells")) {
                    const std::string name = entry.path().filename().string();
                    if (name.rfind("atk_" + setting.name + "_" + client + "_r" + std::to_string(round) + "_", 0) != 0)
                        continue;
                    auto result = json::parse(detail::read_text(entry.path().string() + "/result.json"));
                    for (const auto& rec : result.at("records")) {
                        round_rdlvs.push_back(rec.at("rdlv").get<double>());
                        round_ssims.push_back(rec.at("ssim").get<double>());
                        round_priors.push_back(rec.at("ssim_prior").get<double>());
                    }
                    if (result.at("best_loss").get<double>() < best_loss) {
                        best_loss = result.at("best_loss").get<double>();
                        best_cell = entry.path().string();
                    }
                    jcells.push_back({{"dir", name}, {"result", result}});
                }
                if (jcells.empty()) continue;
                rdlvs.insert(rdlvs.end(), round_rdlvs.begin(), round_rdlvs.end());
                ssims.insert(ssims.end(), round_ssims.begin(), round_ssims.end());
                ssim_priors.insert(ssim_priors.end(), round_priors.begin(), round_priors.end());

                // IIP on the best-loss run's reconstruction set.
                auto best_result = json::parse(detail::read_text(best_cell + "/result.json"));
                std::vector<Tensor> recons;
                for (const auto& rec : best_result.at("records"))
                    recons.push_back(img::load_image(best_cell + "/" + rec.at("reconstruction").get<std::string>()));
                auto ii = metrics::iip(recons, pool, embedder, cfg.metrics.iip_k);
                double cosine_sum = 0.0;
                int cosine_n = 0;
                for (const auto& m : ii.matches)
                    if (m.exact) {
                        cosine_sum += m.cosine;
                        ++cosine_n;
                    }

                json jround;
                jround["round"] = round;
                jround["cells"] = jcells;
                jround["iip"] = {{"score", ii.score},
                                 {"unique_exact_matches", ii.unique_exact_matches},
                                 {"num_reconstructions", ii.num_reconstructions},
                                 {"pool_size", ii.pool_size}};
                jround["exact_match_cosine"] = cosine_n ? cosine_sum / cosine_n : 0.0;
                jround["exact_match_count"] = cosine_n;
                jclient["rounds"].push_back(jround);

                // Embedding scatter entries: reconstructions of this cell.
                for (const auto& r : recons) {
                    scatter_embeddings.push_back(embedder.embed(r));
                    scatter_sigma0.push_back(setting.sigma0);
                    scatter_ring.push_back(0);
                }
                if (setting.sigma0 == 0.0)
                    for (const auto& s : shard->train.samples) {
                        scatter_embeddings.push_back(embedder.embed(s.image));
                        scatter_sigma0.push_back(0.0);
                        scatter_ring.push_back(1);
                    }

                auto ci = metrics::bootstrap_ci(round_rdlvs, cfg.metrics.bootstrap_trials,
                                                cfg.metrics.bootstrap_level, seed_mix(cfg.seed, "ci"));
                double mean_ssim = 0.0, mean_prior = 0.0;
                for (double v : round_ssims) mean_ssim += v;
                for (double v : round_priors) mean_prior += v;
                csv << client << ',' << round << ',' << setting.sigma0 << ',' << mean_ssim / round_ssims.size() << ','
                    << mean_prior / round_priors.size() << ',' << ci.mean << ',' << ci.lo << ',' << ci.hi << ','
                    << ii.score << ',' << jround["exact_match_cosine"].get<double>() << '\n';
            }

            if (!rdlvs.empty()) {
                auto ci = metrics::bootstrap_ci(rdlvs, cfg.metrics.bootstrap_trials, cfg.metrics.bootstrap_level,
                                                seed_mix(cfg.seed, "ci"));
                double mean_ssim = 0.0, mean_prior = 0.0;
                for (double v : ssims) mean_ssim += v;
                for (double v : ssim_priors) mean_prior += v;
                jclient["rdlv"] = {{"mean", ci.mean}, {"lo", ci.lo}, {"hi", ci.hi}};
                jclient["ssim"] = mean_ssim / ssims.size();
                jclient["ssim_prior"] = mean_prior / ssim_priors.size();
            }
            jsetting["clients"].push_back(jclient);
        }
        report["settings"].push_back(jsetting);
    }

    // 2-d projection of originals + reconstructions for the scatter plot.
    if (scatter_embeddings.size() >= 2) {
        tsne::Options topt;
        topt.seed = seed_mix(cfg.seed, "tsne");
        topt.iterations = 400;
        auto coords = tsne::project_2d(scatter_embeddings, topt);
        json jpoints = json::array();
        std::ostringstream ecsv;
        ecsv << "x,y,sigma0,original\n";
        for (std::size_t i = 0; i < coords.size(); ++i) {
            jpoints.push_back({{"x", coords[i][0]},
                               {"y", coords[i][1]},
                               {"sigma0", scatter_sigma0[i]},
                               {"original", scatter_ring[i] == 1}});
            ecsv << coords[i][0] << ',' << coords[i][1] << ',' << scatter_sigma0[i] << ',' << scatter_ring[i] << '\n';
        }
        report["embedding_scatter"] = jpoints;
        detail::write_text(out_dir + "/embeddings.csv", ecsv.str());
    }

    detail::write_text(out_dir + "/report.json", report.dump(2) + "\n");
    detail::write_text(out_dir + "/metrics.csv", csv.str());
    return report;
}

// --- plotting ---

inline std::string color_for(std::size_t i) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
    return palette[i % (sizeof(palette) / sizeof(palette[0]))];
}

inline std::vector<std::string> render_plots(const json& report, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> written;

    // Per-client series keyed by sigma0 (Gaussian settings only).
    std::map<std::string, std::map<double, json>> by_client;
    std::map<double, double> accuracy;
    for (const auto& setting : report.at("settings")) {
        const double s0 = setting.at("sigma0").get<double>();
        if (s0 < 0) continue;
        accuracy[s0] = setting.at("test_accuracy").get<double>();
        for (const auto& client : setting.at("clients"))
            if (client.contains("rdlv")) by_client[client.at("id").get<std::string>()][s0] = client;
    }

    if (!by_client.empty()) {
        plot::Chart rdlv;
        rdlv.title = "RDLV vs noise level";
        rdlv.xlabel = "sigma0";
        rdlv.ylabel = "RDLV";
        std::size_t ci = 0;
        for (const auto& [id, points] : by_client) {
            plot::Series s;
            s.label = id;
            s.color = color_for(ci++);
            for (const auto& [s0, jc] : points) {
                s.x.push_back(s0);
                s.y.push_back(jc.at("rdlv").at("mean").get<double>());
                s.lo.push_back(jc.at("rdlv").at("lo").get<double>());
                s.hi.push_back(jc.at("rdlv").at("hi").get<double>());
            }
            rdlv.series.push_back(std::move(s));
        }
        plot::Series acc;
        acc.label = "test accuracy";
        acc.color = "#555555";
        acc.dotted = true;
        for (const auto& [s0, a] : accuracy) {
            acc.x.push_back(s0);
            acc.y.push_back(a);
        }
        rdlv.series.push_back(std::move(acc));
        plot::write_both(out_dir + "/rdlv_vs_sigma0", rdlv);
        written.push_back("rdlv_vs_sigma0");

        plot::Chart iip;
        iip.title = "IIP vs noise level";
        iip.xlabel = "sigma0";
        iip.ylabel = "IIP / cosine";
        ci = 0;
        for (const auto& [id, points] : by_client) {
            plot::Series s, c;
            s.label = id;
            s.color = color_for(ci);
            c.label = id + " cosine";
            c.color = color_for(ci++);
            c.dotted = true;
            for (const auto& [s0, jc] : points) {
                double score = 0.0, cosine = 0.0;
                int n = 0;
                for (const auto& r : jc.at("rounds")) {
                    score += r.at("iip").at("score").get<double>();
                    cosine += r.at("exact_match_cosine").get<double>();
                    ++n;
                }
                if (!n) continue;
                s.x.push_back(s0);
                s.y.push_back(score / n);
                c.x.push_back(s0);
                c.y.push_back(cosine / n);
            }
            iip.series.push_back(std::move(s));
            iip.series.push_back(std::move(c));
        }
        plot::write_both(out_dir + "/iip_vs_sigma0", iip);
        written.push_back("iip_vs_sigma0");
    }

    // SSIM vs round / batch size / iterations, from the per-cell metadata.
    struct Sample {
        double x;
        double ssim;
    };
    std::map<std::string, std::vector<Sample>> vs_round, vs_batch, vs_iters;
    for (const auto& setting : report.at("settings")) {
        if (setting.at("sigma0").get<double>() != 0.0) continue;
        for (const auto& client : setting.at("clients"))
            for (const auto& round : client.at("rounds"))
                for (const auto& cell : round.at("cells")) {
                    const auto& res = cell.at("result");
                    double mean = 0.0;
                    int n = 0;
                    for (const auto& rec : res.at("records")) {
                        mean += rec.at("ssim").get<double>();
                        ++n;
                    }
                    if (!n) continue;
                    mean /= n;
                    const std::string id = client.at("id").get<std::string>();
                    vs_round[id].push_back({static_cast<double>(round.at("round").get<int>()), mean});
                    vs_batch[id].push_back({static_cast<double>(res.at("batch_size").get<int>()), mean});
                    vs_iters[id].push_back({static_cast<double>(res.at("n_iterations").get<int>()), mean});
                }
    }
    auto emit_ssim_chart = [&](const char* name, const char* xlabel,
                               const std::map<std::string, std::vector<Sample>>& data) {
        std::set<double> xs;
        for (const auto& [id, samples] : data)
            for (const auto& s : samples) xs.insert(s.x);
        if (xs.size() < 2) return;  // nothing to sweep
        plot::Chart chart;
        chart.title = std::string("SSIM vs ") + xlabel;
        chart.xlabel = xlabel;
        chart.ylabel = "SSIM";
        std::size_t ci = 0;
        for (const auto& [id, samples] : data) {
            std::map<double, std::pair<double, int>> agg;
            for (const auto& s : samples) {
                agg[s.x].first += s.ssim;
                agg[s.x].second += 1;
            }
            plot::Series series;
            series.label = id;
            series.color = color_for(ci++);
            for (const auto& [x, acc] : agg) {
                series.x.push_back(x);
                series.y.push_back(acc.first / acc.second);
            }
            chart.series.push_back(std::move(series));
        }
        plot::write_both(out_dir + "/" + name, chart);
        written.push_back(name);
    };
    emit_ssim_chart("ssim_vs_round", "round", vs_round);
    emit_ssim_chart("ssim_vs_batch_size", "batch size", vs_batch);
    emit_ssim_chart("ssim_vs_iterations", "local iterations", vs_iters);

    if (report.contains("embedding_scatter")) {
        plot::Chart scatter;
        scatter.title = "Embeddings of originals and reconstructions";
        scatter.xlabel = "t-SNE 1";
        scatter.ylabel = "t-SNE 2";
        for (const auto& p : report.at("embedding_scatter"))
            scatter.scatter.push_back({p.at("x").get<double>(), p.at("y").get<double>(),
                                       std::max(0.0, p.at("sigma0").get<double>()),
                                       p.at("original").get<bool>()});
        plot::write_both(out_dir + "/embedding_scatter", scatter);
        written.push_back("embedding_scatter");
    }
    return written;
}

}  // namespace fedleak::report
