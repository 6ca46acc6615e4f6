#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <thread>

#include "bathykl/errors.hpp"
#include "bathykl/pipeline.hpp"

namespace {

int default_threads() {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bathykl: learned registration covariances for bathymetric SLAM"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = default_threads();
    int trials = 0;

    app.add_option("--config", config_path, "configuration file (key = value lines)");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "seed override")->each([&](const std::string&) { seed_set = true; });
    app.add_option("--threads", threads, "worker threads for parallel stages");
    app.add_option("--trials", trials, "slam-eval trial count override");

    auto* synth = app.add_subcommand("synth", "generate a synthetic survey");
    auto* mc = app.add_subcommand("mc-dataset", "Monte-Carlo covariance dataset from a survey");
    std::string survey_manifest;
    mc->add_option("manifest", survey_manifest, "survey manifest")->required();
    auto* train = app.add_subcommand("train", "train the covariance network");
    std::string dataset_manifest;
    train->add_option("dataset", dataset_manifest, "dataset manifest")->required();
    auto* predict = app.add_subcommand("predict", "predict covariances for submap files");
    std::string checkpoint;
    std::vector<std::string> submap_files;
    predict->add_option("checkpoint", checkpoint, "model checkpoint")->required();
    predict->add_option("submaps", submap_files, "submap files")->required();
    auto* slam_eval = app.add_subcommand("slam-eval", "corrupted pose-graph comparison");
    std::string eval_manifest, eval_checkpoint;
    slam_eval->add_option("manifest", eval_manifest, "survey manifest")->required();
    slam_eval->add_option("checkpoint", eval_checkpoint, "model checkpoint")->required();
    auto* report = app.add_subcommand("report", "render SVG plots from run CSVs");

    for (auto* sub : {synth, mc, train, predict, slam_eval, report}) {
        sub->fallthrough();
    }

    CLI11_PARSE(app, argc, argv);

    try {
        const std::optional<std::filesystem::path> config =
            config_path.empty() ? std::nullopt
                                : std::optional<std::filesystem::path>(config_path);
        const std::optional<std::uint64_t> seed_override =
            seed_set ? std::optional<std::uint64_t>(seed) : std::nullopt;
        const bathykl::cli::RunConfig cfg = bathykl::cli::load_run_config(config, seed_override);

        if (synth->parsed()) {
            const auto manifest = bathykl::pipeline::cmd_synth(cfg, out_dir);
            std::cout << "wrote " << manifest.string() << "\n";
        } else if (mc->parsed()) {
            const auto manifest =
                bathykl::pipeline::cmd_mc_dataset(cfg, survey_manifest, out_dir, threads);
            std::cout << "wrote " << manifest.string() << "\n";
        } else if (train->parsed()) {
            const auto outputs = bathykl::pipeline::cmd_train(cfg, dataset_manifest, out_dir);
            std::cout << "wrote " << outputs.checkpoint.string() << " and "
                      << outputs.loss_csv.string() << "\n";
        } else if (predict->parsed()) {
            std::vector<std::filesystem::path> files(submap_files.begin(), submap_files.end());
            const auto csv = bathykl::pipeline::cmd_predict(cfg, checkpoint, files, out_dir);
            std::cout << "wrote " << csv.string() << "\n";
        } else if (slam_eval->parsed()) {
            const int n_trials = trials > 0 ? trials : cfg.trials;
            const auto outputs = bathykl::pipeline::cmd_slam_eval(cfg, eval_manifest,
                                                                  eval_checkpoint, out_dir,
                                                                  n_trials, threads);
            std::cout << "wrote " << outputs.results_csv.string() << " and "
                      << outputs.trajectories_csv.string() << "\n";
        } else if (report->parsed()) {
            for (const auto& p : bathykl::pipeline::cmd_report(out_dir)) {
                std::cout << "wrote " << p.string() << "\n";
            }
        }
    } catch (const bathykl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const bathykl::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const bathykl::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
