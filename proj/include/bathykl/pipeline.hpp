#pragma once

#include <filesystem>
#include <vector>

#include "bathykl/config.hpp"
#include "bathykl/mccov.hpp"
#include "bathykl/net.hpp"
#include "bathykl/synthworld.hpp"

namespace bathykl::pipeline {

namespace fs = std::filesystem;

/// Writes submap files plus survey.json under out_dir; prints a per-submap
/// sigma_z summary. Returns the manifest path.
fs::path cmd_synth(const cli::RunConfig& cfg, const fs::path& out_dir);

struct LoadedSurvey {
    synthworld::Survey survey;
    double submap_length = 0.0;
};
LoadedSurvey load_survey(const fs::path& manifest);

/// Builds dataset.jsonl and normalized cloud files under out_dir. Reruns
/// skip submap ids already present in an existing manifest. Returns the
/// manifest path.
fs::path cmd_mc_dataset(const cli::RunConfig& cfg, const fs::path& survey_manifest,
                        const fs::path& out_dir, int threads);

std::vector<mccov::DatasetEntry> load_dataset(const fs::path& manifest);

struct TrainOutputs {
    fs::path checkpoint;
    fs::path loss_csv;
};
TrainOutputs cmd_train(const cli::RunConfig& cfg, const fs::path& dataset_manifest,
                       const fs::path& out_dir);

/// Predicted covariance per submap file, one CSV row each, with a wall-time
/// column. Returns the CSV path.
fs::path cmd_predict(const cli::RunConfig& cfg, const fs::path& checkpoint,
                     const std::vector<fs::path>& submap_files, const fs::path& out_dir);

struct SlamEvalOutputs {
    fs::path results_csv;
    fs::path trajectories_csv;
};
/// Per seeded trial: build a corrupted graph, optimize with the four
/// covariance sets (MC, Constant Q, Naive GICP, learned), report RMSE_xyz
/// and map-to-map against the corrupted baseline. A final `mean` row
/// averages the trials.
SlamEvalOutputs cmd_slam_eval(const cli::RunConfig& cfg, const fs::path& survey_manifest,
                              const fs::path& checkpoint, const fs::path& out_dir, int trials,
                              int threads);

/// Renders loss.svg / trajectories.svg from the CSVs living in dir.
std::vector<fs::path> cmd_report(const fs::path& dir);

}  // namespace bathykl::pipeline
