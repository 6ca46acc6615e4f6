#include "bathykl/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bathykl/errors.hpp"
#include "bathykl/slam.hpp"

namespace bathykl::pipeline {

using nlohmann::json;

namespace {

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc;
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

void write_csv_header(std::ofstream& out, const cli::RunConfig& cfg, const char* command) {
    out << "# bathykl v" << cli::kVersion << "\n";
    out << "# command: " << command << "\n";
    out << "# config_hash: " << cfg.config_hash << "\n";
    out << "# generated_at: " << timestamp_utc() << "\n";
}

json provenance_json(const cli::RunConfig& cfg, const char* command) {
    return json{{"tool", "bathykl"},
                {"version", cli::kVersion},
                {"command", command},
                {"config_hash", cfg.config_hash},
                {"generated_at", timestamp_utc()}};
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

json pose_json(const geom::RigidTransform& t) {
    const auto p = geom::pose_to_seven(t);
    return json(std::vector<double>(p.begin(), p.end()));
}

geom::RigidTransform pose_from_json(const json& j) {
    std::array<double, 7> p;
    for (int i = 0; i < 7; ++i) p[i] = j.at(i).get<double>();
    return geom::pose_from_seven(p);
}

std::string submap_file_name(std::int64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%05lld.txt", static_cast<long long>(id));
    return buf;
}

}  // namespace

// --- synth ---------------------------------------------------------------

fs::path cmd_synth(const cli::RunConfig& cfg, const fs::path& out_dir) {
    const auto field = cfg.make_field();
    const auto survey = synthworld::simulate_survey(field, cfg.plan, cfg.submap_length,
                                                    derive_seed(cfg.seed, 0x73757276ULL));

    fs::create_directories(out_dir / "submaps");
    json submaps = json::array();
    double sz_min = 1e9, sz_max = -1e9, sz_sum = 0.0;
    for (const auto& s : survey.submaps) {
        const std::string rel = "submaps/" + submap_file_name(s.id);
        cloud::save_submap_text(out_dir / rel, s);
        const double sz = cloud::sigma_z(cloud::preprocess(s, cfg.voxel_size));
        std::cout << "submap " << s.id << " points " << s.points.rows() << " sigma_z " << sz
                  << "\n";
        sz_min = std::min(sz_min, sz);
        sz_max = std::max(sz_max, sz);
        sz_sum += sz;
        submaps.push_back({{"id", s.id}, {"file", rel}, {"pose", pose_json(s.frame)}});
    }
    std::cout << "submaps " << survey.submaps.size() << " sigma_z min " << sz_min << " mean "
              << sz_sum / static_cast<double>(survey.submaps.size()) << " max " << sz_max << "\n";

    json field_json{{"seed", field.seed}, {"base_depth", field.base_depth}};
    json comps = json::array();
    for (const auto& c : field.components) {
        const char* kind = c.kind == synthworld::TerrainComponent::Kind::GaussianBump ? "bump"
                           : c.kind == synthworld::TerrainComponent::Kind::Ridge     ? "ridge"
                                                                                     : "fractal";
        comps.push_back({{"kind", kind},
                         {"amplitude", c.amplitude},
                         {"length_scale", c.length_scale},
                         {"x", c.x},
                         {"y", c.y},
                         {"orientation", c.orientation},
                         {"octaves", c.octaves}});
    }
    field_json["components"] = comps;

    json manifest{{"provenance", provenance_json(cfg, "synth")},
                  {"field", field_json},
                  {"plan",
                   {{"n_lines", cfg.plan.n_lines},
                    {"line_length", cfg.plan.line_length},
                    {"line_spacing", cfg.plan.line_spacing},
                    {"heading", cfg.plan.heading},
                    {"speed", cfg.plan.speed},
                    {"swath_width", cfg.plan.swath_width},
                    {"ping_spacing", cfg.plan.ping_spacing},
                    {"beams_per_ping", cfg.plan.beams_per_ping}}},
                  {"submap_length", cfg.submap_length},
                  {"submaps", submaps}};

    const fs::path manifest_path = out_dir / "survey.json";
    std::ofstream out(manifest_path);
    if (!out) throw DataError("cannot open for writing: " + manifest_path.string());
    out << manifest.dump(2) << "\n";
    return manifest_path;
}

LoadedSurvey load_survey(const fs::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw DataError("cannot open survey manifest: " + manifest.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("bad survey manifest: " + std::string(e.what()));
    }
    LoadedSurvey out;
    out.submap_length = j.at("submap_length").get<double>();
    const fs::path base = manifest.parent_path();
    for (const auto& s : j.at("submaps")) {
        cloud::Submap sm =
            cloud::load_submap(base / s.at("file").get<std::string>(), s.at("id").get<std::int64_t>());
        sm.frame = pose_from_json(s.at("pose"));
        out.survey.true_poses.push_back(sm.frame);
        out.survey.submaps.push_back(std::move(sm));
    }
    if (out.survey.submaps.empty()) throw DataError("survey manifest lists no submaps");
    return out;
}

// --- mc-dataset -----------------------------------------------------------

fs::path cmd_mc_dataset(const cli::RunConfig& cfg, const fs::path& survey_manifest,
                        const fs::path& out_dir, int threads) {
    const LoadedSurvey loaded = load_survey(survey_manifest);
    fs::create_directories(out_dir / "normalized");
    const fs::path manifest_path = out_dir / "dataset.jsonl";

    // Resume: keep rows whose ids are already present.
    std::map<std::int64_t, std::string> rows;
    if (fs::exists(manifest_path)) {
        std::ifstream existing(manifest_path);
        std::string line;
        while (std::getline(existing, line)) {
            if (line.empty() || line[0] == '#') continue;
            try {
                const json j = json::parse(line);
                rows[j.at("id").get<std::int64_t>()] = line;
            } catch (const json::exception&) {
                throw DataError("bad dataset manifest line: " + line);
            }
        }
    }

    for (const auto& s : loaded.survey.submaps) {
        if (rows.count(s.id)) continue;
        const cloud::NormalizedCloud nc = cloud::preprocess(s, cfg.voxel_size);
        const mccov::CovMatrix2 q = mccov::mc_covariance(s, cfg.prior, cfg.mc, cfg.gicp, threads);

        const std::string rel = "normalized/" + submap_file_name(s.id);
        cloud::Submap as_submap;
        as_submap.id = s.id;
        as_submap.points = nc.points;
        cloud::save_submap_text(out_dir / rel, as_submap);

        const json row{{"id", s.id},
                       {"cloud_file", rel},
                       {"q", {{q(0, 0), q(0, 1)}, {q(1, 0), q(1, 1)}}}};
        rows[s.id] = row.dump();
        std::cout << "mc submap " << s.id << " q [" << q(0, 0) << " " << q(0, 1) << "; " << q(1, 0)
                  << " " << q(1, 1) << "]\n";
    }

    std::ofstream out(manifest_path);
    if (!out) throw DataError("cannot open for writing: " + manifest_path.string());
    out << "# bathykl v" << cli::kVersion << "\n";
    out << "# command: mc-dataset\n";
    out << "# config_hash: " << cfg.config_hash << "\n";
    out << "# generated_at: " << timestamp_utc() << "\n";
    for (const auto& [id, line] : rows) {
        out << line << "\n";
    }
    return manifest_path;
}

std::vector<mccov::DatasetEntry> load_dataset(const fs::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw DataError("cannot open dataset manifest: " + manifest.string());
    const fs::path base = manifest.parent_path();
    std::vector<mccov::DatasetEntry> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("bad dataset manifest line: " + std::string(e.what()));
        }
        mccov::DatasetEntry entry;
        entry.submap_id = j.at("id").get<std::int64_t>();
        const cloud::Submap sm =
            cloud::load_submap(base / j.at("cloud_file").get<std::string>(), entry.submap_id);
        entry.cloud.points = sm.points;
        entry.cloud.source_id = entry.submap_id;
        const auto& q = j.at("q");
        entry.target_cov << q.at(0).at(0).get<double>(), q.at(0).at(1).get<double>(),
            q.at(1).at(0).get<double>(), q.at(1).at(1).get<double>();
        out.push_back(std::move(entry));
    }
    if (out.empty()) throw DataError("dataset manifest has no entries");
    return out;
}

// --- train ------------------------------------------------------------------

TrainOutputs cmd_train(const cli::RunConfig& cfg, const fs::path& dataset_manifest,
                       const fs::path& out_dir) {
    const auto dataset = load_dataset(dataset_manifest);
    const auto result = net::train(cfg.model, cfg.train, dataset);

    fs::create_directories(out_dir);
    TrainOutputs outputs;
    outputs.checkpoint = out_dir / "checkpoint.pnkl";
    outputs.loss_csv = out_dir / "loss.csv";

    net::save_checkpoint(outputs.checkpoint, result.model, result.best_episode, result.best_val);

    std::ofstream csv(outputs.loss_csv);
    if (!csv) throw DataError("cannot open for writing: " + outputs.loss_csv.string());
    write_csv_header(csv, cfg, "train");
    csv << "episode,train_loss,val_loss\n";
    for (const auto& row : result.history) {
        csv << row.episode << "," << fmt(row.train_loss) << "," << fmt(row.val_loss) << "\n";
    }
    std::cout << "trained " << result.episodes_run << " episodes, best validation "
              << result.best_val << " at episode " << result.best_episode << "\n";
    return outputs;
}

// --- predict ------------------------------------------------------------------

fs::path cmd_predict(const cli::RunConfig& cfg, const fs::path& checkpoint,
                     const std::vector<fs::path>& submap_files, const fs::path& out_dir) {
    if (submap_files.empty()) throw DataError("predict: no submap files given");
    const net::Model model = net::load_checkpoint(checkpoint);

    fs::create_directories(out_dir);
    const fs::path csv_path = out_dir / "predictions.csv";
    std::ofstream csv(csv_path);
    if (!csv) throw DataError("cannot open for writing: " + csv_path.string());
    write_csv_header(csv, cfg, "predict");
    csv << "file,id,qxx,qxy,qyy,wall_time_s\n";

    for (std::size_t i = 0; i < submap_files.size(); ++i) {
        const cloud::Submap s = cloud::load_submap(submap_files[i], static_cast<std::int64_t>(i));
        const auto start = std::chrono::steady_clock::now();
        const Eigen::Matrix2d q = net::predict(model, s, cfg.voxel_size);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        csv << submap_files[i].filename().string() << "," << s.id << "," << fmt(q(0, 0)) << ","
            << fmt(q(0, 1)) << "," << fmt(q(1, 1)) << "," << fmt(seconds) << "\n";
    }
    return csv_path;
}

// --- slam-eval ------------------------------------------------------------------

namespace {

struct TrialMetrics {
    double rmse = 0.0;
    double m2m = 0.0;
};

TrialMetrics evaluate_poses(const std::vector<cloud::Submap>& submaps,
                            const std::vector<geom::RigidTransform>& gt,
                            const std::vector<geom::RigidTransform>& poses,
                            const std::vector<std::pair<int, int>>& pairs, double cell) {
    TrialMetrics m;
    m.rmse = slam::rmse_xyz(poses, gt);
    m.m2m = slam::map_to_map(submaps, gt, poses, pairs, cell);
    return m;
}

}  // namespace

SlamEvalOutputs cmd_slam_eval(const cli::RunConfig& cfg, const fs::path& survey_manifest,
                              const fs::path& checkpoint, const fs::path& out_dir, int trials,
                              int threads) {
    if (trials < 1) throw ConfigError("slam-eval needs trials >= 1");
    const LoadedSurvey loaded = load_survey(survey_manifest);
    const auto& submaps = loaded.survey.submaps;
    const net::Model model = net::load_checkpoint(checkpoint);

    // Graphs per trial. Loop-closure detection runs on the uncorrupted
    // geometry, so the candidate set is shared and the per-submap covariance
    // methods can be cached across trials.
    std::vector<slam::BuildResult> builds;
    builds.reserve(trials);
    for (int t = 0; t < trials; ++t) {
        slam::CorruptionConfig corruption;
        corruption.rc.setZero();
        corruption.rc(5, 5) = cfg.rc_yaw_var;
        corruption.seed = derive_seed(cfg.seed, 0x747269ULL, static_cast<std::uint64_t>(t));
        builds.push_back(slam::build_corrupted_graph(submaps, cfg.policy, cfg.gicp, corruption));
    }

    std::set<int> candidate_nodes;
    for (const auto& b : builds) {
        for (const auto& e : b.graph.lc_edges) candidate_nodes.insert(e.b);
    }
    if (candidate_nodes.empty()) {
        throw NoOverlap("slam-eval: the survey produced no loop closures");
    }

    std::map<int, mccov::CovMatrix2> mc_q;
    std::map<int, mccov::CovMatrix2> learned_q;
    for (int node : candidate_nodes) {
        mc_q[node] = mccov::mc_covariance(submaps[node], cfg.prior, cfg.mc, cfg.gicp, threads);
        learned_q[node] = net::predict(model, submaps[node], cfg.voxel_size);
        std::cout << "candidate node " << node << " mc trace " << mc_q[node].trace()
                  << " learned trace " << learned_q[node].trace() << "\n";
    }
    mccov::CovMatrix2 const_q = mccov::CovMatrix2::Zero();
    for (const auto& [node, q] : mc_q) const_q += q;
    const_q /= static_cast<double>(mc_q.size());

    fs::create_directories(out_dir);
    SlamEvalOutputs outputs;
    outputs.results_csv = out_dir / "slam_results.csv";
    outputs.trajectories_csv = out_dir / "trajectories.csv";

    std::ofstream csv(outputs.results_csv);
    if (!csv) throw DataError("cannot open for writing: " + outputs.results_csv.string());
    write_csv_header(csv, cfg, "slam-eval");
    csv << "trial,corrupted_rmse,mc_rmse,constq_rmse,naive_rmse,ours_rmse,"
           "corrupted_m2m,mc_m2m,constq_m2m,naive_m2m,ours_m2m\n";

    enum Method { kMc = 0, kConstQ, kNaive, kOurs, kMethods };
    std::array<double, kMethods> rmse_sum{};
    std::array<double, kMethods> m2m_sum{};
    double corrupted_rmse_sum = 0.0, corrupted_m2m_sum = 0.0;
    std::vector<std::vector<geom::RigidTransform>> last_poses(kMethods);

    for (int t = 0; t < trials; ++t) {
        const auto& build = builds[t];
        std::vector<std::pair<int, int>> pairs;
        for (const auto& e : build.graph.lc_edges) pairs.emplace_back(e.a, e.b);

        const TrialMetrics corrupted = evaluate_poses(submaps, build.gt_poses,
                                                      build.graph.nodes, pairs, cfg.m2m_cell);
        corrupted_rmse_sum += corrupted.rmse;
        corrupted_m2m_sum += corrupted.m2m;

        std::array<TrialMetrics, kMethods> metrics;
        for (int method = 0; method < kMethods; ++method) {
            slam::PoseGraph graph = build.graph;
            for (auto& e : graph.lc_edges) {
                switch (method) {
                    case kMc: e.q = mc_q.at(e.b); break;
                    case kConstQ: e.q = const_q; break;
                    case kNaive: e.q = e.naive.covariance; break;
                    case kOurs: e.q = learned_q.at(e.b); break;
                }
            }
            const auto poses = slam::optimize(graph);
            metrics[method] = evaluate_poses(submaps, build.gt_poses, poses, pairs, cfg.m2m_cell);
            rmse_sum[method] += metrics[method].rmse;
            m2m_sum[method] += metrics[method].m2m;
            if (t == trials - 1) last_poses[method] = poses;
        }

        csv << t << "," << fmt(corrupted.rmse) << "," << fmt(metrics[kMc].rmse) << ","
            << fmt(metrics[kConstQ].rmse) << "," << fmt(metrics[kNaive].rmse) << ","
            << fmt(metrics[kOurs].rmse) << "," << fmt(corrupted.m2m) << ","
            << fmt(metrics[kMc].m2m) << "," << fmt(metrics[kConstQ].m2m) << ","
            << fmt(metrics[kNaive].m2m) << "," << fmt(metrics[kOurs].m2m) << "\n";
        std::cout << "trial " << t << " corrupted rmse " << corrupted.rmse << " mc "
                  << metrics[kMc].rmse << " ours " << metrics[kOurs].rmse << "\n";
    }

    const double n = static_cast<double>(trials);
    csv << "mean," << fmt(corrupted_rmse_sum / n) << "," << fmt(rmse_sum[kMc] / n) << ","
        << fmt(rmse_sum[kConstQ] / n) << "," << fmt(rmse_sum[kNaive] / n) << ","
        << fmt(rmse_sum[kOurs] / n) << "," << fmt(corrupted_m2m_sum / n) << ","
        << fmt(m2m_sum[kMc] / n) << "," << fmt(m2m_sum[kConstQ] / n) << ","
        << fmt(m2m_sum[kNaive] / n) << "," << fmt(m2m_sum[kOurs] / n) << "\n";

    // Trajectory overlay of the last trial for the report command.
    std::ofstream traj(outputs.trajectories_csv);
    if (!traj) throw DataError("cannot open for writing: " + outputs.trajectories_csv.string());
    write_csv_header(traj, cfg, "slam-eval");
    traj << "node,gt_x,gt_y,corrupted_x,corrupted_y,mc_x,mc_y,constq_x,constq_y,naive_x,naive_y,"
            "ours_x,ours_y\n";
    const auto& last_build = builds.back();
    for (std::size_t i = 0; i < submaps.size(); ++i) {
        traj << i << "," << fmt(last_build.gt_poses[i].translation.x()) << ","
             << fmt(last_build.gt_poses[i].translation.y()) << ","
             << fmt(last_build.graph.nodes[i].translation.x()) << ","
             << fmt(last_build.graph.nodes[i].translation.y());
        for (int method = 0; method < kMethods; ++method) {
            traj << "," << fmt(last_poses[method][i].translation.x()) << ","
                 << fmt(last_poses[method][i].translation.y());
        }
        traj << "\n";
    }
    return outputs;
}

}  // namespace bathykl::pipeline
