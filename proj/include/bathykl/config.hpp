#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "bathykl/mccov.hpp"
#include "bathykl/net.hpp"
#include "bathykl/registration.hpp"
#include "bathykl/slam.hpp"
#include "bathykl/synthworld.hpp"

namespace bathykl::cli {

inline constexpr const char* kVersion = "0.1.0";

/// Flat dotted-key configuration document. Every key has a default; unknown
/// keys are rejected. File syntax: `key = value` lines, `#` comments.
class ConfigDoc {
public:
    ConfigDoc();  // defaults

    void load_file(const std::filesystem::path& path);
    void set(const std::string& key, const std::string& value);  // rejects unknown keys

    std::string get_string(const std::string& key) const;
    double get_double(const std::string& key) const;
    int get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;

    /// Sorted `key = value` document of the effective configuration.
    std::string canonical() const;
    /// FNV-1a hash of canonical(), as 16 hex digits.
    std::string hash_hex() const;

private:
    std::map<std::string, std::string> values_;
};

/// Typed view over the document, one field group per pipeline stage.
struct RunConfig {
    std::uint64_t seed = 1;

    // world
    double base_depth = -40.0;
    std::string terrain = "mixed";  // flat | bumps | ridges | mixed
    int n_bumps = 6;
    int n_ridges = 4;
    double amp_min = 0.8;
    double amp_max = 5.0;
    double scale_min = 3.0;
    double scale_max = 10.0;
    double fractal_amplitude = 0.0;
    double fractal_scale = 30.0;
    int fractal_octaves = 4;

    synthworld::SurveyPlan plan;
    double submap_length = 12.0;

    // cloud
    double voxel_size = 0.05;
    geom::Vec3 noise_sigma{0.0, 0.0, 0.1};

    registration::GicpConfig gicp;
    mccov::McConfig mc;
    mccov::PerturbationPrior prior;

    net::ModelConfig model;
    net::TrainConfig train;

    // slam
    slam::LcPolicy policy;
    double rc_yaw_var = 0.01;
    double m2m_cell = 1.0;
    int trials = 20;

    std::string config_hash;  // of the source document

    static RunConfig from(const ConfigDoc& doc);

    /// Terrain components drawn over the survey's bounding box.
    synthworld::TerrainField make_field() const;
};

/// Loads defaults, applies the optional file, then the optional seed override.
RunConfig load_run_config(const std::optional<std::filesystem::path>& config_path,
                          std::optional<std::uint64_t> seed_override);

}  // namespace bathykl::cli
