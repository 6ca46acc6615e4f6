#include "bathykl/config.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "bathykl/errors.hpp"

namespace bathykl::cli {

namespace {

const std::array<std::pair<const char*, const char*>, 54> kDefaults{{
    {"seed", "1"},

    {"world.base_depth", "-40.0"},
    {"world.terrain", "mixed"},
    {"world.n_bumps", "6"},
    {"world.n_ridges", "4"},
    {"world.amp_min", "0.8"},
    {"world.amp_max", "5.0"},
    {"world.scale_min", "3.0"},
    {"world.scale_max", "10.0"},
    {"world.fractal_amplitude", "0.0"},
    {"world.fractal_scale", "30.0"},
    {"world.fractal_octaves", "4"},

    {"plan.n_lines", "4"},
    {"plan.line_length", "120.0"},
    {"plan.line_spacing", "2.8"},
    {"plan.heading", "0.0"},
    {"plan.speed", "2.0"},
    {"plan.swath_width", "8.0"},
    {"plan.ping_spacing", "0.5"},
    {"plan.beams_per_ping", "16"},
    {"plan.submap_length", "12.0"},

    {"cloud.voxel_size", "0.05"},
    {"cloud.knn", "20"},
    {"cloud.epsilon_plane", "1e-3"},
    {"cloud.noise_x", "0.0"},
    {"cloud.noise_y", "0.0"},
    {"cloud.noise_z", "0.1"},

    {"gicp.max_iterations", "50"},
    {"gicp.translation_tolerance", "1e-4"},
    {"gicp.max_correspondence_distance", "5.0"},
    {"gicp.cost_rel_tol", "1e-3"},

    {"mc.iterations", "1000"},
    {"mc.prior_a", "9.0"},
    {"mc.max_failure_fraction", "0.2"},

    {"model.point_mlp", "64,64,64,128,1024"},
    {"model.head", "1000,1000,1000,1000"},
    {"model.output_dim", "2"},
    {"model.dropout", "0.4"},
    {"model.use_input_transform", "false"},
    {"model.tnet_mlp", "64,128,1024"},
    {"model.tnet_fc", "512,256"},
    {"model.init_log_variance", "2.1972245773362196"},

    {"train.learning_rate", "1e-4"},
    {"train.weight_decay", "1e-4"},
    {"train.batch_size", "500"},
    {"train.validation_fraction", "0.2"},
    {"train.patience", "20"},
    {"train.max_episodes", "1000"},

    {"slam.coverage", "0.6"},
    {"slam.r_xy_sigma", "0.1"},
    {"slam.r_yaw_sigma", "0.1"},
    {"slam.rc_yaw_var", "0.01"},
    {"slam.m2m_cell", "1.0"},
    {"slam.trials", "20"},
}};

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

}  // namespace

ConfigDoc::ConfigDoc() {
    for (const auto& [key, value] : kDefaults) {
        values_[key] = value;
    }
}

void ConfigDoc::set(const std::string& key, const std::string& value) {
    const auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigError("unknown config key: " + key);
    }
    it->second = value;
}

void ConfigDoc::load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                              ": expected `key = value`");
        }
        set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
}

std::string ConfigDoc::get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
}

double ConfigDoc::get_double(const std::string& key) const {
    const std::string v = get_string(key);
    std::size_t pos = 0;
    double out;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not a number: " + v);
    }
    if (pos != v.size()) throw ConfigError("config key " + key + ": not a number: " + v);
    return out;
}

int ConfigDoc::get_int(const std::string& key) const {
    const double d = get_double(key);
    const int i = static_cast<int>(std::llround(d));
    if (d != static_cast<double>(i)) {
        throw ConfigError("config key " + key + ": not an integer");
    }
    return i;
}

std::uint64_t ConfigDoc::get_u64(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an unsigned integer: " + v);
    }
}

bool ConfigDoc::get_bool(const std::string& key) const {
    const std::string v = get_string(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key " + key + ": not a boolean: " + v);
}

std::vector<int> ConfigDoc::get_int_list(const std::string& key) const {
    const std::string v = get_string(key);
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(trim(item)));
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": bad integer list: " + v);
        }
    }
    if (out.empty()) throw ConfigError("config key " + key + ": empty list");
    return out;
}

std::string ConfigDoc::canonical() const {
    std::string out;
    for (const auto& [key, value] : values_) {  // std::map iterates sorted
        out += key;
        out += " = ";
        out += value;
        out += "\n";
    }
    return out;
}

std::string ConfigDoc::hash_hex() const {
    const std::string doc = canonical();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : doc) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

RunConfig RunConfig::from(const ConfigDoc& doc) {
    RunConfig cfg;
    cfg.seed = doc.get_u64("seed");

    cfg.base_depth = doc.get_double("world.base_depth");
    cfg.terrain = doc.get_string("world.terrain");
    if (cfg.terrain != "flat" && cfg.terrain != "bumps" && cfg.terrain != "ridges" &&
        cfg.terrain != "mixed") {
        throw ConfigError("world.terrain must be flat|bumps|ridges|mixed");
    }
    cfg.n_bumps = doc.get_int("world.n_bumps");
    cfg.n_ridges = doc.get_int("world.n_ridges");
    cfg.amp_min = doc.get_double("world.amp_min");
    cfg.amp_max = doc.get_double("world.amp_max");
    cfg.scale_min = doc.get_double("world.scale_min");
    cfg.scale_max = doc.get_double("world.scale_max");
    cfg.fractal_amplitude = doc.get_double("world.fractal_amplitude");
    cfg.fractal_scale = doc.get_double("world.fractal_scale");
    cfg.fractal_octaves = doc.get_int("world.fractal_octaves");

    cfg.plan.n_lines = doc.get_int("plan.n_lines");
    cfg.plan.line_length = doc.get_double("plan.line_length");
    cfg.plan.line_spacing = doc.get_double("plan.line_spacing");
    cfg.plan.heading = doc.get_double("plan.heading");
    cfg.plan.speed = doc.get_double("plan.speed");
    cfg.plan.swath_width = doc.get_double("plan.swath_width");
    cfg.plan.ping_spacing = doc.get_double("plan.ping_spacing");
    cfg.plan.beams_per_ping = doc.get_int("plan.beams_per_ping");
    cfg.submap_length = doc.get_double("plan.submap_length");

    cfg.voxel_size = doc.get_double("cloud.voxel_size");
    cfg.noise_sigma = geom::Vec3(doc.get_double("cloud.noise_x"), doc.get_double("cloud.noise_y"),
                                 doc.get_double("cloud.noise_z"));

    cfg.gicp.max_iterations = doc.get_int("gicp.max_iterations");
    cfg.gicp.translation_tolerance = doc.get_double("gicp.translation_tolerance");
    cfg.gicp.max_correspondence_distance = doc.get_double("gicp.max_correspondence_distance");
    cfg.gicp.cost_rel_tol = doc.get_double("gicp.cost_rel_tol");
    cfg.gicp.k_neighbors = doc.get_int("cloud.knn");
    cfg.gicp.epsilon_plane = doc.get_double("cloud.epsilon_plane");
    cfg.gicp.validate();

    cfg.mc.iterations = doc.get_int("mc.iterations");
    cfg.mc.sigma_xyz = cfg.noise_sigma;
    cfg.mc.seed = cfg.seed;
    cfg.mc.max_failure_fraction = doc.get_double("mc.max_failure_fraction");
    cfg.prior.a = doc.get_double("mc.prior_a");
    cfg.prior.validate();

    cfg.model.point_mlp_sizes = doc.get_int_list("model.point_mlp");
    cfg.model.head_sizes = doc.get_int_list("model.head");
    cfg.model.output_dim = doc.get_int("model.output_dim");
    cfg.model.dropout_p = doc.get_double("model.dropout");
    cfg.model.use_input_transform = doc.get_bool("model.use_input_transform");
    cfg.model.tnet_mlp_sizes = doc.get_int_list("model.tnet_mlp");
    cfg.model.tnet_fc_sizes = doc.get_int_list("model.tnet_fc");
    cfg.model.init_log_variance = doc.get_double("model.init_log_variance");
    cfg.model.validate();

    cfg.train.learning_rate = doc.get_double("train.learning_rate");
    cfg.train.weight_decay = doc.get_double("train.weight_decay");
    cfg.train.batch_size = doc.get_int("train.batch_size");
    cfg.train.validation_fraction = doc.get_double("train.validation_fraction");
    cfg.train.patience = doc.get_int("train.patience");
    cfg.train.max_episodes = doc.get_int("train.max_episodes");
    cfg.train.seed = cfg.seed;
    cfg.train.validate();

    cfg.policy.coverage = doc.get_double("slam.coverage");
    cfg.policy.prior = cfg.prior;
    const double rxy = doc.get_double("slam.r_xy_sigma");
    const double ryaw = doc.get_double("slam.r_yaw_sigma");
    cfg.policy.dr_sigma = geom::Vec3(rxy, rxy, ryaw);
    cfg.policy.validate();
    cfg.rc_yaw_var = doc.get_double("slam.rc_yaw_var");
    cfg.m2m_cell = doc.get_double("slam.m2m_cell");
    cfg.trials = doc.get_int("slam.trials");

    cfg.config_hash = doc.hash_hex();
    return cfg;
}

synthworld::TerrainField RunConfig::make_field() const {
    synthworld::TerrainField field;
    field.seed = derive_seed(seed, 0x74657272ULL);
    field.base_depth = base_depth;

    const double x_lo = -plan.swath_width, x_hi = plan.line_length + plan.swath_width;
    const double y_lo = -plan.swath_width;
    const double y_hi = (plan.n_lines - 1) * plan.line_spacing + plan.swath_width;
    Rng rng(derive_seed(seed, 0x636f6d70ULL));

    const bool bumps = terrain == "bumps" || terrain == "mixed";
    const bool ridges = terrain == "ridges" || terrain == "mixed";
    if (bumps) {
        for (int i = 0; i < n_bumps; ++i) {
            synthworld::TerrainComponent c;
            c.kind = synthworld::TerrainComponent::Kind::GaussianBump;
            c.amplitude = rng.uniform(amp_min, amp_max);
            c.length_scale = rng.uniform(scale_min, scale_max);
            c.x = rng.uniform(x_lo, x_hi);
            c.y = rng.uniform(y_lo, y_hi);
            field.components.push_back(c);
        }
    }
    if (ridges) {
        for (int i = 0; i < n_ridges; ++i) {
            synthworld::TerrainComponent c;
            c.kind = synthworld::TerrainComponent::Kind::Ridge;
            c.amplitude = rng.uniform(amp_min, amp_max);
            c.length_scale = rng.uniform(scale_min, scale_max);
            c.x = rng.uniform(x_lo, x_hi);
            c.y = rng.uniform(y_lo, y_hi);
            c.orientation = rng.uniform(0.0, M_PI);
            field.components.push_back(c);
        }
    }
    if (terrain != "flat" && fractal_amplitude > 0.0) {
        synthworld::TerrainComponent c;
        c.kind = synthworld::TerrainComponent::Kind::FractalOctave;
        c.amplitude = fractal_amplitude;
        c.length_scale = fractal_scale;
        c.octaves = fractal_octaves;
        field.components.push_back(c);
    }
    return field;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& config_path,
                          std::optional<std::uint64_t> seed_override) {
    ConfigDoc doc;
    if (config_path) doc.load_file(*config_path);
    if (seed_override) doc.set("seed", std::to_string(*seed_override));
    return RunConfig::from(doc);
}

}  // namespace bathykl::cli
