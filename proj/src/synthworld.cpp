#include "bathykl/synthworld.hpp"

#include <cmath>

#include "bathykl/errors.hpp"

namespace bathykl::synthworld {

namespace {

// Deterministic value in [-1, 1] at an integer lattice node.
double lattice_value(std::uint64_t seed, std::int64_t ix, std::int64_t iy, int octave) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(ix) * 0x9e3779b1ULL,
                        static_cast<std::uint64_t>(iy) * 0x85ebca77ULL,
                        static_cast<std::uint64_t>(octave)));
    return 2.0 * rng.uniform01() - 1.0;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Bilinear value noise with smoothstep fade, period length_scale.
double value_noise(std::uint64_t seed, double x, double y, int octave) {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx);
    const auto iy = static_cast<std::int64_t>(fy);
    const double tx = smoothstep(x - fx);
    const double ty = smoothstep(y - fy);
    const double v00 = lattice_value(seed, ix, iy, octave);
    const double v10 = lattice_value(seed, ix + 1, iy, octave);
    const double v01 = lattice_value(seed, ix, iy + 1, octave);
    const double v11 = lattice_value(seed, ix + 1, iy + 1, octave);
    const double a = v00 + tx * (v10 - v00);
    const double b = v01 + tx * (v11 - v01);
    return a + ty * (b - a);
}

double component_height(const TerrainField& field, const TerrainComponent& c, std::size_t index,
                        double x, double y) {
    switch (c.kind) {
        case TerrainComponent::Kind::GaussianBump: {
            const double dx = x - c.x, dy = y - c.y;
            const double s2 = c.length_scale * c.length_scale;
            return c.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * s2));
        }
        case TerrainComponent::Kind::Ridge: {
            // Perpendicular distance to the axis through (c.x, c.y) with
            // heading c.orientation.
            const double nx = -std::sin(c.orientation), ny = std::cos(c.orientation);
            const double d = (x - c.x) * nx + (y - c.y) * ny;
            const double s2 = c.length_scale * c.length_scale;
            return c.amplitude * std::exp(-d * d / (2.0 * s2));
        }
        case TerrainComponent::Kind::FractalOctave: {
            const std::uint64_t comp_seed = derive_seed(field.seed, 0xfac7a1ULL, index);
            double sum = 0.0;
            double amp = 1.0;
            double freq = 1.0 / std::max(c.length_scale, 1e-9);
            double norm = 0.0;
            for (int o = 0; o < c.octaves; ++o) {
                sum += amp * value_noise(comp_seed, x * freq, y * freq, o);
                norm += amp;
                amp *= 0.5;
                freq *= 2.0;
            }
            return c.amplitude * (norm > 0 ? sum / norm : 0.0);
        }
    }
    return 0.0;
}

}  // namespace

double height(const TerrainField& field, double x, double y) {
    double h = field.base_depth;
    for (std::size_t i = 0; i < field.components.size(); ++i) {
        h += component_height(field, field.components[i], i, x, y);
    }
    return h;
}

Survey simulate_survey(const TerrainField& field, const SurveyPlan& plan, double submap_length,
                       std::uint64_t /*seed*/) {
    if (submap_length <= plan.ping_spacing) {
        throw ConfigError("submap_length must exceed ping_spacing");
    }
    if (plan.ping_spacing <= 0 || plan.beams_per_ping < 1) {
        throw ConfigError("ping_spacing must be > 0 and beams_per_ping >= 1");
    }
    const int pings_per_line = plan.line_length >= 0
                                   ? static_cast<int>(std::floor(plan.line_length / plan.ping_spacing)) + 1
                                   : 0;
    if (plan.n_lines < 1 || pings_per_line < 1) {
        throw EmptySurvey("survey plan produces no pings");
    }

    const double ch = std::cos(plan.heading), sh = std::sin(plan.heading);
    const geom::Vec3 along(ch, sh, 0.0);
    const geom::Vec3 across(-sh, ch, 0.0);  // port side

    const int groups_per_line = std::max(
        1, static_cast<int>(std::floor(plan.line_length / submap_length + 0.5)));

    Survey survey;
    struct Ping {
        geom::Vec3 pos;
        double yaw;
        std::vector<geom::Vec3> beams;
    };

    std::int64_t next_id = 0;
    for (int line = 0; line < plan.n_lines; ++line) {
        const geom::Vec3 line_origin = static_cast<double>(line) * plan.line_spacing * across;
        const bool reversed = (line % 2) == 1;

        std::vector<Ping> pings(pings_per_line);
        for (int p = 0; p < pings_per_line; ++p) {
            const double s_fwd = p * plan.ping_spacing;
            const double s = reversed ? plan.line_length - s_fwd : s_fwd;
            Ping& ping = pings[p];
            ping.pos = line_origin + s * along;
            ping.yaw = plan.heading + (reversed ? M_PI : 0.0);
            ping.beams.reserve(plan.beams_per_ping);
            for (int b = 0; b < plan.beams_per_ping; ++b) {
                const double frac = plan.beams_per_ping == 1
                                        ? 0.0
                                        : static_cast<double>(b) / (plan.beams_per_ping - 1) - 0.5;
                const geom::Vec3 ground = ping.pos + frac * plan.swath_width * across;
                ping.beams.emplace_back(ground.x(), ground.y(),
                                        height(field, ground.x(), ground.y()));
            }
        }

        // Group consecutive pings by distance along the line. The grouping
        // length is the line length divided by the group count, so ragged
        // lines still produce submaps equal to within one ping.
        const double group_length = plan.line_length > 0
                                        ? plan.line_length / groups_per_line
                                        : submap_length;
        std::vector<std::vector<int>> groups(groups_per_line);
        for (int p = 0; p < pings_per_line; ++p) {
            const double s_fwd = p * plan.ping_spacing;
            const int g = std::min(static_cast<int>(std::floor(s_fwd / group_length)),
                                   groups_per_line - 1);
            groups[g].push_back(p);
        }

        for (const auto& group : groups) {
            if (group.empty()) continue;
            Submap sm;
            sm.id = next_id++;
            sm.points.resize(static_cast<Eigen::Index>(group.size()) * plan.beams_per_ping, 3);
            Eigen::Index row = 0;
            for (int p : group) {
                for (const auto& beam : pings[p].beams) {
                    sm.points.row(row++) = beam.transpose();
                }
            }
            const Ping& mid = pings[group[group.size() / 2]];
            sm.frame = geom::compose(geom::translate(mid.pos.x(), mid.pos.y(), mid.pos.z()),
                                     geom::rot_z(mid.yaw));
            sm.validate();
            survey.true_poses.push_back(sm.frame);
            survey.submaps.push_back(std::move(sm));
        }
    }
    if (survey.submaps.empty()) {
        throw EmptySurvey("survey produced no submaps");
    }
    return survey;
}

}  // namespace bathykl::synthworld
