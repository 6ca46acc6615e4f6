#pragma once

#include <cstdint>
#include <vector>

#include "bathykl/cloud.hpp"
#include "bathykl/geom.hpp"

namespace bathykl::synthworld {

using cloud::Submap;
using geom::RigidTransform;

/// One additive terrain primitive. Ridges are constant along their axis, the
/// anisotropy that lets registration slide; fractal octaves add broadband
/// roughness.
struct TerrainComponent {
    enum class Kind { GaussianBump, Ridge, FractalOctave };
    Kind kind = Kind::GaussianBump;
    double amplitude = 1.0;     // m
    double length_scale = 5.0;  // m
    double x = 0.0, y = 0.0;    // center (bump) or a point on the axis (ridge)
    double orientation = 0.0;   // ridge axis heading, rad
    int octaves = 4;            // fractal only
};

struct TerrainField {
    std::uint64_t seed = 0;
    std::vector<TerrainComponent> components;
    double base_depth = -40.0;  // m
};

double height(const TerrainField& field, double x, double y);

/// Boustrophedon survey. Lines run along `heading`, successive lines offset
/// by line_spacing to port; pings every ping_spacing meters along track;
/// beams_per_ping vertical samples evenly spread across swath_width.
struct SurveyPlan {
    double line_spacing = 3.0;   // m
    double line_length = 100.0;  // m
    double heading = 0.0;        // rad
    double speed = 2.0;          // m/s, metadata only (pings are distance-triggered)
    int n_lines = 2;
    double swath_width = 8.0;   // m
    double ping_spacing = 0.5;  // m
    int beams_per_ping = 16;
};

struct Survey {
    std::vector<Submap> submaps;              // points in world frame
    std::vector<RigidTransform> true_poses;   // one per submap (== submap frames)
};

/// Samples the field along the plan and groups consecutive pings into
/// submaps of submap_length meters along track (never across line turns).
/// Each submap's frame is the vehicle pose at its midpoint ping.
Survey simulate_survey(const TerrainField& field, const SurveyPlan& plan, double submap_length,
                       std::uint64_t seed);

}  // namespace bathykl::synthworld
