#include <doctest.h>

#include <algorithm>

#include "bathykl/cloud.hpp"
#include "bathykl/config.hpp"
#include "bathykl/errors.hpp"
#include "bathykl/slam.hpp"
#include "bathykl/synthworld.hpp"

using namespace bathykl;
using namespace bathykl::synthworld;

TEST_SUITE_BEGIN("unit");

TEST_CASE("height of an empty field is the base depth") {
    TerrainField field;
    field.base_depth = -42.0;
    CHECK(height(field, 0, 0) == -42.0);
    CHECK(height(field, 123.4, -55.6) == -42.0);
}

TEST_CASE("gaussian bump peaks at its center") {
    TerrainField field;
    field.base_depth = -40.0;
    TerrainComponent bump;
    bump.kind = TerrainComponent::Kind::GaussianBump;
    bump.amplitude = 2.0;
    bump.length_scale = 3.0;
    field.components.push_back(bump);
    CHECK(height(field, 0, 0) == doctest::Approx(-38.0).epsilon(1e-15));
    CHECK(height(field, 100, 0) == doctest::Approx(-40.0).epsilon(1e-9));
}

TEST_CASE("ridge is constant along its axis") {
    TerrainField field;
    field.base_depth = -40.0;
    TerrainComponent ridge;
    ridge.kind = TerrainComponent::Kind::Ridge;
    ridge.amplitude = 3.0;
    ridge.length_scale = 2.0;
    ridge.x = 1.0;
    ridge.y = 2.0;
    ridge.orientation = 0.6;
    field.components.push_back(ridge);

    const double c = std::cos(0.6), s = std::sin(0.6);
    const double h1 = height(field, 1.0 + 5.0 * c, 2.0 + 5.0 * s);
    const double h2 = height(field, 1.0 - 11.0 * c, 2.0 - 11.0 * s);
    CHECK(std::abs(h1 - h2) < 1e-9);
    // And varies across it.
    CHECK(std::abs(height(field, 1.0 - 5.0 * s, 2.0 + 5.0 * c) - h1) > 0.1);
}

TEST_CASE("fractal octaves are deterministic and bounded") {
    TerrainField field;
    field.seed = 77;
    field.base_depth = 0.0;
    TerrainComponent frac;
    frac.kind = TerrainComponent::Kind::FractalOctave;
    frac.amplitude = 1.5;
    frac.length_scale = 10.0;
    frac.octaves = 4;
    field.components.push_back(frac);

    for (double x = -20; x <= 20; x += 3.7) {
        for (double y = -20; y <= 20; y += 2.9) {
            const double h = height(field, x, y);
            CHECK(std::isfinite(h));
            CHECK(std::abs(h) <= 1.5 + 1e-12);
            CHECK(h == height(field, x, y));
        }
    }
}

TEST_CASE("flat survey puts every point at the base depth") {
    TerrainField field;
    field.base_depth = -40.0;
    SurveyPlan plan;
    plan.n_lines = 1;
    plan.line_length = 30.0;
    const Survey survey = simulate_survey(field, plan, 10.0, 1);
    REQUIRE(!survey.submaps.empty());
    for (const auto& s : survey.submaps) {
        CHECK((s.points.col(2).array() + 40.0).abs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("100 m line with 10 m submaps yields 10 submaps") {
    TerrainField field;
    SurveyPlan plan;
    plan.n_lines = 1;
    plan.line_length = 100.0;
    plan.ping_spacing = 0.5;
    const Survey survey = simulate_survey(field, plan, 10.0, 1);
    CHECK(survey.submaps.size() == 10);
    CHECK(survey.true_poses.size() == 10);
    for (const auto& s : survey.submaps) s.validate();
}

TEST_CASE("submap lengths are equal give or take one ping") {
    TerrainField field;
    SurveyPlan plan;
    plan.n_lines = 2;
    plan.line_length = 95.0;
    plan.ping_spacing = 0.5;
    plan.beams_per_ping = 4;
    const Survey survey = simulate_survey(field, plan, 10.0, 1);
    std::vector<Eigen::Index> counts;
    for (const auto& s : survey.submaps) counts.push_back(s.points.rows());
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    CHECK(*hi - *lo <= 2 * plan.beams_per_ping);
}

TEST_CASE("adjacent lines with spacing under the swath overlap at 60 percent") {
    TerrainField field;
    SurveyPlan plan;
    plan.n_lines = 2;
    plan.line_length = 60.0;
    plan.line_spacing = 2.8;  // 0.35 of the swath
    plan.swath_width = 8.0;
    plan.beams_per_ping = 16;
    const Survey survey = simulate_survey(field, plan, 12.0, 1);

    // Analytic overlap of two swath rectangles offset across-track:
    // (swath - spacing) / swath = 0.65 >= 0.6.
    bool found = false;
    const std::size_t per_line = survey.submaps.size() / 2;
    for (std::size_t i = per_line; i < survey.submaps.size() && !found; ++i) {
        for (std::size_t j = 0; j < per_line && !found; ++j) {
            if (slam::footprint_overlap(survey.submaps[i], survey.submaps[j]) >= 0.6) {
                found = true;
            }
        }
    }
    CHECK(found);
}

TEST_CASE("surveys are bit-identical for identical seeds") {
    cli::ConfigDoc doc;
    doc.set("plan.n_lines", "2");
    doc.set("plan.line_length", "40");
    const cli::RunConfig cfg = cli::RunConfig::from(doc);
    const TerrainField field = cfg.make_field();

    const Survey a = simulate_survey(field, cfg.plan, cfg.submap_length, 5);
    const Survey b = simulate_survey(field, cfg.plan, cfg.submap_length, 5);
    REQUIRE(a.submaps.size() == b.submaps.size());
    for (std::size_t i = 0; i < a.submaps.size(); ++i) {
        CHECK((a.submaps[i].points - b.submaps[i].points).norm() == 0.0);
        CHECK((a.true_poses[i].translation - b.true_poses[i].translation).norm() == 0.0);
    }
}

TEST_CASE("empty plans raise EmptySurvey") {
    TerrainField field;
    SurveyPlan plan;
    plan.n_lines = 0;
    CHECK_THROWS_AS((void)simulate_survey(field, plan, 10.0, 1), EmptySurvey);
}

TEST_CASE("mixed corpus spans the sigma_z range") {
    cli::ConfigDoc doc;
    doc.set("plan.n_lines", "6");
    doc.set("plan.line_length", "200");
    doc.set("world.terrain", "mixed");
    const cli::RunConfig cfg = cli::RunConfig::from(doc);
    const TerrainField field = cfg.make_field();
    const Survey survey = simulate_survey(field, cfg.plan, cfg.submap_length, cfg.seed);

    double lo = 1e9, hi = -1e9;
    for (const auto& s : survey.submaps) {
        const double sz = cloud::sigma_z(cloud::preprocess(s, cfg.voxel_size));
        lo = std::min(lo, sz);
        hi = std::max(hi, sz);
    }
    CHECK(lo <= 0.01);
    CHECK(hi >= 0.2);
}

TEST_SUITE_END();
