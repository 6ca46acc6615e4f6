#include <doctest.h>

#include <filesystem>

#include "bathykl/config.hpp"
#include "bathykl/errors.hpp"
#include "bathykl/slam.hpp"
#include "bathykl/synthworld.hpp"

using namespace bathykl;
using namespace bathykl::slam;
using cloud::Submap;
using geom::RigidTransform;

namespace {

// Axis-aligned grid rectangle [x0,x0+w] x [y0,y0+h] at z.
Submap rect_submap(double x0, double y0, double w, double h, double z, std::int64_t id,
                   double spacing = 0.5) {
    Submap s;
    s.id = id;
    const int nx = static_cast<int>(w / spacing) + 1;
    const int ny = static_cast<int>(h / spacing) + 1;
    s.points.resize(static_cast<Eigen::Index>(nx) * ny, 3);
    Eigen::Index row = 0;
    for (int i = 0; i < nx; ++i) {
        for (int j = 0; j < ny; ++j) {
            s.points.row(row++) << x0 + i * spacing, y0 + j * spacing, z;
        }
    }
    s.frame = geom::translate(x0 + w / 2, y0 + h / 2, 0.0);
    return s;
}

cli::RunConfig survey_config() {
    cli::ConfigDoc doc;
    doc.set("plan.n_lines", "2");
    doc.set("plan.line_length", "60");
    doc.set("plan.beams_per_ping", "12");
    doc.set("world.terrain", "mixed");
    doc.set("world.n_bumps", "3");
    doc.set("world.n_ridges", "2");
    doc.set("mc.iterations", "50");
    return cli::RunConfig::from(doc);
}

}  // namespace

TEST_SUITE_BEGIN("unit");

TEST_CASE("footprint overlap basics") {
    const Submap a = rect_submap(0, 0, 10, 6, -40, 0);
    const Submap far_away = rect_submap(100, 100, 10, 6, -40, 1);
    CHECK(footprint_overlap(a, far_away) == 0.0);
    CHECK(footprint_overlap(a, a) == 1.0);
}

TEST_CASE("half-overlapping rectangles stay below the 0.6 threshold") {
    // Candidate shifted by half its width: exactly 50% of its points project
    // into the prior's hull (boundary column included on one side, excluded
    // on the other by the half-open shift).
    const Submap prior = rect_submap(0, 0, 10, 6, -40, 0);
    const Submap candidate = rect_submap(5.25, 0, 10, 6, -40, 1);
    const double overlap = footprint_overlap(candidate, prior);
    CHECK(overlap > 0.3);
    CHECK(overlap < 0.6);

    LcPolicy policy;
    const std::vector<Submap> priors{prior};
    CHECK(detect_lc(candidate, priors, policy).empty());

    const Submap close = rect_submap(1.0, 0, 10, 6, -40, 2);
    CHECK(footprint_overlap(close, prior) >= 0.6);
    CHECK(detect_lc(close, priors, policy) == std::vector<int>{0});
}

TEST_CASE("build_corrupted_graph structure") {
    const cli::RunConfig cfg = survey_config();
    const auto field = cfg.make_field();
    const auto survey =
        synthworld::simulate_survey(field, cfg.plan, cfg.submap_length, cfg.seed);

    CorruptionConfig corruption;
    corruption.seed = 3;
    const BuildResult result =
        build_corrupted_graph(survey.submaps, cfg.policy, cfg.gicp, corruption);

    CHECK(result.graph.dr_edges.size() == survey.submaps.size() - 1);
    CHECK(result.graph.lc_edges.size() >= 1);
    CHECK(result.graph.nodes.size() == survey.submaps.size());
    // Anchor stays at ground truth.
    CHECK((result.graph.nodes[0].translation - result.gt_poses[0].translation).norm() == 0.0);
    // Yaw-only corruption drifts the later nodes away.
    CHECK(rmse_xyz(result.graph.nodes, result.gt_poses) > 0.1);
}

TEST_CASE("zero corruption reproduces ground truth") {
    const cli::RunConfig cfg = survey_config();
    const auto field = cfg.make_field();
    const auto survey =
        synthworld::simulate_survey(field, cfg.plan, cfg.submap_length, cfg.seed);

    CorruptionConfig corruption;
    corruption.rc.setZero();
    corruption.seed = 3;
    const BuildResult result =
        build_corrupted_graph(survey.submaps, cfg.policy, cfg.gicp, corruption);
    for (std::size_t i = 0; i < result.gt_poses.size(); ++i) {
        CHECK((result.graph.nodes[i].translation - result.gt_poses[i].translation).norm() < 1e-9);
    }
}

TEST_CASE("graph building is deterministic") {
    const cli::RunConfig cfg = survey_config();
    const auto field = cfg.make_field();
    const auto survey =
        synthworld::simulate_survey(field, cfg.plan, cfg.submap_length, cfg.seed);
    CorruptionConfig corruption;
    corruption.seed = 11;
    const BuildResult a = build_corrupted_graph(survey.submaps, cfg.policy, cfg.gicp, corruption);
    const BuildResult b = build_corrupted_graph(survey.submaps, cfg.policy, cfg.gicp, corruption);
    REQUIRE(a.graph.lc_edges.size() == b.graph.lc_edges.size());
    for (std::size_t i = 0; i < a.graph.nodes.size(); ++i) {
        CHECK((a.graph.nodes[i].translation - b.graph.nodes[i].translation).norm() == 0.0);
    }
    for (std::size_t i = 0; i < a.graph.lc_edges.size(); ++i) {
        CHECK(a.graph.lc_edges[i].z.dx == b.graph.lc_edges[i].z.dx);
    }
}

TEST_CASE("optimize leaves a consistent graph alone") {
    // Exact chain: nodes on a line, DR measurements exactly match.
    PoseGraph graph;
    for (int i = 0; i < 4; ++i) {
        graph.nodes.push_back(geom::translate(2.0 * i, 0.0, -5.0));
    }
    for (int i = 1; i < 4; ++i) {
        DrEdge e;
        e.a = i - 1;
        e.b = i;
        e.rel = geom::translate(2.0, 0.0, 0.0);
        graph.dr_edges.push_back(e);
    }
    LcEdge lc;
    lc.a = 0;
    lc.b = 3;
    lc.z = geom::PlanarShift{6.0, 0.0};
    lc.q = Eigen::Matrix2d::Identity() * 0.01;
    graph.lc_edges.push_back(lc);

    OptimizeReport report;
    const auto poses = optimize(graph, &report);
    for (int i = 0; i < 4; ++i) {
        CHECK((poses[i].translation - graph.nodes[i].translation).norm() < 1e-6);
    }
    CHECK(report.final_cost <= report.initial_cost + 1e-15);
}

TEST_CASE("optimize recovers a corrupted middle node") {
    // DR measurements and the LC are exact; only the initial estimate of the
    // middle node is off. The zero-residual optimum is the true chain.
    PoseGraph graph;
    graph.nodes.push_back(geom::translate(0, 0, 0));
    graph.nodes.push_back(geom::translate(1.7, -0.4, 0));  // truth (1, 0, 0)
    graph.nodes.push_back(geom::translate(2, 0, 0));
    for (int i = 1; i < 3; ++i) {
        DrEdge e;
        e.a = i - 1;
        e.b = i;
        e.rel = geom::translate(1.0, 0.0, 0.0);
        e.sigma = geom::Vec3(0.1, 0.1, 0.05);
        graph.dr_edges.push_back(e);
    }
    LcEdge lc;
    lc.a = 0;
    lc.b = 2;
    lc.z = geom::PlanarShift{2.0, 0.0};
    lc.q = Eigen::Matrix2d::Identity() * 1e-4;
    graph.lc_edges.push_back(lc);

    const auto poses = optimize(graph);
    CHECK((poses[1].translation - geom::Vec3(1, 0, 0)).norm() < 1e-3);
    CHECK((poses[2].translation - geom::Vec3(2, 0, 0)).norm() < 1e-3);
}

TEST_CASE("optimize never increases the cost") {
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        PoseGraph graph;
        const int n = 6;
        for (int i = 0; i < n; ++i) {
            graph.nodes.push_back(geom::compose(
                geom::translate(3.0 * i + rng.normal(0, 0.5), rng.normal(0, 0.5), 0),
                geom::rot_z(rng.normal(0, 0.1))));
        }
        for (int i = 1; i < n; ++i) {
            DrEdge e;
            e.a = i - 1;
            e.b = i;
            e.rel = geom::translate(3.0 + rng.normal(0, 0.1), rng.normal(0, 0.1), 0);
            graph.dr_edges.push_back(e);
        }
        LcEdge lc;
        lc.a = 0;
        lc.b = n - 1;
        lc.z = geom::PlanarShift{3.0 * (n - 1), 0.0};
        lc.q = Eigen::Matrix2d::Identity() * 0.01;
        graph.lc_edges.push_back(lc);

        OptimizeReport report;
        (void)optimize(graph, &report);
        CHECK(report.final_cost <= report.initial_cost * (1.0 + 1e-12));
    }
}

TEST_CASE("rmse_xyz") {
    std::vector<RigidTransform> a, b;
    for (int i = 0; i < 4; ++i) {
        a.push_back(geom::translate(i, 0, 0));
        b.push_back(geom::translate(i, 0, 0));
    }
    CHECK(rmse_xyz(a, b) == 0.0);

    for (auto& t : b) t.translation += geom::Vec3(3, 4, 0);
    CHECK(rmse_xyz(a, b) == doctest::Approx(5.0).epsilon(1e-12));

    b = a;
    b[1].translation += geom::Vec3(0, 0, 2);
    CHECK(rmse_xyz(a, b) == doctest::Approx(1.0).epsilon(1e-12));

    b.pop_back();
    CHECK_THROWS_AS((void)rmse_xyz(a, b), LengthMismatch);
}

TEST_CASE("map_to_map") {
    std::vector<Submap> submaps;
    submaps.push_back(rect_submap(0, 0, 10, 10, -40, 0));
    submaps.push_back(rect_submap(0, 0, 10, 10, -40, 1));
    std::vector<RigidTransform> gt{submaps[0].frame, submaps[1].frame};
    const std::vector<std::pair<int, int>> pairs{{0, 1}};

    SUBCASE("perfectly consistent maps score zero") {
        CHECK(map_to_map(submaps, gt, gt, pairs) == 0.0);
    }
    SUBCASE("a one-meter lift scores one") {
        auto est = gt;
        est[1].translation.z() += 1.0;
        CHECK(map_to_map(submaps, gt, est, pairs) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("pair order does not matter") {
        auto est = gt;
        est[1].translation.x() += 0.7;
        est[1].translation.z() += 0.3;
        const std::vector<std::pair<int, int>> fwd{{0, 1}};
        const std::vector<std::pair<int, int>> rev{{1, 0}};
        CHECK(map_to_map(submaps, gt, est, fwd) ==
              doctest::Approx(map_to_map(submaps, gt, est, rev)).epsilon(1e-12));
    }
    SUBCASE("no overlap raises") {
        std::vector<Submap> apart;
        apart.push_back(rect_submap(0, 0, 5, 5, -40, 0));
        apart.push_back(rect_submap(100, 100, 5, 5, -40, 1));
        std::vector<RigidTransform> poses{apart[0].frame, apart[1].frame};
        CHECK_THROWS_AS((void)map_to_map(apart, poses, poses, pairs), NoOverlap);
        CHECK_THROWS_AS((void)map_to_map(submaps, gt, gt, {}), NoOverlap);
    }
}

TEST_CASE("graph text round trip") {
    const cli::RunConfig cfg = survey_config();
    const auto field = cfg.make_field();
    const auto survey =
        synthworld::simulate_survey(field, cfg.plan, cfg.submap_length, cfg.seed);
    CorruptionConfig corruption;
    corruption.seed = 7;
    BuildResult result = build_corrupted_graph(survey.submaps, cfg.policy, cfg.gicp, corruption);
    for (auto& e : result.graph.lc_edges) {
        e.q << 0.5, 0.1, 0.1, 0.8;
    }

    const auto dir = std::filesystem::temp_directory_path() / "bathykl_test_graph";
    std::filesystem::create_directories(dir);
    save_graph(dir / "g.txt", result.graph);
    const PoseGraph loaded = load_graph(dir / "g.txt");

    REQUIRE(loaded.nodes.size() == result.graph.nodes.size());
    REQUIRE(loaded.dr_edges.size() == result.graph.dr_edges.size());
    REQUIRE(loaded.lc_edges.size() == result.graph.lc_edges.size());
    for (std::size_t i = 0; i < loaded.nodes.size(); ++i) {
        CHECK((loaded.nodes[i].translation - result.graph.nodes[i].translation).norm() < 1e-12);
        CHECK((loaded.nodes[i].rotation - result.graph.nodes[i].rotation).norm() < 1e-9);
    }
    for (std::size_t i = 0; i < loaded.dr_edges.size(); ++i) {
        CHECK(loaded.dr_edges[i].a == result.graph.dr_edges[i].a);
        CHECK((loaded.dr_edges[i].rel.translation -
               result.graph.dr_edges[i].rel.translation).norm() < 1e-12);
        CHECK((loaded.dr_edges[i].sigma - result.graph.dr_edges[i].sigma).norm() < 1e-9);
    }
    for (std::size_t i = 0; i < loaded.lc_edges.size(); ++i) {
        CHECK(loaded.lc_edges[i].z.dx == doctest::Approx(result.graph.lc_edges[i].z.dx));
        CHECK((loaded.lc_edges[i].q - result.graph.lc_edges[i].q).norm() < 1e-9);
    }

    // Optimizing the loaded graph matches optimizing the original.
    const auto poses_a = optimize(result.graph);
    const auto poses_b = optimize(loaded);
    for (std::size_t i = 0; i < poses_a.size(); ++i) {
        CHECK((poses_a[i].translation - poses_b[i].translation).norm() < 1e-6);
    }
}

TEST_SUITE_END();
