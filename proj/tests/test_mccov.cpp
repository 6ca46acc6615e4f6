#include <doctest.h>

#include <Eigen/Dense>

#include "bathykl/errors.hpp"
#include "bathykl/mccov.hpp"
#include "bathykl/synthworld.hpp"

using namespace bathykl;
using namespace bathykl::mccov;

namespace {

cloud::Submap grid_submap(const synthworld::TerrainField& field, double w, double h,
                          double spacing, std::int64_t id = 0) {
    cloud::Submap s;
    s.id = id;
    const int nx = static_cast<int>(w / spacing) + 1;
    const int ny = static_cast<int>(h / spacing) + 1;
    s.points.resize(static_cast<Eigen::Index>(nx) * ny, 3);
    Eigen::Index row = 0;
    for (int i = 0; i < nx; ++i) {
        for (int j = 0; j < ny; ++j) {
            const double x = i * spacing, y = j * spacing;
            s.points.row(row++) << x, y, synthworld::height(field, x, y);
        }
    }
    return s;
}

// A single broad bump spanning the patch: the registration cost has one
// basin over the whole perturbation range, so recovery is near exact.
synthworld::TerrainField featured_field() {
    synthworld::TerrainField field;
    field.base_depth = -40.0;
    synthworld::TerrainComponent b;
    b.kind = synthworld::TerrainComponent::Kind::GaussianBump;
    b.amplitude = 6.0;
    b.length_scale = 8.0;
    b.x = 20.0;
    b.y = 15.0;
    field.components = {b};
    return field;
}

}  // namespace

TEST_SUITE_BEGIN("unit");

TEST_CASE("sample_perturbation statistics and determinism") {
    PerturbationPrior prior;
    prior.a = 9.0;

    const geom::PlanarShift a = sample_perturbation(prior, 42);
    const geom::PlanarShift b = sample_perturbation(prior, 42);
    CHECK(a.dx == b.dx);
    CHECK(a.dy == b.dy);

    double sum_x2 = 0.0, sum_y2 = 0.0, sum_x = 0.0, sum_y = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const geom::PlanarShift s = sample_perturbation(prior, 1000 + i);
        sum_x += s.dx;
        sum_y += s.dy;
        sum_x2 += s.dx * s.dx;
        sum_y2 += s.dy * s.dy;
    }
    const double var_x = sum_x2 / n - (sum_x / n) * (sum_x / n);
    const double var_y = sum_y2 / n - (sum_y / n) * (sum_y / n);
    CHECK(var_x >= 8.7);
    CHECK(var_x <= 9.3);
    CHECK(var_y >= 8.7);
    CHECK(var_y <= 9.3);

    PerturbationPrior tiny;
    tiny.a = 1e-12;
    const geom::PlanarShift s = sample_perturbation(tiny, 1);
    CHECK(std::abs(s.dx) < 1e-5);
    CHECK(std::abs(s.dy) < 1e-5);
}

TEST_CASE("mc_covariance on featured terrain without noise is tight") {
    const cloud::Submap s = grid_submap(featured_field(), 40, 30, 1.0);
    PerturbationPrior prior;
    McConfig mc;
    mc.iterations = 100;
    mc.sigma_xyz.setZero();
    mc.seed = 3;
    registration::GicpConfig gicp;
    const CovMatrix2 q = mc_covariance(s, prior, mc, gicp, 2);
    CHECK(q.trace() < 0.01);
    CHECK((q - q.transpose()).norm() < 1e-15);
    Eigen::SelfAdjointEigenSolver<CovMatrix2> eig(q);
    CHECK(eig.eigenvalues()(0) >= 0.0);
}

TEST_CASE("mc_covariance requires at least two iterations") {
    const cloud::Submap s = grid_submap(featured_field(), 20, 16, 1.0);
    PerturbationPrior prior;
    McConfig mc;
    mc.iterations = 1;
    registration::GicpConfig gicp;
    CHECK_THROWS_AS((void)mc_covariance(s, prior, mc, gicp), InsufficientIterations);
}

TEST_CASE("mc_covariance is deterministic and thread-count independent") {
    const cloud::Submap s = grid_submap(featured_field(), 20, 16, 1.0, 5);
    PerturbationPrior prior;
    McConfig mc;
    mc.iterations = 40;
    mc.seed = 17;
    registration::GicpConfig gicp;
    const CovMatrix2 q1 = mc_covariance(s, prior, mc, gicp, 1);
    const CovMatrix2 q2 = mc_covariance(s, prior, mc, gicp, 2);
    CHECK((q1 - q2).norm() == 0.0);
    const CovMatrix2 q3 = mc_covariance(s, prior, mc, gicp, 2);
    CHECK((q1 - q3).norm() == 0.0);
}

TEST_CASE("far-flung failures are counted and raised") {
    // A tiny cluster with a small correspondence radius: most 3-sigma
    // perturbations leave no matches.
    cloud::Submap s;
    s.id = 0;
    s.points.resize(25, 3);
    Eigen::Index row = 0;
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 5; ++j) s.points.row(row++) << i * 0.05, j * 0.05, 0.0;
    }
    PerturbationPrior prior;
    prior.a = 9.0;
    McConfig mc;
    mc.iterations = 50;
    mc.sigma_xyz.setZero();
    registration::GicpConfig gicp;
    gicp.max_correspondence_distance = 0.3;
    gicp.k_neighbors = 5;
    CHECK_THROWS_AS((void)mc_covariance(s, prior, mc, gicp), TooManyFailures);
}

TEST_CASE("build_dataset assembles entries per submap") {
    std::vector<cloud::Submap> submaps;
    for (int i = 0; i < 3; ++i) {
        submaps.push_back(grid_submap(featured_field(), 20, 16, 1.0, 10 + i));
    }
    PerturbationPrior prior;
    McConfig mc;
    mc.iterations = 20;
    mc.seed = 9;
    registration::GicpConfig gicp;
    const auto dataset = build_dataset(submaps, prior, mc, gicp, 0.05, 2);
    REQUIRE(dataset.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(dataset[i].submap_id == 10 + i);
        CHECK(dataset[i].cloud.points.rows() > 0);
        CHECK(dataset[i].cloud.points.rowwise().norm().maxCoeff() <= 1.0 + 1e-9);
    }

    const auto empty = build_dataset(std::span<const cloud::Submap>{}, prior, mc, gicp, 0.05);
    CHECK(empty.empty());
}

TEST_CASE("ridge-aligned submaps slide along the ridge") {
    // Ridge along y: x is locked by the slope, y is free.
    synthworld::TerrainField field;
    field.base_depth = -40.0;
    synthworld::TerrainComponent r;
    r.kind = synthworld::TerrainComponent::Kind::Ridge;
    r.amplitude = 4.0;
    r.length_scale = 2.5;
    r.x = 15.0;
    r.y = 0.0;
    r.orientation = M_PI / 2.0;  // axis along y
    field.components = {r};
    const cloud::Submap s = grid_submap(field, 30, 24, 0.75, 3);

    PerturbationPrior prior;
    McConfig mc;
    mc.iterations = 150;
    mc.seed = 21;
    registration::GicpConfig gicp;
    const CovMatrix2 q = mc_covariance(s, prior, mc, gicp, 2);
    CHECK(q(1, 1) / q(0, 0) >= 2.0);
}

TEST_CASE("constant_q") {
    DatasetEntry a, b;
    a.target_cov = CovMatrix2::Identity();
    b.target_cov = 3.0 * CovMatrix2::Identity();
    const std::vector<DatasetEntry> two{a, b};
    CHECK((constant_q(two) - 2.0 * CovMatrix2::Identity()).norm() < 1e-15);

    const std::vector<DatasetEntry> one{a};
    CHECK((constant_q(one) - CovMatrix2::Identity()).norm() == 0.0);

    CHECK_THROWS_AS((void)constant_q(std::span<const DatasetEntry>{}), EmptyDataset);

    // Mean of PSD matrices stays PSD.
    Rng rng(55);
    std::vector<DatasetEntry> mixed;
    for (int i = 0; i < 10; ++i) {
        Eigen::Matrix2d m;
        m << rng.normal(), rng.normal(), rng.normal(), rng.normal();
        DatasetEntry e;
        e.target_cov = m * m.transpose();
        mixed.push_back(e);
    }
    Eigen::SelfAdjointEigenSolver<CovMatrix2> eig(constant_q(mixed));
    CHECK(eig.eigenvalues()(0) >= -1e-12);
}

TEST_SUITE_END();
