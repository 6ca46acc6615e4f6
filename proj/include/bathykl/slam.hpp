#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "bathykl/cloud.hpp"
#include "bathykl/mccov.hpp"
#include "bathykl/registration.hpp"

namespace bathykl::slam {

using cloud::Submap;
using geom::PlanarShift;
using geom::RigidTransform;
using mccov::CovMatrix2;
using mccov::PerturbationPrior;

/// Odometry edge between consecutive nodes. The planar information lives on
/// (x, y, yaw); unconstrained dimensions carry zero information.
struct DrEdge {
    int a = 0, b = 0;  // b == a + 1
    RigidTransform rel;  // measured relative transform, frame a -> b
    geom::Vec3 sigma{0.1, 0.1, 0.1};  // std devs (x m, y m, yaw rad)
};

/// Loop-closure edge: planar offset of node b seen from node a's frame,
/// weighted by the covariance assigned to the registered (candidate) submap.
struct LcEdge {
    int a = 0, b = 0;  // a = prior node, b = candidate node
    PlanarShift z;
    CovMatrix2 q = CovMatrix2::Identity();
    registration::NaiveInformation naive;  // baseline information from the registration
};

struct PoseGraph {
    std::vector<RigidTransform> nodes;  // initial estimates; node 0 is the anchor
    std::vector<DrEdge> dr_edges;
    std::vector<LcEdge> lc_edges;
};

struct CorruptionConfig {
    // Per-step additive noise covariance, ordered [tx ty tz rx ry rz].
    // Default models yaw drift only.
    Eigen::Matrix<double, 6, 6> rc = [] {
        Eigen::Matrix<double, 6, 6> m = Eigen::Matrix<double, 6, 6>::Zero();
        m(5, 5) = 0.01;
        return m;
    }();
    std::uint64_t seed = 0;
};

struct LcPolicy {
    double coverage = 0.6;  // min fraction of candidate points inside a prior footprint
    PerturbationPrior prior;
    geom::Vec3 dr_sigma{0.1, 0.1, 0.1};  // DR edge weights (x m, y m, yaw rad)

    void validate() const;
};

/// Fraction of the candidate's points whose xy projection falls inside the
/// prior's xy convex footprint.
double footprint_overlap(const Submap& candidate, const Submap& prior);

/// Indices of priors with footprint_overlap >= policy.coverage.
std::vector<int> detect_lc(const Submap& candidate, std::span<const Submap> priors,
                           const LcPolicy& policy);

struct BuildResult {
    PoseGraph graph;
    std::vector<RigidTransform> gt_poses;
    std::vector<int> lc_candidate_ids;  // submap ids that got at least one LC edge
    int n_lc_dropped = 0;               // registrations that failed
};

/// Chains DR edges over consecutive submaps; for every loop-closure
/// detection perturbs the candidate with a draw from the prior, registers it
/// against the fused matched submaps, and adds LC edges carrying the
/// corrected measurement. The finished graph is then corrupted by
/// integrating per-step noise from `corruption` along the DR chain: both the
/// DR measurements and the initial node estimates carry the drift, so the
/// optimum stays away from ground truth and the LC weights decide how much
/// of the error the optimizer can remove.
BuildResult build_corrupted_graph(std::span<const Submap> submaps, const LcPolicy& policy,
                                  const registration::GicpConfig& gicp,
                                  const CorruptionConfig& corruption);

struct OptimizeReport {
    double initial_cost = 0.0;
    double final_cost = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// Levenberg-Marquardt on the planar states (x, y, yaw) with node 0 fixed.
/// z, roll and pitch are carried through unchanged.
std::vector<RigidTransform> optimize(const PoseGraph& graph, OptimizeReport* report = nullptr);

/// Root-mean-square Euclidean position error, paired by index. No alignment.
double rmse_xyz(std::span<const RigidTransform> estimated, std::span<const RigidTransform> gt);

/// RMS of per-cell |mean z difference| over the co-occupied cells of every
/// listed pair, with submaps re-expressed at the estimated poses.
double map_to_map(std::span<const Submap> submaps, std::span<const RigidTransform> gt_poses,
                  std::span<const RigidTransform> estimated_poses,
                  std::span<const std::pair<int, int>> pairs, double cell_size = 1.0);

// Text format: "NODE id tx ty tz qw qx qy qz",
// "EDGE_DR i j <7 pose numbers> <21 upper-triangle information values>",
// "EDGE_LC i j dx dy ixx ixy iyy". Information = inverse covariance.
void save_graph(const std::filesystem::path& path, const PoseGraph& graph);
PoseGraph load_graph(const std::filesystem::path& path);

}  // namespace bathykl::slam
