#pragma once

#include <vector>

#include "bathykl/cloud.hpp"
#include "bathykl/geom.hpp"

namespace bathykl::registration {

using cloud::NeighborIndex;
using cloud::PointCovariances;
using cloud::Submap;
using geom::PlanarShift;

struct GicpConfig {
    int max_iterations = 50;
    double translation_tolerance = 1e-4;        // m
    double max_correspondence_distance = 5.0;   // m
    int k_neighbors = 20;
    double epsilon_plane = 1e-3;
    // Stop once the relative cost improvement falls below this. On noisy
    // terrain the sensor-noise floor dominates the cost, so translation
    // updates that only shuffle boundary matches plateau out here instead of
    // creeping for max_iterations.
    double cost_rel_tol = 1e-3;

    void validate() const;
};

enum class StopReason { Converged, CostPlateau, MaxIterations };

struct RegistrationResult {
    PlanarShift shift;
    bool converged = false;  // true iff the last update magnitude <= translation_tolerance
    int iterations = 0;
    double final_cost = 0.0;  // mean Mahalanobis cost over final correspondences
    int n_correspondences = 0;
    StopReason stop = StopReason::MaxIterations;
    std::vector<double> iteration_costs;  // mean cost at the start of each iteration
};

/// Target-side state reused across repeated registrations against the same
/// submap (Monte-Carlo runs, fused loop-closure targets).
struct PreparedTarget {
    NeighborIndex index;
    PointCovariances covariances;
};

PreparedTarget prepare_target(const Submap& target, const GicpConfig& cfg);

/// GICP constrained to x/y translation: iterates nearest-neighbor
/// correspondences and Gauss-Newton steps on the 2-vector t minimizing
/// sum d_i^T (C_tgt,i + C_src,i)^-1 d_i with d_i = (p_i + [t,0]) - q_i.
/// Throws NoCorrespondences when an iteration finds no matches.
RegistrationResult gicp_register_xy(const Submap& source, const PreparedTarget& target,
                                    PlanarShift init, const GicpConfig& cfg);
RegistrationResult gicp_register_xy(const Submap& source, const Submap& target, PlanarShift init,
                                    const GicpConfig& cfg);

/// Mean of the xy block of the per-correspondence information matrices, and
/// its (regularized) inverse. `jittered` is set when the mean had condition
/// number > 1e12 and diagonal jitter 1e-9 was added before inverting.
struct NaiveInformation {
    Eigen::Matrix2d information;
    Eigen::Matrix2d covariance;
    bool jittered = false;
};

NaiveInformation naive_information_xy(const Submap& source, const PreparedTarget& target,
                                      PlanarShift at, const GicpConfig& cfg);
NaiveInformation naive_information_xy(const Submap& source, const Submap& target, PlanarShift at,
                                      const GicpConfig& cfg);

}  // namespace bathykl::registration
