#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bathykl/cloud.hpp"
#include "bathykl/registration.hpp"

namespace bathykl::mccov {

using cloud::NormalizedCloud;
using cloud::Submap;
using geom::PlanarShift;

/// Symmetric positive-(semi)definite 2x2 covariance in m^2.
using CovMatrix2 = Eigen::Matrix2d;

/// Isotropic Gaussian prior over planar perturbations, covariance a*I.
struct PerturbationPrior {
    double a = 9.0;

    Eigen::Matrix2d sigma() const { return a * Eigen::Matrix2d::Identity(); }
    void validate() const;
};

struct McConfig {
    int iterations = 1000;                    // L
    geom::Vec3 sigma_xyz{0.0, 0.0, 0.1};      // sensor noise applied to the perturbed copy
    std::uint64_t seed = 0;
    double max_failure_fraction = 0.2;

    void validate() const;
};

PlanarShift sample_perturbation(const PerturbationPrior& prior, std::uint64_t seed);

struct McStats {
    int attempted = 0;
    int failed = 0;
};

/// Eq.-style Monte-Carlo estimate: L times, shift a copy of `s` by a draw
/// from the prior, add sensor noise, register it back against `s` from
/// init 0; the residual errors' scatter matrix (divisor L_valid - 1) is the
/// covariance. Per-iteration RNG streams are hash(seed, submap_id, l), so
/// the result is independent of thread count.
CovMatrix2 mc_covariance(const Submap& s, const PerturbationPrior& prior, const McConfig& cfg,
                         const registration::GicpConfig& gicp, int threads = 1,
                         McStats* stats = nullptr);

struct DatasetEntry {
    std::int64_t submap_id = 0;
    NormalizedCloud cloud;
    CovMatrix2 target_cov = CovMatrix2::Identity();
};

/// Per submap: preprocess to a normalized cloud, run the MC estimate on the
/// raw metric points, emit an entry. Targets stay in m^2; inputs are
/// unitless.
std::vector<DatasetEntry> build_dataset(std::span<const Submap> submaps,
                                        const PerturbationPrior& prior, const McConfig& cfg,
                                        const registration::GicpConfig& gicp, double voxel_size,
                                        int threads = 1);

/// Element-wise mean of the target covariances (the Constant-Q baseline).
CovMatrix2 constant_q(std::span<const DatasetEntry> dataset);

}  // namespace bathykl::mccov
