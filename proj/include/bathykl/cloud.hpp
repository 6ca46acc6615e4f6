#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "bathykl/geom.hpp"
#include "bathykl/rng.hpp"

namespace bathykl::cloud {

using geom::Mat3;
using geom::PointMatrix;
using geom::Vec3;

/// A bounded patch of seabed points with the vehicle pose attached.
/// Points are stored in the common (world) frame.
struct Submap {
    std::int64_t id = 0;
    PointMatrix points;
    geom::RigidTransform frame;

    void validate() const;  // throws DegenerateCloud on empty / non-finite points
};

/// Zero-meaned, sphere-normalized, voxelized point set. Unitless.
struct NormalizedCloud {
    PointMatrix points;
    std::int64_t source_id = 0;
};

/// kd-tree over a fixed point set. Build is single-writer; queries are
/// read-only and safe from any number of threads.
class NeighborIndex {
public:
    NeighborIndex() = default;
    explicit NeighborIndex(PointMatrix points);

    /// Indices of the min(k, U) nearest points, ascending distance,
    /// equal distances broken by insertion order.
    std::vector<int> knn(const Vec3& query, int k) const;

    /// Nearest point index and its Euclidean distance.
    std::pair<int, double> nearest(const Vec3& query) const;

    const PointMatrix& points() const { return points_; }
    int size() const { return static_cast<int>(points_.rows()); }

private:
    struct Node {
        int axis = -1;      // -1 marks a leaf
        double split = 0.0;
        int begin = 0, end = 0;  // leaf range into order_
        int left = -1, right = -1;
    };

    int build(int begin, int end);
    template <class Visitor>
    void search(int node, const Vec3& query, double& worst, Visitor&& visit) const;

    PointMatrix points_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

/// Centroid-per-voxel downsampling. Voxel indices are taken relative to the
/// cloud's min corner so a cloud that fits in one voxel_size cube collapses
/// to a single centroid wherever it sits.
PointMatrix voxel_downsample(const PointMatrix& points, double voxel_size);

/// Zero-mean, scale by 1/max||p||, voxelize. Throws DegenerateCloud when all
/// points coincide.
NormalizedCloud preprocess(const Submap& s, double voxel_size);

/// Standard deviation of the z coordinates of a normalized cloud; the
/// feature-richness proxy reported by the synth command.
double sigma_z(const NormalizedCloud& c);

/// Plane-regularized per-point covariances: the k-NN neighborhood covariance
/// with eigenvalues replaced by (epsilon, 1, 1), smallest along the local
/// normal.
struct PointCovariances {
    std::vector<Mat3> cov;
};

PointCovariances point_covariances(const PointMatrix& points, const NeighborIndex& index, int k,
                                   double epsilon);
PointCovariances point_covariances(const Submap& s, int k, double epsilon);

/// Independent zero-mean Gaussian perturbation per point per axis.
Submap add_noise(const Submap& s, const Vec3& sigma_xyz, std::uint64_t seed);

// --- file formats -----------------------------------------------------------
// Text:   "BATHYKL-SUBMAP v1" / pose line (tx ty tz qw qx qy qz) / "x y z" rows.
// Binary: magic "BKSM", then u64 point count, 7 f64 pose, U*3 f64 points,
//         all little-endian.

void save_submap_text(const std::filesystem::path& path, const Submap& s);
Submap load_submap_text(const std::filesystem::path& path, std::int64_t id = 0);
void save_submap_binary(const std::filesystem::path& path, const Submap& s);
Submap load_submap_binary(const std::filesystem::path& path, std::int64_t id = 0);

/// Dispatch on magic bytes.
Submap load_submap(const std::filesystem::path& path, std::int64_t id = 0);

}  // namespace bathykl::cloud
