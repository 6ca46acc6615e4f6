#pragma once

#include <Eigen/Core>
#include <array>

#include "bathykl/errors.hpp"

namespace bathykl::geom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Unordered point set, one point per row (x y z).
using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// Tangent-space element, ordered [tx ty tz rx ry rz].
using TangentVector = Eigen::Matrix<double, 6, 1>;

/// Rigid-body transform. Rotation kept orthonormal (det +1); compose()
/// re-orthonormalizes when accumulated drift exceeds 1e-7.
struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static RigidTransform identity() { return {}; }
};

/// Planar x/y offset, the M=2 restriction of a tangent vector.
struct PlanarShift {
    double dx = 0.0;
    double dy = 0.0;

    TangentVector to_tangent() const {
        TangentVector v = TangentVector::Zero();
        v[0] = dx;
        v[1] = dy;
        return v;
    }
    Eigen::Vector2d to_vector() const { return {dx, dy}; }
};

RigidTransform translate(double x, double y, double z);
RigidTransform rot_z(double yaw);

RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform inverse(const RigidTransform& t);

/// Relative transform between two frames: inverse(t_i) * t_j.
RigidTransform relative(const RigidTransform& t_i, const RigidTransform& t_j);

/// Closed-form Rodrigues exponential.
RigidTransform exp_map(const TangentVector& v);

/// Inverse of exp_map. Throws AngleAtBoundary when the rotation angle is
/// within 1e-6 of pi.
TangentVector log_map(const RigidTransform& t);

/// R * p + t for every row of `points`.
PointMatrix apply(const RigidTransform& t, const PointMatrix& points);
Vec3 apply(const RigidTransform& t, const Vec3& p);

/// Yaw angle of a transform whose rotation is about z (used by the planar
/// SLAM state).
double yaw_of(const RigidTransform& t);

/// Frobenius norm of R^T R - I.
double orthonormality_drift(const Mat3& rotation);

/// Serialization order used by all text/binary pose formats:
/// tx ty tz qw qx qy qz, unit quaternion with qw >= 0.
std::array<double, 7> pose_to_seven(const RigidTransform& t);
RigidTransform pose_from_seven(const std::array<double, 7>& p);

}  // namespace bathykl::geom
