#include "bathykl/geom.hpp"

#include <Eigen/Geometry>
#include <cmath>

namespace bathykl::geom {

namespace {

Mat3 skew(const Vec3& w) {
    Mat3 s;
    s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
    return s;
}

// Gram-Schmidt on the rows, then restore det +1.
Mat3 reorthonormalize(const Mat3& r) {
    Vec3 x = r.row(0).normalized();
    Vec3 y = (r.row(1).transpose() - x * x.dot(r.row(1))).normalized();
    Vec3 z = x.cross(y);
    Mat3 out;
    out.row(0) = x;
    out.row(1) = y;
    out.row(2) = z;
    return out;
}

}  // namespace

RigidTransform translate(double x, double y, double z) {
    RigidTransform t;
    t.translation = Vec3(x, y, z);
    return t;
}

RigidTransform rot_z(double yaw) {
    RigidTransform t;
    const double c = std::cos(yaw), s = std::sin(yaw);
    t.rotation << c, -s, 0, s, c, 0, 0, 0, 1;
    return t;
}

double orthonormality_drift(const Mat3& rotation) {
    return (rotation.transpose() * rotation - Mat3::Identity()).norm();
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    RigidTransform out;
    out.rotation = a.rotation * b.rotation;
    out.translation = a.rotation * b.translation + a.translation;
    if (orthonormality_drift(out.rotation) > 1e-7) {
        out.rotation = reorthonormalize(out.rotation);
    }
    return out;
}

RigidTransform inverse(const RigidTransform& t) {
    RigidTransform out;
    out.rotation = t.rotation.transpose();
    out.translation = -(out.rotation * t.translation);
    return out;
}

RigidTransform relative(const RigidTransform& t_i, const RigidTransform& t_j) {
    return compose(inverse(t_i), t_j);
}

RigidTransform exp_map(const TangentVector& v) {
    const Vec3 rho = v.head<3>();
    const Vec3 phi = v.tail<3>();
    const double theta = phi.norm();
    const Mat3 w = skew(phi);

    RigidTransform out;
    if (theta < 1e-9) {
        // Second-order series; below 1e-9 the truncation is ~1e-27.
        out.rotation = Mat3::Identity() + w + 0.5 * w * w;
        out.translation = (Mat3::Identity() + 0.5 * w) * rho;
        return out;
    }
    const double a = std::sin(theta) / theta;
    const double b = (1.0 - std::cos(theta)) / (theta * theta);
    const double c = (theta - std::sin(theta)) / (theta * theta * theta);
    out.rotation = Mat3::Identity() + a * w + b * w * w;
    const Mat3 v_left = Mat3::Identity() + b * w + c * w * w;
    out.translation = v_left * rho;
    return out;
}

TangentVector log_map(const RigidTransform& t) {
    const double trace = t.rotation.trace();
    const double cos_theta = std::min(1.0, std::max(-1.0, (trace - 1.0) / 2.0));
    const double theta = std::acos(cos_theta);
    if (theta > M_PI - 1e-6) {
        throw AngleAtBoundary("log_map: rotation angle within 1e-6 of pi");
    }

    Vec3 phi;
    Mat3 v_inv;
    if (theta < 1e-9) {
        const Mat3 w = 0.5 * (t.rotation - t.rotation.transpose());
        phi = Vec3(w(2, 1), w(0, 2), w(1, 0));
        v_inv = Mat3::Identity() - 0.5 * skew(phi);
    } else {
        const double s = 2.0 * std::sin(theta);
        phi = theta / s *
              Vec3(t.rotation(2, 1) - t.rotation(1, 2), t.rotation(0, 2) - t.rotation(2, 0),
                   t.rotation(1, 0) - t.rotation(0, 1));
        const Mat3 w = skew(phi);
        const double coeff =
            1.0 / (theta * theta) - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
        v_inv = Mat3::Identity() - 0.5 * w + coeff * w * w;
    }

    TangentVector v;
    v.head<3>() = v_inv * t.translation;
    v.tail<3>() = phi;
    return v;
}

PointMatrix apply(const RigidTransform& t, const PointMatrix& points) {
    PointMatrix out = points * t.rotation.transpose();
    out.rowwise() += t.translation.transpose();
    return out;
}

Vec3 apply(const RigidTransform& t, const Vec3& p) { return t.rotation * p + t.translation; }

double yaw_of(const RigidTransform& t) { return std::atan2(t.rotation(1, 0), t.rotation(0, 0)); }

std::array<double, 7> pose_to_seven(const RigidTransform& t) {
    Eigen::Quaterniond q(t.rotation);
    q.normalize();
    if (q.w() < 0) {
        q.coeffs() = -q.coeffs();
    }
    return {t.translation.x(), t.translation.y(), t.translation.z(), q.w(), q.x(), q.y(), q.z()};
}

RigidTransform pose_from_seven(const std::array<double, 7>& p) {
    RigidTransform t;
    t.translation = Vec3(p[0], p[1], p[2]);
    Eigen::Quaterniond q(p[3], p[4], p[5], p[6]);
    q.normalize();
    t.rotation = q.toRotationMatrix();
    return t;
}

}  // namespace bathykl::geom
